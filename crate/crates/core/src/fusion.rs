//! Late fusion of the environment and behavior classifiers: the fixed label
//! table, severity classes, and a trainable 8x8 linear fusion head.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior::{BehaviorLabel, NUM_BEHAVIORS};
use crate::nn::{GraphBuilder, LayerKind, ModelGraph, ParamKind};
use crate::quant::FloatTensor;

pub const NUM_ENVS: usize = 3;
pub const NUM_FUSED: usize = 8;
/// Width of the concatenated input: 3 environment + 5 behavior probabilities.
pub const FUSION_INPUTS: usize = NUM_ENVS + NUM_BEHAVIORS;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("{which} probabilities {values:?} are not a distribution")]
    NotDistribution { which: &'static str, values: Vec<f64> },
    #[error("fused label {0} outside 0..=7")]
    InvalidLabel(u8),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("graph is not a single fully_connected 8->8 layer")]
    NotFusionGraph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvLabel {
    /// Surrounded by other animals.
    Animal = 0,
    Grass = 1,
    Fence = 2,
}

impl EnvLabel {
    pub const ALL: [EnvLabel; NUM_ENVS] = [EnvLabel::Animal, EnvLabel::Grass, EnvLabel::Fence];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// Combined activity class 0..=7.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct FusedLabel(u8);

impl FusedLabel {
    pub fn new(v: u8) -> Result<Self, FusionError> {
        if (v as usize) < NUM_FUSED {
            Ok(Self(v))
        } else {
            Err(FusionError::InvalidLabel(v))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn all() -> impl Iterator<Item = FusedLabel> {
        (0..NUM_FUSED as u8).map(FusedLabel)
    }

    pub fn meaning(self) -> &'static str {
        [
            "resting in safe condition",
            "moving in safe condition",
            "feeding in stanchion in safe condition",
            "grazing in safe condition",
            "resting near fence",
            "grazing near fence",
            "attacking animals",
            "potential escaping",
        ][self.0 as usize]
    }
}

impl TryFrom<u8> for FusedLabel {
    type Error = FusionError;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<FusedLabel> for u8 {
    fn from(l: FusedLabel) -> u8 {
        l.0
    }
}

impl fmt::Display for FusedLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Severity {
    Green,
    Yellow,
    Red,
}

impl Severity {
    /// 0 for green, 1 for yellow, 2 for red.
    pub fn rank(self) -> u8 {
        self as u8
    }
}

// rows: Animal, Grass, Fence; columns: RES, MOV, ATT, FES, GRZ
const LABEL_TABLE: [[u8; NUM_BEHAVIORS]; NUM_ENVS] = [[0, 1, 6, 2, 3], [0, 1, 6, 2, 3], [4, 7, 7, 2, 5]];

pub fn map_labels_table(e: EnvLabel, b: BehaviorLabel) -> FusedLabel {
    FusedLabel(LABEL_TABLE[e.index()][b.index()])
}

pub fn severity_of(f: FusedLabel) -> Severity {
    match f.0 {
        0..=3 => Severity::Green,
        4 | 5 => Severity::Yellow,
        _ => Severity::Red,
    }
}

fn check_distribution(which: &'static str, p: &[f64]) -> Result<(), FusionError> {
    let ok = p.iter().all(|v| v.is_finite() && *v >= 0.0) && (p.iter().sum::<f64>() - 1.0).abs() <= 1e-3;
    if ok {
        Ok(())
    } else {
        Err(FusionError::NotDistribution { which, values: p.to_vec() })
    }
}

/// `scores = W [env; behavior] + b` with `W` stored row-major as
/// `[output][input]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionHead {
    pub weight: [[f64; FUSION_INPUTS]; NUM_FUSED],
    pub bias: [f64; NUM_FUSED],
}

impl Default for FusionHead {
    fn default() -> Self {
        Self { weight: [[0.0; FUSION_INPUTS]; NUM_FUSED], bias: [0.0; NUM_FUSED] }
    }
}

fn concat(env_p: &[f64; NUM_ENVS], beh_p: &[f64; NUM_BEHAVIORS]) -> [f64; FUSION_INPUTS] {
    let mut x = [0.0; FUSION_INPUTS];
    x[..NUM_ENVS].copy_from_slice(env_p);
    x[NUM_ENVS..].copy_from_slice(beh_p);
    x
}

fn softmax(scores: &[f64; NUM_FUSED]) -> [f64; NUM_FUSED] {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = scores.map(|s| (s - max).exp());
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in scores.iter().enumerate() {
        if *v > scores[best] {
            best = i;
        }
    }
    best
}

impl FusionHead {
    fn scores_unchecked(&self, x: &[f64; FUSION_INPUTS]) -> [f64; NUM_FUSED] {
        let mut out = self.bias;
        for (o, row) in out.iter_mut().zip(&self.weight) {
            *o += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
        out
    }

    /// Writes the head as a one-layer graph (`fully_connected` 8 -> 8).
    pub fn to_graph(&self) -> ModelGraph {
        let mut b = GraphBuilder::new(vec![FUSION_INPUTS]);
        let n = b.push(LayerKind::FullyConnected { in_features: FUSION_INPUTS, out_features: NUM_FUSED });
        let w = self.weight.iter().flatten().map(|&v| v as f32).collect();
        b.set_param(n, ParamKind::Weight, FloatTensor::new(vec![NUM_FUSED, FUSION_INPUTS], w).expect("finite head"));
        let bias = self.bias.iter().map(|&v| v as f32).collect();
        b.set_param(n, ParamKind::Bias, FloatTensor::new(vec![NUM_FUSED], bias).expect("finite head"));
        b.build().expect("fixed shape")
    }

    pub fn from_graph(g: &ModelGraph) -> Result<Self, FusionError> {
        let expected = LayerKind::FullyConnected { in_features: FUSION_INPUTS, out_features: NUM_FUSED };
        if g.layers().len() != 1 || g.layers()[0].kind != expected {
            return Err(FusionError::NotFusionGraph);
        }
        let mut head = Self::default();
        let w = g.param(0, ParamKind::Weight).data();
        for (k, row) in head.weight.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = w[k * FUSION_INPUTS + j] as f64;
            }
        }
        for (v, b) in head.bias.iter_mut().zip(g.param(0, ParamKind::Bias).data()) {
            *v = *b as f64;
        }
        Ok(head)
    }
}

/// Raw fused scores; the argmax is the fused decision.
pub fn fuse_probabilities(
    h: &FusionHead,
    env_p: &[f64; NUM_ENVS],
    beh_p: &[f64; NUM_BEHAVIORS],
) -> Result<[f64; NUM_FUSED], FusionError> {
    check_distribution("environment", env_p)?;
    check_distribution("behavior", beh_p)?;
    Ok(h.scores_unchecked(&concat(env_p, beh_p)))
}

/// Fused decision with the softmax of the scores for reporting.
pub fn fuse_decision(
    h: &FusionHead,
    env_p: &[f64; NUM_ENVS],
    beh_p: &[f64; NUM_BEHAVIORS],
) -> Result<(FusedLabel, [f64; NUM_FUSED]), FusionError> {
    let scores = fuse_probabilities(h, env_p, beh_p)?;
    Ok((FusedLabel(argmax(&scores) as u8), softmax(&scores)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionExample {
    pub env_p: [f64; NUM_ENVS],
    pub beh_p: [f64; NUM_BEHAVIORS],
    pub label: FusedLabel,
}

impl FusionExample {
    /// Labels the pair by applying the table to each modality's argmax.
    pub fn from_probabilities(env_p: [f64; NUM_ENVS], beh_p: [f64; NUM_BEHAVIORS]) -> Self {
        let e = EnvLabel::from_index(argmax(&env_p)).expect("3 entries");
        let b = BehaviorLabel::from_index(argmax(&beh_p)).expect("5 entries");
        Self { env_p, beh_p, label: map_labels_table(e, b) }
    }
}

/// The 15 one-hot (environment, behavior) combinations labeled by the table.
pub fn table_dataset() -> Vec<FusionExample> {
    let mut out = Vec::with_capacity(NUM_ENVS * NUM_BEHAVIORS);
    for e in EnvLabel::ALL {
        for b in BehaviorLabel::ALL {
            let mut env_p = [0.0; NUM_ENVS];
            env_p[e.index()] = 1.0;
            let mut beh_p = [0.0; NUM_BEHAVIORS];
            beh_p[b.index()] = 1.0;
            out.push(FusionExample::from_probabilities(env_p, beh_p));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    /// Mean cross-entropy before each epoch's update.
    pub losses: Vec<f64>,
    pub final_loss: f64,
    pub correct: usize,
    pub total: usize,
}

impl FitReport {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

pub fn fusion_accuracy(h: &FusionHead, data: &[FusionExample]) -> usize {
    data.iter().filter(|ex| argmax(&h.scores_unchecked(&concat(&ex.env_p, &ex.beh_p))) == ex.label.0 as usize).count()
}

/// Full-batch gradient descent on mean softmax cross-entropy. Weights start
/// uniform in +-0.01 from the seed, biases at zero.
pub fn fit_fusion_head(
    data: &[FusionExample],
    epochs: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<(FusionHead, FitReport), FusionError> {
    if data.is_empty() {
        return Err(FusionError::EmptyDataset);
    }
    for ex in data {
        check_distribution("environment", &ex.env_p)?;
        check_distribution("behavior", &ex.beh_p)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut head = FusionHead::default();
    for row in head.weight.iter_mut() {
        for w in row.iter_mut() {
            *w = rng.random_range(-0.01..=0.01);
        }
    }
    let n = data.len() as f64;
    let mut losses = Vec::with_capacity(epochs);
    let loss_of = |head: &FusionHead| -> f64 {
        data.iter()
            .map(|ex| -softmax(&head.scores_unchecked(&concat(&ex.env_p, &ex.beh_p)))[ex.label.0 as usize].ln())
            .sum::<f64>()
            / n
    };
    for epoch in 0..epochs {
        let mut gw = [[0.0; FUSION_INPUTS]; NUM_FUSED];
        let mut gb = [0.0; NUM_FUSED];
        let mut loss = 0.0;
        for ex in data {
            let x = concat(&ex.env_p, &ex.beh_p);
            let p = softmax(&head.scores_unchecked(&x));
            let y = ex.label.0 as usize;
            loss -= p[y].ln();
            for k in 0..NUM_FUSED {
                let d = (p[k] - if k == y { 1.0 } else { 0.0 }) / n;
                gb[k] += d;
                for j in 0..FUSION_INPUTS {
                    gw[k][j] += d * x[j];
                }
            }
        }
        loss /= n;
        if !loss.is_finite() {
            return Err(FusionError::NonFiniteLoss { epoch });
        }
        losses.push(loss);
        for k in 0..NUM_FUSED {
            head.bias[k] -= learning_rate * gb[k];
            for (w, g) in head.weight[k].iter_mut().zip(&gw[k]) {
                *w -= learning_rate * g;
            }
        }
    }
    let final_loss = loss_of(&head);
    if !final_loss.is_finite() {
        return Err(FusionError::NonFiniteLoss { epoch: epochs });
    }
    let correct = fusion_accuracy(&head, data);
    log::debug!("fusion head: loss {final_loss:.5}, {correct}/{} correct", data.len());
    Ok((head, FitReport { losses, final_loss, correct, total: data.len() }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::behavior::BehaviorLabel::*;
    use proptest::prelude::*;

    fn one_hot<const N: usize>(i: usize) -> [f64; N] {
        let mut v = [0.0; N];
        v[i] = 1.0;
        v
    }

    #[test]
    fn table_cells() {
        use EnvLabel::*;
        assert_eq!(map_labels_table(Animal, Att).value(), 6);
        assert_eq!(map_labels_table(Fence, Mov).value(), 7);
        assert_eq!(map_labels_table(Grass, Res).value(), 0);
        let expected = [[0, 1, 6, 2, 3], [0, 1, 6, 2, 3], [4, 7, 7, 2, 5]];
        for e in EnvLabel::ALL {
            for b in BehaviorLabel::ALL {
                assert_eq!(map_labels_table(e, b).value(), expected[e.index()][b.index()]);
                if e == Fence && b != Fes {
                    assert_ne!(severity_of(map_labels_table(e, b)), Severity::Green);
                }
            }
        }
    }

    #[test]
    fn severity_partition() {
        let s: Vec<Severity> = FusedLabel::all().map(severity_of).collect();
        assert_eq!(s[0], Severity::Green);
        assert_eq!(s[5], Severity::Yellow);
        assert_eq!(s[7], Severity::Red);
        let count = |x| s.iter().filter(|v| **v == x).count();
        assert_eq!((count(Severity::Green), count(Severity::Yellow), count(Severity::Red)), (4, 2, 2));
        assert!(FusedLabel::new(8).is_err());
    }

    #[test]
    fn passthrough_and_bias_heads() {
        let mut h = FusionHead::default();
        for k in 0..NUM_ENVS {
            h.weight[k][k] = 1.0;
        }
        let env = [0.2, 0.7, 0.1];
        let beh = [0.2; 5];
        let s = fuse_probabilities(&h, &env, &beh).unwrap();
        assert_eq!(argmax(&s), 1);

        let mut h = FusionHead::default();
        h.bias[2] = 1.0;
        for e in 0..3 {
            for b in 0..5 {
                let (l, p) = fuse_decision(&h, &one_hot(e), &one_hot(b)).unwrap();
                assert_eq!(l.value(), 2);
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert!(fuse_probabilities(&h, &[0.5, 0.5, 0.5], &beh).is_err());
        assert!(fuse_probabilities(&h, &env, &[-0.2, 0.4, 0.4, 0.2, 0.2]).is_err());
    }

    #[test]
    fn hand_built_fence_boost_realizes_table() {
        // behavior votes: table label under Animal/Grass +2, under Fence +1
        // (+3 when both agree); Fence environment adds +2 to labels 4, 5, 7.
        let mut h = FusionHead::default();
        for b in BehaviorLabel::ALL {
            let ag = LABEL_TABLE[0][b.index()] as usize;
            let f = LABEL_TABLE[2][b.index()] as usize;
            h.weight[ag][NUM_ENVS + b.index()] += 2.0;
            h.weight[f][NUM_ENVS + b.index()] += 1.0;
        }
        for k in [4, 5, 7] {
            h.weight[k][EnvLabel::Fence.index()] = 2.0;
        }
        assert_eq!(fusion_accuracy(&h, &table_dataset()), 15);
    }

    #[test]
    fn training_reproduces_table() {
        let data = table_dataset();
        let (head, report) = fit_fusion_head(&data, 2000, 1.0, 7).unwrap();
        assert_eq!(report.correct, 15);
        assert_eq!(fusion_accuracy(&head, &data), 15);
        let (again, _) = fit_fusion_head(&data, 2000, 1.0, 7).unwrap();
        assert_eq!(head, again);
    }

    #[test]
    fn single_example_and_errors() {
        let ex = FusionExample::from_probabilities([0.1, 0.1, 0.8], [0.6, 0.1, 0.1, 0.1, 0.1]);
        assert_eq!(ex.label.value(), 4);
        let (_, r) = fit_fusion_head(std::slice::from_ref(&ex), 50, 0.5, 0).unwrap();
        assert_eq!(r.accuracy(), 1.0);
        assert_eq!(fit_fusion_head(&[], 10, 0.1, 0), Err(FusionError::EmptyDataset));
        assert!(matches!(fit_fusion_head(&[ex], 10, f64::INFINITY, 0), Err(FusionError::NonFiniteLoss { .. })));
    }

    #[test]
    fn small_learning_rate_loss_is_non_increasing() {
        let (_, r) = fit_fusion_head(&table_dataset(), 300, 0.05, 3).unwrap();
        for w in r.losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        assert!(r.final_loss <= *r.losses.last().unwrap());
    }

    #[test]
    fn graph_round_trip() {
        let (head, _) = fit_fusion_head(&table_dataset(), 200, 1.0, 1).unwrap();
        let g = head.to_graph();
        let back = FusionHead::from_graph(&g).unwrap();
        for (a, b) in head.weight.iter().flatten().zip(back.weight.iter().flatten()) {
            assert_eq!(*a as f32, *b as f32);
        }
        let bytes = crate::nn::encode_weights(&g).unwrap();
        let g2 = crate::nn::decode_weights(&bytes).unwrap();
        assert_eq!(FusionHead::from_graph(&g2).unwrap(), back);
    }

    proptest! {
        #[test]
        fn argmax_invariant_under_constant_shift(
            raw_e in prop::collection::vec(0.01..1.0f64, 3),
            raw_b in prop::collection::vec(0.01..1.0f64, 5),
            c in -10.0..10.0f64, seed in any::<u64>(),
        ) {
            let se: f64 = raw_e.iter().sum();
            let sb: f64 = raw_b.iter().sum();
            let env: [f64; 3] = std::array::from_fn(|i| raw_e[i] / se);
            let beh: [f64; 5] = std::array::from_fn(|i| raw_b[i] / sb);
            let (h, _) = fit_fusion_head(&table_dataset(), 5, 0.5, seed).unwrap();
            let mut shifted = h.clone();
            shifted.bias.iter_mut().for_each(|b| *b += c);
            let a = fuse_probabilities(&h, &env, &beh).unwrap();
            let b = fuse_probabilities(&shifted, &env, &beh).unwrap();
            prop_assert_eq!(argmax(&a), argmax(&b));
        }
    }
}
