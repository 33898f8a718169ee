//! Layer graphs: definition and validation, float and INT8 inference,
//! profiling, magnitude pruning, the binary weight file, and reference
//! architectures.

pub mod float;
pub mod graph;
pub mod int8;
pub mod layer;
pub mod profile;
pub mod prune;
pub mod weights_file;
pub mod zoo;

pub use float::{forward_float, forward_float_instrumented, Instrument};
pub use graph::{validate_graph, GraphBuilder, GraphError, GraphSpec, ModelGraph, WeightStore};
pub use int8::{calibrate, forward_int8, forward_int8_dequantized, quantize_input};
pub use layer::{Layer, LayerKind, ParamKind};
pub use profile::{count_flops, count_nonzero_params, count_params, peak_activation, profile, MemoryProfile};
pub use prune::{prune_magnitude, PruneError, PruneReport};
pub use weights_file::{decode_weights, encode_weights, load_weights, save_weights, WeightFileError};
