//! Discrete-event loop. Events run in (time, insertion order); the only
//! randomness is the radio loss draw, seeded from the run seed.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};

use super::devices::{collar_step, expire_activities, m4_step, m7_step, Collar, Gateway, Notice, PendingActivity};
use super::log::{query_history, ActivityRecord, RangeSummary};
use super::message::{DeviceMessage, MsgType, Payload};
use super::radio::{Delivery, RadioChannel};
use super::scenario::{DeviceSpec, Scenario};
use super::SimError;

#[derive(Debug, Clone)]
enum Event {
    Frame { dev: usize },
    InferenceDone { dev: usize, frame_time: u64 },
    M4Wake { dev: usize },
    AckArrive { dev: usize },
    CollarStep { dev: usize },
    RadioArrive { to: usize, bytes: Vec<u8> },
    ActivityExpire { dev: usize },
}

struct Scheduled {
    time: u64,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

/// Simulated millisecond clock with a FIFO tie-break.
#[derive(Default)]
struct SimClock {
    now: u64,
    seq: u64,
    queue: BinaryHeap<Reverse<Scheduled>>,
}

impl SimClock {
    fn schedule(&mut self, time: u64, event: Event) {
        debug_assert!(time >= self.now);
        self.queue.push(Reverse(Scheduled { time, seq: self.seq, event }));
        self.seq += 1;
    }

    fn next(&mut self) -> Option<Event> {
        let Reverse(s) = self.queue.pop()?;
        self.now = s.time;
        Some(s.event)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceKind {
    Gateway,
    Collar,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: u64,
    pub min_ms: Option<u64>,
    pub max_ms: Option<u64>,
    pub mean_ms: Option<f64>,
    #[serde(skip)]
    total: u64,
}

impl LatencyStats {
    fn record(&mut self, v: u64) {
        self.count += 1;
        self.total += v;
        self.min_ms = Some(self.min_ms.map_or(v, |m| m.min(v)));
        self.max_ms = Some(self.max_ms.map_or(v, |m| m.max(v)));
        self.mean_ms = Some(self.total as f64 / self.count as f64);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceReport {
    pub kind: DeviceKind,
    /// Radio messages sent, by type. IPC traffic is counted separately.
    pub sent: BTreeMap<MsgType, u64>,
    pub received: BTreeMap<MsgType, u64>,
    pub frames: u64,
    pub detections_handled: u64,
    pub acks_received: u64,
    pub unacked_detections: u64,
    pub inference_latency: LatencyStats,
    pub ack_latency: LatencyStats,
    pub max_ipc_queue: u64,
    pub activities_expired: u64,
    pub steps: u64,
}

impl DeviceReport {
    fn new(kind: DeviceKind) -> Self {
        Self {
            kind,
            sent: BTreeMap::new(),
            received: BTreeMap::new(),
            frames: 0,
            detections_handled: 0,
            acks_received: 0,
            unacked_detections: 0,
            inference_latency: LatencyStats::default(),
            ack_latency: LatencyStats::default(),
            max_ipc_queue: 0,
            activities_expired: 0,
            steps: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    Detection,
    Expiry,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NotificationEvent {
    pub time_ms: u64,
    pub device: u16,
    pub level: u8,
    pub a: u8,
    pub b: u32,
    pub trigger: Trigger,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropCounters {
    pub out_of_range: u64,
    pub lost: u64,
    pub malformed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogReport {
    pub records: Vec<ActivityRecord>,
    pub summary: RangeSummary,
    pub encoded_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub seed: u64,
    pub horizon_ms: u64,
    pub end_time_ms: u64,
    pub events: u64,
    pub devices: BTreeMap<u16, DeviceReport>,
    pub notifications: Vec<NotificationEvent>,
    pub notifications_by_level: BTreeMap<u8, u64>,
    pub dropped: DropCounters,
    pub logs: BTreeMap<u16, LogReport>,
}

impl SimReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn total_sent(&self, ty: MsgType) -> u64 {
        self.devices.values().filter_map(|d| d.sent.get(&ty)).sum()
    }
}

enum Device {
    Gateway(Gateway),
    Collar(Collar),
}

struct Simulation {
    clock: SimClock,
    devices: Vec<Device>,
    ids: Vec<u16>,
    radio: RadioChannel,
    radio_latency_ms: u64,
    horizon_ms: u64,
    next_token: u64,
    report: SimReport,
}

/// Runs `scenario` for `horizon_ms` of simulated time. Periodic sources stop
/// at the horizon; messages already in flight are still delivered, so every
/// DETECTION produced gets its ACK.
pub fn run_simulation(scenario: &Scenario, horizon_ms: u64, seed: u64) -> Result<SimReport, SimError> {
    let mut sc = scenario.clone();
    sc.horizon_ms = horizon_ms;
    sc.validate()?;
    let mut sim = Simulation::new(&sc, seed)?;
    sim.run()?;
    Ok(sim.finish())
}

impl Simulation {
    fn new(sc: &Scenario, seed: u64) -> Result<Self, SimError> {
        let mut specs: Vec<&DeviceSpec> = sc.devices.iter().collect();
        specs.sort_by_key(|d| d.id());
        let mut radio = RadioChannel::new(sc.radio.range_m, sc.radio.drop_probability, seed);
        let mut devices = Vec::new();
        let mut reports = BTreeMap::new();
        for spec in &specs {
            let [x, y] = spec.position();
            radio.place(spec.id(), (x, y));
            let (dev, kind) = match spec {
                DeviceSpec::Gateway(g) => (Device::Gateway(Gateway::from_spec(g, seed)?), DeviceKind::Gateway),
                DeviceSpec::Collar(c) => {
                    (Device::Collar(Collar::from_spec(c, sc.log_interval_ms, seed)?), DeviceKind::Collar)
                }
            };
            devices.push(dev);
            reports.insert(spec.id(), DeviceReport::new(kind));
        }
        let mut sim = Self {
            clock: SimClock::default(),
            ids: specs.iter().map(|d| d.id()).collect(),
            devices,
            radio,
            radio_latency_ms: sc.radio.latency_ms,
            horizon_ms: sc.horizon_ms,
            next_token: 0,
            report: SimReport {
                seed,
                horizon_ms: sc.horizon_ms,
                end_time_ms: 0,
                events: 0,
                devices: reports,
                notifications: Vec::new(),
                notifications_by_level: (1..=3).map(|l| (l, 0)).collect(),
                dropped: DropCounters::default(),
                logs: BTreeMap::new(),
            },
        };
        for dev in 0..sim.devices.len() {
            let (start, event) = match &sim.devices[dev] {
                Device::Gateway(g) => (g.first_frame_ms, Event::Frame { dev }),
                Device::Collar(c) => (c.first_step_ms, Event::CollarStep { dev }),
            };
            if start < sim.horizon_ms {
                sim.clock.schedule(start, event);
            }
        }
        Ok(sim)
    }

    fn dev_report(&mut self, dev: usize) -> &mut DeviceReport {
        self.report.devices.get_mut(&self.ids[dev]).expect("registered")
    }

    fn gateway(&mut self, dev: usize) -> &mut Gateway {
        match &mut self.devices[dev] {
            Device::Gateway(g) => g,
            Device::Collar(_) => unreachable!("gateway event on a collar"),
        }
    }

    fn run(&mut self) -> Result<(), SimError> {
        while let Some(event) = self.clock.next() {
            self.report.events += 1;
            self.handle(event)?;
        }
        self.report.end_time_ms = self.clock.now;
        Ok(())
    }

    fn handle(&mut self, event: Event) -> Result<(), SimError> {
        let now = self.clock.now;
        match event {
            Event::Frame { dev } => {
                let g = self.gateway(dev);
                let (period, inference) = (g.frame_period_ms, g.inference_ms);
                self.clock.schedule(now + inference, Event::InferenceDone { dev, frame_time: now });
                if now + period < self.horizon_ms {
                    self.clock.schedule(now + period, Event::Frame { dev });
                }
                let r = self.dev_report(dev);
                r.frames += 1;
                r.inference_latency.record(inference);
            }
            Event::InferenceDone { dev, frame_time } => {
                let g = self.gateway(dev);
                m7_step(g, frame_time)?;
                let (ipc, depth) = (g.ipc_latency_ms, g.to_m4.len() as u64);
                self.clock.schedule(now + ipc, Event::M4Wake { dev });
                let r = self.dev_report(dev);
                r.max_ipc_queue = r.max_ipc_queue.max(depth);
            }
            Event::M4Wake { dev } => {
                let g = self.gateway(dev);
                let out = m4_step(g, now)?;
                let ipc = g.ipc_latency_ms;
                if out.malformed {
                    self.report.dropped.malformed += 1;
                }
                if out.ack.is_some() {
                    self.clock.schedule(now + ipc, Event::AckArrive { dev });
                    self.dev_report(dev).detections_handled += 1;
                }
                if let Some(n) = out.notice {
                    self.notify(dev, n, Trigger::Detection)?;
                }
            }
            Event::AckArrive { dev } => {
                let g = self.gateway(dev);
                let bytes = g.to_m7.pop_front().expect("ack queued");
                match DeviceMessage::decode(&bytes) {
                    Ok(DeviceMessage { payload: Payload::Ack { acked_timestamp }, .. }) => {
                        let r = self.dev_report(dev);
                        r.acks_received += 1;
                        r.ack_latency.record(now - acked_timestamp as u64);
                    }
                    _ => self.report.dropped.malformed += 1,
                }
            }
            Event::CollarStep { dev } => {
                let Device::Collar(c) = &mut self.devices[dev] else { unreachable!("collar event on a gateway") };
                let out = collar_step(c, now)?;
                if now + c.period_ms < self.horizon_ms {
                    self.clock.schedule(now + c.period_ms, Event::CollarStep { dev });
                }
                self.dev_report(dev).steps += 1;
                if let Some(msg) = out.broadcast {
                    self.broadcast(dev, &msg)?;
                }
            }
            Event::RadioArrive { to, bytes } => self.receive(to, &bytes, now),
            Event::ActivityExpire { dev } => {
                if let Some(n) = expire_activities(self.gateway(dev), now)? {
                    self.notify(dev, n, Trigger::Expiry)?;
                }
            }
        }
        Ok(())
    }

    fn notify(&mut self, dev: usize, n: Notice, trigger: Trigger) -> Result<(), SimError> {
        self.report.notifications.push(NotificationEvent {
            time_ms: self.clock.now,
            device: self.ids[dev],
            level: n.level,
            a: n.a,
            b: n.b,
            trigger,
        });
        *self.report.notifications_by_level.entry(n.level).or_default() += 1;
        if trigger == Trigger::Expiry {
            self.dev_report(dev).activities_expired += 1;
        }
        self.broadcast(dev, &n.message)
    }

    fn broadcast(&mut self, dev: usize, msg: &DeviceMessage) -> Result<(), SimError> {
        let bytes = msg.encode()?;
        *self.dev_report(dev).sent.entry(msg.msg_type()).or_default() += 1;
        for (id, outcome) in self.radio.broadcast(self.ids[dev]) {
            match outcome {
                Delivery::Delivered => {
                    let to = self.ids.binary_search(&id).expect("known device");
                    self.clock.schedule(
                        self.clock.now + self.radio_latency_ms,
                        Event::RadioArrive { to, bytes: bytes.clone() },
                    );
                }
                Delivery::OutOfRange => self.report.dropped.out_of_range += 1,
                Delivery::Dropped => self.report.dropped.lost += 1,
            }
        }
        Ok(())
    }

    fn receive(&mut self, to: usize, bytes: &[u8], now: u64) {
        let msg = match DeviceMessage::decode(bytes) {
            Ok(m) => m,
            Err(e) => {
                log::debug!("device {} dropped a malformed message: {e}", self.ids[to]);
                self.report.dropped.malformed += 1;
                return;
            }
        };
        *self.dev_report(to).received.entry(msg.msg_type()).or_default() += 1;
        if let (Device::Gateway(g), Payload::Activity { label, .. }) = (&mut self.devices[to], &msg.payload) {
            let ttl = g.activity_ttl_ms;
            g.receive_activity(PendingActivity {
                arrived: now,
                token: self.next_token,
                from: msg.device_id,
                label: *label,
            });
            self.next_token += 1;
            self.clock.schedule(now + ttl, Event::ActivityExpire { dev: to });
        }
    }

    fn finish(mut self) -> SimReport {
        for (dev, d) in self.devices.iter().enumerate() {
            let id = self.ids[dev];
            match d {
                Device::Gateway(_) => {
                    let r = self.report.devices.get_mut(&id).expect("registered");
                    r.unacked_detections = r.frames - r.acks_received;
                }
                Device::Collar(c) => {
                    let h = query_history(&c.log, 0);
                    let encoded_bytes = c.log.encode().len();
                    self.report.logs.insert(id, LogReport { records: h.records, summary: h.summary, encoded_bytes });
                }
            }
        }
        self.report
    }
}
