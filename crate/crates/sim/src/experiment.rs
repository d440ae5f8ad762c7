//! Discrete-event simulation of a full deployment: users churn according to
//! their behaviour model, devices gossip descriptors and e-squad logs, and
//! random pairs of devices exchange files over probabilistic onion routes.
//!
//! Everything runs on virtual time in microseconds, from one seeded RNG per
//! concern, so a configuration always yields the same event log.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use spores::crypto::message_encrypt;
use spores::esquad::{build_availability, predict_online, record_use, InteractionLog};
use spores::overlay::{rps_merge, rps_respond, rps_tick, sample_candidates, RpsView};
use spores::por::{peel, Forwarder, Peeled};
use spores::routes::{
    decode_partial, encode_partial, finalize_upload, init_upload, on_handshake, Direction, Handshake,
    RouteContext, RouteSpec, ROUTE_LEN,
};
use spores::transfer::{
    build_file_descriptor, esquad_relay, ReceiverState, RelayAction, SenderState, TransferMessage,
};
use spores::{Address, Descriptor, DeviceId, FileId, Interaction, InteractionKind, KeyPair, UserId};

use crate::config::ExperimentConfig;
use crate::events::{Event, EventType};
use crate::model::{random_walk, sample_model, Timeline};

type Micros = u64;

const MODEL_STREAM: u64 = 1;
const KEY_STREAM: u64 = 2;
const RUN_STREAM: u64 = 3;
/// File contents come from their own stream so that chunk and file sizes
/// leave the rest of the run untouched.
const DATA_STREAM: u64 = 4;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouteSummary {
    pub id: u64,
    pub transfer: usize,
    pub direction: Direction,
    pub theta: f64,
    pub layer_sizes: Vec<usize>,
    pub sent: u64,
    /// Messages that reached the terminus layer.
    pub transited: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferSummary {
    pub file_index: usize,
    pub file_id: FileId,
    pub theta: f64,
    pub sender: String,
    pub receiver: String,
    pub started_at: f64,
    /// When the receiver held every chunk.
    pub completed_at: Option<f64>,
    /// When the sender held every ACK.
    pub acked_at: Option<f64>,
    pub verified: bool,
    pub chunks: u32,
    pub transmissions: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: ExperimentConfig,
    pub events: Vec<Event>,
    pub transfers: Vec<TransferSummary>,
    pub routes: Vec<RouteSummary>,
    /// Exchange slots where no transfer could be set up.
    pub skipped: Vec<usize>,
}

impl RunOutput {
    pub fn completion_rate(&self) -> f64 {
        if self.transfers.is_empty() {
            return 0.0;
        }
        let done = self.transfers.iter().filter(|t| t.completed_at.is_some()).count();
        done as f64 / self.transfers.len() as f64
    }

    /// Fraction of sent messages that reached their route's terminus.
    pub fn transit_rate(&self, theta: Option<f64>) -> f64 {
        let (sent, ok) = self
            .routes
            .iter()
            .filter(|r| theta.is_none_or(|t| r.theta == t))
            .fold((0u64, 0u64), |(s, o), r| (s + r.sent, o + r.transited));
        if sent == 0 {
            0.0
        } else {
            ok as f64 / sent as f64
        }
    }

    /// Mean size of the non-terminus layers over all routes built at `theta`.
    pub fn mean_layer_size(&self, theta: Option<f64>) -> f64 {
        let sizes: Vec<usize> = self
            .routes
            .iter()
            .filter(|r| theta.is_none_or(|t| r.theta == t))
            .flat_map(|r| r.layer_sizes[..r.layer_sizes.len() - 1].iter().copied())
            .collect();
        if sizes.is_empty() {
            0.0
        } else {
            sizes.iter().sum::<usize>() as f64 / sizes.len() as f64
        }
    }
}

struct Device {
    addr: Address,
    user: usize,
    local: DeviceId,
    keys: KeyPair,
    online: bool,
    log: InteractionLog,
    view: RpsView,
    parked: Vec<Parcel>,
    /// Round and this device's predictions for every e-squad member.
    predictions: Option<(i64, Vec<f64>)>,
}

#[derive(Debug, Clone)]
struct Parcel {
    route: usize,
    msg_id: u64,
    payload: Vec<u8>,
}

#[derive(Debug)]
struct Job {
    route: usize,
    msg_id: u64,
    /// Index of the layer the message is addressed to.
    layer: usize,
    m: spores::PorMessage,
    plan: Forwarder,
}

#[derive(Debug)]
enum Action {
    Round(i64),
    Arrive { target: usize, job: Box<Job>, sent_at: Micros, holder: usize },
    Timeout { holder: usize, target: usize, job: Box<Job> },
    Handoff { from: usize, to: usize, parcel: Parcel },
    SenderWake { transfer: usize, gen: u64 },
}

struct Scheduled {
    at: Micros,
    seq: u64,
    action: Action,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    // Reversed: BinaryHeap is a max-heap.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

struct Route {
    spec: RouteSpec,
    summary: RouteSummary,
}

struct Transfer {
    summary: TransferSummary,
    sender_dev: usize,
    receiver_dev: usize,
    forward: usize,
    backward: usize,
    sender: Option<SenderState>,
    receiver: Option<ReceiverState>,
    source_hash: [u8; 32],
    wake_gen: u64,
}

struct Sim {
    cfg: ExperimentConfig,
    rng: ChaCha8Rng,
    data_rng: ChaCha8Rng,
    timelines: Vec<Timeline>,
    devices: Vec<Device>,
    by_addr: HashMap<Address, usize>,
    queue: BinaryHeap<Scheduled>,
    seq: u64,
    now: Micros,
    events: Vec<Event>,
    routes: Vec<Route>,
    transfers: Vec<Transfer>,
    by_file: HashMap<FileId, usize>,
    skipped: Vec<usize>,
    next_msg: u64,
    next_file: usize,
    /// Every device counts as online, for the pre-run descriptor warm-up.
    warmup: bool,
    done: bool,
    period: Micros,
    timeout: Micros,
    latency: Micros,
    last_round: i64,
}

fn micros(secs: f64) -> Micros {
    (secs * 1e6).round() as Micros
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput, RunError> {
    cfg.validate()?;
    let mut sim = Sim::new(cfg.clone())?;
    sim.run();
    Ok(sim.finish())
}

impl Sim {
    fn new(cfg: ExperimentConfig) -> Result<Self, RunError> {
        let last_round = ((cfg.files - 1) * cfg.exchange_every_rounds + cfg.teardown_after_rounds) as i64;
        let rounds = cfg.l_init + last_round as usize + 1;

        let mut model_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        model_rng.set_stream(MODEL_STREAM);
        let mut timelines = Vec::with_capacity(cfg.users);
        for _ in 0..cfg.users {
            let m = sample_model(cfg.model, cfg.mu, cfg.locations, cfg.devices_per_user, &mut model_rng)?;
            timelines.push(random_walk(&m, rounds, &mut model_rng));
        }

        let mut key_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        key_rng.set_stream(KEY_STREAM);
        let mut devices = Vec::new();
        let mut by_addr = HashMap::new();
        for u in 0..cfg.users {
            for d in 0..cfg.devices_per_user {
                let addr = Address::new(format!("u{u:02}.d{d}"));
                by_addr.insert(addr.clone(), devices.len());
                devices.push(Device {
                    view: RpsView::new(addr.clone(), cfg.view_capacity),
                    addr,
                    user: u,
                    local: DeviceId(d as u16),
                    keys: KeyPair::generate(&mut key_rng),
                    online: false,
                    log: InteractionLog::new(UserId(u as u32), cfg.devices_per_user as u16),
                    parked: Vec::new(),
                    predictions: None,
                });
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(RUN_STREAM);
        let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        data_rng.set_stream(DATA_STREAM);
        Ok(Self {
            data_rng,
            period: micros(cfg.round_secs),
            timeout: micros(cfg.timeout_secs),
            latency: micros(cfg.latency_ms / 1000.0),
            last_round,
            cfg,
            rng,
            timelines,
            devices,
            by_addr,
            queue: BinaryHeap::new(),
            seq: 0,
            now: 0,
            events: Vec::new(),
            routes: Vec::new(),
            transfers: Vec::new(),
            by_file: HashMap::new(),
            skipped: Vec::new(),
            next_msg: 0,
            next_file: 0,
            warmup: false,
            done: false,
        })
    }

    fn secs(&self) -> f64 {
        self.now as f64 / 1e6
    }

    fn emit(&mut self, e: EventType) -> EventBuilder<'_> {
        EventBuilder {
            event: Some(Event::new(self.secs(), e)),
            out: &mut self.events,
        }
    }

    fn schedule(&mut self, at: Micros, action: Action) {
        self.seq += 1;
        self.queue.push(Scheduled { at, seq: self.seq, action });
    }

    fn is_online(&self, dev: usize) -> bool {
        self.warmup || self.devices[dev].online
    }

    fn squad(&self, user: usize) -> std::ops::Range<usize> {
        let n = self.cfg.devices_per_user;
        user * n..(user + 1) * n
    }

    fn run(&mut self) {
        self.seed_history();
        for i in 0..self.devices.len() {
            let addr = self.devices[i].addr.to_string();
            let user = self.devices[i].user;
            self.emit(EventType::DeviceSpawn).actor(addr).outcome(format!("user={user}"));
        }
        self.warm_up();
        self.schedule(0, Action::Round(0));
        while let Some(s) = self.queue.pop() {
            debug_assert!(s.at >= self.now);
            self.now = s.at;
            self.dispatch(s.action);
            if self.done {
                break;
            }
        }
    }

    /// Rounds `-l_init..0` of each timeline become USE records known to the
    /// whole e-squad.
    fn seed_history(&mut self) {
        let t = self.cfg.round_secs;
        let l_init = self.cfg.l_init;
        for dev in 0..self.devices.len() {
            let Device { user, local, .. } = self.devices[dev];
            let x = &self.timelines[user].x;
            let records: Vec<Interaction> = (0..l_init)
                .flat_map(|j| {
                    let ts = (j as f64 - l_init as f64) * t;
                    (0..x.devices())
                        .filter(move |&d| x.get(j, d))
                        .map(move |d| Interaction::new(ts, DeviceId(d as u16), InteractionKind::Use))
                })
                .collect();
            debug_assert!(local.0 < self.cfg.devices_per_user as u16);
            let log = &mut self.devices[dev].log;
            for r in records {
                log.insert(r);
            }
        }
    }

    fn warm_up(&mut self) {
        self.warmup = true;
        for dev in 0..self.devices.len() {
            self.bootstrap(dev, -1);
        }
        for _ in 0..self.cfg.warmup_ticks {
            self.rps_round(-1);
        }
        self.warmup = false;
    }

    fn bootstrap(&mut self, dev: usize, round: i64) {
        let user = self.devices[dev].user;
        let others: Vec<usize> = (0..self.devices.len()).filter(|&i| self.devices[i].user != user).collect();
        let seeds: Vec<usize> = others
            .choose_multiple(&mut self.rng, self.cfg.bootstrap_len)
            .copied()
            .collect();
        let descs: Vec<Descriptor> = seeds.into_iter().map(|s| self.fresh_descriptor(s, round)).collect();
        self.devices[dev].view.bootstrap(descs);
    }

    /// This device's predictions for its whole e-squad, from its own log.
    fn predictions(&mut self, dev: usize, round: i64) -> &[f64] {
        let fresh = matches!(self.devices[dev].predictions, Some((r, _)) if r == round);
        if !fresh {
            let rows = (self.cfg.l_init as i64 + round + 1) as usize;
            let t = self.cfg.round_secs;
            let t0 = -(self.cfg.l_init as f64) * t;
            let x = build_availability(&self.devices[dev].log, t, t0, rows);
            let p = (0..x.devices()).map(|d| predict_online(&x, rows - 1, d)).collect();
            self.devices[dev].predictions = Some((round, p));
        }
        &self.devices[dev].predictions.as_ref().expect("just computed").1
    }

    fn fresh_descriptor(&mut self, dev: usize, round: i64) -> Descriptor {
        let local = self.devices[dev].local.0 as usize;
        let p = self.predictions(dev, round)[local];
        let d = &self.devices[dev];
        Descriptor::new(d.addr.clone(), d.keys.pk, p, self.now as f64 / 1e6)
    }

    fn dispatch(&mut self, action: Action) {
        match action {
            Action::Round(r) => self.round(r),
            Action::Arrive {
                target,
                job,
                sent_at,
                holder,
            } => self.arrive(holder, target, job, sent_at),
            Action::Timeout { holder, target, job } => {
                let to = self.devices[target].addr.to_string();
                let a = self.devices[holder].addr.to_string();
                let (route, msg, layer) = (job.route as u64, job.msg_id, job.layer);
                self.emit(EventType::AttemptFailed)
                    .actor(a)
                    .route(route)
                    .layer(layer)
                    .message(msg)
                    .outcome(to);
                self.attempt(holder, job);
            }
            Action::Handoff { from, to, parcel } => self.handoff(from, to, parcel),
            Action::SenderWake { transfer, gen } => {
                if self.transfers[transfer].wake_gen == gen {
                    self.step_sender(transfer);
                }
            }
        }
    }

    fn round(&mut self, r: i64) {
        let row = self.cfg.l_init + r as usize;
        let mut went_offline = Vec::new();
        for dev in 0..self.devices.len() {
            let Device { user, local, online, .. } = self.devices[dev];
            let now_on = self.timelines[user].x.get(row, local.0 as usize);
            if now_on != online || r == 0 {
                self.devices[dev].online = now_on;
                let e = if now_on {
                    EventType::DeviceOnline
                } else {
                    EventType::DeviceOffline
                };
                let a = self.devices[dev].addr.to_string();
                self.emit(e).actor(a);
                if !now_on {
                    went_offline.push(dev);
                }
            }
        }
        for dev in went_offline {
            self.evacuate_parked(dev);
        }

        let ts = r as f64 * self.cfg.round_secs;
        for dev in 0..self.devices.len() {
            if self.devices[dev].online {
                let local = self.devices[dev].local;
                record_use(&mut self.devices[dev].log, local, ts);
            }
        }
        self.squad_gossip();
        self.rps_round(r);

        let every = self.cfg.exchange_every_rounds as i64;
        if r % every == 0 && self.next_file < self.cfg.files {
            let file = self.next_file;
            self.next_file += 1;
            self.start_exchange(file, r);
        }

        for dev in 0..self.devices.len() {
            if self.devices[dev].online && !self.devices[dev].parked.is_empty() {
                let parked = std::mem::take(&mut self.devices[dev].parked);
                for p in parked {
                    self.at_terminus(dev, p, true);
                }
            }
        }
        for t in 0..self.transfers.len() {
            self.step_sender(t);
        }

        if r >= self.last_round {
            self.emit(EventType::Teardown);
            self.done = true;
            return;
        }
        let next = (r + 1) as Micros * self.period;
        self.schedule(next, Action::Round(r + 1));
    }

    /// A device leaving hands what it parked to a random online sibling.
    fn evacuate_parked(&mut self, dev: usize) {
        if self.devices[dev].parked.is_empty() {
            return;
        }
        let user = self.devices[dev].user;
        let online: Vec<usize> = self.squad(user).filter(|&s| s != dev && self.devices[s].online).collect();
        let Some(&to) = online.choose(&mut self.rng) else {
            return;
        };
        let parked = std::mem::take(&mut self.devices[dev].parked);
        let (from_a, to_a) = (self.devices[dev].addr.to_string(), self.devices[to].addr.to_string());
        for p in &parked {
            self.emit(EventType::EsquadHandoff)
                .actor(from_a.clone())
                .route(p.route as u64)
                .message(p.msg_id)
                .outcome(to_a.clone());
        }
        self.devices[to].parked.extend(parked);
    }

    /// Rounds of random pairings among each user's online devices; each
    /// pair swaps log deltas both ways.
    fn squad_gossip(&mut self) {
        for user in 0..self.cfg.users {
            let mut online: Vec<usize> = self.squad(user).filter(|&d| self.devices[d].online).collect();
            if online.len() < 2 {
                continue;
            }
            for _ in 0..self.cfg.squad_gossip_passes {
                online.shuffle(&mut self.rng);
                for pair in online.chunks_exact(2) {
                    self.sync_pair(pair[0], pair[1]);
                }
            }
        }
    }

    fn sync_pair(&mut self, a: usize, b: usize) {
        let uid = self.devices[a].log.user();
        let to_b = self.devices[a].log.delta(&self.devices[b].log.digest());
        let to_a = self.devices[b].log.delta(&self.devices[a].log.digest());
        self.devices[b].log.apply_delta(uid, &to_b).expect("same e-squad");
        self.devices[a].log.apply_delta(uid, &to_a).expect("same e-squad");
    }

    fn rps_round(&mut self, round: i64) {
        let mut order: Vec<usize> = (0..self.devices.len()).filter(|&d| self.is_online(d)).collect();
        order.shuffle(&mut self.rng);
        let gossip_len = self.cfg.gossip_len;
        for dev in order {
            let me = self.fresh_descriptor(dev, round);
            let Some(ex) = rps_tick(&mut self.devices[dev].view, me, gossip_len, &mut self.rng) else {
                self.bootstrap(dev, round);
                continue;
            };
            let Some(&partner) = self.by_addr.get(&ex.partner.addr) else {
                continue;
            };
            if !self.is_online(partner) {
                continue;
            }
            let theirs = self.fresh_descriptor(partner, round);
            let reply = rps_respond(&self.devices[partner].view, theirs, gossip_len, &mut self.rng);
            rps_merge(&mut self.devices[partner].view, ex.proposal.clone(), &reply);
            rps_merge(&mut self.devices[dev].view, reply, &ex.proposal);
        }
    }

    fn route_context(&mut self, dev: usize, round: i64, theta: f64) -> RouteContext {
        let me = self.fresh_descriptor(dev, round);
        let preds = self.predictions(dev, round).to_vec();
        let user = self.devices[dev].user;
        let now = self.secs();
        let siblings = self
            .squad(user)
            .filter(|&s| s != dev)
            .map(|s| {
                let d = &self.devices[s];
                Descriptor::new(d.addr.clone(), d.keys.pk, preds[d.local.0 as usize], now)
            })
            .collect();
        let view = sample_candidates(&self.devices[dev].view, &mut self.rng);
        RouteContext {
            me,
            device: self.devices[dev].local,
            siblings,
            view,
            theta,
        }
    }

    fn start_exchange(&mut self, file: usize, round: i64) {
        let online: Vec<usize> = (0..self.devices.len()).filter(|&d| self.devices[d].online).collect();
        let Some(&sender) = online.choose(&mut self.rng) else {
            self.skip(file, "no online device");
            return;
        };
        let su = self.devices[sender].user;
        let receivers: Vec<usize> = online.iter().copied().filter(|&d| self.devices[d].user != su).collect();
        let Some(&receiver) = receivers.choose(&mut self.rng) else {
            self.skip(file, "no online device of another user");
            return;
        };

        let mut data = vec![0u8; self.cfg.file_bytes() as usize];
        self.data_rng.fill(&mut data[..]);
        let fd = build_file_descriptor(&data, self.cfg.chunk_bytes(), &mut self.rng).expect("validated sizes");
        let theta = self.cfg.theta_for_file(file);
        let now = self.secs();

        let s_ctx = self.route_context(sender, round, theta);
        let r_ctx = self.route_context(receiver, round, theta);
        let routes = (|| -> Result<_, spores::routes::RouteError> {
            let hs = init_upload(&s_ctx, fd.clone(), &mut self.rng)?;
            let hs = Handshake::decode(&hs.encode()?)?;
            let (reply, backward) = on_handshake(&r_ctx, &mut self.devices[receiver].log, hs, now, &mut self.rng)?;
            let reply = decode_partial(&encode_partial(&reply)?)?;
            let forward = finalize_upload(&s_ctx, &mut self.devices[sender].log, &fd, reply, now, &mut self.rng)?;
            Ok((forward, backward))
        })();
        let (forward, backward) = match routes {
            Ok(r) => r,
            Err(e) => {
                self.skip(file, &e.to_string());
                return;
            }
        };
        self.push_endpoint_record(sender, InteractionKind::Upload(fd.id), now);
        self.push_endpoint_record(receiver, InteractionKind::Download(fd.id), now);

        let t = self.transfers.len();
        let fwd = self.add_route(t, forward, theta, sender, receiver);
        let bwd = self.add_route(t, backward, theta, receiver, sender);
        let (s_addr, r_addr) = (self.devices[sender].addr.to_string(), self.devices[receiver].addr.to_string());
        self.emit(EventType::TransferStarted)
            .actor(s_addr.clone())
            .outcome(format!("file={file} receiver={r_addr} theta={theta}"));

        let source_hash = Sha256::digest(&data).into();
        let chunks = fd.n_chunks;
        self.by_file.insert(fd.id, t);
        self.transfers.push(Transfer {
            summary: TransferSummary {
                file_index: file,
                file_id: fd.id,
                theta,
                sender: s_addr,
                receiver: r_addr,
                started_at: now,
                completed_at: None,
                acked_at: None,
                verified: false,
                chunks,
                transmissions: 0,
            },
            sender_dev: sender,
            receiver_dev: receiver,
            forward: fwd,
            backward: bwd,
            receiver: Some(ReceiverState::new(fd.clone())),
            sender: Some(
                SenderState::new(fd, data, self.cfg.window, self.cfg.retry_secs).expect("validated window"),
            ),
            source_hash,
            wake_gen: 0,
        });
        if chunks == 0 {
            self.finish_download(t);
            self.finish_upload(t);
        }
    }

    fn skip(&mut self, file: usize, why: &str) {
        self.skipped.push(file);
        self.emit(EventType::ExchangeSkipped).outcome(format!("file={file} {why}"));
    }

    /// The endpoint's UL/DL record goes straight to its online siblings;
    /// the others pick it up through gossip.
    fn push_endpoint_record(&mut self, dev: usize, kind: InteractionKind, now: f64) {
        let Device { user, local, .. } = self.devices[dev];
        let rec = Interaction::new(now, local, kind);
        for s in self.squad(user) {
            if s != dev && self.devices[s].online {
                self.devices[s].log.insert(rec);
            }
        }
    }

    fn add_route(&mut self, transfer: usize, spec: RouteSpec, theta: f64, origin: usize, dest: usize) -> usize {
        let id = self.routes.len();
        let dir = match spec.direction {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
        };
        let o = self.devices[origin].addr.to_string();
        let d = self.devices[dest].addr.to_string();
        self.emit(EventType::RouteCreated)
            .actor(o.clone())
            .route(id as u64)
            .outcome(format!("{dir} theta={theta}"));
        self.emit(EventType::RouteEndpoint).actor(o).route(id as u64).outcome("origin");
        self.emit(EventType::RouteEndpoint).actor(d).route(id as u64).outcome("destination");
        for (i, layer) in spec.layers.iter().enumerate() {
            for m in layer.members() {
                let a = m.addr.to_string();
                self.emit(EventType::LayerMember)
                    .actor(a)
                    .route(id as u64)
                    .layer(i)
                    .outcome(format!("p_online={:.4}", m.p_online));
            }
        }
        let summary = RouteSummary {
            id: id as u64,
            transfer,
            direction: spec.direction,
            theta,
            layer_sizes: spec.layers.iter().map(|l| l.len()).collect(),
            sent: 0,
            transited: 0,
        };
        self.routes.push(Route { spec, summary });
        id
    }

    fn send(&mut self, origin: usize, route: usize, payload: Vec<u8>) {
        let msg_id = self.next_msg;
        self.next_msg += 1;
        self.routes[route].summary.sent += 1;
        let a = self.devices[origin].addr.to_string();
        self.emit(EventType::MsgSent).actor(a.clone()).route(route as u64).message(msg_id);
        if self.cfg.drop_rate > 0.0 && self.rng.random_bool(self.cfg.drop_rate) {
            self.emit(EventType::Drop)
                .actor(a)
                .route(route as u64)
                .message(msg_id)
                .outcome("injected");
            return;
        }
        let m = message_encrypt(&payload, &self.routes[route].spec.layers, &mut self.rng)
            .expect("routes have non-empty layers");
        let plan = Forwarder::new(&m, &mut self.rng);
        let job = Box::new(Job {
            route,
            msg_id,
            layer: 0,
            m,
            plan,
        });
        self.attempt(origin, job);
    }

    fn attempt(&mut self, holder: usize, mut job: Box<Job>) {
        let reason = if !self.devices[holder].online {
            Some("holder_offline")
        } else if let Some(next) = job.plan.next_target() {
            let target = self.by_addr[next];
            if self.devices[target].online {
                let at = self.now + self.latency;
                let sent_at = self.now;
                self.schedule(
                    at,
                    Action::Arrive {
                        target,
                        job,
                        sent_at,
                        holder,
                    },
                );
            } else {
                let at = self.now + self.timeout;
                self.schedule(at, Action::Timeout { holder, target, job });
            }
            return;
        } else {
            Some("layer_exhausted")
        };
        let a = self.devices[holder].addr.to_string();
        self.emit(EventType::Drop)
            .actor(a)
            .route(job.route as u64)
            .layer(job.layer)
            .message(job.msg_id)
            .outcome(reason.expect("set above"));
    }

    fn arrive(&mut self, holder: usize, target: usize, mut job: Box<Job>, sent_at: Micros) {
        if !self.devices[target].online {
            self.schedule(sent_at + self.timeout, Action::Timeout { holder, target, job });
            return;
        }
        let a = self.devices[target].addr.to_string();
        self.emit(EventType::Hop)
            .actor(a.clone())
            .route(job.route as u64)
            .layer(job.layer)
            .message(job.msg_id);
        if job.layer == ROUTE_LEN - 1 {
            self.routes[job.route].summary.transited += 1;
        }
        match peel(&job.m, &self.devices[target].keys.sk) {
            Peeled::Relay(inner) => {
                job.plan = Forwarder::new(&inner, &mut self.rng);
                job.m = inner;
                job.layer += 1;
                self.attempt(target, job);
            }
            Peeled::Payload(payload) => {
                let parcel = Parcel {
                    route: job.route,
                    msg_id: job.msg_id,
                    payload,
                };
                self.at_terminus(target, parcel, false);
            }
            Peeled::Failed => {
                self.emit(EventType::Drop)
                    .actor(a)
                    .route(job.route as u64)
                    .layer(job.layer)
                    .message(job.msg_id)
                    .outcome("decrypt_failed");
            }
        }
    }

    /// A member of the terminus e-squad holds `parcel`.
    fn at_terminus(&mut self, dev: usize, parcel: Parcel, from_park: bool) {
        let user = self.devices[dev].user;
        let base = user * self.cfg.devices_per_user;
        let action = esquad_relay(&parcel.payload, &self.devices[dev].log, |d| {
            self.devices[base + d.0 as usize].online
        });
        let a = self.devices[dev].addr.to_string();
        match action {
            RelayAction::Deliver(d) if d == self.devices[dev].local => self.consume(dev, parcel),
            RelayAction::Deliver(d) => {
                let to = base + d.0 as usize;
                let to_a = self.devices[to].addr.to_string();
                self.emit(EventType::EsquadForward)
                    .actor(a)
                    .route(parcel.route as u64)
                    .message(parcel.msg_id)
                    .outcome(to_a);
                let at = self.now + self.latency;
                self.schedule(at, Action::Handoff { from: dev, to, parcel });
            }
            RelayAction::Park => {
                if !from_park {
                    self.emit(EventType::EsquadPark)
                        .actor(a)
                        .route(parcel.route as u64)
                        .message(parcel.msg_id);
                }
                self.devices[dev].parked.push(parcel);
            }
            RelayAction::Drop => {
                self.emit(EventType::Drop)
                    .actor(a)
                    .route(parcel.route as u64)
                    .layer(ROUTE_LEN - 1)
                    .message(parcel.msg_id)
                    .outcome("unknown_file");
            }
        }
    }

    fn handoff(&mut self, from: usize, to: usize, parcel: Parcel) {
        if self.devices[to].online {
            self.at_terminus(to, parcel, false);
        } else if self.devices[from].online {
            let to_a = self.devices[to].addr.to_string();
            let a = self.devices[from].addr.to_string();
            self.emit(EventType::AttemptFailed)
                .actor(a)
                .route(parcel.route as u64)
                .layer(ROUTE_LEN - 1)
                .message(parcel.msg_id)
                .outcome(to_a);
            self.at_terminus(from, parcel, false);
        } else {
            let a = self.devices[from].addr.to_string();
            self.emit(EventType::Drop)
                .actor(a)
                .route(parcel.route as u64)
                .layer(ROUTE_LEN - 1)
                .message(parcel.msg_id)
                .outcome("holder_offline");
        }
    }

    /// The endpoint itself processes a chunk or an ACK.
    fn consume(&mut self, dev: usize, parcel: Parcel) {
        let a = self.devices[dev].addr.to_string();
        self.emit(EventType::EsquadDeliver)
            .actor(a)
            .route(parcel.route as u64)
            .message(parcel.msg_id);
        let Ok(msg) = TransferMessage::decode(&parcel.payload) else {
            return;
        };
        let Some(&t) = self.by_file.get(&msg.id()) else {
            return;
        };
        match msg {
            TransferMessage::Chunk(c) if dev == self.transfers[t].receiver_dev => {
                let Some(rx) = self.transfers[t].receiver.as_mut() else {
                    return;
                };
                let was_complete = rx.is_complete();
                let ack = rx.receiver_step(&c);
                let now_complete = rx.is_complete();
                if let Some(ack) = ack {
                    let bwd = self.transfers[t].backward;
                    self.send(dev, bwd, TransferMessage::Ack(ack).encode());
                }
                if now_complete && !was_complete {
                    self.finish_download(t);
                }
            }
            TransferMessage::Ack(ack) if dev == self.transfers[t].sender_dev => {
                let Some(tx) = self.transfers[t].sender.as_mut() else {
                    return;
                };
                if tx.on_ack(&ack) {
                    if tx.is_complete() {
                        self.finish_upload(t);
                    } else {
                        self.step_sender(t);
                    }
                }
            }
            _ => {}
        }
    }

    fn finish_download(&mut self, t: usize) {
        let now = self.secs();
        let tr = &mut self.transfers[t];
        let ok = tr
            .receiver
            .as_ref()
            .and_then(|r| r.assemble())
            .is_some_and(|data| <[u8; 32]>::from(Sha256::digest(&data)) == tr.source_hash);
        tr.summary.completed_at = Some(now);
        tr.summary.verified = ok;
        let a = tr.summary.receiver.clone();
        let f = tr.forward as u64;
        self.emit(EventType::DownloadComplete)
            .actor(a)
            .route(f)
            .outcome(if ok { "verified" } else { "corrupt" });
    }

    fn finish_upload(&mut self, t: usize) {
        let now = self.secs();
        let tr = &mut self.transfers[t];
        tr.summary.acked_at = Some(now);
        if let Some(s) = tr.sender.take() {
            tr.summary.transmissions = s.transmissions();
        }
        // Any further chunk is a duplicate; the receiver's copy is no longer needed.
        if let Some(r) = tr.receiver.as_mut() {
            if r.is_complete() {
                tr.receiver = None;
            }
        }
        tr.wake_gen += 1;
        let a = tr.summary.sender.clone();
        let f = tr.forward as u64;
        self.emit(EventType::TransferComplete).actor(a).route(f);
    }

    fn step_sender(&mut self, t: usize) {
        let dev = self.transfers[t].sender_dev;
        if !self.devices[dev].online {
            return;
        }
        let now = self.secs();
        let Some(tx) = self.transfers[t].sender.as_mut() else {
            return;
        };
        let chunks = tx.sender_step(now);
        let deadline = tx.next_deadline();
        let fwd = self.transfers[t].forward;
        for c in chunks {
            self.send(dev, fwd, TransferMessage::Chunk(c).encode());
        }
        self.transfers[t].wake_gen += 1;
        if let Some(d) = deadline {
            let gen = self.transfers[t].wake_gen;
            self.schedule(micros(d).max(self.now), Action::SenderWake { transfer: t, gen });
        }
    }

    fn finish(self) -> RunOutput {
        RunOutput {
            config: self.cfg,
            events: self.events,
            transfers: self
                .transfers
                .into_iter()
                .map(|mut t| {
                    if let Some(s) = &t.sender {
                        t.summary.transmissions = s.transmissions();
                    }
                    t.summary
                })
                .collect(),
            routes: self.routes.into_iter().map(|r| r.summary).collect(),
            skipped: self.skipped,
        }
    }
}

/// Appends its event when dropped, so call sites read as one chain.
struct EventBuilder<'a> {
    event: Option<Event>,
    out: &'a mut Vec<Event>,
}

impl EventBuilder<'_> {
    fn map(mut self, f: impl FnOnce(Event) -> Event) -> Self {
        self.event = self.event.take().map(f);
        self
    }

    fn actor(self, a: impl Into<String>) -> Self {
        self.map(|e| e.actor(a))
    }

    fn route(self, id: u64) -> Self {
        self.map(|e| e.route(id))
    }

    fn layer(self, i: usize) -> Self {
        self.map(|e| e.layer(i))
    }

    fn message(self, id: u64) -> Self {
        self.map(|e| e.message(id))
    }

    fn outcome(self, o: impl Into<String>) -> Self {
        self.map(|e| e.outcome(o))
    }
}

impl Drop for EventBuilder<'_> {
    fn drop(&mut self) {
        if let Some(e) = self.event.take() {
            self.out.push(e);
        }
    }
}
