//! Attack probabilities in closed form, and compromise counting over
//! simulator event logs.
//!
//! Two adversaries are considered. A *correlating* one wins on a message
//! when it holds the first and the last relay the message passes through.
//! A *route owner* wins when it can steer the message through relays it
//! controls on every hop, which happens when it receives the message on the
//! first hop and has at least one device in each later layer.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use thiserror::Error;

use spores::routes::ROUTE_LEN;

use crate::events::{Event, EventType};

/// Relay hops analysed; the recipient's own e-squad is not part of the
/// attack surface.
pub const ANALYSED_HOPS: usize = ROUTE_LEN - 1;
pub const DEFAULT_COMBINATIONS_CAP: usize = 1000;
pub const DEFAULT_MAX_ADVERSARY_USERS: usize = 17;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("probability {0} outside [0, 1]")]
    Probability(f64),
    #[error("layer size must be at least 1")]
    LayerSize,
    #[error("only {ANALYSED_HOPS}-hop routes are supported, got {0}")]
    Hops(usize),
    #[error("event log is empty")]
    EmptyLog,
    #[error("event log has no route layers or no hop traces")]
    MissingTraces,
    #[error("event log mentions unknown device `{0}`")]
    UnknownDevice(String),
    #[error("malformed `{0}` event")]
    Malformed(&'static str),
    #[error("at most 128 users are supported")]
    TooManyUsers,
}

fn check_p(p: f64) -> Result<f64, AnalysisError> {
    if (0.0..=1.0).contains(&p) {
        Ok(p)
    } else {
        Err(AnalysisError::Probability(p))
    }
}

/// Adversary and relay populations for comparing the two designs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThreatParams {
    pub n_adv: f64,
    pub n_spores: f64,
    pub n_tor: f64,
    pub layer_size: usize,
    pub hops: usize,
}

impl ThreatParams {
    pub fn p_spores(&self) -> f64 {
        self.n_adv / self.n_spores
    }

    pub fn p_tor(&self) -> f64 {
        self.n_adv / self.n_tor
    }

    /// `C = N_spores / N_tor`.
    pub fn multiplier(&self) -> f64 {
        self.n_spores / self.n_tor
    }
}

pub fn p_correlate_tor(p: f64) -> Result<f64, AnalysisError> {
    Ok(check_p(p)?.powi(2))
}

/// Per end layer, the chance the message goes to an adversary, summed over
/// how many of the `s_l` members the adversary holds. The sum telescopes
/// to `p`, so the result is `p²` for every layer size.
pub fn p_correlate_spores(p: f64, s_l: usize) -> Result<f64, AnalysisError> {
    let p = check_p(p)?;
    if s_l == 0 {
        return Err(AnalysisError::LayerSize);
    }
    let per_layer: f64 = (0..=s_l)
        .map(|k| binomial_pmf(s_l, k, p) * k as f64 / s_l as f64)
        .sum();
    Ok(per_layer.powi(2))
}

fn binomial_pmf(n: usize, k: usize, p: f64) -> f64 {
    let mut c = 1.0;
    for i in 0..k {
        c = c * (n - i) as f64 / (i + 1) as f64;
    }
    c * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32)
}

pub fn p_full_route_tor(p: f64, hops: usize) -> Result<f64, AnalysisError> {
    Ok(check_p(p)?.powi(hops as i32))
}

/// `p³ · (Σ_{k<S_L} (1-p)^k)²`: receive on the first hop, then hold at
/// least one member of each of the two later layers.
pub fn p_full_route_spores(p: f64, s_l: usize, hops: usize) -> Result<f64, AnalysisError> {
    let p = check_p(p)?;
    if s_l == 0 {
        return Err(AnalysisError::LayerSize);
    }
    if hops != ANALYSED_HOPS {
        return Err(AnalysisError::Hops(hops));
    }
    let geo: f64 = (0..s_l).map(|k| (1.0 - p).powi(k as i32)).sum();
    Ok(p.powi(3) * geo * geo)
}

/// Relay-population ratio above which full-route ownership is harder on
/// this design than on single-relay onion routing: `S_L^(2/3)`.
pub fn crossover_multiplier(s_l: usize) -> Result<f64, AnalysisError> {
    if s_l == 0 {
        return Err(AnalysisError::LayerSize);
    }
    Ok((s_l as f64).powf(2.0 / 3.0))
}

/// One route as the scan sees it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RouteTrace {
    pub endpoints: u128,
    /// User masks of the relay layers.
    pub layers: Vec<u128>,
    pub sent: u64,
    /// Users that received at least one message on the first relay hop.
    pub first_hop_receivers: u128,
    pub last_hop_receivers: u128,
    /// For each first-hop receipt: the receiving user, and the users with
    /// an online member in each later relay layer at that moment.
    pub first_hop_paths: BTreeSet<(u8, u128, u128)>,
    /// Messages seen on both end hops, by (first holder, last holder) user.
    pub end_pairs: BTreeMap<(u8, u8), u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedLog {
    pub users: usize,
    pub routes: Vec<RouteTrace>,
}

impl ParsedLog {
    pub fn mean_layer_size(&self) -> f64 {
        let (sum, n) = self
            .routes
            .iter()
            .flat_map(|r| r.layers.iter())
            .fold((0u32, 0u32), |(s, n), m| (s + m.count_ones(), n + 1));
        if n == 0 {
            0.0
        } else {
            sum as f64 / n as f64
        }
    }
}

#[derive(Default)]
struct RouteBuild {
    endpoints: u128,
    layers: BTreeMap<u8, u128>,
    members: BTreeMap<u8, Vec<usize>>,
    paths: BTreeSet<(u8, u128, u128)>,
    sent: u64,
    first: HashMap<u64, u8>,
    last: HashMap<u64, u8>,
}

/// Users are identified through `device_spawn` events. Layer membership is
/// counted per user, since an adversary owns all devices of its users.
pub fn parse_log(events: &[Event]) -> Result<ParsedLog, AnalysisError> {
    if events.is_empty() {
        return Err(AnalysisError::EmptyLog);
    }
    let mut user_of: HashMap<&str, u8> = HashMap::new();
    let mut device_of: HashMap<&str, usize> = HashMap::new();
    let mut users = 0usize;
    for e in events.iter().filter(|e| e.event_type == EventType::DeviceSpawn) {
        let actor = e.actor.as_deref().ok_or(AnalysisError::Malformed("device_spawn"))?;
        let u: usize = e
            .outcome
            .as_deref()
            .and_then(|o| o.strip_prefix("user="))
            .and_then(|n| n.parse().ok())
            .ok_or(AnalysisError::Malformed("device_spawn"))?;
        if u >= 128 {
            return Err(AnalysisError::TooManyUsers);
        }
        users = users.max(u + 1);
        user_of.insert(actor, u as u8);
        let next = device_of.len();
        device_of.entry(actor).or_insert(next);
    }
    let mut device_user = vec![0u8; device_of.len()];
    for (a, &i) in &device_of {
        device_user[i] = user_of[a];
    }
    let mut online = vec![false; device_of.len()];
    let lookup = |e: &Event, what: &'static str| -> Result<(u64, u8), AnalysisError> {
        let route = e.route_id.ok_or(AnalysisError::Malformed(what))?;
        let actor = e.actor.as_deref().ok_or(AnalysisError::Malformed(what))?;
        let u = *user_of
            .get(actor)
            .ok_or_else(|| AnalysisError::UnknownDevice(actor.to_owned()))?;
        Ok((route, u))
    };

    let last_relay = (ANALYSED_HOPS - 1) as u8;
    let mut routes: BTreeMap<u64, RouteBuild> = BTreeMap::new();
    let mut any_hop = false;
    for e in events {
        match e.event_type {
            EventType::DeviceOnline | EventType::DeviceOffline => {
                let actor = e.actor.as_deref().ok_or(AnalysisError::Malformed("device_online"))?;
                let i = *device_of
                    .get(actor)
                    .ok_or_else(|| AnalysisError::UnknownDevice(actor.to_owned()))?;
                online[i] = e.event_type == EventType::DeviceOnline;
            }
            EventType::RouteEndpoint => {
                let (r, u) = lookup(e, "route_endpoint")?;
                routes.entry(r).or_default().endpoints |= 1 << u;
            }
            EventType::LayerMember => {
                let (r, u) = lookup(e, "layer_member")?;
                let l = e.layer_index.ok_or(AnalysisError::Malformed("layer_member"))?;
                if l <= last_relay {
                    let rb = routes.entry(r).or_default();
                    *rb.layers.entry(l).or_default() |= 1 << u;
                    let actor = e.actor.as_deref().expect("checked by lookup");
                    rb.members.entry(l).or_default().push(device_of[actor]);
                }
            }
            EventType::MsgSent => {
                let r = e.route_id.ok_or(AnalysisError::Malformed("msg_sent"))?;
                routes.entry(r).or_default().sent += 1;
            }
            EventType::Hop => {
                any_hop = true;
                let (r, u) = lookup(e, "hop")?;
                let l = e.layer_index.ok_or(AnalysisError::Malformed("hop"))?;
                let m = e.message_id.ok_or(AnalysisError::Malformed("hop"))?;
                let rb = routes.entry(r).or_default();
                if l == 0 {
                    rb.first.insert(m, u);
                    let reachable = |layer: u8| {
                        rb.members.get(&layer).map_or(0u128, |ms| {
                            ms.iter()
                                .filter(|&&d| online[d])
                                .fold(0, |acc, &d| acc | 1 << device_user[d])
                        })
                    };
                    let path = (u, reachable(1), reachable(last_relay));
                    rb.paths.insert(path);
                } else if l == last_relay {
                    rb.last.insert(m, u);
                }
            }
            _ => {}
        }
    }
    if !any_hop || routes.values().all(|r| r.layers.is_empty()) {
        return Err(AnalysisError::MissingTraces);
    }

    let routes = routes
        .into_values()
        .filter(|r| r.layers.len() == ANALYSED_HOPS)
        .map(|r| {
            let mut end_pairs = BTreeMap::new();
            for (m, &u1) in &r.first {
                if let Some(&u3) = r.last.get(m) {
                    *end_pairs.entry((u1, u3)).or_insert(0) += 1;
                }
            }
            RouteTrace {
                endpoints: r.endpoints,
                layers: r.layers.into_values().collect(),
                sent: r.sent,
                first_hop_receivers: r.first.values().fold(0, |acc, &u| acc | 1 << u),
                last_hop_receivers: r.last.values().fold(0, |acc, &u| acc | 1 << u),
                first_hop_paths: r.paths,
                end_pairs,
            }
        })
        .collect();
    Ok(ParsedLog { users, routes })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verdict {
    pub ends: bool,
    pub full: bool,
    /// Share of the route's messages seen on both end hops.
    pub observed: f64,
}

/// Judges one route against the adversarial user set `adv`. Adversaries
/// churn like everyone else, so a path through accomplices only counts if
/// they were online when the first hop received the message.
pub fn judge(route: &RouteTrace, adv: u128) -> Verdict {
    let first = route.first_hop_receivers & adv != 0;
    let ends = first && route.last_hop_receivers & adv != 0;
    let full = route
        .first_hop_paths
        .iter()
        .any(|&(u, l2, l3)| adv >> u & 1 == 1 && l2 & adv != 0 && l3 & adv != 0);
    let seen: u64 = route
        .end_pairs
        .iter()
        .filter(|((a, b), _)| adv >> a & 1 == 1 && adv >> b & 1 == 1)
        .map(|(_, n)| n)
        .sum();
    let observed = if route.sent == 0 {
        0.0
    } else {
        seen as f64 / route.sent as f64
    };
    Verdict { ends, full, observed }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompromiseRow {
    pub adversary_users: usize,
    /// Adversary users over the users not party to a route.
    pub adv_fraction: f64,
    pub samples: usize,
    pub ends_compromised_frac: f64,
    pub full_compromised_frac: f64,
    /// Mean observed-message share over ends-compromised samples; `NaN` if
    /// there are none.
    pub mean_observed_msg_frac: f64,
    pub p90_observed_msg_frac: f64,
    pub p_correlate_closed: f64,
    pub p_full_closed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompromiseReport {
    pub users: usize,
    pub routes: usize,
    /// Mean relay-layer size, rounded, used in the closed forms.
    pub layer_size: usize,
    pub rows: Vec<CompromiseRow>,
}

/// For every count in `adversary_user_counts`, draws up to `cap` distinct
/// adversarial user sets per route among that route's non-participants
/// (all of them if there are fewer) and judges the route against each.
/// Only routes that carried at least one message are scanned.
pub fn compromise_scan(
    events: &[Event],
    adversary_user_counts: &[usize],
    cap: usize,
    seed: u64,
) -> Result<CompromiseReport, AnalysisError> {
    let log = parse_log(events)?;
    Ok(scan_parsed(&log, adversary_user_counts, cap, seed))
}

pub fn scan_parsed(log: &ParsedLog, adversary_user_counts: &[usize], cap: usize, seed: u64) -> CompromiseReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let routes: Vec<&RouteTrace> = log.routes.iter().filter(|r| r.sent > 0).collect();
    let layer_size = log.mean_layer_size().round().max(1.0) as usize;
    let mut rows = Vec::new();
    for &k in adversary_user_counts {
        let mut samples = 0usize;
        let (mut ends, mut full) = (0usize, 0usize);
        let mut observed = Vec::new();
        let mut pool_size = 0usize;
        for r in &routes {
            let pool: Vec<u8> = (0..log.users as u8).filter(|u| r.endpoints >> u & 1 == 0).collect();
            pool_size = pool_size.max(pool.len());
            if k == 0 || k > pool.len() {
                continue;
            }
            for adv in adversary_sets(&pool, k, cap, &mut rng) {
                let v = judge(r, adv);
                samples += 1;
                ends += v.ends as usize;
                full += v.full as usize;
                if v.ends {
                    observed.push(v.observed);
                }
            }
        }
        let frac = |n: usize| if samples == 0 { f64::NAN } else { n as f64 / samples as f64 };
        let adv_fraction = if pool_size == 0 {
            f64::NAN
        } else {
            k as f64 / pool_size as f64
        };
        let q = adv_fraction.clamp(0.0, 1.0);
        observed.sort_by(f64::total_cmp);
        rows.push(CompromiseRow {
            adversary_users: k,
            adv_fraction,
            samples,
            ends_compromised_frac: frac(ends),
            full_compromised_frac: frac(full),
            mean_observed_msg_frac: if observed.is_empty() {
                f64::NAN
            } else {
                observed.iter().sum::<f64>() / observed.len() as f64
            },
            p90_observed_msg_frac: if observed.is_empty() {
                f64::NAN
            } else {
                observed[(observed.len() * 9 / 10).min(observed.len() - 1)]
            },
            p_correlate_closed: p_correlate_spores(q, layer_size).unwrap_or(f64::NAN),
            p_full_closed: p_full_route_spores(q, layer_size, ANALYSED_HOPS).unwrap_or(f64::NAN),
        });
    }
    CompromiseReport {
        users: log.users,
        routes: routes.len(),
        layer_size,
        rows,
    }
}

fn n_choose_k(n: usize, k: usize) -> Option<usize> {
    let mut c: usize = 1;
    for i in 0..k {
        c = c.checked_mul(n - i)? / (i + 1);
    }
    Some(c)
}

/// All `k`-subsets of `pool` as user masks when there are at most `cap` of
/// them, otherwise `cap` distinct random ones.
fn adversary_sets(pool: &[u8], k: usize, cap: usize, rng: &mut ChaCha8Rng) -> Vec<u128> {
    let total = n_choose_k(pool.len(), k);
    if total.is_some_and(|t| t <= cap) {
        let mut out = Vec::new();
        let mut idx: Vec<usize> = (0..k).collect();
        loop {
            out.push(idx.iter().fold(0u128, |m, &i| m | 1 << pool[i]));
            // Advance to the next combination in lexicographic order.
            let Some(i) = (0..k).rev().find(|&i| idx[i] < pool.len() - k + i) else {
                return out;
            };
            idx[i] += 1;
            for j in i + 1..k {
                idx[j] = idx[j - 1] + 1;
            }
        }
    }
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(cap);
    while out.len() < cap {
        let m = index::sample(rng, pool.len(), k)
            .iter()
            .fold(0u128, |m, i| m | 1 << pool[i]);
        if seen.insert(m) {
            out.push(m);
        }
    }
    out
}
