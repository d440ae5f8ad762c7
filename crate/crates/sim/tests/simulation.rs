use std::collections::{BTreeSet, HashMap};

use spores_sim::config::Thetas;
use spores_sim::events::{to_ndjson, EventType};
use spores_sim::model::ModelKind;
use spores_sim::{run_experiment, ExperimentConfig, RunOutput};

fn small(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        users: 8,
        devices_per_user: 4,
        model: ModelKind::Unpredictable,
        mu: 0.6,
        theta: Thetas(vec![0.01, 0.001]),
        files: 4,
        chunk_kib: 1.0,
        file_mib: 20.0 / 1024.0,
        seed,
        ..ExperimentConfig::default()
    }
}

fn run(cfg: &ExperimentConfig) -> RunOutput {
    run_experiment(cfg).expect("valid config")
}

#[test]
fn same_seed_same_log() {
    let a = run(&small(5));
    let b = run(&small(5));
    assert_eq!(to_ndjson(&a.events), to_ndjson(&b.events));
    let c = run(&small(6));
    assert_ne!(to_ndjson(&a.events), to_ndjson(&c.events));
}

#[test]
fn chunk_size_does_not_change_the_schedule() {
    let a = run(&small(3));
    let mut cfg = small(3);
    cfg.chunk_kib = 2.0;
    cfg.file_mib = 40.0 / 1024.0;
    let b = run(&cfg);
    assert_eq!(to_ndjson(&a.events), to_ndjson(&b.events));
}

#[test]
fn invalid_config_is_rejected() {
    let mut cfg = small(1);
    cfg.mu = 1.5;
    assert!(run_experiment(&cfg).is_err());
}

#[test]
fn log_respects_churn_and_route_shape() {
    let out = run(&small(2));
    let mut user_of = HashMap::new();
    let mut online: HashMap<String, bool> = HashMap::new();
    let mut last = f64::NEG_INFINITY;
    let mut layers: HashMap<u64, [BTreeSet<String>; 4]> = HashMap::new();
    let mut hops = 0;
    for e in &out.events {
        assert!(e.time >= last, "time went backwards at {e:?}");
        last = e.time;
        let actor = e.actor.clone();
        match e.event_type {
            EventType::DeviceSpawn => {
                let user: usize = e.outcome.as_deref().unwrap().trim_start_matches("user=").parse().unwrap();
                user_of.insert(actor.unwrap(), user);
            }
            EventType::DeviceOnline => {
                online.insert(actor.unwrap(), true);
            }
            EventType::DeviceOffline => {
                online.insert(actor.unwrap(), false);
            }
            EventType::LayerMember => {
                let l = e.layer_index.unwrap() as usize;
                layers.entry(e.route_id.unwrap()).or_default()[l].insert(actor.unwrap());
            }
            EventType::Hop => {
                let a = actor.unwrap();
                assert_eq!(online.get(&a), Some(&true), "hop to offline device {a}");
                let l = e.layer_index.unwrap() as usize;
                assert!(layers[&e.route_id.unwrap()][l].contains(&a), "hop outside its layer");
                hops += 1;
            }
            _ => {}
        }
    }
    assert!(hops > 0);
    assert!(!layers.is_empty());
    for ls in layers.values() {
        assert!(ls.iter().all(|l| !l.is_empty()));
        let terminus: BTreeSet<usize> = ls[3].iter().map(|a| user_of[a]).collect();
        assert_eq!(terminus.len(), 1, "terminus spans several users");
    }
}

#[test]
fn completed_transfers_are_verified() {
    let mut cfg = small(4);
    cfg.mu = 0.9;
    cfg.model = ModelKind::Deterministic;
    let out = run(&cfg);
    assert!(!out.transfers.is_empty());
    for t in &out.transfers {
        if t.completed_at.is_some() {
            assert!(t.verified, "file {} corrupted", t.file_index);
        }
        if let (Some(c), Some(a)) = (t.completed_at, t.acked_at) {
            assert!(a >= c);
        }
    }
    assert!(out.completion_rate() > 0.5);
}

#[test]
fn lossy_links_still_deliver() {
    for seed in 1..=5 {
        let cfg = ExperimentConfig {
            users: 4,
            devices_per_user: 3,
            model: ModelKind::Deterministic,
            mu: 0.9,
            files: 1,
            chunk_kib: 1.0,
            file_mib: 50.0 / 1024.0,
            drop_rate: 0.3,
            teardown_after_rounds: 200,
            seed,
            ..ExperimentConfig::default()
        };
        let out = run(&cfg);
        let t = &out.transfers[0];
        assert!(t.completed_at.is_some() && t.verified, "seed {seed}");
        assert!(t.transmissions > u64::from(t.chunks));
    }
}

#[test]
fn rates_are_fractions() {
    let out = run(&small(7));
    for theta in [None, Some(0.01), Some(0.001)] {
        let r = out.transit_rate(theta);
        assert!((0.0..=1.0).contains(&r));
    }
    assert!(out.mean_layer_size(None) >= 1.0);
    let c = out.completion_rate();
    assert!((0.0..=1.0).contains(&c));
}
