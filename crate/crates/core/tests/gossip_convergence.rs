use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spores::esquad::{build_availability, predict_online, record_use};
use spores::{DeviceId, InteractionLog, UserId};

const N: usize = 6;

fn logs_with_history(rng: &mut ChaCha8Rng) -> Vec<InteractionLog> {
    (0..N)
        .map(|d| {
            let mut log = InteractionLog::new(UserId(3), N as u16);
            for round in 0..40 {
                if rng.random_bool(0.5) {
                    record_use(&mut log, DeviceId(d as u16), round as f64 * 6.0 + d as f64 * 0.1);
                }
            }
            log
        })
        .collect()
}

fn union(logs: &[InteractionLog]) -> InteractionLog {
    let mut u = InteractionLog::new(UserId(3), N as u16);
    for l in logs {
        u.merge(l).unwrap();
    }
    u
}

/// Push-pull anti-entropy between `a` and `b` using digests.
fn sync(logs: &mut [InteractionLog], a: usize, b: usize) {
    let to_b = logs[a].delta(&logs[b].digest());
    let to_a = logs[b].delta(&logs[a].digest());
    logs[b].apply_delta(UserId(3), &to_b).unwrap();
    logs[a].apply_delta(UserId(3), &to_a).unwrap();
}

#[test]
fn random_matchings_usually_converge_within_twice_log_rounds() {
    let bound = 2 * (N as f64).log2().ceil() as usize;
    let mut within = 0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut logs = logs_with_history(&mut rng);
        let target = union(&logs);
        let mut rounds = 0;
        while logs.iter().any(|l| *l != target) {
            let mut order: Vec<usize> = (0..N).collect();
            order.shuffle(&mut rng);
            for pair in order.chunks(2) {
                sync(&mut logs, pair[0], pair[1]);
            }
            rounds += 1;
            assert!(rounds <= 3 * bound, "seed {seed}: no convergence");
        }
        within += usize::from(rounds <= bound);
    }
    // Random matchings are not always connected over so few rounds.
    assert!(within >= 90, "{within}/100 within {bound} rounds");
}

#[test]
fn dissemination_schedule_meets_the_bound_exactly() {
    let bound = 2 * (N as f64).log2().ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut logs = logs_with_history(&mut rng);
    let target = union(&logs);
    for r in 0..bound {
        let step = 1 << (r % 3);
        for i in 0..N {
            sync(&mut logs, i, (i + step) % N);
        }
    }
    assert!(logs.iter().all(|l| *l == target));
}

#[test]
fn converged_devices_agree_on_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut logs = logs_with_history(&mut rng);
    for _ in 0..6 {
        for i in 0..N {
            sync(&mut logs, i, (i + 1) % N);
        }
    }
    let ms: Vec<_> = logs.iter().map(|l| build_availability(l, 6.0, 0.0, 40)).collect();
    for m in &ms[1..] {
        assert_eq!(*m, ms[0]);
    }
    for d in 0..N {
        let p = predict_online(&ms[0], 39, d);
        assert!(ms.iter().all(|m| predict_online(m, 39, d) == p));
    }
}

#[test]
fn delta_sync_equals_full_merge() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let logs = logs_with_history(&mut rng);
        let mut a = logs[0].clone();
        a.merge(&logs[1]).unwrap();
        let mut b = logs[2].clone();
        b.merge(&logs[1]).unwrap();
        let mut full = a.clone();
        full.merge(&b).unwrap();
        let mut pair = vec![a, b];
        sync(&mut pair, 0, 1);
        assert_eq!(pair[0], full);
        assert_eq!(pair[1], full);
    }
}
