use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spores::esquad::{predict_online, AvailabilityMatrix, MarkovPredictor};

/// Straight transcription of the counting rule over boolean rows, using
/// exact integer counts and returning the fraction as (num, den).
fn oracle(x: &[Vec<bool>], i: usize, d: usize) -> (u64, u64) {
    let mut matches = 0;
    let mut hits = 0;
    for j in 0..i {
        if x[j] == x[i] {
            matches += 1;
            if x[j + 1][d] {
                hits += 1;
            }
        }
    }
    if matches > 0 {
        return (hits + 1, matches + 2);
    }
    let mut on = 0;
    let mut stayed = 0;
    for j in 0..i {
        if x[j][d] {
            on += 1;
            if x[j + 1][d] {
                stayed += 1;
            }
        }
    }
    (stayed + 1, on + 2)
}

fn random_matrix(rng: &mut ChaCha8Rng) -> Vec<Vec<bool>> {
    let devices = rng.random_range(1..=8);
    let rounds = rng.random_range(1..=200);
    let bias: f64 = rng.random_range(0.05..0.95);
    // Fewer states make repeated rows, and thus the main branch, common.
    let states: Vec<Vec<bool>> = (0..rng.random_range(1..=6))
        .map(|_| (0..devices).map(|_| rng.random_bool(bias)).collect())
        .collect();
    (0..rounds)
        .map(|_| {
            if rng.random_bool(0.7) {
                states[rng.random_range(0..states.len())].clone()
            } else {
                (0..devices).map(|_| rng.random_bool(bias)).collect()
            }
        })
        .collect()
}

#[test]
fn matches_oracle_on_a_thousand_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0u64;
    for _ in 0..1000 {
        let x = random_matrix(&mut rng);
        let m = AvailabilityMatrix::from_bools(&x);
        let mut inc = MarkovPredictor::new(m.devices());
        for i in 0..x.len() {
            inc.observe(m.row(i));
            for d in 0..m.devices() {
                let (num, den) = oracle(&x, i, d);
                let want = num as f64 / den as f64;
                assert_eq!(predict_online(&m, i, d), want, "round {i} device {d}");
                assert_eq!(inc.predict(d), want);
                checked += 1;
            }
        }
    }
    assert!(checked > 100_000);
}

fn matrix() -> impl Strategy<Value = Vec<Vec<bool>>> {
    (1usize..=6).prop_flat_map(|d| prop::collection::vec(prop::collection::vec(any::<bool>(), d), 2..60))
}

proptest! {
    #[test]
    fn strictly_inside_unit_interval(x in matrix()) {
        let m = AvailabilityMatrix::from_bools(&x);
        for i in 0..x.len() {
            for d in 0..m.devices() {
                let p = predict_online(&m, i, d);
                prop_assert!(p > 0.0 && p < 1.0);
            }
        }
    }

    #[test]
    fn online_follow_up_never_lowers_the_estimate(x in matrix(), d_pick in any::<prop::sample::Index>()) {
        // Append the current state, followed by d online, then the current
        // state again: the estimate at that state must not drop. Only the
        // counting branch is monotone; the fallback is a different estimator.
        let d = d_pick.index(x[0].len());
        let last = x.last().unwrap().clone();
        prop_assume!(x[..x.len() - 1].contains(&last));
        let before = predict_online(&AvailabilityMatrix::from_bools(&x), x.len() - 1, d);
        let mut next = last.clone();
        next[d] = true;
        let mut y = x.clone();
        y.push(next.clone());
        if next != last {
            y.push(last);
        }
        let after = predict_online(&AvailabilityMatrix::from_bools(&y), y.len() - 1, d);
        prop_assert!(after >= before, "{} < {}", after, before);
    }
}
