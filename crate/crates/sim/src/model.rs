//! Hidden-Markov user behaviour models and the timelines they generate.
//!
//! A user moves between `N_loc` hidden locations following the row-stochastic
//! matrix `A`; at location `l`, device `d` is online with probability
//! `B[l][d]`. Devices only ever see the resulting availability matrix.

use rand::{Rng, SeedableRng};
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

use spores::esquad::{AvailabilityMatrix, MarkovPredictor};

pub const UNPREDICTABLE_BETA: f64 = 0.8;
pub const PREDICTABLE_BETA: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Uniform,
    Unpredictable,
    Predictable,
    Deterministic,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::Uniform,
        ModelKind::Unpredictable,
        ModelKind::Predictable,
        ModelKind::Deterministic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Uniform => "uniform",
            ModelKind::Unpredictable => "unpredictable",
            ModelKind::Predictable => "predictable",
            ModelKind::Deterministic => "deterministic",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" | "uni" => Ok(ModelKind::Uniform),
            "unpredictable" | "unpred" => Ok(ModelKind::Unpredictable),
            "predictable" | "pred" => Ok(ModelKind::Predictable),
            "deterministic" | "det" => Ok(ModelKind::Deterministic),
            _ => Err(ModelError::UnknownKind(s.to_owned())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("mean availability {0} outside (0, 1)")]
    Mu(f64),
    #[error("need at least one location and one device")]
    Shape,
    #[error("unknown model `{0}`")]
    UnknownKind(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserModel {
    pub kind: ModelKind,
    pub mu: f64,
    /// `A[l][l']`: probability of moving from `l` to `l'`.
    pub a: Vec<Vec<f64>>,
    /// `B[l][d]`: probability that device `d` is online at `l`.
    pub b: Vec<Vec<f64>>,
}

impl UserModel {
    pub fn locations(&self) -> usize {
        self.a.len()
    }

    pub fn devices(&self) -> usize {
        self.b[0].len()
    }

    /// Long-run fraction of (round, device) cells that are online.
    pub fn stationary_availability(&self) -> f64 {
        let pi = stationary(&self.a);
        let n_dev = self.devices() as f64;
        pi.iter()
            .zip(&self.b)
            .map(|(p, row)| p * row.iter().sum::<f64>() / n_dev)
            .sum()
    }
}

/// Stationary distribution from a uniform start, by averaging powers so that
/// periodic chains converge too.
fn stationary(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    let mut p = vec![1.0 / n as f64; n];
    let mut avg = vec![0.0; n];
    let steps = 4000;
    for _ in 0..steps {
        let mut next = vec![0.0; n];
        for (i, pi) in p.iter().enumerate() {
            for (j, aij) in a[i].iter().enumerate() {
                next[j] += pi * aij;
            }
        }
        p = next;
        for (s, pi) in avg.iter_mut().zip(&p) {
            *s += pi / steps as f64;
        }
    }
    avg
}

/// Shape `α` giving a `Beta(α, β)` of mean `μ`.
pub fn beta_alpha(mu: f64, beta: f64) -> f64 {
    beta / (1.0 / mu - 1.0)
}

pub fn sample_model<R: Rng + ?Sized>(
    kind: ModelKind,
    mu: f64,
    n_loc: usize,
    n_dev: usize,
    rng: &mut R,
) -> Result<UserModel, ModelError> {
    if !(mu > 0.0 && mu < 1.0) {
        return Err(ModelError::Mu(mu));
    }
    if n_loc == 0 || n_dev == 0 {
        return Err(ModelError::Shape);
    }
    let (a, b) = match kind {
        ModelKind::Uniform => (vec![vec![1.0]], vec![vec![mu; n_dev]]),
        ModelKind::Unpredictable => beta_matrices(mu, UNPREDICTABLE_BETA, n_loc, n_dev, rng),
        ModelKind::Predictable => beta_matrices(mu, PREDICTABLE_BETA, n_loc, n_dev, rng),
        ModelKind::Deterministic => (cyclic(n_loc), deterministic_b(mu, n_loc, n_dev)),
    };
    Ok(UserModel { kind, mu, a, b })
}

fn beta_matrices<R: Rng + ?Sized>(
    mu: f64,
    beta: f64,
    n_loc: usize,
    n_dev: usize,
    rng: &mut R,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let dist = Beta::new(beta_alpha(mu, beta), beta).expect("positive shape parameters");
    let a = (0..n_loc)
        .map(|_| loop {
            let row: Vec<f64> = (0..n_loc).map(|_| dist.sample(rng)).collect();
            let sum: f64 = row.iter().sum();
            if sum > 0.0 && sum.is_finite() {
                break row.into_iter().map(|x| x / sum).collect();
            }
        })
        .collect();
    let b = (0..n_loc)
        .map(|_| (0..n_dev).map(|_| dist.sample(rng)).collect())
        .collect();
    (a, b)
}

fn cyclic(n_loc: usize) -> Vec<Vec<f64>> {
    (0..n_loc)
        .map(|l| (0..n_loc).map(|m| if m == (l + 1) % n_loc { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// `round(μ·N_loc·N_dev)` ones, the rest zeros.
///
/// The rarer value is laid out first, along the diagonal `(k mod N_loc,
/// (k + ⌊k / lcm⌋) mod N_dev)`, which spreads it over locations and devices
/// evenly. When there are fewer rare cells than locations, they all go to
/// device 0 at evenly spaced locations so the timeline stays periodic with
/// the shortest possible period.
fn deterministic_b(mu: f64, n_loc: usize, n_dev: usize) -> Vec<Vec<f64>> {
    let cells = n_loc * n_dev;
    let ones = ((mu * cells as f64).round() as usize).min(cells);
    let (rare, rare_value) = if ones <= cells - ones {
        (ones, 1.0)
    } else {
        (cells - ones, 0.0)
    };
    let mut b = vec![vec![1.0 - rare_value; n_dev]; n_loc];
    if rare > 0 && rare < n_loc {
        for k in 0..rare {
            b[k * n_loc / rare][0] = rare_value;
        }
        return b;
    }
    let lcm = n_loc * n_dev / gcd(n_loc, n_dev);
    for k in 0..rare {
        b[k % n_loc][(k + k / lcm) % n_dev] = rare_value;
    }
    b
}

#[derive(Debug, Clone)]
pub struct Timeline {
    pub x: AvailabilityMatrix,
    /// Hidden; never handed to devices.
    pub(crate) locations: Vec<usize>,
}

impl Timeline {
    pub fn hidden_locations(&self) -> &[usize] {
        &self.locations
    }
}

/// The deterministic model always starts at location 0; the others start
/// from a uniformly random location.
pub fn random_walk<R: Rng + ?Sized>(model: &UserModel, rounds: usize, rng: &mut R) -> Timeline {
    let n_loc = model.locations();
    let mut loc = match model.kind {
        ModelKind::Deterministic => 0,
        _ => rng.random_range(0..n_loc),
    };
    let mut x = AvailabilityMatrix::new(model.devices());
    let mut locations = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        locations.push(loc);
        let row = model.b[loc]
            .iter()
            .enumerate()
            .fold(0u64, |acc, (d, &p)| acc | (u64::from(rng.random_bool(p)) << d));
        x.push_row(row);
        loc = next_location(&model.a[loc], rng);
    }
    Timeline { x, locations }
}

fn next_location<R: Rng + ?Sized>(row: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}

/// Mean log score of the Markov predictor over rounds `l_init < i < L - 1`,
/// each scored against round `i + 1`.
pub fn predictability_score(x: &AvailabilityMatrix, l_init: usize) -> f64 {
    let mut p = MarkovPredictor::new(x.devices());
    let (mut sum, mut n) = (0.0, 0u64);
    for i in 0..x.rounds().saturating_sub(1) {
        p.observe(x.row(i));
        if i <= l_init {
            continue;
        }
        for d in 0..x.devices() {
            let pi = p.predict(d);
            sum += if x.get(i + 1, d) { pi.ln() } else { (1.0 - pi).ln() };
            n += 1;
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Average score over `users` independently sampled models of one kind.
pub fn model_predictability<R: Rng + ?Sized>(
    kind: ModelKind,
    mu: f64,
    n_loc: usize,
    n_dev: usize,
    rounds: usize,
    l_init: usize,
    users: usize,
    rng: &mut R,
) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for _ in 0..users {
        let m = sample_model(kind, mu, n_loc, n_dev, rng)?;
        total += predictability_score(&random_walk(&m, rounds, rng).x, l_init);
    }
    Ok(total / users as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictabilityRow {
    pub model: ModelKind,
    pub mu: f64,
    pub score: f64,
}

/// Timeline shape for [`predictability_grid`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridParams {
    pub locations: usize,
    pub devices: usize,
    pub rounds: usize,
    pub l_init: usize,
    pub users: usize,
}

impl Default for GridParams {
    fn default() -> Self {
        Self {
            locations: 4,
            devices: 6,
            rounds: 1000,
            l_init: 50,
            users: 25,
        }
    }
}

/// Scores every `(model, μ)` cell. Each cell draws from its own stream, so
/// a cell's score does not depend on which other cells are computed.
pub fn predictability_grid(
    models: &[ModelKind],
    mus: &[f64],
    params: GridParams,
    seed: u64,
) -> Result<Vec<PredictabilityRow>, ModelError> {
    let mut rows = Vec::new();
    for &model in models {
        for &mu in mus {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(cell_stream(model, mu));
            let score = model_predictability(
                model,
                mu,
                params.locations,
                params.devices,
                params.rounds,
                params.l_init,
                params.users,
                &mut rng,
            )?;
            rows.push(PredictabilityRow { model, mu, score });
        }
    }
    Ok(rows)
}

fn cell_stream(model: ModelKind, mu: f64) -> u64 {
    let k = ModelKind::ALL.iter().position(|&m| m == model).expect("listed") as u64;
    k << 60 ^ mu.to_bits() >> 4
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn alpha_formula() {
        assert_eq!(beta_alpha(0.5, 0.8), 0.8);
        assert!((beta_alpha(0.3, 0.6) - 0.257_142_857_142_857).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_mu() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for mu in [0.0, 1.0, -0.1, f64::NAN] {
            assert!(sample_model(ModelKind::Uniform, mu, 4, 6, &mut rng).is_err());
        }
    }

    #[test]
    fn uniform_has_one_location() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = sample_model(ModelKind::Uniform, 0.3, 4, 6, &mut rng).unwrap();
        assert_eq!(m.a, vec![vec![1.0]]);
        assert_eq!(m.b, vec![vec![0.3; 6]]);
    }

    #[test]
    fn beta_models_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for kind in [ModelKind::Unpredictable, ModelKind::Predictable] {
            for mu in [0.1, 0.3, 0.5, 0.9] {
                let m = sample_model(kind, mu, 4, 6, &mut rng).unwrap();
                for row in &m.a {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
                assert!(m.b.iter().flatten().all(|p| (0.0..=1.0).contains(p)));
            }
        }
    }

    #[test]
    fn deterministic_cycles_through_locations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = sample_model(ModelKind::Deterministic, 0.5, 4, 6, &mut rng).unwrap();
        let t = random_walk(&m, 12, &mut rng);
        assert_eq!(t.hidden_locations(), &[0, 1, 2, 3, 0, 1, 2, 3, 0, 1, 2, 3]);
        for i in 4..12 {
            assert_eq!(t.x.row(i), t.x.row(i - 4));
        }
    }

    #[test]
    fn deterministic_mean_and_state_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for mu in [0.05, 0.1, 0.3, 0.5, 0.7, 0.9, 0.95] {
            let m = sample_model(ModelKind::Deterministic, mu, 4, 6, &mut rng).unwrap();
            let ones: f64 = m.b.iter().flatten().sum();
            assert_eq!(ones, (mu * 24.0).round(), "mu {mu}");
            // Equal rows must have equal successors, or the state is ambiguous.
            // Fewer rare cells than locations leave repeated plain rows,
            // which is only unambiguous when the pattern has period 2.
            let rare = ones.min(24.0 - ones) as usize;
            if rare > 0 && rare < 4 && rare != 2 {
                continue;
            }
            let rows: Vec<u64> = (0..4).map(|l| row_bits(&m.b[l])).collect();
            for i in 0..4 {
                for j in 0..4 {
                    if rows[i] == rows[j] {
                        assert_eq!(rows[(i + 1) % 4], rows[(j + 1) % 4], "mu {mu}");
                    }
                }
            }
        }
    }

    fn row_bits(row: &[f64]) -> u64 {
        row.iter().enumerate().fold(0, |acc, (d, &p)| acc | (u64::from(p == 1.0) << d))
    }

    #[test]
    fn always_online_scores_near_zero() {
        let x = AvailabilityMatrix::from_rows(1, vec![1; 2000]);
        let s = predictability_score(&x, 50);
        assert!(s < 0.0 && s > -0.005, "{s}");
    }

    #[test]
    fn stationary_availability_of_uniform_is_mu() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = sample_model(ModelKind::Uniform, 0.3, 1, 6, &mut rng).unwrap();
        assert!((m.stationary_availability() - 0.3).abs() < 1e-12);
        let m = sample_model(ModelKind::Deterministic, 0.3, 4, 6, &mut rng).unwrap();
        assert!((m.stationary_availability() - 7.0 / 24.0).abs() < 1e-3);
    }
}
