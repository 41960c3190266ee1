//! Ground-truth hidden Markov models: toy configurations, simulation and
//! exact probability oracles.
//!
//! Matrices are column-stochastic: `transition[(i, j)] = Pr(h' = i | h = j)`
//! and `observation[(i, j)] = Pr(x = i | h = j)`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::linalg::{from_rows, to_rows};
use crate::moments::ObservableStats;
use crate::{Error, Result};

const STOCHASTIC_TOL: f64 = 1e-12;

/// The generator used by every stochastic operation in the crate. ChaCha8 is
/// specified bit-for-bit, so seeded streams agree across platforms.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HmmModel {
    n_obs: usize,
    n_hidden: usize,
    transition: DMatrix<f64>,
    observation: DMatrix<f64>,
    initial: DVector<f64>,
}

impl HmmModel {
    pub fn new(
        transition: DMatrix<f64>,
        observation: DMatrix<f64>,
        initial: DVector<f64>,
    ) -> Result<Self> {
        let m = transition.nrows();
        if m == 0 || transition.ncols() != m {
            return Err(Error::InvalidModel(format!(
                "transition must be square and non-empty, got {}x{}",
                transition.nrows(),
                transition.ncols()
            )));
        }
        if observation.ncols() != m || observation.nrows() == 0 {
            return Err(Error::InvalidModel(format!(
                "observation must be n x {m}, got {}x{}",
                observation.nrows(),
                observation.ncols()
            )));
        }
        if initial.len() != m {
            return Err(Error::InvalidModel(format!(
                "initial distribution has length {}, expected {m}",
                initial.len()
            )));
        }
        check_stochastic_columns(&transition, "transition")?;
        check_stochastic_columns(&observation, "observation")?;
        check_distribution(initial.as_slice(), "initial")?;
        Ok(Self {
            n_obs: observation.nrows(),
            n_hidden: m,
            transition,
            observation,
            initial,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn n_hidden(&self) -> usize {
        self.n_hidden
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    pub fn observation(&self) -> &DMatrix<f64> {
        &self.observation
    }

    pub fn initial(&self) -> &DVector<f64> {
        &self.initial
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ModelDoc {
            n_obs: self.n_obs,
            n_hidden: self.n_hidden,
            transition: to_rows(&self.transition),
            observation: to_rows(&self.observation),
            initial: self.initial.iter().cloned().collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    /// Parses and validates a model document.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDoc = serde_json::from_str(text)?;
        let model = Self::new(
            from_rows(&doc.transition, "transition")?,
            from_rows(&doc.observation, "observation")?,
            DVector::from_vec(doc.initial),
        )?;
        if model.n_obs != doc.n_obs || model.n_hidden != doc.n_hidden {
            return Err(Error::InvalidModel(format!(
                "declared sizes (n_obs={}, n_hidden={}) disagree with matrices ({}, {})",
                doc.n_obs, doc.n_hidden, model.n_obs, model.n_hidden
            )));
        }
        Ok(model)
    }

    /// Stationary distribution of the hidden chain by power iteration on the
    /// lazy chain `(T + I) / 2`, started from `initial`.
    pub fn stationary(&self) -> DVector<f64> {
        let m = self.n_hidden;
        let lazy = (&self.transition + DMatrix::identity(m, m)) * 0.5;
        let mut p = DVector::from_element(m, 1.0 / m as f64);
        for _ in 0..100_000 {
            let next = &lazy * &p;
            let delta = (&next - &p).amax();
            p = next;
            if delta < 1e-15 {
                break;
            }
        }
        p
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    n_obs: usize,
    n_hidden: usize,
    transition: Vec<Vec<f64>>,
    observation: Vec<Vec<f64>>,
    initial: Vec<f64>,
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidModel(format!("{what}: entry {bad} outside [0, 1]")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::InvalidModel(format!("{what}: sums to {total}, expected 1")));
    }
    Ok(())
}

fn check_stochastic_columns(m: &DMatrix<f64>, what: &str) -> Result<()> {
    for (j, col) in m.column_iter().enumerate() {
        let col: Vec<f64> = col.iter().cloned().collect();
        check_distribution(&col, &format!("{what} column {j}"))?;
    }
    Ok(())
}

/// Observation matrix that reports the true state with probability `acc` and
/// spreads the rest uniformly over the other symbols.
fn noisy_identity(n: usize, acc: f64) -> DMatrix<f64> {
    if n == 1 {
        return DMatrix::from_element(1, 1, 1.0);
    }
    let off = (1.0 - acc) / (n - 1) as f64;
    DMatrix::from_fn(n, n, |i, j| if i == j { acc } else { off })
}

/// Five-state ring: h1 moves to h2 or h5 with equal probability, h2 and h5
/// fall back to h1 with probability 0.9, and the far states h3, h4 return
/// inward deterministically.
pub fn make_ring() -> HmmModel {
    let mut t = DMatrix::zeros(5, 5);
    // column = current state, row = next state
    t[(1, 0)] = 0.5;
    t[(4, 0)] = 0.5;
    t[(0, 1)] = 0.9;
    t[(2, 1)] = 0.1;
    t[(1, 2)] = 1.0;
    t[(2, 3)] = 1.0;
    t[(0, 4)] = 0.9;
    t[(3, 4)] = 0.1;
    let o = noisy_identity(5, 0.6);
    let pi = DVector::from_element(5, 0.2);
    HmmModel::new(t, o, pi).expect("ring model is stochastic")
}

/// `rows x cols` grid walk: each cell moves uniformly to one of its 4-neighbours.
pub fn make_grid(rows: usize, cols: usize, obs_acc: f64) -> Result<HmmModel> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument("grid dimensions must be at least 1".into()));
    }
    if !(obs_acc > 0.0 && obs_acc <= 1.0) {
        return Err(Error::InvalidArgument(format!("obs_acc {obs_acc} not in (0, 1]")));
    }
    let m = rows * cols;
    if m == 1 && obs_acc < 1.0 {
        return Err(Error::InvalidArgument(
            "a 1x1 grid has no other symbol to receive observation noise".into(),
        ));
    }
    let mut t = DMatrix::zeros(m, m);
    for r in 0..rows {
        for c in 0..cols {
            let here = r * cols + c;
            let mut nbrs = Vec::with_capacity(4);
            if r > 0 {
                nbrs.push(here - cols);
            }
            if r + 1 < rows {
                nbrs.push(here + cols);
            }
            if c > 0 {
                nbrs.push(here - 1);
            }
            if c + 1 < cols {
                nbrs.push(here + 1);
            }
            if nbrs.is_empty() {
                t[(here, here)] = 1.0;
            }
            let p = 1.0 / nbrs.len().max(1) as f64;
            for nb in nbrs {
                t[(nb, here)] = p;
            }
        }
    }
    let o = noisy_identity(m, obs_acc);
    let pi = DVector::from_element(m, 1.0 / m as f64);
    HmmModel::new(t, o, pi)
}

/// Reset chain with exact observations.
pub fn make_chain(n_states: usize, p_reset: f64) -> Result<HmmModel> {
    make_chain_noisy(n_states, p_reset, 0.0)
}

/// Reset chain: state i advances with probability `1 - p_reset` and jumps back
/// to the first state with probability `p_reset`; the last state always
/// returns to the first. Observations are correct with probability
/// `1 - obs_noise`.
pub fn make_chain_noisy(n_states: usize, p_reset: f64, obs_noise: f64) -> Result<HmmModel> {
    if n_states < 2 {
        return Err(Error::InvalidArgument("chain needs at least 2 states".into()));
    }
    if !(0.0..=1.0).contains(&p_reset) {
        return Err(Error::InvalidArgument(format!("p_reset {p_reset} not in [0, 1]")));
    }
    if !(0.0..1.0).contains(&obs_noise) {
        return Err(Error::InvalidArgument(format!("obs_noise {obs_noise} not in [0, 1)")));
    }
    let n = n_states;
    let mut t = DMatrix::zeros(n, n);
    for j in 0..n - 1 {
        t[(j + 1, j)] = 1.0 - p_reset;
        t[(0, j)] += p_reset;
    }
    t[(0, n - 1)] = 1.0;
    let o = noisy_identity(n, 1.0 - obs_noise);
    let mut pi = DVector::zeros(n);
    pi[0] = 1.0;
    HmmModel::new(t, o, pi)
}

/// Random HMM with Dirichlet(`concentration`) columns and initial law.
pub fn make_random(
    n_obs: usize,
    n_hidden: usize,
    concentration: f64,
    seed: u64,
) -> Result<HmmModel> {
    if n_obs == 0 || n_hidden == 0 {
        return Err(Error::InvalidArgument("random HMM needs n_obs, n_hidden >= 1".into()));
    }
    if concentration <= 0.0 {
        return Err(Error::InvalidArgument("concentration must be positive".into()));
    }
    let gamma = Gamma::new(concentration, 1.0)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = seeded_rng(seed);
    let mut draw = |len: usize| -> Vec<f64> {
        loop {
            let g: Vec<f64> = (0..len).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = g.iter().sum();
            if total > 0.0 {
                let mut p: Vec<f64> = g.iter().map(|v| v / total).collect();
                // push the rounding residue into the largest entry
                let fix = 1.0 - p.iter().sum::<f64>();
                let imax = (0..len).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap_or(0);
                p[imax] += fix;
                return p;
            }
        }
    };
    let mut t = DMatrix::zeros(n_hidden, n_hidden);
    for j in 0..n_hidden {
        for (i, v) in draw(n_hidden).into_iter().enumerate() {
            t[(i, j)] = v;
        }
    }
    let mut o = DMatrix::zeros(n_obs, n_hidden);
    for j in 0..n_hidden {
        for (i, v) in draw(n_obs).into_iter().enumerate() {
            o[(i, j)] = v;
        }
    }
    let pi = DVector::from_vec(draw(n_hidden));
    HmmModel::new(t, o, pi)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SymbolSequence(pub Vec<usize>);

impl SymbolSequence {
    pub fn new(symbols: Vec<usize>) -> Self {
        Self(symbols)
    }

    pub fn symbols(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn check_alphabet(&self, n_obs: usize) -> Result<()> {
        match self.0.iter().find(|&&s| s >= n_obs) {
            Some(&symbol) => Err(Error::SymbolOutOfRange { symbol, n_obs }),
            None => Ok(()),
        }
    }
}

/// Binary string of ten 0s followed by 1s up to `length`.
pub fn make_deterministic_string(length: usize) -> Result<SymbolSequence> {
    if length < 10 {
        return Err(Error::InvalidArgument(format!(
            "deterministic string needs length >= 10, got {length}"
        )));
    }
    Ok(SymbolSequence((0..length).map(|t| usize::from(t >= 10)).collect()))
}

pub type Triplet = (usize, usize, usize);

#[derive(Clone, Debug, PartialEq)]
pub struct TripletDataset {
    triplets: Vec<Triplet>,
    n_obs: usize,
}

impl TripletDataset {
    pub fn new(triplets: Vec<Triplet>, n_obs: usize) -> Result<Self> {
        if triplets.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for &(a, b, c) in &triplets {
            let symbol = a.max(b).max(c);
            if symbol >= n_obs {
                return Err(Error::SymbolOutOfRange { symbol, n_obs });
            }
        }
        Ok(Self { triplets, n_obs })
    }

    /// Sliding windows `(x_t, x_{t+1}, x_{t+2})` over every sequence.
    pub fn from_sequences(seqs: &[SymbolSequence], n_obs: usize) -> Result<Self> {
        let triplets = seqs
            .iter()
            .flat_map(|s| s.0.windows(3).map(|w| (w[0], w[1], w[2])))
            .collect();
        Self::new(triplets, n_obs)
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletMode {
    /// First three observations of a fresh rollout per triplet.
    #[default]
    Independent,
    /// All consecutive windows of one long rollout.
    Sliding,
}

impl std::str::FromStr for TripletMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(Self::Independent),
            "sliding" => Ok(Self::Sliding),
            other => Err(Error::InvalidArgument(format!("unknown triplet mode '{other}'"))),
        }
    }
}

fn sample_column<R: Rng>(m: &DMatrix<f64>, col: usize, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for i in 0..m.nrows() {
        let p = m[(i, col)];
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

fn sample_initial<R: Rng>(pi: &DVector<f64>, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in pi.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

fn rollout<R: Rng>(model: &HmmModel, length: usize, rng: &mut R) -> Vec<usize> {
    let mut out = Vec::with_capacity(length);
    if length == 0 {
        return out;
    }
    let mut h = sample_initial(&model.initial, rng);
    for t in 0..length {
        out.push(sample_column(&model.observation, h, rng));
        if t + 1 < length {
            h = sample_column(&model.transition, h, rng);
        }
    }
    out
}

pub fn sample_sequence(model: &HmmModel, length: usize, seed: u64) -> Result<SymbolSequence> {
    if length == 0 {
        return Err(Error::InvalidArgument("sequence length must be at least 1".into()));
    }
    let mut rng = seeded_rng(seed);
    Ok(SymbolSequence(rollout(model, length, &mut rng)))
}

/// `count` independent sequences of `length` each, from one seeded stream.
pub fn sample_sequences(
    model: &HmmModel,
    count: usize,
    length: usize,
    seed: u64,
) -> Result<Vec<SymbolSequence>> {
    if length == 0 {
        return Err(Error::InvalidArgument("sequence length must be at least 1".into()));
    }
    let mut rng = seeded_rng(seed);
    Ok((0..count)
        .map(|_| SymbolSequence(rollout(model, length, &mut rng)))
        .collect())
}

pub fn sample_triplets(
    model: &HmmModel,
    n_samples: usize,
    mode: TripletMode,
    seed: u64,
) -> Result<TripletDataset> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    let mut rng = seeded_rng(seed);
    let triplets = match mode {
        TripletMode::Independent => (0..n_samples)
            .map(|_| {
                let s = rollout(model, 3, &mut rng);
                (s[0], s[1], s[2])
            })
            .collect(),
        TripletMode::Sliding => rollout(model, n_samples + 2, &mut rng)
            .windows(3)
            .map(|w| (w[0], w[1], w[2]))
            .collect(),
    };
    TripletDataset::new(triplets, model.n_obs)
}

/// Natural log of `Pr(x_{1:t})` by the scaled forward recursion;
/// `-inf` for impossible sequences.
pub fn true_log_joint_prob(model: &HmmModel, seq: &SymbolSequence) -> Result<f64> {
    if seq.is_empty() {
        return Err(Error::InvalidArgument("sequence must be non-empty".into()));
    }
    seq.check_alphabet(model.n_obs)?;
    let m = model.n_hidden;
    let mut alpha = model.initial.clone();
    let mut log_scale = 0.0;
    for (t, &x) in seq.0.iter().enumerate() {
        if t > 0 {
            alpha = &model.transition * &alpha;
        }
        for h in 0..m {
            alpha[h] *= model.observation[(x, h)];
        }
        let z: f64 = alpha.sum();
        if z <= 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        alpha /= z;
        log_scale += z.ln();
    }
    Ok(log_scale)
}

pub fn true_joint_prob(model: &HmmModel, seq: &SymbolSequence) -> Result<f64> {
    Ok(true_log_joint_prob(model, seq)?.exp())
}

/// Population P-statistics with the model's initial law as the time-1 state law.
pub fn exact_stats(model: &HmmModel) -> ObservableStats {
    let o = &model.observation;
    let t = &model.transition;
    let pi = DMatrix::from_diagonal(&model.initial);
    let p1 = o * &model.initial;
    // Pr(h2, h1) columns weighted by the initial law
    let t_pi = t * &pi;
    let p21 = o * &t_pi * o.transpose();
    let p3 = (0..model.n_obs)
        .map(|x| {
            let ox = DMatrix::from_diagonal(&o.row(x).transpose());
            o * t * ox * &t_pi * o.transpose()
        })
        .collect();
    ObservableStats::from_parts(p1, p21, p3, 0).expect("population stats are consistent")
}
