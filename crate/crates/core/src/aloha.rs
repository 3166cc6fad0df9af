//! Random-access protocol layer: the grant-based baseline, peeling over a
//! sparse sensing graph, coded slotted ALOHA with successive interference
//! cancellation, and its density evolution.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pilots::SparseGraphSpec;
use crate::rng::RandomStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptureMode {
    /// Colliding requests are all lost.
    None,
    /// One claimant of every occupied preamble is granted.
    CaptureOne,
}

impl CaptureMode {
    pub fn name(self) -> &'static str {
        match self {
            CaptureMode::None => "none",
            CaptureMode::CaptureOne => "capture_one",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrantBasedOutcome {
    pub granted: usize,
    /// Preambles picked by two or more devices.
    pub collided: usize,
    pub capture_mode: CaptureMode,
}

/// `K` devices each pick one of `L` orthogonal preambles uniformly at random.
pub fn simulate_grant_based(k: usize, l: usize, mode: CaptureMode, stream: &mut RandomStream) -> GrantBasedOutcome {
    assert!(l >= 1, "at least one preamble is required");
    let mut picks: Vec<usize> = (0..k).map(|_| stream.index(l)).collect();
    picks.sort_unstable();
    let (mut singles, mut collided) = (0, 0);
    let mut i = 0;
    while i < picks.len() {
        let mut j = i + 1;
        while j < picks.len() && picks[j] == picks[i] {
            j += 1;
        }
        if j - i == 1 {
            singles += 1;
        } else {
            collided += 1;
        }
        i = j;
    }
    let granted = match mode {
        CaptureMode::None => singles,
        CaptureMode::CaptureOne => singles + collided,
    };
    GrantBasedOutcome {
        granted,
        collided,
        capture_mode: mode,
    }
}

/// `K (1 - 1/L)^(K-1)` without capture, `L (1 - (1 - 1/L)^K)` with capture.
pub fn expected_granted(k: usize, l: usize, mode: CaptureMode) -> f64 {
    let q = 1.0 - 1.0 / l as f64;
    match mode {
        CaptureMode::None if k == 0 => 0.0,
        CaptureMode::None => k as f64 * q.powi(k as i32 - 1),
        CaptureMode::CaptureOne => l as f64 * (1.0 - q.powi(k as i32)),
    }
}

/// Sparse linear measurements `y = A x` of a signal with known support.
#[derive(Debug, Clone, PartialEq)]
pub struct PeelingInstance {
    pub graph: SparseGraphSpec,
    pub y: Vec<Complex64>,
    pub truth: Vec<Complex64>,
}

impl PeelingInstance {
    pub fn noiseless(graph: SparseGraphSpec, truth: Vec<Complex64>) -> Result<Self> {
        graph.validate()?;
        if truth.len() != graph.cols {
            return Err(Error::Dimension {
                what: "signal length vs graph columns",
                expected: graph.cols.to_string(),
                got: truth.len().to_string(),
            });
        }
        let y = graph
            .row_patterns
            .iter()
            .map(|pat| pat.iter().map(|&c| truth[c]).sum())
            .collect();
        Ok(Self { graph, y, truth })
    }

    pub fn support(&self) -> Vec<usize> {
        (0..self.truth.len()).filter(|&n| self.truth[n] != Complex64::new(0.0, 0.0)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeelOutcome {
    /// Recovered value per column; `None` for columns outside the support
    /// and for support columns left unresolved.
    pub recovered: Vec<Option<Complex64>>,
    /// `(column, measurement)` in the order the columns were peeled.
    pub steps: Vec<(usize, usize)>,
    pub rounds: usize,
    /// Measurements after subtracting every recovered value.
    pub residual: Vec<Complex64>,
    /// Support columns still unresolved.
    pub unresolved: Vec<usize>,
}

impl PeelOutcome {
    pub fn peels(&self) -> usize {
        self.steps.len()
    }

    pub fn complete(&self) -> bool {
        self.unresolved.is_empty()
    }

    pub fn recovered_set(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.steps.iter().map(|&(c, _)| c).collect();
        s.sort_unstable();
        s
    }
}

/// Peeling decoder with a degree oracle: the decoder knows how many
/// unresolved support columns touch each measurement. Each round scans the
/// measurements (in a random order when `order` is given) and resolves
/// every singleton it meets.
pub fn peel(instance: &PeelingInstance, max_rounds: usize, mut order: Option<&mut RandomStream>) -> PeelOutcome {
    let g = &instance.graph;
    let support = instance.support();
    let mut in_support = vec![false; g.cols];
    for &n in &support {
        in_support[n] = true;
    }
    let cols = g.column_patterns();
    let mut degree: Vec<usize> = g
        .row_patterns
        .iter()
        .map(|pat| pat.iter().filter(|&&c| in_support[c]).count())
        .collect();
    let mut resolved = vec![false; g.cols];
    let mut recovered = vec![None; g.cols];
    let mut residual = instance.y.clone();
    let mut steps = Vec::new();
    let mut rounds = 0;
    let mut scan: Vec<usize> = (0..g.rows).collect();
    while rounds < max_rounds && steps.len() < support.len() {
        if let Some(s) = order.as_deref_mut() {
            s.shuffle(&mut scan);
        }
        let before = steps.len();
        for &r in &scan {
            if degree[r] != 1 {
                continue;
            }
            let c = g.row_patterns[r]
                .iter()
                .copied()
                .find(|&c| in_support[c] && !resolved[c])
                .expect("degree count tracks unresolved support");
            let value = residual[r];
            resolved[c] = true;
            recovered[c] = Some(value);
            steps.push((c, r));
            for &row in &cols[c] {
                residual[row] -= value;
                degree[row] -= 1;
            }
        }
        if steps.len() == before {
            break;
        }
        rounds += 1;
    }
    let unresolved = support.into_iter().filter(|&n| !resolved[n]).collect();
    PeelOutcome {
        recovered,
        steps,
        rounds,
        residual,
        unresolved,
    }
}

/// Distribution of the number of replicas a user transmits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegreeDistribution {
    /// `probs[d - 1]` is the probability of degree `d`.
    probs: Vec<f64>,
}

impl DegreeDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::config("degree distribution entries must be non-negative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("degree distribution sums to {total}, not 1")));
        }
        Ok(Self { probs })
    }

    pub fn regular(d: usize) -> Self {
        assert!(d >= 1, "degree must be at least 1");
        let mut probs = vec![0.0; d];
        probs[d - 1] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn max_degree(&self) -> usize {
        self.probs.len()
    }

    /// `Lambda'(1)`, the mean number of replicas per user.
    pub fn mean_degree(&self) -> f64 {
        self.probs.iter().enumerate().map(|(i, p)| (i + 1) as f64 * p).sum()
    }

    /// Edge-perspective polynomial `lambda(x) = Lambda'(x) / Lambda'(1)`.
    pub fn edge_poly(&self, x: f64) -> f64 {
        let num: f64 = self
            .probs
            .iter()
            .enumerate()
            .map(|(i, p)| (i + 1) as f64 * p * x.powi(i as i32))
            .sum();
        num / self.mean_degree()
    }

    pub fn sample(&self, stream: &mut RandomStream) -> usize {
        let u = stream.uniform();
        let mut acc = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i + 1;
            }
        }
        self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0) + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsaOutcome {
    pub active: usize,
    pub resolved: usize,
    pub rounds: usize,
}

impl CsaOutcome {
    pub fn resolved_fraction(&self) -> f64 {
        if self.active == 0 {
            1.0
        } else {
            self.resolved as f64 / self.active as f64
        }
    }
}

/// One frame of coded slotted ALOHA on the collision channel: a slot with
/// exactly one unresolved replica reveals its user, whose other replicas
/// are then cancelled.
pub fn simulate_csa(
    frame_slots: usize,
    num_active: usize,
    dist: &DegreeDistribution,
    max_sic_rounds: usize,
    stream: &mut RandomStream,
) -> Result<CsaOutcome> {
    if frame_slots == 0 {
        return Err(Error::config("frame needs at least one slot"));
    }
    if dist.max_degree() > frame_slots {
        return Err(Error::config(format!(
            "degree {} exceeds the {frame_slots} slots of the frame",
            dist.max_degree()
        )));
    }
    let mut slots: Vec<Vec<usize>> = vec![Vec::new(); frame_slots];
    let mut placement: Vec<Vec<usize>> = Vec::with_capacity(num_active);
    for user in 0..num_active {
        let d = dist.sample(stream);
        let chosen = stream.distinct_indices(frame_slots, d);
        for &s in &chosen {
            slots[s].push(user);
        }
        placement.push(chosen);
    }
    let mut load: Vec<usize> = slots.iter().map(Vec::len).collect();
    let mut resolved = vec![false; num_active];
    let mut count = 0;
    let mut rounds = 0;
    while rounds < max_sic_rounds && count < num_active {
        let singles: Vec<usize> = (0..frame_slots).filter(|&s| load[s] == 1).collect();
        if singles.is_empty() {
            break;
        }
        rounds += 1;
        for s in singles {
            if load[s] != 1 {
                continue;
            }
            let user = *slots[s].iter().find(|&&u| !resolved[u]).expect("slot load tracks unresolved users");
            resolved[user] = true;
            count += 1;
            for &t in &placement[user] {
                load[t] = load[t].checked_sub(1).expect("slot load went negative");
            }
        }
    }
    Ok(CsaOutcome {
        active: num_active,
        resolved: count,
        rounds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityEvolution {
    /// Probability `x_t` that an edge from a user is still unresolved, from `x_0 = 1`.
    pub trace: Vec<f64>,
    pub converged: bool,
    pub limit: f64,
}

/// Iterates `x_{t+1} = lambda(1 - exp(-G Lambda'(1) x_t))` for Poisson slot
/// degrees until successive values differ by less than `1e-14` or `iters`
/// steps have been taken.
pub fn density_evolution(dist: &DegreeDistribution, load: f64, iters: usize) -> DensityEvolution {
    let rate = load * dist.mean_degree();
    let mut x = 1.0;
    let mut trace = vec![x];
    let mut converged = false;
    for _ in 0..iters {
        let next = dist.edge_poly(-(-rate * x).exp_m1());
        trace.push(next);
        let done = (next - x).abs() < 1e-14;
        x = next;
        if done {
            converged = true;
            break;
        }
    }
    DensityEvolution {
        trace,
        converged,
        limit: x,
    }
}

/// Largest load in `[0, g_max]` whose density-evolution limit is below
/// `tol`, located by bisection to `1e-6`.
pub fn density_evolution_threshold(dist: &DegreeDistribution, iters: usize, tol: f64, g_max: f64) -> f64 {
    let decodes = |g: f64| density_evolution(dist, g, iters).limit < tol;
    if decodes(g_max) {
        return g_max;
    }
    let (mut lo, mut hi) = (0.0, g_max);
    while hi - lo > 1e-6 {
        let mid = 0.5 * (lo + hi);
        if decodes(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Load at which a resolved-fraction curve, sampled at increasing loads,
/// first falls below `level`, linearly interpolated between grid points.
pub fn waterfall_load(curve: &[(f64, f64)], level: f64) -> Option<f64> {
    curve.windows(2).find_map(|w| {
        let ((g0, f0), (g1, f1)) = (w[0], w[1]);
        (f0 >= level && f1 < level).then(|| g0 + (g1 - g0) * (f0 - level) / (f0 - f1))
    })
}
