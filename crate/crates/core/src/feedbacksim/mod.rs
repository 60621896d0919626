//! Synthetic feedback-loop data.
//!
//! Ground truth: clicks are Bernoulli(`p_click`); each feature is drawn from
//! `N(0, σ)` for non-clicks and `N(1, σ)` for clicks. A fixed reservoir is
//! sampled from this distribution. Each simulated day a logistic ranker,
//! trained on the previous two days of shown items, picks the top two of many
//! random candidate sets; those become the next day's training rows at
//! positions 1 and 2. Optionally a position-2 click is hidden with
//! probability `r`, modelling users who ignore the second slot.
//!
//! The per-(day, position) click rates of the last two days become the bias
//! feature `b` of the feedback-loop (FL) training set. A held-out sample
//! drawn separately from the same distribution is the unbiased (RUS) test set.

mod dataset;
mod ranker;

pub use dataset::{format_f64, Dataset};
pub use ranker::{train_ranker, LogisticRanker, RankerConfig};

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::Matrix;
use crate::seed;

const TAG_RESERVOIR: u64 = 11;
const TAG_HELDOUT: u64 = 12;
const TAG_INITIAL: u64 = 13;
const TAG_CANDIDATES: u64 = 14;
const TAG_CORRUPTION: u64 = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeedbackSimConfig {
    /// Rows recorded per day (`K`); `K/2` candidate sets each contribute two.
    pub k: usize,
    /// Number of simulated days (`T`).
    pub days: usize,
    /// Probability that a position-2 click is observed as a non-click (`r`).
    pub corruption: f64,
    /// Per-feature standard deviation.
    pub sigma: f64,
    pub p_click: f64,
    pub reservoir_size: usize,
    pub heldout_size: usize,
    pub candidate_set_size: usize,
    pub top_per_set: usize,
    pub n_features: usize,
    pub ranker: RankerConfig,
    pub rng_seed: u64,
}

impl Default for FeedbackSimConfig {
    fn default() -> Self {
        FeedbackSimConfig {
            k: 500,
            days: 100,
            corruption: 0.0,
            sigma: 3.0,
            p_click: 0.1,
            reservoir_size: 100_000,
            heldout_size: 100_000,
            candidate_set_size: 10_000,
            top_per_set: 2,
            n_features: 10,
            ranker: RankerConfig::default(),
            rng_seed: 0,
        }
    }
}

impl FeedbackSimConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::config(m.to_string()));
        if self.k < 2 || self.k % 2 != 0 {
            return fail("k must be a positive even number");
        }
        if self.days < 3 {
            return fail("days must be at least 3 so the last two retained days are ranked days");
        }
        if !(0.0..=1.0).contains(&self.corruption) {
            return fail("corruption must lie in [0, 1]");
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return fail("sigma must be finite and non-negative");
        }
        if !(self.p_click > 0.0 && self.p_click < 1.0) {
            return fail("p_click must lie strictly between 0 and 1");
        }
        if self.top_per_set != 2 {
            return fail("top_per_set must be 2 (positions 1 and 2)");
        }
        if self.candidate_set_size < self.top_per_set {
            return fail("candidate_set_size must be at least top_per_set");
        }
        if self.candidate_set_size > self.reservoir_size {
            return fail("candidate_set_size cannot exceed reservoir_size");
        }
        if self.k > self.reservoir_size {
            return fail("k cannot exceed reservoir_size");
        }
        if self.n_features == 0 {
            return fail("n_features must be positive");
        }
        if self.heldout_size == 0 {
            return fail("heldout_size must be positive");
        }
        Ok(())
    }
}

/// Click rates at positions 1 and 2 on the last two simulated days.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CtrTable {
    /// Day T−1: [position 1, position 2].
    pub last: [f64; 2],
    /// Day T−2: [position 1, position 2].
    pub prev: [f64; 2],
}

impl CtrTable {
    pub fn cells(&self) -> [f64; 4] {
        [self.last[0], self.last[1], self.prev[0], self.prev[1]]
    }

    pub fn position1_ctr(&self) -> f64 {
        self.last[0]
    }

    pub fn position2_ctr(&self) -> f64 {
        self.last[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DayCtr {
    pub day: usize,
    pub position1: f64,
    pub position2: f64,
    /// Distinct reservoir rows shown that day.
    pub distinct_rows: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NaiveBaseline {
    pub avg_ctr: f64,
    pub mse: f64,
}

#[derive(Debug, Clone)]
pub struct FeedbackLoopOutput {
    pub topk_last: Dataset,
    pub topk_prev: Dataset,
    pub b_table: CtrTable,
    pub heldout: Dataset,
    pub reservoir: Dataset,
    /// One entry per ranked day, 1..=T.
    pub history: Vec<DayCtr>,
    pub config: FeedbackSimConfig,
}

/// Serializable digest of a simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub config: FeedbackSimConfig,
    pub b_table: CtrTable,
    pub position1_all_days: f64,
    pub position2_all_days: f64,
    pub naive_baseline: NaiveBaseline,
    pub history: Vec<DayCtr>,
}

impl FeedbackLoopOutput {
    /// The FL training set: day T−1 rows followed by day T−2 rows.
    pub fn fl_dataset(&self) -> Dataset {
        self.topk_last
            .concat(&self.topk_prev)
            .expect("both retained days share the reservoir's feature width")
    }

    /// Mean position CTRs over every ranked day, days weighted equally.
    pub fn all_days_ctr(&self) -> [f64; 2] {
        let n = self.history.len() as f64;
        [
            self.history.iter().map(|d| d.position1).sum::<f64>() / n,
            self.history.iter().map(|d| d.position2).sum::<f64>() / n,
        ]
    }

    pub fn summary(&self) -> SimulationSummary {
        let [p1, p2] = self.all_days_ctr();
        SimulationSummary {
            config: self.config.clone(),
            b_table: self.b_table,
            position1_all_days: p1,
            position2_all_days: p2,
            naive_baseline: naive_ctr_baseline(self),
            history: self.history.clone(),
        }
    }
}

/// `n` draws from the ground-truth distribution.
pub fn sample_distribution<R: Rng + ?Sized>(
    cfg: &FeedbackSimConfig,
    n: usize,
    rng: &mut R,
) -> Result<Dataset> {
    let d = cfg.n_features;
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let click = rng.gen_bool(cfg.p_click);
        let mean = if click { 1.0 } else { 0.0 };
        for _ in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            x.push(mean + cfg.sigma * z);
        }
        y.push(mean);
    }
    Dataset::new(Matrix::from_vec(n, d, x)?, y, None, None)
}

pub fn sample_reservoir<R: Rng + ?Sized>(cfg: &FeedbackSimConfig, rng: &mut R) -> Result<Dataset> {
    cfg.validate()?;
    sample_distribution(cfg, cfg.reservoir_size, rng)
}

/// Rows shown on one day, as reservoir indices with observed labels.
struct Day {
    rows: Vec<usize>,
    labels: Vec<f64>,
    positions: Option<Vec<u8>>,
}

impl Day {
    fn dataset(&self, reservoir: &Dataset) -> Dataset {
        let x = reservoir.x().select_rows(&self.rows);
        Dataset::new(x, self.labels.clone(), None, self.positions.clone())
            .expect("day rows are drawn from a valid reservoir")
    }

    fn ctr(&self, position: u8) -> f64 {
        let pos = self.positions.as_ref().expect("ranked day");
        let (sum, count) = self
            .labels
            .iter()
            .zip(pos)
            .filter(|(_, &p)| p == position)
            .fold((0.0, 0usize), |(s, c), (l, _)| (s + l, c + 1));
        sum / count as f64
    }
}

/// Index of the best and second-best candidate; higher score wins, ties go
/// to the lower reservoir row.
fn top_two(candidates: &[usize], scores: &[f64]) -> (usize, usize) {
    let better = |a: usize, b: usize| scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
    let (mut first, mut second) = (candidates[0], candidates[1]);
    if better(second, first) {
        std::mem::swap(&mut first, &mut second);
    }
    for &c in &candidates[2..] {
        if better(c, first) {
            second = first;
            first = c;
        } else if better(c, second) {
            second = c;
        }
    }
    (first, second)
}

pub fn run_feedback_loop(cfg: &FeedbackSimConfig) -> Result<FeedbackLoopOutput> {
    cfg.validate()?;
    let reservoir = sample_distribution(cfg, cfg.reservoir_size, &mut seed::rng_for(cfg.rng_seed, TAG_RESERVOIR))?;
    let heldout = sample_distribution(cfg, cfg.heldout_size, &mut seed::rng_for(cfg.rng_seed, TAG_HELDOUT))?;
    let mut cand_rng = seed::rng_for(cfg.rng_seed, TAG_CANDIDATES);
    let mut corrupt_rng = seed::rng_for(cfg.rng_seed, TAG_CORRUPTION);

    let initial = index::sample(
        &mut seed::rng_for(cfg.rng_seed, TAG_INITIAL),
        cfg.reservoir_size,
        cfg.k,
    )
    .into_vec();
    let mut days = vec![Day {
        labels: initial.iter().map(|&i| reservoir.y()[i]).collect(),
        rows: initial,
        positions: None,
    }];

    let mut perm: Vec<usize> = (0..cfg.reservoir_size).collect();
    let mut history = Vec::with_capacity(cfg.days);
    for day in 0..cfg.days {
        let current = days[day].dataset(&reservoir);
        let train_set = match day.checked_sub(1) {
            Some(p) => current.concat(&days[p].dataset(&reservoir))?,
            None => current,
        };
        let ranker = train_ranker(&train_set, &cfg.ranker).map_err(|e| Error::Simulation {
            day,
            source: Box::new(e),
        })?;
        let scores: Vec<f64> = (0..reservoir.len())
            .map(|i| ranker.score(reservoir.x().row(i)))
            .collect();
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Simulation {
                day,
                source: Box::new(Error::training("non-finite ranker score")),
            });
        }

        let mut next = Day {
            rows: Vec::with_capacity(cfg.k),
            labels: Vec::with_capacity(cfg.k),
            positions: Some(Vec::with_capacity(cfg.k)),
        };
        for _ in 0..cfg.k / 2 {
            // Partial Fisher-Yates: the first `candidate_set_size` slots
            // become a uniform sample without replacement.
            for j in 0..cfg.candidate_set_size {
                let k = cand_rng.gen_range(j..cfg.reservoir_size);
                perm.swap(j, k);
            }
            let (first, second) = top_two(&perm[..cfg.candidate_set_size], &scores);
            let mut second_label = reservoir.y()[second];
            if second_label == 1.0 && corrupt_rng.gen::<f64>() < cfg.corruption {
                second_label = 0.0;
            }
            next.rows.extend([first, second]);
            next.labels.extend([reservoir.y()[first], second_label]);
            next.positions.as_mut().unwrap().extend([1, 2]);
        }
        let mut distinct = next.rows.clone();
        distinct.sort_unstable();
        distinct.dedup();
        history.push(DayCtr {
            day: day + 1,
            position1: next.ctr(1),
            position2: next.ctr(2),
            distinct_rows: distinct.len(),
        });
        days.push(next);
    }

    let t = cfg.days;
    let with_ctr = |day: &Day| -> Result<(Dataset, [f64; 2])> {
        let ctr = [day.ctr(1), day.ctr(2)];
        let b = day
            .positions
            .as_ref()
            .unwrap()
            .iter()
            .map(|&p| ctr[p as usize - 1])
            .collect();
        Ok((day.dataset(&reservoir).with_b(b)?, ctr))
    };
    let (topk_last, last) = with_ctr(&days[t - 1])?;
    let (topk_prev, prev) = with_ctr(&days[t - 2])?;

    Ok(FeedbackLoopOutput {
        topk_last,
        topk_prev,
        b_table: CtrTable { last, prev },
        heldout,
        reservoir,
        history,
        config: cfg.clone(),
    })
}

/// Best constant predictor of `b` when the four CTR cells are equally likely:
/// their plain average, scored by MSE over the given per-row `b` values.
pub fn naive_baseline(cells: &[f64; 4], b: &[f64]) -> NaiveBaseline {
    let avg_ctr = cells.iter().sum::<f64>() / 4.0;
    let mse = if b.is_empty() {
        0.0
    } else {
        b.iter().map(|v| (v - avg_ctr).powi(2)).sum::<f64>() / b.len() as f64
    };
    NaiveBaseline { avg_ctr, mse }
}

pub fn naive_ctr_baseline(output: &FeedbackLoopOutput) -> NaiveBaseline {
    let fl = output.fl_dataset();
    naive_baseline(&output.b_table.cells(), fl.b().unwrap_or(&[]))
}
