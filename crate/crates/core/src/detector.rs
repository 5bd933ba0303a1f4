//! Runtime detection: a sequential probability ratio test on the label
//! change rate of an input, fed one mutant at a time.
//!
//! Hypotheses are `H0: lcr(x) > threshold` (adversarial) against
//! `H1: lcr(x) <= threshold` (normal), relaxed by an indifference region of
//! half-width `indifference`. With `p1 = threshold − indifference` and
//! `p0 = threshold + indifference`, after `n` mutants with `z` label changes
//!
//! ```text
//! pr = p1^z (1 − p1)^(n−z) / (p0^z (1 − p0)^(n−z))
//! ```
//!
//! and the test accepts *adversarial* once `pr <= β/(1 − α)` and *normal*
//! once `pr >= (1 − β)/α`. The ratio is evaluated in log space after every
//! mutant.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{detection_accuracy, lcr_population, DetectionAccuracy, LcrEstimate, SampleKind};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mutation::{MutantPool, MutationConfig};
use crate::nn::{accuracy, Network};

pub const DEFAULT_MAX_MUTANTS: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Adversarial,
    Normal,
    Undecided,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SprtConfig {
    /// LCR threshold separating normal from adversarial inputs.
    pub threshold: f64,
    /// Error bound of a normal verdict.
    pub alpha: f64,
    /// Error bound of an adversarial verdict.
    pub beta: f64,
    /// Half-width of the indifference region around `threshold`.
    pub indifference: f64,
    pub max_mutants: usize,
    /// Multiplier applied to the calibrated normal LCR bound.
    pub rho: f64,
}

impl SprtConfig {
    pub fn new(threshold: f64, indifference: f64) -> Self {
        Self {
            threshold,
            alpha: 0.05,
            beta: 0.05,
            indifference,
            max_mutants: DEFAULT_MAX_MUTANTS,
            rho: 1.0,
        }
    }

    /// Lower boundary of the indifference region.
    pub fn p1(&self) -> f64 {
        self.threshold - self.indifference
    }

    /// Upper boundary of the indifference region.
    pub fn p0(&self) -> f64 {
        self.threshold + self.indifference
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Argument(msg));
        if !(self.alpha > 0.0 && self.alpha < 0.5) || !(self.beta > 0.0 && self.beta < 0.5) {
            return bad(format!(
                "alpha and beta must lie in (0,0.5), got {} and {}",
                self.alpha, self.beta
            ));
        }
        if !(self.indifference > 0.0) {
            return bad(format!("indifference must be positive, got {}", self.indifference));
        }
        if !(self.p1() > 0.0 && self.p0() < 1.0) {
            return bad(format!(
                "indifference region ({}, {}) must lie inside (0,1)",
                self.p1(),
                self.p0()
            ));
        }
        if self.max_mutants == 0 {
            return bad("max_mutants must be positive".into());
        }
        if !(self.rho >= 1.0) {
            return bad(format!("rho must be at least 1, got {}", self.rho));
        }
        Ok(())
    }

    /// `ln(β/(1 − α))`: at or below it the input is reported adversarial.
    pub fn log_accept_adversarial(&self) -> f64 {
        (self.beta / (1.0 - self.alpha)).ln()
    }

    /// `ln((1 − β)/α)`: at or above it the input is reported normal.
    pub fn log_accept_normal(&self) -> f64 {
        ((1.0 - self.beta) / self.alpha).ln()
    }
}

/// Running counters of a sequential test.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SprtState {
    /// Mutants evaluated.
    pub n: usize,
    /// Label changes observed.
    pub z: usize,
}

impl SprtState {
    pub fn observe(&mut self, changed: bool) {
        self.n += 1;
        self.z += usize::from(changed);
    }

    /// `ln pr`, computed from the counts so it never accumulates rounding.
    pub fn log_ratio(&self, cfg: &SprtConfig) -> f64 {
        let (p1, p0) = (cfg.p1(), cfg.p0());
        let changes = self.z as f64;
        let stays = (self.n - self.z) as f64;
        changes * (p1 / p0).ln() + stays * ((1.0 - p1) / (1.0 - p0)).ln()
    }

    /// Decision reached by the current counts, if any.
    pub fn decision(&self, cfg: &SprtConfig) -> Option<Verdict> {
        let log_pr = self.log_ratio(cfg);
        if log_pr <= cfg.log_accept_adversarial() {
            Some(Verdict::Adversarial)
        } else if log_pr >= cfg.log_accept_normal() {
            Some(Verdict::Normal)
        } else {
            None
        }
    }
}

/// Timing of a detection run, totals over the mutants consumed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Cost {
    /// Forward propagation through the mutants.
    pub c_f_ms: f64,
    /// Mutant generation (zero when reading a cached pool).
    pub c_g_ms: f64,
    pub total_ms: f64,
}

impl Cost {
    fn new(forward: Duration, generation: Duration) -> Self {
        let c_f_ms = forward.as_secs_f64() * 1e3;
        let c_g_ms = generation.as_secs_f64() * 1e3;
        Self {
            c_f_ms,
            c_g_ms,
            total_ms: c_f_ms + c_g_ms,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub verdict: Verdict,
    /// α for a normal verdict, β for an adversarial one, `None` when the
    /// test ran out of budget.
    pub error_bound: Option<f64>,
    pub mutants_used: usize,
    pub label_changes: usize,
    /// Set when `max_mutants` ran out; `fallback_verdict` then holds the
    /// plain `z/n > threshold` call, which carries no error bound.
    pub fallback: bool,
    pub fallback_verdict: Option<Verdict>,
    pub cost: Cost,
}

impl DetectionReport {
    /// The verdict, with undecided runs resolved by their tie-break.
    pub fn resolved_verdict(&self) -> Verdict {
        match (self.verdict, self.fallback_verdict) {
            (Verdict::Undecided, Some(v)) => v,
            (v, _) => v,
        }
    }

    /// Copy with the wall-clock fields zeroed, for byte-level comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            cost: Cost::default(),
            ..self.clone()
        }
    }
}

/// Supplies accurate mutants one at a time, in a fixed order.
pub trait MutantSource {
    fn next_mutant(&mut self) -> Result<Option<&Network>>;

    /// Generation time spent so far.
    fn generation_time(&self) -> Duration {
        Duration::ZERO
    }
}

/// Walks a cached pool in admission order.
pub struct PoolSource<'a> {
    mutants: &'a [Network],
    next: usize,
}

impl<'a> PoolSource<'a> {
    pub fn new(mutants: &'a [Network]) -> Self {
        Self { mutants, next: 0 }
    }
}

impl MutantSource for PoolSource<'_> {
    fn next_mutant(&mut self) -> Result<Option<&Network>> {
        let m = self.mutants.get(self.next);
        self.next += usize::from(m.is_some());
        Ok(m)
    }
}

/// Generates and filters mutants on demand. Attempt `k` uses the same
/// sub-seed as attempt `k` of [`crate::mutation::generate_pool`], so the
/// stream equals the pool that generation would have produced.
pub struct LazySource<'a> {
    net: &'a Network,
    filter_data: &'a Dataset,
    config: MutationConfig,
    threshold: f64,
    next_attempt: u64,
    max_attempts: u64,
    current: Option<Network>,
    generation: Duration,
}

impl<'a> LazySource<'a> {
    pub fn new(net: &'a Network, filter_data: &'a Dataset, config: MutationConfig) -> Result<Self> {
        config.validate()?;
        let origin = accuracy(net, filter_data)?;
        Ok(Self {
            net,
            filter_data,
            config,
            threshold: config.accuracy_floor_ratio * origin,
            next_attempt: 0,
            max_attempts: u64::MAX,
            current: None,
            generation: Duration::ZERO,
        })
    }

    /// Stop (report exhaustion) after this many attempts.
    pub fn with_attempt_cap(mut self, cap: u64) -> Self {
        self.max_attempts = cap;
        self
    }
}

impl MutantSource for LazySource<'_> {
    fn next_mutant(&mut self) -> Result<Option<&Network>> {
        let start = Instant::now();
        self.current = None;
        while self.next_attempt < self.max_attempts {
            let (_, mutant) = self.config.attempt(self.net, self.next_attempt)?;
            self.next_attempt += 1;
            if accuracy(&mutant, self.filter_data)? >= self.threshold {
                self.current = Some(mutant);
                break;
            }
        }
        self.generation += start.elapsed();
        Ok(self.current.as_ref())
    }

    fn generation_time(&self) -> Duration {
        self.generation
    }
}

/// Runs the sequential test on `x`.
pub fn sprt_detect(
    x: &[f64],
    net: &Network,
    source: &mut dyn MutantSource,
    cfg: &SprtConfig,
) -> Result<DetectionReport> {
    cfg.validate()?;
    let base = net.predict_label(x)?;
    let mut state = SprtState::default();
    let mut forward = Duration::ZERO;
    while state.n < cfg.max_mutants {
        let Some(mutant) = source.next_mutant()? else {
            return Err(Error::PoolTooSmall { state });
        };
        let start = Instant::now();
        let changed = mutant.predict_label(x)? != base;
        forward += start.elapsed();
        state.observe(changed);
        if let Some(verdict) = state.decision(cfg) {
            let error_bound = match verdict {
                Verdict::Adversarial => cfg.beta,
                _ => cfg.alpha,
            };
            return Ok(DetectionReport {
                verdict,
                error_bound: Some(error_bound),
                mutants_used: state.n,
                label_changes: state.z,
                fallback: false,
                fallback_verdict: None,
                cost: Cost::new(forward, source.generation_time()),
            });
        }
    }
    let rate = state.z as f64 / state.n as f64;
    Ok(DetectionReport {
        verdict: Verdict::Undecided,
        error_bound: None,
        mutants_used: state.n,
        label_changes: state.z,
        fallback: true,
        fallback_verdict: Some(if rate > cfg.threshold {
            Verdict::Adversarial
        } else {
            Verdict::Normal
        }),
        cost: Cost::new(forward, source.generation_time()),
    })
}

/// Calibration outcome: the detector configuration and the normal-sample
/// statistics it was derived from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub config: SprtConfig,
    /// Upper end of the 99% interval of the normal-sample LCR.
    pub normal_upper_bound: f64,
    pub normal_lcr: LcrEstimate,
}

/// Smallest gap kept between the indifference region and 0 or 1.
const REGION_MARGIN: f64 = 1e-6;

/// Sets `threshold = ρ·ς_nr` and `indifference = 0.1·ς_nr`, where `ς_nr` is
/// the upper 99% bound of the normal-sample LCR, with α = β = 0.05. The
/// threshold is clamped so the indifference region stays inside (0,1).
pub fn calibrate_threshold(
    net: &Network,
    mutants: &[Network],
    normal_calibration: &[Vec<f64>],
    rho: f64,
) -> Result<Calibration> {
    if !(rho >= 1.0 && rho.is_finite()) {
        return Err(Error::Argument(format!("rho must be at least 1, got {rho}")));
    }
    if mutants.is_empty() {
        return Err(Error::Argument("calibration needs a non-empty pool".into()));
    }
    let normal_lcr = lcr_population(normal_calibration, net, mutants)?;
    let upper = normal_lcr.upper().min(1.0);
    if upper <= 0.0 {
        return Err(Error::DegenerateCalibration);
    }
    let indifference = 0.1 * upper;
    let threshold = (rho * upper).clamp(
        indifference + REGION_MARGIN,
        1.0 - indifference - REGION_MARGIN,
    );
    let config = SprtConfig {
        rho,
        ..SprtConfig::new(threshold, indifference)
    };
    config.validate()?;
    Ok(Calibration {
        config,
        normal_upper_bound: upper,
        normal_lcr,
    })
}

/// One input of a detection batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledInput {
    pub kind: SampleKind,
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub index: usize,
    pub kind: SampleKind,
    #[serde(flatten)]
    pub report: Option<DetectionReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub samples: usize,
    pub failed: usize,
    pub accuracy: DetectionAccuracy,
    /// Mean `mutants_used` over samples that produced a report.
    pub mean_mutants_used: f64,
    pub mean_mutants_adversarial: f64,
    pub mean_mutants_normal: f64,
    pub fallbacks: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub outcomes: Vec<SampleOutcome>,
    pub summary: BatchSummary,
}

/// Detects every input against the cached pool. Per-sample failures are
/// recorded in the outcome instead of aborting the batch.
pub fn batch_detect(
    samples: &[LabeledInput],
    net: &Network,
    pool: &MutantPool,
    cfg: &SprtConfig,
) -> Result<BatchReport> {
    cfg.validate()?;
    let outcomes: Vec<SampleOutcome> = samples
        .par_iter()
        .enumerate()
        .map(|(index, s)| {
            let mut source = PoolSource::new(pool.mutants());
            let (report, error) = match sprt_detect(&s.features, net, &mut source, cfg) {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            SampleOutcome {
                index,
                kind: s.kind,
                report,
                error,
            }
        })
        .collect();
    let summary = summarize(&outcomes);
    Ok(BatchReport { outcomes, summary })
}

pub fn summarize(outcomes: &[SampleOutcome]) -> BatchSummary {
    let decided: Vec<(SampleKind, &DetectionReport)> = outcomes
        .iter()
        .filter_map(|o| o.report.as_ref().map(|r| (o.kind, r)))
        .collect();
    let mean = |kind: Option<SampleKind>| {
        let used: Vec<usize> = decided
            .iter()
            .filter(|(k, _)| kind.map_or(true, |want| *k == want))
            .map(|(_, r)| r.mutants_used)
            .collect();
        if used.is_empty() {
            0.0
        } else {
            used.iter().sum::<usize>() as f64 / used.len() as f64
        }
    };
    // Failed samples have no verdict and count as undecided.
    let verdicts: Vec<(SampleKind, Verdict)> = outcomes
        .iter()
        .map(|o| (o.kind, o.report.as_ref().map_or(Verdict::Undecided, |r| r.verdict)))
        .collect();
    BatchSummary {
        samples: outcomes.len(),
        failed: outcomes.len() - decided.len(),
        accuracy: detection_accuracy(&verdicts),
        mean_mutants_used: mean(None),
        mean_mutants_adversarial: mean(Some(SampleKind::Adversarial)),
        mean_mutants_normal: mean(Some(SampleKind::Normal)),
        fallbacks: decided.iter().filter(|(_, r)| r.fallback).count(),
    }
}
