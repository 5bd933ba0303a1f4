//! Label change rate (LCR) measurement and the statistics used to judge
//! how well it separates adversarial from normal inputs.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::Verdict;
use crate::error::{Error, Result};
use crate::nn::Network;

/// Two-sided 99% normal quantile.
pub const Z_99: f64 = 2.576;

/// Number of mutants whose label for `x` differs from `base_label`.
pub fn label_changes(x: &[f64], base_label: usize, mutants: &[Network]) -> Result<usize> {
    mutants.iter().try_fold(0, |acc, m| {
        Ok(acc + usize::from(m.predict_label(x)? != base_label))
    })
}

/// Fraction of mutants whose prediction for `x` differs from the original
/// model's prediction (not from the ground truth).
pub fn lcr(x: &[f64], net: &Network, mutants: &[Network]) -> Result<f64> {
    if mutants.is_empty() {
        return Err(Error::Argument("LCR needs at least one mutant".into()));
    }
    let base = net.predict_label(x)?;
    Ok(label_changes(x, base, mutants)? as f64 / mutants.len() as f64)
}

/// Population LCR with a 99% normal-approximation confidence interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LcrEstimate {
    pub mean: f64,
    pub ci_half_width: f64,
    pub sample_count: usize,
    pub per_sample_lcr: Vec<f64>,
}

impl LcrEstimate {
    /// The half-width uses the sample standard deviation (n − 1); a single
    /// sample gets a zero-width interval.
    pub fn from_values(per_sample_lcr: Vec<f64>) -> Result<Self> {
        if per_sample_lcr.is_empty() {
            return Err(Error::Argument("LCR estimate needs at least one sample".into()));
        }
        let n = per_sample_lcr.len() as f64;
        let mean = per_sample_lcr.iter().sum::<f64>() / n;
        let std = if per_sample_lcr.len() > 1 {
            (per_sample_lcr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Ok(Self {
            mean,
            ci_half_width: Z_99 * std / n.sqrt(),
            sample_count: per_sample_lcr.len(),
            per_sample_lcr,
        })
    }

    pub fn lower(&self) -> f64 {
        self.mean - self.ci_half_width
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.ci_half_width
    }

    /// Whether the two confidence intervals are disjoint.
    pub fn separated_from(&self, other: &LcrEstimate) -> bool {
        self.lower() > other.upper() || other.lower() > self.upper()
    }
}

pub fn lcr_population(samples: &[Vec<f64>], net: &Network, mutants: &[Network]) -> Result<LcrEstimate> {
    if samples.is_empty() {
        return Err(Error::Argument("LCR population needs at least one sample".into()));
    }
    let values = samples
        .par_iter()
        .map(|x| lcr(x, net, mutants))
        .collect::<Result<Vec<_>>>()?;
    LcrEstimate::from_values(values)
}

/// Ratio of mean adversarial LCR to mean normal LCR.
pub fn lcr_distance(adv: &LcrEstimate, nor: &LcrEstimate) -> Result<f64> {
    if nor.mean == 0.0 {
        return Err(Error::UndefinedDistance);
    }
    Ok(adv.mean / nor.mean)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Scores `>= threshold` are flagged adversarial; `None` for the
    /// initial point where nothing is flagged.
    pub threshold: Option<f64>,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auroc: f64,
}

impl RocCurve {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "threshold,fpr,tpr")?;
        for p in &self.points {
            match p.threshold {
                Some(t) => writeln!(out, "{t},{},{}", p.fpr, p.tpr)?,
                None => writeln!(out, "inf,{},{}", p.fpr, p.tpr)?,
            }
        }
        Ok(())
    }
}

/// ROC curve over every distinct score (higher = more adversarial). The
/// area is the Mann-Whitney rank statistic with ties counted as ½.
pub fn roc(adv_scores: &[f64], nor_scores: &[f64]) -> Result<RocCurve> {
    if adv_scores.is_empty() || nor_scores.is_empty() {
        return Err(Error::Argument("ROC needs both adversarial and normal scores".into()));
    }
    if adv_scores.iter().chain(nor_scores).any(|s| s.is_nan()) {
        return Err(Error::Argument("ROC scores must not be NaN".into()));
    }
    let mut labeled: Vec<(f64, bool)> = adv_scores
        .iter()
        .map(|&s| (s, true))
        .chain(nor_scores.iter().map(|&s| (s, false)))
        .collect();
    labeled.sort_by(|a, b| b.0.total_cmp(&a.0));

    let (n_adv, n_nor) = (adv_scores.len() as f64, nor_scores.len() as f64);
    let mut points = vec![RocPoint {
        threshold: None,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < labeled.len() {
        let threshold = labeled[i].0;
        while i < labeled.len() && labeled[i].0 == threshold {
            if labeled[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: Some(threshold),
            fpr: fp as f64 / n_nor,
            tpr: tp as f64 / n_adv,
        });
    }

    Ok(RocCurve {
        points,
        auroc: rank_auroc(&labeled, n_adv, n_nor),
    })
}

/// `(R_adv − n_adv(n_adv+1)/2) / (n_adv·n_nor)` with mid-ranks for ties.
/// Expects `labeled` sorted by descending score.
fn rank_auroc(labeled: &[(f64, bool)], n_adv: f64, n_nor: f64) -> f64 {
    let n = labeled.len();
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && labeled[j].0 == labeled[i].0 {
            j += 1;
        }
        // Descending positions i..j map to ascending ranks n−j+1 ..= n−i.
        let mid_rank = ((n - j + 1) + (n - i)) as f64 / 2.0;
        rank_sum += mid_rank * labeled[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    (rank_sum - n_adv * (n_adv + 1.0) / 2.0) / (n_adv * n_nor)
}

/// Ground truth of an evaluated input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleKind {
    Normal,
    Adversarial,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassTally {
    pub total: usize,
    pub correct: usize,
    pub undecided: usize,
}

impl ClassTally {
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

/// Per-class detection accuracy; adversarial accuracy is the true positive
/// rate and normal accuracy is `1 − fpr`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionAccuracy {
    pub adversarial: ClassTally,
    pub normal: ClassTally,
}

impl DetectionAccuracy {
    pub fn adversarial_accuracy(&self) -> Option<f64> {
        self.adversarial.accuracy()
    }

    pub fn normal_accuracy(&self) -> Option<f64> {
        self.normal.accuracy()
    }
}

/// Undecided verdicts count as incorrect.
pub fn detection_accuracy(verdicts: &[(SampleKind, Verdict)]) -> DetectionAccuracy {
    let mut out = DetectionAccuracy::default();
    for &(truth, verdict) in verdicts {
        let tally = match truth {
            SampleKind::Adversarial => &mut out.adversarial,
            SampleKind::Normal => &mut out.normal,
        };
        tally.total += 1;
        match (truth, verdict) {
            (_, Verdict::Undecided) => tally.undecided += 1,
            (SampleKind::Adversarial, Verdict::Adversarial) | (SampleKind::Normal, Verdict::Normal) => {
                tally.correct += 1
            }
            _ => {}
        }
    }
    out
}
