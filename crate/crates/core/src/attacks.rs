//! White-box adversarial sample generation (FGSM, JSMA) and harvesting of
//! samples the model already gets wrong.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::seed::ceil_fraction;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMethod {
    Fgsm,
    Jsma,
    /// Unmodified test samples that the model misclassifies.
    WronglyLabeled,
    /// Produced by some other tool and imported as-is.
    External,
}

impl std::fmt::Display for AttackMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            AttackMethod::Fgsm => "fgsm",
            AttackMethod::Jsma => "jsma",
            AttackMethod::WronglyLabeled => "wrongly-labeled",
            AttackMethod::External => "external",
        };
        f.write_str(name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetRule {
    /// `(original_label + 1) mod num_classes`
    NextClass,
    Fixed(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// FGSM step size.
    pub epsilon: f64,
    /// JSMA budget as a fraction of the input features.
    pub max_distortion: f64,
    pub target: TargetRule,
    /// JSMA per-step increment; 1.0 saturates a pixel in one step.
    pub theta: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.35,
            max_distortion: 0.12,
            target: TargetRule::NextClass,
            theta: 1.0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Argument(format!(
                "epsilon must be finite and non-negative, got {}",
                self.epsilon
            )));
        }
        if !(self.max_distortion > 0.0 && self.max_distortion <= 1.0) {
            return Err(Error::Argument(format!(
                "max distortion must lie in (0,1], got {}",
                self.max_distortion
            )));
        }
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(Error::Argument(format!(
                "theta must be positive, got {}",
                self.theta
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialSample {
    pub method: AttackMethod,
    /// Ground-truth label of the source sample, when known.
    pub true_label: Option<usize>,
    /// Label the attacked network gives the unmodified input.
    pub original_label: usize,
    /// Label the attacked network gives the perturbed input.
    pub adversarial_label: usize,
    pub success: bool,
    pub original: Vec<f64>,
    pub perturbed: Vec<f64>,
}

impl AdversarialSample {
    /// Number of features that differ between original and perturbed.
    pub fn modified_features(&self) -> usize {
        self.original
            .iter()
            .zip(&self.perturbed)
            .filter(|(a, b)| a != b)
            .count()
    }
}

fn check_domain(net: &Network, x: &[f64], label: usize) -> Result<()> {
    if x.len() != net.input_dim() {
        return Err(Error::InputShape {
            expected: net.input_dim(),
            found: x.len(),
        });
    }
    if let Some(v) = x.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Argument(format!("input feature {v} outside [0,1]")));
    }
    if label >= net.num_classes() {
        return Err(Error::Argument(format!(
            "label {label} out of range for {} classes",
            net.num_classes()
        )));
    }
    Ok(())
}

/// One signed-gradient step on the loss of `true_label`, clipped to `[0,1]`.
pub fn fgsm(net: &Network, x: &[f64], true_label: usize, cfg: &AttackConfig) -> Result<AdversarialSample> {
    cfg.validate()?;
    check_domain(net, x, true_label)?;
    let grad = net.loss_and_gradients(x, true_label)?.input;
    let perturbed: Vec<f64> = x
        .iter()
        .zip(&grad)
        .map(|(&v, &g)| {
            // sign(0) = 0 leaves flat coordinates untouched.
            let step = if g > 0.0 {
                cfg.epsilon
            } else if g < 0.0 {
                -cfg.epsilon
            } else {
                0.0
            };
            (v + step).clamp(0.0, 1.0)
        })
        .collect();
    let original_label = net.predict_label(x)?;
    let adversarial_label = net.predict_label(&perturbed)?;
    Ok(AdversarialSample {
        method: AttackMethod::Fgsm,
        true_label: Some(true_label),
        original_label,
        adversarial_label,
        success: adversarial_label != original_label,
        original: x.to_vec(),
        perturbed,
    })
}

/// Best admissible pair under the two-pixel saliency objective:
/// maximize `(a_p + a_q)·|b_p + b_q|` subject to `a_p + a_q > 0` and
/// `b_p + b_q < 0`, where `a` is the target-class gradient and `b` the summed
/// gradient of the other classes. Earlier pairs win ties.
pub fn best_saliency_pair(jacobian: &[Vec<f64>], target: usize, candidates: &[usize]) -> Option<(usize, usize)> {
    let a: Vec<f64> = candidates.iter().map(|&i| jacobian[target][i]).collect();
    let b: Vec<f64> = candidates
        .iter()
        .map(|&i| {
            jacobian
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != target)
                .map(|(_, row)| row[i])
                .sum()
        })
        .collect();
    let mut best: Option<(f64, usize, usize)> = None;
    for p in 0..candidates.len() {
        for q in p + 1..candidates.len() {
            let alpha = a[p] + a[q];
            let beta = b[p] + b[q];
            if alpha > 0.0 && beta < 0.0 {
                let score = alpha * -beta;
                if best.map_or(true, |(s, _, _)| score > s) {
                    best = Some((score, p, q));
                }
            }
        }
    }
    best.map(|(_, p, q)| (candidates[p], candidates[q]))
}

/// Targeted Jacobian saliency attack. Each iteration recomputes the
/// Jacobian, picks the best admissible pixel pair among unsaturated
/// features and raises both by `theta`. Stops on reaching the target label,
/// when no admissible pair exists, or when the next pair would push the
/// modified-feature count past `⌈max_distortion·d⌉`.
pub fn jsma(net: &Network, x: &[f64], true_label: usize, cfg: &AttackConfig) -> Result<AdversarialSample> {
    cfg.validate()?;
    check_domain(net, x, true_label)?;
    let original_label = net.predict_label(x)?;
    let target = match cfg.target {
        TargetRule::NextClass => (original_label + 1) % net.num_classes(),
        TargetRule::Fixed(t) if t < net.num_classes() => t,
        TargetRule::Fixed(t) => {
            return Err(Error::Argument(format!(
                "target class {t} out of range for {} classes",
                net.num_classes()
            )))
        }
    };
    let budget = ceil_fraction(x.len(), cfg.max_distortion);
    let mut perturbed = x.to_vec();
    let mut modified = vec![false; x.len()];
    let mut modified_count = 0;
    let mut label = original_label;

    while label != target {
        let candidates: Vec<usize> = (0..perturbed.len()).filter(|&i| perturbed[i] < 1.0).collect();
        let jacobian = net.class_jacobian(&perturbed)?;
        let Some((p, q)) = best_saliency_pair(&jacobian, target, &candidates) else {
            break;
        };
        let added = usize::from(!modified[p]) + usize::from(!modified[q]);
        if modified_count + added > budget {
            break;
        }
        for i in [p, q] {
            perturbed[i] = (perturbed[i] + cfg.theta).min(1.0);
            if !modified[i] {
                modified[i] = true;
                modified_count += 1;
            }
        }
        label = net.predict_label(&perturbed)?;
    }

    Ok(AdversarialSample {
        method: AttackMethod::Jsma,
        true_label: Some(true_label),
        original_label,
        adversarial_label: label,
        success: label != original_label,
        original: x.to_vec(),
        perturbed,
    })
}

/// Up to `limit` samples that `net` misclassifies, in dataset order.
pub fn harvest_wrongly_labeled(net: &Network, data: &Dataset, limit: usize) -> Result<Vec<AdversarialSample>> {
    if data.is_empty() {
        return Err(Error::Argument("cannot harvest from an empty dataset".into()));
    }
    let mut out = Vec::new();
    for s in data.samples() {
        if out.len() >= limit {
            break;
        }
        let predicted = net.predict_label(&s.features)?;
        if predicted != s.label {
            out.push(AdversarialSample {
                method: AttackMethod::WronglyLabeled,
                true_label: Some(s.label),
                original_label: s.label,
                adversarial_label: predicted,
                success: true,
                original: s.features.clone(),
                perturbed: s.features.clone(),
            });
        }
    }
    Ok(out)
}

/// Writes one JSON object per line.
pub fn write_jsonl(path: impl AsRef<Path>, samples: &[AdversarialSample]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for s in samples {
        let line = serde_json::to_string(s).map_err(|e| Error::json(path, e))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<AdversarialSample>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::json(path, e))?);
    }
    Ok(out)
}
