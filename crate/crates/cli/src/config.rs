//! Run configuration: a TOML file, overridden field-by-field from the
//! command line.

use std::path::{Path, PathBuf};

use mutguard::attacks::AttackConfig;
use mutguard::data::BlobSpec;
use mutguard::mutation::{MutationConfig, Operator};
use mutguard::seed::stage_seed;
use serde::{Deserialize, Serialize};

use crate::Usage;

/// Default output root when neither `--out`, the config file, nor
/// `MUTGUARD_OUT` name one.
pub const DEFAULT_OUT: &str = "mutguard-out";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub attack: AttackSection,
    pub mutation: MutationSection,
    pub detector: DetectorSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    /// Synthetic Gaussian blobs, split into train and test.
    Blobs {
        num_classes: usize,
        per_class: usize,
        dim: usize,
        spread: f64,
        test_fraction: f64,
    },
    /// IDX image/label files. Each split can be limited to a seeded random
    /// subset.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        train_limit: Option<usize>,
        test_limit: Option<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub epsilon: f64,
    pub max_distortion: f64,
    /// Attempts per `attack` run.
    pub count: usize,
    /// Correctly classified test samples reserved for calibration.
    pub calibration_samples: usize,
    /// Correctly classified test samples used as the normal group in
    /// `detect` and `evaluate`.
    pub normal_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MutationSection {
    pub operator: Operator,
    pub rate: f64,
    pub pool_size: usize,
    pub accuracy_floor_ratio: f64,
    pub max_attempts_per_mutant: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    pub rho: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Replaces the calibrated indifference half-width when set.
    pub indifference: Option<f64>,
    /// Defaults to the pool size.
    pub max_mutants: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 2018,
            out: None,
            data: DataConfig::Blobs {
                num_classes: 3,
                per_class: 200,
                dim: 16,
                spread: 0.25,
                test_fraction: 0.3,
            },
            model: ModelConfig::default(),
            attack: AttackSection::default(),
            mutation: MutationSection::default(),
            detector: DetectorSection::default(),
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![16],
            epochs: 30,
            batch_size: 16,
            learning_rate: 0.1,
        }
    }
}

impl Default for AttackSection {
    fn default() -> Self {
        let a = AttackConfig::default();
        Self {
            epsilon: a.epsilon,
            max_distortion: a.max_distortion,
            count: 50,
            calibration_samples: 50,
            normal_samples: 50,
        }
    }
}

impl Default for MutationSection {
    fn default() -> Self {
        let m = MutationConfig::new(Operator::Nai, 0.05, 0);
        Self {
            operator: m.operator,
            rate: m.rate,
            pool_size: 200,
            accuracy_floor_ratio: m.accuracy_floor_ratio,
            max_attempts_per_mutant: m.max_attempts_per_mutant,
        }
    }
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self {
            rho: 1.0,
            alpha: 0.05,
            beta: 0.05,
            indifference: None,
            max_mutants: None,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub operator: Option<Operator>,
    pub rate: Option<f64>,
    pub pool_size: Option<usize>,
    pub rho: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Usage> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: &Overrides) {
        macro_rules! set {
            ($($src:ident => $dst:expr),*) => {$(
                if let Some(v) = o.$src.clone() {
                    $dst = v;
                }
            )*};
        }
        set!(
            operator => self.mutation.operator,
            rate => self.mutation.rate,
            pool_size => self.mutation.pool_size,
            rho => self.detector.rho,
            alpha => self.detector.alpha,
            beta => self.detector.beta,
            seed => self.seed
        );
        if o.out.is_some() {
            self.out = o.out.clone();
        }
    }

    /// Output root: explicit setting, else `MUTGUARD_OUT`, else
    /// [`DEFAULT_OUT`].
    pub fn out_dir(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os("MUTGUARD_OUT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            epsilon: self.attack.epsilon,
            max_distortion: self.attack.max_distortion,
            ..AttackConfig::default()
        }
    }

    pub fn mutation_config(&self, seed: u64) -> MutationConfig {
        MutationConfig {
            operator: self.mutation.operator,
            rate: self.mutation.rate,
            accuracy_floor_ratio: self.mutation.accuracy_floor_ratio,
            seed,
            max_attempts_per_mutant: self.mutation.max_attempts_per_mutant,
        }
    }

    pub fn blob_spec(&self) -> Option<(BlobSpec, f64)> {
        match self.data {
            DataConfig::Blobs {
                num_classes,
                per_class,
                dim,
                spread,
                test_fraction,
            } => Some((
                BlobSpec::new(num_classes, per_class, dim, spread, stage_seed(self.seed, "blobs")),
                test_fraction,
            )),
            DataConfig::Idx { .. } => None,
        }
    }

    /// Checks everything that can be checked without touching the data, so
    /// bad settings fail before any long-running stage starts.
    pub fn validate(&self) -> Result<(), Usage> {
        let bad = |msg: String| Err(Usage(msg));
        match &self.data {
            DataConfig::Blobs {
                num_classes,
                per_class,
                dim,
                spread,
                test_fraction,
            } => {
                if *num_classes < 2 || *per_class == 0 || *dim == 0 {
                    return bad("blobs need ≥2 classes, ≥1 sample per class and dim ≥1".into());
                }
                if !(*spread >= 0.0 && spread.is_finite()) {
                    return bad(format!("blob spread must be finite and non-negative, got {spread}"));
                }
                if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                    return bad(format!("test_fraction must lie in (0,1), got {test_fraction}"));
                }
            }
            DataConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => {
                for p in [train_images, train_labels, test_images, test_labels] {
                    require_file(p)?;
                }
            }
        }
        let m = &self.model;
        if m.epochs == 0 || m.batch_size == 0 || m.hidden.contains(&0) {
            return bad("epochs, batch_size and hidden layer widths must be positive".into());
        }
        if !(m.learning_rate > 0.0 && m.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", m.learning_rate));
        }
        self.attack_config().validate().map_err(|e| Usage(e.to_string()))?;
        self.mutation_config(0).validate().map_err(|e| Usage(e.to_string()))?;
        if self.mutation.pool_size == 0 {
            return bad("pool_size must be at least 1".into());
        }
        let d = &self.detector;
        if !(d.rho >= 1.0 && d.rho.is_finite()) {
            return bad(format!("rho must be at least 1, got {}", d.rho));
        }
        for (name, v) in [("alpha", d.alpha), ("beta", d.beta)] {
            if !(v > 0.0 && v < 0.5) {
                return bad(format!("{name} must lie in (0, 0.5), got {v}"));
            }
        }
        if let Some(delta) = d.indifference {
            if !(delta > 0.0 && delta < 0.5) {
                return bad(format!("indifference must lie in (0, 0.5), got {delta}"));
            }
        }
        if d.max_mutants == Some(0) {
            return bad("max_mutants must be at least 1".into());
        }
        Ok(())
    }
}

pub fn require_file(path: &Path) -> Result<(), Usage> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Usage(format!("file not found: {}", path.display())))
    }
}
