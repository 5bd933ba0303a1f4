//! Model-level mutation operators and accuracy-filtered mutant pools.
//!
//! | operator | selects                        | effect                                   |
//! |----------|--------------------------------|------------------------------------------|
//! | GF       | `⌈N·γ⌉` weights, N = all weights | redraw from `N(μ_layer, σ_layer²)`      |
//! | WS       | `⌈N·γ⌉` neurons across the net   | permute the neuron's incoming weights    |
//! | NS       | `⌈N_l·γ⌉` neurons in each layer  | permute (row, bias) among the selection  |
//! | NAI      | `⌈N·γ⌉` neurons across the net   | negate the neuron's incoming weights     |
//!
//! Biases are never touched except by NS, where they travel with their row.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{accuracy, Network};
use crate::seed::{self, ceil_fraction};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Operator {
    /// Gaussian fuzzing.
    Gf,
    /// Weight shuffling.
    Ws,
    /// Neuron switch.
    Ns,
    /// Neuron activation inverse.
    Nai,
}

impl std::fmt::Display for Operator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Operator::Gf => "gf",
            Operator::Ws => "ws",
            Operator::Ns => "ns",
            Operator::Nai => "nai",
        })
    }
}

impl std::str::FromStr for Operator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gf" => Ok(Operator::Gf),
            "ws" => Ok(Operator::Ws),
            "ns" => Ok(Operator::Ns),
            "nai" => Ok(Operator::Nai),
            other => Err(Error::Argument(format!("unknown mutation operator {other:?}"))),
        }
    }
}

/// A neuron address: layer index and output unit within that layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NeuronId {
    pub layer: usize,
    pub unit: usize,
}

/// Total number of neurons: the output units of every layer, output layer
/// included.
pub fn count_neurons(net: &Network) -> usize {
    net.layers().iter().map(|l| l.out_dim()).sum()
}

fn check_rate(rate: f64) -> Result<()> {
    if rate > 0.0 && rate < 1.0 {
        Ok(())
    } else {
        Err(Error::Argument(format!("mutation rate must lie in (0,1), got {rate}")))
    }
}

/// Uniformly selects `⌈N·γ⌉` distinct neurons across the whole network,
/// returned in (layer, unit) order.
pub fn select_neurons<R: Rng + ?Sized>(net: &Network, rate: f64, rng: &mut R) -> Result<Vec<NeuronId>> {
    check_rate(rate)?;
    let total = count_neurons(net);
    let k = ceil_fraction(total, rate).min(total);
    let mut flat = index::sample(rng, total, k).into_vec();
    flat.sort_unstable();
    Ok(flat.into_iter().map(|i| neuron_at(net, i)).collect())
}

fn neuron_at(net: &Network, mut flat: usize) -> NeuronId {
    for (layer, l) in net.layers().iter().enumerate() {
        if flat < l.out_dim() {
            return NeuronId { layer, unit: flat };
        }
        flat -= l.out_dim();
    }
    unreachable!("neuron index beyond network size")
}

/// Negates the incoming weight row of each selected neuron. Biases are left
/// alone; applying the same selection twice restores the network.
pub fn apply_nai(net: &Network, selection: &[NeuronId]) -> Network {
    let mut out = net.clone();
    for id in selection {
        for w in out.layers_mut()[id.layer].row_mut(id.unit) {
            *w = -*w;
        }
    }
    out
}

pub fn mutate_nai<R: Rng + ?Sized>(net: &Network, rate: f64, rng: &mut R) -> Result<Network> {
    let selection = select_neurons(net, rate, rng)?;
    Ok(apply_nai(net, &selection))
}

/// Redraws `⌈N·γ⌉` weight scalars (biases excluded) from a Gaussian with
/// the mean and population standard deviation of the original weights of
/// the layer each scalar belongs to.
pub fn mutate_gf<R: Rng + ?Sized>(net: &Network, rate: f64, rng: &mut R) -> Result<Network> {
    check_rate(rate)?;
    let total: usize = net.layers().iter().map(|l| l.weights().len()).sum();
    let k = ceil_fraction(total, rate).min(total);
    let mut picked = index::sample(rng, total, k).into_vec();
    picked.sort_unstable();

    let mut out = net.clone();
    let mut picked = picked.into_iter().peekable();
    let mut offset = 0;
    for layer in out.layers_mut() {
        let len = layer.weights().len();
        let (mu, sigma) = mean_and_std(layer.weights());
        let gaussian = Normal::new(mu, sigma).expect("population std is finite and non-negative");
        let weights = layer.weights_mut();
        while let Some(&i) = picked.peek() {
            if i >= offset + len {
                break;
            }
            weights[i - offset] = gaussian.sample(rng);
            picked.next();
        }
        offset += len;
    }
    Ok(out)
}

/// Shuffles the incoming weights of `⌈N·γ⌉` neurons selected across the
/// network.
pub fn mutate_ws<R: Rng + ?Sized>(net: &Network, rate: f64, rng: &mut R) -> Result<Network> {
    let selection = select_neurons(net, rate, rng)?;
    let mut out = net.clone();
    for id in &selection {
        out.layers_mut()[id.layer].row_mut(id.unit).shuffle(rng);
    }
    Ok(out)
}

/// In every layer, selects `⌈N_l·γ⌉` neurons and permutes their
/// (weight row, bias) pairs uniformly at random. Layers selecting fewer than
/// two neurons are left unchanged.
pub fn mutate_ns<R: Rng + ?Sized>(net: &Network, rate: f64, rng: &mut R) -> Result<Network> {
    check_rate(rate)?;
    let mut out = net.clone();
    for layer in out.layers_mut() {
        let n = layer.out_dim();
        let k = ceil_fraction(n, rate).min(n);
        if k < 2 {
            continue;
        }
        let mut selected = index::sample(rng, n, k).into_vec();
        selected.sort_unstable();
        let mut sources = selected.clone();
        sources.shuffle(rng);

        let rows: Vec<Vec<f64>> = sources.iter().map(|&s| layer.row(s).to_vec()).collect();
        let biases: Vec<f64> = sources.iter().map(|&s| layer.biases()[s]).collect();
        for ((&dst, row), bias) in selected.iter().zip(rows).zip(biases) {
            layer.row_mut(dst).copy_from_slice(&row);
            layer.biases_mut()[dst] = bias;
        }
    }
    Ok(out)
}

pub fn mutate<R: Rng + ?Sized>(op: Operator, net: &Network, rate: f64, rng: &mut R) -> Result<Network> {
    match op {
        Operator::Gf => mutate_gf(net, rate, rng),
        Operator::Ws => mutate_ws(net, rate, rng),
        Operator::Ns => mutate_ns(net, rate, rng),
        Operator::Nai => mutate_nai(net, rate, rng),
    }
}

fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MutationConfig {
    pub operator: Operator,
    pub rate: f64,
    /// A mutant is admitted when its accuracy is at least this fraction of
    /// the original model's.
    pub accuracy_floor_ratio: f64,
    pub seed: u64,
    /// Attempts allowed per requested mutant before giving up.
    pub max_attempts_per_mutant: u64,
}

impl MutationConfig {
    pub fn new(operator: Operator, rate: f64, seed: u64) -> Self {
        Self {
            operator,
            rate,
            accuracy_floor_ratio: 0.9,
            seed,
            max_attempts_per_mutant: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_rate(self.rate)?;
        // A zero floor disables the filter.
        if !(self.accuracy_floor_ratio >= 0.0 && self.accuracy_floor_ratio <= 1.0) {
            return Err(Error::Argument(format!(
                "accuracy floor ratio must lie in [0,1], got {}",
                self.accuracy_floor_ratio
            )));
        }
        if self.max_attempts_per_mutant == 0 {
            return Err(Error::Argument("attempt cap must be positive".into()));
        }
        Ok(())
    }

    /// Builds the mutant of attempt `attempt`; the sub-seed depends only on
    /// the master seed and the attempt index.
    pub fn attempt(&self, net: &Network, attempt: u64) -> Result<(u64, Network)> {
        let sub_seed = seed::derive_seed(self.seed, attempt);
        let mutant = mutate(self.operator, net, self.rate, &mut seed::rng(sub_seed))?;
        Ok((sub_seed, mutant))
    }
}

/// Admission record of one pool member.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MutantRecord {
    pub attempt: u64,
    pub seed: u64,
    pub accuracy: f64,
}

/// Accuracy-filtered mutants in admission order.
#[derive(Clone, Debug, PartialEq)]
pub struct MutantPool {
    mutants: Vec<Network>,
    records: Vec<MutantRecord>,
    config: MutationConfig,
    origin_accuracy: f64,
    attempts_made: u64,
}

impl MutantPool {
    pub fn mutants(&self) -> &[Network] {
        &self.mutants
    }

    pub fn records(&self) -> &[MutantRecord] {
        &self.records
    }

    pub fn config(&self) -> &MutationConfig {
        &self.config
    }

    pub fn origin_accuracy(&self) -> f64 {
        self.origin_accuracy
    }

    pub fn admission_threshold(&self) -> f64 {
        self.config.accuracy_floor_ratio * self.origin_accuracy
    }

    pub fn attempts_made(&self) -> u64 {
        self.attempts_made
    }

    pub fn len(&self) -> usize {
        self.mutants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mutants.is_empty()
    }
}

/// Number of attempts evaluated together; admission still follows attempt
/// order so the batch size never changes the result.
const ATTEMPT_BATCH: u64 = 32;

/// Samples mutants until `pool_size` pass the accuracy filter.
pub fn generate_pool(
    net: &Network,
    test_data: &Dataset,
    cfg: &MutationConfig,
    pool_size: usize,
) -> Result<MutantPool> {
    cfg.validate()?;
    if pool_size == 0 {
        return Err(Error::Argument("pool size must be at least 1".into()));
    }
    let origin_accuracy = accuracy(net, test_data)?;
    if origin_accuracy <= 0.0 {
        return Err(Error::Argument(
            "original model has zero accuracy on the filter data".into(),
        ));
    }
    let threshold = cfg.accuracy_floor_ratio * origin_accuracy;
    let cap = cfg.max_attempts_per_mutant * pool_size as u64;

    let mut mutants = Vec::with_capacity(pool_size);
    let mut records = Vec::with_capacity(pool_size);
    let mut next = 0u64;
    let mut attempts_made = 0u64;
    while mutants.len() < pool_size && next < cap {
        let end = (next + ATTEMPT_BATCH).min(cap);
        let batch = (next..end)
            .into_par_iter()
            .map(|attempt| {
                let (sub_seed, mutant) = cfg.attempt(net, attempt)?;
                let acc = accuracy(&mutant, test_data)?;
                Ok((attempt, sub_seed, mutant, acc))
            })
            .collect::<Result<Vec<_>>>()?;
        for (attempt, sub_seed, mutant, acc) in batch {
            if mutants.len() == pool_size {
                break;
            }
            attempts_made = attempt + 1;
            if acc >= threshold {
                mutants.push(mutant);
                records.push(MutantRecord {
                    attempt,
                    seed: sub_seed,
                    accuracy: acc,
                });
            }
        }
        next = end;
    }
    if mutants.len() < pool_size {
        return Err(Error::PoolGenerationFailed {
            requested: pool_size,
            admitted: mutants.len(),
            attempts: attempts_made,
            admission_rate: mutants.len() as f64 / attempts_made.max(1) as f64,
        });
    }
    Ok(MutantPool {
        mutants,
        records,
        config: *cfg,
        origin_accuracy,
        attempts_made,
    })
}

/// On-disk description of a pool directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolManifest {
    pub config: MutationConfig,
    pub origin_accuracy: f64,
    pub admission_threshold: f64,
    pub attempts_made: u64,
    /// Admission order.
    pub mutants: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
    #[serde(flatten)]
    pub record: MutantRecord,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl PoolManifest {
    /// SHA-256 of the manifest's canonical JSON. Covers the order and the
    /// content hash of every mutant.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialization cannot fail")
    }
}

impl MutantPool {
    pub fn manifest(&self) -> PoolManifest {
        PoolManifest {
            config: self.config,
            origin_accuracy: self.origin_accuracy,
            admission_threshold: self.admission_threshold(),
            attempts_made: self.attempts_made,
            mutants: self
                .mutants
                .iter()
                .zip(&self.records)
                .enumerate()
                .map(|(i, (m, r))| ManifestEntry {
                    file: mutant_file_name(i),
                    sha256: hex::encode(Sha256::digest(m.to_json().as_bytes())),
                    record: r.clone(),
                })
                .collect(),
        }
    }

    /// Writes `manifest.json` and one model JSON per mutant into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PoolManifest> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, m) in self.mutants.iter().enumerate() {
            m.save(dir.join(mutant_file_name(i)))?;
        }
        let manifest = self.manifest();
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, manifest.to_json()).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    /// Reloads a pool, verifying each mutant file against its manifest hash.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: PoolManifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let mut mutants = Vec::with_capacity(manifest.mutants.len());
        for entry in &manifest.mutants {
            let path: PathBuf = dir.join(&entry.file);
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let digest = hex::encode(Sha256::digest(text.as_bytes()));
            if digest != entry.sha256 {
                return Err(Error::PoolIntegrity(format!(
                    "{} hashes to {digest}, manifest says {}",
                    path.display(),
                    entry.sha256
                )));
            }
            mutants.push(Network::from_json(&text).map_err(|e| Error::json(&path, e))?);
        }
        Ok(MutantPool {
            mutants,
            records: manifest.mutants.iter().map(|e| e.record.clone()).collect(),
            config: manifest.config,
            origin_accuracy: manifest.origin_accuracy,
            attempts_made: manifest.attempts_made,
        })
    }
}

fn mutant_file_name(index: usize) -> String {
    format!("mutant_{index:05}.json")
}
