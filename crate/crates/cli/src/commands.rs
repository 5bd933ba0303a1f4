use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use mutguard::analysis::{lcr_distance, lcr_population, roc, SampleKind};
use mutguard::attacks::{fgsm, harvest_wrongly_labeled, jsma, read_jsonl, write_jsonl};
use mutguard::data::{load_idx, make_blobs, shuffled, split, Dataset, Sample};
use mutguard::detector::{batch_detect, calibrate_threshold, summarize, Calibration, LabeledInput, SampleOutcome, SprtConfig};
use mutguard::mutation::{generate_pool, MutantPool, MutationConfig, MANIFEST_FILE};
use mutguard::nn::{train_sgd, EpochStats, Network, TrainConfig};
use mutguard::seed::stage_seed;
use serde::{Deserialize, Serialize};

use crate::config::{require_file, DataConfig, RunConfig};
use crate::{Method, Usage};

/// File layout of one run directory.
struct Artifacts {
    root: PathBuf,
}

impl Artifacts {
    fn new(cfg: &RunConfig) -> Result<Self> {
        let root = cfg.out_dir();
        fs::create_dir_all(&root).with_context(|| format!("cannot create {}", root.display()))?;
        Ok(Self { root })
    }

    fn model(&self) -> PathBuf {
        self.root.join("model.json")
    }
    fn train_log(&self) -> PathBuf {
        self.root.join("train_log.json")
    }
    fn adversarial(&self, method: Method) -> PathBuf {
        self.root.join(format!("adversarial-{}.jsonl", method.name()))
    }
    fn pool(&self) -> PathBuf {
        self.root.join("pool")
    }
    fn sprt(&self) -> PathBuf {
        self.root.join("sprt.json")
    }
    fn reports(&self) -> PathBuf {
        self.root.join("reports.jsonl")
    }
    fn detect_summary(&self) -> PathBuf {
        self.root.join("detect_summary.json")
    }
    fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }
    fn roc(&self, group: &str) -> PathBuf {
        self.root.join(format!("roc-{group}.csv"))
    }

    /// Fails with a usage error naming the stage that produces `path`.
    fn require(&self, path: &Path, stage: &str) -> Result<(), Usage> {
        if path.exists() {
            Ok(())
        } else {
            Err(Usage(format!(
                "{} not found; run `mutguard {stage}` first",
                path.display()
            )))
        }
    }

    fn load_model(&self) -> Result<Network> {
        self.require(&self.model(), "train")?;
        Ok(Network::load(self.model())?)
    }

    fn load_pool(&self) -> Result<MutantPool> {
        self.require(&self.pool().join(MANIFEST_FILE), "mutate")?;
        Ok(MutantPool::load(self.pool())?)
    }

    fn load_calibration(&self) -> Result<Calibration> {
        self.require(&self.sprt(), "calibrate")?;
        read_json(&self.sprt())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("malformed {}", path.display()))
}

/// Train and test splits as configured.
fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.data {
        DataConfig::Blobs { .. } => {
            let (spec, test_fraction) = cfg.blob_spec().expect("blob config");
            let data = make_blobs(&spec)?;
            let (test, train) = split(&data, test_fraction, stage_seed(cfg.seed, "split"))?;
            Ok((train, test))
        }
        DataConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            train_limit,
            test_limit,
        } => {
            let train = load_idx(train_images, train_labels)?;
            let test = load_idx(test_images, test_labels)?;
            let classes = train.num_classes().max(test.num_classes());
            let subset = |d: Dataset, limit: &Option<usize>, stage: &str| -> Result<Dataset> {
                let d = d.with_num_classes(classes)?;
                Ok(match limit {
                    Some(n) => shuffled(&d, stage_seed(cfg.seed, stage)).take(*n),
                    None => d,
                })
            };
            Ok((
                subset(train, train_limit, "train-subset")?,
                subset(test, test_limit, "test-subset")?,
            ))
        }
    }
}

fn test_data(cfg: &RunConfig) -> Result<Dataset> {
    Ok(load_data(cfg)?.1)
}

/// Correctly classified test samples in a seeded order, split into the
/// calibration slice, the normal evaluation slice and attack seeds, so the
/// three never overlap.
struct Partition {
    calibration: Vec<Sample>,
    normals: Vec<Sample>,
    attack_seeds: Vec<Sample>,
}

fn partition(cfg: &RunConfig, net: &Network, test: &Dataset) -> Result<Partition> {
    let order = shuffled(test, stage_seed(cfg.seed, "partition"));
    let mut correct = Vec::new();
    for s in order.samples() {
        if net.predict_label(&s.features)? == s.label {
            correct.push(s.clone());
        }
    }
    let c = cfg.attack.calibration_samples.min(correct.len());
    let n = cfg.attack.normal_samples.min(correct.len() - c);
    let attack_seeds = correct.split_off(c + n);
    let normals = correct.split_off(c);
    Ok(Partition {
        calibration: correct,
        normals,
        attack_seeds,
    })
}

fn features(samples: &[Sample]) -> Vec<Vec<f64>> {
    samples.iter().map(|s| s.features.clone()).collect()
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let art = Artifacts::new(cfg)?;
    let (train, test) = load_data(cfg)?;
    let mut sizes = vec![train.input_dim()];
    sizes.extend(&cfg.model.hidden);
    sizes.push(train.num_classes());
    let init = Network::mlp(&sizes, stage_seed(cfg.seed, "init"))?;
    let tcfg = TrainConfig {
        epochs: cfg.model.epochs,
        batch_size: cfg.model.batch_size,
        learning_rate: cfg.model.learning_rate,
        seed: stage_seed(cfg.seed, "train"),
    };
    let start = Instant::now();
    let (net, log) = train_sgd(&init, &train, Some(&test), &tcfg)?;
    net.save(art.model())?;
    #[derive(Serialize)]
    struct TrainLog<'a> {
        layers: &'a [usize],
        train_samples: usize,
        test_samples: usize,
        config: TrainConfig,
        epochs: &'a [EpochStats],
    }
    write_json(
        &art.train_log(),
        &TrainLog {
            layers: &sizes,
            train_samples: train.len(),
            test_samples: test.len(),
            config: tcfg,
            epochs: &log,
        },
    )?;
    let last = log.last().expect("at least one epoch");
    println!(
        "trained {sizes:?} on {} samples in {:.1?}: train accuracy {:.4}, test accuracy {:.4}",
        train.len(),
        start.elapsed(),
        last.train_accuracy,
        last.test_accuracy.unwrap_or(f64::NAN)
    );
    println!("wrote {}", art.model().display());
    Ok(())
}

pub fn attack(cfg: &RunConfig, method: Method, count: Option<usize>) -> Result<()> {
    let art = Artifacts::new(cfg)?;
    let net = art.load_model()?;
    let test = test_data(cfg)?;
    let count = count.unwrap_or(cfg.attack.count);
    let attack = cfg.attack_config();
    let samples = match method {
        Method::WronglyLabeled => harvest_wrongly_labeled(&net, &test, count)?,
        Method::Fgsm | Method::Jsma => {
            let seeds = partition(cfg, &net, &test)?.attack_seeds;
            if seeds.len() < count {
                eprintln!("warning: only {} attack seeds available, {count} requested", seeds.len());
            }
            seeds
                .iter()
                .take(count)
                .map(|s| match method {
                    Method::Fgsm => fgsm(&net, &s.features, s.label, &attack),
                    _ => jsma(&net, &s.features, s.label, &attack),
                })
                .collect::<mutguard::Result<Vec<_>>>()?
        }
    };
    let path = art.adversarial(method);
    write_jsonl(&path, &samples)?;
    let ok = samples.iter().filter(|s| s.success).count();
    println!(
        "{}: {ok}/{} attempts successful ({:.1}%)",
        method.name(),
        samples.len(),
        100.0 * ok as f64 / samples.len().max(1) as f64
    );
    println!("wrote {}", path.display());
    Ok(())
}

pub fn mutate(cfg: &RunConfig) -> Result<()> {
    let art = Artifacts::new(cfg)?;
    let net = art.load_model()?;
    let test = test_data(cfg)?;
    let mcfg = cfg.mutation_config(stage_seed(cfg.seed, "mutate"));
    let start = Instant::now();
    let pool = generate_pool(&net, &test, &mcfg, cfg.mutation.pool_size)?;
    let dir = art.pool();
    if dir.exists() {
        fs::remove_dir_all(&dir).with_context(|| format!("cannot clear {}", dir.display()))?;
    }
    let manifest = pool.save(&dir)?;
    println!(
        "{} pool γ={}: {} mutants admitted from {} attempts (floor {:.4}) in {:.1?}",
        mcfg.operator,
        mcfg.rate,
        pool.len(),
        pool.attempts_made(),
        pool.admission_threshold(),
        start.elapsed()
    );
    println!("wrote {} (manifest sha256 {})", dir.display(), manifest.hash());
    Ok(())
}

pub fn calibrate(cfg: &RunConfig) -> Result<()> {
    let art = Artifacts::new(cfg)?;
    let net = art.load_model()?;
    let pool = art.load_pool()?;
    let test = test_data(cfg)?;
    let calibration = features(&partition(cfg, &net, &test)?.calibration);
    if calibration.is_empty() {
        return Err(Usage("no correctly classified test samples to calibrate on".into()).into());
    }
    let mut cal = calibrate_threshold(&net, pool.mutants(), &calibration, cfg.detector.rho)?;
    let d = &cfg.detector;
    cal.config.alpha = d.alpha;
    cal.config.beta = d.beta;
    if let Some(delta) = d.indifference {
        cal.config.indifference = delta;
    }
    let max = d.max_mutants.unwrap_or(pool.len());
    if max > pool.len() {
        return Err(Usage(format!(
            "max_mutants {max} exceeds the pool size {}; regenerate the pool with --pool-size {max}",
            pool.len()
        ))
        .into());
    }
    cal.config.max_mutants = max;
    cal.config.validate()?;
    write_json(&art.sprt(), &cal)?;
    let c = &cal.config;
    println!(
        "normal LCR {:.4} ± {:.4} over {} samples → ς_nr {:.4}; threshold {:.4}, indifference {:.5}, α {}, β {}, max mutants {}",
        cal.normal_lcr.mean,
        cal.normal_lcr.ci_half_width,
        cal.normal_lcr.sample_count,
        cal.normal_upper_bound,
        c.threshold,
        c.indifference,
        c.alpha,
        c.beta,
        c.max_mutants
    );
    println!("wrote {}", art.sprt().display());
    Ok(())
}

/// Successful adversarial samples grouped by input file; the group name is
/// the file stem without its `adversarial-` prefix.
fn adversarial_groups(art: &Artifacts, explicit: &[PathBuf]) -> Result<Vec<(String, Vec<Vec<f64>>)>> {
    let files: Vec<PathBuf> = if explicit.is_empty() {
        let mut found: Vec<PathBuf> = fs::read_dir(&art.root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("adversarial-") && n.ends_with(".jsonl"))
            })
            .collect();
        found.sort();
        found
    } else {
        for p in explicit {
            require_file(p)?;
        }
        explicit.to_vec()
    };
    if files.is_empty() {
        return Err(Usage(format!(
            "no adversarial-*.jsonl in {}; run `mutguard attack` first or pass --adversarial",
            art.root.display()
        ))
        .into());
    }
    let mut groups: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
    for path in files {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("adversarial");
        let mut name = stem.strip_prefix("adversarial-").unwrap_or(stem).to_string();
        if name == "normal" || groups.iter().any(|(n, _)| *n == name) {
            name = format!("{name}-{}", groups.len());
        }
        let samples = read_jsonl(&path)?
            .into_iter()
            .filter(|s| s.success)
            .map(|s| s.perturbed)
            .collect();
        groups.push((name, samples));
    }
    Ok(groups)
}

#[derive(Serialize, Deserialize)]
struct ReportLine {
    source: String,
    #[serde(flatten)]
    outcome: SampleOutcome,
}

pub fn detect(cfg: &RunConfig, explicit: &[PathBuf], no_timing: bool) -> Result<()> {
    let art = Artifacts::new(cfg)?;
    let net = art.load_model()?;
    let pool = art.load_pool()?;
    let cal = art.load_calibration()?;
    let groups = adversarial_groups(&art, explicit)?;
    let test = test_data(cfg)?;
    let normals = features(&partition(cfg, &net, &test)?.normals);

    let mut sources = Vec::new();
    let mut inputs = Vec::new();
    for (name, samples) in &groups {
        for x in samples {
            sources.push(name.clone());
            inputs.push(LabeledInput {
                kind: SampleKind::Adversarial,
                features: x.clone(),
            });
        }
    }
    for x in normals {
        sources.push("normal".to_string());
        inputs.push(LabeledInput {
            kind: SampleKind::Normal,
            features: x,
        });
    }

    let sprt: SprtConfig = cal.config;
    let start = Instant::now();
    let mut batch = batch_detect(&inputs, &net, &pool, &sprt)?;
    let elapsed = start.elapsed();
    if no_timing {
        for o in &mut batch.outcomes {
            o.report = o.report.as_ref().map(|r| r.without_timing());
        }
    }

    let file = fs::File::create(art.reports()).with_context(|| format!("cannot write {}", art.reports().display()))?;
    let mut out = BufWriter::new(file);
    for (source, outcome) in sources.iter().zip(&batch.outcomes) {
        let line = ReportLine {
            source: source.clone(),
            outcome: outcome.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&line)?)?;
    }
    out.flush()?;

    let mut by_source: BTreeMap<&str, Vec<SampleOutcome>> = BTreeMap::new();
    for (source, outcome) in sources.iter().zip(&batch.outcomes) {
        by_source.entry(source).or_default().push(outcome.clone());
    }
    let groups: BTreeMap<&str, _> = by_source.iter().map(|(k, v)| (*k, summarize(v))).collect();
    #[derive(Serialize)]
    struct DetectSummary<'a, G: Serialize> {
        config: &'a SprtConfig,
        overall: &'a mutguard::detector::BatchSummary,
        groups: G,
    }
    write_json(
        &art.detect_summary(),
        &DetectSummary {
            config: &sprt,
            overall: &batch.summary,
            groups: &groups,
        },
    )?;

    println!("{:<18} {:>7} {:>9} {:>10} {:>9}", "group", "samples", "accuracy", "mutants", "undecided");
    for (name, s) in &groups {
        let acc = if *name == "normal" {
            s.accuracy.normal_accuracy()
        } else {
            s.accuracy.adversarial_accuracy()
        };
        println!(
            "{:<18} {:>7} {:>9.3} {:>10.1} {:>9}",
            name,
            s.samples,
            acc.unwrap_or(f64::NAN),
            s.mean_mutants_used,
            s.fallbacks
        );
    }
    println!("{} samples in {elapsed:.1?}", batch.summary.samples);
    println!("wrote {} and {}", art.reports().display(), art.detect_summary().display());
    Ok(())
}

#[derive(Serialize)]
struct GroupMetrics {
    group: String,
    samples: usize,
    lcr_mean: f64,
    lcr_ci_half_width: f64,
    /// Mean adversarial LCR over mean normal LCR; null for the normal
    /// group or when the normal mean is 0.
    d_lcr: Option<f64>,
    auroc: Option<f64>,
    roc_csv: Option<String>,
    detection_accuracy: Option<f64>,
    undecided: usize,
    /// Mean mutants consumed per sample (n).
    mean_mutants: f64,
    /// Mean forward cost per sample (c_f), milliseconds.
    mean_forward_ms: f64,
    /// Mean generation cost per sample (c_g), milliseconds.
    mean_generation_ms: f64,
}

#[derive(Serialize)]
struct Metrics {
    mutation: MutationConfig,
    pool_size: usize,
    detector: SprtConfig,
    groups: Vec<GroupMetrics>,
}

pub fn evaluate(cfg: &RunConfig, explicit: &[PathBuf]) -> Result<()> {
    let art = Artifacts::new(cfg)?;
    let net = art.load_model()?;
    let pool = art.load_pool()?;
    let cal = art.load_calibration()?;
    art.require(&art.reports(), "detect")?;
    let groups = adversarial_groups(&art, explicit)?;
    let test = test_data(cfg)?;
    let normals = features(&partition(cfg, &net, &test)?.normals);

    let mut reports: BTreeMap<String, Vec<SampleOutcome>> = BTreeMap::new();
    let file = fs::File::open(art.reports())?;
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: ReportLine = serde_json::from_str(&line)
            .with_context(|| format!("malformed line in {}", art.reports().display()))?;
        reports.entry(r.source).or_default().push(r.outcome);
    }

    let normal = lcr_population(&normals, &net, pool.mutants())?;
    let mut rows = Vec::new();
    let mut add = |name: &str, est: &mutguard::analysis::LcrEstimate, auroc: Option<f64>, csv: Option<String>| {
        let outcomes = reports.get(name).map(Vec::as_slice).unwrap_or(&[]);
        let summary = summarize(outcomes);
        let detection_accuracy = if name == "normal" {
            summary.accuracy.normal_accuracy()
        } else {
            summary.accuracy.adversarial_accuracy()
        };
        let mean_cost = |f: fn(&mutguard::detector::Cost) -> f64| {
            let costs: Vec<f64> = outcomes.iter().filter_map(|o| o.report.as_ref()).map(|r| f(&r.cost)).collect();
            if costs.is_empty() {
                0.0
            } else {
                costs.iter().sum::<f64>() / costs.len() as f64
            }
        };
        rows.push(GroupMetrics {
            group: name.to_string(),
            samples: est.sample_count,
            lcr_mean: est.mean,
            lcr_ci_half_width: est.ci_half_width,
            d_lcr: if name == "normal" { None } else { lcr_distance(est, &normal).ok() },
            auroc,
            roc_csv: csv,
            detection_accuracy,
            undecided: summary.fallbacks,
            mean_mutants: summary.mean_mutants_used,
            mean_forward_ms: mean_cost(|c| c.c_f_ms),
            mean_generation_ms: mean_cost(|c| c.c_g_ms),
        });
    };
    add("normal", &normal, None, None);
    for (name, samples) in &groups {
        if samples.is_empty() {
            eprintln!("warning: group {name} has no successful samples; skipped");
            continue;
        }
        let est = lcr_population(samples, &net, pool.mutants())?;
        let curve = roc(&est.per_sample_lcr, &normal.per_sample_lcr)?;
        let path = art.roc(name);
        let file = fs::File::create(&path).with_context(|| format!("cannot write {}", path.display()))?;
        curve.write_csv(BufWriter::new(file))?;
        let csv = path.file_name().map(|n| n.to_string_lossy().into_owned());
        add(name, &est, Some(curve.auroc), csv);
    }

    let metrics = Metrics {
        mutation: *pool.config(),
        pool_size: pool.len(),
        detector: cal.config,
        groups: rows,
    };
    write_json(&art.metrics(), &metrics)?;

    println!(
        "{:<18} {:>7} {:>16} {:>7} {:>7} {:>9} {:>8} {:>9} {:>9}",
        "group", "samples", "LCR % (99% CI)", "d_lcr", "AUROC", "accuracy", "n", "c_f ms", "c_g ms"
    );
    let opt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |v| format!("{v:.p$}"));
    for g in &metrics.groups {
        println!(
            "{:<18} {:>7} {:>16} {:>7} {:>7} {:>9} {:>8.1} {:>9.3} {:>9.3}",
            g.group,
            g.samples,
            format!("{:.2} ± {:.2}", 100.0 * g.lcr_mean, 100.0 * g.lcr_ci_half_width),
            opt(g.d_lcr, 2),
            opt(g.auroc, 4),
            opt(g.detection_accuracy, 3),
            g.mean_mutants,
            g.mean_forward_ms,
            g.mean_generation_ms
        );
    }
    println!("wrote {}", art.metrics().display());
    Ok(())
}
