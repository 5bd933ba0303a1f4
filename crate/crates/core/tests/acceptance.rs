//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! Criteria 4–7 and 9 need MNIST in `data/mnist` (see
//! `scripts/fetch_mnist.py`), or in the directory named by
//! `MUTGUARD_MNIST_DIR`.

use std::cell::OnceCell;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use mutguard::analysis::{lcr_population, roc, LcrEstimate, SampleKind};
use mutguard::attacks::{fgsm, jsma, AttackConfig};
use mutguard::data::{load_idx, make_blobs, save_idx, shuffled, BlobSpec, Dataset};
use mutguard::detector::{
    batch_detect, calibrate_threshold, sprt_detect, BatchReport, LabeledInput, MutantSource,
    SprtConfig, Verdict,
};
use mutguard::mutation::{
    apply_nai, count_neurons, generate_pool, mutate_gf, mutate_nai, mutate_ns, mutate_ws,
    select_neurons, MutantPool, MutationConfig, Operator,
};
use mutguard::nn::{accuracy, train_sgd, Activation, DenseLayer, Network, TrainConfig};
use mutguard::seed::{ceil_fraction, rng, stage_seed};
use rand::Rng;

const SEED: u64 = 2018;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

type Check = Result<Outcome, String>;

fn main() {
    let mut failures = 0;
    let mut report = |id: u8, name: &str, limit: Option<Duration>, run: &mut dyn FnMut() -> Check| {
        let start = Instant::now();
        let result = run();
        let elapsed = start.elapsed();
        let (pass, detail) = match result {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let in_time = limit.map_or(true, |l| elapsed <= l);
        let pass = pass && in_time;
        failures += usize::from(!pass);
        let budget = limit.map_or(String::new(), |l| format!(" / limit {:.0?}", l));
        let late = if in_time { "" } else { " [over time limit]" };
        println!(
            "criterion {id} {} {name}: {detail} ({elapsed:.1?}{budget}){late}",
            if pass { "PASS" } else { "FAIL" }
        );
    };

    report(1, "gradient correctness", Some(Duration::from_secs(30)), &mut gradient_check);
    report(2, "operator footprints", Some(Duration::from_secs(60)), &mut operator_footprints);
    report(3, "SPRT error bounds", Some(Duration::from_secs(60)), &mut sprt_monte_carlo);

    let mnist = mnist_subsets();
    let desk: OnceCell<Result<Desk, String>> = OnceCell::new();
    let desk = &desk;
    let mnist_ref = &mnist;
    let with_desk = |f: fn(&Desk) -> Check| {
        move || {
            let built = desk.get_or_init(|| {
                mnist_ref.as_ref().map_err(Clone::clone).and_then(|(train, test)| Desk::build(train, test))
            });
            match built {
                Ok(d) => f(d),
                Err(e) => Err(e.clone()),
            }
        }
    };
    // Criterion 4's time includes training and pool generation.
    report(4, "LCR separation (NAI, FGSM)", Some(Duration::from_secs(15 * 60)), &mut with_desk(lcr_separation));
    report(5, "AUROC", Some(Duration::from_secs(10 * 60)), &mut with_desk(auroc));
    report(6, "detector end-to-end", Some(Duration::from_secs(10 * 60)), &mut with_desk(end_to_end));
    report(7, "oracle agreement", None, &mut with_desk(oracle_agreement));
    report(8, "format round-trips", None, &mut || {
        round_trips(mnist.as_ref().ok().map(|(_, test)| test))
    });
    report(9, "determinism", None, &mut || match &mnist {
        Ok((train, test)) => determinism(train, test),
        Err(e) => Err(e.clone()),
    });

    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}

// ---------------------------------------------------------------- criterion 1

fn random_net<R: Rng>(r: &mut R, sizes: &[usize]) -> Network {
    let layers = sizes
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let last = i + 2 == sizes.len();
            DenseLayer::new(
                w[0],
                w[1],
                (0..w[0] * w[1]).map(|_| r.gen_range(-1.0..1.0)).collect(),
                (0..w[1]).map(|_| r.gen_range(-0.5..0.5)).collect(),
                if last { Activation::Identity } else { Activation::Relu },
            )
            .unwrap()
        })
        .collect();
    Network::new(layers).unwrap()
}

/// Rebuilds `net` with one parameter shifted: `index` runs over the layer's
/// weights, then its biases.
fn nudge(net: &Network, layer: usize, index: usize, h: f64) -> Network {
    let layers = net
        .layers()
        .iter()
        .enumerate()
        .map(|(k, l)| {
            let mut w = l.weights().to_vec();
            let mut b = l.biases().to_vec();
            if k == layer {
                if index < w.len() {
                    w[index] += h;
                } else {
                    b[index - w.len()] += h;
                }
            }
            DenseLayer::new(l.in_dim(), l.out_dim(), w, b, l.activation()).unwrap()
        })
        .collect();
    Network::new(layers).unwrap()
}

/// Cross-entropy from the logits, computed independently of the library's
/// loss.
fn loss(net: &Network, x: &[f64], label: usize) -> f64 {
    let z = net.forward(x).unwrap().logits;
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - z[label]
}

/// `‖a − b‖ / (‖a‖ + ‖b‖)`, the usual gradient-check measure.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()) + norm(&mut b.iter().copied());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn gradient_check() -> Check {
    let mut r = rng(stage_seed(SEED, "acceptance-gradients"));
    let h = 1e-5;
    let (mut nets, mut worst, mut worst_jac, mut checked) = (0, 0.0f64, 0.0f64, 0usize);
    while nets < 120 {
        let depth = r.gen_range(1..=3);
        let mut sizes = vec![r.gen_range(2..=6)];
        sizes.extend((0..depth).map(|_| r.gen_range(2..=6)));
        sizes.push(r.gen_range(2..=5));
        let net = random_net(&mut r, &sizes);
        let x: Vec<f64> = (0..sizes[0]).map(|_| r.gen_range(0.0..1.0)).collect();
        // Stay away from ReLU kinks, where the derivative is undefined.
        let trace = net.forward(&x).unwrap();
        let near_kink = trace.pre_activations[..trace.pre_activations.len() - 1]
            .iter()
            .flatten()
            .any(|v| v.abs() < 1e-3);
        if near_kink {
            continue;
        }
        nets += 1;
        let label = r.gen_range(0..net.num_classes());
        let g = net.loss_and_gradients(&x, label).unwrap();
        let central = |f: &dyn Fn(f64) -> f64| (f(h) - f(-h)) / (2.0 * h);

        let analytic: Vec<f64> = g.layers.iter().flat_map(|l| l.weights.iter().chain(&l.biases)).copied().collect();
        let mut numeric = Vec::with_capacity(analytic.len());
        for (k, l) in net.layers().iter().enumerate() {
            for i in 0..l.weights().len() + l.biases().len() {
                numeric.push(central(&|d| loss(&nudge(&net, k, i, d), &x, label)));
            }
        }
        worst = worst.max(rel_err(&analytic, &numeric));

        let numeric: Vec<f64> = (0..x.len())
            .map(|j| {
                central(&|d| {
                    let mut v = x.clone();
                    v[j] += d;
                    loss(&net, &v, label)
                })
            })
            .collect();
        worst = worst.max(rel_err(&g.input, &numeric));
        checked += analytic.len() + x.len();

        let jac = net.class_jacobian(&x).unwrap();
        for j in 0..x.len() {
            let column: f64 = jac.iter().map(|row| row[j]).sum();
            worst_jac = worst_jac.max(column.abs());
        }
    }
    Ok(outcome(
        worst <= 1e-4 && worst_jac <= 1e-8,
        format!(
            "{nets} nets, {checked} partials, max rel err {worst:.2e} (≤1e-4), max |Σ_k ∂p_k/∂x_j| {worst_jac:.1e} (≤1e-8)"
        ),
    ))
}

// ---------------------------------------------------------------- criterion 2

fn rows(layer: &DenseLayer) -> Vec<Vec<f64>> {
    (0..layer.out_dim()).map(|u| layer.row(u).to_vec()).collect()
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

fn operator_footprints() -> Check {
    let mut r = rng(stage_seed(SEED, "acceptance-operators"));
    let cases = 250;
    let mut violations: Vec<String> = Vec::new();
    for case in 0..cases {
        let mut sizes = vec![r.gen_range(1..=8)];
        sizes.extend((0..r.gen_range(1..=3)).map(|_| r.gen_range(1..=12)));
        let net = random_net(&mut r, &sizes);
        let gamma = r.gen_range(0.01..=1.0);
        let seed: u64 = r.gen();
        let mut fail = |op: &str, what: String| violations.push(format!("case {case} {op}: {what}"));

        // NAI: exactly ⌈N·γ⌉ rows negated, biases untouched, involution.
        let k = ceil_fraction(count_neurons(&net), gamma);
        let m = mutate_nai(&net, gamma, &mut rng(seed)).unwrap();
        let mut negated = 0;
        for (a, b) in net.layers().iter().zip(m.layers()) {
            if a.biases() != b.biases() {
                fail("nai", "bias changed".into());
            }
            for (ra, rb) in rows(a).iter().zip(rows(b)) {
                if *ra != rb {
                    if ra.iter().zip(&rb).all(|(x, y)| *y == -*x) {
                        negated += 1;
                    } else {
                        fail("nai", "row changed other than by negation".into());
                    }
                }
            }
        }
        if negated != k {
            fail("nai", format!("{negated} rows negated, expected {k}"));
        }
        let sel = select_neurons(&net, gamma, &mut rng(seed)).unwrap();
        if apply_nai(&apply_nai(&net, &sel), &sel) != net {
            fail("nai", "fixed selection is not an involution".into());
        }

        // GF: exactly ⌈P·γ⌉ weights redrawn, biases untouched.
        let p: usize = net.layers().iter().map(|l| l.weights().len()).sum();
        let k = ceil_fraction(p, gamma);
        let m = mutate_gf(&net, gamma, &mut rng(seed)).unwrap();
        let mut changed = 0;
        for (a, b) in net.layers().iter().zip(m.layers()) {
            if a.biases() != b.biases() {
                fail("gf", "bias changed".into());
            }
            changed += a.weights().iter().zip(b.weights()).filter(|(x, y)| x != y).count();
        }
        // A zero-variance layer redraws its own value.
        let constant = net.layers().iter().any(|l| l.weights().iter().all(|w| *w == l.weights()[0]));
        if changed != k && !(constant && changed < k) {
            fail("gf", format!("{changed} weights changed, expected {k}"));
        }

        // WS: at most ⌈N·γ⌉ rows touched, each a permutation of itself.
        let k = ceil_fraction(count_neurons(&net), gamma);
        let m = mutate_ws(&net, gamma, &mut rng(seed)).unwrap();
        let mut touched = 0;
        for (a, b) in net.layers().iter().zip(m.layers()) {
            if a.biases() != b.biases() {
                fail("ws", "bias changed".into());
            }
            for (ra, rb) in rows(a).into_iter().zip(rows(b)) {
                if ra != rb {
                    touched += 1;
                    if sorted(ra) != sorted(rb) {
                        fail("ws", "row multiset changed".into());
                    }
                }
            }
        }
        if touched > k {
            fail("ws", format!("{touched} rows touched, at most {k} allowed"));
        }

        // NS: per layer, (row, bias) pairs permuted among ⌈N_l·γ⌉ positions.
        let m = mutate_ns(&net, gamma, &mut rng(seed)).unwrap();
        for (a, b) in net.layers().iter().zip(m.layers()) {
            let k = ceil_fraction(a.out_dim(), gamma);
            let pairs = |l: &DenseLayer| -> Vec<(Vec<f64>, f64)> {
                rows(l).into_iter().zip(l.biases().iter().copied()).collect()
            };
            let (pa, pb) = (pairs(a), pairs(b));
            let moved = pa.iter().zip(&pb).filter(|(x, y)| x != y).count();
            if moved > k || (k < 2 && moved > 0) {
                fail("ns", format!("{moved} neurons moved with {k} selected"));
            }
            let mut sa = pa.clone();
            let mut sb = pb.clone();
            let key = |p: &(Vec<f64>, f64)| format!("{:?}", p);
            sa.sort_by_key(key);
            sb.sort_by_key(key);
            if sa != sb {
                fail("ns", "layer's (row, bias) multiset changed".into());
            }
        }
    }
    let n = violations.len();
    Ok(outcome(
        n == 0,
        if n == 0 {
            format!("{cases} cases × 4 operators, no footprint violations")
        } else {
            format!("{n} violations, first: {}", violations[0])
        },
    ))
}

// ---------------------------------------------------------------- criterion 3

fn constant_net(label: usize) -> Network {
    let biases = (0..2).map(|c| if c == label { 1.0 } else { 0.0 }).collect();
    Network::new(vec![DenseLayer::new(1, 2, vec![0.0, 0.0], biases, Activation::Identity).unwrap()])
        .unwrap()
}

/// Mutant stream whose members flip the label with probability `p`.
struct Bernoulli<R> {
    keep: Network,
    flip: Network,
    p: f64,
    rng: R,
}

impl<R: Rng> MutantSource for Bernoulli<R> {
    fn next_mutant(&mut self) -> mutguard::Result<Option<&Network>> {
        Ok(Some(if self.rng.gen_bool(self.p) { &self.flip } else { &self.keep }))
    }
}

fn sprt_monte_carlo() -> Check {
    let cfg = SprtConfig::new(0.05, 0.005);
    let base = constant_net(0);
    let x = [0.0];
    let run = |p: f64, seed: u64| {
        let mut src = Bernoulli {
            keep: constant_net(0),
            flip: constant_net(1),
            p,
            rng: rng(seed),
        };
        sprt_detect(&x, &base, &mut src, &cfg)
    };
    let trials = 1000;
    let mut wrong = [0usize; 2];
    for t in 0..trials {
        let s = stage_seed(SEED, "acceptance-sprt") ^ t;
        if run(0.05 + 3.0 * 0.005, s).map_err(|e| e.to_string())?.verdict != Verdict::Adversarial {
            wrong[0] += 1;
        }
        if run(0.05 - 3.0 * 0.005, s.rotate_left(17)).map_err(|e| e.to_string())?.verdict != Verdict::Normal {
            wrong[1] += 1;
        }
    }
    let rate = wrong.map(|w| w as f64 / trials as f64);

    // Independent oracle: multiply the ratio out directly.
    let (p1, p0) = (0.045f64, 0.055f64);
    let accept_adv = 0.05 / 0.95;
    let (mut n_all, mut pr) = (0usize, 1.0f64);
    while pr > accept_adv {
        pr *= p1 / p0;
        n_all += 1;
    }
    let (mut n_none, mut pr) = (0usize, 1.0f64);
    while pr < 19.0 {
        pr *= (1.0 - p1) / (1.0 - p0);
        n_none += 1;
    }
    let all = run(1.0, 0).map_err(|e| e.to_string())?;
    let none = run(0.0, 0).map_err(|e| e.to_string())?;
    let stops_ok = n_all == 15
        && n_none == 280
        && all.mutants_used == 15
        && all.verdict == Verdict::Adversarial
        && none.mutants_used == 280
        && none.verdict == Verdict::Normal;
    Ok(outcome(
        rate[0] <= 0.07 && rate[1] <= 0.07 && stops_ok,
        format!(
            "wrong-verdict rate {:.3} (p=ς_h+3δ) / {:.3} (p=ς_h−3δ) over {trials} trials (≤0.07); all-change stop n={} , no-change stop n={} (expected 15 / 280)",
            rate[0], rate[1], all.mutants_used, none.mutants_used
        ),
    ))
}

// ------------------------------------------------------------ MNIST pipeline

fn mnist_dir() -> PathBuf {
    std::env::var_os("MUTGUARD_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

/// 10k training and 2k test samples, drawn by seeded shuffles of the
/// standard splits.
fn mnist_subsets() -> Result<(Dataset, Dataset), String> {
    let dir = mnist_dir();
    let load = |prefix: &str, len: usize, stage: &str| -> Result<Dataset, String> {
        let full = load_idx(
            dir.join(format!("{prefix}-images-idx3-ubyte")),
            dir.join(format!("{prefix}-labels-idx1-ubyte")),
        )
        .and_then(|d| d.with_num_classes(10))
        .map_err(|e| format!("{e} — run scripts/fetch_mnist.py or set MUTGUARD_MNIST_DIR"))?;
        Ok(shuffled(&full, stage_seed(SEED, stage)).take(len))
    };
    Ok((load("train", 10_000, "train-subset")?, load("t10k", 2_000, "test-subset")?))
}

fn train_mlp(train: &Dataset, epochs: usize) -> mutguard::Result<Network> {
    let init = Network::mlp(&[train.input_dim(), 128, 10], stage_seed(SEED, "init"))?;
    let cfg = TrainConfig {
        epochs,
        batch_size: 32,
        learning_rate: 0.1,
        seed: stage_seed(SEED, "train"),
    };
    Ok(train_sgd(&init, train, None, &cfg)?.0)
}

/// Splits the correctly classified test samples into evaluation normals,
/// calibration normals, and attack seeds, and attacks the seeds until
/// `count` successes per method.
struct Samples {
    normals: Vec<Vec<f64>>,
    calibration: Vec<Vec<f64>>,
    fgsm: Vec<Vec<f64>>,
    jsma: Vec<Vec<f64>>,
}

fn pick_samples(net: &Network, test: &Dataset, count: usize) -> mutguard::Result<Samples> {
    let mut correct = Vec::new();
    for s in test.samples() {
        if net.predict_label(&s.features)? == s.label {
            correct.push(s);
        }
    }
    let attack = AttackConfig::default();
    let (mut f, mut j) = (Vec::new(), Vec::new());
    for s in correct.iter().skip(2 * count) {
        if f.len() < count {
            let a = fgsm(net, &s.features, s.label, &attack)?;
            if a.success {
                f.push(a.perturbed);
            }
        }
        if j.len() < count {
            let a = jsma(net, &s.features, s.label, &attack)?;
            if a.success {
                j.push(a.perturbed);
            }
        }
        if f.len() == count && j.len() == count {
            break;
        }
    }
    let slice = |r: std::ops::Range<usize>| correct[r].iter().map(|s| s.features.clone()).collect();
    Ok(Samples {
        normals: slice(0..count),
        calibration: slice(count..2 * count),
        fgsm: f,
        jsma: j,
    })
}

fn detection_inputs(samples: &Samples, per_attack: usize) -> Vec<LabeledInput> {
    let adv = samples.fgsm.iter().take(per_attack).chain(samples.jsma.iter().take(per_attack));
    adv.map(|x| LabeledInput {
        kind: SampleKind::Adversarial,
        features: x.clone(),
    })
    .chain(samples.normals.iter().map(|x| LabeledInput {
        kind: SampleKind::Normal,
        features: x.clone(),
    }))
    .collect()
}

struct Desk {
    net: Network,
    pool: MutantPool,
    test_accuracy: f64,
    samples: Samples,
    normal: LcrEstimate,
    fgsm: LcrEstimate,
    jsma: LcrEstimate,
    detection: OnceCell<Detection>,
}

type Detection = (SprtConfig, BatchReport);

impl Desk {
    fn build(train: &Dataset, test: &Dataset) -> Result<Desk, String> {
        let run = || -> mutguard::Result<Desk> {
            let net = train_mlp(train, 20)?;
            let test_accuracy = accuracy(&net, test)?;
            let samples = pick_samples(&net, test, 200)?;
            let cfg = MutationConfig::new(Operator::Nai, 0.05, stage_seed(SEED, "mutate"));
            let pool = generate_pool(&net, test, &cfg, 500)?;
            let normal = lcr_population(&samples.normals, &net, pool.mutants())?;
            let fgsm = lcr_population(&samples.fgsm, &net, pool.mutants())?;
            let jsma = lcr_population(&samples.jsma, &net, pool.mutants())?;
            Ok(Desk {
                net,
                pool,
                test_accuracy,
                samples,
                normal,
                fgsm,
                jsma,
                detection: OnceCell::new(),
            })
        };
        let desk = run().map_err(|e| e.to_string())?;
        if desk.samples.fgsm.len() < 200 || desk.samples.jsma.len() < 200 {
            return Err(format!(
                "only {} FGSM / {} JSMA successes available",
                desk.samples.fgsm.len(),
                desk.samples.jsma.len()
            ));
        }
        Ok(desk)
    }

    /// ρ = 1 calibration, then detection over 100 FGSM + 100 JSMA + 200
    /// normal samples against the cached pool. Computed once.
    fn detection(&self) -> Result<&Detection, String> {
        if let Some(d) = self.detection.get() {
            return Ok(d);
        }
        let run = || -> mutguard::Result<Detection> {
            let mut cfg =
                calibrate_threshold(&self.net, self.pool.mutants(), &self.samples.calibration, 1.0)?.config;
            cfg.max_mutants = self.pool.len();
            let inputs = detection_inputs(&self.samples, 100);
            Ok((cfg, batch_detect(&inputs, &self.net, &self.pool, &cfg)?))
        };
        let d = run().map_err(|e| e.to_string())?;
        Ok(self.detection.get_or_init(|| d))
    }
}

fn lcr_separation(d: &Desk) -> Check {
    let ratio = d.fgsm.mean / d.normal.mean;
    let pass = d.test_accuracy >= 0.95 && ratio >= 5.0 && d.fgsm.separated_from(&d.normal);
    Ok(outcome(
        pass,
        format!(
            "test acc {:.4} (≥0.95); pool 500 from {} attempts; normal {:.2}±{:.2}%, FGSM {:.2}±{:.2}% → ratio {ratio:.2} (≥5), CIs {}; [JSMA {:.2}±{:.2}%, ratio {:.2}]",
            d.test_accuracy,
            d.pool.attempts_made(),
            100.0 * d.normal.mean,
            100.0 * d.normal.ci_half_width,
            100.0 * d.fgsm.mean,
            100.0 * d.fgsm.ci_half_width,
            if d.fgsm.separated_from(&d.normal) { "disjoint" } else { "overlap" },
            100.0 * d.jsma.mean,
            100.0 * d.jsma.ci_half_width,
            d.jsma.mean / d.normal.mean,
        ),
    ))
}

fn auroc(d: &Desk) -> Check {
    let f = roc(&d.fgsm.per_sample_lcr, &d.normal.per_sample_lcr).map_err(|e| e.to_string())?;
    let j = roc(&d.jsma.per_sample_lcr, &d.normal.per_sample_lcr).map_err(|e| e.to_string())?;
    Ok(outcome(
        f.auroc >= 0.90 && j.auroc >= 0.90,
        format!("FGSM {:.4}, JSMA {:.4} (both ≥0.90)", f.auroc, j.auroc),
    ))
}

fn end_to_end(d: &Desk) -> Check {
    let (cfg, batch) = d.detection()?;
    let s = &batch.summary;
    let adv = s.accuracy.adversarial_accuracy().unwrap_or(0.0);
    let nor = s.accuracy.normal_accuracy().unwrap_or(0.0);
    Ok(outcome(
        adv >= 0.85 && nor >= 0.80 && s.mean_mutants_used <= 300.0,
        format!(
            "ς_h {:.4}, δ {:.5}; adversarial acc {adv:.3} (≥0.85), normal acc {nor:.3} (≥0.80), mean mutants {:.1} (≤300); {} undecided, {} failed",
            cfg.threshold, cfg.indifference, s.mean_mutants_used, s.fallbacks, s.failed
        ),
    ))
}

fn oracle_agreement(d: &Desk) -> Check {
    let (cfg, batch) = d.detection()?;
    // The fixed-pool LCR of every detection input is already known.
    let fixed: Vec<f64> = d.fgsm.per_sample_lcr[..100]
        .iter()
        .chain(&d.jsma.per_sample_lcr[..100])
        .chain(&d.normal.per_sample_lcr)
        .copied()
        .collect();
    let (mut outside, mut agree) = (0, 0);
    for (lcr, o) in fixed.iter().zip(&batch.outcomes) {
        if (lcr - cfg.threshold).abs() < cfg.indifference {
            continue;
        }
        outside += 1;
        let oracle = if *lcr > cfg.threshold { Verdict::Adversarial } else { Verdict::Normal };
        if o.report.as_ref().is_some_and(|r| r.resolved_verdict() == oracle) {
            agree += 1;
        }
    }
    let rate = agree as f64 / outside.max(1) as f64;
    Ok(outcome(
        outside > 0 && rate >= 0.95,
        format!("{agree}/{outside} samples outside the indifference region agree ({:.1}%, ≥95%)", 100.0 * rate),
    ))
}

// ---------------------------------------------------------------- criterion 8

fn round_trips(mnist_test: Option<&Dataset>) -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = || -> mutguard::Result<Vec<String>> {
        let blobs = make_blobs(&BlobSpec::new(3, 60, 16, 0.05, 7))?;
        let data = mnist_test.map_or(blobs.clone(), |t| t.take(500));
        let mut notes = Vec::new();

        // Model JSON: structure and text are both preserved.
        let net = train_sgd(
            &Network::mlp(&[data.input_dim(), 32, data.num_classes()], 1)?,
            &data,
            None,
            &TrainConfig { epochs: 2, batch_size: 16, learning_rate: 0.1, seed: 2 },
        )?
        .0;
        let path = dir.path().join("model.json");
        net.save(&path)?;
        let back = Network::load(&path)?;
        notes.push(format!("model {}", if back == net && back.to_json() == net.to_json() { "ok" } else { "MISMATCH" }));

        // Pool directory: same mutants in the same order, same manifest hash.
        let pool = generate_pool(&net, &data, &MutationConfig::new(Operator::Ns, 0.1, 3), 12)?;
        let saved = pool.save(dir.path().join("pool"))?;
        let loaded = MutantPool::load(dir.path().join("pool"))?;
        let same = loaded.mutants() == pool.mutants()
            && loaded.records() == pool.records()
            && loaded.manifest().hash() == saved.hash();
        notes.push(format!("pool {}", if same { "ok" } else { "MISMATCH" }));

        // IDX: lossless for 8-bit data.
        let (img, lbl) = (dir.path().join("img"), dir.path().join("lbl"));
        save_idx(&data, &img, &lbl)?;
        let idx = load_idx(&img, &lbl)?.with_num_classes(data.num_classes())?;
        let same = idx.samples() == data.samples() && idx.shape() == data.shape();
        notes.push(format!("idx {}", if same { "ok" } else { "MISMATCH" }));
        Ok(notes)
    };
    let notes = run().map_err(|e| e.to_string())?;
    Ok(outcome(notes.iter().all(|n| n.ends_with("ok")), notes.join(", ")))
}

// ---------------------------------------------------------------- criterion 9

/// A reduced train → attack → mutate → calibrate → detect run, returning the
/// serialized artifacts.
fn pipeline(train: &Dataset, test: &Dataset) -> mutguard::Result<[String; 3]> {
    let net = train_mlp(&train.take(2_000), 3)?;
    let samples = pick_samples(&net, test, 15)?;
    let cfg = MutationConfig::new(Operator::Nai, 0.05, stage_seed(SEED, "mutate"));
    let pool = generate_pool(&net, &test.take(500), &cfg, 40)?;
    let mut sprt = calibrate_threshold(&net, pool.mutants(), &samples.calibration, 1.0)?.config;
    sprt.max_mutants = pool.len();
    let mut batch = batch_detect(&detection_inputs(&samples, 15), &net, &pool, &sprt)?;
    for o in &mut batch.outcomes {
        o.report = o.report.as_ref().map(|r| r.without_timing());
    }
    let reports = serde_json::to_string(&batch).expect("report serialization");
    Ok([net.to_json(), pool.manifest().to_json(), reports])
}

fn determinism(train: &Dataset, test: &Dataset) -> Check {
    let a = pipeline(train, test).map_err(|e| e.to_string())?;
    let b = pipeline(train, test).map_err(|e| e.to_string())?;
    let names = ["model", "pool manifest", "detection reports"];
    let diffs: Vec<&str> = names.iter().zip(a.iter().zip(&b)).filter(|(_, (x, y))| x != y).map(|(n, _)| *n).collect();
    Ok(outcome(
        diffs.is_empty(),
        if diffs.is_empty() {
            format!(
                "two runs byte-identical: model {} B, manifest {} B, reports {} B",
                a[0].len(),
                a[1].len(),
                a[2].len()
            )
        } else {
            format!("differs: {}", diffs.join(", "))
        },
    ))
}
