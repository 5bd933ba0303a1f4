//! End-to-end run on the MNIST subset in `data/mnist`: train, attack,
//! build a mutant pool, measure LCR separation and run the detector.
//!
//! ```text
//! cargo run --release -p mutguard-core --example desk_mnist -- [operator] [rate]
//! ```

use std::path::PathBuf;
use std::time::Instant;

use mutguard::analysis::{lcr, lcr_distance, lcr_population, roc, SampleKind};
use mutguard::attacks::{fgsm, jsma, AttackConfig};
use mutguard::data::{load_idx, shuffled, Dataset};
use mutguard::detector::{batch_detect, calibrate_threshold, LabeledInput};
use mutguard::mutation::{generate_pool, MutationConfig, Operator};
use mutguard::nn::{train_sgd, Network, TrainConfig};
use mutguard::seed::stage_seed;

const SEED: u64 = 2018;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let operator: Operator = args.next().as_deref().unwrap_or("nai").parse()?;
    let rate: f64 = args.next().as_deref().unwrap_or("0.05").parse()?;

    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let subset = |prefix: &str, len: usize, stage: &str| -> Result<Dataset, mutguard::Error> {
        let full = load_idx(
            root.join(format!("{prefix}-images-idx3-ubyte")),
            root.join(format!("{prefix}-labels-idx1-ubyte")),
        )?
        .with_num_classes(10)?;
        Ok(shuffled(&full, stage_seed(SEED, stage)).take(len))
    };
    let train = subset("train", 10_000, "train-subset")?;
    let test = subset("t10k", 2_000, "test-subset")?;
    println!("train {} / test {}", train.len(), test.len());

    let t = Instant::now();
    let init = Network::mlp(&[784, 128, 10], stage_seed(SEED, "init"))?;
    let cfg = TrainConfig {
        epochs: 20,
        batch_size: 32,
        learning_rate: 0.1,
        seed: stage_seed(SEED, "train"),
    };
    let (net, log) = train_sgd(&init, &train, Some(&test), &cfg)?;
    for e in &log {
        println!(
            "epoch {:>2} loss {:.4} train {:.4} test {:.4}",
            e.epoch,
            e.mean_loss,
            e.train_accuracy,
            e.test_accuracy.unwrap_or(f64::NAN)
        );
    }
    println!("training took {:.1?}", t.elapsed());

    let correct: Vec<&mutguard::data::Sample> = test
        .samples()
        .iter()
        .filter(|s| net.predict_label(&s.features).map(|p| p == s.label).unwrap_or(false))
        .collect();
    let normals: Vec<Vec<f64>> = correct[..200].iter().map(|s| s.features.clone()).collect();
    let calibration: Vec<Vec<f64>> = correct[200..400].iter().map(|s| s.features.clone()).collect();

    let t = Instant::now();
    let attack = AttackConfig::default();
    let mut fgsm_adv = Vec::new();
    let mut jsma_adv = Vec::new();
    let mut attempts = (0, 0);
    for s in &correct[400..] {
        if fgsm_adv.len() < 200 {
            attempts.0 += 1;
            let a = fgsm(&net, &s.features, s.label, &attack)?;
            if a.success {
                fgsm_adv.push(a.perturbed);
            }
        }
        if jsma_adv.len() < 200 {
            attempts.1 += 1;
            let a = jsma(&net, &s.features, s.label, &attack)?;
            if a.success {
                jsma_adv.push(a.perturbed);
            }
        }
        if fgsm_adv.len() == 200 && jsma_adv.len() == 200 {
            break;
        }
    }
    println!(
        "fgsm {}/{} jsma {}/{} ({:.1?})",
        fgsm_adv.len(),
        attempts.0,
        jsma_adv.len(),
        attempts.1,
        t.elapsed()
    );

    let t = Instant::now();
    let mcfg = MutationConfig::new(operator, rate, stage_seed(SEED, "mutate"));
    let pool = generate_pool(&net, &test, &mcfg, 500)?;
    println!(
        "pool {operator} γ={rate}: 500 admitted from {} attempts, origin acc {:.4} ({:.1?})",
        pool.attempts_made(),
        pool.origin_accuracy(),
        t.elapsed()
    );

    let t = Instant::now();
    let nor = lcr_population(&normals, &net, pool.mutants())?;
    let adv_f = lcr_population(&fgsm_adv, &net, pool.mutants())?;
    let adv_j = lcr_population(&jsma_adv, &net, pool.mutants())?;
    println!("normal LCR {:.2}±{:.2}%", 100.0 * nor.mean, 100.0 * nor.ci_half_width);
    for (name, est) in [("fgsm", &adv_f), ("jsma", &adv_j)] {
        let auc = roc(&est.per_sample_lcr, &nor.per_sample_lcr)?.auroc;
        println!(
            "{name} LCR {:.2}±{:.2}%  d_lcr {:.2}  AUROC {:.4}",
            100.0 * est.mean,
            100.0 * est.ci_half_width,
            lcr_distance(est, &nor).unwrap_or(f64::INFINITY),
            auc
        );
    }
    println!("LCR pass took {:.1?}", t.elapsed());

    let cal = calibrate_threshold(&net, pool.mutants(), &calibration, 1.0)?;
    let mut sprt = cal.config;
    sprt.max_mutants = pool.len();
    println!(
        "calibrated threshold {:.4} indifference {:.5} (normal upper bound {:.4})",
        sprt.threshold, sprt.indifference, cal.normal_upper_bound
    );
    let mut inputs: Vec<LabeledInput> = fgsm_adv[..100]
        .iter()
        .chain(&jsma_adv[..100])
        .map(|x| LabeledInput {
            kind: SampleKind::Adversarial,
            features: x.clone(),
        })
        .collect();
    inputs.extend(normals.iter().map(|x| LabeledInput {
        kind: SampleKind::Normal,
        features: x.clone(),
    }));
    let t = Instant::now();
    let batch = batch_detect(&inputs, &net, &pool, &sprt)?;
    let s = &batch.summary;
    println!(
        "detection: adversarial {:.3} normal {:.3} mean mutants {:.1} (adv {:.1}, nor {:.1}) fallbacks {} failed {} ({:.1?})",
        s.accuracy.adversarial_accuracy().unwrap_or(0.0),
        s.accuracy.normal_accuracy().unwrap_or(0.0),
        s.mean_mutants_used,
        s.mean_mutants_adversarial,
        s.mean_mutants_normal,
        s.fallbacks,
        s.failed,
        t.elapsed()
    );

    let mut agree = 0;
    let mut outside = 0;
    for (input, outcome) in inputs.iter().zip(&batch.outcomes) {
        let fixed = lcr(&input.features, &net, pool.mutants())?;
        if (fixed - sprt.threshold).abs() < sprt.indifference {
            continue;
        }
        outside += 1;
        let fixed_adv = fixed > sprt.threshold;
        if let Some(r) = &outcome.report {
            let sprt_adv = r.resolved_verdict() == mutguard::detector::Verdict::Adversarial;
            agree += usize::from(sprt_adv == fixed_adv);
        }
    }
    println!("oracle agreement {agree}/{outside}");
    Ok(())
}
