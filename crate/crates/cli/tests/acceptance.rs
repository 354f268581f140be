//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so every criterion reports even when an earlier one fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use lht::data::{generate_synthetic, SyntheticConfig};
use lht::diff;
use lht::model::{LhtModel, Mode, ModelConfig};
use lht::verify::{self, Primitive};
use lht::{losses, LabelHierarchy};
use lht_cli::commands::{cmd_gen_data, cmd_train, run_spec, RunSummary, CHECKPOINT_JSON, REPORT_JSON};
use lht_cli::config::resolve;
use lht_cli::manifest::{Manifest, MANIFEST_FILE};
use lht_cli::{GenDataArgs, TrainArgs, TrainFlags};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

type Criterion = (&'static str, fn() -> Verdict);

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict {
            pass,
            detail: detail.into(),
        }
    }
}

fn preset() -> LabelHierarchy {
    LabelHierarchy::balanced(&[8, 4, 2]).expect("preset hierarchy")
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

/// Benchmark run for one seed; the seed drives the data draw and the model.
fn benchmark_run(mode: Mode, lambda: f64, seed: u64, random_hierarchy: Option<u64>) -> RunSummary {
    let hier = preset();
    let (train, test) = generate_synthetic(&hier, &SyntheticConfig::benchmark(seed)).expect("benchmark data");
    let flags = TrainFlags {
        mode: Some(mode),
        random_hierarchy,
        ..TrainFlags::default()
    };
    let spec = resolve(&flags, Some(lambda), Some(seed)).expect("valid spec");
    run_spec(&train, &test, &hier, &spec).expect("run succeeds").summary
}

/// Per-level and average accuracy means over `SEEDS`.
fn seed_means(mode: Mode, lambda: f64, random_hierarchy: bool) -> (Vec<f64>, f64) {
    let runs: Vec<RunSummary> = SEEDS
        .par_iter()
        .map(|&s| benchmark_run(mode, lambda, s, random_hierarchy.then_some(1000 + s)))
        .collect();
    let n = runs.len() as f64;
    let levels = runs[0].acc.len();
    let acc = (0..levels)
        .map(|k| runs.iter().map(|r| r.acc[k]).sum::<f64>() / n)
        .collect();
    (acc, runs.iter().map(|r| r.avg_acc).sum::<f64>() / n)
}

fn fmt_acc(acc: &[f64]) -> String {
    acc.iter().map(|a| format!("{:.4}", a)).collect::<Vec<_>>().join("/")
}

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let records: Vec<_> = (0..50u64)
        .into_par_iter()
        .map(|s| verify::grad_check_suite(s).expect("grad suite runs"))
        .flatten()
        .collect();
    let elapsed = start.elapsed();
    let worst = records.iter().map(|r| r.measured).fold(0.0, f64::max);
    let failed = records.iter().filter(|r| !r.pass).count();
    let expected = 50 * (Primitive::ALL.len() + Mode::ALL.len());
    Verdict::new(
        failed == 0 && records.len() == expected && elapsed < Duration::from_secs(60),
        format!(
            "{} checks over 50 seeds, {failed} failed, max rel err {worst:.2e}, {}",
            records.len(),
            secs(elapsed)
        ),
    )
}

fn stochasticity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let models: Vec<LhtModel> = Mode::ALL
        .iter()
        .map(|&m| LhtModel::new(ModelConfig::new(16, m), preset(), 3).expect("model"))
        .collect();
    let mut worst: f64 = 0.0;
    let mut negative = false;
    for _ in 0..1000 {
        let scale = rng.random_range(0.1..20.0);
        let x: Vec<f64> = (0..16).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        for model in &models {
            let chain = model.forward(&x).expect("forward");
            for p in &chain.probs {
                worst = worst.max((p.iter().sum::<f64>() - 1.0).abs());
                negative |= p.iter().any(|&v| v < -1e-6);
            }
            for t in &chain.transitions {
                for c in 0..t.cols() {
                    let col = t.column(c);
                    worst = worst.max((col.iter().sum::<f64>() - 1.0).abs());
                    negative |= col.iter().any(|&v| v < -1e-6);
                }
            }
        }
    }
    Verdict::new(
        worst < 1e-6 && !negative,
        format!("1000 inputs x {} modes, max |sum - 1| {worst:.2e}", Mode::ALL.len()),
    )
}

fn theorem1() -> Verdict {
    let records = verify::theorem1_records(&preset(), 0).expect("oracle runs");
    let failed: Vec<&str> = records.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();
    let detail = records
        .iter()
        .map(|r| format!("{}={:.2e}", r.name.trim_start_matches("theorem1/"), r.measured))
        .collect::<Vec<_>>()
        .join(", ");
    Verdict::new(failed.is_empty(), format!("{detail}; failed: {failed:?}"))
}

fn appendix_a() -> Verdict {
    let worst = verify::appendix_a_check(&preset(), 1000, 0).expect("cases run");
    Verdict::new(worst < 1e-10, format!("1000 cases, max |NLL - sum CE| {worst:.2e}"))
}

fn lemma1() -> Verdict {
    let start = Instant::now();
    let (report, _) = verify::lemma1_run(verify::LEMMA1_LAMBDA, 0, verify::LEMMA1_FAST_STEPS).expect("run");
    let elapsed = start.elapsed();
    Verdict::new(
        report.pass() && elapsed < Duration::from_secs(180),
        format!(
            "lambda 1e4: max column dev {:.4} (tol {}), max coarse CE dev {:.4} (tol {}), {}",
            report.max_column_deviation(),
            report.column_tol,
            report.max_ce_deviation(),
            report.ce_tol,
            secs(elapsed)
        ),
    )
}

fn confusion_bounds() -> Verdict {
    let lower = -(4f64.ln() + 2f64.ln());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut in_bounds = true;
    let mut lowest: f64 = 0.0;
    for seed in 0..20 {
        let model = LhtModel::new(ModelConfig::new(16, Mode::LhtF2c), preset(), seed).expect("model");
        for _ in 0..50 {
            let scale = rng.random_range(0.1..30.0);
            let x: Vec<f64> = (0..16).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
            let c = losses::confusion_loss(&[model.forward(&x).expect("forward")]).expect("conf");
            lowest = lowest.min(c);
            in_bounds &= c <= 0.0 && c >= lower - 1e-12;
        }
    }

    // zero transition logits give uniform columns
    let mut model = LhtModel::new(ModelConfig::new(16, Mode::LhtF2c), preset(), 5).expect("model");
    for head in model.transition_heads_mut() {
        head.weight.data_mut().fill(0.0);
        head.bias.data_mut().fill(0.0);
    }
    let x: Vec<f64> = (0..16).map(|i| i as f64 - 7.5).collect();
    let zero = losses::confusion_loss(&[model.forward(&x).expect("forward")]).expect("conf");

    // saturated one-hot columns
    for (head, (rows, cols)) in model.transition_heads_mut().iter_mut().zip([(4, 8), (2, 4)]) {
        let bias = head.bias.data_mut();
        assert_eq!(bias.len(), rows * cols);
        for c in 0..cols {
            bias[(c % rows) * cols + c] = 60.0;
        }
    }
    let saturated = losses::confusion_loss(&[model.forward(&x).expect("forward")]).expect("conf");
    let naive: f64 = (2..=3)
        .map(|l| diff::column_neg_entropy_mean(&preset().naive_transition(l).expect("naive").matrix).expect("conf"))
        .sum();
    let uniform_ok = (zero - lower).abs() < 1e-9;
    let onehot_ok = saturated.abs() < 1e-9 && naive.abs() < 1e-9;
    Verdict::new(
        in_bounds && uniform_ok && onehot_ok,
        format!(
            "1000 inputs in [{lower:.4}, 0] (lowest {lowest:.4}); zero logits {zero:.12}; saturated {saturated:.1e}"
        ),
    )
}

fn mode_ordering() -> Verdict {
    let start = Instant::now();
    let modes = [Mode::LhtF2c, Mode::LhtC2f, Mode::VanillaSingle, Mode::Vanilla];
    let means: Vec<(Vec<f64>, f64)> = modes.iter().map(|&m| seed_means(m, 2.0, false)).collect();
    let elapsed = start.elapsed();
    let avg: Vec<f64> = means.iter().map(|m| m.1).collect();
    let ordered = avg.windows(2).all(|w| w[0] >= w[1]);
    let coarse_gain = 100.0 * (means[0].0[2] - means[2].0[2]);
    let detail = modes
        .iter()
        .zip(&means)
        .map(|(m, (acc, a))| format!("{m} {a:.4} ({})", fmt_acc(acc)))
        .collect::<Vec<_>>()
        .join("; ");
    Verdict::new(
        ordered && coarse_gain >= 0.5 && elapsed < Duration::from_secs(900),
        format!(
            "{detail}; ordered {ordered}; f2c coarse gain over vanilla_single {coarse_gain:.2} pts; {}",
            secs(elapsed)
        ),
    )
}

fn lambda_sweep() -> Verdict {
    let (acc0, avg0) = seed_means(Mode::LhtF2c, 0.0, false);
    let (acc2, avg2) = seed_means(Mode::LhtF2c, 2.0, false);
    let (_, avg100) = seed_means(Mode::LhtF2c, 100.0, false);
    let drops_everywhere = acc0.iter().zip(&acc2).all(|(a0, a2)| a0 < a2);
    Verdict::new(
        avg2 >= avg0 && avg100 <= avg2 && drops_everywhere,
        format!(
            "avg lambda 0/2/100: {avg0:.4}/{avg2:.4}/{avg100:.4}; per level lambda 0 {} vs lambda 2 {}; drop at all levels {drops_everywhere}",
            fmt_acc(&acc0),
            fmt_acc(&acc2)
        ),
    )
}

fn random_hierarchy() -> Verdict {
    let (truth, _) = seed_means(Mode::LhtF2c, 2.0, false);
    let (random, _) = seed_means(Mode::LhtF2c, 2.0, true);
    let fine_change = 100.0 * (random[0] - truth[0]).abs();
    let coarse_drops: Vec<f64> = (1..truth.len()).map(|k| 100.0 * (truth[k] - random[k])).collect();
    Verdict::new(
        fine_change < 2.0 && coarse_drops.iter().all(|&d| d >= 5.0),
        format!(
            "true {} vs random {}; fine change {fine_change:.2} pts; coarse drops {:?} pts",
            fmt_acc(&truth),
            fmt_acc(&random),
            coarse_drops.iter().map(|d| format!("{d:.2}")).collect::<Vec<_>>()
        ),
    )
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().expect("tempdir");
    let data = dir.path().join("data");
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    for d in [&data, &first, &second] {
        std::fs::create_dir(d).expect("mkdir");
    }
    cmd_gen_data(&GenDataArgs {
        hierarchy: None,
        levels: "8,4,2".into(),
        dim: 16,
        train_per_class: 100,
        test_per_class: 100,
        sigma: lht::data::DEFAULT_NOISE_SIGMA,
        scales: None,
        seed: 0,
        out: data.clone(),
    })
    .expect("gen-data");
    cmd_train(&TrainArgs {
        flags: TrainFlags {
            data: Some(data),
            mode: Some(Mode::LhtF2c),
            ..TrainFlags::default()
        },
        lambda: Some(2.0),
        seed: Some(3),
        out: first.clone(),
    })
    .expect("train");
    let manifest = Manifest::load(&first.join(MANIFEST_FILE)).expect("manifest");
    lht_cli::commands::replay_into(&manifest, &second).expect("replay");
    let same =
        |name: &str| std::fs::read(first.join(name)).expect("read") == std::fs::read(second.join(name)).expect("read");
    let (ckpt, report) = (same(CHECKPOINT_JSON), same(REPORT_JSON));
    let replayed = Manifest::load(&second.join(MANIFEST_FILE)).expect("manifest");
    let digests = manifest
        .outputs
        .iter()
        .zip(&replayed.outputs)
        .all(|(a, b)| a.sha256 == b.sha256);
    Verdict::new(
        ckpt && report && digests,
        format!("checkpoint identical {ckpt}, report identical {report}, all output digests match {digests}"),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("1 gradient correctness", gradient_correctness),
        ("2 column stochasticity and simplex", stochasticity),
        ("3 naive-transition reduction", theorem1),
        ("4 NLL equals summed CE", appendix_a),
        ("5 large-lambda uniform limit", lemma1),
        ("6 confusion-loss bounds", confusion_bounds),
        ("7 mode ordering on the benchmark", mode_ordering),
        ("8 lambda sweep shape", lambda_sweep),
        ("9 random-hierarchy ablation", random_hierarchy),
        ("10 determinism via replay", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let v = check();
        println!(
            "{} criterion {name}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        failed += usize::from(!v.pass);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
