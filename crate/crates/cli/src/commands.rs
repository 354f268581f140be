use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use lht::data::{self, default_center_scales, Dataset, Split, SyntheticConfig};
use lht::eval::{self, MetricsReport};
use lht::training::{self, History};
use lht::verify::{self, CheckName, CheckRecord};
use lht::{LabelHierarchy, LhtModel, Mode, ModelConfig};

use crate::config::{parse_list, resolve, RunSpec};
use crate::error::{CliError, Result};
use crate::manifest::{require_dir, write, Manifest};
use crate::{GenDataArgs, ReplayArgs, SweepArgs, TrainArgs, TrainFlags, VerifyArgs};

pub const TRAIN_CSV: &str = "train.csv";
pub const TEST_CSV: &str = "test.csv";
pub const HIERARCHY_JSON: &str = "hierarchy.json";
pub const CHECKPOINT_JSON: &str = "checkpoint.json";
pub const HISTORY_JSONL: &str = "history.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const SUMMARY_JSON: &str = "summary.json";
pub const PER_CLASS_CSV: &str = "per_class.csv";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const RUNS_CSV: &str = "runs.csv";
pub const VERIFY_JSONL: &str = "verify.jsonl";

fn to_json(value: &impl Serialize) -> String {
    serde_json::to_string_pretty(value).expect("plain data serializes") + "\n"
}

/// Writes `train.csv`, `test.csv`, `hierarchy.json` and the manifest.
pub fn cmd_gen_data(args: &GenDataArgs) -> Result<PathBuf> {
    require_dir(&args.out)?;
    let hier = match &args.hierarchy {
        Some(path) => LabelHierarchy::load(path)?,
        None => LabelHierarchy::balanced(&parse_list::<usize>(&args.levels, "level size")?)?,
    };
    let scales = match &args.scales {
        Some(s) => parse_list(s, "scale")?,
        None => default_center_scales(hier.num_levels()),
    };
    let cfg = SyntheticConfig {
        dim: args.dim,
        train_per_class: args.train_per_class,
        test_per_class: args.test_per_class,
        noise_sigma: args.sigma,
        center_scales: scales,
        seed: args.seed,
    };
    let (train, test) = data::generate_synthetic(&hier, &cfg)?;
    train.save_csv(args.out.join(TRAIN_CSV))?;
    test.save_csv(args.out.join(TEST_CSV))?;
    hier.save(args.out.join(HIERARCHY_JSON))?;
    let mut manifest = Manifest::new("gen-data", args, vec![args.seed])?;
    if let Some(path) = &args.hierarchy {
        manifest.add_input(path)?;
    }
    manifest.details = serde_json::to_value(&cfg).expect("config serializes");
    manifest.finish(&args.out, &[TRAIN_CSV, TEST_CSV, HIERARCHY_JSON])
}

/// Train and test splits with their hierarchy, plus the files they came from.
#[derive(Clone, Debug)]
pub struct LoadedData {
    pub train: Dataset,
    pub test: Dataset,
    pub hierarchy: LabelHierarchy,
    pub files: Vec<PathBuf>,
}

pub fn load_data(flags: &TrainFlags) -> Result<LoadedData> {
    let pick = |explicit: &Option<PathBuf>, name: &str| -> Result<PathBuf> {
        match (explicit, &flags.data) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(dir)) => Ok(dir.join(name)),
            (None, None) => Err(CliError::Usage(format!(
                "--data or --{} is required",
                name.split('.').next().unwrap_or(name)
            ))),
        }
    };
    let hier_path = pick(&flags.hierarchy, HIERARCHY_JSON)?;
    let train_path = pick(&flags.train, TRAIN_CSV)?;
    let test_path = pick(&flags.test, TEST_CSV)?;
    let hierarchy = LabelHierarchy::load(&hier_path)?;
    let train = data::load_csv(&train_path, &hierarchy, Split::Train)?;
    let test = data::load_csv(&test_path, &hierarchy, Split::Test)?;
    if train.dim != test.dim {
        return Err(lht::Error::DimensionMismatch {
            expected: train.dim,
            found: test.dim,
        }
        .into());
    }
    let mut files = vec![hier_path, train_path, test_path];
    files.extend(flags.config.clone());
    Ok(LoadedData {
        train,
        test,
        hierarchy,
        files,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DroppedLevel {
    pub level: usize,
    /// Accuracy at the removed level from backtracked fine predictions.
    pub backtracked_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub lambda: f64,
    pub seed: u64,
    pub acc: Vec<f64>,
    pub avg_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropped_level: Option<DroppedLevel>,
    pub final_train_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub model: LhtModel,
    pub history: History,
    pub report: MetricsReport,
    pub summary: RunSummary,
}

/// Applies the ablations in `spec`, trains, and evaluates on `test`.
pub fn run_spec(train: &Dataset, test: &Dataset, hier: &LabelHierarchy, spec: &RunSpec) -> Result<RunOutcome> {
    let seed = spec.train.seed;
    let (mut hier_used, mut tr, mut te) = (hier.clone(), train.clone(), test.clone());
    if let Some(s) = spec.random_hierarchy {
        hier_used = hier.randomize(s);
        tr = tr.relabel(&hier_used)?;
        te = te.relabel(&hier_used)?;
    }
    let (full_hier, full_test) = (hier_used.clone(), te.clone());
    if let Some(level) = spec.drop_level {
        hier_used = hier_used.drop_level(level)?;
        tr = tr.drop_level(level)?;
        te = te.drop_level(level)?;
    }
    let config = ModelConfig {
        input_dim: tr.dim,
        hidden: spec.hidden.clone(),
        embed_dim: spec.embed_dim,
        mode: spec.train.mode,
        transition_input: spec.transition_input,
    };
    let mut model = LhtModel::new(config, hier_used, seed)?;
    let history = training::train_monitored(&mut model, &tr, Some(&te), &spec.train)?;
    let predicted = eval::predict_all(&model, &te)?;
    let report = MetricsReport::from_predictions(&te.hierarchy, &te.labels(), &predicted)?;
    let dropped_level = match spec.drop_level {
        Some(level) => {
            let fine: Vec<usize> = predicted.iter().map(|p| p[0]).collect();
            Some(DroppedLevel {
                level,
                backtracked_acc: eval::backtracked_accuracy(&full_hier, &fine, &full_test.labels(), level)?,
            })
        }
        None => None,
    };
    let summary = RunSummary {
        mode: spec.train.mode,
        lambda: spec.train.lambda,
        seed,
        acc: report.acc.clone(),
        avg_acc: report.avg_acc,
        dropped_level,
        final_train_loss: history.records.last().map(|r| r.total),
    };
    Ok(RunOutcome {
        model,
        history,
        report,
        summary,
    })
}

fn per_class_csv(report: &MetricsReport) -> String {
    let mut out = String::from("level,class,count,acc\n");
    for (k, (accs, counts)) in report.per_class_acc.iter().zip(&report.class_counts).enumerate() {
        for (c, (a, n)) in accs.iter().zip(counts).enumerate() {
            writeln!(out, "{},{c},{n},{a}", k + 1).expect("writing to a String");
        }
    }
    out
}

/// Trains one model; writes checkpoint, history, report, summary and manifest.
pub fn cmd_train(args: &TrainArgs) -> Result<RunOutcome> {
    let spec = resolve(&args.flags, args.lambda, args.seed)?;
    require_dir(&args.out)?;
    let data = load_data(&args.flags)?;
    let outcome = run_spec(&data.train, &data.test, &data.hierarchy, &spec)?;
    let out = &args.out;
    outcome.model.save(out.join(CHECKPOINT_JSON))?;
    write(&out.join(HISTORY_JSONL), outcome.history.to_jsonl())?;
    write(&out.join(REPORT_JSON), outcome.report.to_json() + "\n")?;
    write(&out.join(SUMMARY_JSON), to_json(&outcome.summary))?;
    write(&out.join(PER_CLASS_CSV), per_class_csv(&outcome.report))?;
    let mut manifest = Manifest::new("train", args, vec![spec.train.seed])?;
    for f in &data.files {
        manifest.add_input(f)?;
    }
    manifest.details = serde_json::to_value(&spec).expect("spec serializes");
    manifest.finish(
        out,
        &[CHECKPOINT_JSON, HISTORY_JSONL, REPORT_JSON, SUMMARY_JSON, PER_CLASS_CSV],
    )?;
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub runs: usize,
    pub mean_acc: Vec<f64>,
    pub std_acc: Vec<f64>,
    pub mean_avg_acc: f64,
    pub std_avg_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub runs: Vec<RunSummary>,
    pub rows: Vec<SweepRow>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs every (lambda, seed) pair; results are ordered by lambda then seed
/// whatever the worker count.
pub fn sweep(data: &LoadedData, base: &RunSpec, lambdas: &[f64], seeds: &[u64], workers: usize) -> Result<SweepResult> {
    for &l in lambdas {
        lht::losses::total_loss(0.0, 0.0, l)?;
    }
    let jobs: Vec<(usize, usize)> = (0..lambdas.len())
        .flat_map(|li| (0..seeds.len()).map(move |si| (li, si)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Usage(format!("worker pool: {e}")))?;
    let mut results: Vec<((usize, usize), Result<RunSummary>)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(li, si)| {
                let mut spec = base.clone();
                spec.train.lambda = lambdas[li];
                spec.train.seed = seeds[si];
                let r = run_spec(&data.train, &data.test, &data.hierarchy, &spec).map(|o| o.summary);
                ((li, si), r)
            })
            .collect()
    });
    results.sort_by_key(|r| r.0);
    let runs = results.into_iter().map(|(_, r)| r).collect::<Result<Vec<_>>>()?;
    let rows = lambdas
        .iter()
        .enumerate()
        .map(|(li, &lambda)| {
            let group = &runs[li * seeds.len()..(li + 1) * seeds.len()];
            let levels = group.first().map(|r| r.acc.len()).unwrap_or(0);
            let (mut mean_acc, mut std_acc) = (Vec::new(), Vec::new());
            for k in 0..levels {
                let (m, s) = mean_std(&group.iter().map(|r| r.acc[k]).collect::<Vec<_>>());
                mean_acc.push(m);
                std_acc.push(s);
            }
            let (mean_avg_acc, std_avg_acc) = mean_std(&group.iter().map(|r| r.avg_acc).collect::<Vec<_>>());
            SweepRow {
                lambda,
                runs: group.len(),
                mean_acc,
                std_acc,
                mean_avg_acc,
                std_avg_acc,
            }
        })
        .collect();
    Ok(SweepResult { runs, rows })
}

fn sweep_csv(rows: &[SweepRow]) -> String {
    let levels = rows.first().map(|r| r.mean_acc.len()).unwrap_or(0);
    let mut out = String::from("lambda,runs");
    for k in 1..=levels {
        write!(out, ",mean_acc_{k},std_acc_{k}").expect("writing to a String");
    }
    out.push_str(",mean_avg_acc,std_avg_acc\n");
    for r in rows {
        write!(out, "{},{}", r.lambda, r.runs).expect("writing to a String");
        for (m, s) in r.mean_acc.iter().zip(&r.std_acc) {
            write!(out, ",{m},{s}").expect("writing to a String");
        }
        writeln!(out, ",{},{}", r.mean_avg_acc, r.std_avg_acc).expect("writing to a String");
    }
    out
}

fn runs_csv(runs: &[RunSummary]) -> String {
    let levels = runs.first().map(|r| r.acc.len()).unwrap_or(0);
    let mut out = String::from("lambda,seed");
    for k in 1..=levels {
        write!(out, ",acc_{k}").expect("writing to a String");
    }
    out.push_str(",avg_acc\n");
    for r in runs {
        write!(out, "{},{}", r.lambda, r.seed).expect("writing to a String");
        for a in &r.acc {
            write!(out, ",{a}").expect("writing to a String");
        }
        writeln!(out, ",{}", r.avg_acc).expect("writing to a String");
    }
    out
}

pub fn cmd_sweep_lambda(args: &SweepArgs) -> Result<SweepResult> {
    let lambdas: Vec<f64> = parse_list(&args.lambdas, "lambda")?;
    let seeds: Vec<u64> = parse_list(&args.seeds, "seed")?;
    if lambdas.is_empty() || seeds.is_empty() {
        return Err(CliError::Usage("empty lambda or seed list".into()));
    }
    let mut flags = args.flags.clone();
    if flags.mode.is_none() {
        flags.mode = Some(Mode::LhtF2c);
    }
    let base = resolve(&flags, None, None)?;
    require_dir(&args.out)?;
    let data = load_data(&args.flags)?;
    let result = sweep(&data, &base, &lambdas, &seeds, args.workers)?;
    write(&args.out.join(SWEEP_CSV), sweep_csv(&result.rows))?;
    write(&args.out.join(RUNS_CSV), runs_csv(&result.runs))?;
    let mut manifest = Manifest::new("sweep-lambda", args, seeds.clone())?;
    for f in &data.files {
        manifest.add_input(f)?;
    }
    manifest.details = serde_json::json!({ "settings": base, "runs": result.runs });
    manifest.finish(&args.out, &[SWEEP_CSV, RUNS_CSV])?;
    Ok(result)
}

/// Runs the selected checks, printing one JSON record per line.
pub fn cmd_verify(args: &VerifyArgs) -> Result<Vec<CheckRecord>> {
    if let Some(out) = &args.out {
        require_dir(out)?;
    }
    let checks: Vec<CheckName> = if args.only.is_empty() {
        CheckName::ALL.to_vec()
    } else {
        args.only.clone()
    };
    let mut records = Vec::new();
    for name in checks {
        for r in verify::run_check(name, args.seed)? {
            println!("{}", serde_json::to_string(&r).expect("records serialize"));
            records.push(r);
        }
    }
    if let Some(out) = &args.out {
        let lines: String = records
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect();
        write(&out.join(VERIFY_JSONL), lines)?;
        Manifest::new("verify", args, vec![args.seed])?.finish(out, &[VERIFY_JSONL])?;
    }
    let failed = records.iter().filter(|r| !r.pass).count();
    if failed > 0 {
        return Err(CliError::Verification {
            failed,
            total: records.len(),
        });
    }
    Ok(records)
}

fn options<T: for<'de> Deserialize<'de>>(manifest: &Manifest) -> Result<T> {
    serde_json::from_value(manifest.options.clone()).map_err(|e| CliError::Manifest(e.to_string()))
}

/// Re-runs a recorded command with its recorded flags into `args.out`.
pub fn cmd_replay(args: &ReplayArgs) -> Result<()> {
    let manifest = Manifest::load(&args.manifest)?;
    manifest.check_inputs()?;
    replay_into(&manifest, &args.out)
}

pub fn replay_into(manifest: &Manifest, out: &Path) -> Result<()> {
    match manifest.command.as_str() {
        "gen-data" => {
            let mut a: GenDataArgs = options(manifest)?;
            a.out = out.to_path_buf();
            cmd_gen_data(&a).map(|_| ())
        }
        "train" => {
            let mut a: TrainArgs = options(manifest)?;
            a.out = out.to_path_buf();
            cmd_train(&a).map(|_| ())
        }
        "sweep-lambda" => {
            let mut a: SweepArgs = options(manifest)?;
            a.out = out.to_path_buf();
            cmd_sweep_lambda(&a).map(|_| ())
        }
        "verify" => {
            let mut a: VerifyArgs = options(manifest)?;
            a.out = Some(out.to_path_buf());
            cmd_verify(&a).map(|_| ())
        }
        other => Err(CliError::Manifest(format!("unknown command {other:?}"))),
    }
}
