//! Orchestration of train / compare / gen-data / metrics, with the fixed
//! exit-code map: 0 ok, 2 config, 3 training fault, 4 I/O.

use crate::config::{DataSource, Method, RunConfig, TrainSection, Variant};
use crate::report::{
    aggregate, emit_histogram_json, emit_metrics_csv, write_json, CompareReport, EpochSeries,
    RunReport, SeedResult, VariantReport, WinCount,
};
use companion_core::data::{generate_clusters, load_csv, load_idx, save_csv, DatasetSplit};
use companion_core::dcl::{self, DclConfig, EpochLog};
use companion_core::dcp;
use companion_core::error::Error as CoreError;
use companion_core::metrics::{accuracy, dataset_means, NonTargetHistogram};
use companion_core::model::{MlpSpec, ParamSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_TRAINING: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// A failed command: what to print and which code to exit with.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_IO,
            message: message.into(),
        }
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        let code = match &e {
            CoreError::Training { .. } => EXIT_TRAINING,
            CoreError::Io(_) | CoreError::Parse { .. } | CoreError::Format(_) => EXIT_IO,
            _ => EXIT_CONFIG,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

/// Synthetic data is regenerated per seed; file-backed data is loaded
/// once and shared.
enum ResolvedData {
    PerSeed(companion_core::data::SyntheticSpec),
    Shared(DatasetSplit, DatasetSplit),
}

impl ResolvedData {
    fn for_seed(&self, seed: u64) -> Result<(DatasetSplit, DatasetSplit), Failure> {
        match self {
            ResolvedData::PerSeed(spec) => Ok(generate_clusters(spec, seed)?),
            ResolvedData::Shared(train, test) => Ok((train.clone(), test.clone())),
        }
    }
}

fn resolve_data(source: &DataSource) -> Result<ResolvedData, Failure> {
    match source {
        DataSource::Synthetic(spec) => Ok(ResolvedData::PerSeed(spec.clone())),
        DataSource::Csv(csv) => {
            let mut train = load_csv(&csv.train)?;
            let mut test = load_csv(&csv.test)?;
            let k = train.num_classes.max(test.num_classes);
            train.num_classes = k;
            test.num_classes = k;
            if train.input_dim != test.input_dim {
                return Err(Failure::config(format!(
                    "csv train has {} features, test has {}",
                    train.input_dim, test.input_dim
                )));
            }
            Ok(ResolvedData::Shared(train, test))
        }
        DataSource::Idx(idx) => {
            let mut train = load_idx(&idx.train_images, &idx.train_labels, idx.normalize)?;
            let mut test = load_idx(&idx.test_images, &idx.test_labels, idx.normalize)?;
            let k = train.num_classes.max(test.num_classes);
            train.num_classes = k;
            test.num_classes = k;
            if train.input_dim != test.input_dim {
                return Err(Failure::config(format!(
                    "idx train images are {} pixels, test images {}",
                    train.input_dim, test.input_dim
                )));
            }
            Ok(ResolvedData::Shared(train, test))
        }
    }
}

struct SeedRun {
    result: SeedResult,
    logs: Vec<EpochLog>,
    theta: ParamSet,
    omega: Option<ParamSet>,
    bank: Option<dcp::PrototypeBank>,
}

fn run_seed(
    method: Method,
    section: &TrainSection,
    model: &MlpSpec,
    companion: &MlpSpec,
    data: &ResolvedData,
    seed: u64,
) -> Result<SeedRun, Failure> {
    let (train_split, test_split) = data.for_seed(seed)?;
    let mut config: DclConfig = section.resolve(seed).map_err(Failure::config)?;
    if method == Method::Ce {
        config = config.ce_variant();
    }

    let (theta, omega, bank, logs) = match method {
        Method::Ce | Method::Dcl => {
            let out = dcl::train(&config, model, companion, &train_split, &test_split)?;
            let omega = (method == Method::Dcl).then_some(out.omega);
            (out.theta, omega, None, out.logs)
        }
        Method::Dcp => {
            let out = dcp::dcp_train(&config, model, &train_split, &test_split)?;
            (out.theta, None, Some(out.bank), out.logs)
        }
    };

    let (train_x, train_y) = train_split.full_batch();
    let (test_x, test_y) = test_split.full_batch();
    let final_train_acc = accuracy(&theta.forward(&train_x)?, &train_y)?;
    let final_test_acc = accuracy(&theta.forward(&test_x)?, &test_y)?;

    Ok(SeedRun {
        result: SeedResult {
            seed,
            final_train_acc,
            final_test_acc,
            epochs: EpochSeries::from_logs(&logs),
        },
        logs,
        theta,
        omega,
        bank,
    })
}

/// Run every seed of one variant, seeds in parallel, and write the per-
/// seed artifacts under `dir/seed_<s>/`.
fn run_variant(
    method: Method,
    section: &TrainSection,
    model: &MlpSpec,
    companion: &MlpSpec,
    data: &ResolvedData,
    seeds: &[u64],
    dir: &Path,
) -> Result<Vec<SeedResult>, Failure> {
    let runs: Vec<Result<SeedRun, Failure>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                scope.spawn(move || run_seed(method, section, model, companion, data, seed))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("seed thread")).collect()
    });

    let mut results = Vec::with_capacity(seeds.len());
    for run in runs {
        let run = run?;
        let seed_dir = dir.join(format!("seed_{}", run.result.seed));
        std::fs::create_dir_all(&seed_dir).map_err(|e| Failure::io(e.to_string()))?;
        emit_metrics_csv(&run.logs, &seed_dir.join("metrics.csv"))?;
        run.theta.save(&seed_dir.join("theta.ckpt"))?;
        if let Some(omega) = &run.omega {
            omega.save(&seed_dir.join("omega.ckpt"))?;
        }
        if let Some(bank) = &run.bank {
            bank.save(&seed_dir.join("bank.ckpt"))?;
        }
        if let Some(last) = run.logs.last() {
            emit_histogram_json(last, &seed_dir.join("hist.json"))?;
        }
        log::info!(
            "{} seed {}: train {:.4} test {:.4}",
            method.name(),
            run.result.seed,
            run.result.final_train_acc,
            run.result.final_test_acc
        );
        results.push(run.result);
    }
    Ok(results)
}

fn apply_seed_offset(seeds: &[u64], offset: u64) -> Vec<u64> {
    seeds.iter().map(|s| s.wrapping_add(offset)).collect()
}

/// `train`: one method, every seed; writes metrics.csv per seed and one
/// report.json.
pub fn cmd_train(
    config_path: &Path,
    out_override: Option<PathBuf>,
    seed_offset: u64,
) -> Result<(), Failure> {
    let started = Instant::now();
    let mut config = RunConfig::load(config_path).map_err(Failure::config)?;
    let method = config.validate_for_run().map_err(Failure::config)?;
    if let Some(out) = out_override {
        config.out_dir = out;
    }
    let seeds = apply_seed_offset(&config.seeds, seed_offset);
    let companion = config.companion_model.clone().unwrap_or_else(|| config.model.clone());
    let data = resolve_data(&config.data)?;

    std::fs::create_dir_all(&config.out_dir).map_err(|e| Failure::io(e.to_string()))?;
    let per_seed = run_variant(
        method,
        &config.train,
        &config.model,
        &companion,
        &data,
        &seeds,
        &config.out_dir,
    )?;

    let summary = aggregate(&per_seed);
    let resolved = config
        .train
        .resolve(seeds[0])
        .map_err(Failure::config)?;
    let resolved = if method == Method::Ce {
        resolved.ce_variant()
    } else {
        resolved
    };
    let mut echo = serde_json::to_value(&config).expect("config serializes");
    echo["seeds"] = serde_json::to_value(&seeds).expect("seeds serialize");
    echo["resolved_train"] = serde_json::to_value(&resolved).expect("train serializes");
    let report = RunReport {
        kind: "run",
        method: method.name().to_string(),
        config: echo,
        per_seed,
        summary,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    write_json(&report, &config.out_dir.join("report.json"))?;
    Ok(())
}

/// `compare`: every variant on identical seeds, identical initialization
/// draws, identical batch sequences; emits the comparison report.
pub fn cmd_compare(config_path: &Path) -> Result<(), Failure> {
    let started = Instant::now();
    let config = RunConfig::load(config_path).map_err(Failure::config)?;
    let variants: Vec<Variant> = config.expand_variants().map_err(Failure::config)?;
    let companion = config.companion_model.clone().unwrap_or_else(|| config.model.clone());
    let data = resolve_data(&config.data)?;

    std::fs::create_dir_all(&config.out_dir).map_err(|e| Failure::io(e.to_string()))?;
    let mut reports = Vec::with_capacity(variants.len());
    for variant in &variants {
        let dir = config.out_dir.join(&variant.label);
        std::fs::create_dir_all(&dir).map_err(|e| Failure::io(e.to_string()))?;
        let per_seed = run_variant(
            variant.method,
            &variant.train,
            &config.model,
            &companion,
            &data,
            &config.seeds,
            &dir,
        )?;
        let summary = aggregate(&per_seed);
        let mut resolved = variant
            .train
            .resolve(config.seeds[0])
            .map_err(Failure::config)?;
        if variant.method == Method::Ce {
            resolved = resolved.ce_variant();
        }
        reports.push(VariantReport {
            label: variant.label.clone(),
            method: variant.method.name().to_string(),
            train: serde_json::to_value(&resolved).expect("train serializes"),
            per_seed,
            summary,
        });
    }

    let baseline = reports[0].label.clone();
    let win_counts = reports
        .iter()
        .skip(1)
        .map(|variant| {
            let wins = variant
                .per_seed
                .iter()
                .zip(&reports[0].per_seed)
                .filter(|(v, b)| v.final_test_acc > b.final_test_acc)
                .count() as u32;
            WinCount {
                label: variant.label.clone(),
                wins_vs_baseline: wins,
            }
        })
        .collect();

    let report = CompareReport {
        kind: "compare",
        config: serde_json::to_value(&config).expect("config serializes"),
        seeds: config.seeds.clone(),
        baseline,
        variants: reports,
        win_counts,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    write_json(&report, &config.out_dir.join("report.json"))?;

    // human-readable summary table
    println!("variant                          mean_test_acc  stderr");
    for v in &report.variants {
        println!(
            "{:<32} {:<14} {}",
            v.label,
            format!("{:.4}", v.summary.mean_test_acc),
            v.summary
                .stderr_test_acc
                .map(|s| format!("{s:.4}"))
                .unwrap_or_else(|| "-".into()),
        );
    }
    for w in &report.win_counts {
        println!(
            "{} beats {} on {}/{} seeds",
            w.label,
            report.baseline,
            w.wins_vs_baseline,
            report.seeds.len()
        );
    }
    Ok(())
}

/// `gen-data`: materialize the synthetic source as CSV files. The train
/// split goes to `out`; the test split lands next to it with a `.test.csv`
/// suffix.
pub fn cmd_gen_data(config_path: &Path, out: &Path) -> Result<(), Failure> {
    let config = RunConfig::load(config_path).map_err(Failure::config)?;
    let spec = match &config.data {
        DataSource::Synthetic(spec) => spec,
        _ => return Err(Failure::config("gen-data needs a synthetic data source")),
    };
    let seed = *config.seeds.first().ok_or_else(|| Failure::config("seeds is empty"))?;
    let (train, test) = generate_clusters(spec, seed)?;
    save_csv(&train, out)?;
    let test_path = sibling_test_path(out);
    save_csv(&test, &test_path)?;
    println!("wrote {} ({} samples)", out.display(), train.len());
    println!("wrote {} ({} samples)", test_path.display(), test.len());
    Ok(())
}

fn sibling_test_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into());
    out.with_file_name(format!("{stem}.test.csv"))
}

/// `metrics`: recompute accuracy and the non-target diagnostics for a
/// checkpoint on a CSV dataset; JSON on stdout.
pub fn cmd_metrics(
    checkpoint: &Path,
    data: &Path,
    hist_out: Option<PathBuf>,
) -> Result<(), Failure> {
    let params = ParamSet::load(checkpoint)?;
    let mut split = load_csv(data)?;
    if split.num_classes < params.spec().num_classes {
        split.num_classes = params.spec().num_classes;
    }
    if split.input_dim != params.spec().input_dim {
        return Err(Failure::config(format!(
            "dataset width {} does not match checkpoint input_dim {}",
            split.input_dim,
            params.spec().input_dim
        )));
    }
    if split.num_classes != params.spec().num_classes {
        return Err(Failure::config(format!(
            "dataset has {} classes, checkpoint expects {}",
            split.num_classes,
            params.spec().num_classes
        )));
    }
    let (x, y) = split.full_batch();
    let logits = params.forward(&x)?;
    let acc = accuracy(&logits, &y)?;
    let hist = NonTargetHistogram::from_logits(&logits, &y, split.num_classes)?;
    let (mean_consistency, mean_perplexity) = dataset_means(&hist);

    let out = serde_json::json!({
        "samples": split.len(),
        "num_classes": split.num_classes,
        "accuracy": acc,
        "mean_consistency": mean_consistency,
        "mean_perplexity": mean_perplexity,
    });
    println!("{}", serde_json::to_string_pretty(&out).expect("metrics serialize"));

    if let Some(path) = hist_out {
        let mut map = serde_json::Map::new();
        for (class, row) in hist.to_nested_counts() {
            let mut inner = serde_json::Map::new();
            for (k, count) in row {
                inner.insert(k.to_string(), serde_json::json!(count));
            }
            map.insert(class.to_string(), serde_json::Value::Object(inner));
        }
        let text = serde_json::to_string_pretty(&serde_json::Value::Object(map))
            .expect("histogram serializes");
        std::fs::write(&path, text).map_err(|e| Failure::io(e.to_string()))?;
    }
    Ok(())
}
