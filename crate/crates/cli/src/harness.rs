//! Subcommand implementations. Each returns a summary value; the binary only
//! parses arguments, prints, and maps errors to exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use dlfd_core::eval::{evaluate_model, loss_histogram, DatasetTag, MiaEvaluator, NomusReport};
use dlfd_core::nn::MlpModel;
use dlfd_core::synth::{generate_splits, load_dataset, save_dataset, DatasetSplits};
use dlfd_core::unlearn::{
    dlfd_run, errormax_run, finetune_run, neggrad_run, retrain_run, train_original, training_log_csv,
    AccessLog, EpochLog, MethodKind, RunHistory, UnlearnConfig,
};
use dlfd_core::{Error, Result};
use log::info;

use crate::config::{ExperimentConfig, ReportFormat};
use crate::report::{ComparisonReport, ReportHeader, ReportRow};

pub const ORIGINAL_ROW: &str = "Original";
pub const RETRAINED_ROW: &str = "Retrained";

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateSummary {
    pub path: PathBuf,
    pub checksum: String,
    pub counts: [(DatasetTag, usize); 4],
}

pub fn cmd_generate(config: &ExperimentConfig, out: &Path) -> Result<GenerateSummary> {
    let splits = generate_splits(&config.data, &config.split)?;
    create_parent(out)?;
    save_dataset(&splits, out)?;
    info!("wrote dataset {}", out.display());
    Ok(GenerateSummary {
        path: out.to_path_buf(),
        checksum: splits.checksum(),
        counts: split_counts(&splits),
    })
}

fn split_counts(splits: &DatasetSplits) -> [(DatasetTag, usize); 4] {
    [DatasetTag::Retain, DatasetTag::Forget, DatasetTag::Unseen, DatasetTag::Test]
        .map(|tag| (tag, splits.get(tag).len()))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => Ok(fs::create_dir_all(dir)?),
        _ => Ok(()),
    }
}

/// Untrained model shaped for the dataset.
pub fn model_template(config: &ExperimentConfig, splits: &DatasetSplits) -> Result<MlpModel> {
    let mut dims = vec![splits.input_dim()];
    dims.extend(&config.model.hidden);
    dims.push(splits.class_count());
    MlpModel::init(&dims, config.model.feature_layer, config.model.init_seed)
}

/// Trains θ_original on retain ∪ forget.
pub fn train_original_model(config: &ExperimentConfig, splits: &DatasetSplits) -> Result<(MlpModel, Vec<EpochLog>)> {
    let template = model_template(config, splits)?;
    let (model, log, _) = train_original(&template, splits, &config.train)?;
    Ok((model, log))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub model_path: PathBuf,
    pub log_path: PathBuf,
    pub epochs: usize,
    pub test_accuracy: f64,
    pub model_hash: String,
}

/// Path of the training log written next to a model file.
pub fn training_log_path(model_path: &Path) -> PathBuf {
    model_path.with_extension("train.csv")
}

pub fn cmd_train(dataset: &Path, config: &ExperimentConfig, out: &Path) -> Result<TrainSummary> {
    let splits = load_dataset(dataset)?;
    let (model, log) = train_original_model(config, &splits)?;
    create_parent(out)?;
    model.save(out)?;
    let log_path = training_log_path(out);
    fs::write(&log_path, training_log_csv(&log))?;
    let test_accuracy = dlfd_core::eval::accuracy(
        &model,
        &splits.inputs(DatasetTag::Test),
        &splits.labels(DatasetTag::Test),
    )?;
    Ok(TrainSummary {
        model_path: out.to_path_buf(),
        log_path,
        epochs: log.len(),
        test_accuracy,
        model_hash: model.digest(),
    })
}

/// Perturbed inputs stay inside the dataset's input range unless configured otherwise.
fn with_dataset_clamp(mut cfg: UnlearnConfig, splits: &DatasetSplits) -> UnlearnConfig {
    if cfg.input_clamp.is_none() {
        cfg.input_clamp = splits.input_range();
    }
    cfg
}

/// Runs one unlearning method from `start`.
pub fn run_method(
    method: MethodKind,
    start: &MlpModel,
    splits: &DatasetSplits,
    config: &ExperimentConfig,
) -> Result<(MlpModel, RunHistory)> {
    let cfg = with_dataset_clamp(config.unlearn_for(method), splits);
    match method {
        MethodKind::Retrain => retrain_run(splits, start, &config.train_for_retrain()),
        MethodKind::FineTune => finetune_run(start, splits, &cfg),
        MethodKind::NegGrad => neggrad_run(start, splits, &cfg),
        MethodKind::ErrorMax => errormax_run(start, splits, &cfg),
        MethodKind::Dlfd => {
            let mut evaluator = MiaEvaluator::from_splits(splits, config.evaluation.mia_seed);
            dlfd_run(start, splits, &cfg, &mut evaluator)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlearnSummary {
    pub model_path: PathBuf,
    pub history_path: PathBuf,
    pub report: ComparisonReport,
    pub history: RunHistory,
}

pub fn cmd_unlearn(
    dataset: &Path,
    model_path: &Path,
    config: &ExperimentConfig,
    method: MethodKind,
    out_dir: &Path,
) -> Result<UnlearnSummary> {
    let splits = load_dataset(dataset)?;
    let start_bytes = fs::read(model_path)?;
    let start = MlpModel::from_bytes(&start_bytes)?;
    if start.input_dim() != splits.input_dim() {
        return Err(Error::Shape(format!(
            "model expects {} inputs, dataset has {}",
            start.input_dim(),
            splits.input_dim()
        )));
    }
    let (model, history) = run_method(method, &start, &splits, config)?;
    let report = evaluate_model(method.name(), &model, &splits, config.evaluation.mia_seed)?;

    fs::create_dir_all(out_dir)?;
    let unlearned_path = out_dir.join("model.bin");
    model.save(&unlearned_path)?;
    let history_path = out_dir.join("history.csv");
    fs::write(&history_path, history.to_csv())?;
    let report = ComparisonReport {
        header: ReportHeader::new(config.digest(), splits.checksum()),
        rows: vec![ReportRow::ok(&report, model.digest(), Some(start.digest()))],
    };
    write_report(&report, out_dir, &config.output.formats)?;
    Ok(UnlearnSummary {
        model_path: unlearned_path,
        history_path,
        report,
        history,
    })
}

fn write_report(report: &ComparisonReport, out_dir: &Path, formats: &[ReportFormat]) -> Result<()> {
    for format in formats {
        match format {
            ReportFormat::Csv => fs::write(out_dir.join("report.csv"), report.to_csv())?,
            ReportFormat::Jsonl => fs::write(out_dir.join("report.jsonl"), report.to_jsonl())?,
        }
    }
    Ok(())
}

/// Everything a compare run produced for one row.
#[derive(Debug, Clone)]
pub struct RowOutcome {
    pub row: ReportRow,
    pub model: Option<MlpModel>,
    pub access: Option<AccessLog>,
    pub elapsed: Duration,
}

#[derive(Debug, Clone)]
pub struct CompareOutcome {
    pub report: ComparisonReport,
    pub rows: Vec<RowOutcome>,
    pub original: MlpModel,
    pub original_access: AccessLog,
}

impl CompareOutcome {
    pub fn has_failures(&self) -> bool {
        self.report.has_failures()
    }

    pub fn outcome(&self, method: &str) -> Option<&RowOutcome> {
        self.rows.iter().find(|r| r.row.method == method)
    }
}

fn file_slug(name: &str) -> String {
    name.to_ascii_lowercase()
}

fn write_histograms(
    name: &str,
    model: &MlpModel,
    splits: &DatasetSplits,
    config: &ExperimentConfig,
    out_dir: &Path,
) -> Result<()> {
    let (forget, unseen) = MiaEvaluator::from_splits(splits, config.evaluation.mia_seed).losses(model)?;
    let eval = &config.evaluation;
    for (dist, suffix) in [(forget, "forget"), (unseen, "unseen")] {
        let hist = loss_histogram(&dist, eval.histogram_bins, eval.histogram_range)?;
        fs::write(
            out_dir.join(format!("hist_{}_{suffix}.csv", file_slug(name))),
            hist.to_csv(),
        )?;
    }
    Ok(())
}

/// Evaluates a finished model and writes its artifacts; any failure becomes a failed row.
fn finish_row(
    name: &str,
    result: Result<(MlpModel, Option<AccessLog>)>,
    start_hash: Option<String>,
    splits: &DatasetSplits,
    config: &ExperimentConfig,
    out_dir: &Path,
    elapsed: Duration,
) -> RowOutcome {
    let evaluated = result.and_then(|(model, access)| {
        let report: NomusReport = evaluate_model(name, &model, splits, config.evaluation.mia_seed)?;
        write_histograms(name, &model, splits, config, out_dir)?;
        model.save(out_dir.join(format!("model_{}.bin", file_slug(name))))?;
        Ok((report, model, access))
    });
    match evaluated {
        Ok((report, model, access)) => RowOutcome {
            row: ReportRow::ok(&report, model.digest(), start_hash),
            model: Some(model),
            access,
            elapsed,
        },
        Err(e) => {
            log::warn!("{name} failed: {e}");
            RowOutcome {
                row: ReportRow::failed(name, start_hash, &e),
                model: None,
                access: None,
                elapsed,
            }
        }
    }
}

/// Trains θ_original and the retrained reference, runs every requested method
/// from the same serialized θ_original, and writes report, histograms,
/// timings and access counts into `out_dir`.
pub fn cmd_compare(dataset: &Path, config: &ExperimentConfig, out_dir: &Path) -> Result<CompareOutcome> {
    if config.methods.is_empty() {
        return Err(Error::Config("methods: at least one method is required".into()));
    }
    let splits = load_dataset(dataset)?;
    fs::create_dir_all(out_dir)?;
    let template = model_template(config, &splits)?;

    let started = Instant::now();
    let (original, _, original_access) = train_original(&template, &splits, &config.train)?;
    let original_elapsed = started.elapsed();
    let original_bytes = original.to_bytes();
    let original_hash = original.digest();
    fs::write(out_dir.join("original.bin"), &original_bytes)?;
    info!("trained original model {original_hash}");
    let original_row = finish_row(
        ORIGINAL_ROW,
        Ok((original.clone(), Some(original_access.clone()))),
        None,
        &splits,
        config,
        out_dir,
        original_elapsed,
    );
    if original_row.row.error.is_some() {
        return Err(Error::Numeric(format!(
            "original model could not be evaluated: {}",
            original_row.row.error.unwrap_or_default()
        )));
    }

    let method_rows: Vec<RowOutcome> = std::thread::scope(|scope| {
        let retrained = scope.spawn(|| {
            let started = Instant::now();
            let result = retrain_run(&splits, &template, &config.train)
                .map(|(m, h)| (m, Some(h.access)));
            (result, started.elapsed())
        });
        let handles: Vec<_> = config
            .methods
            .iter()
            .map(|&method| {
                let (splits, original_bytes) = (&splits, &original_bytes);
                scope.spawn(move || {
                    let started = Instant::now();
                    // every method deserializes its own copy of the same bytes
                    let result = MlpModel::from_bytes(original_bytes).and_then(|start| {
                        let start_hash = start.digest();
                        run_method(method, &start, splits, config)
                            .map(|(m, h)| ((m, Some(h.access)), start_hash))
                    });
                    (method, result, started.elapsed())
                })
            })
            .collect();

        let (result, elapsed) = retrained.join().expect("retrain thread panicked");
        let mut rows = vec![finish_row(RETRAINED_ROW, result, None, &splits, config, out_dir, elapsed)];
        for handle in handles {
            let (method, result, elapsed) = handle.join().expect("method thread panicked");
            let (result, start_hash) = match result {
                Ok((run, hash)) => (Ok(run), Some(hash)),
                Err(e) => (Err(e), Some(original_hash.clone())),
            };
            rows.push(finish_row(method.name(), result, start_hash, &splits, config, out_dir, elapsed));
        }
        rows
    });

    let mut rows = vec![original_row];
    rows.extend(method_rows);
    let report = ComparisonReport {
        header: ReportHeader::new(config.digest(), splits.checksum()),
        rows: rows.iter().map(|r| r.row.clone()).collect(),
    };
    write_report(&report, out_dir, &config.output.formats)?;
    fs::write(out_dir.join("timings.csv"), timings_csv(&rows))?;
    fs::write(out_dir.join("access.csv"), access_csv(&rows))?;
    Ok(CompareOutcome {
        report,
        rows,
        original,
        original_access,
    })
}

fn timings_csv(rows: &[RowOutcome]) -> String {
    let mut out = String::from("method,seconds\n");
    for r in rows {
        out.push_str(&format!("{},{:.3}\n", r.row.method, r.elapsed.as_secs_f64()));
    }
    out
}

/// Distinct sample indices each row read for training, per split.
fn access_csv(rows: &[RowOutcome]) -> String {
    let mut out = String::from("method,retain,forget,unseen,test\n");
    for r in rows {
        if let Some(access) = &r.access {
            let n = |tag| access.indices(tag).len();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.row.method,
                n(DatasetTag::Retain),
                n(DatasetTag::Forget),
                n(DatasetTag::Unseen),
                n(DatasetTag::Test)
            ));
        }
    }
    out
}
