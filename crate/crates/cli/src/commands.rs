//! The four verbs. Every artifact is a plain file under the run's output
//! directory; nothing time-dependent is written.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Serialize;
use subadj_core::data::{generate_synthetic, load_csv};
use subadj_core::eval::{best_f1_threshold, evaluate_entities, Aggregation, EntityAverage};
use subadj_core::model::checkpoint;
use subadj_core::score::score_series;
use subadj_core::train::fit;
use subadj_core::{
    Error, EvalReport, MappingKind, Model, ScoreMode, ScoreSeries, SyntheticSpec, Tensor, TimeSeriesDataset,
    TrainingLog,
};

use crate::config::RunConfig;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const REPORT_CSV_FILE: &str = "report.csv";
pub const SCORES_FILE: &str = "scores.csv";
pub const ENTITIES_FILE: &str = "entities.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const PROVENANCE_FILE: &str = "provenance.json";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct Provenance {
    /// Fully resolved spec; regenerating from it reproduces the data.
    pub spec: SyntheticSpec,
    pub seed: u64,
    pub train_rows: usize,
    pub test_rows: usize,
    pub label_mass: usize,
    pub anomaly_rate: f64,
}

pub fn generate(spec_path: Option<&Path>, seed: Option<u64>, out: &Path) -> anyhow::Result<Provenance> {
    let mut spec = match spec_path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            SyntheticSpec::from_toml(&text)?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let resolved = spec.resolve()?;
    let ds = generate_synthetic(&resolved)?;
    ensure_dir(out)?;
    write(&out.join("train.csv"), ds.train_csv())?;
    write(&out.join("test.csv"), ds.test_csv())?;
    let prov = Provenance {
        seed: resolved.seed,
        train_rows: ds.train.rows(),
        test_rows: ds.test.rows(),
        label_mass: resolved.label_mass(),
        anomaly_rate: ds.anomaly_rate(),
        spec: resolved,
    };
    write(&out.join(PROVENANCE_FILE), serde_json::to_string_pretty(&prov)?)?;
    Ok(prov)
}

/// Raw test values (for the score CSV) and the dataset ready for the model.
fn load_data(cfg: &RunConfig) -> anyhow::Result<(Tensor, TimeSeriesDataset)> {
    let (train, test) = cfg.data_paths()?;
    let ds = load_csv(train, test, &cfg.data.label_column)?;
    let raw = ds.test.clone();
    let ds = if cfg.data.normalize { ds.normalize()? } else { ds };
    Ok((raw, ds))
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainingLog,
}

pub fn train(cfg: &RunConfig) -> anyhow::Result<TrainOutcome> {
    let (_, ds) = load_data(cfg)?;
    let model_cfg = cfg.model_config(ds.n_channels())?;
    let (model, log) = fit(&ds.train, &model_cfg, &cfg.train_config())?;
    ensure_dir(&cfg.out_dir)?;
    checkpoint::save(&model, &cfg.out_dir.join(CHECKPOINT_FILE))?;
    write(&cfg.out_dir.join(TRAIN_LOG_FILE), log.to_csv())?;
    write(&cfg.out_dir.join(TRAIN_SUMMARY_FILE), serde_json::to_string_pretty(&log)?)?;
    write(&cfg.out_dir.join(CONFIG_FILE), cfg.to_toml())?;
    Ok(TrainOutcome { model, log })
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalOutput {
    pub dataset: String,
    pub mode: ScoreMode,
    pub point_adjust: bool,
    pub aggregation: Aggregation,
    pub n_points: usize,
    pub anomaly_rate: f64,
    pub report: EvalReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entity_average: Option<EntityAverage>,
}

impl EvalOutput {
    /// F1 of the configured protocol: the entity mean when averaging,
    /// otherwise the best-threshold F1 of the concatenated series.
    pub fn headline_f1(&self) -> f64 {
        match (&self.entity_average, self.point_adjust) {
            (Some(e), true) => e.pa_f1,
            (Some(e), false) => e.f1,
            (None, _) => self.report.selected().f1,
        }
    }
}

pub struct EvalOutcome {
    pub output: EvalOutput,
    pub scores: ScoreSeries,
}

pub fn scores_csv(
    scores: &ScoreSeries,
    labels: &[bool],
    entities: Option<&[String]>,
    channels: &[String],
    raw: &Tensor,
) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ScoreSeries::CSV_HEADER.split(',').map(String::from).collect();
    header.push("label".into());
    if entities.is_some() {
        header.push("entity".into());
    }
    header.extend(channels.iter().map(|c| format!("raw:{c}")));
    w.write_record(&header)?;
    for t in 0..scores.len() {
        let mut row = vec![
            t.to_string(),
            scores.rec_error[t].to_string(),
            scores.sacon[t].to_string(),
            scores.anomaly_score[t].to_string(),
            scores.dyn_score[t].to_string(),
            u8::from(labels[t]).to_string(),
        ];
        if let Some(e) = entities {
            row.push(e[t].clone());
        }
        row.extend(raw.row(t).iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn entities_csv(avg: &EntityAverage) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["entity".to_string()];
    header.extend(EvalReport::CSV_HEADER.split(',').map(String::from));
    w.write_record(&header)?;
    for e in &avg.entities {
        let mut row = vec![e.entity.clone()];
        row.extend(e.report.csv_row().split(',').map(String::from));
        w.write_record(&row)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn eval(cfg: &RunConfig, checkpoint_path: &Path) -> anyhow::Result<EvalOutcome> {
    let (raw, ds) = load_data(cfg)?;
    let model = checkpoint::load(checkpoint_path)?;
    let scores = score_series(&ds.test, &model, &cfg.score)?;
    let evaluated = scores.evaluated(cfg.score.mode);
    let adjust = cfg.eval.point_adjust;
    let (_, report) = best_f1_threshold(evaluated, &ds.test_labels, adjust)?;
    let entity_average = match cfg.eval.aggregation {
        Aggregation::Concatenate => None,
        Aggregation::EntityAverage => {
            let names = ds.test_entities.as_deref().ok_or_else(|| {
                Error::Input("entity averaging needs an `entity` column in the test CSV".into())
            })?;
            Some(evaluate_entities(evaluated, &ds.test_labels, names, adjust)?)
        }
    };
    let output = EvalOutput {
        dataset: ds.name.clone(),
        mode: cfg.score.mode,
        point_adjust: adjust,
        aggregation: cfg.eval.aggregation,
        n_points: ds.test_labels.len(),
        anomaly_rate: ds.anomaly_rate(),
        report,
        entity_average,
    };

    let dir = &cfg.out_dir;
    ensure_dir(dir)?;
    write(&dir.join(REPORT_JSON_FILE), serde_json::to_string_pretty(&output)?)?;
    write(
        &dir.join(REPORT_CSV_FILE),
        format!("{}\n{}\n", EvalReport::CSV_HEADER, output.report.csv_row()),
    )?;
    let csv = scores_csv(
        &scores,
        &ds.test_labels,
        ds.test_entities.as_deref(),
        &ds.channels,
        &raw,
    )?;
    write(&dir.join(SCORES_FILE), csv)?;
    if let Some(avg) = &output.entity_average {
        write(&dir.join(ENTITIES_FILE), entities_csv(avg)?)?;
    }
    Ok(EvalOutcome { output, scores })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    K1K2,
    Lambda,
    Window,
    Mapping,
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "k1k2" => Ok(Axis::K1K2),
            "lambda" => Ok(Axis::Lambda),
            "window" => Ok(Axis::Window),
            "mapping" => Ok(Axis::Mapping),
            other => Err(Error::Config(format!(
                "unknown sweep axis `{other}` (expected k1k2, lambda, window or mapping)"
            ))),
        }
    }
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::K1K2 => "k1k2",
            Axis::Lambda => "lambda",
            Axis::Window => "window",
            Axis::Mapping => "mapping",
        }
    }

    /// Config keys and values set by one grid value.
    pub fn assignments(self, value: &str) -> Result<Vec<(String, toml::Value)>, Error> {
        let bad = || Error::Config(format!("invalid {} value `{value}`", self.name()));
        let int = |s: &str| s.trim().parse::<i64>().map_err(|_| bad());
        Ok(match self {
            Axis::K1K2 => {
                let (a, b) = value.split_once(':').ok_or_else(bad)?;
                vec![
                    ("span.k1".into(), toml::Value::Integer(int(a)?)),
                    ("span.k2".into(), toml::Value::Integer(int(b)?)),
                ]
            }
            Axis::Lambda => {
                let v: f64 = value.trim().parse().map_err(|_| bad())?;
                vec![("train.lambda".into(), toml::Value::Float(v))]
            }
            Axis::Window => vec![("model.win_size".into(), toml::Value::Integer(int(value)?))],
            Axis::Mapping => {
                let kind: MappingKind = value.trim().parse()?;
                vec![("mapping.kind".into(), toml::Value::String(kind.name().into()))]
            }
        })
    }
}

/// Directory-safe name of a grid point.
fn point_dir_name(axis: Axis, value: &str) -> String {
    let clean: String = value
        .trim()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect();
    format!("{}-{clean}", axis.name())
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub axis: Axis,
    pub value: String,
    pub dir: PathBuf,
    pub result: Result<EvalOutput, String>,
}

pub const SWEEP_HEADER_PREFIX: &str = "axis,value,status";

fn sweep_csv(rows: &[SweepRow]) -> anyhow::Result<String> {
    let n_metrics = EvalReport::CSV_HEADER.split(',').count();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = SWEEP_HEADER_PREFIX.split(',').map(String::from).collect();
    header.extend(EvalReport::CSV_HEADER.split(',').map(String::from));
    header.push("message".into());
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.axis.name().to_string(), r.value.clone()];
        match &r.result {
            Ok(out) => {
                rec.push("ok".into());
                rec.extend(out.report.csv_row().split(',').map(String::from));
                rec.push(String::new());
            }
            Err(msg) => {
                rec.push("failed".into());
                rec.extend(std::iter::repeat_n(String::new(), n_metrics));
                rec.push(msg.clone());
            }
        }
        w.write_record(&rec)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn run_point(base: &RunConfig, axis: Axis, value: &str, dir: &Path) -> anyhow::Result<EvalOutput> {
    let mut cfg = base.with_assignments(&axis.assignments(value)?)?;
    cfg.out_dir = dir.to_path_buf();
    train(&cfg)?;
    Ok(eval(&cfg, &dir.join(CHECKPOINT_FILE))?.output)
}

/// Trains and evaluates every grid value under the base seed. A failing
/// point is recorded and the sweep moves on; `sweep.csv` is rewritten after
/// each point.
pub fn sweep(base: &RunConfig, axis: Axis, values: &[String]) -> anyhow::Result<Vec<SweepRow>> {
    if values.is_empty() {
        bail!(Error::Config("sweep needs at least one value".into()));
    }
    ensure_dir(&base.out_dir)?;
    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let dir = base.out_dir.join(point_dir_name(axis, value));
        let result = run_point(base, axis, value, &dir).map_err(|e| format!("{e:#}"));
        if let Err(msg) = &result {
            eprintln!("sweep point {}={value} failed: {msg}", axis.name());
        }
        rows.push(SweepRow {
            axis,
            value: value.clone(),
            dir,
            result,
        });
        write(&base.out_dir.join(SWEEP_FILE), sweep_csv(&rows)?)
            .context("writing sweep table")?;
    }
    Ok(rows)
}

/// 2 for numerical failures anywhere in the chain, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let numerical = err
        .chain()
        .any(|e| e.downcast_ref::<Error>().is_some_and(Error::is_numerical));
    if numerical {
        2
    } else {
        1
    }
}
