//! Dataset ingestion, per-channel standardization and the synthetic
//! anomaly generator.
//!
//! CSV layout: a header of channel names, one row per timestep. The test
//! file carries a 0/1 label column (name configurable, `label` by default)
//! and may carry an `entity` column naming the sub-series each row belongs
//! to. Both extra columns are dropped from the channel matrix wherever they
//! appear.

mod synthetic;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use synthetic::{generate_synthetic, AnomalyKind, AnomalySpec, BaseSignal, Placement, SyntheticSpec};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const STD_FLOOR: f64 = 1e-8;
pub const ENTITY_COLUMN: &str = "entity";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    /// Population standard deviation, floored at [`STD_FLOOR`].
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn fit(train: &Tensor) -> Self {
        let (t, d) = (train.rows(), train.cols());
        let mut mean = vec![0.0; d];
        for row in train.data().chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= t as f64);
        let mut var = vec![0.0; d];
        for row in train.data().chunks(d) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.iter().map(|s| (s / t as f64).sqrt().max(STD_FLOOR)).collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        self.map(x, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, x: &Tensor) -> Tensor {
        self.map(x, |v, m, s| v * s + m)
    }

    fn map(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let d = self.mean.len();
        let data = x
            .data()
            .chunks(d)
            .flat_map(|row| {
                row.iter()
                    .zip(self.mean.iter().zip(&self.std))
                    .map(|(&v, (&m, &s))| f(v, m, s))
                    .collect::<Vec<_>>()
            })
            .collect();
        Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesDataset {
    pub name: String,
    pub channels: Vec<String>,
    /// T_train × D.
    pub train: Tensor,
    /// T_test × D.
    pub test: Tensor,
    pub test_labels: Vec<bool>,
    pub test_entities: Option<Vec<String>>,
    /// Statistics of the raw training split.
    pub stats: Normalization,
    pub normalized: bool,
}

impl TimeSeriesDataset {
    pub fn new(
        name: impl Into<String>,
        channels: Vec<String>,
        train: Tensor,
        test: Tensor,
        test_labels: Vec<bool>,
    ) -> Result<Self> {
        let d = channels.len();
        if train.ndim() != 2 || test.ndim() != 2 || train.cols() != d || test.cols() != d {
            return Err(Error::dim("dataset", train.shape(), test.shape()));
        }
        if train.rows() == 0 || test.rows() == 0 {
            return Err(Error::Input("train and test must both have rows".into()));
        }
        if test_labels.len() != test.rows() {
            return Err(Error::Input(format!(
                "{} labels for {} test rows",
                test_labels.len(),
                test.rows()
            )));
        }
        let stats = Normalization::fit(&train);
        Ok(Self {
            name: name.into(),
            channels,
            train,
            test,
            test_labels,
            test_entities: None,
            stats,
            normalized: false,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn anomaly_rate(&self) -> f64 {
        self.test_labels.iter().filter(|&&l| l).count() as f64 / self.test_labels.len() as f64
    }

    /// Standardizes both splits with the training statistics.
    pub fn normalize(mut self) -> Result<Self> {
        if self.normalized {
            return Err(Error::Contract(format!("dataset `{}` is already normalized", self.name)));
        }
        self.train = self.stats.apply(&self.train);
        self.test = self.stats.apply(&self.test);
        self.normalized = true;
        Ok(self)
    }

    pub fn denormalize(mut self) -> Result<Self> {
        if !self.normalized {
            return Err(Error::Contract(format!("dataset `{}` is not normalized", self.name)));
        }
        self.train = self.stats.invert(&self.train);
        self.test = self.stats.invert(&self.test);
        self.normalized = false;
        Ok(self)
    }

    pub fn train_csv(&self) -> String {
        write_csv(&self.channels, &self.train, None, None)
    }

    pub fn test_csv(&self) -> String {
        write_csv(&self.channels, &self.test, Some(&self.test_labels), self.test_entities.as_deref())
    }
}

fn write_csv(channels: &[String], x: &Tensor, labels: Option<&[bool]>, entities: Option<&[String]>) -> String {
    let mut out = channels.join(",");
    if labels.is_some() {
        out.push_str(",label");
    }
    if entities.is_some() {
        let _ = write!(out, ",{ENTITY_COLUMN}");
    }
    out.push('\n');
    for (t, row) in x.data().chunks(channels.len().max(1)).enumerate() {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v}");
        }
        if let Some(l) = labels {
            let _ = write!(out, ",{}", u8::from(l[t]));
        }
        if let Some(e) = entities {
            let _ = write!(out, ",{}", e[t]);
        }
        out.push('\n');
    }
    out
}

struct Table {
    channels: Vec<String>,
    data: Vec<f64>,
    rows: usize,
    labels: Option<Vec<bool>>,
    entities: Option<Vec<String>>,
}

fn read_table(path: &Path, label_column: &str, need_labels: bool) -> Result<Table> {
    let file = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Input(format!("{file}: {other:?}")),
        })?;
    let header = rdr
        .headers()
        .map_err(|e| Error::Input(format!("{file}: bad header: {e}")))?
        .clone();
    let label_idx = header.iter().position(|h| h == label_column);
    let entity_idx = header.iter().position(|h| h == ENTITY_COLUMN);
    if need_labels && label_idx.is_none() {
        return Err(Error::Input(format!("{file}: missing label column `{label_column}`")));
    }
    let channel_idx: Vec<usize> = (0..header.len())
        .filter(|&i| Some(i) != label_idx && Some(i) != entity_idx)
        .collect();
    if channel_idx.is_empty() {
        return Err(Error::Input(format!("{file}: no channel columns")));
    }
    let channels = channel_idx.iter().map(|&i| header[i].to_string()).collect();
    let mut data = Vec::new();
    let mut labels = label_idx.map(|_| Vec::new());
    let mut entities = entity_idx.map(|_| Vec::new());
    let mut rows = 0;
    for (r, rec) in rdr.records().enumerate() {
        // line numbers count the header as line 1
        let line = r + 2;
        let rec = rec.map_err(|e| Error::Input(format!("{file}: line {line}: {e}")))?;
        if rec.len() != header.len() {
            return Err(Error::Input(format!(
                "{file}: line {line}: expected {} fields, found {}",
                header.len(),
                rec.len()
            )));
        }
        for &i in &channel_idx {
            let v = rec[i].parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                Error::Input(format!(
                    "{file}: line {line}, column `{}`: `{}` is not a finite number",
                    &header[i], &rec[i]
                ))
            })?;
            data.push(v);
        }
        if let (Some(i), Some(l)) = (label_idx, labels.as_mut()) {
            l.push(parse_label(&rec[i]).ok_or_else(|| {
                Error::Input(format!(
                    "{file}: line {line}, column `{label_column}`: label `{}` is not 0 or 1",
                    &rec[i]
                ))
            })?);
        }
        if let (Some(i), Some(e)) = (entity_idx, entities.as_mut()) {
            e.push(rec[i].to_string());
        }
        rows += 1;
    }
    Ok(Table {
        channels,
        data,
        rows,
        labels,
        entities,
    })
}

fn parse_label(s: &str) -> Option<bool> {
    match s.parse::<f64>().ok()? {
        0.0 => Some(false),
        1.0 => Some(true),
        _ => None,
    }
}

/// Loads a train/test CSV pair. Constant channels are kept.
pub fn load_csv(train_path: &Path, test_path: &Path, label_column: &str) -> Result<TimeSeriesDataset> {
    let train = read_table(train_path, label_column, false)?;
    let test = read_table(test_path, label_column, true)?;
    if train.channels != test.channels {
        return Err(Error::Input(format!(
            "train channels {:?} differ from test channels {:?}",
            train.channels, test.channels
        )));
    }
    let d = train.channels.len();
    let name = test_path
        .parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let mut ds = TimeSeriesDataset::new(
        name,
        train.channels,
        Tensor::new(vec![train.rows, d], train.data)?,
        Tensor::new(vec![test.rows, d], test.data)?,
        test.labels.expect("checked by read_table"),
    )?;
    ds.test_entities = test.entities;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn round_trips_values() {
        let dir = tempfile::tempdir().unwrap();
        let tr = write(dir.path(), "train.csv", "a,b\n1.5,-2\n0.1,3e-3\n7,8\n");
        let te = write(dir.path(), "test.csv", "a,b,label\n1,2,0\n3,4,1\n5,6,0\n");
        let ds = load_csv(&tr, &te, "label").unwrap();
        assert_eq!(ds.train.data(), &[1.5, -2.0, 0.1, 3e-3, 7.0, 8.0]);
        assert_eq!(ds.test.shape(), &[3, 2]);
        assert_eq!(ds.test_labels, vec![false, true, false]);
        assert_eq!(ds.channels, vec!["a", "b"]);
    }

    #[test]
    fn missing_label_named() {
        let dir = tempfile::tempdir().unwrap();
        let tr = write(dir.path(), "train.csv", "a\n1\n");
        let te = write(dir.path(), "test.csv", "a\n1\n");
        let err = load_csv(&tr, &te, "attack").unwrap_err().to_string();
        assert!(err.contains("`attack`"), "{err}");
    }

    #[test]
    fn bad_cells_located() {
        let dir = tempfile::tempdir().unwrap();
        let tr = write(dir.path(), "train.csv", "a,b\n1,2\n3,x\n");
        let te = write(dir.path(), "test.csv", "a,b,label\n1,2,0\n");
        let err = load_csv(&tr, &te, "label").unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("`b`"), "{err}");

        let tr = write(dir.path(), "train.csv", "a,b\n1,2\n");
        let te = write(dir.path(), "test.csv", "a,b,label\n1,2,2\n");
        let err = load_csv(&tr, &te, "label").unwrap_err().to_string();
        assert!(err.contains("label `2`"), "{err}");

        let te = write(dir.path(), "test.csv", "a,b,label\n1,2\n");
        assert!(matches!(load_csv(&tr, &te, "label"), Err(Error::Input(_))));
    }

    #[test]
    fn entity_column_separated() {
        let dir = tempfile::tempdir().unwrap();
        let tr = write(dir.path(), "train.csv", "a,entity\n1,m1\n2,m2\n");
        let te = write(dir.path(), "test.csv", "a,label,entity\n1,0,m1\n2,1,m2\n");
        let ds = load_csv(&tr, &te, "label").unwrap();
        assert_eq!(ds.n_channels(), 1);
        assert_eq!(ds.test_entities.unwrap(), vec!["m1", "m2"]);
    }

    #[test]
    fn constant_channel_survives() {
        let dir = tempfile::tempdir().unwrap();
        let tr = write(dir.path(), "train.csv", "a,c\n0,5.0\n2,5.0\n");
        let te = write(dir.path(), "test.csv", "a,c,label\n1,5.0,0\n3,5.0,1\n");
        let ds = load_csv(&tr, &te, "label").unwrap();
        assert_eq!(ds.stats.std, vec![1.0, STD_FLOOR]);
        let ds = ds.normalize().unwrap();
        assert_eq!(ds.train.data(), &[-1.0, 0.0, 1.0, 0.0]);
        assert_eq!(ds.test.data(), &[0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn double_normalization_rejected() {
        let x = Tensor::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
        let ds = TimeSeriesDataset::new("t", vec!["a".into()], x.clone(), x, vec![false, true]).unwrap();
        let ds = ds.normalize().unwrap();
        assert!(matches!(ds.clone().normalize(), Err(Error::Contract(_))));
        let back = ds.denormalize().unwrap();
        assert_eq!(back.train.data(), &[1.0, 3.0]);
    }

    #[test]
    fn csv_writer_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let x = Tensor::from_rows(&[vec![0.1, 2.0], vec![1.0 / 3.0, -4.5]]).unwrap();
        let ds = TimeSeriesDataset::new("t", vec!["u".into(), "v".into()], x.clone(), x, vec![true, false]).unwrap();
        let tr = write(dir.path(), "train.csv", &ds.train_csv());
        let te = write(dir.path(), "test.csv", &ds.test_csv());
        let back = load_csv(&tr, &te, "label").unwrap();
        assert_eq!(back.train, ds.train);
        assert_eq!(back.test_labels, ds.test_labels);
    }
}
