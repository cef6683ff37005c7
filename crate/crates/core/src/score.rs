//! Per-timestep anomaly scores: softmax-weighted reconstruction error and
//! the dynamic Gaussian tail score on top of it.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numcore::Tensor;
use crate::train::{make_windows, WindowMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Attention-weighted score followed by dynamic Gaussian scoring.
    Full,
    /// Plain reconstruction error.
    RawReconstruction,
}

impl std::str::FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ScoreMode::Full),
            "raw" | "raw_reconstruction" => Ok(ScoreMode::RawReconstruction),
            other => Err(Error::Config(format!("unknown score mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreConfig {
    pub mode: ScoreMode,
    /// Trailing window for the running mean and deviation.
    pub gauss_window: usize,
    pub sigma_floor: f64,
    /// Divide by σ² rather than σ when standardizing.
    pub use_sigma_squared: bool,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            mode: ScoreMode::Full,
            gauss_window: 500,
            sigma_floor: 1e-4,
            use_sigma_squared: true,
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gauss_window < 2 {
            return Err(Error::Config(format!(
                "gauss_window must be at least 2, got {}",
                self.gauss_window
            )));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::Config(format!(
                "sigma_floor must be positive, got {}",
                self.sigma_floor
            )));
        }
        Ok(())
    }
}

/// Column-oriented per-timestep scores for a whole test series.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub rec_error: Vec<f64>,
    pub sacon: Vec<f64>,
    pub anomaly_score: Vec<f64>,
    pub dyn_score: Vec<f64>,
}

impl ScoreSeries {
    pub fn len(&self) -> usize {
        self.rec_error.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rec_error.is_empty()
    }

    /// The column that feeds thresholding and AUC under `mode`.
    pub fn evaluated(&self, mode: ScoreMode) -> &[f64] {
        match mode {
            ScoreMode::Full => &self.dyn_score,
            ScoreMode::RawReconstruction => &self.rec_error,
        }
    }

    pub const CSV_HEADER: &'static str = "t,rec_error,sacon,anomaly_score,dyn_score";

    /// CSV with one row per timestep; a `label` column is appended when given.
    pub fn to_csv(&self, labels: Option<&[bool]>) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        if labels.is_some() {
            out.push_str(",label");
        }
        out.push('\n');
        for t in 0..self.len() {
            let _ = write!(
                out,
                "{t},{},{},{},{}",
                self.rec_error[t], self.sacon[t], self.anomaly_score[t], self.dyn_score[t]
            );
            if let Some(l) = labels {
                let _ = write!(out, ",{}", u8::from(l[t]));
            }
            out.push('\n');
        }
        out
    }
}

/// Squared reconstruction error of every row, summed over channels.
pub fn reconstruction_error(x: &Tensor, x_hat: &Tensor) -> Result<Vec<f64>> {
    if x.shape() != x_hat.shape() || x.ndim() != 2 {
        return Err(Error::dim("reconstruction_error", x.shape(), x_hat.shape()));
    }
    let c = x.cols();
    Ok(x.data()
        .chunks(c)
        .zip(x_hat.data().chunks(c))
        .map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum())
        .collect())
}

/// `softmax(−sacon) ⊙ rec_error` over one window.
pub fn anomaly_score(x: &Tensor, x_hat: &Tensor, sacon: &[f64]) -> Result<Vec<f64>> {
    let rec = reconstruction_error(x, x_hat)?;
    weight_by_contribution(&rec, sacon)
}

pub fn weight_by_contribution(rec_error: &[f64], sacon: &[f64]) -> Result<Vec<f64>> {
    if rec_error.len() != sacon.len() {
        return Err(Error::dim("anomaly_score", &[rec_error.len()], &[sacon.len()]));
    }
    let weights = Tensor::vector(sacon.iter().map(|s| -s).collect()).softmax_last();
    Ok(weights.data().iter().zip(rec_error).map(|(w, r)| w * r).collect())
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
/// ln(√π)
const LN_SQRT_PI: f64 = 0.572_364_942_924_700_1;

/// `ln erfc(x)`, finite for every finite `x`.
///
/// Below 5 this is `ln` of the musl-derived `erfc` (relative error near one
/// ulp); above, `erfc` is written as `exp(−x²)/√π · K(x)` with `K` the
/// Laplace continued fraction `1/(x + (1/2)/(x + 1/(x + (3/2)/(x + …))))`,
/// evaluated to 80 terms so the log never underflows.
pub fn ln_erfc(x: f64) -> f64 {
    if x < 5.0 {
        return libm::erfc(x).ln();
    }
    let mut tail = x;
    for n in (1..=80).rev() {
        tail = x + (n as f64 * 0.5) / tail;
    }
    -x * x - LN_SQRT_PI - tail.ln()
}

/// `−ln(1 − Φ(z))` for the standard normal CDF Φ.
pub fn neg_log_upper_tail(z: f64) -> f64 {
    // 1 − Φ(z) = erfc(z/√2) / 2 = 1 − erfc(−z/√2) / 2
    if z < 0.0 {
        return (-(-0.5 * libm::erfc(-z * FRAC_1_SQRT_2)).ln_1p()).max(0.0);
    }
    (-(ln_erfc(z * FRAC_1_SQRT_2) - std::f64::consts::LN_2)).max(0.0)
}

/// Dynamic Gaussian score of each point against the running statistics of
/// the trailing `gauss_window` scores (including the point itself; the
/// window grows from the start of the series).
pub fn dynamic_gaussian(scores: &[f64], cfg: &ScoreConfig) -> Vec<f64> {
    (0..scores.len())
        .map(|t| {
            let lo = (t + 1).saturating_sub(cfg.gauss_window);
            let win = &scores[lo..=t];
            let n = win.len() as f64;
            let mu = win.iter().sum::<f64>() / n;
            let var = win.iter().map(|s| (s - mu) * (s - mu)).sum::<f64>() / n;
            let sigma = var.sqrt().max(cfg.sigma_floor);
            let denom = if cfg.use_sigma_squared { sigma * sigma } else { sigma };
            neg_log_upper_tail((scores[t] - mu) / denom)
        })
        .collect()
}

/// Scores a normalized T×D test series.
///
/// Every window is reconstructed independently; where the trailing window
/// overlaps its predecessor, the later window's values win. All four
/// columns are always filled; `cfg.mode` only picks which one is evaluated.
pub fn score_series(test: &Tensor, model: &Model, cfg: &ScoreConfig) -> Result<ScoreSeries> {
    cfg.validate()?;
    if test.cols() != model.cfg.n_channels {
        return Err(Error::Input(format!(
            "test series has {} channels, model expects {}",
            test.cols(),
            model.cfg.n_channels
        )));
    }
    let windows = make_windows(test, model.cfg.win_size, WindowMode::Inference)?;
    let t = test.rows();
    let mut out = ScoreSeries {
        rec_error: vec![0.0; t],
        sacon: vec![0.0; t],
        anomaly_score: vec![0.0; t],
        dyn_score: vec![0.0; t],
    };
    for w in &windows {
        let (x_hat, state) = model.forward(&w.data)?;
        let rec = reconstruction_error(&w.data, &x_hat)?;
        let sacon = state.mean_sacon();
        let score = weight_by_contribution(&rec, &sacon)?;
        let range = w.start..w.start + rec.len();
        out.rec_error[range.clone()].copy_from_slice(&rec);
        out.sacon[range.clone()].copy_from_slice(&sacon);
        out.anomaly_score[range].copy_from_slice(&score);
    }
    if let Some(bad) = out.anomaly_score.iter().position(|s| !s.is_finite()) {
        return Err(Error::Numerical(format!("non-finite anomaly score at t={bad}")));
    }
    out.dyn_score = dynamic_gaussian(&out.anomaly_score, cfg);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_contribution_divides_by_window() {
        let rec = [1.0, 4.0, 2.0, 8.0];
        let s = weight_by_contribution(&rec, &[0.3; 4]).unwrap();
        for (a, r) in s.iter().zip(rec) {
            assert!((a - r / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_error_scores_zero() {
        let x = Tensor::filled(&[3, 2], 0.5);
        let s = anomaly_score(&x, &x, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s, vec![0.0; 3]);
    }

    #[test]
    fn low_contribution_scores_highest() {
        let s = weight_by_contribution(&[1.0; 4], &[1.0, 1.0, 1.0, 0.0]).unwrap();
        let e = std::f64::consts::E;
        let denom = 3.0 / e + 1.0;
        let expect = [1.0 / e / denom, 1.0 / e / denom, 1.0 / e / denom, 1.0 / denom];
        for (a, b) in s.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((s[0] - 0.1749).abs() < 1e-4 && (s[3] - 0.4754).abs() < 1e-4);
        assert!((s[3] / s[0] - e).abs() < 1e-12);
    }

    #[test]
    fn centre_of_gaussian() {
        assert!((neg_log_upper_tail(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        let cfg = ScoreConfig::default();
        let out = dynamic_gaussian(&[3.0; 50], &cfg);
        assert!(out.iter().all(|v| (v - std::f64::consts::LN_2).abs() < 1e-15));
    }

    #[test]
    fn tail_is_finite_and_increasing_far_out() {
        let mut prev = 0.0;
        for z in [1.0, 5.0, 7.0, 7.07, 7.08, 10.0, 40.0, 1e3, 1e6] {
            let v = neg_log_upper_tail(z);
            assert!(v.is_finite() && v > prev, "z={z}: {v}");
            prev = v;
        }
        assert!(neg_log_upper_tail(-40.0) >= 0.0);
    }

    #[test]
    fn ln_erfc_continuous_at_switch() {
        let below = libm::erfc(5.0 - 1e-12).ln();
        let above = ln_erfc(5.0);
        assert!((below - above).abs() < 1e-10, "{below} vs {above}");
    }

    #[test]
    fn mode_parsing_and_validation() {
        assert_eq!("raw".parse::<ScoreMode>().unwrap(), ScoreMode::RawReconstruction);
        assert!("fancy".parse::<ScoreMode>().is_err());
        let bad = ScoreConfig {
            gauss_window: 1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn csv_layout() {
        let s = ScoreSeries {
            rec_error: vec![1.0, 2.0],
            sacon: vec![0.5, 0.25],
            anomaly_score: vec![0.1, 0.2],
            dyn_score: vec![0.7, 0.8],
        };
        let csv = s.to_csv(Some(&[false, true]));
        assert_eq!(
            csv,
            "t,rec_error,sacon,anomaly_score,dyn_score,label\n0,1,0.5,0.1,0.7,0\n1,2,0.25,0.2,0.8,1\n"
        );
    }
}
