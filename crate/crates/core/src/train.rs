//! Windowing, the joint reconstruction/attention objective, and the
//! optimization loop with early stopping.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::TAU_FLOOR;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numcore::{adam_step, AdamState, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub subsample_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            lr: 1e-4,
            batch_size: 128,
            max_epochs: 10,
            patience: 3,
            val_fraction: 0.1,
            seed: 0,
            subsample_ratio: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "val_fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        if !(self.subsample_ratio > 0.0 && self.subsample_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "subsample_ratio must lie in (0, 1], got {}",
                self.subsample_ratio
            )));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "lr must be positive; batch_size and max_epochs at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// How a trailing remainder shorter than one window is treated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowMode {
    /// Drop the remainder.
    Training,
    /// Cover it with one extra window ending at the last timestep.
    Inference,
}

/// A window cut from a T×D series, starting at `start`.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub start: usize,
    pub data: Tensor,
}

/// Disjoint consecutive windows of `win` rows.
pub fn make_windows(series: &Tensor, win: usize, mode: WindowMode) -> Result<Vec<Window>> {
    if series.ndim() != 2 {
        return Err(Error::Input(format!("series must be T×D, got shape {:?}", series.shape())));
    }
    let (t, d) = (series.rows(), series.cols());
    if win == 0 || t < win {
        return Err(Error::Input(format!(
            "series of {t} timesteps is shorter than the window of {win}"
        )));
    }
    let mut starts: Vec<usize> = (0..t / win).map(|i| i * win).collect();
    if mode == WindowMode::Inference && t % win != 0 {
        starts.push(t - win);
    }
    starts
        .into_iter()
        .map(|start| {
            let data = series.data()[start * d..(start + win) * d].to_vec();
            Ok(Window {
                start,
                data: Tensor::new(vec![win, d], data)?,
            })
        })
        .collect()
}

/// Tape handles for the two parts of the objective and their combination.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub rec: Var,
    /// Absent when λ = 0: the attention term is never evaluated.
    pub attn: Option<Var>,
}

/// `‖x − x̂‖²_F − λ·Σ sacon` on the tape.
pub fn loss_total_tape(
    tape: &mut Tape,
    x: Var,
    x_hat: Var,
    sacon: Option<Var>,
    lambda: f64,
) -> Result<LossVars> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let diff = tape.sub(x, x_hat)?;
    let sq = tape.mul(diff, diff)?;
    let rec = tape.sum(sq);
    match sacon {
        Some(s) if lambda > 0.0 => {
            let attn = tape.sum(s);
            let weighted = tape.scale(attn, lambda);
            let total = tape.sub(rec, weighted)?;
            Ok(LossVars {
                total,
                rec,
                attn: Some(attn),
            })
        }
        _ => Ok(LossVars {
            total: rec,
            rec,
            attn: None,
        }),
    }
}

/// Decomposed objective value for one window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub rec: f64,
    pub attn: f64,
    pub total: f64,
}

/// Plain evaluation of `‖x − x̂‖²_F − λ·Σ sacon`.
pub fn loss_total(x: &Tensor, x_hat: &Tensor, sacon: &[f64], lambda: f64) -> Result<LossParts> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    if x.shape() != x_hat.shape() {
        return Err(Error::dim("loss_total", x.shape(), x_hat.shape()));
    }
    if sacon.len() != x.rows() {
        return Err(Error::dim("loss_total", x.shape(), &[sacon.len()]));
    }
    let rec: f64 = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let attn: f64 = sacon.iter().sum();
    Ok(LossParts {
        rec,
        attn,
        total: rec - lambda * attn,
    })
}

/// Per-epoch record; losses are means per window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_rec: f64,
    pub loss_attn: f64,
    pub loss_total: f64,
    pub val_loss: f64,
    pub mean_sacon: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    /// Validation loss and mean SACon of the freshly initialized model.
    pub initial_val_loss: f64,
    pub initial_mean_sacon: f64,
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Number of times the attention term entered a training objective.
    pub attention_loss_evaluations: u64,
    pub optimizer_steps: u64,
    pub skipped_steps: u64,
    pub warnings: Vec<String>,
}

impl TrainingLog {
    pub const CSV_HEADER: &'static str = "epoch,loss_rec,loss_attn,loss_total,val_loss,mean_sacon";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                e.epoch, e.loss_rec, e.loss_attn, e.loss_total, e.val_loss, e.mean_sacon
            );
        }
        out
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }
}

/// Validation loss and mean SACon of `model` over `windows`.
pub fn evaluate_windows(model: &Model, windows: &[Window], lambda: f64) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut sacon = 0.0;
    for w in windows {
        let (x_hat, state) = model.forward(&w.data)?;
        let s = state.mean_sacon();
        let parts = loss_total(&w.data, &x_hat, &s, lambda)?;
        loss += parts.total;
        sacon += s.iter().sum::<f64>() / s.len() as f64;
    }
    let n = windows.len().max(1) as f64;
    Ok((loss / n, sacon / n))
}

/// Trains a model on a normalized T×D series.
///
/// Windows are split into a training part and a trailing validation part;
/// each epoch visits the training windows in a seeded shuffled order. The
/// parameters with the lowest validation loss are returned.
pub fn fit(series: &Tensor, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<(Model, TrainingLog)> {
    cfg.validate()?;
    model_cfg.validate()?;
    if series.cols() != model_cfg.n_channels {
        return Err(Error::dim(
            "fit",
            series.shape(),
            &[model_cfg.win_size, model_cfg.n_channels],
        ));
    }
    let mut windows = make_windows(series, model_cfg.win_size, WindowMode::Training)?;
    let keep = ((windows.len() as f64 * cfg.subsample_ratio).ceil() as usize).max(1);
    windows.truncate(keep);
    if windows.len() < 2 {
        return Err(Error::Input(format!(
            "need at least two training windows of {} steps, have {}",
            model_cfg.win_size,
            windows.len()
        )));
    }
    let n_val = ((windows.len() as f64 * cfg.val_fraction).round() as usize).clamp(1, windows.len() - 1);
    let val = windows.split_off(windows.len() - n_val);
    let train = windows;

    let mut model = Model::init(*model_cfg, cfg.seed)?;
    let mut adam = AdamState::new(model.params.iter(), cfg.lr);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));

    let mut log = TrainingLog::default();
    let (v0, s0) = evaluate_windows(&model, &val, cfg.lambda)?;
    log.initial_val_loss = v0;
    log.initial_mean_sacon = s0;

    let mut best = (f64::INFINITY, model.params.clone());
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut rec_sum, mut attn_sum, mut total_sum) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut grads: Option<Vec<Tensor>> = None;
            for &wi in batch {
                let mut tape = Tape::new();
                let p = model.params.register(&mut tape);
                let x = tape.constant(train[wi].data.clone());
                let rng = (model_cfg.dropout > 0.0).then_some(&mut dropout_rng);
                let fv = model.forward_tape(&mut tape, &p, x, rng)?;
                let sacon = if cfg.lambda > 0.0 {
                    log.attention_loss_evaluations += 1;
                    Some(model.mean_sacon_tape(&mut tape, &fv.attention)?)
                } else {
                    None
                };
                let lv = loss_total_tape(&mut tape, x, fv.x_hat, sacon, cfg.lambda)?;
                let (rec, total) = (tape.value(lv.rec).data()[0], tape.value(lv.total).data()[0]);
                let attn = lv.attn.map_or(0.0, |a| tape.value(a).data()[0]);
                if !total.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite loss at epoch {epoch}, window starting at t={}: \
                         loss_rec={rec}, loss_attn={attn}, loss_total={total}",
                        train[wi].start
                    )));
                }
                rec_sum += rec;
                attn_sum += attn;
                total_sum += total;

                let scaled = tape.scale(lv.total, scale);
                tape.backward(scaled)?;
                let g = p.grads(&tape);
                match grads.as_mut() {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            let grads = grads.expect("batches are non-empty");
            let mut params: Vec<&mut Tensor> = model.params.iter_mut().collect();
            match adam_step(&mut params, &grads, &mut adam) {
                Ok(()) => log.optimizer_steps += 1,
                Err(Error::Numerical(msg)) => {
                    log.skipped_steps += 1;
                    log.warnings.push(format!("epoch {epoch}: {msg}"));
                }
                Err(e) => return Err(e),
            }
            model.params.floor_tau(TAU_FLOOR);
        }

        let n = train.len() as f64;
        let (val_loss, mean_sacon) = evaluate_windows(&model, &val, cfg.lambda)?;
        if !val_loss.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite validation loss after epoch {epoch}"
            )));
        }
        log.epochs.push(EpochRecord {
            epoch,
            loss_rec: rec_sum / n,
            loss_attn: attn_sum / n,
            loss_total: total_sum / n,
            val_loss,
            mean_sacon,
        });
        if val_loss < best.0 {
            best = (val_loss, model.params.clone());
            log.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                log.stopped_early = epoch < cfg.max_epochs;
                break;
            }
        }
    }
    model.params = best.1;
    Ok((model, log))
}
