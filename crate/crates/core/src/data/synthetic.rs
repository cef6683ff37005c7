//! Univariate sinusoid with five injected anomaly types.
//!
//! Magnitudes are in units of the clean signal's standard deviation
//! `amplitude/√2`, except shapelet (amplitude factor of the square wave)
//! and seasonal (frequency factor).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::TimeSeriesDataset;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    /// Isolated point far outside the signal's range.
    Global,
    /// Point pushed across the signal, staying inside its range.
    Contextual,
    /// Segment replaced by a square wave in phase with the base signal.
    Shapelet,
    /// Segment oscillating at a multiple of the base frequency.
    Seasonal,
    /// Segment with a linear drift added.
    Trend,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 5] = [
        AnomalyKind::Global,
        AnomalyKind::Contextual,
        AnomalyKind::Shapelet,
        AnomalyKind::Seasonal,
        AnomalyKind::Trend,
    ];

    pub fn is_point(self) -> bool {
        matches!(self, AnomalyKind::Global | AnomalyKind::Contextual)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalySpec {
    pub kind: AnomalyKind,
    /// First perturbed test index.
    pub position: usize,
    pub span: usize,
    pub magnitude: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaseSignal {
    /// Cycles per timestep.
    pub frequency: f64,
    pub amplitude: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
}

impl Default for BaseSignal {
    fn default() -> Self {
        Self {
            frequency: 0.04,
            amplitude: 1.5,
            noise: 0.05,
        }
    }
}

/// Random placement of anomalies up to a target label rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Placement {
    pub target_rate: f64,
    pub min_span: usize,
    pub max_span: usize,
    /// Minimum number of clean points between anomalies.
    pub min_gap: usize,
}

impl Placement {
    /// No random anomalies.
    pub const NONE: Placement = Placement {
        target_rate: 0.0,
        min_span: 20,
        max_span: 60,
        min_gap: 10,
    };
}

impl Default for Placement {
    fn default() -> Self {
        Self {
            target_rate: 0.2244,
            min_span: 20,
            max_span: 60,
            min_gap: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub name: String,
    pub seed: u64,
    pub train_length: usize,
    /// Test length.
    pub length: usize,
    pub base: BaseSignal,
    pub anomalies: Vec<AnomalySpec>,
    /// Random anomalies added by [`SyntheticSpec::resolve`]; a zero
    /// `target_rate` disables it.
    pub placement: Placement,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            name: "neurips-ts".into(),
            seed: 0,
            train_length: 20_000,
            length: 20_000,
            base: BaseSignal::default(),
            anomalies: Vec::new(),
            placement: Placement::default(),
        }
    }
}

impl SyntheticSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("synthetic spec: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec is plain data")
    }

    pub fn label_mass(&self) -> usize {
        self.anomalies.iter().map(|a| a.span).sum()
    }

    pub fn anomaly_rate(&self) -> f64 {
        self.label_mass() as f64 / self.length as f64
    }

    /// Explicit anomaly list, extended by `placement` when it is enabled.
    /// The result has placement disabled and is fixed by the seed.
    pub fn resolve(&self) -> Result<SyntheticSpec> {
        let mut out = self.clone();
        if self.placement.target_rate > 0.0 {
            out.anomalies.extend(place(&self.placement, self.length, self.seed)?);
            out.anomalies.sort_by_key(|a| a.position);
            out.placement.target_rate = 0.0;
        }
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_length == 0 || self.length == 0 {
            return Err(Error::Config("synthetic lengths must be positive".into()));
        }
        let b = &self.base;
        if !(b.frequency.is_finite() && b.amplitude > 0.0 && b.noise >= 0.0) {
            return Err(Error::Config(format!("invalid base signal {b:?}")));
        }
        let mut sorted: Vec<&AnomalySpec> = self.anomalies.iter().collect();
        sorted.sort_by_key(|a| a.position);
        for a in &sorted {
            if a.span == 0 || a.position + a.span > self.length {
                return Err(Error::Config(format!(
                    "{:?} anomaly at {} with span {} falls outside 0..{}",
                    a.kind, a.position, a.span, self.length
                )));
            }
            if a.kind.is_point() && a.span != 1 {
                return Err(Error::Config(format!(
                    "{:?} is a point anomaly, span must be 1 (got {} at {})",
                    a.kind, a.span, a.position
                )));
            }
            if !a.magnitude.is_finite() {
                return Err(Error::Config(format!("anomaly at {} has non-finite magnitude", a.position)));
            }
        }
        for w in sorted.windows(2) {
            if w[0].position + w[0].span > w[1].position {
                return Err(Error::Config(format!(
                    "anomalies at {} (span {}) and {} overlap",
                    w[0].position, w[0].span, w[1].position
                )));
            }
        }
        Ok(())
    }
}

fn place(p: &Placement, length: usize, seed: u64) -> Result<Vec<AnomalySpec>> {
    if !(0.0..1.0).contains(&p.target_rate) || p.min_span == 0 || p.min_span > p.max_span {
        return Err(Error::Config(format!("invalid placement {p:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a40a_11e5);
    let target = (p.target_rate * length as f64).round() as usize;

    let mut kinds = Vec::new();
    let mut mass = 0;
    let mut order = AnomalyKind::ALL;
    while mass < target {
        order.shuffle(&mut rng);
        for kind in order {
            if mass >= target {
                break;
            }
            let span = if kind.is_point() {
                1
            } else {
                rng.random_range(p.min_span..=p.max_span).min(target - mass)
            };
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let magnitude = match kind {
                AnomalyKind::Global => sign * rng.random_range(3.0..5.0),
                AnomalyKind::Contextual => rng.random_range(1.2..1.8),
                AnomalyKind::Shapelet => 1.0,
                AnomalyKind::Seasonal => rng.random_range(2.5..4.0),
                AnomalyKind::Trend => sign * rng.random_range(1.5..3.0),
            };
            kinds.push((kind, span, magnitude));
            mass += span;
        }
    }

    let gaps = kinds.len() + 1;
    let needed = mass + gaps * p.min_gap;
    if needed > length {
        return Err(Error::Config(format!(
            "placement needs {needed} points but the series has {length}"
        )));
    }
    let weights: Vec<f64> = (0..gaps).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = weights.iter().sum();
    let spare = (length - needed) as f64;
    let mut t = 0;
    let mut out = Vec::with_capacity(kinds.len());
    for ((kind, span, magnitude), w) in kinds.into_iter().zip(&weights) {
        t += p.min_gap + (w / total * spare).floor() as usize;
        out.push(AnomalySpec {
            kind,
            position: t,
            span,
            magnitude,
        });
        t += span;
    }
    Ok(out)
}

/// Builds the train/test pair; train is anomaly-free.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<TimeSeriesDataset> {
    let spec = spec.resolve()?;
    let b = spec.base;
    let omega = 2.0 * std::f64::consts::PI * b.frequency;
    let clean = |t: usize| b.amplitude * (omega * t as f64).sin();
    let sigma = b.amplitude * std::f64::consts::FRAC_1_SQRT_2;
    let noise = Normal::new(0.0, b.noise).map_err(|e| Error::Config(format!("noise: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let train: Vec<f64> = (0..spec.train_length)
        .map(|t| clean(t) + noise.sample(&mut rng))
        .collect();

    // test time continues where train stopped
    let offset = spec.train_length;
    let mut test: Vec<f64> = (0..spec.length).map(|t| clean(offset + t)).collect();
    let mut labels = vec![false; spec.length];
    for a in &spec.anomalies {
        let seg = a.position..a.position + a.span;
        labels[seg.clone()].iter_mut().for_each(|l| *l = true);
        for t in seg {
            let abs = (offset + t) as f64;
            let rel = (t - a.position) as f64;
            test[t] = match a.kind {
                AnomalyKind::Global => a.magnitude * sigma,
                AnomalyKind::Contextual => {
                    let v = test[t];
                    let dir = if v == 0.0 { a.magnitude.signum() } else { v.signum() };
                    (v - dir * a.magnitude.abs() * sigma).clamp(-b.amplitude, b.amplitude)
                }
                AnomalyKind::Shapelet => {
                    let s = (omega * abs).sin();
                    a.magnitude * b.amplitude * if s >= 0.0 { 1.0 } else { -1.0 }
                }
                AnomalyKind::Seasonal => {
                    let phase = omega * (offset + a.position) as f64;
                    b.amplitude * (phase + omega * a.magnitude * rel).sin()
                }
                AnomalyKind::Trend => test[t] + a.magnitude * sigma * (rel + 1.0) / a.span as f64,
            };
        }
    }
    for v in &mut test {
        *v += noise.sample(&mut rng);
    }

    TimeSeriesDataset::new(
        spec.name.clone(),
        vec!["value".into()],
        Tensor::new(vec![spec.train_length, 1], train)?,
        Tensor::new(vec![spec.length, 1], test)?,
        labels,
    )
}
