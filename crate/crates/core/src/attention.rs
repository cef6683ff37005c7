//! Linear attention with a learnable row-softmax mapping, and the
//! sub-adjacent attention contribution (SACon) of an attention matrix.
//!
//! Attention matrices are indexed `a[row = query j][col = key i]`, so column
//! `i` holds how much point `i` contributes to reconstructing every other
//! point of the window. The contribution of point `i` is the sum of its
//! column restricted to rows whose distance to `i` lies in `[k1, k2]`, with
//! row indices wrapped around the window so every column sees the same
//! number of cells.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};

/// Sub-adjacent neighbourhood bounds for a window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubAdjacentSpan {
    pub k1: usize,
    pub k2: usize,
    pub win_size: usize,
}

impl SubAdjacentSpan {
    pub fn new(k1: usize, k2: usize, win_size: usize) -> Result<Self> {
        let span = Self { k1, k2, win_size };
        span.validate()?;
        Ok(span)
    }

    pub fn validate(&self) -> Result<()> {
        if self.win_size == 0 || self.k1 > self.k2 || self.k2 >= self.win_size {
            return Err(Error::Config(format!(
                "sub-adjacent span needs 0 <= k1 <= k2 < win_size, got k1={}, k2={}, win_size={}",
                self.k1, self.k2, self.win_size
            )));
        }
        Ok(())
    }

    /// Signed row offsets `j - i` inside the span, each listed once.
    pub fn offsets(&self) -> Vec<isize> {
        let (k1, k2) = (self.k1 as isize, self.k2 as isize);
        let mut out: Vec<isize> = (-k2..=-k1).collect();
        // with k1 = 0 the zero offset already came from the negative side
        out.extend(k1.max(1)..=k2);
        out
    }

    /// Number of source rows each column aggregates under wrapping.
    pub fn cells_per_column(&self) -> usize {
        self.offsets().len()
    }

    /// Multiplicity of every cell in the wrapped stripe pattern: entry
    /// `[r][i]` counts the source rows `j` with `k1 <= |j - i| <= k2` and
    /// `j mod win == r`.
    pub fn wrapped_mask(&self) -> Tensor {
        let n = self.win_size;
        let offsets = self.offsets();
        let mut mask = Tensor::zeros(&[n, n]);
        let data = mask.data_mut();
        for i in 0..n {
            for &d in &offsets {
                let r = (i as isize + d).rem_euclid(n as isize) as usize;
                data[r * n + i] += 1.0;
            }
        }
        mask
    }

    /// Stripe pattern without wrapping: rows outside `[0, win)` are dropped,
    /// so marginal columns aggregate fewer cells.
    pub fn unwrapped_mask(&self) -> Tensor {
        let n = self.win_size;
        let mut mask = Tensor::zeros(&[n, n]);
        let data = mask.data_mut();
        for i in 0..n {
            for &d in &self.offsets() {
                let r = i as isize + d;
                if (0..n as isize).contains(&r) {
                    data[r as usize * n + i] += 1.0;
                }
            }
        }
        mask
    }
}

/// Mapping function applied to queries and keys before their product.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingKind {
    /// Negative entries clamped, then row softmax with learnable temperature.
    LearnableRowSoftmax,
    /// Row softmax on queries, softmax over the sequence axis on keys.
    ColumnSoftmax,
    /// `max(x, 0)^3`.
    Power,
    Relu,
    EluPlusOne,
    /// Standard scaled dot-product attention (no mapping).
    VanillaSelfAttention,
}

impl MappingKind {
    pub const ALL: [MappingKind; 6] = [
        MappingKind::LearnableRowSoftmax,
        MappingKind::ColumnSoftmax,
        MappingKind::Power,
        MappingKind::Relu,
        MappingKind::EluPlusOne,
        MappingKind::VanillaSelfAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MappingKind::LearnableRowSoftmax => "learnable_row_softmax",
            MappingKind::ColumnSoftmax => "column_softmax",
            MappingKind::Power => "power",
            MappingKind::Relu => "relu",
            MappingKind::EluPlusOne => "elu_plus_one",
            MappingKind::VanillaSelfAttention => "vanilla_self_attention",
        }
    }

    /// Whether the mapping carries a learnable temperature.
    pub fn uses_tau(self) -> bool {
        matches!(self, MappingKind::LearnableRowSoftmax)
    }
}

impl std::str::FromStr for MappingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MappingKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mapping kind `{s}`")))
    }
}

pub const POWER_EXPONENT: f64 = 3.0;
pub const TAU_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MappingConfig {
    pub kind: MappingKind,
    pub clamp_value: f64,
    pub tau_init: f64,
    /// Divide each attention row by its sum (standard linear-attention
    /// normalizer). Off by default: the mapped factors are used as-is.
    pub renormalize: bool,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            kind: MappingKind::LearnableRowSoftmax,
            clamp_value: -100.0,
            tau_init: 1.0,
            renormalize: false,
        }
    }
}

impl MappingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clamp_value < 0.0) {
            return Err(Error::Config(format!(
                "clamp_value must be negative, got {}",
                self.clamp_value
            )));
        }
        if !(self.tau_init >= TAU_FLOOR) {
            return Err(Error::Config(format!(
                "tau_init must be at least {TAU_FLOOR}, got {}",
                self.tau_init
            )));
        }
        Ok(())
    }
}

/// Which operand a mapping is applied to; only column softmax treats the
/// two differently.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Query,
    Key,
}

const RENORM_EPS: f64 = 1e-12;

/// Applies the mapping Φ to a rows×d block of queries or keys.
///
/// `tau` must be a single-element variable for the learnable row softmax and
/// is ignored by the other kinds.
pub fn map_phi(tape: &mut Tape, x: Var, tau: Option<Var>, cfg: &MappingConfig, side: Side) -> Result<Var> {
    match cfg.kind {
        MappingKind::LearnableRowSoftmax => {
            let tau = tau.ok_or_else(|| {
                Error::Config("learnable_row_softmax mapping needs a temperature".into())
            })?;
            // negative entries become the sentinel before the temperature is applied
            let clamped = tape.clamp_negative(x, cfg.clamp_value);
            let scaled = tape.div_scalar(clamped, tau)?;
            Ok(tape.softmax_last(scaled))
        }
        MappingKind::ColumnSoftmax => match side {
            Side::Query => Ok(tape.softmax_last(x)),
            Side::Key => tape.softmax_cols(x),
        },
        MappingKind::Power => Ok(tape.pow_relu(x, POWER_EXPONENT)),
        MappingKind::Relu => Ok(tape.relu(x)),
        MappingKind::EluPlusOne => Ok(tape.elu_plus_one(x)),
        MappingKind::VanillaSelfAttention => Err(Error::Config(
            "vanilla self-attention has no mapping function".into(),
        )),
    }
}

/// One attention head: returns `(a · v, a)`.
///
/// For mapped kinds `a = Φ(q) Φ(k)ᵀ` (optionally row-normalized); for
/// vanilla attention `a = softmax_rows(q kᵀ / √d)`.
pub fn linear_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    tau: Option<Var>,
    cfg: &MappingConfig,
) -> Result<(Var, Var)> {
    let (sq, sk, sv) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if sq.len() != 2 || sq != sk || sv.len() != 2 || sv[0] != sq[0] {
        return Err(Error::dim("linear_attention", &sq, &sk).with_context(&sv));
    }
    let a = match cfg.kind {
        MappingKind::VanillaSelfAttention => {
            let scores = tape.matmul_nt(q, k)?;
            let scaled = tape.scale(scores, 1.0 / (sq[1] as f64).sqrt());
            tape.softmax_last(scaled)
        }
        _ => {
            let pq = map_phi(tape, q, tau, cfg, Side::Query)?;
            let pk = map_phi(tape, k, tau, cfg, Side::Key)?;
            let raw = tape.matmul_nt(pq, pk)?;
            if cfg.renormalize {
                tape.row_normalize(raw, RENORM_EPS)?
            } else {
                raw
            }
        }
    };
    let out = tape.matmul(a, v)?;
    Ok((out, a))
}

impl Error {
    fn with_context(self, extra: &[usize]) -> Self {
        match self {
            Error::Dimension { op, left, mut right } => {
                right.extend_from_slice(extra);
                Error::Dimension { op, left, right }
            }
            other => other,
        }
    }
}

fn check_square(shape: &[usize], span: &SubAdjacentSpan) -> Result<()> {
    span.validate()?;
    if shape != [span.win_size, span.win_size] {
        return Err(Error::dim("sacon", shape, &[span.win_size, span.win_size]));
    }
    Ok(())
}

/// Differentiable SACon of a win×win attention matrix on the tape.
pub fn sacon(tape: &mut Tape, a: Var, span: &SubAdjacentSpan) -> Result<Var> {
    check_square(tape.shape(a), span)?;
    sacon_masked(tape, a, span.wrapped_mask())
}

/// Same as [`sacon`] with a precomputed [`SubAdjacentSpan::wrapped_mask`].
pub fn sacon_masked(tape: &mut Tape, a: Var, mask: Tensor) -> Result<Var> {
    let weighted = tape.mul_const(a, mask)?;
    tape.sum_axis0(weighted)
}

/// SACon of a plain attention matrix (wrapped form).
pub fn sacon_values(a: &Tensor, span: &SubAdjacentSpan) -> Result<Vec<f64>> {
    check_square(a.shape(), span)?;
    Ok(masked_column_sums(a, &span.wrapped_mask()))
}

/// SACon without wrapping: rows outside the window are simply dropped.
pub fn sacon_unwrapped(a: &Tensor, span: &SubAdjacentSpan) -> Result<Vec<f64>> {
    check_square(a.shape(), span)?;
    Ok(masked_column_sums(a, &span.unwrapped_mask()))
}

fn masked_column_sums(a: &Tensor, mask: &Tensor) -> Vec<f64> {
    let n = a.cols();
    let mut out = vec![0.0; n];
    for (ar, mr) in a.data().chunks(n).zip(mask.data().chunks(n)) {
        for i in 0..n {
            out[i] += ar[i] * mr[i];
        }
    }
    out
}

/// SACon computed by cyclically shifting the mapped queries instead of
/// materializing the attention matrix. Only defined for mapped kinds
/// without row renormalization; used to cross-check [`sacon`].
pub fn sacon_via_roll(
    q: &Tensor,
    k: &Tensor,
    tau: Option<f64>,
    cfg: &MappingConfig,
    span: &SubAdjacentSpan,
) -> Result<Vec<f64>> {
    if cfg.kind == MappingKind::VanillaSelfAttention || cfg.renormalize {
        return Err(Error::Config(
            "the shift formulation needs an unnormalized product of mapped factors".into(),
        ));
    }
    span.validate()?;
    if q.shape() != k.shape() || q.ndim() != 2 || q.rows() != span.win_size {
        return Err(Error::dim("sacon_via_roll", q.shape(), k.shape()));
    }
    let mut tape = Tape::new();
    let qv = tape.constant(q.clone());
    let kv = tape.constant(k.clone());
    let tv = tau.map(|t| tape.constant(Tensor::scalar(t)));
    let pq = map_phi(&mut tape, qv, tv, cfg, Side::Query)?;
    let pk = map_phi(&mut tape, kv, tv, cfg, Side::Key)?;
    let (pq, pk) = (tape.value(pq), tape.value(pk));

    let n = span.win_size;
    let mut out = vec![0.0; n];
    for d in span.offsets() {
        let rolled = roll_rows(pq, -d);
        for (i, o) in out.iter_mut().enumerate() {
            *o += rolled.row(i).iter().zip(pk.row(i)).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Ok(out)
}

/// Cyclic shift of rows: `out[r] = x[(r - shift) mod rows]`.
pub fn roll_rows(x: &Tensor, shift: isize) -> Tensor {
    let (r, c) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(x.shape());
    for i in 0..r {
        let src = (i as isize - shift).rem_euclid(r as isize) as usize;
        out.data_mut()[i * c..(i + 1) * c].copy_from_slice(x.row(src));
    }
    out
}

/// Attention matrix and SACon vector of one head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadAttention {
    pub a: Tensor,
    pub sacon: Vec<f64>,
}

/// Per-layer, per-head attention for one window.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionState {
    pub layers: Vec<Vec<HeadAttention>>,
}

impl AttentionState {
    /// SACon averaged over all heads and layers.
    pub fn mean_sacon(&self) -> Vec<f64> {
        let heads: Vec<&HeadAttention> = self.layers.iter().flatten().collect();
        let Some(first) = heads.first() else {
            return Vec::new();
        };
        let mut out = vec![0.0; first.sacon.len()];
        for h in &heads {
            out.iter_mut().zip(&h.sacon).for_each(|(o, s)| *o += s);
        }
        let n = heads.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_sacon(a: &Tensor, k1: usize, k2: usize) -> Vec<f64> {
        let n = a.rows() as isize;
        (0..n)
            .map(|i| {
                let mut s = 0.0;
                for j in (-n + 1)..(2 * n - 1) {
                    let d = (j - i).abs();
                    if d >= k1 as isize && d <= k2 as isize {
                        let wrapped = j.rem_euclid(n) as usize;
                        s += a.get2(wrapped, i as usize);
                    }
                }
                s
            })
            .collect()
    }

    #[test]
    fn span_validation() {
        assert!(SubAdjacentSpan::new(20, 30, 100).is_ok());
        assert!(SubAdjacentSpan::new(0, 0, 100).is_ok());
        assert!(SubAdjacentSpan::new(3, 2, 100).is_err());
        assert!(SubAdjacentSpan::new(1, 100, 100).is_err());
    }

    #[test]
    fn identity_excluded_when_k1_positive() {
        let span = SubAdjacentSpan::new(1, 3, 10).unwrap();
        let s = sacon_values(&Tensor::eye(10), &span).unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn diagonal_span_reads_diagonal() {
        let span = SubAdjacentSpan::new(0, 0, 5).unwrap();
        assert_eq!(span.cells_per_column(), 1);
        let s = sacon_values(&Tensor::eye(5), &span).unwrap();
        assert_eq!(s, vec![1.0; 5]);
    }

    #[test]
    fn uniform_matrix_default_span() {
        let span = SubAdjacentSpan::new(20, 30, 100).unwrap();
        let a = Tensor::filled(&[100, 100], 0.01);
        let s = sacon_values(&a, &span).unwrap();
        let oracle = brute_force_sacon(&a, 20, 30);
        for (x, y) in s.iter().zip(&oracle) {
            assert!((x - 0.22).abs() < 1e-12);
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn wide_span_counts_wrapped_cells_per_source() {
        // k2 >= win/2: several source rows land on the same wrapped cell.
        let span = SubAdjacentSpan::new(1, 9, 10).unwrap();
        assert_eq!(span.cells_per_column(), 18);
        let mask = span.wrapped_mask();
        for i in 0..10 {
            let col: f64 = (0..10).map(|r| mask.get2(r, i)).sum();
            assert_eq!(col, 18.0);
        }
        let a = Tensor::filled(&[10, 10], 1.0);
        assert_eq!(sacon_values(&a, &span).unwrap(), brute_force_sacon(&a, 1, 9));
    }

    #[test]
    fn map_phi_row_softmax_examples() {
        let cfg = MappingConfig::default();
        let mut tape = Tape::new();
        let tau = tape.constant(Tensor::scalar(1.0));
        let zeros = tape.constant(Tensor::zeros(&[1, 4]));
        let y = map_phi(&mut tape, zeros, Some(tau), &cfg, Side::Query).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let x = tape.constant(Tensor::from_rows(&[[1.0, -0.5]]).unwrap());
        let y = map_phi(&mut tape, x, Some(tau), &cfg, Side::Query).unwrap();
        let e = (-101.0f64).exp();
        let oracle = [1.0 / (1.0 + e), e / (1.0 + e)];
        for (v, o) in tape.value(y).data().iter().zip(oracle) {
            assert!((v - o).abs() < 1e-9);
        }
    }

    #[test]
    fn map_phi_flattens_with_temperature() {
        let cfg = MappingConfig::default();
        let mut prev_max = 1.0;
        for t in [0.5, 1.0, 2.0, 10.0, 100.0, 1e4] {
            let mut tape = Tape::new();
            let tau = tape.constant(Tensor::scalar(t));
            let x = tape.constant(Tensor::from_rows(&[[1.0, 2.0, 3.0]]).unwrap());
            let y = map_phi(&mut tape, x, Some(tau), &cfg, Side::Query).unwrap();
            let m = tape.value(y).data().iter().copied().fold(0.0, f64::max);
            assert!(m < prev_max);
            prev_max = m;
        }
        assert!((prev_max - 1.0 / 3.0).abs() < 1e-3);
    }

    #[test]
    fn learnable_mapping_requires_tau() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 2]));
        let err = map_phi(&mut tape, x, None, &MappingConfig::default(), Side::Query);
        assert!(matches!(err, Err(Error::Config(_))));
        assert!("softmax_everything".parse::<MappingKind>().is_err());
        assert_eq!("relu".parse::<MappingKind>().unwrap(), MappingKind::Relu);
    }

    #[test]
    fn one_hot_factors_give_identity() {
        // Large positive diagonal entries make the row softmax one-hot.
        let mut q = Tensor::filled(&[4, 4], 0.0);
        for i in 0..4 {
            q.set2(i, i, 200.0);
        }
        let v = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]]).unwrap();
        let mut tape = Tape::new();
        let tau = tape.constant(Tensor::scalar(1.0));
        let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(q), tape.constant(v.clone()));
        let (out, a) = linear_attention(&mut tape, qv, kv, vv, Some(tau), &MappingConfig::default()).unwrap();
        for (x, y) in tape.value(a).data().iter().zip(Tensor::eye(4).data()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in tape.value(out).data().iter().zip(v.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_shape_mismatch() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::zeros(&[4, 2]));
        let k = tape.constant(Tensor::zeros(&[4, 3]));
        let v = tape.constant(Tensor::zeros(&[4, 2]));
        let r = linear_attention(&mut tape, q, k, v, None, &MappingConfig {
            kind: MappingKind::Relu,
            ..Default::default()
        });
        assert!(matches!(r, Err(Error::Dimension { .. })));
    }

    #[test]
    fn mean_sacon_averages_heads() {
        let h = |s: Vec<f64>| HeadAttention { a: Tensor::zeros(&[2, 2]), sacon: s };
        let st = AttentionState {
            layers: vec![vec![h(vec![1.0, 2.0]), h(vec![3.0, 4.0])], vec![h(vec![5.0, 0.0])]],
        };
        assert_eq!(st.mean_sacon(), vec![3.0, 2.0]);
    }
}
