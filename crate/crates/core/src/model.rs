//! Encoder stack: linear input embedding with sinusoidal positions,
//! pre-norm multi-head linear-attention blocks, and a linear reconstruction
//! head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    linear_attention, sacon_masked, AttentionState, HeadAttention, MappingConfig, SubAdjacentSpan,
};
use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub win_size: usize,
    pub n_channels: usize,
    pub span: SubAdjacentSpan,
    pub mapping: MappingConfig,
    pub dropout: f64,
}

impl ModelConfig {
    /// Full-size defaults: d_model 512, 3 layers, 8 heads, window 100, span 20..30.
    pub fn new(n_channels: usize) -> Self {
        Self {
            d_model: 512,
            n_layers: 3,
            n_heads: 8,
            d_ff: 2048,
            win_size: 100,
            n_channels,
            span: SubAdjacentSpan {
                k1: 20,
                k2: 30,
                win_size: 100,
            },
            mapping: MappingConfig::default(),
            dropout: 0.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("win_size", self.win_size),
            ("n_channels", self.n_channels),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.span.win_size != self.win_size {
            return Err(Error::Config(format!(
                "span window {} differs from model window {}",
                self.span.win_size, self.win_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        self.span.validate()?;
        self.mapping.validate()
    }
}

/// Parameters of one encoder block, generic over the stored value so the
/// same layout serves tensors, tape variables and gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gamma: T,
    pub ln1_beta: T,
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    pub ln2_gamma: T,
    pub ln2_beta: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
    /// One temperature per head.
    pub tau: Vec<T>,
}

const LAYER_FIELDS: [&str; 16] = [
    "ln1_gamma",
    "ln1_beta",
    "wq",
    "bq",
    "wk",
    "bk",
    "wv",
    "bv",
    "wo",
    "bo",
    "ln2_gamma",
    "ln2_beta",
    "w1",
    "b1",
    "w2",
    "b2",
];

impl<T> LayerParams<T> {
    fn fixed(&self) -> [&T; 16] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> {
        let LayerParams {
            ln1_gamma,
            ln1_beta,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln2_gamma,
            ln2_beta,
            w1,
            b1,
            w2,
            b2,
            tau,
        } = self;
        [
            ln1_gamma, ln1_beta, wq, bq, wk, bk, wv, bv, wo, bo, ln2_gamma, ln2_beta, w1, b1, w2,
            b2,
        ]
        .into_iter()
        .chain(tau.iter_mut())
    }

    fn from_iter<U>(n_heads: usize, it: &mut impl Iterator<Item = U>) -> Result<LayerParams<U>> {
        let mut next = || {
            it.next()
                .ok_or_else(|| Error::Contract("parameter list too short".into()))
        };
        Ok(LayerParams {
            ln1_gamma: next()?,
            ln1_beta: next()?,
            wq: next()?,
            bq: next()?,
            wk: next()?,
            bk: next()?,
            wv: next()?,
            bv: next()?,
            wo: next()?,
            bo: next()?,
            ln2_gamma: next()?,
            ln2_beta: next()?,
            w1: next()?,
            b1: next()?,
            w2: next()?,
            b2: next()?,
            tau: (0..n_heads).map(|_| next()).collect::<Result<_>>()?,
        })
    }
}

/// All learnable parameters. The positional table is fixed and rebuilt
/// from the configuration rather than stored.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    pub w_in: T,
    pub b_in: T,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_gamma: T,
    pub lnf_beta: T,
    pub w_out: T,
    pub b_out: T,
}

pub type ModelParams = ParamSet<Tensor>;

impl<T> ParamSet<T> {
    /// Every parameter in canonical order.
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        let head = [&self.w_in, &self.b_in];
        let layers = self
            .layers
            .iter()
            .flat_map(|l| l.fixed().into_iter().chain(l.tau.iter()));
        let tail = [&self.lnf_gamma, &self.lnf_beta, &self.w_out, &self.b_out];
        head.into_iter().chain(layers).chain(tail)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> {
        let ParamSet {
            w_in,
            b_in,
            layers,
            lnf_gamma,
            lnf_beta,
            w_out,
            b_out,
        } = self;
        [w_in, b_in]
            .into_iter()
            .chain(layers.iter_mut().flat_map(LayerParams::iter_mut))
            .chain([lnf_gamma, lnf_beta, w_out, b_out])
    }

    /// Parameter names in canonical order.
    pub fn names(&self) -> Vec<String> {
        let mut out = vec!["w_in".to_string(), "b_in".to_string()];
        for (li, l) in self.layers.iter().enumerate() {
            out.extend(LAYER_FIELDS.iter().map(|f| format!("layers.{li}.{f}")));
            out.extend((0..l.tau.len()).map(|h| format!("layers.{li}.tau.{h}")));
        }
        out.extend(["lnf_gamma", "lnf_beta", "w_out", "b_out"].map(String::from));
        out
    }

    pub fn len(&self) -> usize {
        self.iter().count()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Rebuilds the same layout from values given in canonical order.
    pub fn rebuild<U>(&self, values: impl IntoIterator<Item = U>) -> Result<ParamSet<U>> {
        let mut it = values.into_iter();
        let next = |it: &mut dyn Iterator<Item = U>| {
            it.next()
                .ok_or_else(|| Error::Contract("parameter list too short".into()))
        };
        let w_in = next(&mut it)?;
        let b_in = next(&mut it)?;
        let layers = self
            .layers
            .iter()
            .map(|l| LayerParams::<T>::from_iter(l.tau.len(), &mut it))
            .collect::<Result<Vec<_>>>()?;
        let out = ParamSet {
            w_in,
            b_in,
            layers,
            lnf_gamma: next(&mut it)?,
            lnf_beta: next(&mut it)?,
            w_out: next(&mut it)?,
            b_out: next(&mut it)?,
        };
        if it.next().is_some() {
            return Err(Error::Contract("parameter list too long".into()));
        }
        Ok(out)
    }
}

impl ModelParams {
    /// Xavier-uniform weights, zero biases, unit layer-norm scales and
    /// temperatures at `tau_init`; reproducible from `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xavier = |fan_in: usize, fan_out: usize| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            Tensor::new(vec![fan_in, fan_out], data).expect("sized")
        };
        let (d, ff, c) = (cfg.d_model, cfg.d_ff, cfg.n_channels);
        let w_in = xavier(c, d);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            layers.push(LayerParams {
                ln1_gamma: Tensor::filled(&[d], 1.0),
                ln1_beta: Tensor::zeros(&[d]),
                wq: xavier(d, d),
                bq: Tensor::zeros(&[d]),
                wk: xavier(d, d),
                bk: Tensor::zeros(&[d]),
                wv: xavier(d, d),
                bv: Tensor::zeros(&[d]),
                wo: xavier(d, d),
                bo: Tensor::zeros(&[d]),
                ln2_gamma: Tensor::filled(&[d], 1.0),
                ln2_beta: Tensor::zeros(&[d]),
                w1: xavier(d, ff),
                b1: Tensor::zeros(&[ff]),
                w2: xavier(ff, d),
                b2: Tensor::zeros(&[d]),
                tau: vec![Tensor::scalar(cfg.mapping.tau_init); cfg.n_heads],
            });
        }
        Ok(Self {
            w_in,
            b_in: Tensor::zeros(&[d]),
            layers,
            lnf_gamma: Tensor::filled(&[d], 1.0),
            lnf_beta: Tensor::zeros(&[d]),
            w_out: xavier(d, c),
            b_out: Tensor::zeros(&[c]),
        })
    }

    /// Checks every tensor against the shapes `cfg` implies.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = Self::init_shapes(cfg);
        if self.layers.len() != cfg.n_layers
            || self.layers.iter().any(|l| l.tau.len() != cfg.n_heads)
        {
            return Err(Error::Input(format!(
                "parameters have {} layers, configuration expects {} layers of {} heads",
                self.layers.len(),
                cfg.n_layers,
                cfg.n_heads
            )));
        }
        for ((name, t), shape) in self.names().iter().zip(self.iter()).zip(expected) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Input(format!(
                    "parameter {name} has shape {:?}, configuration expects {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    fn init_shapes(cfg: &ModelConfig) -> Vec<Vec<usize>> {
        let (d, ff, c) = (cfg.d_model, cfg.d_ff, cfg.n_channels);
        let mut out = vec![vec![c, d], vec![d]];
        for _ in 0..cfg.n_layers {
            out.extend([
                vec![d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d],
                vec![d],
                vec![d, ff],
                vec![ff],
                vec![ff, d],
                vec![d],
            ]);
            out.extend((0..cfg.n_heads).map(|_| vec![1]));
        }
        out.extend([vec![d], vec![d], vec![d, c], vec![c]]);
        out
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(Tensor::all_finite)
    }

    /// Raises every temperature to at least `floor`.
    pub fn floor_tau(&mut self, floor: f64) {
        for l in &mut self.layers {
            for t in &mut l.tau {
                for v in t.data_mut() {
                    if *v < floor {
                        *v = floor;
                    }
                }
            }
        }
    }

    /// Records every parameter as a gradient-tracking leaf.
    pub fn register(&self, tape: &mut Tape) -> ParamSet<Var> {
        self.rebuild(self.iter().map(|t| tape.leaf(t.clone(), true)).collect::<Vec<_>>())
            .expect("same layout")
    }
}

impl ParamSet<Var> {
    /// Gradients in canonical order; parameters the loss never reached get zeros.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.iter()
            .map(|&v| {
                tape.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
            })
            .collect()
    }
}

/// Sinusoidal position table of shape win×d.
pub fn positional_table(win: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[win, d]);
    for pos in 0..win {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            t.set2(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub x_hat: Var,
    /// Attention matrices, `[layer][head]`.
    pub attention: Vec<Vec<Var>>,
}

/// Configuration plus parameters, with the positional table cached.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ModelParams,
    pos: Tensor,
}

impl Model {
    pub fn new(cfg: ModelConfig, params: ModelParams) -> Result<Self> {
        cfg.validate()?;
        params.check_shapes(&cfg)?;
        let pos = positional_table(cfg.win_size, cfg.d_model);
        Ok(Self { cfg, params, pos })
    }

    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&cfg, seed)?;
        Self::new(cfg, params)
    }

    fn check_window(&self, shape: &[usize]) -> Result<()> {
        let want = [self.cfg.win_size, self.cfg.n_channels];
        if shape != want {
            return Err(Error::dim("forward", shape, &want));
        }
        Ok(())
    }

    /// Records the forward pass of one window on `tape`.
    ///
    /// `dropout_rng` enables dropout at `cfg.dropout`; pass `None` at inference.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        p: &ParamSet<Var>,
        x: Var,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardVars> {
        self.check_window(tape.shape(x))?;
        let cfg = &self.cfg;
        let dh = cfg.head_dim();

        let emb = tape.matmul(x, p.w_in)?;
        let emb = tape.add_row(emb, p.b_in)?;
        let pos = tape.constant(self.pos.clone());
        let mut h = tape.add(emb, pos)?;

        let mut attention = Vec::with_capacity(cfg.n_layers);
        for layer in &p.layers {
            let n = tape.layer_norm(h, layer.ln1_gamma, layer.ln1_beta, LN_EPS)?;
            let q = linear(tape, n, layer.wq, layer.bq)?;
            let k = linear(tape, n, layer.wk, layer.bk)?;
            let v = linear(tape, n, layer.wv, layer.bv)?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            let mut mats = Vec::with_capacity(cfg.n_heads);
            for (hi, &tau) in layer.tau.iter().enumerate() {
                let qs = tape.slice_cols(q, hi * dh, dh)?;
                let ks = tape.slice_cols(k, hi * dh, dh)?;
                let vs = tape.slice_cols(v, hi * dh, dh)?;
                let tau = cfg.mapping.kind.uses_tau().then_some(tau);
                let (o, a) = linear_attention(tape, qs, ks, vs, tau, &cfg.mapping)?;
                heads.push(o);
                mats.push(a);
            }
            let cat = tape.concat_cols(&heads)?;
            let o = linear(tape, cat, layer.wo, layer.bo)?;
            let o = dropout(tape, o, cfg.dropout, dropout_rng.as_deref_mut())?;
            h = tape.add(h, o)?;

            let n2 = tape.layer_norm(h, layer.ln2_gamma, layer.ln2_beta, LN_EPS)?;
            let f = linear(tape, n2, layer.w1, layer.b1)?;
            let f = tape.gelu(f);
            let f = linear(tape, f, layer.w2, layer.b2)?;
            let f = dropout(tape, f, cfg.dropout, dropout_rng.as_deref_mut())?;
            h = tape.add(h, f)?;
            attention.push(mats);
        }
        let n = tape.layer_norm(h, p.lnf_gamma, p.lnf_beta, LN_EPS)?;
        let x_hat = linear(tape, n, p.w_out, p.b_out)?;
        Ok(ForwardVars { x_hat, attention })
    }

    /// SACon averaged over every head and layer, on the tape.
    pub fn mean_sacon_tape(&self, tape: &mut Tape, attention: &[Vec<Var>]) -> Result<Var> {
        let mask = self.cfg.span.wrapped_mask();
        let mut total: Option<Var> = None;
        let mut count = 0usize;
        for &a in attention.iter().flatten() {
            let s = sacon_masked(tape, a, mask.clone())?;
            total = Some(match total {
                None => s,
                Some(t) => tape.add(t, s)?,
            });
            count += 1;
        }
        let total = total.ok_or_else(|| Error::Contract("model has no attention heads".into()))?;
        Ok(tape.scale(total, 1.0 / count as f64))
    }

    /// Inference on one win×D window: reconstruction plus attention state.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, AttentionState)> {
        self.check_window(x.shape())?;
        let mut tape = Tape::new();
        let p = self
            .params
            .rebuild(self.params.iter().map(|t| tape.constant(t.clone())).collect::<Vec<_>>())?;
        let xv = tape.constant(x.clone());
        let fv = self.forward_tape(&mut tape, &p, xv, None)?;
        let mask = self.cfg.span.wrapped_mask();
        let layers = fv
            .attention
            .iter()
            .map(|heads| {
                heads
                    .iter()
                    .map(|&a| {
                        let a = tape.value(a).clone();
                        let n = a.cols();
                        let mut sacon = vec![0.0; n];
                        for (ar, mr) in a.data().chunks(n).zip(mask.data().chunks(n)) {
                            for i in 0..n {
                                sacon[i] += ar[i] * mr[i];
                            }
                        }
                        HeadAttention { a, sacon }
                    })
                    .collect()
            })
            .collect();
        Ok((tape.value(fv.x_hat).clone(), AttentionState { layers }))
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 / (1.0 - rate);
            let shape = tape.shape(x).to_vec();
            let n = shape.iter().product();
            let mask = (0..n)
                .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                .collect();
            tape.mul_const(x, Tensor::new(shape, mask)?)
        }
        _ => Ok(x),
    }
}

pub mod checkpoint {
    //! Versioned JSON container of named arrays.
    //!
    //! ```text
    //! {
    //!   "format": "subadj-checkpoint",
    //!   "version": 1,
    //!   "model": { ...ModelConfig... },
    //!   "arrays": [ { "name": "w_in", "shape": [D, d_model], "data": [...] }, ... ]
    //! }
    //! ```
    //! Arrays appear in canonical parameter order; floats are written in
    //! shortest round-trip form so reloading is bit-exact.

    use std::fs;
    use std::path::Path;

    use serde::{Deserialize, Serialize};

    use super::{Model, ModelConfig, ModelParams};
    use crate::error::{Error, Result};
    use crate::numcore::Tensor;

    pub const FORMAT: &str = "subadj-checkpoint";
    pub const VERSION: u32 = 1;

    #[derive(Serialize, Deserialize)]
    struct NamedArray {
        name: String,
        shape: Vec<usize>,
        data: Vec<f64>,
    }

    #[derive(Serialize, Deserialize)]
    struct Checkpoint {
        format: String,
        version: u32,
        model: ModelConfig,
        arrays: Vec<NamedArray>,
    }

    pub fn to_string(model: &Model) -> String {
        let arrays = model
            .params
            .names()
            .into_iter()
            .zip(model.params.iter())
            .map(|(name, t)| NamedArray {
                name,
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        let ck = Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            model: model.cfg,
            arrays,
        };
        serde_json::to_string_pretty(&ck).expect("checkpoint serializes")
    }

    pub fn from_str(text: &str) -> Result<Model> {
        let ck: Checkpoint = serde_json::from_str(text)
            .map_err(|e| Error::Input(format!("malformed checkpoint: {e}")))?;
        if ck.format != FORMAT || ck.version != VERSION {
            return Err(Error::Input(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let template = ModelParams::init_shapes(&ck.model);
        if template.len() != ck.arrays.len() {
            return Err(Error::Input(format!(
                "checkpoint holds {} arrays, configuration implies {}",
                ck.arrays.len(),
                template.len()
            )));
        }
        let skeleton = ModelParams::init(&ck.model, 0)?;
        let expected_names = skeleton.names();
        let mut tensors = Vec::with_capacity(ck.arrays.len());
        for (arr, name) in ck.arrays.into_iter().zip(&expected_names) {
            if &arr.name != name {
                return Err(Error::Input(format!(
                    "checkpoint array `{}` found where `{name}` was expected",
                    arr.name
                )));
            }
            tensors.push(Tensor::new(arr.shape, arr.data)?);
        }
        let params = skeleton.rebuild(tensors)?;
        Model::new(ck.model, params)
    }

    pub fn save(model: &Model, path: &Path) -> Result<()> {
        fs::write(path, to_string(model)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Model> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        from_str(&text)
    }
}
