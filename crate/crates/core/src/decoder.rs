//! Autoregressive pose decoder.
//!
//! `h_i = LSTM(h_{i-1}, y_{i-1})` over a stack of layers, then
//! `y_i = [h_i; z_i] W^S + b` with `h_i` the top layer's hidden vector. The
//! music latent only enters at the output projection.
//!
//! All functions are batched: states and poses carry one row per sequence.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    #[serde(rename = "layers")]
    pub n_layers: usize,
    pub d_s: usize,
    pub d_y: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            n_layers: 3,
            d_s: 1024,
            d_y: 50,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_s == 0 || self.d_y == 0 {
            return Err(Error::invalid("decoder.layers, d_s and d_y must be >= 1"));
        }
        Ok(())
    }
}

fn lstm_name(layer: usize, rest: &str) -> String {
    format!("decoder.lstm{layer}.{rest}")
}

/// Adds decoder weights for a `d_z`-wide latent to `store`.
pub fn init_params(cfg: &DecoderConfig, d_z: usize, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
    cfg.validate()?;
    let d_s = cfg.d_s;
    let scale = 1.0 / libm::sqrt(d_s as f64);
    for l in 0..cfg.n_layers {
        let input = if l == 0 { cfg.d_y } else { d_s };
        store.insert(lstm_name(l, "w_ih"), Tensor::randn(&[input, 4 * d_s], scale, rng))?;
        store.insert(lstm_name(l, "w_hh"), Tensor::randn(&[d_s, 4 * d_s], scale, rng))?;
        // forget gate starts open
        let mut bias = Tensor::zeros(&[1, 4 * d_s]);
        bias.data_mut()[d_s..2 * d_s].iter_mut().for_each(|b| *b = 1.0);
        store.insert(lstm_name(l, "bias"), bias)?;
    }
    let std = libm::sqrt(1.0 / (d_s + d_z) as f64);
    store.insert("decoder.proj", Tensor::randn(&[d_s + d_z, cfg.d_y], std, rng))?;
    store.insert("decoder.proj_bias", Tensor::zeros(&[1, cfg.d_y]))?;
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

#[derive(Debug, Clone)]
pub struct DecoderVars {
    pub layers: Vec<LstmVars>,
    pub proj: Var,
    pub proj_bias: Var,
    pub d_s: usize,
}

impl DecoderVars {
    pub fn resolve(cfg: &DecoderConfig, bound: &Bound) -> Result<Self> {
        let layers = (0..cfg.n_layers)
            .map(|l| {
                Ok(LstmVars {
                    w_ih: bound.var(&lstm_name(l, "w_ih"))?,
                    w_hh: bound.var(&lstm_name(l, "w_hh"))?,
                    bias: bound.var(&lstm_name(l, "bias"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            proj: bound.var("decoder.proj")?,
            proj_bias: bound.var("decoder.proj_bias")?,
            d_s: cfg.d_s,
        })
    }
}

/// Per-layer hidden and cell matrices, `batch x d_s` each.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub h: Vec<Tensor>,
    pub c: Vec<Tensor>,
}

impl DecoderState {
    pub fn batch(&self) -> usize {
        self.h.first().map_or(0, Tensor::rows)
    }
}

/// Samples every hidden and cell entry from `N(0, 1)`.
///
/// Row `b` is drawn from its own generator seeded with `seeds[b]` (layer by
/// layer, hidden before cell), so a sequence's initial state does not depend
/// on which batch it lands in.
pub fn init_state(cfg: &DecoderConfig, seeds: &[u64]) -> DecoderState {
    let b = seeds.len();
    let d = cfg.d_s;
    let mut h: Vec<Tensor> = (0..cfg.n_layers).map(|_| Tensor::zeros(&[b, d])).collect();
    let mut c = h.clone();
    for (row, &seed) in seeds.iter().enumerate() {
        let mut rng = Rng::seed_from_u64(seed);
        for l in 0..cfg.n_layers {
            for x in h[l].row_mut(row) {
                *x = rng.sample(StandardNormal);
            }
            for x in c[l].row_mut(row) {
                *x = rng.sample(StandardNormal);
            }
        }
    }
    DecoderState { h, c }
}

/// Decoder state living in a graph.
#[derive(Debug, Clone)]
pub struct StateVars {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
}

impl StateVars {
    pub fn constant(g: &mut Graph, state: &DecoderState) -> Self {
        Self {
            h: state.h.iter().map(|t| g.constant(t.clone())).collect(),
            c: state.c.iter().map(|t| g.constant(t.clone())).collect(),
        }
    }

    pub fn values(&self, g: &Graph) -> DecoderState {
        DecoderState {
            h: self.h.iter().map(|&v| g.value(v).clone()).collect(),
            c: self.c.iter().map(|&v| g.value(v).clone()).collect(),
        }
    }
}

fn lstm_cell(g: &mut Graph, p: &LstmVars, d_s: usize, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let batch = g.value(x).rows();
    let xi = g.matmul(x, p.w_ih)?;
    let hh = g.matmul(h, p.w_hh)?;
    let bias = g.tile_rows(p.bias, batch)?;
    let gates = g.add(xi, hh)?;
    let gates = g.add(gates, bias)?;
    let i = g.slice_last(gates, 0, d_s)?;
    let f = g.slice_last(gates, d_s, 2 * d_s)?;
    let cand = g.slice_last(gates, 2 * d_s, 3 * d_s)?;
    let o = g.slice_last(gates, 3 * d_s, 4 * d_s)?;
    let i = g.sigmoid(i);
    let f = g.sigmoid(f);
    let cand = g.tanh(cand);
    let o = g.sigmoid(o);
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_new = g.add(keep, write)?;
    let squashed = g.tanh(c_new);
    let h_new = g.mul(o, squashed)?;
    Ok((h_new, c_new))
}

/// One decoder step: consumes the previous pose (`batch x d_y`) and this
/// frame's latent (`batch x d_z`); returns the new state and `y_i`.
pub fn decode_step(
    g: &mut Graph,
    vars: &DecoderVars,
    state: &StateVars,
    prev_pose: Var,
    z: Var,
) -> Result<(StateVars, Var)> {
    if !g.value(prev_pose).is_finite() {
        return Err(Error::NonFinite("decoder input pose".into()));
    }
    if !g.value(z).is_finite() {
        return Err(Error::NonFinite("decoder latent".into()));
    }
    if state.h.len() != vars.layers.len() || state.c.len() != vars.layers.len() {
        return Err(Error::invalid("decoder state layer count does not match the model"));
    }
    let batch = g.value(prev_pose).rows();
    let mut next = StateVars {
        h: Vec::with_capacity(vars.layers.len()),
        c: Vec::with_capacity(vars.layers.len()),
    };
    let mut input = prev_pose;
    for (l, p) in vars.layers.iter().enumerate() {
        let (h, c) = lstm_cell(g, p, vars.d_s, input, state.h[l], state.c[l])?;
        next.h.push(h);
        next.c.push(c);
        input = h;
    }
    let joint = g.concat_last(&[input, z])?;
    let y = g.matmul(joint, vars.proj)?;
    let b = g.tile_rows(vars.proj_bias, batch)?;
    let y = g.add(y, b)?;
    Ok((next, y))
}

/// Free-running rollout for a batch of equal-length latent sequences.
///
/// Step 1 consumes `y0`; every later step consumes the previous prediction.
/// Each sequence's initial state comes from its own seed.
pub fn generate_batch(
    cfg: &DecoderConfig,
    store: &ParamStore,
    zs: &[Tensor],
    y0: &[f64],
    seeds: &[u64],
) -> Result<Vec<Tensor>> {
    let batch = zs.len();
    if batch == 0 || seeds.len() != batch {
        return Err(Error::invalid("generate: need one seed per latent sequence"));
    }
    let (n, d_z) = zs[0].dims2("generate")?;
    for z in zs {
        if z.shape() != [n, d_z] {
            return Err(Error::shape("generate", zs[0].shape(), z.shape()));
        }
        if !z.is_finite() {
            return Err(Error::NonFinite("latent sequence".into()));
        }
    }
    if y0.len() != cfg.d_y {
        return Err(Error::shape("generate", &[cfg.d_y], &[y0.len()]));
    }

    let mut g = Graph::new();
    let bound = store.bind(&mut g, false);
    let vars = DecoderVars::resolve(cfg, &bound)?;
    let mark = g.len();

    let mut state = init_state(cfg, seeds);
    let mut prev = Tensor::zeros(&[batch, cfg.d_y]);
    for b in 0..batch {
        prev.row_mut(b).copy_from_slice(y0);
    }
    let mut out: Vec<Tensor> = (0..batch).map(|_| Tensor::zeros(&[n, cfg.d_y])).collect();
    let mut z_rows = Tensor::zeros(&[batch, d_z]);
    for i in 0..n {
        for (b, z) in zs.iter().enumerate() {
            z_rows.row_mut(b).copy_from_slice(z.row(i));
        }
        let sv = StateVars::constant(&mut g, &state);
        let pv = g.constant(prev);
        let zv = g.constant(z_rows.clone());
        let (next, y) = decode_step(&mut g, &vars, &sv, pv, zv)?;
        state = next.values(&g);
        prev = g.value(y).clone();
        for (b, seq) in out.iter_mut().enumerate() {
            seq.row_mut(i).copy_from_slice(prev.row(b));
        }
        g.truncate(mark);
    }
    Ok(out)
}

/// Single-sequence [`generate_batch`].
pub fn generate(cfg: &DecoderConfig, store: &ParamStore, z: &Tensor, y0: &[f64], seed: u64) -> Result<Tensor> {
    Ok(generate_batch(cfg, store, core::slice::from_ref(z), y0, &[seed])?.remove(0))
}
