//! Music encoder: linear embedding followed by a stack of transformer layers
//! whose self-attention only sees a local window.
//!
//! Each layer runs `l` heads of windowed attention on `U`, concatenates the
//! heads (`n x l*d_v`), projects back to `d_z`, adds the residual and
//! normalizes; then a position-wise ReLU feed-forward block, residual and
//! normalization again.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub use crate::attention::{attended_pairs, local_window};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    #[default]
    Local,
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    #[serde(rename = "N")]
    pub n_layers: usize,
    #[serde(rename = "l")]
    pub n_heads: usize,
    pub d_x: usize,
    pub d_z: usize,
    pub d_k: usize,
    pub d_v: usize,
    #[serde(rename = "k")]
    pub window: usize,
    pub ffn_hidden: usize,
    pub attention: AttentionKind,
    pub layer_norm: bool,
    pub positional: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 8,
            d_x: 438,
            d_z: 256,
            d_k: 64,
            d_v: 64,
            window: 100,
            ffn_hidden: 1024,
            attention: AttentionKind::Local,
            layer_norm: true,
            positional: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("N", self.n_layers),
            ("l", self.n_heads),
            ("d_x", self.d_x),
            ("d_z", self.d_z),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("k", self.window),
            ("ffn_hidden", self.ffn_hidden),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::invalid(format!("encoder.{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

fn layer_name(layer: usize, rest: &str) -> String {
    format!("encoder.layer{layer}.{rest}")
}

fn glorot(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let std = libm::sqrt(2.0 / (fan_in + fan_out) as f64);
    Tensor::randn(&[fan_in, fan_out], std, rng)
}

/// Adds freshly initialized encoder weights to `store`.
pub fn init_params(cfg: &EncoderConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
    cfg.validate()?;
    store.insert("encoder.embed", glorot(rng, cfg.d_x, cfg.d_z))?;
    for l in 0..cfg.n_layers {
        for h in 0..cfg.n_heads {
            store.insert(layer_name(l, &format!("head{h}.query")), glorot(rng, cfg.d_z, cfg.d_k))?;
            store.insert(layer_name(l, &format!("head{h}.key")), glorot(rng, cfg.d_z, cfg.d_k))?;
            store.insert(layer_name(l, &format!("head{h}.value")), glorot(rng, cfg.d_z, cfg.d_v))?;
        }
        store.insert(layer_name(l, "out"), glorot(rng, cfg.n_heads * cfg.d_v, cfg.d_z))?;
        store.insert(layer_name(l, "ffn.w1"), glorot(rng, cfg.d_z, cfg.ffn_hidden))?;
        store.insert(layer_name(l, "ffn.b1"), Tensor::zeros(&[1, cfg.ffn_hidden]))?;
        store.insert(layer_name(l, "ffn.w2"), glorot(rng, cfg.ffn_hidden, cfg.d_z))?;
        store.insert(layer_name(l, "ffn.b2"), Tensor::zeros(&[1, cfg.d_z]))?;
        if cfg.layer_norm {
            for norm in ["norm1", "norm2"] {
                store.insert(layer_name(l, &format!("{norm}.gain")), Tensor::full(&[1, cfg.d_z], 1.0))?;
                store.insert(layer_name(l, &format!("{norm}.bias")), Tensor::zeros(&[1, cfg.d_z]))?;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub query: Var,
    pub key: Var,
    pub value: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct NormVars {
    pub gain: Var,
    pub bias: Var,
}

#[derive(Debug, Clone)]
pub struct LayerVars {
    pub heads: Vec<HeadVars>,
    pub out: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub norm1: Option<NormVars>,
    pub norm2: Option<NormVars>,
}

/// Encoder weights resolved to graph handles.
#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub embed: Var,
    pub layers: Vec<LayerVars>,
}

impl EncoderVars {
    pub fn resolve(cfg: &EncoderConfig, bound: &Bound) -> Result<Self> {
        let norm = |l: usize, which: &str| -> Result<Option<NormVars>> {
            if !cfg.layer_norm {
                return Ok(None);
            }
            Ok(Some(NormVars {
                gain: bound.var(&layer_name(l, &format!("{which}.gain")))?,
                bias: bound.var(&layer_name(l, &format!("{which}.bias")))?,
            }))
        };
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let heads = (0..cfg.n_heads)
                .map(|h| {
                    Ok(HeadVars {
                        query: bound.var(&layer_name(l, &format!("head{h}.query")))?,
                        key: bound.var(&layer_name(l, &format!("head{h}.key")))?,
                        value: bound.var(&layer_name(l, &format!("head{h}.value")))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            layers.push(LayerVars {
                heads,
                out: bound.var(&layer_name(l, "out"))?,
                ffn_w1: bound.var(&layer_name(l, "ffn.w1"))?,
                ffn_b1: bound.var(&layer_name(l, "ffn.b1"))?,
                ffn_w2: bound.var(&layer_name(l, "ffn.w2"))?,
                ffn_b2: bound.var(&layer_name(l, "ffn.b2"))?,
                norm1: norm(l, "norm1")?,
                norm2: norm(l, "norm2")?,
            });
        }
        Ok(Self {
            embed: bound.var("encoder.embed")?,
            layers,
        })
    }
}

/// `U = X W^E`, no bias.
pub fn embed(g: &mut Graph, x: Var, w_embed: Var) -> Result<Var> {
    g.matmul(x, w_embed)
}

/// One attention head. Global mode builds the dense `n x n` score matrix
/// from ordinary ops and serves as the reference for the windowed kernel.
pub fn attention_head(
    g: &mut Graph,
    u: Var,
    head: &HeadVars,
    kind: AttentionKind,
    window: usize,
) -> Result<(Var, usize)> {
    let q = g.matmul(u, head.query)?;
    let k = g.matmul(u, head.key)?;
    let v = g.matmul(u, head.value)?;
    match kind {
        AttentionKind::Local => g.local_attention(q, k, v, window),
        AttentionKind::Global => {
            let (n, d_k) = g.value(q).dims2("attention")?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, 1.0 / libm::sqrt(d_k as f64));
            let alpha = g.softmax(scores);
            Ok((g.matmul(alpha, v)?, n * n))
        }
    }
}

fn norm_affine(g: &mut Graph, x: Var, norm: &Option<NormVars>) -> Result<Var> {
    let Some(nv) = norm else { return Ok(x) };
    let n = g.value(x).rows();
    let y = g.layer_norm(x, LN_EPS);
    let gain = g.tile_rows(nv.gain, n)?;
    let bias = g.tile_rows(nv.bias, n)?;
    let y = g.mul(y, gain)?;
    g.add(y, bias)
}

/// Sinusoidal position table, `n x d`.
pub fn positional_encoding(n: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, d]);
    for pos in 0..n {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / libm::pow(10000.0, 2.0 * pair / d as f64);
            let v = if i % 2 == 0 { libm::sin(angle) } else { libm::cos(angle) };
            t.set(pos, i, v);
        }
    }
    t
}

/// Output of [`encode`].
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub z: Var,
    /// Attention score pairs evaluated, summed over layers and heads.
    pub pairs: usize,
}

/// Maps `X` (`n x d_x`) to `Z` (`n x d_z`).
pub fn encode(g: &mut Graph, cfg: &EncoderConfig, vars: &EncoderVars, x: Var) -> Result<Encoded> {
    let xs = g.value(x).shape().to_vec();
    if xs.len() != 2 || xs[1] != cfg.d_x {
        return Err(Error::shape("encode", &xs, &[xs[0], cfg.d_x]));
    }
    if !g.value(x).is_finite() {
        return Err(Error::NonFinite("encoder input".into()));
    }
    let n = xs[0];
    let mut u = embed(g, x, vars.embed)?;
    if cfg.positional {
        let pe = g.constant(positional_encoding(n, cfg.d_z));
        u = g.add(u, pe)?;
    }
    let mut pairs = 0;
    for (li, layer) in vars.layers.iter().enumerate() {
        let mut heads = Vec::with_capacity(layer.heads.len());
        for head in &layer.heads {
            let (a, p) = attention_head(g, u, head, cfg.attention, cfg.window)?;
            heads.push(a);
            pairs += p;
        }
        let cat = g.concat_last(&heads)?;
        let att = g.matmul(cat, layer.out)?;
        let res = g.add(u, att)?;
        let h = norm_affine(g, res, &layer.norm1)?;

        let b1 = g.tile_rows(layer.ffn_b1, n)?;
        let b2 = g.tile_rows(layer.ffn_b2, n)?;
        let f = g.matmul(h, layer.ffn_w1)?;
        let f = g.add(f, b1)?;
        let f = g.relu(f);
        let f = g.matmul(f, layer.ffn_w2)?;
        let f = g.add(f, b2)?;
        let res = g.add(h, f)?;
        u = norm_affine(g, res, &layer.norm2)?;

        if !g.value(u).is_finite() {
            return Err(Error::NonFinite(format!("encoder layer {li}")));
        }
    }
    Ok(Encoded { z: u, pairs })
}

/// Inference-only convenience: encodes `x` with constant weights.
pub fn encode_values(cfg: &EncoderConfig, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = store.bind(&mut g, false);
    let vars = EncoderVars::resolve(cfg, &bound)?;
    let xv = g.constant(x.clone());
    let out = encode(&mut g, cfg, &vars, xv)?;
    Ok(g.value(out.z).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny(attention: AttentionKind, window: usize) -> EncoderConfig {
        EncoderConfig {
            n_layers: 2,
            n_heads: 2,
            d_x: 5,
            d_z: 6,
            d_k: 3,
            d_v: 4,
            window,
            ffn_hidden: 7,
            attention,
            layer_norm: true,
            positional: false,
        }
    }

    fn input(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = Rng::seed_from_u64(seed);
        Tensor::randn(&[n, d], 1.0, &mut rng)
    }

    #[test]
    fn zero_input_embeds_to_zero() {
        let cfg = tiny(AttentionKind::Local, 4);
        let mut store = ParamStore::new();
        init_params(&cfg, &mut store, &mut Rng::seed_from_u64(1)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 5]));
        let w = g.constant(store.get("encoder.embed").unwrap().clone());
        let u = embed(&mut g, x, w).unwrap();
        assert!(g.value(u).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embed_identity() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row_vector(alloc::vec![1.0, 2.0]));
        let w = g.constant(Tensor::identity(2));
        let u = embed(&mut g, x, w).unwrap();
        assert_eq!(g.value(u).data(), &[1.0, 2.0]);
    }

    #[test]
    fn default_shapes() {
        let cfg = EncoderConfig::default();
        let mut store = ParamStore::new();
        init_params(&cfg, &mut store, &mut Rng::seed_from_u64(3)).unwrap();
        assert_eq!(store.get("encoder.embed").unwrap().shape(), &[438, 256]);
        assert_eq!(store.get("encoder.layer1.out").unwrap().shape(), &[512, 256]);
        assert_eq!(store.get("encoder.layer0.head7.value").unwrap().shape(), &[256, 64]);
    }

    #[test]
    fn wide_window_matches_global() {
        let n = 9;
        let local = tiny(AttentionKind::Local, 2 * n);
        let global = tiny(AttentionKind::Global, 2 * n);
        let mut store = ParamStore::new();
        init_params(&local, &mut store, &mut Rng::seed_from_u64(11)).unwrap();
        let x = input(n, 5, 5);
        let a = encode_values(&local, &store, &x).unwrap();
        let b = encode_values(&global, &store, &x).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn output_shape_and_determinism() {
        let cfg = tiny(AttentionKind::Local, 2);
        let mut store = ParamStore::new();
        init_params(&cfg, &mut store, &mut Rng::seed_from_u64(2)).unwrap();
        for n in [1, 2, 5, 13] {
            let x = input(n, 5, n as u64);
            let z = encode_values(&cfg, &store, &x).unwrap();
            assert_eq!(z.shape(), &[n, 6]);
            assert_eq!(z, encode_values(&cfg, &store, &x).unwrap());
        }
    }

    #[test]
    fn rejects_wrong_width() {
        let cfg = tiny(AttentionKind::Local, 2);
        let mut store = ParamStore::new();
        init_params(&cfg, &mut store, &mut Rng::seed_from_u64(2)).unwrap();
        assert!(matches!(
            encode_values(&cfg, &store, &Tensor::zeros(&[4, 6])),
            Err(Error::ShapeMismatch { op: "encode", .. })
        ));
    }

    #[test]
    fn non_finite_input_rejected() {
        let cfg = tiny(AttentionKind::Local, 2);
        let mut store = ParamStore::new();
        init_params(&cfg, &mut store, &mut Rng::seed_from_u64(2)).unwrap();
        let mut x = Tensor::zeros(&[3, 5]);
        x.set(1, 1, f64::INFINITY);
        assert!(matches!(encode_values(&cfg, &store, &x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn identical_rows_give_uniform_weights() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::full(&[6, 2], 0.7));
        let k = g.constant(Tensor::full(&[6, 2], -0.3));
        let v = g.param(Tensor::full(&[6, 1], 1.0));
        let (a, pairs) = g.local_attention(q, k, v, 2).unwrap();
        assert!(pairs <= 6 * 3);
        let w = g.attention_weights(a).unwrap();
        for i in 0..6 {
            let (_, row) = w.row(i);
            for &a in row {
                assert!((a - 1.0 / row.len() as f64).abs() < 1e-15);
            }
        }
    }
}
