//! Two-token Transformer encoder used by every expert pathway.
//!
//! `fuse(a, b)` projects both inputs to `d_model`, adds a learned
//! token-type embedding per slot, runs `n_layers` pre-norm encoder layers
//! (self-attention, then a GELU feed-forward block, each with a residual
//! connection) and mean-pools the two output tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DimeError, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub d_in: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ffn: usize,
    pub dropout_p: f64,
    pub eps_ln: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            d_in: 512,
            d_model: 256,
            n_heads: 4,
            n_layers: 1,
            d_ffn: 512,
            dropout_p: 0.1,
            eps_ln: 1e-5,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_model == 0 || self.d_ffn == 0 || self.n_heads == 0 {
            return Err(DimeError::Parameter("fusion dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(DimeError::Parameter(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(1..=2).contains(&self.n_layers) {
            return Err(DimeError::Parameter(format!(
                "n_layers must be 1 or 2, got {}",
                self.n_layers
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(DimeError::Parameter("dropout_p must lie in [0, 1)".into()));
        }
        if !(self.eps_ln > 0.0) {
            return Err(DimeError::Parameter("eps_ln must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub ln1: (ParamId, ParamId),
    pub q: (ParamId, ParamId),
    pub k: (ParamId, ParamId),
    pub v: (ParamId, ParamId),
    pub o: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
    pub ffn_in: (ParamId, ParamId),
    pub ffn_out: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
pub struct FusionBlock {
    pub input: (ParamId, ParamId),
    pub type_embeddings: [ParamId; 2],
    pub layers: Vec<EncoderLayer>,
}

/// Output of one fusion call: pooled `[B, d_model]` plus the attention node
/// of every layer (for inspecting attention probabilities).
#[derive(Debug, Clone)]
pub struct Fused {
    pub pooled: Var,
    pub attention: Vec<Var>,
}

impl FusionBlock {
    pub fn new<R: Rng + ?Sized>(
        prefix: &str,
        cfg: &FusionConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        let dm = cfg.d_model;
        let linear = |store: &mut ParamStore, name: &str, out: usize, inp: usize, rng: &mut R| {
            (
                store.add_weight(format!("{prefix}.{name}.weight"), out, inp, rng),
                store.add_zeros(format!("{prefix}.{name}.bias"), out),
            )
        };
        let input = linear(store, "input", dm, cfg.d_in, rng);
        let type_embeddings = [0, 1].map(|slot| {
            let data = (0..dm).map(|_| rng.gen_range(-0.1..0.1)).collect();
            store.add(format!("{prefix}.type{slot}"), Tensor::vector(data))
        });
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let ln = |store: &mut ParamStore, name: &str| {
                    (
                        store.add(format!("{prefix}.layer{l}.{name}.gamma"), Tensor::full(&[dm], 1.0)),
                        store.add_zeros(format!("{prefix}.layer{l}.{name}.beta"), dm),
                    )
                };
                let ln1 = ln(store, "ln1");
                let q = linear(store, &format!("layer{l}.q"), dm, dm, rng);
                let k = linear(store, &format!("layer{l}.k"), dm, dm, rng);
                let v = linear(store, &format!("layer{l}.v"), dm, dm, rng);
                let o = linear(store, &format!("layer{l}.o"), dm, dm, rng);
                let ln2 = ln(store, "ln2");
                let ffn_in = linear(store, &format!("layer{l}.ffn_in"), cfg.d_ffn, dm, rng);
                let ffn_out = linear(store, &format!("layer{l}.ffn_out"), dm, cfg.d_ffn, rng);
                EncoderLayer {
                    ln1,
                    q,
                    k,
                    v,
                    o,
                    ln2,
                    ffn_in,
                    ffn_out,
                }
            })
            .collect();
        Self {
            input,
            type_embeddings,
            layers,
        }
    }

    /// Fuses row `i` of `a` with row `i` of `b` (both `[B, d_in]`).
    #[allow(clippy::too_many_arguments)]
    pub fn fuse<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: &Bound,
        cfg: &FusionConfig,
        a: Var,
        b: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Fused> {
        for x in [a, b] {
            match g.value(x).shape() {
                [_, n] if *n == cfg.d_in => {}
                s => return Err(DimeError::dim("fuse", s, &[0, cfg.d_in])),
            }
        }
        let lin = |g: &mut Graph, x: Var, (w, bias): (ParamId, ParamId)| g.linear(x, p.var(w), Some(p.var(bias)));

        let ta = lin(g, a, self.input)?;
        let ta = g.add_row(ta, p.var(self.type_embeddings[0]))?;
        let tb = lin(g, b, self.input)?;
        let tb = g.add_row(tb, p.var(self.type_embeddings[1]))?;
        let mut x = g.concat_rows(&[ta, tb])?;

        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let h = g.layer_norm(x, p.var(layer.ln1.0), p.var(layer.ln1.1), cfg.eps_ln)?;
            let q = lin(g, h, layer.q)?;
            let k = lin(g, h, layer.k)?;
            let v = lin(g, h, layer.v)?;
            let att = g.pair_attention(q, k, v, cfg.n_heads, cfg.dropout_p, training, rng)?;
            attention.push(att);
            let o = lin(g, att, layer.o)?;
            x = g.add(x, o)?;

            let h = g.layer_norm(x, p.var(layer.ln2.0), p.var(layer.ln2.1), cfg.eps_ln)?;
            let f = lin(g, h, layer.ffn_in)?;
            let f = g.gelu(f);
            let f = g.dropout(f, cfg.dropout_p, training, rng)?;
            let f = lin(g, f, layer.ffn_out)?;
            x = g.add(x, f)?;
        }
        let pooled = g.pair_mean(x)?;
        Ok(Fused { pooled, attention })
    }
}

/// The three unshared fusion instances, one per expert pathway.
#[derive(Debug, Clone)]
pub struct FusionTriple {
    pub textual: FusionBlock,
    pub visual: FusionBlock,
    pub crossmodal: FusionBlock,
}

/// `E_t = Fuse_t(e_p, e_t)`, `E_v = Fuse_v(e_r, e_v)`, `E_tv = Fuse_tv(e_t, e_v)`.
#[derive(Debug, Clone)]
pub struct FusedTriple {
    pub e_t: Fused,
    pub e_v: Fused,
    pub e_tv: Fused,
}

impl FusionTriple {
    pub fn new<R: Rng + ?Sized>(cfg: &FusionConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        Self {
            textual: FusionBlock::new("fusion.textual", cfg, store, rng),
            visual: FusionBlock::new("fusion.visual", cfg, store, rng),
            crossmodal: FusionBlock::new("fusion.crossmodal", cfg, store, rng),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn compute<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: &Bound,
        cfg: &FusionConfig,
        x: &crate::frontend::Projected,
        training: bool,
        rng: &mut R,
    ) -> Result<FusedTriple> {
        Ok(FusedTriple {
            e_t: self.textual.fuse(g, p, cfg, x.e_p, x.e_t, training, rng)?,
            e_v: self.visual.fuse(g, p, cfg, x.e_r, x.e_v, training, rng)?,
            e_tv: self.crossmodal.fuse(g, p, cfg, x.e_t, x.e_v, training, rng)?,
        })
    }
}
