//! Pre-norm transformer encoder `g` applied to the patch features before
//! Slot Attention. No positional term is added, so the map is equivariant to
//! token permutations.

use rand::Rng;

use crate::diffcore::{Array, Bound, Graph, LayerNorm, Linear, Mlp, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct MappingBlock {
    pub norm_attn: LayerNorm,
    pub to_q: Linear,
    pub to_k: Linear,
    pub to_v: Linear,
    pub out: Linear,
    pub norm_ff: LayerNorm,
    pub ff: Mlp,
}

#[derive(Clone, Debug)]
pub struct MappingNet {
    pub blocks: Vec<MappingBlock>,
    pub width: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl MappingNet {
    /// `layers` blocks over tokens of `width`; attention runs in `heads × head_dim`
    /// and the feedforward hidden width is `ff_mult × width`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        width: usize,
        layers: usize,
        heads: usize,
        head_dim: usize,
        ff_mult: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if width == 0 || heads == 0 || head_dim == 0 || ff_mult == 0 {
            return Err(Error::config(
                "mapping widths and head counts must be positive",
            ));
        }
        let inner = heads * head_dim;
        let blocks = (0..layers)
            .map(|i| {
                let n = format!("mapping.{i}");
                Ok(MappingBlock {
                    norm_attn: LayerNorm::new(store, &format!("{n}.norm_attn"), width)?,
                    to_q: Linear::new(store, &format!("{n}.to_q"), width, inner, true, rng)?,
                    to_k: Linear::new(store, &format!("{n}.to_k"), width, inner, true, rng)?,
                    to_v: Linear::new(store, &format!("{n}.to_v"), width, inner, true, rng)?,
                    out: Linear::new(store, &format!("{n}.out"), inner, width, true, rng)?,
                    norm_ff: LayerNorm::new(store, &format!("{n}.norm_ff"), width)?,
                    ff: Mlp::new(
                        store,
                        &format!("{n}.ff"),
                        &[width, ff_mult * width, width],
                        true,
                        rng,
                    )?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(MappingNet {
            blocks,
            width,
            heads,
            head_dim,
        })
    }

    /// Zeroes the last layer of every residual branch so the network is the identity.
    pub fn zero_residual_branches(&self, store: &mut ParamStore) {
        for b in &self.blocks {
            for lin in [&b.out, b.ff.layers.last().expect("ff has layers")] {
                *store.get_mut(lin.weight) = Array::zeros(store.get(lin.weight).shape());
                if let Some(bias) = lin.bias {
                    *store.get_mut(bias) = Array::zeros(store.get(bias).shape());
                }
            }
        }
    }

    fn split_heads(&self, g: &mut Graph, x: Var, b: usize, k: usize) -> Result<Var> {
        let (h, d) = (self.heads, self.head_dim);
        let x = g.reshape(x, &[b, k, h, d])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[b * h, k, d])
    }

    fn attention(
        &self,
        g: &mut Graph,
        p: &Bound,
        blk: &MappingBlock,
        x: Var,
        b: usize,
        k: usize,
    ) -> Result<Var> {
        let q = blk.to_q.forward(g, p, x)?;
        let key = blk.to_k.forward(g, p, x)?;
        let v = blk.to_v.forward(g, p, x)?;
        let (q, key, v) = (
            self.split_heads(g, q, b, k)?,
            self.split_heads(g, key, b, k)?,
            self.split_heads(g, v, b, k)?,
        );
        let logits = g.bmm(q, key, false, true)?;
        let logits = g.scale(logits, 1.0 / (self.head_dim as f64).sqrt());
        let w = g.softmax(logits, 2)?;
        let ctx = g.bmm(w, v, false, false)?;
        let ctx = g.reshape(ctx, &[b, self.heads, k, self.head_dim])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, k, self.heads * self.head_dim])?;
        blk.out.forward(g, p, ctx)
    }

    /// `H' = g(H)` for `[B, K, width]` features.
    pub fn forward(&self, g: &mut Graph, p: &Bound, h: Var) -> Result<Var> {
        let s = g.shape(h).to_vec();
        if s.len() != 3 || s[1] == 0 || s[2] != self.width {
            return Err(Error::arg(format!(
                "mapping input {s:?}, expected [B, K>=1, {}]",
                self.width
            )));
        }
        let (b, k) = (s[0], s[1]);
        let mut x = h;
        for blk in &self.blocks {
            let n = blk.norm_attn.forward(g, p, x)?;
            let a = self.attention(g, p, blk, n, b, k)?;
            x = g.add(x, a)?;
            let n = blk.norm_ff.forward(g, p, x)?;
            let f = blk.ff.forward(g, p, n)?;
            x = g.add(x, f)?;
        }
        Ok(x)
    }
}
