//! Query-conditioned MLP broadcast decoder.
//!
//! Every slot is concatenated with its query (or a learned null query), passed
//! through a small conditioning MLP, broadcast over the `K` positions with
//! learned positional embeddings added, and decoded per position into `D_feat`
//! features plus one alpha logit. Masks are the softmax of the alphas over slots.

use rand::Rng;

use crate::diffcore::{Array, Bound, Graph, Mlp, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cond_mlp: Mlp,
    pub pos_emb: ParamId,
    pub mlp: Mlp,
    pub null_query: ParamId,
    pub num_patches: usize,
    pub slot_dim: usize,
    pub query_dim: usize,
    pub feature_dim: usize,
}

/// Decoder outputs for a batch.
#[derive(Clone, Copy, Debug)]
pub struct DecodeVars {
    /// `[B, N, K, D_feat]`
    pub recon_per_slot: Var,
    /// `[B, N, K]`
    pub alpha: Var,
    /// `[B, N, K]`, softmax of `alpha` over slots
    pub masks: Var,
    /// `[B, K, D_feat]`
    pub recon: Var,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        num_patches: usize,
        slot_dim: usize,
        query_dim: usize,
        feature_dim: usize,
        cond_hidden: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let mut widths = vec![slot_dim];
        widths.extend_from_slice(hidden);
        widths.push(feature_dim + 1);
        let pos_scale = 1.0 / (slot_dim as f64).sqrt();
        Ok(Decoder {
            cond_mlp: Mlp::new(
                store,
                "decoder.cond_mlp",
                &[slot_dim + query_dim, cond_hidden, slot_dim],
                true,
                rng,
            )?,
            pos_emb: store.add(
                "decoder.pos_emb",
                Array::randn(&[num_patches, slot_dim], pos_scale, rng),
            )?,
            mlp: Mlp::new(store, "decoder.mlp", &widths, true, rng)?,
            null_query: store.add(
                "decoder.null_query",
                Array::randn(&[query_dim], 1.0 / (query_dim as f64).sqrt(), rng),
            )?,
            num_patches,
            slot_dim,
            query_dim,
            feature_dim,
        })
    }

    /// Decodes `[B, N, D_slot]` slots. With `queries = Some(([ΣM_b, D_query], counts))`
    /// slot `i < M_b` of sample `b` is conditioned on its query; every other slot
    /// (and every slot when `queries` is `None`) uses the null query.
    pub fn decode(
        &self,
        g: &mut Graph,
        p: &Bound,
        slots: Var,
        queries: Option<(Var, &[usize])>,
    ) -> Result<DecodeVars> {
        let s = g.shape(slots).to_vec();
        if s.len() != 3 || s[2] != self.slot_dim {
            return Err(Error::arg(format!(
                "decoder slots {s:?}, expected [B, N, {}]",
                self.slot_dim
            )));
        }
        let (b, n, k, f) = (s[0], s[1], self.num_patches, self.feature_dim);
        let null = g.reshape(p.var(self.null_query), &[1, self.query_dim])?;
        let cond = match queries {
            Some((q, counts)) if counts.iter().sum::<usize>() > 0 => {
                let total: usize = counts.iter().sum();
                if counts.len() != b || g.shape(q) != [total, self.query_dim] {
                    return Err(Error::arg(format!(
                        "decoder queries {:?} for counts {counts:?}, batch {b}",
                        g.shape(q)
                    )));
                }
                if let Some(&m) = counts.iter().find(|&&m| m > n) {
                    return Err(Error::contract(format!("{m} queries for {n} slots")));
                }
                let mut next = 0;
                let mut index = Vec::with_capacity(b * n);
                for &m in counts {
                    for i in 0..n {
                        if i < m {
                            index.push(next);
                            next += 1;
                        } else {
                            index.push(total);
                        }
                    }
                }
                let pool = g.concat(&[q, null], 0)?;
                g.gather_rows(pool, &index)?
            }
            _ => g.broadcast_to(null, &[b * n, self.query_dim])?,
        };
        let flat = g.reshape(slots, &[b * n, self.slot_dim])?;
        let joint = g.concat(&[flat, cond], 1)?;
        let c = self.cond_mlp.forward(g, p, joint)?;
        let c = g.reshape(c, &[b * n, 1, self.slot_dim])?;
        let pos = g.reshape(p.var(self.pos_emb), &[1, k, self.slot_dim])?;
        let x = g.add(c, pos)?;
        let out = self.mlp.forward(g, p, x)?;
        let feats = g.narrow(out, 2, 0, f)?;
        let recon_per_slot = g.reshape(feats, &[b, n, k, f])?;
        let alpha = g.narrow(out, 2, f, 1)?;
        let alpha = g.reshape(alpha, &[b, n, k])?;
        let masks = g.softmax(alpha, 1)?;
        let m4 = g.reshape(masks, &[b, n, k, 1])?;
        let weighted = g.mul(recon_per_slot, m4)?;
        let recon = g.sum_axis(weighted, 1)?;
        let recon = g.reshape(recon, &[b, k, f])?;
        Ok(DecodeVars {
            recon_per_slot,
            alpha,
            masks,
            recon,
        })
    }
}

/// Mean squared error over all entries.
pub fn recon_loss(g: &mut Graph, recon: Var, target: Var) -> Result<Var> {
    if g.shape(recon) != g.shape(target) {
        return Err(Error::arg(format!(
            "recon {:?} vs target {:?}",
            g.shape(recon),
            g.shape(target)
        )));
    }
    let d = g.sub(recon, target)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// `recon + λ·contrastive`.
pub fn total_loss(g: &mut Graph, recon: Var, contrastive: Option<Var>, lambda: f64) -> Result<Var> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::arg(format!(
            "contrastive weight must be >= 0, got {lambda}"
        )));
    }
    match contrastive {
        Some(c) if lambda > 0.0 => {
            let c = g.scale(c, lambda);
            g.add(recon, c)
        }
        _ => Ok(recon),
    }
}

/// Mean squared error on plain arrays.
pub fn recon_loss_value(recon: &Array, target: &Array) -> Result<f64> {
    let mut g = Graph::new();
    let (r, t) = (g.constant(recon.clone()), g.constant(target.clone()));
    let l = recon_loss(&mut g, r, t)?;
    Ok(g.value(l).item())
}
