//! Query construction, slot-feature aggregation and the control contrastive loss.
//!
//! The contrastive loss never sees slots: each conditioned slot is represented
//! by the attention-weighted mean of the mapped features `H'`, projected and
//! unit-normalized. Targets are all conditioning queries of the batch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, Bound, Graph, Mlp, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::slotattn::{conditioned_rows, weighted_mean_weights, Query};

pub const DEFAULT_TAU: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Lang,
    Point,
}

/// What feeds the contrastive projection heads.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContrastiveSource {
    /// Attention-weighted mapped features (the intended wiring).
    #[default]
    Aggregated,
    /// The conditioned slot vectors themselves. The slots were initialized from
    /// the very codes used as targets, so the loss can be met without looking
    /// at the image. Exists only to reproduce that failure.
    Slots,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingConfig {
    pub input_dim: usize,
    pub slot_dim: usize,
    pub emb_dim: usize,
    pub point_hidden: usize,
    pub proj_hidden: usize,
    pub tau: f64,
    pub source: ContrastiveSource,
}

#[derive(Clone, Debug)]
pub struct Grounding {
    pub config: GroundingConfig,
    pub point_mlp: Mlp,
    pub no_point: ParamId,
    pub lang_head: Mlp,
    pub point_head: Mlp,
}

/// Contrastive targets for one batch, one row per conditioning query.
#[derive(Clone, Debug)]
pub struct BatchTargets {
    /// `[T, D_emb]`, unit-norm rows
    pub codes: Var,
    /// For each conditioned slot (sample-major), its row in `codes`.
    pub positives: Vec<usize>,
}

impl BatchTargets {
    pub fn new(g: &Graph, codes: Var, positives: Vec<usize>) -> Result<Self> {
        let t = g.shape(codes)[0];
        if t == 0 {
            return Err(Error::contract(
                "contrastive loss needs at least one target",
            ));
        }
        if let Some(&bad) = positives.iter().find(|&&p| p >= t) {
            return Err(Error::contract(format!(
                "positive index {bad} out of range for {t} targets"
            )));
        }
        Ok(BatchTargets { codes, positives })
    }
}

impl Grounding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: GroundingConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if config.tau <= 0.0 {
            return Err(Error::config(format!(
                "temperature must be positive, got {}",
                config.tau
            )));
        }
        let c = &config;
        let head_in = match c.source {
            ContrastiveSource::Aggregated => c.input_dim,
            ContrastiveSource::Slots => c.slot_dim,
        };
        let no_point = Array::randn(&[c.emb_dim], 1.0 / (c.emb_dim as f64).sqrt(), rng);
        Ok(Grounding {
            point_mlp: Mlp::new(
                store,
                "grounding.point_mlp",
                &[2, c.point_hidden, c.emb_dim],
                true,
                rng,
            )?,
            no_point: store.add("grounding.no_point", no_point)?,
            lang_head: Mlp::new(
                store,
                "grounding.lang_head",
                &[head_in, c.proj_hidden, c.emb_dim],
                true,
                rng,
            )?,
            point_head: Mlp::new(
                store,
                "grounding.point_head",
                &[head_in, c.proj_hidden, c.emb_dim],
                true,
                rng,
            )?,
            config,
        })
    }

    pub fn query_dim(&self) -> usize {
        2 * self.config.emb_dim
    }

    /// Embeds `[R, 2]` points with the two-layer point MLP.
    pub fn embed_points(&self, g: &mut Graph, p: &Bound, points: &[[f64; 2]]) -> Result<Var> {
        for (i, &[x, y]) in points.iter().enumerate() {
            if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                return Err(Error::arg(format!(
                    "point {i} = ({x}, {y}) outside the unit square"
                )));
            }
        }
        let flat: Vec<f64> = points.iter().flatten().copied().collect();
        let xy = g.constant(Array::new(&[points.len(), 2], flat)?);
        self.point_mlp.forward(g, p, xy)
    }

    /// Conditioning vectors `[R, 2·D_emb]`: the language code followed by the
    /// point embedding, or by the learned no-point vector when a query has no
    /// point (or `use_points` is off).
    pub fn build_queries(
        &self,
        g: &mut Graph,
        p: &Bound,
        queries: &[&Query],
        use_points: bool,
    ) -> Result<Var> {
        let d = self.config.emb_dim;
        if queries.is_empty() {
            return Err(Error::arg("no queries to build"));
        }
        let mut codes = Vec::with_capacity(queries.len() * d);
        for (i, q) in queries.iter().enumerate() {
            if q.lang_code.len() != d {
                return Err(Error::arg(format!(
                    "query {i} code has length {}, expected {d}",
                    q.lang_code.len()
                )));
            }
            codes.extend_from_slice(&q.lang_code);
        }
        let lang = g.constant(Array::new(&[queries.len(), d], codes)?);

        let with_point: Vec<usize> = (0..queries.len())
            .filter(|&i| use_points && queries[i].point.is_some())
            .collect();
        let no_point = g.reshape(p.var(self.no_point), &[1, d])?;
        let point_block = if with_point.is_empty() {
            let shape = [queries.len(), d];
            g.broadcast_to(no_point, &shape)?
        } else {
            let pts: Vec<[f64; 2]> = with_point
                .iter()
                .map(|&i| queries[i].point.unwrap())
                .collect();
            let emb = self.embed_points(g, p, &pts)?;
            let pool = g.concat(&[emb, no_point], 0)?;
            let mut next = 0;
            let index: Vec<usize> = (0..queries.len())
                .map(|i| {
                    if with_point.get(next) == Some(&i) {
                        next += 1;
                        next - 1
                    } else {
                        pts.len()
                    }
                })
                .collect();
            g.gather_rows(pool, &index)?
        };
        g.concat(&[lang, point_block], 1)
    }

    /// `z_i = Σ_k w_ik h'_k` for every conditioned slot, stacked sample-major
    /// into `[ΣM_b, D_inputs]`. Weights use the same ε-renormalization as the
    /// Slot Attention update.
    pub fn aggregate(
        &self,
        g: &mut Graph,
        attn: Var,
        mapped: Var,
        counts: &[usize],
    ) -> Result<Var> {
        let (sa, sm) = (g.shape(attn).to_vec(), g.shape(mapped).to_vec());
        if sa.len() != 3
            || sm.len() != 3
            || sa[0] != sm[0]
            || sa[2] != sm[1]
            || sa[0] != counts.len()
        {
            return Err(Error::arg(format!(
                "aggregate shapes: attn {sa:?}, mapped {sm:?}"
            )));
        }
        let (b, n, d) = (sa[0], sa[1], sm[2]);
        let w = weighted_mean_weights(g, attn)?;
        let z = g.bmm(w, mapped, false, false)?;
        let z = g.reshape(z, &[b * n, d])?;
        g.gather_rows(z, &conditioned_rows(counts, n))
    }

    /// Unit-normalized projection through the chosen head.
    pub fn project(&self, g: &mut Graph, p: &Bound, z: Var, head: Head) -> Result<Var> {
        let mlp = match head {
            Head::Lang => &self.lang_head,
            Head::Point => &self.point_head,
        };
        let e = mlp.forward(g, p, z)?;
        g.l2_normalize(e)
    }

    /// Unit-normalized point targets for the point regime.
    pub fn point_targets(&self, g: &mut Graph, p: &Bound, points: &[[f64; 2]]) -> Result<Var> {
        let e = self.embed_points(g, p, points)?;
        g.l2_normalize(e)
    }

    /// Language and (optionally) point control contrastive losses over the
    /// features selected by [`ContrastiveSource`]. `slots` is only read in the
    /// leaky wiring.
    #[allow(clippy::too_many_arguments)]
    pub fn dual_contrastive(
        &self,
        g: &mut Graph,
        p: &Bound,
        attn: Var,
        mapped: Var,
        slots: Var,
        counts: &[usize],
        lang: &BatchTargets,
        point: Option<&BatchTargets>,
    ) -> Result<Var> {
        let rows: usize = counts.iter().sum();
        if lang.positives.len() != rows || point.is_some_and(|t| t.positives.len() != rows) {
            return Err(Error::contract(format!(
                "{rows} conditioned slots but {} language / {:?} point positives",
                lang.positives.len(),
                point.map(|t| t.positives.len())
            )));
        }
        let z = match self.config.source {
            ContrastiveSource::Aggregated => self.aggregate(g, attn, mapped, counts)?,
            ContrastiveSource::Slots => {
                let s = g.shape(slots).to_vec();
                let flat = g.reshape(slots, &[s[0] * s[1], s[2]])?;
                g.gather_rows(flat, &conditioned_rows(counts, s[1]))?
            }
        };
        let zl = self.project(g, p, z, Head::Lang)?;
        let loss = contrastive_loss(g, zl, lang, self.config.tau)?;
        match point {
            None => Ok(loss),
            Some(pt) => {
                let zp = self.project(g, p, z, Head::Point)?;
                let lp = contrastive_loss(g, zp, pt, self.config.tau)?;
                g.add(loss, lp)
            }
        }
    }
}

/// `−Σ_i log softmax_t(z_i·l_t / τ)[positive_i]` summed over the rows of `z`.
pub fn contrastive_loss(g: &mut Graph, z: Var, targets: &BatchTargets, tau: f64) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::arg("temperature must be positive"));
    }
    let (zs, ts) = (g.shape(z).to_vec(), g.shape(targets.codes).to_vec());
    if zs.len() != 2 || ts.len() != 2 || zs[1] != ts[1] {
        return Err(Error::arg(format!(
            "contrastive shapes: z {zs:?}, targets {ts:?}"
        )));
    }
    if ts[0] == 0 {
        return Err(Error::contract(
            "contrastive loss needs at least one target",
        ));
    }
    if targets.positives.len() != zs[0] {
        return Err(Error::contract(format!(
            "{} rows but {} positives",
            zs[0],
            targets.positives.len()
        )));
    }
    let (r, t) = (zs[0], ts[0]);
    if r == 0 {
        return Ok(g.constant(Array::scalar(0.0)));
    }
    let z3 = g.reshape(z, &[1, r, zs[1]])?;
    let t3 = g.reshape(targets.codes, &[1, t, ts[1]])?;
    let logits = g.bmm(z3, t3, false, true)?;
    let logits = g.scale(logits, 1.0 / tau);
    let logits = g.reshape(logits, &[r, t])?;
    let lsm = g.log_softmax(logits, 1)?;
    let flat = g.reshape(lsm, &[r * t, 1])?;
    let picks: Vec<usize> = targets
        .positives
        .iter()
        .enumerate()
        .map(|(i, &pos)| i * t + pos)
        .collect();
    let picked = g.gather_rows(flat, &picks)?;
    let total = g.sum(picked);
    Ok(g.neg(total))
}

/// Plain-array evaluation of the contrastive loss for given embeddings.
pub fn contrastive_loss_value(
    z: &Array,
    targets: &Array,
    positives: &[usize],
    tau: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let tv = g.constant(targets.clone());
    let t = BatchTargets::new(&g, tv, positives.to_vec())?;
    let l = contrastive_loss(&mut g, zv, &t, tau)?;
    Ok(g.value(l).item())
}
