//! The full model: mapping network, conditioned Slot Attention, conditioned
//! broadcast decoder and the training objective.

mod decoder;
mod mapping;

pub use decoder::{recon_loss, recon_loss_value, total_loss, DecodeVars, Decoder};
pub use mapping::{MappingBlock, MappingNet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, Bound, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::grounding::{BatchTargets, ContrastiveSource, Grounding, GroundingConfig, DEFAULT_TAU};
use crate::slotattn::{
    slot_states, InitMode, Query, QuerySet, SlotAttention, SlotAttnConfig, SlotState, SlotVars,
};

/// Architecture and objective settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `K`, the number of patch tokens
    pub patches: usize,
    pub feature_dim: usize,
    pub num_slots: usize,
    pub slot_dim: usize,
    pub slot_mlp_hidden: usize,
    pub iters: usize,
    pub init_mode: InitMode,
    pub mapping_layers: usize,
    pub mapping_heads: usize,
    pub mapping_head_dim: usize,
    pub mapping_ff_mult: usize,
    pub cond_hidden: usize,
    pub decoder_hidden: usize,
    pub decoder_layers: usize,
    pub emb_dim: usize,
    pub point_hidden: usize,
    pub proj_hidden: usize,
    pub tau: f64,
    pub lambda: f64,
    pub contrastive: bool,
    pub decoder_conditioning: bool,
    pub point_queries: bool,
    #[serde(skip)]
    pub contrastive_source: ContrastiveSource,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patches: 256,
            feature_dim: 34,
            num_slots: 7,
            slot_dim: 64,
            slot_mlp_hidden: 128,
            iters: 3,
            init_mode: InitMode::Assign,
            mapping_layers: 3,
            mapping_heads: 4,
            mapping_head_dim: 8,
            mapping_ff_mult: 4,
            cond_hidden: 64,
            decoder_hidden: 256,
            decoder_layers: 3,
            emb_dim: 32,
            point_hidden: 32,
            proj_hidden: 64,
            tau: DEFAULT_TAU,
            lambda: 1.0,
            contrastive: true,
            decoder_conditioning: true,
            point_queries: true,
            contrastive_source: ContrastiveSource::Aggregated,
        }
    }
}

impl ModelConfig {
    pub fn num_patches(&self) -> usize {
        self.patches
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("patches", self.patches),
            ("feature_dim", self.feature_dim),
            ("num_slots", self.num_slots),
            ("slot_dim", self.slot_dim),
            ("slot_mlp_hidden", self.slot_mlp_hidden),
            ("iters", self.iters),
            ("mapping_heads", self.mapping_heads),
            ("mapping_head_dim", self.mapping_head_dim),
            ("mapping_ff_mult", self.mapping_ff_mult),
            ("cond_hidden", self.cond_hidden),
            ("decoder_hidden", self.decoder_hidden),
            ("emb_dim", self.emb_dim),
            ("point_hidden", self.point_hidden),
            ("proj_hidden", self.proj_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if !(self.tau > 0.0) {
            return Err(Error::config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    /// Whether the contrastive term contributes to the objective.
    pub fn uses_contrastive(&self) -> bool {
        self.contrastive && self.lambda > 0.0
    }
}

/// One batch of inputs.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    /// `[B, K, D_feat]`
    pub features: Array,
    pub queries: Vec<&'a QuerySet>,
    /// Contrastive language targets, one row per query in sample-major order.
    /// `None` uses the conditioning codes themselves.
    pub lang_targets: Option<Array>,
    /// `[B, N, D_slot]` standard-normal draws for slot initialization.
    pub noise: Array,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.queries.iter().map(|q| q.len()).collect()
    }
}

/// Graph handles produced by [`CtrlModel::forward`].
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub mapped: Var,
    pub slots: SlotVars,
    pub decode: DecodeVars,
    pub recon_loss: Var,
    /// Per-sample mean contrastive loss, when it is part of the objective.
    pub contrastive: Option<Var>,
    pub total: Var,
    pub counts: Vec<usize>,
}

/// Single-sample forward results as plain arrays.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub slots: SlotState,
    /// `[N, K, D_feat]`
    pub recon_per_slot: Array,
    /// `[N, K]`
    pub alpha: Array,
    /// `[N, K]`
    pub masks: Array,
    /// `[K, D_feat]`
    pub recon: Array,
    /// `[K, D_feat]`
    pub mapped: Array,
}

#[derive(Clone, Debug)]
pub struct CtrlModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub mapping: MappingNet,
    pub slot_attn: SlotAttention,
    pub decoder: Decoder,
    pub grounding: Grounding,
}

impl CtrlModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut store = ParamStore::new();
        let mapping = MappingNet::new(
            &mut store,
            c.feature_dim,
            c.mapping_layers,
            c.mapping_heads,
            c.mapping_head_dim,
            c.mapping_ff_mult,
            rng,
        )?;
        let grounding = Grounding::new(
            &mut store,
            GroundingConfig {
                input_dim: c.feature_dim,
                slot_dim: c.slot_dim,
                emb_dim: c.emb_dim,
                point_hidden: c.point_hidden,
                proj_hidden: c.proj_hidden,
                tau: c.tau,
                source: c.contrastive_source,
            },
            rng,
        )?;
        let query_dim = grounding.query_dim();
        let slot_attn = SlotAttention::new(
            &mut store,
            SlotAttnConfig {
                num_slots: c.num_slots,
                slot_dim: c.slot_dim,
                attn_dim: c.slot_dim,
                input_dim: c.feature_dim,
                query_dim,
                mlp_hidden: c.slot_mlp_hidden,
                iters: c.iters,
                init_mode: c.init_mode,
            },
            rng,
        )?;
        let decoder = Decoder::new(
            &mut store,
            c.num_patches(),
            c.slot_dim,
            query_dim,
            c.feature_dim,
            c.cond_hidden,
            &vec![c.decoder_hidden; c.decoder_layers],
            rng,
        )?;
        Ok(CtrlModel {
            config,
            store,
            mapping,
            slot_attn,
            decoder,
            grounding,
        })
    }

    pub fn sample_noise<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Array {
        self.slot_attn.sample_noise(batch, rng)
    }

    /// Builds the batch graph with parameters taken from `p`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, batch: &Batch<'_>) -> Result<ForwardVars> {
        self.forward_impl(g, p, batch, self.config.uses_contrastive())
    }

    fn forward_impl(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &Batch<'_>,
        with_contrastive: bool,
    ) -> Result<ForwardVars> {
        let c = &self.config;
        let b = batch.len();
        let (k, f) = (c.num_patches(), c.feature_dim);
        if b == 0 {
            return Err(Error::arg("empty batch"));
        }
        if batch.features.shape() != [b, k, f] {
            return Err(Error::arg(format!(
                "batch features {:?}, expected {:?}",
                batch.features.shape(),
                [b, k, f]
            )));
        }
        let counts = batch.counts();
        if let Some((i, &m)) = counts.iter().enumerate().find(|(_, &m)| m > c.num_slots) {
            return Err(Error::contract(format!(
                "sample {i} has {m} queries for {} slots",
                c.num_slots
            )));
        }
        let all: Vec<&Query> = batch
            .queries
            .iter()
            .flat_map(|q| q.queries.iter())
            .collect();
        let total = all.len();

        let h = g.constant(batch.features.clone());
        let mapped = self.mapping.forward(g, p, h)?;
        let qvecs = if total > 0 {
            Some(self.grounding.build_queries(g, p, &all, c.point_queries)?)
        } else {
            None
        };
        let slots = self
            .slot_attn
            .run(g, p, mapped, qvecs, &counts, &batch.noise)?;
        let cond = match qvecs {
            Some(q) if c.decoder_conditioning => Some((q, counts.as_slice())),
            _ => None,
        };
        let decode = self.decoder.decode(g, p, slots.slots, cond)?;
        let recon = recon_loss(g, decode.recon, h)?;

        let contrastive = if with_contrastive && total > 0 {
            let lang = match &batch.lang_targets {
                Some(t) => {
                    if t.shape() != [total, c.emb_dim] {
                        return Err(Error::arg(format!(
                            "language targets {:?}, expected [{total}, {}]",
                            t.shape(),
                            c.emb_dim
                        )));
                    }
                    t.clone()
                }
                None => {
                    Array::from_rows(&all.iter().map(|q| q.lang_code.clone()).collect::<Vec<_>>())?
                }
            };
            let lang = g.constant(lang);
            let lang = g.l2_normalize(lang)?;
            let positives: Vec<usize> = (0..total).collect();
            let lang = BatchTargets::new(g, lang, positives.clone())?;
            let point = if c.point_queries && all.iter().all(|q| q.point.is_some()) {
                let pts: Vec<[f64; 2]> = all.iter().map(|q| q.point.unwrap()).collect();
                let codes = self.grounding.point_targets(g, p, &pts)?;
                Some(BatchTargets::new(g, codes, positives)?)
            } else {
                None
            };
            let l = self.grounding.dual_contrastive(
                g,
                p,
                slots.attn,
                mapped,
                slots.slots,
                &counts,
                &lang,
                point.as_ref(),
            )?;
            Some(g.scale(l, 1.0 / b as f64))
        } else {
            None
        };
        let total_v = total_loss(g, recon, contrastive, c.lambda)?;
        Ok(ForwardVars {
            mapped,
            slots,
            decode,
            recon_loss: recon,
            contrastive,
            total: total_v,
            counts,
        })
    }

    /// Runs one sample through the model with the current parameters.
    pub fn forward_pass(
        &self,
        features: &Array,
        queries: &QuerySet,
        noise: &Array,
    ) -> Result<ModelOutput> {
        let noise = noise
            .clone()
            .reshape(&[1, self.config.num_slots, self.config.slot_dim])?;
        let mut outs = self.forward_many(&[(features, queries)], &noise)?;
        Ok(outs.remove(0))
    }

    /// Evaluates several samples in one graph without the contrastive term.
    pub fn forward_many(
        &self,
        samples: &[(&Array, &QuerySet)],
        noise: &Array,
    ) -> Result<Vec<ModelOutput>> {
        let c = &self.config;
        let (n, k, f) = (c.num_slots, c.num_patches(), c.feature_dim);
        let mut data = Vec::with_capacity(samples.len() * k * f);
        for (x, _) in samples {
            if x.shape() != [k, f] {
                return Err(Error::arg(format!(
                    "sample features {:?}, expected {:?}",
                    x.shape(),
                    [k, f]
                )));
            }
            data.extend_from_slice(x.data());
        }
        let batch = Batch {
            features: Array::new(&[samples.len(), k, f], data)?,
            queries: samples.iter().map(|(_, q)| *q).collect(),
            lang_targets: None,
            noise: noise.clone(),
        };
        let mut g = Graph::new();
        let p = self.bind_constants(&mut g);
        let fv = self.forward_impl(&mut g, &p, &batch, false)?;
        let states = slot_states(&g, fv.slots, &fv.counts)?;
        let split = |v: Var, per: usize, shape: &[usize], b: usize| -> Result<Array> {
            Array::new(shape, g.value(v).data()[b * per..(b + 1) * per].to_vec())
        };
        states
            .into_iter()
            .enumerate()
            .map(|(b, slots)| {
                Ok(ModelOutput {
                    slots,
                    recon_per_slot: split(fv.decode.recon_per_slot, n * k * f, &[n, k, f], b)?,
                    alpha: split(fv.decode.alpha, n * k, &[n, k], b)?,
                    masks: split(fv.decode.masks, n * k, &[n, k], b)?,
                    recon: split(fv.decode.recon, k * f, &[k, f], b)?,
                    mapped: split(fv.mapped, k * f, &[k, f], b)?,
                })
            })
            .collect()
    }

    fn bind_constants(&self, g: &mut Graph) -> Bound {
        Bound::from_vars(
            self.store
                .values()
                .iter()
                .map(|v| g.constant(v.clone()))
                .collect(),
        )
    }
}

/// Per-patch argmax over slot masks `[N, K]`; ties go to the lowest slot index.
pub fn hard_assignment(masks: &Array) -> Vec<usize> {
    let (n, k) = (masks.dim(0), masks.dim(1));
    (0..k)
        .map(|p| {
            let mut best = 0;
            for i in 1..n {
                if masks.get(&[i, p]) > masks.get(&[best, p]) {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Hard predicted masks, one boolean mask per slot.
pub fn hard_masks(masks: &Array) -> Vec<Vec<bool>> {
    let assign = hard_assignment(masks);
    (0..masks.dim(0))
        .map(|i| assign.iter().map(|&a| a == i).collect())
        .collect()
}
