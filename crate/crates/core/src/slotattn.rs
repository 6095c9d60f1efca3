//! Slot Attention whose first `M` slots are initialized from control queries.
//!
//! Every graph-level function here works on a batch: slots are `[B, N, D_slot]`,
//! inputs `[B, K, D_inputs]`, attention `[B, N, K]`. Sample `b` carries
//! `counts[b] = M_b ≤ N` conditioned slots, which always occupy slot indices
//! `0..M_b`. Conditioning vectors for the whole batch are stacked sample-major
//! into one `[ΣM_b, D_query]` matrix.

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, Bound, Graph, Gru, LayerNorm, Linear, Mlp, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

/// Added to attention weights before the per-slot weighted mean.
pub const ATTN_EPS: f64 = 1e-8;

/// How a conditioned slot's initial value is formed from its projected query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// The projected query replaces the Gaussian sample.
    Assign,
    /// The projected query is added to the Gaussian sample.
    Add,
    /// Queries are ignored; every slot is a Gaussian sample.
    None,
}

impl FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "assign" => Ok(InitMode::Assign),
            "add" => Ok(InitMode::Add),
            "none" | "off" => Ok(InitMode::None),
            _ => Err(Error::config(format!(
                "unknown slot init mode {s:?} (assign|add|none)"
            ))),
        }
    }
}

impl std::fmt::Display for InitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InitMode::Assign => "assign",
            InitMode::Add => "add",
            InitMode::None => "none",
        })
    }
}

/// One control query: a language-proxy code, an optional center-of-mass point,
/// and the ground-truth object it refers to (used only for evaluation).
#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub object: usize,
    pub lang_code: Vec<f64>,
    pub point: Option<[f64; 2]>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct QuerySet {
    pub queries: Vec<Query>,
}

impl QuerySet {
    pub fn new(queries: Vec<Query>) -> Result<Self> {
        let qs = QuerySet { queries };
        qs.validate()?;
        Ok(qs)
    }

    pub fn empty() -> Self {
        QuerySet::default()
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn gt_object_ids(&self) -> Vec<usize> {
        self.queries.iter().map(|q| q.object).collect()
    }

    pub fn has_points(&self) -> bool {
        self.queries.iter().all(|q| q.point.is_some())
    }

    /// First `m` queries.
    pub fn truncated(&self, m: usize) -> QuerySet {
        QuerySet {
            queries: self.queries.iter().take(m).cloned().collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let width = self.queries.first().map_or(0, |q| q.lang_code.len());
        for (i, q) in self.queries.iter().enumerate() {
            if q.lang_code.len() != width {
                return Err(Error::arg(format!(
                    "query {i} code length {} != {width}",
                    q.lang_code.len()
                )));
            }
            if let Some([x, y]) = q.point {
                if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                    return Err(Error::arg(format!(
                        "query {i} point ({x}, {y}) outside the unit square"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Final slots and the attention map of the last iteration, for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotState {
    /// `[N, D_slot]`
    pub slots: Array,
    /// `[N, K]`, columns sum to one over slots
    pub attn: Array,
    pub conditioned_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotAttnConfig {
    pub num_slots: usize,
    pub slot_dim: usize,
    pub attn_dim: usize,
    pub input_dim: usize,
    pub query_dim: usize,
    pub mlp_hidden: usize,
    pub iters: usize,
    pub init_mode: InitMode,
}

impl SlotAttnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_slots == 0 || self.slot_dim == 0 || self.attn_dim == 0 || self.input_dim == 0 {
            return Err(Error::config("slot attention dimensions must be positive"));
        }
        if self.iters == 0 {
            return Err(Error::config("slot attention needs at least one iteration"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SlotAttention {
    pub config: SlotAttnConfig,
    pub norm_inputs: LayerNorm,
    pub norm_slots: LayerNorm,
    pub norm_mlp: LayerNorm,
    pub to_k: Linear,
    pub to_q: Linear,
    pub to_v: Linear,
    pub query_proj: Linear,
    pub gru: Gru,
    pub mlp: Mlp,
    pub init_mu: ParamId,
    pub init_log_sigma: ParamId,
}

/// Graph handles produced by [`SlotAttention::run`].
#[derive(Clone, Copy, Debug)]
pub struct SlotVars {
    /// `[B, N, D_slot]`
    pub slots: Var,
    /// `[B, N, K]` from the last iteration
    pub attn: Var,
}

/// Row index of sample `b`'s slot `i` in a flattened `[B*N, ·]` matrix.
fn flat(b: usize, n: usize, i: usize) -> usize {
    b * n + i
}

/// Flattened `[B*N]` positions of every conditioned slot, sample-major.
pub fn conditioned_rows(counts: &[usize], num_slots: usize) -> Vec<usize> {
    counts
        .iter()
        .enumerate()
        .flat_map(|(b, &m)| (0..m).map(move |i| flat(b, num_slots, i)))
        .collect()
}

/// Per-slot renormalized weights `(a + ε) / Σ_k (a + ε)`, shape preserved.
pub fn weighted_mean_weights(g: &mut Graph, attn: Var) -> Result<Var> {
    let shifted = g.add_scalar(attn, ATTN_EPS);
    let rank = g.shape(attn).len();
    let total = g.sum_axis(shifted, rank - 1)?;
    g.div(shifted, total)
}

impl SlotAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: SlotAttnConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let slot_attn = SlotAttention {
            norm_inputs: LayerNorm::new(store, "slot_attn.norm_inputs", c.input_dim)?,
            norm_slots: LayerNorm::new(store, "slot_attn.norm_slots", c.slot_dim)?,
            norm_mlp: LayerNorm::new(store, "slot_attn.norm_mlp", c.slot_dim)?,
            to_k: Linear::new(store, "slot_attn.to_k", c.input_dim, c.attn_dim, false, rng)?,
            to_q: Linear::new(store, "slot_attn.to_q", c.slot_dim, c.attn_dim, false, rng)?,
            to_v: Linear::new(store, "slot_attn.to_v", c.input_dim, c.slot_dim, false, rng)?,
            query_proj: Linear::new(
                store,
                "slot_attn.query_proj",
                c.query_dim.max(1),
                c.slot_dim,
                true,
                rng,
            )?,
            gru: Gru::new(store, "slot_attn.gru", c.slot_dim, c.slot_dim, rng)?,
            mlp: Mlp::new(
                store,
                "slot_attn.mlp",
                &[c.slot_dim, c.mlp_hidden, c.slot_dim],
                true,
                rng,
            )?,
            init_mu: store.add(
                "slot_attn.init_mu",
                Array::randn(&[c.slot_dim], 1.0 / (c.slot_dim as f64).sqrt(), rng),
            )?,
            init_log_sigma: store.add("slot_attn.init_log_sigma", Array::zeros(&[c.slot_dim]))?,
            config,
        };
        Ok(slot_attn)
    }

    /// Standard-normal noise for the Gaussian part of the initialization.
    pub fn sample_noise<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Array {
        Array::randn(
            &[batch, self.config.num_slots, self.config.slot_dim],
            1.0,
            rng,
        )
    }

    /// Initial slots `[B, N, D_slot]`.
    ///
    /// `queries` holds the stacked conditioning vectors (`[ΣM_b, D_query]`) and
    /// `noise` the standard-normal draws (`[B, N, D_slot]`). Conditioned rows are
    /// fully determined by the queries in [`InitMode::Assign`]; the remaining
    /// rows are `μ + exp(log σ) ⊙ noise`.
    pub fn init_slots(
        &self,
        g: &mut Graph,
        p: &Bound,
        queries: Option<Var>,
        counts: &[usize],
        noise: &Array,
    ) -> Result<Var> {
        let (n, d) = (self.config.num_slots, self.config.slot_dim);
        let batch = counts.len();
        if noise.shape() != [batch, n, d] {
            return Err(Error::arg(format!(
                "init noise {:?}, expected {:?}",
                noise.shape(),
                [batch, n, d]
            )));
        }
        if let Some((b, &m)) = counts.iter().enumerate().find(|(_, &m)| m > n) {
            return Err(Error::contract(format!(
                "sample {b} has {m} queries for {n} slots (need M <= N)"
            )));
        }
        let total: usize = counts.iter().sum();
        let noise_v = g.constant(noise.clone());
        let sigma = g.exp(p.var(self.init_log_sigma));
        let sigma = g.reshape(sigma, &[1, 1, d])?;
        let mu = g.reshape(p.var(self.init_mu), &[1, 1, d])?;
        let scaled = g.mul(noise_v, sigma)?;
        let gauss = g.add(scaled, mu)?;
        if total == 0 || self.config.init_mode == InitMode::None {
            return Ok(gauss);
        }
        let queries =
            queries.ok_or_else(|| Error::contract("conditioned slots need query vectors"))?;
        if g.shape(queries)[0] != total {
            return Err(Error::arg(format!(
                "{} query rows for {total} conditioned slots",
                g.shape(queries)[0]
            )));
        }
        let proj = self.query_proj.forward(g, p, queries)?;
        let gauss_flat = g.reshape(gauss, &[batch * n, d])?;
        let mut index = Vec::with_capacity(batch * n);
        let mut q = 0;
        match self.config.init_mode {
            InitMode::Assign => {
                // rows [0, total) are projected queries, [total, total + B*N) Gaussian
                for (b, &m) in counts.iter().enumerate() {
                    for i in 0..n {
                        if i < m {
                            index.push(q);
                            q += 1;
                        } else {
                            index.push(total + flat(b, n, i));
                        }
                    }
                }
                let pool = g.concat(&[proj, gauss_flat], 0)?;
                let rows = g.gather_rows(pool, &index)?;
                g.reshape(rows, &[batch, n, d])
            }
            InitMode::Add => {
                let zero = g.constant(Array::zeros(&[1, d]));
                for &m in counts {
                    for i in 0..n {
                        if i < m {
                            index.push(q);
                            q += 1;
                        } else {
                            index.push(total);
                        }
                    }
                }
                let pool = g.concat(&[proj, zero], 0)?;
                let offsets = g.gather_rows(pool, &index)?;
                let summed = g.add(gauss_flat, offsets)?;
                g.reshape(summed, &[batch, n, d])
            }
            InitMode::None => unreachable!(),
        }
    }

    /// One attention/GRU/MLP refinement given pre-projected keys and values.
    fn step_kv(
        &self,
        g: &mut Graph,
        p: &Bound,
        slots: Var,
        keys: Var,
        values: Var,
    ) -> Result<SlotVars> {
        let normed = self.norm_slots.forward(g, p, slots)?;
        let q = self.to_q.forward(g, p, normed)?;
        let logits = g.bmm(q, keys, false, true)?;
        let logits = g.scale(logits, 1.0 / (self.config.attn_dim as f64).sqrt());
        let attn = g.softmax(logits, 1)?;
        let weights = weighted_mean_weights(g, attn)?;
        let updates = g.bmm(weights, values, false, false)?;
        let slots = self.gru.forward(g, p, slots, updates)?;
        let h = self.norm_mlp.forward(g, p, slots)?;
        let h = self.mlp.forward(g, p, h)?;
        let slots = g.add(slots, h)?;
        Ok(SlotVars { slots, attn })
    }

    fn check_inputs(&self, g: &Graph, slots: Var, inputs: Var) -> Result<()> {
        let (s, x) = (g.shape(slots), g.shape(inputs));
        if s.len() != 3
            || x.len() != 3
            || s[0] != x[0]
            || s[2] != self.config.slot_dim
            || x[2] != self.config.input_dim
        {
            return Err(Error::arg(format!(
                "slot attention shapes: slots {s:?}, inputs {x:?}"
            )));
        }
        Ok(())
    }

    /// A single refinement; `inputs` must already be layer-normalized.
    pub fn attention_step(
        &self,
        g: &mut Graph,
        p: &Bound,
        slots: Var,
        inputs: Var,
    ) -> Result<SlotVars> {
        self.check_inputs(g, slots, inputs)?;
        let keys = self.to_k.forward(g, p, inputs)?;
        let values = self.to_v.forward(g, p, inputs)?;
        self.step_kv(g, p, slots, keys, values)
    }

    /// Normalizes `inputs` once, then refines `init` for the configured number
    /// of iterations.
    pub fn iterate(&self, g: &mut Graph, p: &Bound, inputs: Var, init: Var) -> Result<SlotVars> {
        self.check_inputs(g, init, inputs)?;
        let normed = self.norm_inputs.forward(g, p, inputs)?;
        let keys = self.to_k.forward(g, p, normed)?;
        let values = self.to_v.forward(g, p, normed)?;
        let mut state = SlotVars {
            slots: init,
            attn: init,
        };
        for _ in 0..self.config.iters {
            state = self.step_kv(g, p, state.slots, keys, values)?;
        }
        Ok(state)
    }

    /// Initialization followed by [`iterate`](Self::iterate).
    pub fn run(
        &self,
        g: &mut Graph,
        p: &Bound,
        inputs: Var,
        queries: Option<Var>,
        counts: &[usize],
        noise: &Array,
    ) -> Result<SlotVars> {
        let init = self.init_slots(g, p, queries, counts, noise)?;
        self.iterate(g, p, inputs, init)
    }
}

/// Splits batched slot outputs into per-sample states.
pub fn slot_states(g: &Graph, vars: SlotVars, counts: &[usize]) -> Result<Vec<SlotState>> {
    let (slots, attn) = (g.value(vars.slots), g.value(vars.attn));
    let (n, d, k) = (slots.dim(1), slots.dim(2), attn.dim(2));
    counts
        .iter()
        .enumerate()
        .map(|(b, &m)| {
            Ok(SlotState {
                slots: Array::new(&[n, d], slots.data()[b * n * d..(b + 1) * n * d].to_vec())?,
                attn: Array::new(&[n, k], attn.data()[b * n * k..(b + 1) * n * k].to_vec())?,
                conditioned_count: m,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(n: usize, mode: InitMode) -> (ParamStore, SlotAttention) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = SlotAttnConfig {
            num_slots: n,
            slot_dim: 6,
            attn_dim: 5,
            input_dim: 4,
            query_dim: 3,
            mlp_hidden: 8,
            iters: 3,
            init_mode: mode,
        };
        let sa = SlotAttention::new(&mut store, cfg, &mut rng).unwrap();
        (store, sa)
    }

    #[test]
    fn unconditioned_init_is_all_gaussian() {
        let (store, sa) = setup(4, InitMode::Assign);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let noise = sa.sample_noise(1, &mut ChaCha8Rng::seed_from_u64(5));
        let init = sa.init_slots(&mut g, &p, None, &[0], &noise).unwrap();
        let mu = store.get(sa.init_mu);
        for (i, v) in g.value(init).data().iter().enumerate() {
            // log σ starts at zero so σ = 1
            assert!((v - (mu.data()[i % 6] + noise.data()[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn fully_conditioned_init_ignores_noise() {
        let (store, sa) = setup(2, InitMode::Assign);
        let qs = Array::new(&[2, 3], vec![0.1, 0.2, 0.3, -1.0, 0.5, 0.0]).unwrap();
        let run = |seed| {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let q = g.constant(qs.clone());
            let noise = sa.sample_noise(1, &mut ChaCha8Rng::seed_from_u64(seed));
            let init = sa.init_slots(&mut g, &p, Some(q), &[2], &noise).unwrap();
            g.value(init).clone()
        };
        assert_eq!(run(1), run(2));
    }

    #[test]
    fn same_seed_gives_same_free_slots() {
        let (store, sa) = setup(4, InitMode::Assign);
        let qs = Array::new(&[2, 3], vec![0.1, 0.2, 0.3, -1.0, 0.5, 0.0]).unwrap();
        let run = |seed| {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let q = g.constant(qs.clone());
            let noise = sa.sample_noise(1, &mut ChaCha8Rng::seed_from_u64(seed));
            let init = sa.init_slots(&mut g, &p, Some(q), &[2], &noise).unwrap();
            g.value(init).data()[12..].to_vec()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    #[test]
    fn too_many_queries_is_a_contract_error() {
        let (store, sa) = setup(2, InitMode::Assign);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let q = g.constant(Array::zeros(&[3, 3]));
        let noise = Array::zeros(&[1, 2, 6]);
        let r = sa.init_slots(&mut g, &p, Some(q), &[3], &noise);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn add_mode_offsets_the_gaussian_sample() {
        let (store, sa) = setup(3, InitMode::Add);
        let qs = Array::new(&[1, 3], vec![0.4, -0.2, 0.9]).unwrap();
        let noise = sa.sample_noise(1, &mut ChaCha8Rng::seed_from_u64(3));
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let q = g.constant(qs.clone());
        let init = sa.init_slots(&mut g, &p, Some(q), &[1], &noise).unwrap();
        let proj = sa.query_proj.forward(&mut g, &p, q).unwrap();
        let got = g.value(init).clone();
        let mu = store.get(sa.init_mu).data().to_vec();
        for j in 0..6 {
            let gauss = mu[j] + noise.data()[j];
            assert!((got.data()[j] - gauss - g.value(proj).data()[j]).abs() < 1e-14);
            // free rows are untouched
            assert!((got.data()[6 + j] - mu[j] - noise.data()[6 + j]).abs() < 1e-15);
        }
    }

    #[test]
    fn single_slot_attends_everywhere() {
        let (store, sa) = setup(1, InitMode::Assign);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let inputs = g.constant(Array::randn(&[1, 5, 4], 1.0, &mut rng));
        let slots = g.constant(Array::randn(&[1, 1, 6], 1.0, &mut rng));
        let out = sa.attention_step(&mut g, &p, slots, inputs).unwrap();
        assert!(g
            .value(out.attn)
            .data()
            .iter()
            .all(|&a| (a - 1.0).abs() < 1e-15));
    }

    #[test]
    fn duplicate_slots_get_identical_rows() {
        let (store, sa) = setup(3, InitMode::Assign);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let row = Array::randn(&[6], 1.0, &mut rng).into_data();
        let other = Array::randn(&[6], 1.0, &mut rng).into_data();
        let slots = [row.clone(), other, row].concat();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let inputs = g.constant(Array::randn(&[1, 7, 4], 1.0, &mut rng));
        let slots = g.constant(Array::new(&[1, 3, 6], slots).unwrap());
        let out = sa.attention_step(&mut g, &p, slots, inputs).unwrap();
        let (a, s) = (g.value(out.attn), g.value(out.slots));
        assert_eq!(&a.data()[0..7], &a.data()[14..21]);
        assert_eq!(&s.data()[0..6], &s.data()[12..18]);
    }

    #[test]
    fn hand_sized_attention_matches_scalar_softmax() {
        // N=2 slots, K=2 inputs, attention width 1: logits are products of scalars
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = SlotAttnConfig {
            num_slots: 2,
            slot_dim: 2,
            attn_dim: 1,
            input_dim: 2,
            query_dim: 1,
            mlp_hidden: 2,
            iters: 1,
            init_mode: InitMode::Assign,
        };
        let sa = SlotAttention::new(&mut store, cfg, &mut rng).unwrap();
        *store.get_mut(sa.to_k.weight) = Array::new(&[2, 1], vec![1.0, 0.0]).unwrap();
        *store.get_mut(sa.to_q.weight) = Array::new(&[2, 1], vec![1.0, 0.0]).unwrap();
        let slots = Array::new(&[1, 2, 2], vec![1.0, -1.0, -2.0, 2.0]).unwrap();
        let inputs = Array::new(&[1, 2, 2], vec![0.5, 0.0, -1.5, 3.0]).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let (s, x) = (g.constant(slots), g.constant(inputs));
        let out = sa.attention_step(&mut g, &p, s, x).unwrap();
        // layer norm of [a, -a] is [a, -a] / sqrt(a² + eps)
        let q = [1.0 / (1.0 + 1e-5f64).sqrt(), -2.0 / (4.0 + 1e-5f64).sqrt()];
        let k = [0.5, -1.5];
        let attn = g.value(out.attn);
        for (col, &kv) in k.iter().enumerate() {
            let (l0, l1) = (q[0] * kv, q[1] * kv);
            let a0 = l0.exp() / (l0.exp() + l1.exp());
            assert!((attn.get(&[0, 0, col]) - a0).abs() < 1e-12);
            assert!((attn.get(&[0, 1, col]) - (1.0 - a0)).abs() < 1e-12);
        }
    }
}
