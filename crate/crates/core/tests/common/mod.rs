//! Shared suites for the integration tests and the acceptance target.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ctrlo::diffcore::{
    grad_check, Array, Bound, Graph, Gru, LayerNorm, Linear, Mlp, ParamStore, Var,
};
use ctrlo::grounding::{contrastive_loss, BatchTargets};
use ctrlo::model::{Batch, CtrlModel, ModelConfig};
use ctrlo::slotattn::{InitMode, Query, QuerySet};
use ctrlo::Result;

pub const GRAD_H: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Σ w ⊙ x with fixed random weights, so every output coordinate matters.
fn wsum(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let w = Array::randn(g.shape(x), 1.0, &mut rng(seed ^ 0xABCD));
    let w = g.constant(w);
    let y = g.mul(x, w)?;
    Ok(g.sum(y))
}

fn positive(shape: &[usize], seed: u64) -> Array {
    Array::uniform(shape, 1.0, &mut rng(seed)).map(|v| 1.5 + v)
}

/// Model config with N=3 slots, K=8 patches and width 4.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        patches: 8,
        feature_dim: 4,
        num_slots: 3,
        slot_dim: 4,
        slot_mlp_hidden: 5,
        iters: 2,
        mapping_layers: 1,
        mapping_heads: 2,
        mapping_head_dim: 2,
        mapping_ff_mult: 2,
        cond_hidden: 4,
        decoder_hidden: 5,
        decoder_layers: 2,
        emb_dim: 3,
        point_hidden: 4,
        proj_hidden: 4,
        ..ModelConfig::default()
    }
}

pub fn unit_code(dim: usize, r: &mut impl Rng) -> Vec<f64> {
    let a = Array::randn(&[dim], 1.0, r);
    let n = a.norm();
    a.data().iter().map(|v| v / n).collect()
}

/// `count` queries over distinct objects, with points.
pub fn queries(count: usize, emb: usize, r: &mut impl Rng) -> QuerySet {
    QuerySet::new(
        (0..count)
            .map(|object| Query {
                object,
                lang_code: unit_code(emb, r),
                point: Some([r.gen(), r.gen()]),
            })
            .collect(),
    )
    .expect("valid queries")
}

type Case = (
    &'static str,
    Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>,
    Vec<Array>,
);

fn op_cases() -> Vec<Case> {
    let r = |shape: &[usize], s| Array::randn(shape, 1.0, &mut rng(s));
    let mut cases: Vec<Case> = vec![
        (
            "add",
            Box::new(|g, v| {
                let y = g.add(v[0], v[1])?;
                wsum(g, y, 1)
            }),
            vec![r(&[3, 4], 1), r(&[1, 4], 2)],
        ),
        (
            "sub",
            Box::new(|g, v| {
                let y = g.sub(v[0], v[1])?;
                wsum(g, y, 2)
            }),
            vec![r(&[3, 4], 3), r(&[3, 1], 4)],
        ),
        (
            "mul",
            Box::new(|g, v| {
                let y = g.mul(v[0], v[1])?;
                wsum(g, y, 3)
            }),
            vec![r(&[2, 3, 4], 5), r(&[2, 1, 4], 6)],
        ),
        (
            "div",
            Box::new(|g, v| {
                let y = g.div(v[0], v[1])?;
                wsum(g, y, 4)
            }),
            vec![r(&[3, 4], 7), positive(&[3, 4], 8)],
        ),
        (
            "scale",
            Box::new(|g, v| {
                let y = g.scale(v[0], -1.7);
                wsum(g, y, 5)
            }),
            vec![r(&[5], 9)],
        ),
        (
            "neg",
            Box::new(|g, v| {
                let y = g.neg(v[0]);
                wsum(g, y, 6)
            }),
            vec![r(&[5], 10)],
        ),
        (
            "add_scalar",
            Box::new(|g, v| {
                let y = g.add_scalar(v[0], 0.3);
                let y = g.square(y);
                wsum(g, y, 7)
            }),
            vec![r(&[5], 11)],
        ),
        (
            "exp",
            Box::new(|g, v| {
                let y = g.exp(v[0]);
                wsum(g, y, 8)
            }),
            vec![r(&[3, 3], 12)],
        ),
        (
            "log",
            Box::new(|g, v| {
                let y = g.log(v[0]);
                wsum(g, y, 9)
            }),
            vec![positive(&[3, 3], 13)],
        ),
        (
            "tanh",
            Box::new(|g, v| {
                let y = g.tanh(v[0]);
                wsum(g, y, 10)
            }),
            vec![r(&[3, 3], 14)],
        ),
        (
            "sigmoid",
            Box::new(|g, v| {
                let y = g.sigmoid(v[0]);
                wsum(g, y, 11)
            }),
            vec![r(&[3, 3], 15)],
        ),
        (
            "gelu",
            Box::new(|g, v| {
                let y = g.gelu(v[0]);
                wsum(g, y, 12)
            }),
            vec![r(&[4, 3], 16).map(|x| 3.0 * x)],
        ),
        (
            "square",
            Box::new(|g, v| {
                let y = g.square(v[0]);
                wsum(g, y, 13)
            }),
            vec![r(&[3, 3], 17)],
        ),
        (
            "matmul",
            Box::new(|g, v| {
                let y = g.matmul(v[0], v[1])?;
                wsum(g, y, 14)
            }),
            vec![r(&[2, 3, 4], 18), r(&[4, 5], 19)],
        ),
        (
            "bmm",
            Box::new(|g, v| {
                let y = g.bmm(v[0], v[1], false, false)?;
                wsum(g, y, 15)
            }),
            vec![r(&[2, 3, 4], 20), r(&[2, 4, 2], 21)],
        ),
        (
            "bmm_t",
            Box::new(|g, v| {
                let y = g.bmm(v[0], v[1], true, true)?;
                wsum(g, y, 16)
            }),
            vec![r(&[2, 4, 3], 22), r(&[2, 2, 4], 23)],
        ),
        (
            "softmax",
            Box::new(|g, v| {
                let y = g.softmax(v[0], 1)?;
                wsum(g, y, 17)
            }),
            vec![r(&[2, 3, 4], 24)],
        ),
        (
            "log_softmax",
            Box::new(|g, v| {
                let y = g.log_softmax(v[0], 2)?;
                wsum(g, y, 18)
            }),
            vec![r(&[2, 3, 4], 25)],
        ),
        (
            "layer_norm",
            Box::new(|g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                wsum(g, y, 19)
            }),
            vec![r(&[3, 5], 26), r(&[5], 27), r(&[5], 28)],
        ),
        (
            "l2_normalize",
            Box::new(|g, v| {
                let y = g.l2_normalize(v[0])?;
                wsum(g, y, 20)
            }),
            vec![r(&[3, 4], 29)],
        ),
        (
            "sum",
            Box::new(|g, v| {
                let y = g.sum(v[0]);
                Ok(g.square(y))
            }),
            vec![r(&[3, 2], 30)],
        ),
        (
            "mean",
            Box::new(|g, v| {
                let y = g.mean(v[0]);
                Ok(g.square(y))
            }),
            vec![r(&[3, 2], 31)],
        ),
        (
            "sum_axis",
            Box::new(|g, v| {
                let y = g.sum_axis(v[0], 1)?;
                let y = g.square(y);
                wsum(g, y, 21)
            }),
            vec![r(&[2, 3, 4], 32)],
        ),
        (
            "reshape",
            Box::new(|g, v| {
                let y = g.reshape(v[0], &[4, 3])?;
                let y = g.square(y);
                wsum(g, y, 22)
            }),
            vec![r(&[3, 4], 33)],
        ),
        (
            "permute",
            Box::new(|g, v| {
                let y = g.permute(v[0], &[2, 0, 1])?;
                let y = g.square(y);
                wsum(g, y, 23)
            }),
            vec![r(&[2, 3, 4], 34)],
        ),
        (
            "broadcast_to",
            Box::new(|g, v| {
                let y = g.broadcast_to(v[0], &[3, 2, 4])?;
                let y = g.square(y);
                wsum(g, y, 24)
            }),
            vec![r(&[1, 2, 1], 35)],
        ),
        (
            "concat",
            Box::new(|g, v| {
                let y = g.concat(&[v[0], v[1]], 1)?;
                let y = g.square(y);
                wsum(g, y, 25)
            }),
            vec![r(&[2, 3], 36), r(&[2, 2], 37)],
        ),
        (
            "narrow",
            Box::new(|g, v| {
                let y = g.narrow(v[0], 1, 1, 2)?;
                let y = g.square(y);
                wsum(g, y, 26)
            }),
            vec![r(&[2, 4], 38)],
        ),
        (
            "gather_rows",
            Box::new(|g, v| {
                let y = g.gather_rows(v[0], &[2, 0, 2, 1])?;
                let y = g.square(y);
                wsum(g, y, 27)
            }),
            vec![r(&[3, 2], 39)],
        ),
    ];

    // Layers: parameters come first in the point, then inputs.
    let mut store = ParamStore::new();
    let mut init = rng(40);
    let lin = Linear::new(&mut store, "lin", 3, 4, true, &mut init).expect("linear");
    let ln = LayerNorm::new(&mut store, "ln", 4).expect("layer norm");
    let mlp = Mlp::new(&mut store, "mlp", &[4, 5, 5, 2], true, &mut init).expect("mlp");
    let gru = Gru::new(&mut store, "gru", 3, 4, &mut init).expect("gru");
    // perturb norms away from their identity init
    let mut point: Vec<Array> = store.values().iter().map(|a| a.map(|v| v + 0.1)).collect();
    let n = point.len();
    point.push(r(&[2, 3], 41));
    point.push(r(&[2, 4], 42));
    cases.push((
        "layers",
        Box::new(move |g, v| {
            let p = Bound::from_vars(v[..n].to_vec());
            let x = lin.forward(g, &p, v[n])?;
            let x = ln.forward(g, &p, x)?;
            let y = mlp.forward(g, &p, x)?;
            let h = gru.forward(g, &p, v[n + 1], v[n])?;
            let a = wsum(g, y, 28)?;
            let b = wsum(g, h, 29)?;
            g.add(a, b)
        }),
        point,
    ));

    // Contrastive loss with leaf projections and targets.
    cases.push((
        "contrastive_loss",
        Box::new(|g, v| {
            let z = g.l2_normalize(v[0])?;
            let t = g.l2_normalize(v[1])?;
            let targets = BatchTargets::new(g, t, vec![0, 2, 3])?;
            contrastive_loss(g, z, &targets, 0.1)
        }),
        vec![r(&[3, 4], 43), r(&[4, 4], 44)],
    ));
    cases
}

fn model_case(name: &'static str, cfg: ModelConfig, seed: u64) -> Case {
    let mut r = rng(seed);
    let model = CtrlModel::new(cfg.clone(), &mut r).expect("model");
    let b = 2;
    let feats = Array::randn(&[b, cfg.patches, cfg.feature_dim], 1.0, &mut r);
    let qs = vec![
        queries(2, cfg.emb_dim, &mut r),
        queries(1, cfg.emb_dim, &mut r),
    ];
    let noise = model.sample_noise(b, &mut r);
    let point: Vec<Array> = model.store.values().to_vec();
    (
        name,
        Box::new(move |g, v| {
            let p = Bound::from_vars(v.to_vec());
            let batch = Batch {
                features: feats.clone(),
                queries: qs.iter().collect(),
                lang_targets: None,
                noise: noise.clone(),
            };
            Ok(model.forward(g, &p, &batch)?.total)
        }),
        point,
    )
}

/// Max relative error of every differentiable operation, layer and the full
/// training objective under a few switch settings.
pub fn gradient_suite() -> Vec<(String, f64)> {
    let mut cases = op_cases();
    cases.push(model_case("total_loss", tiny_model(), 50));
    cases.push(model_case(
        "total_loss_add_init",
        ModelConfig {
            init_mode: InitMode::Add,
            lambda: 0.5,
            ..tiny_model()
        },
        51,
    ));
    cases.push(model_case(
        "total_loss_no_dc_lang_only",
        ModelConfig {
            decoder_conditioning: false,
            point_queries: false,
            ..tiny_model()
        },
        52,
    ));
    cases
        .into_iter()
        .map(|(name, f, point)| {
            let rep = grad_check(f, &point, GRAD_H).unwrap_or_else(|e| panic!("{name}: {e}"));
            (name.to_string(), rep.max_rel_error)
        })
        .collect()
}

// ---------------------------------------------------------------- invariants

use ctrlo::model::ModelOutput;

/// A random small model config and matching inputs.
pub struct InvariantCase {
    pub cfg: ModelConfig,
    pub features: Array,
    pub queries: QuerySet,
    pub noise: Array,
}

pub fn invariant_case(seed: u64) -> InvariantCase {
    let mut r = rng(seed);
    let n = r.gen_range(2..=5);
    let cfg = ModelConfig {
        patches: r.gen_range(4..=12),
        num_slots: n,
        init_mode: [InitMode::Assign, InitMode::Add][r.gen_range(0..2)],
        decoder_conditioning: r.gen(),
        point_queries: r.gen(),
        ..tiny_model()
    };
    let m = r.gen_range(0..=n);
    let features = Array::randn(&[cfg.patches, cfg.feature_dim], 1.0, &mut r);
    let queries = queries(m, cfg.emb_dim, &mut r);
    let noise = Array::randn(&[n, cfg.slot_dim], 1.0, &mut r);
    InvariantCase {
        cfg,
        features,
        queries,
        noise,
    }
}

fn run_case(cfg: &ModelConfig, c: &InvariantCase, noise: &Array, params_seed: u64) -> ModelOutput {
    let model = CtrlModel::new(cfg.clone(), &mut rng(params_seed)).expect("model");
    model
        .forward_pass(&c.features, &c.queries, noise)
        .expect("forward")
}

/// Largest deviation from one of an attention or mask column sum.
pub fn column_sum_error(seed: u64) -> f64 {
    let c = invariant_case(seed);
    let o = run_case(&c.cfg, &c, &c.noise, seed);
    let (n, k) = (c.cfg.num_slots, c.cfg.patches);
    let mut worst = 0.0f64;
    for p in 0..k {
        let a: f64 = (0..n).map(|i| o.slots.attn.get(&[i, p])).sum();
        let m: f64 = (0..n).map(|i| o.masks.get(&[i, p])).sum();
        worst = worst.max((a - 1.0).abs()).max((m - 1.0).abs());
    }
    worst
}

/// Permutes the noise rows of the free slots and measures how far the
/// outputs are from the same permutation of the original outputs.
pub fn free_slot_equivariance_error(seed: u64) -> f64 {
    let c = invariant_case(seed);
    let (n, d, k) = (c.cfg.num_slots, c.cfg.slot_dim, c.cfg.patches);
    let m = c.queries.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut r = rng(seed ^ 0x5EED);
    rand::seq::SliceRandom::shuffle(&mut perm[m..], &mut r);
    let mut noise = c.noise.clone();
    for i in 0..n {
        noise.data_mut()[i * d..(i + 1) * d]
            .copy_from_slice(&c.noise.data()[perm[i] * d..(perm[i] + 1) * d]);
    }
    let a = run_case(&c.cfg, &c, &c.noise, seed);
    let b = run_case(&c.cfg, &c, &noise, seed);
    let mut worst = a.recon.max_abs_diff(&b.recon);
    for i in 0..n {
        for p in 0..k {
            worst = worst.max((b.masks.get(&[i, p]) - a.masks.get(&[perm[i], p])).abs());
            worst = worst.max((b.slots.attn.get(&[i, p]) - a.slots.attn.get(&[perm[i], p])).abs());
        }
        for j in 0..d {
            worst =
                worst.max((b.slots.slots.get(&[i, j]) - a.slots.slots.get(&[perm[i], j])).abs());
        }
    }
    worst
}

/// With no queries, the conditioned model must equal the plain pipeline
/// (random init, unconditioned decoder, no contrastive term) on the same
/// parameters. Returns the largest output difference and whether the
/// objective was reconstruction alone.
pub fn m0_reduction_error(seed: u64) -> (f64, bool) {
    let mut c = invariant_case(seed);
    c.queries = QuerySet::empty();
    let plain = ModelConfig {
        init_mode: InitMode::None,
        decoder_conditioning: false,
        contrastive: false,
        ..c.cfg.clone()
    };
    let a = run_case(&c.cfg, &c, &c.noise, seed);
    let b = run_case(&plain, &c, &c.noise, seed);
    let diff = a
        .masks
        .max_abs_diff(&b.masks)
        .max(a.recon.max_abs_diff(&b.recon))
        .max(a.slots.slots.max_abs_diff(&b.slots.slots));

    let model = CtrlModel::new(c.cfg.clone(), &mut rng(seed)).expect("model");
    let batch = Batch {
        features: c
            .features
            .clone()
            .reshape(&[1, c.cfg.patches, c.cfg.feature_dim])
            .unwrap(),
        queries: vec![&c.queries],
        lang_targets: None,
        noise: c
            .noise
            .clone()
            .reshape(&[1, c.cfg.num_slots, c.cfg.slot_dim])
            .unwrap(),
    };
    let mut g = Graph::new();
    let p = model.store.bind(&mut g);
    let fv = model.forward(&mut g, &p, &batch).expect("forward");
    let recon_only =
        fv.contrastive.is_none() && g.value(fv.total).item() == g.value(fv.recon_loss).item();
    (diff, recon_only)
}

// ------------------------------------------------------------ metric oracles

use ctrlo::metrics::{binding_hit_count, fg_ari, mbo, miou, BindingRule, MaskSet};

fn masks_from_labels(labels: &[usize], count: usize) -> Vec<Vec<bool>> {
    (0..count)
        .map(|c| labels.iter().map(|&l| l == c).collect())
        .collect()
}

fn oracle_iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = (0..a.len()).filter(|&i| a[i] && b[i]).count();
    let union = (0..a.len()).filter(|&i| a[i] || b[i]).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// ARI from explicit pair counts over all foreground patch pairs.
fn oracle_ari(pred: &[usize], gt: &[usize], fg: &[bool]) -> f64 {
    let idx: Vec<usize> = (0..fg.len()).filter(|&i| fg[i]).collect();
    let (mut n11, mut n10, mut n01, mut n00) = (0f64, 0f64, 0f64, 0f64);
    for a in 0..idx.len() {
        for b in a + 1..idx.len() {
            let sp = pred[idx[a]] == pred[idx[b]];
            let sg = gt[idx[a]] == gt[idx[b]];
            match (sp, sg) {
                (true, true) => n11 += 1.0,
                (true, false) => n10 += 1.0,
                (false, true) => n01 += 1.0,
                (false, false) => n00 += 1.0,
            }
        }
    }
    let den = (n00 + n01) * (n01 + n11) + (n00 + n10) * (n10 + n11);
    if den == 0.0 {
        1.0
    } else {
        2.0 * (n00 * n11 - n01 * n10) / den
    }
}

fn oracle_hit(
    pred: &[Vec<bool>],
    gt: &[Vec<bool>],
    slot: usize,
    obj: usize,
    rule: BindingRule,
) -> bool {
    let mine = oracle_iou(&pred[slot], &gt[obj]);
    let best_slot = (0..pred.len()).all(|j| j == slot || oracle_iou(&pred[j], &gt[obj]) < mine);
    match rule {
        BindingRule::UniqueArgmax => best_slot,
        BindingRule::MutualBest => {
            best_slot && (0..gt.len()).all(|o| o == obj || oracle_iou(&pred[slot], &gt[o]) < mine)
        }
    }
}

#[derive(Debug, Default)]
pub struct OracleReport {
    pub fg_ari: f64,
    pub mbo: f64,
    pub binding_hits: f64,
    pub miou: f64,
}

/// Worst absolute disagreement of each metric with its brute-force oracle
/// over `instances` random labelings with at most 30 patches.
pub fn metric_oracle_suite(instances: usize, seed: u64) -> OracleReport {
    let mut r = rng(seed);
    let mut rep = OracleReport::default();
    for _ in 0..instances {
        let k = r.gen_range(1..=30);
        let n = r.gen_range(1..=7);
        let objects = r.gen_range(1..=5);
        // Predicted label n means "covered by no mask".
        let pred_labels: Vec<usize> = (0..k).map(|_| r.gen_range(0..=n)).collect();
        // Ground-truth label `objects` is background.
        let gt_labels: Vec<usize> = (0..k).map(|_| r.gen_range(0..=objects)).collect();
        let pred = masks_from_labels(&pred_labels, n);
        let gt = masks_from_labels(&gt_labels, objects);
        let fg: Vec<bool> = gt_labels.iter().map(|&l| l < objects).collect();
        let (ps, gs) = (
            MaskSet::predicted(pred.clone()),
            MaskSet::ground_truth(gt.clone()),
        );

        let ari = fg_ari(&ps, &gs, &fg).expect("fg_ari");
        rep.fg_ari = rep
            .fg_ari
            .max((ari.value - oracle_ari(&pred_labels, &gt_labels, &fg)).abs());

        let want_mbo = gt
            .iter()
            .map(|g| pred.iter().map(|p| oracle_iou(p, g)).fold(0.0, f64::max))
            .sum::<f64>()
            / objects as f64;
        rep.mbo = rep.mbo.max((mbo(&ps, &gs).expect("mbo") - want_mbo).abs());

        let bindings: Vec<(usize, usize)> = (0..r.gen_range(1..=objects.min(n)))
            .map(|_| (r.gen_range(0..n), r.gen_range(0..objects)))
            .collect();
        for rule in [BindingRule::UniqueArgmax, BindingRule::MutualBest] {
            let got = binding_hit_count(&ps, &gs, &bindings, rule).expect("binding hits");
            let want = bindings
                .iter()
                .filter(|&&(s, o)| oracle_hit(&pred, &gt, s, o, rule))
                .count();
            rep.binding_hits = rep.binding_hits.max((got as f64 - want as f64).abs());
        }

        let pairs: Vec<(&[bool], &[bool])> = bindings
            .iter()
            .map(|&(s, o)| (pred[s].as_slice(), gt[o].as_slice()))
            .collect();
        let want_miou = bindings
            .iter()
            .map(|&(s, o)| oracle_iou(&pred[s], &gt[o]))
            .sum::<f64>()
            / bindings.len() as f64;
        rep.miou = rep
            .miou
            .max((miou(&pairs).expect("miou") - want_miou).abs());
    }
    rep
}

// ------------------------------------------------------------------ datasets

use ctrlo::synthscene::{
    generate_dataset, read_dataset, write_dataset, SceneCodebooks, SceneConfig, ShapeFamily, Stream,
};

/// A random small but valid scene configuration.
pub fn random_scene_config(r: &mut impl Rng) -> SceneConfig {
    let grid = r.gen_range(6..=12);
    let max_size = r.gen_range(2..=3);
    let min_objects = r.gen_range(1..=3);
    SceneConfig {
        grid,
        min_objects,
        max_objects: r.gen_range(min_objects..=4),
        min_size: 2,
        max_size,
        shapes: [
            ShapeFamily::Rectangles,
            ShapeFamily::Blobs,
            ShapeFamily::Mixed,
        ][r.gen_range(0..3)],
        noise: r.gen_range(0.0..0.2),
        categories: r.gen_range(2..=12),
        appearance_dim: r.gen_range(8..=32),
        emb_dim: r.gen_range(8..=32),
        max_queries: r.gen_range(1..=5),
        with_points: r.gen(),
        ..SceneConfig::default()
    }
}

/// Writes, reads and rewrites `count` random datasets; returns how many were
/// not byte-identical or did not read back equal.
pub fn format_roundtrip_failures(count: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    let mut failures = 0;
    for i in 0..count {
        let cfg = random_scene_config(&mut r);
        let books = SceneCodebooks::generate(&cfg, seed + i as u64).expect("codebooks");
        let n = r.gen_range(0..=6);
        let data = generate_dataset(&cfg, &books, seed + i as u64, Stream::EvalScenes, 0, n)
            .expect("dataset");
        let mut first = Vec::new();
        write_dataset(&data, &mut first).expect("write");
        let back = read_dataset(&first).expect("read");
        let mut second = Vec::new();
        write_dataset(&back, &mut second).expect("rewrite");
        if back != data || first != second {
            failures += 1;
        }
    }
    failures
}
