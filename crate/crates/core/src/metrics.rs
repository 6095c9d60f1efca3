//! Object-discovery and grounding metrics on hard patch masks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskOrigin {
    Predicted,
    GroundTruth,
}

/// Boolean patch masks of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub masks: Vec<Vec<bool>>,
    pub origin: MaskOrigin,
}

impl MaskSet {
    pub fn predicted(masks: Vec<Vec<bool>>) -> Self {
        MaskSet {
            masks,
            origin: MaskOrigin::Predicted,
        }
    }

    pub fn ground_truth(masks: Vec<Vec<bool>>) -> Self {
        MaskSet {
            masks,
            origin: MaskOrigin::GroundTruth,
        }
    }

    /// Predicted masks from a per-patch slot assignment.
    pub fn from_assignment(assign: &[usize], num_slots: usize) -> Self {
        MaskSet::predicted(
            (0..num_slots)
                .map(|i| assign.iter().map(|&a| a == i).collect())
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    fn patches(&self) -> Option<usize> {
        self.masks.first().map(Vec::len)
    }

    fn check_lengths(&self, k: usize) -> Result<()> {
        match self.masks.iter().position(|m| m.len() != k) {
            Some(i) => Err(Error::arg(format!(
                "mask {i} has {} patches, expected {k}",
                self.masks[i].len()
            ))),
            None => Ok(()),
        }
    }

    /// Index of the first mask containing each patch (`None` if uncovered).
    fn labels(&self, k: usize) -> Vec<Option<usize>> {
        (0..k)
            .map(|p| self.masks.iter().position(|m| m[p]))
            .collect()
    }
}

/// `|a ∩ b| / |a ∪ b|`, with two empty masks scoring 1.
pub fn iou(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::arg(format!(
            "iou of masks with {} and {} patches",
            a.len(),
            b.len()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// FG-ARI value and whether it fell back to 1 on a degenerate labeling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AriScore {
    pub value: f64,
    pub degenerate: bool,
}

fn pairs(n: usize) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand index between the predicted and ground-truth labelings of
/// the `foreground` patches. Predicted patches covered by no mask form one
/// extra cluster. When the index is 0/0 (fewer than two foreground patches, or
/// both labelings a single cluster) the score is 1 and flagged degenerate.
pub fn fg_ari(pred: &MaskSet, gt: &MaskSet, foreground: &[bool]) -> Result<AriScore> {
    let k = foreground.len();
    pred.check_lengths(k)?;
    gt.check_lengths(k)?;
    let (pl, gl) = (pred.labels(k), gt.labels(k));
    let (np, ng) = (pred.len() + 1, gt.len() + 1);
    let mut table = vec![0usize; np * ng];
    let mut n = 0;
    for p in (0..k).filter(|&p| foreground[p]) {
        let i = pl[p].unwrap_or(pred.len());
        let j = gl[p].unwrap_or(gt.len());
        table[i * ng + j] += 1;
        n += 1;
    }
    let index: f64 = table.iter().map(|&c| pairs(c)).sum();
    let a: f64 = (0..np)
        .map(|i| pairs(table[i * ng..(i + 1) * ng].iter().sum()))
        .sum();
    let b: f64 = (0..ng)
        .map(|j| pairs((0..np).map(|i| table[i * ng + j]).sum()))
        .sum();
    let total = pairs(n);
    if total == 0.0 {
        return Ok(AriScore {
            value: 1.0,
            degenerate: true,
        });
    }
    let expected = a * b / total;
    let max = (a + b) / 2.0;
    if max == expected {
        return Ok(AriScore {
            value: 1.0,
            degenerate: true,
        });
    }
    Ok(AriScore {
        value: (index - expected) / (max - expected),
        degenerate: false,
    })
}

/// Mean over ground-truth masks of the best IoU with any predicted mask.
pub fn mbo(pred: &MaskSet, gt: &MaskSet) -> Result<f64> {
    if gt.is_empty() {
        return Err(Error::arg("mBO needs at least one ground-truth mask"));
    }
    let mut acc = 0.0;
    for m in &gt.masks {
        let mut best = 0.0f64;
        for p in &pred.masks {
            best = best.max(iou(p, m)?);
        }
        acc += best;
    }
    Ok(acc / gt.len() as f64)
}

/// How a binding `(slot, object)` is scored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BindingRule {
    /// The slot's mask is the unique best-IoU predicted mask for the object;
    /// ties are misses.
    #[default]
    UniqueArgmax,
    /// Additionally the object must be the slot's unique best-IoU object.
    MutualBest,
}

impl std::str::FromStr for BindingRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unique_argmax" => Ok(BindingRule::UniqueArgmax),
            "mutual_best" => Ok(BindingRule::MutualBest),
            _ => Err(Error::config(format!(
                "unknown binding rule {s:?} (unique_argmax|mutual_best)"
            ))),
        }
    }
}

fn unique_argmax(scores: &[f64]) -> Option<usize> {
    let mut best = None;
    let mut top = f64::NEG_INFINITY;
    let mut tied = false;
    for (i, &s) in scores.iter().enumerate() {
        if s > top {
            top = s;
            best = Some(i);
            tied = false;
        } else if s == top {
            tied = true;
        }
    }
    if tied {
        None
    } else {
        best
    }
}

/// Number of hits among `bindings`, each `(predicted mask index, gt mask index)`.
pub fn binding_hit_count(
    pred: &MaskSet,
    gt: &MaskSet,
    bindings: &[(usize, usize)],
    rule: BindingRule,
) -> Result<usize> {
    let mut hits = 0;
    for (b, &(i, o)) in bindings.iter().enumerate() {
        if i >= pred.len() || o >= gt.len() {
            return Err(Error::arg(format!(
                "binding {b} = ({i}, {o}) out of range for {} predicted / {} ground-truth masks",
                pred.len(),
                gt.len()
            )));
        }
        let column = pred
            .masks
            .iter()
            .map(|p| iou(p, &gt.masks[o]))
            .collect::<Result<Vec<_>>>()?;
        let mut hit = unique_argmax(&column) == Some(i);
        if hit && rule == BindingRule::MutualBest {
            let row = gt
                .masks
                .iter()
                .map(|m| iou(&pred.masks[i], m))
                .collect::<Result<Vec<_>>>()?;
            hit = unique_argmax(&row) == Some(o);
        }
        hits += hit as usize;
    }
    Ok(hits)
}

/// Fraction of bindings that are hits.
pub fn binding_hits(
    pred: &MaskSet,
    gt: &MaskSet,
    bindings: &[(usize, usize)],
    rule: BindingRule,
) -> Result<f64> {
    if bindings.is_empty() {
        return Err(Error::arg("binding hits needs at least one binding"));
    }
    Ok(binding_hit_count(pred, gt, bindings, rule)? as f64 / bindings.len() as f64)
}

/// Mean IoU over `(predicted, ground-truth)` mask pairs.
pub fn miou(pairs: &[(&[bool], &[bool])]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::arg("mIoU needs at least one pair"));
    }
    let mut acc = 0.0;
    for (p, g) in pairs {
        acc += iou(p, g)?;
    }
    Ok(acc / pairs.len() as f64)
}

/// Metrics of one sample. Grounding fields are empty when it had no queries.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMetrics {
    pub fg_ari: AriScore,
    pub mbo: f64,
    pub hits: usize,
    pub bindings: usize,
    pub iou_sum: f64,
    /// Expected hits if every conditioned slot index were replaced by a
    /// uniformly random slot.
    pub random_hits: f64,
}

/// Scores one sample. Binding `j` pairs conditioned slot `j` with `objects[j]`.
pub fn score_sample(
    pred: &MaskSet,
    gt: &MaskSet,
    objects: &[usize],
    rule: BindingRule,
) -> Result<SampleMetrics> {
    let k = pred.patches().or(gt.patches()).unwrap_or(0);
    let mut foreground = vec![false; k];
    for m in &gt.masks {
        for (f, &v) in foreground.iter_mut().zip(m) {
            *f |= v;
        }
    }
    let bindings: Vec<(usize, usize)> = objects.iter().copied().enumerate().collect();
    let mut iou_sum = 0.0;
    for &(i, o) in &bindings {
        iou_sum += iou(&pred.masks[i], &gt.masks[o])?;
    }
    let mut random_hits = 0.0;
    for &(_, o) in &bindings {
        let any: Vec<(usize, usize)> = (0..pred.len()).map(|j| (j, o)).collect();
        random_hits += binding_hit_count(pred, gt, &any, rule)? as f64 / pred.len() as f64;
    }
    Ok(SampleMetrics {
        fg_ari: fg_ari(pred, gt, &foreground)?,
        mbo: mbo(pred, gt)?,
        hits: binding_hit_count(pred, gt, &bindings, rule)?,
        bindings: bindings.len(),
        iou_sum,
        random_hits,
    })
}

/// Dataset-level metrics. FG-ARI and mBO are per-sample means; Binding Hits
/// and mIoU pool every binding in the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fg_ari: f64,
    pub mbo: f64,
    pub binding_hits: f64,
    pub miou: f64,
    /// Expected Binding Hits of uniformly random slot indices on the same masks.
    pub random_binding_hits: f64,
    pub samples: usize,
    pub bindings: usize,
    pub fg_ari_degenerate: usize,
}

impl MetricsReport {
    pub fn aggregate(samples: &[SampleMetrics]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::arg("cannot report metrics over zero samples"));
        }
        let n = samples.len() as f64;
        let bindings: usize = samples.iter().map(|s| s.bindings).sum();
        let per_binding = |f: &dyn Fn(&SampleMetrics) -> f64| {
            if bindings == 0 {
                f64::NAN
            } else {
                samples.iter().map(f).sum::<f64>() / bindings as f64
            }
        };
        Ok(MetricsReport {
            fg_ari: samples.iter().map(|s| s.fg_ari.value).sum::<f64>() / n,
            mbo: samples.iter().map(|s| s.mbo).sum::<f64>() / n,
            binding_hits: per_binding(&|s| s.hits as f64),
            miou: per_binding(&|s| s.iou_sum),
            random_binding_hits: per_binding(&|s| s.random_hits),
            samples: samples.len(),
            bindings,
            fg_ari_degenerate: samples.iter().filter(|s| s.fg_ari.degenerate).count(),
        })
    }
}

/// Monte-Carlo estimate of Binding Hits when each binding's slot index is
/// drawn uniformly at random. Each entry of `samples` is
/// `(predicted, ground truth, bound objects)`.
pub fn random_binding_baseline<R: Rng + ?Sized>(
    samples: &[(&MaskSet, &MaskSet, &[usize])],
    rule: BindingRule,
    draws: usize,
    rng: &mut R,
) -> Result<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for _ in 0..draws {
        for (pred, gt, objects) in samples {
            if pred.is_empty() {
                return Err(Error::arg("baseline needs predicted masks"));
            }
            let shuffled: Vec<(usize, usize)> = objects
                .iter()
                .map(|&o| (rng.gen_range(0..pred.len()), o))
                .collect();
            hits += binding_hit_count(pred, gt, &shuffled, rule)?;
            total += shuffled.len();
        }
    }
    if total == 0 {
        return Err(Error::arg("baseline needs at least one binding"));
    }
    Ok(hits as f64 / total as f64)
}
