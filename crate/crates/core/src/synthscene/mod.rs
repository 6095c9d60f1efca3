//! Procedural multi-object scenes standing in for a frozen patch encoder.
//!
//! Each patch carries the appearance code of the object covering it (or the
//! background code), Gaussian noise, and two trailing channels with the patch
//! center in normalized grid coordinates. Queries use a separate conditioning
//! codebook drawn independently of the appearance codes, so a model has to
//! learn which appearance a query refers to.

mod format;

pub use format::{
    ingest_features, read_dataset, write_dataset, write_features, FORMAT_VERSION, MAGIC,
};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Array;
use crate::error::{Error, Result};
use crate::slotattn::{Query, QuerySet};

/// Number of position channels appended to every patch feature.
pub const POSITION_CHANNELS: usize = 2;

const PLACEMENT_RETRIES: usize = 200;
const LAYOUT_RETRIES: usize = 50;
const CODEBOOK_RETRIES: usize = 20_000;

/// `K = G²` patch features, row-major over the grid, `[K, D_feat]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub side: usize,
    pub features: Array,
}

impl FeatureGrid {
    pub fn new(side: usize, features: Array) -> Result<Self> {
        if features.rank() != 2 || features.dim(0) != side * side {
            return Err(Error::arg(format!(
                "feature grid of side {side} needs [{}, D] features, got {:?}",
                side * side,
                features.shape()
            )));
        }
        Ok(FeatureGrid { side, features })
    }

    pub fn num_patches(&self) -> usize {
        self.side * self.side
    }

    pub fn dim(&self) -> usize {
        self.features.dim(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub category: usize,
    pub mask: Vec<bool>,
    /// Mask centroid `(x, y)` in `[0, 1]²`, patch centers at `(c + ½)/G, (r + ½)/G`.
    pub center: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub side: usize,
    pub objects: Vec<SceneObject>,
}

/// Center of patch `k` on a grid of side `side`.
pub fn patch_center(k: usize, side: usize) -> [f64; 2] {
    let (r, c) = (k / side, k % side);
    [
        (c as f64 + 0.5) / side as f64,
        (r as f64 + 0.5) / side as f64,
    ]
}

/// Mean patch center of a mask; `None` for an empty mask.
pub fn mask_centroid(mask: &[bool], side: usize) -> Option<[f64; 2]> {
    let cells: Vec<[f64; 2]> = mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(k, _)| patch_center(k, side))
        .collect();
    if cells.is_empty() {
        return None;
    }
    let n = cells.len() as f64;
    Some([
        cells.iter().map(|c| c[0]).sum::<f64>() / n,
        cells.iter().map(|c| c[1]).sum::<f64>() / n,
    ])
}

impl SceneSpec {
    pub fn num_patches(&self) -> usize {
        self.side * self.side
    }

    /// Patches not covered by any object.
    pub fn background(&self) -> Vec<bool> {
        let mut bg = vec![true; self.num_patches()];
        for o in &self.objects {
            for (b, &m) in bg.iter_mut().zip(&o.mask) {
                if m {
                    *b = false;
                }
            }
        }
        bg
    }

    pub fn foreground(&self) -> Vec<bool> {
        self.background().into_iter().map(|b| !b).collect()
    }

    /// Object index per patch, `None` for background.
    pub fn labels(&self) -> Vec<Option<usize>> {
        let mut labels = vec![None; self.num_patches()];
        for (i, o) in self.objects.iter().enumerate() {
            for (l, &m) in labels.iter_mut().zip(&o.mask) {
                if m {
                    *l = Some(i);
                }
            }
        }
        labels
    }

    /// Disjointness, mask length and centroid range.
    pub fn validate(&self) -> Result<(), String> {
        let k = self.num_patches();
        let mut owner: Vec<Option<usize>> = vec![None; k];
        for (i, o) in self.objects.iter().enumerate() {
            if o.mask.len() != k {
                return Err(format!(
                    "object {i} mask has {} patches, expected {k}",
                    o.mask.len()
                ));
            }
            for (p, &m) in o.mask.iter().enumerate() {
                if m {
                    if let Some(j) = owner[p] {
                        return Err(format!("objects {j} and {i} overlap at patch {p}"));
                    }
                    owner[p] = Some(i);
                }
            }
            let [x, y] = o.center;
            if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                return Err(format!(
                    "object {i} centroid ({x}, {y}) outside the unit square"
                ));
            }
        }
        Ok(())
    }
}

/// One generated or ingested example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: FeatureGrid,
    pub scene: SceneSpec,
    pub queries: QuerySet,
}

impl Sample {
    /// Checks scene invariants and that every query references a valid object.
    pub fn validate(&self) -> Result<(), String> {
        if self.features.side != self.scene.side {
            return Err(format!(
                "feature side {} vs scene side {}",
                self.features.side, self.scene.side
            ));
        }
        if !self.features.features.is_finite() {
            return Err("non-finite feature value".into());
        }
        self.scene.validate()?;
        for (j, q) in self.queries.queries.iter().enumerate() {
            if q.object >= self.scene.objects.len() {
                return Err(format!(
                    "query {j} references object {} of {}",
                    q.object,
                    self.scene.objects.len()
                ));
            }
            if let Some([x, y]) = q.point {
                if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                    return Err(format!(
                        "query {j} point ({x}, {y}) outside the unit square"
                    ));
                }
            }
        }
        Ok(())
    }

    /// Category of the object each query refers to.
    pub fn query_categories(&self) -> Vec<usize> {
        self.queries
            .queries
            .iter()
            .map(|q| self.scene.objects[q.object].category)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodebookRole {
    Feature,
    Conditioning,
    Target,
}

/// Unit-norm category codes, one row per category.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub role: CodebookRole,
    pub codes: Array,
}

impl Codebook {
    pub fn len(&self) -> usize {
        self.codes.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.codes.dim(1)
    }

    pub fn code(&self, category: usize) -> &[f64] {
        self.codes.row(category)
    }

    /// Largest cosine similarity between two distinct codes.
    pub fn max_pairwise_cosine(&self) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                worst = worst.max(dot(self.code(i), self.code(j)));
            }
        }
        worst
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit_gaussian<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = dot(&v, &v).sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Rejection-samples `count` unit vectors with pairwise cosine ≤ `1 − min_sep`.
pub fn make_codebook<R: Rng + ?Sized>(
    count: usize,
    dim: usize,
    min_sep: f64,
    role: CodebookRole,
    rng: &mut R,
) -> Result<Codebook> {
    if count == 0 || dim == 0 {
        return Err(Error::Generation(
            "codebook needs at least one code of positive dimension".into(),
        ));
    }
    let max_cos = 1.0 - min_sep;
    let mut codes: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut tries = 0;
    while codes.len() < count {
        let cand = unit_gaussian(dim, rng);
        if codes.iter().all(|c| dot(c, &cand) <= max_cos) {
            codes.push(cand);
        } else {
            tries += 1;
            if tries > CODEBOOK_RETRIES {
                return Err(Error::Generation(format!(
                    "could not place {count} codes in {dim} dims with separation {min_sep} (got {})",
                    codes.len()
                )));
            }
        }
    }
    Ok(Codebook {
        role,
        codes: Array::from_rows(&codes)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Rectangles,
    Blobs,
    Mixed,
}

impl std::str::FromStr for ShapeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rectangles" => Ok(ShapeFamily::Rectangles),
            "blobs" => Ok(ShapeFamily::Blobs),
            "mixed" => Ok(ShapeFamily::Mixed),
            _ => Err(Error::config(format!(
                "unknown shape family {s:?} (rectangles|blobs|mixed)"
            ))),
        }
    }
}

impl std::fmt::Display for ShapeFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ShapeFamily::Rectangles => "rectangles",
            ShapeFamily::Blobs => "blobs",
            ShapeFamily::Mixed => "mixed",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub grid: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub shapes: ShapeFamily,
    pub noise: f64,
    pub categories: usize,
    pub appearance_dim: usize,
    pub emb_dim: usize,
    /// Minimum `1 − cos` between codes of the same codebook.
    pub min_separation: f64,
    /// Upper bound on queries per scene; each scene draws `M` uniformly from
    /// `1..=min(objects, max_queries)` (or zero when this is zero).
    pub max_queries: usize,
    pub with_points: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            grid: 16,
            min_objects: 2,
            max_objects: 5,
            min_size: 3,
            max_size: 6,
            shapes: ShapeFamily::Mixed,
            noise: 0.05,
            categories: 12,
            appearance_dim: 32,
            emb_dim: 32,
            min_separation: 0.3,
            max_queries: 5,
            with_points: true,
        }
    }
}

impl SceneConfig {
    pub fn feature_dim(&self) -> usize {
        self.appearance_dim + POSITION_CHANNELS
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if self.grid == 0 {
            return bad("grid side must be positive");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("object count range must satisfy 1 <= min <= max");
        }
        if self.min_size == 0 || self.min_size > self.max_size || self.max_size > self.grid {
            return bad("object size range must satisfy 1 <= min <= max <= grid");
        }
        if self.noise.is_nan() || self.noise < 0.0 {
            return bad("feature noise must be non-negative");
        }
        if self.categories == 0 || self.appearance_dim == 0 || self.emb_dim == 0 {
            return bad("categories and code widths must be positive");
        }
        Ok(())
    }
}

/// The three independent codebooks plus the background appearance.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneCodebooks {
    pub feature: Codebook,
    pub background: Vec<f64>,
    pub conditioning: Codebook,
    pub target: Codebook,
}

impl SceneCodebooks {
    /// Draws each codebook from its own seed-derived stream.
    pub fn generate(config: &SceneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.categories;
        let mut frng = stream_rng(seed, Stream::FeatureCodebook, 0);
        // the background is drawn as one more appearance code so it stays separated
        let feature_all = make_codebook(
            c + 1,
            config.appearance_dim,
            config.min_separation,
            CodebookRole::Feature,
            &mut frng,
        )?;
        let background = feature_all.code(c).to_vec();
        let feature = Codebook {
            role: CodebookRole::Feature,
            codes: Array::new(
                &[c, config.appearance_dim],
                feature_all.codes.data()[..c * config.appearance_dim].to_vec(),
            )?,
        };
        let conditioning = make_codebook(
            c,
            config.emb_dim,
            config.min_separation,
            CodebookRole::Conditioning,
            &mut stream_rng(seed, Stream::ConditioningCodebook, 0),
        )?;
        let target = make_codebook(
            c,
            config.emb_dim,
            config.min_separation,
            CodebookRole::Target,
            &mut stream_rng(seed, Stream::TargetCodebook, 0),
        )?;
        Ok(SceneCodebooks {
            feature,
            background,
            conditioning,
            target,
        })
    }
}

/// Independent random streams derived from one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    FeatureCodebook = 1,
    ConditioningCodebook = 2,
    TargetCodebook = 3,
    TrainScenes = 4,
    EvalScenes = 5,
    TrainNoise = 6,
    EvalNoise = 7,
    Init = 8,
    TrainOrder = 9,
}

/// Seeds a ChaCha stream from `(seed, stream, index)` via SplitMix64 mixing.
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut z = seed
        ^ (stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

fn draw_shape<R: Rng + ?Sized>(config: &SceneConfig, rng: &mut R) -> Vec<bool> {
    let g = config.grid;
    let blob = match config.shapes {
        ShapeFamily::Rectangles => false,
        ShapeFamily::Blobs => true,
        ShapeFamily::Mixed => rng.gen_bool(0.5),
    };
    let h = rng.gen_range(config.min_size..=config.max_size);
    let w = rng.gen_range(config.min_size..=config.max_size);
    let r0 = rng.gen_range(0..=g - h);
    let c0 = rng.gen_range(0..=g - w);
    let mut mask = vec![false; g * g];
    let (cy, cx) = (r0 as f64 + h as f64 / 2.0, c0 as f64 + w as f64 / 2.0);
    let (ry, rx) = (h as f64 / 2.0, w as f64 / 2.0);
    for r in r0..r0 + h {
        for c in c0..c0 + w {
            let inside = if blob {
                let dy = (r as f64 + 0.5 - cy) / ry;
                let dx = (c as f64 + 0.5 - cx) / rx;
                dx * dx + dy * dy <= 1.0
            } else {
                true
            };
            mask[r * g + c] = inside;
        }
    }
    if !mask.iter().any(|&m| m) {
        mask[(r0 + h / 2) * g + c0 + w / 2] = true;
    }
    mask
}

/// Disjoint masks for `count` objects. A layout that gets stuck is discarded
/// and started over, a bounded number of times.
fn place_objects<R: Rng + ?Sized>(
    config: &SceneConfig,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Vec<bool>>> {
    let g = config.grid;
    let mut stuck = 0;
    'layout: for _ in 0..LAYOUT_RETRIES {
        let mut occupied = vec![false; g * g];
        let mut masks = Vec::with_capacity(count);
        for i in 0..count {
            let Some(mask) = (0..PLACEMENT_RETRIES)
                .map(|_| draw_shape(config, rng))
                .find(|m| !m.iter().zip(&occupied).any(|(&m, &o)| m && o))
            else {
                stuck = i;
                continue 'layout;
            };
            for (o, &m) in occupied.iter_mut().zip(&mask) {
                *o |= m;
            }
            masks.push(mask);
        }
        return Ok(masks);
    }
    Err(Error::Generation(format!(
        "could not place object {stuck} of {count} without overlap on a {g}x{g} grid"
    )))
}

/// Generates one scene, its patch features and a random subset of queries.
///
/// Feature and point values are rounded to f32 so a scene survives the
/// on-disk format unchanged.
pub fn generate_scene<R: Rng + ?Sized>(
    config: &SceneConfig,
    books: &SceneCodebooks,
    rng: &mut R,
) -> Result<Sample> {
    config.validate()?;
    if books.feature.len() != config.categories || books.conditioning.len() != config.categories {
        return Err(Error::Generation(
            "codebooks do not match the category count".into(),
        ));
    }
    let g = config.grid;
    let k = g * g;
    let count = rng.gen_range(config.min_objects..=config.max_objects);
    let masks = place_objects(config, count, rng)?;
    let mut objects = Vec::with_capacity(count);
    for mask in masks {
        let category = rng.gen_range(0..config.categories);
        let [x, y] = mask_centroid(&mask, g).expect("shapes are never empty");
        objects.push(SceneObject {
            category,
            mask,
            center: [quantize(x), quantize(y)],
        });
    }
    let scene = SceneSpec { side: g, objects };

    let labels = scene.labels();
    let d_app = config.appearance_dim;
    let scale = (d_app as f64).sqrt();
    let mut feats = Vec::with_capacity(k * config.feature_dim());
    for (p, label) in labels.iter().enumerate() {
        let code = match label {
            Some(i) => books.feature.code(scene.objects[*i].category),
            None => &books.background,
        };
        for &c in code {
            let noise: f64 = StandardNormal.sample(rng);
            feats.push(quantize(scale * c + config.noise * noise));
        }
        let [x, y] = patch_center(p, g);
        feats.push(quantize(x));
        feats.push(quantize(y));
    }
    let features = FeatureGrid::new(g, Array::new(&[k, config.feature_dim()], feats)?)?;

    let max_q = config.max_queries.min(count);
    let m = if max_q == 0 {
        0
    } else {
        rng.gen_range(1..=max_q)
    };
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(rng);
    let queries = order[..m]
        .iter()
        .map(|&o| Query {
            object: o,
            lang_code: books
                .conditioning
                .code(scene.objects[o].category)
                .iter()
                .map(|&v| quantize(v))
                .collect(),
            point: config.with_points.then_some(scene.objects[o].center),
        })
        .collect();
    Ok(Sample {
        features,
        scene,
        queries: QuerySet { queries },
    })
}

/// `count` scenes; scene `i` is drawn from its own `(seed, stream, i)` generator.
pub fn generate_dataset(
    config: &SceneConfig,
    books: &SceneCodebooks,
    seed: u64,
    stream: Stream,
    start: u64,
    count: usize,
) -> Result<Vec<Sample>> {
    (0..count as u64)
        .map(|i| generate_scene(config, books, &mut stream_rng(seed, stream, start + i)))
        .collect()
}
