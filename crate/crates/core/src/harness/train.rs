//! Batch assembly and the training loop.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{adam_step, clip_grad_norm, AdamState, Array, Graph};
use crate::error::{Error, Result};
use crate::grounding::ContrastiveSource;
use crate::metrics::MetricsReport;
use crate::model::{Batch, CtrlModel};
use crate::slotattn::QuerySet;
use crate::synthscene::{
    generate_dataset, generate_scene, stream_rng, Sample, SceneCodebooks, Stream,
};

use super::checkpoint::Checkpoint;
use super::config::{RunConfig, TargetCodebook};
use super::eval::evaluate;

/// A resolved run: configuration, codebooks and an optional fixed training pool.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: RunConfig,
    pub books: SceneCodebooks,
    pub pool: Option<Vec<Sample>>,
}

impl Experiment {
    /// Draws codebooks from the config seed; `data` replaces the synthetic
    /// stream with an ingested dataset.
    pub fn new(config: RunConfig, data: Option<Vec<Sample>>) -> Result<Self> {
        config.validate()?;
        let books = SceneCodebooks::generate(&config.scene_config(), config.seed)?;
        let pool = match data {
            Some(d) => {
                check_dataset(&config, &d)?;
                Some(d)
            }
            None if config.train_scenes > 0 => Some(generate_dataset(
                &config.scene_config(),
                &books,
                config.seed,
                Stream::TrainScenes,
                0,
                config.train_scenes,
            )?),
            None => None,
        };
        Ok(Experiment {
            config,
            books,
            pool,
        })
    }

    /// Samples making up training step `step`.
    pub fn batch_samples(&self, step: u64) -> Result<Vec<Sample>> {
        let b = self.config.batch_size as u64;
        match &self.pool {
            Some(pool) => {
                let mut rng = stream_rng(self.config.seed, Stream::TrainOrder, step);
                Ok((0..b)
                    .map(|_| pool[rng.gen_range(0..pool.len())].clone())
                    .collect())
            }
            None => (0..b)
                .map(|j| {
                    let mut rng = stream_rng(self.config.seed, Stream::TrainScenes, step * b + j);
                    generate_scene(&self.config.scene_config(), &self.books, &mut rng)
                })
                .collect(),
        }
    }

    /// The evaluation scenes of this run (disjoint stream from training).
    pub fn eval_samples(&self) -> Result<Vec<Sample>> {
        if self.config.eval_scenes == 0 {
            return Err(Error::config("eval_scenes must be positive to evaluate"));
        }
        generate_dataset(
            &self.config.scene_config(),
            &self.books,
            self.config.seed,
            Stream::EvalScenes,
            0,
            self.config.eval_scenes,
        )
    }

    /// Stacks samples into model inputs.
    pub fn prepare(&self, samples: &[Sample], step: u64) -> Result<PreparedBatch> {
        let mc = self.config.model_config();
        let (k, f) = (mc.num_patches(), mc.feature_dim);
        let mut feats = Vec::with_capacity(samples.len() * k * f);
        let mut queries = Vec::with_capacity(samples.len());
        let mut targets = Vec::new();
        for s in samples {
            if s.features.features.shape() != [k, f] {
                return Err(Error::config(format!(
                    "sample features {:?} do not match the model ({k} patches of width {f})",
                    s.features.features.shape()
                )));
            }
            feats.extend_from_slice(s.features.features.data());
            let q = s
                .queries
                .truncated(self.config.max_queries.min(mc.num_slots));
            for query in &q.queries {
                let cat = s.scene.objects[query.object].category;
                if self.config.target_codebook == TargetCodebook::Distinct {
                    if cat >= self.books.target.len() {
                        return Err(Error::config(format!(
                            "category {cat} outside the target codebook"
                        )));
                    }
                    targets.push(self.books.target.code(cat).to_vec());
                }
            }
            queries.push(q);
        }
        let mut rng = stream_rng(self.config.seed, Stream::TrainNoise, step);
        let noise = Array::randn(&[samples.len(), mc.num_slots, mc.slot_dim], 1.0, &mut rng);
        let lang_targets = match self.config.target_codebook {
            TargetCodebook::Distinct if !targets.is_empty() => Some(Array::from_rows(&targets)?),
            _ => None,
        };
        Ok(PreparedBatch {
            features: Array::new(&[samples.len(), k, f], feats)?,
            queries,
            lang_targets,
            noise,
        })
    }
}

/// Ingested data must match the configured grid and feature width.
pub fn check_dataset(config: &RunConfig, data: &[Sample]) -> Result<()> {
    let mc = config.model_config();
    if data.is_empty() {
        return Err(Error::Validation {
            sample: 0,
            msg: "dataset is empty".into(),
        });
    }
    for (i, s) in data.iter().enumerate() {
        if s.features.num_patches() != mc.num_patches() || s.features.dim() != mc.feature_dim {
            return Err(Error::config(format!(
                "sample {i} has {}x{} patches of width {}, config expects grid {} and width {}",
                s.features.side,
                s.features.side,
                s.features.dim(),
                config.grid,
                mc.feature_dim
            )));
        }
        for q in &s.queries.queries {
            if q.lang_code.len() != mc.emb_dim {
                return Err(Error::config(format!(
                    "sample {i} query codes have width {}, config emb_dim {}",
                    q.lang_code.len(),
                    mc.emb_dim
                )));
            }
        }
    }
    Ok(())
}

/// Owned model inputs for one step.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    pub features: Array,
    pub queries: Vec<QuerySet>,
    pub lang_targets: Option<Array>,
    pub noise: Array,
}

impl PreparedBatch {
    pub fn as_batch(&self) -> Batch<'_> {
        Batch {
            features: self.features.clone(),
            queries: self.queries.iter().collect(),
            lang_targets: self.lang_targets.clone(),
            noise: self.noise.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub recon: f64,
    pub contrastive: Option<f64>,
    pub total: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalLog {
    pub step: u64,
    pub report: MetricsReport,
}

/// Append-only record of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub evals: Vec<EvalLog>,
    pub wall_clock_secs: f64,
}

impl TrainLog {
    /// Mean of `f` over the last `n` logged steps.
    pub fn tail_mean(&self, n: usize, f: impl Fn(&StepLog) -> f64) -> f64 {
        let tail = &self.steps[self.steps.len().saturating_sub(n)..];
        tail.iter().map(f).sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Knobs that are not part of the run configuration.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Checkpoints and logs go here when set.
    pub out_dir: Option<PathBuf>,
    /// Background batch producers; 0 builds batches inline.
    pub workers: usize,
    /// Progress lines on stderr every `log_every` steps.
    pub verbose: bool,
    #[doc(hidden)]
    pub contrastive_source: ContrastiveSource,
}

pub struct TrainOutcome {
    pub model: CtrlModel,
    pub log: TrainLog,
}

/// A freshly initialized model for `exp`.
pub fn init_model(exp: &Experiment, source: ContrastiveSource) -> Result<CtrlModel> {
    let mut mc = exp.config.model_config();
    mc.contrastive_source = source;
    CtrlModel::new(mc, &mut stream_rng(exp.config.seed, Stream::Init, 0))
}

fn spawn_producers<'s>(
    scope: &'s std::thread::Scope<'s, '_>,
    exp: &'s Experiment,
    workers: usize,
    steps: u64,
) -> Vec<Receiver<Result<PreparedBatch>>> {
    (0..workers as u64)
        .map(|w| {
            let (tx, rx) = sync_channel(2);
            scope.spawn(move || {
                let mut step = w;
                while step < steps {
                    let b = exp.batch_samples(step).and_then(|s| exp.prepare(&s, step));
                    if tx.send(b).is_err() {
                        return;
                    }
                    step += workers as u64;
                }
            });
            rx
        })
        .collect()
}

fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt_{step:08}.bin"))
}

/// Optimizes the total loss with Adam. Batches, noise and initialization are
/// drawn from seed-derived streams, so a run is reproducible bit for bit
/// regardless of the worker count.
pub fn train(exp: &Experiment, opts: &TrainOptions) -> Result<TrainOutcome> {
    let cfg = &exp.config;
    let mut model = init_model(exp, opts.contrastive_source)?;
    let mut adam = AdamState::new(cfg.adam_config(), model.store.values());
    let mut log = TrainLog::default();
    let start = Instant::now();
    let steps = cfg.steps as u64;
    let mut kept: Vec<PathBuf> = Vec::new();
    let mut best_hits = f64::NEG_INFINITY;
    let eval_set = if cfg.eval_every > 0 {
        Some(exp.eval_samples()?)
    } else {
        None
    };
    let mut jsonl = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("config.txt"), cfg.echo())?;
            Some(std::io::BufWriter::new(std::fs::File::create(
                dir.join("train_log.jsonl"),
            )?))
        }
        None => None,
    };

    let mut good: Vec<Array> = model.store.values().to_vec();
    let mut good_step = 0u64;
    std::thread::scope(|scope| -> Result<()> {
        let producers = spawn_producers(scope, exp, opts.workers, steps);
        for step in 0..steps {
            let prepared = if producers.is_empty() {
                exp.prepare(&exp.batch_samples(step)?, step)?
            } else {
                producers[(step % producers.len() as u64) as usize]
                    .recv()
                    .map_err(|_| Error::Generation("batch producer stopped".into()))??
            };
            let batch = prepared.as_batch();
            let evaluated = (|| -> Result<_> {
                let mut g = Graph::new();
                let p = model.store.bind(&mut g);
                let fv = model.forward(&mut g, &p, &batch)?;
                let total = g.value(fv.total).item();
                let recon = g.value(fv.recon_loss).item();
                let contrastive = fv.contrastive.map(|c| g.value(c).item());
                let mut grads = g.backward(fv.total)?;
                let grads = p.grads(&mut grads);
                if !total.is_finite() || !grads.iter().all(Array::is_finite) {
                    return Err(Error::numeric(format!(
                        "non-finite loss or gradient at step {step} (loss {total})"
                    )));
                }
                Ok((total, recon, contrastive, grads))
            })();
            let (total, recon, contrastive, mut grads) = match evaluated {
                Err(e @ Error::Numeric(_)) => {
                    if let Some(dir) = &opts.out_dir {
                        let mut ckpt = Checkpoint::from_store(good_step, cfg, &model.store);
                        for ((_, a), v) in ckpt.params.iter_mut().zip(&good) {
                            *a = v.clone();
                        }
                        ckpt.save(&dir.join("last_good.bin"))?;
                    }
                    return Err(e);
                }
                other => other?,
            };
            // these parameters just produced a finite loss
            good.clone_from_slice(model.store.values());
            good_step = step;
            let grad_norm = if cfg.grad_clip > 0.0 {
                clip_grad_norm(&mut grads, cfg.grad_clip)
            } else {
                grads
                    .iter()
                    .map(|a| a.data().iter().map(|v| v * v).sum::<f64>())
                    .sum::<f64>()
                    .sqrt()
            };
            adam_step(model.store.values_mut(), &grads, &mut adam)?;
            let entry = StepLog {
                step,
                recon,
                contrastive,
                total,
                grad_norm,
            };
            if let Some(w) = jsonl.as_mut() {
                writeln!(
                    w,
                    "{}",
                    serde_json::to_string(&entry).expect("log entry serializes")
                )?;
            }
            log.steps.push(entry);
            let done = step + 1;
            if opts.verbose && cfg.log_every > 0 && done % cfg.log_every as u64 == 0 {
                eprintln!(
                    "step {done}/{steps} total {:.5} recon {:.5} contrastive {} ({:.0}s)",
                    log.tail_mean(cfg.log_every, |s| s.total),
                    log.tail_mean(cfg.log_every, |s| s.recon),
                    contrastive.map_or("-".into(), |_| format!(
                        "{:.4}",
                        log.tail_mean(cfg.log_every, |s| s.contrastive.unwrap_or(0.0))
                    )),
                    start.elapsed().as_secs_f64()
                );
            }
            if let Some(eval) = &eval_set {
                if done % cfg.eval_every as u64 == 0 {
                    let (report, _) = evaluate(&model, exp, eval)?;
                    if let Some(dir) = &opts.out_dir {
                        if report.binding_hits > best_hits {
                            Checkpoint::from_store(done, cfg, &model.store)
                                .save(&dir.join("best.bin"))?;
                        }
                    }
                    if opts.verbose {
                        eprintln!(
                            "eval at {done}: binding_hits {:.4} (random {:.4}) fg_ari {:.4} mbo {:.4}",
                            report.binding_hits, report.random_binding_hits, report.fg_ari, report.mbo
                        );
                    }
                    best_hits = best_hits.max(report.binding_hits);
                    log.evals.push(EvalLog { step: done, report });
                }
            }
            if let Some(dir) = &opts.out_dir {
                if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every as u64 == 0 {
                    let path = checkpoint_path(dir, done);
                    Checkpoint::from_store(done, cfg, &model.store).save(&path)?;
                    kept.push(path);
                    while kept.len() > cfg.keep_checkpoints {
                        std::fs::remove_file(kept.remove(0))?;
                    }
                }
            }
        }
        Ok(())
    })?;

    log.wall_clock_secs = start.elapsed().as_secs_f64();
    if let Some(dir) = &opts.out_dir {
        if let Some(mut w) = jsonl {
            w.flush()?;
        }
        Checkpoint::from_store(steps, cfg, &model.store).save(&dir.join("final.bin"))?;
        let json = serde_json::to_string_pretty(&log).expect("log serializes");
        std::fs::write(dir.join("train_log.json"), json)?;
    }
    Ok(TrainOutcome { model, log })
}

/// Rebuilds a model from a checkpoint using the config echoed inside it.
pub fn load_model(ckpt: &Checkpoint) -> Result<CtrlModel> {
    let exp_cfg = &ckpt.config;
    let mut model = CtrlModel::new(
        exp_cfg.model_config(),
        &mut stream_rng(exp_cfg.seed, Stream::Init, 0),
    )?;
    ckpt.restore(&mut model.store)?;
    Ok(model)
}
