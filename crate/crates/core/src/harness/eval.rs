//! Evaluation on held-out scenes and report files.

use std::path::Path;

use serde_json::json;

use crate::diffcore::Array;
use crate::error::{Error, Result};
use crate::metrics::{score_sample, MaskSet, MetricsReport, SampleMetrics};
use crate::model::{hard_assignment, CtrlModel, ModelOutput};
use crate::synthscene::{stream_rng, Sample, Stream};

use super::config::RunConfig;
use super::train::Experiment;

/// Runs the model on `samples` with evaluation noise; sample `i` always uses
/// the same noise draw.
pub fn predict(
    model: &CtrlModel,
    config: &RunConfig,
    samples: &[Sample],
) -> Result<Vec<ModelOutput>> {
    let mc = &model.config;
    let max_q = config.max_queries.min(mc.num_slots);
    let mut outputs = Vec::with_capacity(samples.len());
    for (c, chunk) in samples.chunks(config.eval_batch.max(1)).enumerate() {
        let queries: Vec<_> = chunk.iter().map(|s| s.queries.truncated(max_q)).collect();
        let mut noise = Vec::with_capacity(chunk.len() * mc.num_slots * mc.slot_dim);
        for i in 0..chunk.len() {
            let idx = (c * config.eval_batch.max(1) + i) as u64;
            let mut rng = stream_rng(config.seed, Stream::EvalNoise, idx);
            noise.extend(Array::randn(&[mc.num_slots, mc.slot_dim], 1.0, &mut rng).into_data());
        }
        let noise = Array::new(&[chunk.len(), mc.num_slots, mc.slot_dim], noise)?;
        let pairs: Vec<_> = chunk
            .iter()
            .zip(&queries)
            .map(|(s, q)| (&s.features.features, q))
            .collect();
        outputs.extend(model.forward_many(&pairs, &noise)?);
    }
    Ok(outputs)
}

/// Hard predicted masks, ground truth and bound objects of one prediction.
pub fn sample_masks(out: &ModelOutput, sample: &Sample) -> (MaskSet, MaskSet, Vec<usize>) {
    let pred = MaskSet::from_assignment(&hard_assignment(&out.masks), out.masks.dim(0));
    let gt = MaskSet::ground_truth(
        sample
            .scene
            .objects
            .iter()
            .map(|o| o.mask.clone())
            .collect(),
    );
    let objects = sample.queries.queries[..out.slots.conditioned_count]
        .iter()
        .map(|q| q.object)
        .collect();
    (pred, gt, objects)
}

/// Computes all metrics of `model` on `samples`.
pub fn evaluate(
    model: &CtrlModel,
    exp: &Experiment,
    samples: &[Sample],
) -> Result<(MetricsReport, Vec<SampleMetrics>)> {
    if samples.is_empty() {
        return Err(Error::Validation {
            sample: 0,
            msg: "cannot evaluate on an empty dataset".into(),
        });
    }
    super::train::check_dataset(&exp.config, samples)?;
    let outputs = predict(model, &exp.config, samples)?;
    let per = outputs
        .iter()
        .zip(samples)
        .map(|(o, s)| {
            let (pred, gt, objects) = sample_masks(o, s);
            score_sample(&pred, &gt, &objects, exp.config.binding_rule)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((MetricsReport::aggregate(&per)?, per))
}

pub fn report_text(report: &MetricsReport) -> String {
    format!(
        "samples              {}\nbindings             {}\nfg_ari               {:.4}\nmbo                  {:.4}\nbinding_hits         {:.4}\nmiou                 {:.4}\nrandom_binding_hits  {:.4}\nfg_ari_degenerate    {}\n",
        report.samples,
        report.bindings,
        report.fg_ari,
        report.mbo,
        report.binding_hits,
        report.miou,
        report.random_binding_hits,
        report.fg_ari_degenerate
    )
}

/// Writes `<stem>.txt` and `<stem>.json`, both carrying the config echo.
pub fn write_report(
    dir: &Path,
    stem: &str,
    report: &MetricsReport,
    config: &RunConfig,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let text = format!("{}\n# config\n{}", report_text(report), config.echo());
    std::fs::write(dir.join(format!("{stem}.txt")), text)?;
    let value = json!({ "metrics": report, "config": config });
    std::fs::write(
        dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(&value).expect("report serializes"),
    )?;
    Ok(())
}
