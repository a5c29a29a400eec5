use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Bound, Graph, ParamId, Var};
use crate::baselines::{sample_indices, SampleMode};
use crate::error::{Error, Result};
use crate::gating::{l0_penalty, sample_gate_noise, GateDecision};
use crate::selector::{gated_rows_train, Budget};
use crate::synthdata::{Dataset, Labels, VideoSample};

use super::config::{ExperimentConfig, TrainMode};
use super::eval::{selections, top1_hits};
use super::model::{DataDims, Model};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: String,
    pub epoch: usize,
    pub loss: f64,
    /// Fraction of training videos whose top logit is one of their labels.
    pub accuracy: f64,
    /// Mean fraction of open gates (selector phases only).
    pub mean_ratio: Option<f64>,
}

/// A trained model with its optimizer state and per-epoch log.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: Adam,
    pub history: Vec<EpochLog>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |e| e.loss)
    }
}

struct Stats {
    loss: f64,
    hits: usize,
    open: usize,
    gates: usize,
    videos: usize,
}

impl Stats {
    fn new() -> Self {
        Self { loss: 0.0, hits: 0, open: 0, gates: 0, videos: 0 }
    }

    fn finish(self, phase: &str, epoch: usize, batches: usize) -> EpochLog {
        EpochLog {
            phase: phase.to_string(),
            epoch,
            loss: self.loss / batches.max(1) as f64,
            accuracy: self.hits as f64 / self.videos.max(1) as f64,
            mean_ratio: (self.gates > 0).then(|| self.open as f64 / self.gates as f64),
        }
    }
}

fn check_finite(loss: f64, phase: &str, epoch: usize, batch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!("{phase} epoch {epoch} batch {batch}: loss {loss}")))
    }
}

fn labels_of(videos: &[&VideoSample]) -> Vec<Labels> {
    videos.iter().map(|v| v.labels.clone()).collect()
}

/// Trains the pipeline selected by `config.mode` on `train`.
pub fn train(config: &ExperimentConfig, train: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    let mut model = Model::new(config, DataDims::of(&train.spec))?;
    let mut adam = Adam::new(&model.params, config.train.lr, config.train.eps);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7472_6169_6e00);
    let mut history = Vec::new();
    let stage_one = config.train.selector_epochs.unwrap_or(config.train.epochs);

    match config.mode {
        TrainMode::E2e | TrainMode::FrameConditioned => {
            let ids: Vec<ParamId> = model.params.ids().collect();
            for epoch in 0..config.train.epochs {
                history.push(gated_epoch(&mut model, &mut adam, train, epoch, &mut rng, ("joint", &ids, joint_loss))?);
            }
        }
        TrainMode::Standalone => {
            let mut ids = model.ids_with_prefix("selector.");
            ids.extend(model.ids_with_prefix("light_head."));
            for epoch in 0..stage_one {
                history.push(gated_epoch(&mut model, &mut adam, train, epoch, &mut rng, ("selector", &ids, standalone_loss))?);
            }
            let videos: Vec<&VideoSample> = train.videos.iter().collect();
            let (fixed, _) = selections(&model, &videos, Budget::GateCount)?;
            for epoch in 0..config.train.epochs {
                history.push(classifier_epoch(&mut model, &mut adam, train, epoch, &mut rng, |i, _| Ok(fixed[i].clone()))?);
            }
        }
        TrainMode::Scsampler => {
            for epoch in 0..stage_one {
                history.push(scorer_epoch(&mut model, &mut adam, train, epoch, &mut rng)?);
            }
            let videos: Vec<&VideoSample> = train.videos.iter().collect();
            let (fixed, _) = selections(&model, &videos, Budget::TopK(config.train.sampler_k))?;
            for epoch in 0..config.train.epochs {
                history.push(classifier_epoch(&mut model, &mut adam, train, epoch, &mut rng, |i, _| Ok(fixed[i].clone()))?);
            }
        }
        TrainMode::Uniform | TrainMode::Random => {
            let (t, k) = (model.dims.timesteps, config.train.sampler_k);
            let random = config.mode == TrainMode::Random;
            for epoch in 0..config.train.epochs {
                history.push(classifier_epoch(&mut model, &mut adam, train, epoch, &mut rng, |_, rng| {
                    if random {
                        sample_indices(SampleMode::Random, t, k, None, Some(rand::Rng::random(rng)))
                    } else {
                        sample_indices(SampleMode::Uniform, t, k, None, None)
                    }
                })?);
            }
        }
    }
    Ok(TrainOutcome { model, optimizer: adam, history })
}

fn shuffled_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn log_epoch(e: &EpochLog) {
    info!(
        "{} epoch {}: loss {:.4} acc {:.3} ratio {}",
        e.phase,
        e.epoch,
        e.loss,
        e.accuracy,
        e.mean_ratio.map_or("-".to_string(), |r| format!("{r:.3}"))
    );
}

/// Graph handles of one training step.
pub struct StepOutput {
    pub loss: Var,
    pub logits: Var,
    pub decisions: Vec<GateDecision>,
}

fn noise_for(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| sample_gate_noise(rng)).collect()
}

/// Penalty weight in `epoch` under the linear warm-up.
pub fn lambda_at(config: &ExperimentConfig, epoch: usize) -> f64 {
    let t = &config.train;
    if epoch >= t.lambda_warmup_epochs {
        t.lambda
    } else {
        t.lambda * epoch as f64 / t.lambda_warmup_epochs as f64
    }
}

/// Joint objective: task loss on gate-scaled heavy features of the open
/// timesteps plus `lambda` times the open-gate penalty. `noise` holds one
/// logistic draw per timestep of the batch.
pub fn joint_loss(model: &Model, g: &mut Graph, p: &Bound, videos: &[&VideoSample], noise: &[f64], lambda: f64) -> Result<StepOutput> {
    let t = model.dims.timesteps;
    let selector = model
        .selector
        .as_ref()
        .ok_or_else(|| Error::Contract("joint training needs a selector".into()))?;
    let x = model.light_inputs(videos)?;
    let x = g.input(&x);
    let pass = selector.forward_with_noise(g, p, x, t, Some(noise))?;
    let rows = gated_rows_train(g, &pass)?;
    let indices = per_video_indices(&rows.rows, &rows.lens, t);
    let y = model.classifier.heavynet_features(g, p, videos, &indices)?;
    let logits = model.classifier.classify(g, p, y, rows.weights, &rows.lens)?;
    let task = model.classifier.task_loss(g, logits, &labels_of(videos))?;
    let l0 = l0_penalty(g, pass.logits, lambda)?;
    let loss = g.add(task, l0)?;
    Ok(StepOutput { loss, logits, decisions: pass.decisions })
}

/// Stand-alone selector objective: a light head classifies the gate-scaled
/// light features of the open timesteps.
pub fn standalone_loss(
    model: &Model,
    g: &mut Graph,
    p: &Bound,
    videos: &[&VideoSample],
    noise: &[f64],
    lambda: f64,
) -> Result<StepOutput> {
    let t = model.dims.timesteps;
    let (selector, head) = match (&model.selector, &model.light_head) {
        (Some(s), Some(h)) => (s, h),
        _ => return Err(Error::Contract("stand-alone training needs a selector and a light head".into())),
    };
    let x = model.light_inputs(videos)?;
    let x = g.input(&x);
    let pass = selector.forward_with_noise(g, p, x, t, Some(noise))?;
    let rows = gated_rows_train(g, &pass)?;
    let kept = g.gather_rows(pass.features, &rows.rows)?;
    let kept = g.scale_rows(kept, rows.weights.expect("train rows carry weights"))?;
    let per_step = head.forward(g, p, kept)?;
    let logits = g.segment_max(per_step, &rows.lens)?;
    let task = model.classifier.task_loss(g, logits, &labels_of(videos))?;
    let l0 = l0_penalty(g, pass.logits, lambda)?;
    let loss = g.add(task, l0)?;
    Ok(StepOutput { loss, logits, decisions: pass.decisions })
}

type LossFn = fn(&Model, &mut Graph, &Bound, &[&VideoSample], &[f64], f64) -> Result<StepOutput>;

fn gated_epoch(
    model: &mut Model,
    adam: &mut Adam,
    data: &Dataset,
    epoch: usize,
    rng: &mut ChaCha8Rng,
    (phase, ids, loss_fn): (&str, &[ParamId], LossFn),
) -> Result<EpochLog> {
    let batches = shuffled_batches(data.videos.len(), model.config.train.batch_size, rng);
    let lambda = lambda_at(&model.config, epoch);
    let mut stats = Stats::new();
    for (bi, batch) in batches.iter().enumerate() {
        let videos: Vec<&VideoSample> = batch.iter().map(|&i| &data.videos[i]).collect();
        let noise = noise_for(videos.len() * model.dims.timesteps, rng);
        let mut g = Graph::new();
        let p = model.params.bind_with(&mut g, |id| ids.contains(&id));
        let out = loss_fn(model, &mut g, &p, &videos, &noise, lambda)?;
        let lv = g.item(out.loss);
        check_finite(lv, phase, epoch, bi)?;
        g.backward(out.loss)?;
        model.params.accumulate_grads(&g, &p);
        let (sel, rest): (Vec<ParamId>, Vec<ParamId>) =
            ids.iter().partition(|&&id| model.params.name(id).starts_with("selector."));
        adam.step_groups(&mut model.params, &[(&sel, model.config.train.selector_lr_scale), (&rest, 1.0)])?;

        stats.loss += lv;
        stats.hits += top1_hits(g.value(out.logits), &labels_of(&videos), model.dims.num_classes);
        stats.open += out.decisions.iter().filter(|d| d.open).count();
        stats.gates += out.decisions.len();
        stats.videos += videos.len();
    }
    let log = stats.finish(phase, epoch, batches.len());
    log_epoch(&log);
    Ok(log)
}

/// Saliency-scorer stage: every timestep predicts its video's label.
fn scorer_epoch(model: &mut Model, adam: &mut Adam, data: &Dataset, epoch: usize, rng: &mut ChaCha8Rng) -> Result<EpochLog> {
    let ids = model.ids_with_prefix("scsampler.");
    let batches = shuffled_batches(data.videos.len(), model.config.train.batch_size, rng);
    let mut stats = Stats::new();
    for (bi, batch) in batches.iter().enumerate() {
        let videos: Vec<&VideoSample> = batch.iter().map(|&i| &data.videos[i]).collect();
        let mut g = Graph::new();
        let p = model.params.bind_with(&mut g, |id| ids.contains(&id));
        let scorer = model.scsampler.as_ref().expect("scsampler mode builds a scorer");
        let x = model.light_inputs(&videos)?;
        let x = g.input(&x);
        let loss = scorer.loss(&mut g, &p, x, &labels_of(&videos), model.dims.timesteps)?;
        let lv = g.item(loss);
        check_finite(lv, "scorer", epoch, bi)?;
        g.backward(loss)?;
        model.params.accumulate_grads(&g, &p);
        adam.step(&mut model.params, &ids)?;
        stats.loss += lv;
        stats.videos += videos.len();
    }
    let log = stats.finish("scorer", epoch, batches.len());
    log_epoch(&log);
    Ok(log)
}

/// Heavy classifier on externally chosen timesteps, features unscaled.
fn classifier_epoch<F>(
    model: &mut Model,
    adam: &mut Adam,
    data: &Dataset,
    epoch: usize,
    rng: &mut ChaCha8Rng,
    mut pick: F,
) -> Result<EpochLog>
where
    F: FnMut(usize, &mut ChaCha8Rng) -> Result<Vec<usize>>,
{
    let ids = model.ids_with_prefix("classifier.");
    let batches = shuffled_batches(data.videos.len(), model.config.train.batch_size, rng);
    let mut stats = Stats::new();
    for (bi, batch) in batches.iter().enumerate() {
        let videos: Vec<&VideoSample> = batch.iter().map(|&i| &data.videos[i]).collect();
        let indices = batch.iter().map(|&i| pick(i, rng)).collect::<Result<Vec<_>>>()?;
        let lens: Vec<usize> = indices.iter().map(Vec::len).collect();
        let mut g = Graph::new();
        let p = model.params.bind_with(&mut g, |id| ids.contains(&id));
        let y = model.classifier.heavynet_features(&mut g, &p, &videos, &indices)?;
        let logits = model.classifier.classify(&mut g, &p, y, None, &lens)?;
        let labels = labels_of(&videos);
        let loss = model.classifier.task_loss(&mut g, logits, &labels)?;
        let lv = g.item(loss);
        check_finite(lv, "classifier", epoch, bi)?;
        g.backward(loss)?;
        model.params.accumulate_grads(&g, &p);
        adam.step(&mut model.params, &ids)?;
        stats.loss += lv;
        stats.hits += top1_hits(g.value(logits), &labels, model.dims.num_classes);
        stats.videos += videos.len();
    }
    let log = stats.finish("classifier", epoch, batches.len());
    log_epoch(&log);
    Ok(log)
}

/// Splits global `[B·T]` row indices back into per-video timestep lists.
pub(crate) fn per_video_indices(rows: &[usize], lens: &[usize], t: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(lens.len());
    let mut start = 0;
    for (b, &n) in lens.iter().enumerate() {
        out.push(rows[start..start + n].iter().map(|r| r - b * t).collect());
        start += n;
    }
    out
}
