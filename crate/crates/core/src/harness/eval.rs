use log::warn;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::baselines::{sample_indices, SampleMode};
use crate::costmodel::{pipeline_cost, CostReport};
use crate::error::{Error, Result};
use crate::selector::{Budget, SelectionResult};
use crate::synthdata::{Dataset, Labels, Task, VideoSample};

use super::config::TrainMode;
use super::model::{Model, HEAVY_TAG};

/// Test-mode selector decisions for every video.
pub fn selector_results(model: &Model, videos: &[&VideoSample]) -> Result<Vec<SelectionResult>> {
    let selector = model
        .selector
        .as_ref()
        .ok_or_else(|| Error::Contract("model has no selector".into()))?;
    let mut out = Vec::with_capacity(videos.len());
    for chunk in videos.chunks(model.config.eval.batch_size) {
        let mut g = Graph::new();
        let p = model.params.bind_frozen(&mut g);
        let x = model.light_inputs(chunk)?;
        let x = g.input(&x);
        let (_, logits) = selector.logits(&mut g, &p, x, model.dims.timesteps)?;
        let decisions = crate::gating::activate_test(g.value(logits));
        out.extend(
            decisions
                .chunks(model.dims.timesteps)
                .map(|d| SelectionResult::from_decisions(d.to_vec())),
        );
    }
    Ok(out)
}

/// Timesteps handed to the heavy classifier for every video under `budget`,
/// and how many videos needed the empty-selection fallback.
pub fn selections(model: &Model, videos: &[&VideoSample], budget: Budget) -> Result<(Vec<Vec<usize>>, usize)> {
    let t = model.dims.timesteps;
    let k = match budget {
        Budget::TopK(k) => k,
        Budget::GateCount => model.config.train.sampler_k,
    };
    match model.config.mode {
        m if m.uses_selector() => {
            let mut fallbacks = 0;
            let idx = selector_results(model, videos)?
                .iter()
                .map(|r| {
                    let (idx, fell_back) = r.indices_for(budget)?;
                    fallbacks += usize::from(fell_back);
                    Ok(idx)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((idx, fallbacks))
        }
        TrainMode::Scsampler => {
            let mut out = Vec::with_capacity(videos.len());
            for chunk in videos.chunks(model.config.eval.batch_size) {
                for scores in model.saliency(chunk)? {
                    out.push(sample_indices(SampleMode::TopK, t, k, Some(&scores), None)?);
                }
            }
            Ok((out, 0))
        }
        TrainMode::Uniform => Ok((vec![sample_indices(SampleMode::Uniform, t, k, None, None)?; videos.len()], 0)),
        _ => {
            let idx = (0..videos.len())
                .map(|i| sample_indices(SampleMode::Random, t, k, None, Some(model.config.seed ^ i as u64)))
                .collect::<Result<Vec<_>>>()?;
            Ok((idx, 0))
        }
    }
}

/// Classifier logits `[L]` per video for the given timesteps. Test-mode
/// gates are exactly 1 on kept timesteps, so features enter unscaled.
pub fn predict(model: &Model, videos: &[&VideoSample], indices: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(videos.len());
    let bs = model.config.eval.batch_size;
    for (vs, idx) in videos.chunks(bs).zip(indices.chunks(bs)) {
        let mut g = Graph::new();
        let p = model.params.bind_frozen(&mut g);
        let lens: Vec<usize> = idx.iter().map(Vec::len).collect();
        let y = model.classifier.heavynet_features(&mut g, &p, vs, idx)?;
        let logits = model.classifier.classify(&mut g, &p, y, None, &lens)?;
        out.extend(g.value(logits).chunks(model.dims.num_classes).map(<[f64]>::to_vec));
    }
    Ok(out)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Videos whose highest logit is one of their labels.
pub fn top1_hits(logits: &[f64], labels: &[Labels], num_classes: usize) -> usize {
    logits
        .chunks(num_classes)
        .zip(labels)
        .filter(|(row, l)| l.classes().contains(&argmax(row)))
        .count()
}

pub fn accuracy(logits: &[Vec<f64>], labels: &[Labels]) -> f64 {
    if logits.is_empty() {
        return 0.0;
    }
    let hits = logits
        .iter()
        .zip(labels)
        .filter(|(row, l)| l.classes().contains(&argmax(row)))
        .count();
    hits as f64 / logits.len() as f64
}

/// Precision averaged at the rank of every positive, ranking by descending
/// score with ties kept in input order. `None` without positives.
pub fn average_precision(scores: &[f64], targets: &[bool]) -> Option<f64> {
    let positives = targets.iter().filter(|&&t| t).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if targets[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

/// Mean over classes of average precision; classes without a positive
/// video are skipped with a warning.
pub fn mean_average_precision(logits: &[Vec<f64>], labels: &[Labels], num_classes: usize) -> f64 {
    let mut aps = Vec::new();
    for c in 0..num_classes {
        let scores: Vec<f64> = logits.iter().map(|r| r[c]).collect();
        let targets: Vec<bool> = labels.iter().map(|l| l.classes().contains(&c)).collect();
        match average_precision(&scores, &targets) {
            Some(ap) => aps.push(ap),
            None => warn!("class {c} has no positive test video; skipped in mAP"),
        }
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetMetrics {
    pub mode: String,
    pub budget: String,
    pub metric_name: String,
    pub metric: f64,
    pub mean_selected: f64,
    pub mean_ratio: f64,
    pub heavy_invocations: usize,
    pub selected_total: usize,
    pub fallbacks: usize,
    pub cost: CostReport,
}

pub fn budget_label(b: Budget) -> String {
    match b {
        Budget::GateCount => "gate".to_string(),
        Budget::TopK(k) => format!("top{k}"),
    }
}

/// Metric, selection statistics and cost for each budget.
pub fn evaluate(model: &Model, data: &Dataset, budgets: &[Budget]) -> Result<Vec<BudgetMetrics>> {
    let videos: Vec<&VideoSample> = data.videos.iter().collect();
    let labels: Vec<Labels> = data.videos.iter().map(|v| v.labels.clone()).collect();
    let registry = model.cost_registry();
    let (light_tag, n_light) = model.light_cost();
    let mut rows = Vec::with_capacity(budgets.len());
    for &budget in budgets {
        let (indices, fallbacks) = selections(model, &videos, budget)?;
        let selected_total: usize = indices.iter().map(Vec::len).sum();
        model.classifier.reset_invocations();
        let logits = predict(model, &videos, &indices)?;
        let heavy_invocations = model.classifier.invocations();
        let (metric_name, metric) = match model.dims.task {
            Task::SingleLabel => ("accuracy", accuracy(&logits, &labels)),
            Task::MultiLabel => ("mAP", mean_average_precision(&logits, &labels, model.dims.num_classes)),
        };
        let n = videos.len().max(1) as f64;
        let mean_selected = selected_total as f64 / n;
        rows.push(BudgetMetrics {
            mode: model.config.mode.name().to_string(),
            budget: budget_label(budget),
            metric_name: metric_name.to_string(),
            metric,
            mean_selected,
            mean_ratio: mean_selected / model.dims.timesteps as f64,
            heavy_invocations,
            selected_total,
            fallbacks,
            cost: pipeline_cost(n_light, mean_selected, light_tag, HEAVY_TAG, &registry)?,
        });
    }
    Ok(rows)
}

pub const METRICS_HEADER: &str =
    "mode,budget,metric_name,metric,mean_selected,mean_ratio,heavy_invocations,selected_total,fallbacks,gflops";

pub fn metrics_csv(rows: &[BudgetMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.mode,
            r.budget,
            r.metric_name,
            r.metric,
            r.mean_selected,
            r.mean_ratio,
            r.heavy_invocations,
            r.selected_total,
            r.fallbacks,
            r.cost.total_gflops
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn average_precision_examples() {
        let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert_abs_diff_eq!(ap, (1.0 + 2.0 / 3.0) / 2.0, epsilon = 1e-12);
        assert_eq!(average_precision(&[0.1, 0.5, 0.9], &[false, true, true]), Some(1.0));
        assert_eq!(average_precision(&[0.1, 0.5], &[false, false]), None);
    }

    #[test]
    fn constant_predictor_scores_chance() {
        let labels: Vec<Labels> = (0..100).map(|i| Labels::Single(i % 10)).collect();
        let logits = vec![vec![0.0; 10]; 100];
        assert_abs_diff_eq!(accuracy(&logits, &labels), 0.1, epsilon = 1e-12);
    }

    #[test]
    fn map_skips_absent_classes() {
        let labels = vec![Labels::Multi(vec![0]), Labels::Multi(vec![0, 1])];
        let logits = vec![vec![1.0, 0.0, 0.3], vec![0.5, 2.0, 0.1]];
        assert_abs_diff_eq!(mean_average_precision(&logits, &labels, 3), 1.0, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn metrics_stay_in_unit_interval(
            scores in proptest::collection::vec(-3.0f64..3.0, 1..30),
            seed in any::<u64>(),
        ) {
            let targets: Vec<bool> = scores.iter().enumerate().map(|(i, _)| (seed >> (i % 64)) & 1 == 1).collect();
            if let Some(ap) = average_precision(&scores, &targets) {
                prop_assert!((0.0..=1.0).contains(&ap));
            }
            let labels: Vec<Labels> = targets.iter().map(|&t| Labels::Single(usize::from(t))).collect();
            let logits: Vec<Vec<f64>> = scores.iter().map(|&s| vec![0.0, s]).collect();
            let acc = accuracy(&logits, &labels);
            prop_assert!((0.0..=1.0).contains(&acc));
        }
    }
}
