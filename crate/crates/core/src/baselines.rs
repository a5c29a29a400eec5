//! Comparison samplers.
//!
//! [`ScSampler`] scores each timestep from that timestep alone: a light
//! encoder and a per-timestep classification head, trained with the video
//! label, whose saliency is the largest class probability. The uniform and
//! random samplers ignore content entirely.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Bound, Graph, ParamSet, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp2};
use crate::selector::top_k;
use crate::synthdata::{Labels, Task};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Uniform,
    Random,
    TopK,
}

/// `k` ascending timestep indices out of `t`.
///
/// Uniform picks `⌊(2i + 1)·t / 2k⌋`, the centre of each of `k` equal spans.
/// Random draws `k` distinct indices from `seed`. Top-k keeps the highest
/// `scores`, ties to the lower index.
pub fn sample_indices(mode: SampleMode, t: usize, k: usize, scores: Option<&[f64]>, seed: Option<u64>) -> Result<Vec<usize>> {
    if k == 0 || k > t {
        return Err(Error::Domain(format!("k = {k} outside [1, {t}]")));
    }
    match (mode, scores) {
        (SampleMode::TopK, Some(s)) if s.len() == t => top_k(s, k),
        (SampleMode::TopK, Some(s)) => Err(Error::Contract(format!("{} scores for {t} timesteps", s.len()))),
        (SampleMode::TopK, None) => Err(Error::Contract("top-k sampling needs scores".into())),
        (_, Some(_)) => Err(Error::Contract("scores are only used by top-k sampling".into())),
        (SampleMode::Uniform, None) => Ok((0..k).map(|i| (2 * i + 1) * t / (2 * k)).collect()),
        (SampleMode::Random, None) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(0));
            let mut idx = index::sample(&mut rng, t, k).into_vec();
            idx.sort_unstable();
            Ok(idx)
        }
    }
}

/// Draws a random seed for [`sample_indices`] from a running generator.
pub fn next_seed(rng: &mut impl Rng) -> u64 {
    rng.random()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScSampler {
    pub lightnet: Mlp2,
    pub head: Linear,
    pub num_classes: usize,
    pub task: Task,
}

impl ScSampler {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        (raw_dim, hidden, channels): (usize, usize, usize),
        (num_classes, task): (usize, Task),
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            lightnet: Mlp2::new(params, &format!("{name}.lightnet"), (raw_dim, hidden, channels), rng),
            head: Linear::new(params, &format!("{name}.head"), channels, num_classes, rng),
            num_classes,
            task,
        }
    }

    pub fn macs_per_timestep(&self) -> u64 {
        self.lightnet.macs_per_row() + (self.head.fan_in * self.head.fan_out) as u64
    }

    /// Per-timestep class logits `[R, L]` for light inputs `x: [R, D_raw]`.
    pub fn timestep_logits(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.lightnet.forward(g, p, x)?;
        self.head.forward(g, p, h)
    }

    /// Every timestep is trained to predict its video's label.
    pub fn loss(&self, g: &mut Graph, p: &Bound, x: Var, labels: &[Labels], t: usize) -> Result<Var> {
        let logits = self.timestep_logits(g, p, x)?;
        let per_row: Vec<Labels> = labels.iter().flat_map(|l| std::iter::repeat_n(l.clone(), t)).collect();
        crate::classifier::task_loss(g, logits, &per_row, self.task, self.num_classes)
    }

    /// Saliency of each row of `x`: the largest class probability.
    pub fn scores(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Vec<f64>> {
        let logits = self.timestep_logits(g, p, x)?;
        Ok(g.value(logits)
            .chunks(self.num_classes)
            .map(|row| saliency(row, self.task))
            .collect())
    }
}

/// Largest class probability of one row of logits.
pub fn saliency(logits: &[f64], task: Task) -> f64 {
    match task {
        Task::SingleLabel => {
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|&l| (l - m).exp()).sum();
            1.0 / z
        }
        Task::MultiLabel => logits.iter().map(|&l| sigmoid(l)).fold(0.0, f64::max),
    }
}

/// Saliency of a single light feature `x: [C]`.
pub fn scsampler_score(sampler: &ScSampler, params: &ParamSet, x: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let xv = g.constant(&[1, x.len()], x.to_vec())?;
    let logits = sampler.head.forward(&mut g, &p, xv)?;
    Ok(saliency(g.value(logits), sampler.task))
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn sampler_examples() {
        assert_eq!(sample_indices(SampleMode::Uniform, 8, 4, None, None).unwrap(), vec![1, 3, 5, 7]);
        let s = [0.1, 0.9, 0.9, 0.2];
        assert_eq!(sample_indices(SampleMode::TopK, 4, 2, Some(&s), None).unwrap(), vec![1, 2]);
        for mode in [SampleMode::Uniform, SampleMode::Random] {
            assert_eq!(sample_indices(mode, 5, 5, None, Some(3)).unwrap(), vec![0, 1, 2, 3, 4]);
        }
        assert_eq!(sample_indices(SampleMode::TopK, 3, 3, Some(&[0.0; 3]), None).unwrap(), vec![0, 1, 2]);
        assert!(matches!(sample_indices(SampleMode::Uniform, 3, 4, None, None), Err(Error::Domain(_))));
        assert!(sample_indices(SampleMode::TopK, 3, 1, None, None).is_err());
    }

    proptest! {
        #[test]
        fn random_is_seeded_and_distinct(t in 1usize..64, k in 1usize..64, seed in any::<u64>()) {
            prop_assume!(k <= t);
            let a = sample_indices(SampleMode::Random, t, k, None, Some(seed)).unwrap();
            let b = sample_indices(SampleMode::Random, t, k, None, Some(seed)).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.len(), k);
            prop_assert!(a.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(*a.last().unwrap() < t);
        }

        #[test]
        fn top_k_is_a_prefix_of_the_score_order(scores in proptest::collection::vec(0.0f64..1.0, 1..40), k in 1usize..40) {
            prop_assume!(k <= scores.len());
            let picked = sample_indices(SampleMode::TopK, scores.len(), k, Some(&scores), None).unwrap();
            let floor = picked.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
            let above = scores.iter().filter(|&&s| s > floor).count();
            prop_assert!(above < k);
            prop_assert_eq!(picked.len(), k);
        }

        #[test]
        fn uniform_is_ascending_and_in_range(t in 1usize..200, k in 1usize..200) {
            prop_assume!(k <= t);
            let idx = sample_indices(SampleMode::Uniform, t, k, None, None).unwrap();
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(*idx.last().unwrap() < t);
        }
    }

    fn sampler() -> (ParamSet, ScSampler) {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = ScSampler::new(&mut params, "scsampler", (8, 16, 4), (10, Task::SingleLabel), &mut rng);
        (params, s)
    }

    #[test]
    fn zero_head_scores_one_over_l() {
        let (mut params, s) = sampler();
        params.get_mut(s.head.weight).data_mut().fill(0.0);
        params.get_mut(s.head.bias).data_mut().fill(0.0);
        let score = scsampler_score(&s, &params, &[0.3, -1.0, 2.0, 0.5]).unwrap();
        assert_abs_diff_eq!(score, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn scores_ignore_position_and_context() {
        let (params, s) = sampler();
        let row = [0.4, -0.2, 1.0, 0.0, 0.3, 0.7, -0.9, 0.1];
        let other = [1.0; 8];
        let score = |rows: Vec<f64>| {
            let mut g = Graph::new();
            let p = params.bind_frozen(&mut g);
            let x = g.input(&Tensor::new(&[rows.len() / 8, 8], rows).unwrap());
            s.scores(&mut g, &p, x).unwrap()
        };
        let a = score([row, other].concat());
        let b = score([other, other, row].concat());
        assert_eq!(a[0], b[2]);
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
