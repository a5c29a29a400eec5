use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::selector::Budget;
use crate::synthdata::{Dataset, VideoSample};

use super::eval::{selections, selector_results};
use super::model::Model;

/// Per-class selection statistics of a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatingReport {
    /// Mean fraction of timesteps kept, per class.
    pub ratios: Vec<f64>,
    /// Population variance of `ratios` over classes with videos.
    pub ratio_variance: f64,
    /// Per class and position, the mean gate value min-max scaled to [0, 1]
    /// (all zeros when the profile is flat).
    pub profiles: Vec<Vec<f64>>,
}

/// Builds the report from test-mode gate values. Models without a selector
/// use their sampler's picks as binary gate values.
pub fn gating_report(model: &Model, data: &Dataset) -> Result<GatingReport> {
    let videos: Vec<&VideoSample> = data.videos.iter().collect();
    let t = model.dims.timesteps;
    let l = model.dims.num_classes;
    let gates: Vec<Vec<f64>> = if model.selector.is_some() {
        selector_results(model, &videos)?
            .into_iter()
            .map(|r| r.activated.into_data())
            .collect()
    } else {
        let (idx, _) = selections(model, &videos, Budget::GateCount)?;
        idx.into_iter()
            .map(|keep| {
                let mut g = vec![0.0; t];
                keep.into_iter().for_each(|i| g[i] = 1.0);
                g
            })
            .collect()
    };

    let mut sums = vec![vec![0.0; t]; l];
    let mut counts = vec![0usize; l];
    for (v, g) in videos.iter().zip(&gates) {
        for &c in v.labels.classes() {
            counts[c] += 1;
            sums[c].iter_mut().zip(g).for_each(|(s, x)| *s += x);
        }
    }
    let ratios: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| if n == 0 { 0.0 } else { s.iter().sum::<f64>() / (n * t) as f64 })
        .collect();
    let present: Vec<f64> = ratios.iter().zip(&counts).filter(|(_, &n)| n > 0).map(|(&r, _)| r).collect();
    let ratio_variance = if present.is_empty() {
        0.0
    } else {
        let mean = present.iter().sum::<f64>() / present.len() as f64;
        present.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / present.len() as f64
    };
    let profiles = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| {
            let mean: Vec<f64> = s.iter().map(|x| x / n.max(1) as f64).collect();
            min_max(&mean)
        })
        .collect();
    Ok(GatingReport { ratios, ratio_variance, profiles })
}

pub fn min_max(xs: &[f64]) -> Vec<f64> {
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= f64::EPSILON {
        return vec![0.0; xs.len()];
    }
    xs.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

impl GatingReport {
    pub fn ratios_csv(&self) -> String {
        let mut out = String::from("class,ratio\n");
        for (c, r) in self.ratios.iter().enumerate() {
            out.push_str(&format!("{c},{r}\n"));
        }
        out
    }

    pub fn profile_csv(&self) -> String {
        let mut out = String::from("class,position,normalized_gate\n");
        for (c, p) in self.profiles.iter().enumerate() {
            for (i, v) in p.iter().enumerate() {
                out.push_str(&format!("{c},{i},{v}\n"));
            }
        }
        out
    }

    /// Position of the profile peak of `class` (first maximum).
    pub fn peak(&self, class: usize) -> usize {
        let p = &self.profiles[class];
        let mut best = 0;
        for (i, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = i;
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_max_scaling() {
        assert_eq!(min_max(&[1.0, 3.0, 2.0]), vec![0.0, 1.0, 0.5]);
        assert_eq!(min_max(&[0.7; 3]), vec![0.0; 3]);
    }
}
