//! Stage two: heavy features for the kept timesteps only, max-pooled over
//! space, a two-layer head per timestep and a max over time.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Graph, ParamSet, ReduceKind, Tensor, Var};
use crate::error::{dim_err, Error, Result};
use crate::nn::Mlp2;
use crate::synthdata::{Labels, Task, VideoSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub heavy_channels: usize,
    pub heavy_hidden: usize,
    pub height: usize,
    pub width: usize,
    pub head_hidden: usize,
    /// Frames per heavy segment.
    pub segment_len: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            heavy_channels: 32,
            heavy_hidden: 64,
            height: 1,
            width: 1,
            head_hidden: 256,
            segment_len: 1,
        }
    }
}

#[derive(Debug)]
pub struct Classifier {
    pub config: ClassifierConfig,
    pub num_classes: usize,
    pub task: Task,
    /// Frames between consecutive segment starts.
    pub stride: usize,
    pub raw_dim: usize,
    pub encoder: Mlp2,
    pub head: Mlp2,
    invocations: AtomicUsize,
}

impl Classifier {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        config: &ClassifierConfig,
        (num_classes, task): (usize, Task),
        (raw_dim, stride): (usize, usize),
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let c = config;
        if num_classes < 2 || c.height == 0 || c.width == 0 || c.segment_len == 0 || c.heavy_channels == 0 {
            return Err(Error::Config(
                "classifier needs L >= 2 and H, W, M, C' >= 1".into(),
            ));
        }
        let spatial = c.heavy_channels * c.height * c.width;
        let encoder = Mlp2::new(
            params,
            &format!("{name}.encoder"),
            (c.segment_len * raw_dim, c.heavy_hidden, spatial),
            rng,
        );
        let head = Mlp2::new(params, &format!("{name}.head"), (c.heavy_channels, c.head_hidden, num_classes), rng);
        Ok(Self {
            config: config.clone(),
            num_classes,
            task,
            stride,
            raw_dim,
            encoder,
            head,
            invocations: AtomicUsize::new(0),
        })
    }

    /// Heavy-encoder timestep evaluations since construction or the last reset.
    pub fn invocations(&self) -> usize {
        self.invocations.load(Ordering::Relaxed)
    }

    pub fn reset_invocations(&self) {
        self.invocations.store(0, Ordering::Relaxed);
    }

    /// Multiply-adds per heavy timestep (encoder and head).
    pub fn macs_per_timestep(&self) -> u64 {
        self.encoder.macs_per_row() + self.head.macs_per_row()
    }

    /// `[R, M·D_raw]` segment inputs for the listed `(video, timestep)` rows.
    fn segment_inputs(&self, videos: &[&VideoSample], indices: &[Vec<usize>]) -> Result<Tensor> {
        let m = self.config.segment_len;
        let d = self.raw_dim;
        let rows: usize = indices.iter().map(Vec::len).sum();
        let mut data = Vec::with_capacity(rows * m * d);
        for (v, idx) in videos.iter().zip(indices) {
            if v.raw_dim() != d {
                return Err(dim_err("heavynet_features", v.frames.shape(), &[m, d]));
            }
            for &i in idx {
                let j = i * self.stride;
                if i >= v.timesteps() || j + m > v.num_frames() {
                    return Err(Error::Contract(format!(
                        "timestep {i} (frames [{j}, {})) outside a video of {} timesteps / {} frames",
                        j + m,
                        v.timesteps(),
                        v.num_frames()
                    )));
                }
                data.extend_from_slice(&v.frames.data()[j * d..(j + m) * d]);
            }
        }
        Tensor::new(&[rows, m * d], data)
    }

    /// `[Σ|indices|, C′, H, W]` heavy features, rows grouped by video in
    /// input order. Only the listed timesteps are encoded.
    pub fn heavynet_features(
        &self,
        g: &mut Graph,
        p: &Bound,
        videos: &[&VideoSample],
        indices: &[Vec<usize>],
    ) -> Result<Var> {
        if videos.len() != indices.len() {
            return Err(Error::Contract(format!(
                "{} videos but {} index lists",
                videos.len(),
                indices.len()
            )));
        }
        let x = self.segment_inputs(videos, indices)?;
        let rows = x.shape()[0];
        let x = g.input(&x);
        let y = self.encoder.forward(g, p, x)?;
        self.invocations.fetch_add(rows, Ordering::Relaxed);
        let c = &self.config;
        g.reshape(y, &[rows, c.heavy_channels, c.height, c.width])
    }

    /// Logits `[B, L]` from heavy features `y: [R, C′, H, W]` whose rows come in
    /// consecutive groups of `lens`. `gates: [R]`, if given, scales each row
    /// before pooling.
    pub fn classify(&self, g: &mut Graph, p: &Bound, y: Var, gates: Option<Var>, lens: &[usize]) -> Result<Var> {
        let c = &self.config;
        let rows = g.shape(y)[0];
        let y = match gates {
            Some(s) => g.scale_rows(y, s)?,
            None => y,
        };
        let y = g.reshape(y, &[rows, c.heavy_channels, c.height * c.width])?;
        let pooled = g.reduce(ReduceKind::Max, y, 2)?;
        let per_step = self.head.forward(g, p, pooled)?;
        g.segment_max(per_step, lens)
    }

    /// Softmax cross-entropy for single-label tasks, binary cross-entropy on
    /// logits for multi-label tasks.
    pub fn task_loss(&self, g: &mut Graph, logits: Var, labels: &[Labels]) -> Result<Var> {
        task_loss(g, logits, labels, self.task, self.num_classes)
    }
}

pub fn task_loss(g: &mut Graph, logits: Var, labels: &[Labels], task: Task, num_classes: usize) -> Result<Var> {
    match task {
        Task::SingleLabel => {
            let ys = labels
                .iter()
                .map(|l| {
                    l.single()
                        .ok_or_else(|| Error::Contract("multi-label target for a single-label head".into()))
                })
                .collect::<Result<Vec<_>>>()?;
            g.softmax_xent(logits, &ys)
        }
        Task::MultiLabel => {
            let targets: Vec<f64> = labels.iter().flat_map(|l| l.binary(num_classes)).collect();
            g.bce_logits(logits, &targets)
        }
    }
}
