use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamSet, Tensor};
use crate::baselines::ScSampler;
use crate::classifier::Classifier;
use crate::costmodel::CostRegistry;
use crate::error::{Error, Result};
use crate::nn::Mlp2;
use crate::selector::Selector;
use crate::synthdata::{ActivitySpec, Task, VideoSample};

use super::config::{ExperimentConfig, TrainMode};

pub const LIGHT_SELECTOR_TAG: &str = "desk-selector";
pub const LIGHT_SCSAMPLER_TAG: &str = "desk-scsampler";
pub const HEAVY_TAG: &str = "desk-heavy";

/// Dataset facts a model's shapes depend on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataDims {
    pub raw_dim: usize,
    pub timesteps: usize,
    pub frames_per_timestep: usize,
    pub num_classes: usize,
    pub task: Task,
}

impl DataDims {
    pub fn of(spec: &ActivitySpec) -> Self {
        Self {
            raw_dim: spec.raw_dim,
            timesteps: spec.timesteps,
            frames_per_timestep: spec.frames_per_timestep,
            num_classes: spec.num_classes,
            task: spec.task,
        }
    }
}

/// All components of one pipeline and their parameters.
#[derive(Debug)]
pub struct Model {
    pub config: ExperimentConfig,
    pub dims: DataDims,
    pub params: ParamSet,
    pub selector: Option<Selector>,
    /// Light classification head trained with a stand-alone selector.
    pub light_head: Option<Mlp2>,
    pub scsampler: Option<ScSampler>,
    pub classifier: Classifier,
}

impl Model {
    /// Fresh parameters, initialised deterministically from `config.seed`.
    pub fn new(config: &ExperimentConfig, dims: DataDims) -> Result<Self> {
        if config.classifier.segment_len > dims.frames_per_timestep {
            return Err(Error::Config(format!(
                "segment length {} exceeds {} frames per timestep",
                config.classifier.segment_len, dims.frames_per_timestep
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let sel_cfg = config.effective_selector();
        let selector = if config.mode.uses_selector() {
            Some(Selector::new(&mut params, "selector", &sel_cfg, dims.raw_dim, &mut rng)?)
        } else {
            None
        };
        let light_head = (config.mode == TrainMode::Standalone).then(|| {
            Mlp2::new(
                &mut params,
                "light_head",
                (sel_cfg.light_channels, config.train.light_head_hidden, dims.num_classes),
                &mut rng,
            )
        });
        let scsampler = (config.mode == TrainMode::Scsampler).then(|| {
            ScSampler::new(
                &mut params,
                "scsampler",
                (dims.raw_dim, sel_cfg.light_hidden, sel_cfg.light_channels),
                (dims.num_classes, dims.task),
                &mut rng,
            )
        });
        let classifier = Classifier::new(
            &mut params,
            "classifier",
            &config.classifier,
            (dims.num_classes, dims.task),
            (dims.raw_dim, dims.frames_per_timestep),
            &mut rng,
        )?;
        Ok(Self {
            config: config.clone(),
            dims,
            params,
            selector,
            light_head,
            scsampler,
            classifier,
        })
    }

    pub fn segment_len(&self) -> usize {
        self.config.classifier.segment_len
    }

    /// `[B·T, D_raw]` light inputs (the middle frame of every heavy segment).
    pub fn light_inputs(&self, videos: &[&VideoSample]) -> Result<Tensor> {
        let d = self.dims;
        let mut data = Vec::with_capacity(videos.len() * d.timesteps * d.raw_dim);
        for v in videos {
            if v.raw_dim() != d.raw_dim || v.timesteps() != d.timesteps {
                return Err(crate::error::dim_err(
                    "light_inputs",
                    v.frames.shape(),
                    &[d.timesteps, d.raw_dim],
                ));
            }
            let frames = crate::selector::align_timesteps(d.timesteps, self.segment_len(), d.frames_per_timestep, v.num_frames())?;
            for f in frames {
                data.extend_from_slice(v.frame(f));
            }
        }
        Tensor::new(&[videos.len() * d.timesteps, d.raw_dim], data)
    }

    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.params.ids_with_prefix(prefix).collect()
    }

    /// Light tag and timesteps scored by the light model per video.
    pub fn light_cost(&self) -> (&'static str, f64) {
        match self.config.mode {
            m if m.uses_selector() => (LIGHT_SELECTOR_TAG, self.dims.timesteps as f64),
            TrainMode::Scsampler => (LIGHT_SCSAMPLER_TAG, self.dims.timesteps as f64),
            _ => (crate::costmodel::NO_LIGHT, 0.0),
        }
    }

    /// Default registry plus this model's measured per-timestep costs.
    pub fn cost_registry(&self) -> CostRegistry {
        let mut reg = CostRegistry::default();
        if let Some(s) = &self.selector {
            reg.add_measured_light(LIGHT_SELECTOR_TAG, s.macs_per_timestep(self.dims.timesteps));
        }
        if let Some(s) = &self.scsampler {
            reg.add_measured_light(LIGHT_SCSAMPLER_TAG, s.macs_per_timestep());
        }
        reg.add_measured_heavy(HEAVY_TAG, self.classifier.macs_per_timestep());
        reg
    }

    /// Saliency of every timestep of every video (scsampler mode).
    pub fn saliency(&self, videos: &[&VideoSample]) -> Result<Vec<Vec<f64>>> {
        let s = self
            .scsampler
            .as_ref()
            .ok_or_else(|| Error::Contract("model has no saliency scorer".into()))?;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x = self.light_inputs(videos)?;
        let x = g.input(&x);
        let scores = s.scores(&mut g, &p, x)?;
        Ok(scores.chunks(self.dims.timesteps).map(<[f64]>::to_vec).collect())
    }
}
