//! Stage one: cheap per-timestep features, an optional self-attention layer
//! and per-timestep gates.
//!
//! In `frame` mode each gate sees only its own timestep. In `context` mode a
//! single-head attention layer mixes information across the whole video
//! before gating, so the same timestep can be kept in one video and dropped
//! in another.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Bound, Graph, ParamId, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::gating::{self, activate_test, activate_train, sample_gate_noise, ConceptBank, GateDecision, GatingMlp};
use crate::nn::{uniform, Mlp2};
use crate::synthdata::VideoSample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    Frame,
    Context,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectorConfig {
    pub light_channels: usize,
    pub light_hidden: usize,
    pub concepts: usize,
    pub gate_hidden: usize,
    pub gate_bias_init: f64,
    pub context_mode: ContextMode,
    pub attention_heads: usize,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            light_channels: 16,
            light_hidden: 64,
            concepts: 128,
            gate_hidden: 64,
            gate_bias_init: 2.0,
            context_mode: ContextMode::Context,
            attention_heads: 1,
        }
    }
}

/// Single-head scaled dot-product attention with a residual connection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attention {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub channels: usize,
}

impl Attention {
    pub fn new(params: &mut ParamSet, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (channels as f64).sqrt();
        let mut mat = |suffix: &str| params.add(format!("{name}.{suffix}"), uniform(rng, &[channels, channels], bound));
        Self {
            query: mat("query"),
            key: mat("key"),
            value: mat("value"),
            channels,
        }
    }
}

/// `X + softmax(Q Kᵀ / √C) V` per video, with `x: [B·T, C]` holding `B`
/// videos of `t` timesteps each.
pub fn self_attention(g: &mut Graph, p: &Bound, att: &Attention, x: Var, t: usize) -> Result<Var> {
    let c = att.channels;
    let rows = g.shape(x)[0];
    if g.shape(x) != [rows, c] || t == 0 || !rows.is_multiple_of(t) {
        return Err(crate::error::dim_err("self_attention", g.shape(x), &[t, c]));
    }
    let b = rows / t;
    let q = g.matmul(x, p[att.query])?;
    let k = g.matmul(x, p[att.key])?;
    let v = g.matmul(x, p[att.value])?;
    let q = g.reshape(q, &[b, t, c])?;
    let k = g.reshape(k, &[b, t, c])?;
    let v = g.reshape(v, &[b, t, c])?;
    let scores = g.bmm(q, k, true)?;
    let scores = g.scale(scores, 1.0 / (c as f64).sqrt())?;
    let weights = g.softmax_last(scores)?;
    let mixed = g.bmm(weights, v, false)?;
    let mixed = g.reshape(mixed, &[rows, c])?;
    g.add(x, mixed)
}

/// Light frame index for each of `t_heavy` heavy segments of `m` frames,
/// starting every `stride` frames: segment `[j, j + m)` maps to `j + ⌊m/2⌋`.
pub fn align_timesteps(t_heavy: usize, m: usize, stride: usize, n_frames: usize) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(Error::Domain("segment length M must be >= 1".into()));
    }
    (0..t_heavy)
        .map(|i| {
            let j = i * stride;
            if j + m > n_frames {
                return Err(Error::Contract(format!(
                    "segment [{j}, {}) exceeds {n_frames} frames",
                    j + m
                )));
            }
            Ok(j + m / 2)
        })
        .collect()
}

/// How many timesteps to keep at evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    /// Keep whatever the gates open.
    GateCount,
    /// Keep exactly the `k` timesteps with the highest `sigmoid(α)`.
    TopK(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionResult {
    pub decisions: Vec<GateDecision>,
    /// Ascending; equal to the open gates.
    pub selected_indices: Vec<usize>,
    pub activated: Tensor,
}

impl SelectionResult {
    pub fn from_decisions(decisions: Vec<GateDecision>) -> Self {
        let selected_indices = decisions
            .iter()
            .enumerate()
            .filter(|(_, d)| d.open)
            .map(|(i, _)| i)
            .collect();
        let activated = gating::decisions_tensor(&decisions);
        Self { decisions, selected_indices, activated }
    }

    /// Timesteps handed to the classifier under `budget`. An empty gate-count
    /// selection falls back to the timestep with the highest logit; the flag
    /// reports whether that happened.
    pub fn indices_for(&self, budget: Budget) -> Result<(Vec<usize>, bool)> {
        match budget {
            Budget::GateCount if self.selected_indices.is_empty() => Ok((vec![argmax_logit(&self.decisions)], true)),
            Budget::GateCount => Ok((self.selected_indices.clone(), false)),
            Budget::TopK(k) => {
                let scores: Vec<f64> = self.decisions.iter().map(|d| sigmoid(d.logit)).collect();
                Ok((top_k(&scores, k)?, false))
            }
        }
    }
}

fn argmax_logit(decisions: &[GateDecision]) -> usize {
    let mut best = 0;
    for (i, d) in decisions.iter().enumerate() {
        if d.logit > decisions[best].logit {
            best = i;
        }
    }
    best
}

/// The `k` highest scores, ties to the lower index, returned ascending.
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::Domain(format!("k = {k} outside [1, {}]", scores.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep = order[..k].to_vec();
    keep.sort_unstable();
    Ok(keep)
}

/// Graph handles for one batched selector pass.
#[derive(Clone, Debug)]
pub struct SelectorPass {
    /// `[B·T, C]` per-timestep features after the optional attention layer.
    pub features: Var,
    /// `[B·T]` gating logits.
    pub logits: Var,
    /// `[B·T]` differentiable activated values (train mode only).
    pub activated: Option<Var>,
    pub decisions: Vec<GateDecision>,
    pub timesteps: usize,
}

impl SelectorPass {
    pub fn results(&self) -> Vec<SelectionResult> {
        self.decisions
            .chunks(self.timesteps)
            .map(|d| SelectionResult::from_decisions(d.to_vec()))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selector {
    pub config: SelectorConfig,
    pub lightnet: Mlp2,
    pub attention: Option<Attention>,
    pub bank: ConceptBank,
    pub gate: GatingMlp,
    pub raw_dim: usize,
}

impl Selector {
    pub fn new(params: &mut ParamSet, name: &str, config: &SelectorConfig, raw_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if config.attention_heads != 1 {
            return Err(Error::Config(format!(
                "only single-head attention is supported, got {}",
                config.attention_heads
            )));
        }
        let c = config.light_channels;
        let lightnet = Mlp2::new(params, &format!("{name}.lightnet"), (raw_dim, config.light_hidden, c), rng);
        let attention = match config.context_mode {
            ContextMode::Context => Some(Attention::new(params, &format!("{name}.attention"), c, rng)),
            ContextMode::Frame => None,
        };
        let bank = ConceptBank::new(params, &format!("{name}.concepts"), config.concepts, c, rng)?;
        let gate = GatingMlp::new(
            params,
            &format!("{name}.gate"),
            config.concepts,
            config.gate_hidden,
            config.gate_bias_init,
            rng,
        );
        Ok(Self {
            config: config.clone(),
            lightnet,
            attention,
            bank,
            gate,
            raw_dim,
        })
    }

    /// Multiply-adds per light timestep: encoder, attention projections and
    /// mixing over `t` timesteps, concept similarity and gating MLP.
    pub fn macs_per_timestep(&self, t: usize) -> u64 {
        let c = self.config.light_channels as u64;
        let attention = if self.attention.is_some() { 3 * c * c + 2 * t as u64 * c } else { 0 };
        self.lightnet.macs_per_row() + attention + self.bank.n as u64 * c + self.gate.mlp.macs_per_row()
    }

    /// `[B·T, D_raw]` light inputs: the aligned middle frame of each timestep.
    pub fn light_inputs(&self, videos: &[&VideoSample], t: usize, m: usize, stride: usize) -> Result<Tensor> {
        let mut data = Vec::with_capacity(videos.len() * t * self.raw_dim);
        for v in videos {
            if v.raw_dim() != self.raw_dim || v.timesteps() != t {
                return Err(crate::error::dim_err(
                    "lightnet_features",
                    v.frames.shape(),
                    &[t, self.raw_dim],
                ));
            }
            for f in align_timesteps(t, m, stride, v.num_frames())? {
                data.extend_from_slice(v.frame(f));
            }
        }
        Tensor::new(&[videos.len() * t, self.raw_dim], data)
    }

    /// Per-timestep light features `[B·T, C]` for light inputs `x: [B·T, D_raw]`.
    pub fn lightnet_features(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        self.lightnet.forward(g, p, x)
    }

    /// Features (with context if enabled) and gating logits for `x: [B·T, D_raw]`.
    pub fn logits(&self, g: &mut Graph, p: &Bound, x: Var, t: usize) -> Result<(Var, Var)> {
        let mut h = self.lightnet_features(g, p, x)?;
        if let Some(att) = &self.attention {
            h = self_attention(g, p, att, h, t)?;
        }
        let s = gating::similarity(g, h, p[self.bank.kernels])?;
        let alpha = gating::gate_logit(g, s, &self.gate, p)?;
        Ok((h, alpha))
    }

    /// Full selection pass over a batch. Train mode draws one logistic noise
    /// sample per timestep from `rng`; test mode is deterministic and leaves
    /// `rng` untouched.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        t: usize,
        mode: GateMode,
        rng: &mut impl Rng,
    ) -> Result<SelectorPass> {
        let noise: Option<Vec<f64>> = match mode {
            GateMode::Train => Some((0..g.shape(x)[0]).map(|_| sample_gate_noise(rng)).collect()),
            GateMode::Test => None,
        };
        self.forward_with_noise(g, p, x, t, noise.as_deref())
    }

    /// Selection pass with explicit train-mode noise (`None` for test mode).
    pub fn forward_with_noise(&self, g: &mut Graph, p: &Bound, x: Var, t: usize, noise: Option<&[f64]>) -> Result<SelectorPass> {
        let (features, logits) = self.logits(g, p, x, t)?;
        let (activated, decisions) = match noise {
            Some(noise) => {
                let (a, d) = activate_train(g, logits, noise)?;
                (Some(a), d)
            }
            None => (None, activate_test(g.value(logits))),
        };
        Ok(SelectorPass {
            features,
            logits,
            activated,
            decisions,
            timesteps: t,
        })
    }

    /// Selects timesteps of one video with parameters held in `params`.
    pub fn select(
        &self,
        params: &ParamSet,
        video: &VideoSample,
        (m, stride): (usize, usize),
        mode: GateMode,
        rng: &mut impl Rng,
    ) -> Result<SelectionResult> {
        let t = video.timesteps();
        let mut g = Graph::new();
        let p = params.bind_frozen(&mut g);
        let x = self.light_inputs(&[video], t, m, stride)?;
        let x = g.input(&x);
        let pass = self.forward(&mut g, &p, x, t, mode, rng)?;
        Ok(pass.results().remove(0))
    }
}

/// Rows kept per video and the per-row gate weights that scale them.
#[derive(Clone, Debug)]
pub struct GatedRows {
    /// Global row indices into the `[B·T, ·]` batch layout, grouped by video.
    pub rows: Vec<usize>,
    pub lens: Vec<usize>,
    /// `[Σ lens]` gate weights aligned with `rows`, if gating scales features.
    pub weights: Option<Var>,
    pub fallbacks: usize,
}

/// Training-time kept rows: open gates scaled by their clipped-sigmoid value.
/// A video with no open gate keeps its highest-logit timestep weighted by its
/// plain `sigmoid(α)`, so gradient still reaches the gate.
pub fn gated_rows_train(g: &mut Graph, pass: &SelectorPass) -> Result<GatedRows> {
    let activated = pass
        .activated
        .ok_or_else(|| Error::Contract("train-mode rows need activated gate values".into()))?;
    let t = pass.timesteps;
    let mut rows = Vec::new();
    let mut lens = Vec::new();
    let mut fallback_mask = vec![0.0; pass.decisions.len()];
    let mut fallbacks = 0;
    for (b, chunk) in pass.decisions.chunks(t).enumerate() {
        let open: Vec<usize> = (0..t).filter(|&i| chunk[i].open).map(|i| b * t + i).collect();
        if open.is_empty() {
            let i = b * t + argmax_logit(chunk);
            fallback_mask[i] = 1.0;
            fallbacks += 1;
            rows.push(i);
            lens.push(1);
        } else {
            lens.push(open.len());
            rows.extend(open);
        }
    }
    let weights = if fallbacks > 0 {
        let sig = g.sigmoid(pass.logits);
        let mask = g.constant(&[fallback_mask.len()], fallback_mask)?;
        let extra = g.mul(sig, mask)?;
        g.add(activated, extra)?
    } else {
        activated
    };
    let weights = g.gather_rows(weights, &rows)?;
    Ok(GatedRows { rows, lens, weights: Some(weights), fallbacks })
}

/// Evaluation-time kept rows for `budget`, unweighted.
pub fn gated_rows_test(results: &[SelectionResult], budget: Budget) -> Result<GatedRows> {
    let mut rows = Vec::new();
    let mut lens = Vec::new();
    let mut fallbacks = 0;
    for (b, r) in results.iter().enumerate() {
        let t = r.decisions.len();
        let (idx, fell_back) = r.indices_for(budget)?;
        fallbacks += usize::from(fell_back);
        lens.push(idx.len());
        rows.extend(idx.into_iter().map(|i| b * t + i));
    }
    Ok(GatedRows { rows, lens, weights: None, fallbacks })
}
