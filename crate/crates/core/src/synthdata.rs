//! Synthetic long-range activity datasets.
//!
//! Every timestep of a video carries one planted prototype vector plus
//! Gaussian noise. A class recipe has discriminative prototypes and shared
//! prototypes. Within a class-`c` video:
//!
//! - the discriminative prototypes of `c` are relevant because one of `c`'s
//!   shared prototypes co-occurs;
//! - the shared prototypes of `c` are relevant because a discriminative
//!   prototype of `c` co-occurs;
//! - distractor timesteps carry the discriminative prototype of another class
//!   `c'` whose shared prototypes are all absent, so they are irrelevant;
//! - filler timesteps carry background prototypes or shared prototypes of
//!   neither `c` nor `c'`.
//!
//! The same discriminative prototype is therefore relevant in one video and
//! a distractor in another, and only the rest of the video tells them apart.
//!
//! # File layout
//!
//! One file per split, little-endian throughout:
//!
//! ```text
//! b"TGDS"                    magic
//! u32                        format version (1)
//! u64                        header length in bytes
//! [u8; header length]        UTF-8 JSON header (DatasetHeader)
//! per video, in order:
//!   u32                      number of labels k
//!   [u32; k]                 class indices, ascending
//!   [u8; T]                  relevance mask (0 or 1)
//!   [u32; T]                 planted prototype per timestep
//!   [f64; T·F·D_raw]         frames, row-major (frame, channel)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"TGDS";
pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    SingleLabel,
    MultiLabel,
}

/// Where a class places its relevant timesteps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Anywhere in the video.
    Spread,
    /// Inside the middle third (widened if the relevant count needs it).
    Middle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassRecipe {
    pub discriminative: Vec<usize>,
    pub shared: Vec<usize>,
    /// Relevant timesteps carrying a discriminative prototype; the rest of the
    /// relevant budget goes to the shared prototypes.
    pub evidence_count: usize,
    pub placement: Placement,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActivitySpec {
    pub num_classes: usize,
    pub num_prototypes: usize,
    pub raw_dim: usize,
    pub timesteps: usize,
    /// Raw frames per timestep; segment encoders of length `M <= this` index
    /// validly.
    pub frames_per_timestep: usize,
    pub noise_sigma: f64,
    pub relevant_fraction: f64,
    /// Timesteps per video holding a discriminative prototype of any class,
    /// genuine or distractor.
    pub evidence_slots: usize,
    /// Irrelevant shared-prototype timesteps per video.
    pub shared_filler: usize,
    pub task: Task,
    pub class_recipes: Vec<ClassRecipe>,
    pub shared_prototypes: Vec<usize>,
    pub background_prototypes: Vec<usize>,
}

impl Default for ActivitySpec {
    /// Ten classes, 24 prototypes (10 discriminative, 6 shared, 8 background),
    /// 32 timesteps of 32-dimensional frames.
    fn default() -> Self {
        Self::with_layout(10, 6, 8, 32, 32).expect("default layout is valid")
    }
}

impl ActivitySpec {
    /// Builds recipes for `classes` classes: class `c` owns discriminative
    /// prototype `c` and a distinct pair of the `shared` shared prototypes.
    /// Evidence counts cycle through 2..=6 and even classes are mid-placed.
    pub fn with_layout(
        classes: usize,
        shared: usize,
        background: usize,
        timesteps: usize,
        raw_dim: usize,
    ) -> Result<Self> {
        let mut pairs = Vec::new();
        for gap in 1..shared {
            for i in 0..shared - gap {
                pairs.push((i, i + gap));
            }
        }
        if pairs.len() < classes {
            return Err(Error::Generation(format!(
                "{shared} shared prototypes give only {} distinct pairs for {classes} classes",
                pairs.len()
            )));
        }
        let class_recipes = (0..classes)
            .map(|c| ClassRecipe {
                discriminative: vec![c],
                shared: vec![classes + pairs[c].0, classes + pairs[c].1],
                evidence_count: 2 + c % 5,
                placement: if c % 2 == 0 { Placement::Middle } else { Placement::Spread },
            })
            .collect();
        let spec = Self {
            num_classes: classes,
            num_prototypes: classes + shared + background,
            raw_dim,
            timesteps,
            frames_per_timestep: 1,
            noise_sigma: 0.3,
            relevant_fraction: 0.3,
            evidence_slots: 9,
            shared_filler: 2,
            task: Task::SingleLabel,
            class_recipes,
            shared_prototypes: (classes..classes + shared).collect(),
            background_prototypes: (classes + shared..classes + shared + background).collect(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn relevant_count(&self) -> usize {
        (self.relevant_fraction * self.timesteps as f64).round() as usize
    }

    pub fn frames_per_video(&self) -> usize {
        self.timesteps * self.frames_per_timestep
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Generation(m));
        if self.num_classes < 2 {
            return bad("need at least two classes".into());
        }
        if self.class_recipes.len() != self.num_classes {
            return bad(format!(
                "{} recipes for {} classes",
                self.class_recipes.len(),
                self.num_classes
            ));
        }
        if self.timesteps == 0 || self.raw_dim == 0 || self.frames_per_timestep == 0 {
            return bad("timesteps, raw_dim and frames_per_timestep must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.relevant_fraction) || !(self.noise_sigma >= 0.0) {
            return bad("relevant_fraction must lie in [0, 1] and noise_sigma >= 0".into());
        }
        let in_range = |p: &usize| *p < self.num_prototypes;
        let all_in_range = self.shared_prototypes.iter().all(in_range)
            && self.background_prototypes.iter().all(in_range)
            && self
                .class_recipes
                .iter()
                .all(|r| r.discriminative.iter().chain(&r.shared).all(in_range));
        if !all_in_range {
            return bad("prototype index out of range".into());
        }
        for (i, a) in self.class_recipes.iter().enumerate() {
            if a.discriminative.is_empty() || a.shared.is_empty() {
                return bad(format!("class {i} needs discriminative and shared prototypes"));
            }
            if a.shared.iter().any(|s| !self.shared_prototypes.contains(s)) {
                return bad(format!("class {i} lists a non-shared prototype as shared"));
            }
            for (j, b) in self.class_recipes.iter().enumerate().skip(i + 1) {
                let (mut ka, mut kb) = (a.members(), b.members());
                ka.sort_unstable();
                kb.sort_unstable();
                if ka == kb {
                    return bad(format!("classes {i} and {j} share an identical recipe"));
                }
            }
        }
        for s in &self.shared_prototypes {
            let uses = self.class_recipes.iter().filter(|r| r.shared.contains(s)).count();
            if uses < 2 {
                return bad(format!("shared prototype {s} appears in {uses} recipe(s)"));
            }
        }
        for b in &self.background_prototypes {
            if self.class_recipes.iter().any(|r| r.members().contains(b)) {
                return bad(format!("background prototype {b} belongs to a recipe"));
            }
        }
        if self.background_prototypes.is_empty() {
            return bad("need at least one background prototype".into());
        }
        Ok(())
    }
}

impl ClassRecipe {
    pub fn members(&self) -> Vec<usize> {
        self.discriminative.iter().chain(&self.shared).copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Labels {
    Single(usize),
    Multi(Vec<usize>),
}

impl Labels {
    pub fn classes(&self) -> &[usize] {
        match self {
            Labels::Single(c) => std::slice::from_ref(c),
            Labels::Multi(cs) => cs,
        }
    }

    pub fn single(&self) -> Option<usize> {
        match self {
            Labels::Single(c) => Some(*c),
            Labels::Multi(_) => None,
        }
    }

    pub fn binary(&self, num_classes: usize) -> Vec<f64> {
        let mut out = vec![0.0; num_classes];
        for &c in self.classes() {
            out[c] = 1.0;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    /// `[T·F, D_raw]` raw frames.
    pub frames: Tensor,
    pub labels: Labels,
    pub relevance: Vec<bool>,
    /// Planted prototype index per timestep.
    pub prototypes: Vec<usize>,
}

impl VideoSample {
    pub fn timesteps(&self) -> usize {
        self.relevance.len()
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn raw_dim(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn frame(&self, f: usize) -> &[f64] {
        let d = self.raw_dim();
        &self.frames.data()[f * d..(f + 1) * d]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: ActivitySpec,
    /// `[P, D_raw]` prototype vectors.
    pub prototypes: Tensor,
    pub seed: u64,
    pub split: String,
    pub videos: Vec<VideoSample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    pub test: Dataset,
}

/// Whether the timestep carrying prototype `proto` is relevant to `class`
/// given every prototype present in the video.
fn is_relevant(spec: &ActivitySpec, present: &[bool], proto: usize, class: usize) -> bool {
    let r = &spec.class_recipes[class];
    let any = |set: &[usize]| set.iter().any(|&p| present[p]);
    (r.discriminative.contains(&proto) && any(&r.shared))
        || (r.shared.contains(&proto) && any(&r.discriminative))
}

fn relevance_mask(spec: &ActivitySpec, protos: &[usize], classes: &[usize]) -> Vec<bool> {
    let mut present = vec![false; spec.num_prototypes];
    for &p in protos {
        present[p] = true;
    }
    protos
        .iter()
        .map(|&p| classes.iter().any(|&c| is_relevant(spec, &present, p, c)))
        .collect()
}

/// Ground-truth relevance of every timestep of `video` to `class`.
///
/// For the video's own label the stored mask is returned; any other class is
/// recomputed from its recipe.
pub fn relevance_oracle(spec: &ActivitySpec, video: &VideoSample, class: usize) -> Result<Vec<bool>> {
    if class >= spec.num_classes {
        return Err(Error::Domain(format!(
            "class {class} outside [0, {})",
            spec.num_classes
        )));
    }
    if video.labels == Labels::Single(class) {
        return Ok(video.relevance.clone());
    }
    Ok(relevance_mask(spec, &video.prototypes, &[class]))
}

/// Generates balanced train and test splits, deterministically from `seed`.
pub fn generate_dataset(spec: &ActivitySpec, n_train: usize, n_test: usize, seed: u64) -> Result<SplitDataset> {
    spec.validate()?;
    let mut proto_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5052_4f54_4f53_0000);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let protos: Vec<f64> = (0..spec.num_prototypes * spec.raw_dim)
        .map(|_| normal.sample(&mut proto_rng))
        .collect();
    let prototypes = Tensor::new(&[spec.num_prototypes, spec.raw_dim], protos)?;

    let make = |name: &str, n: usize, offset: usize| -> Result<Dataset> {
        let mut label_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(offset as u64) ^ 0x4c41_4245_4c53);
        let mut firsts: Vec<usize> = (0..n).map(|i| i % spec.num_classes).collect();
        firsts.shuffle(&mut label_rng);
        let videos = firsts
            .into_iter()
            .enumerate()
            .map(|(i, first)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (offset + i) as u64);
                generate_video(spec, &prototypes, first, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            spec: spec.clone(),
            prototypes: prototypes.clone(),
            seed,
            split: name.to_string(),
            videos,
        })
    };
    Ok(SplitDataset {
        train: make("train", n_train, 0)?,
        test: make("test", n_test, n_train)?,
    })
}

fn middle_window(t: usize, need: usize) -> (usize, usize) {
    let (mut lo, mut hi) = (t / 3, (2 * t).div_ceil(3));
    while hi - lo < need && (lo > 0 || hi < t) {
        lo = lo.saturating_sub(1);
        hi = (hi + 1).min(t);
    }
    (lo, hi)
}

fn generate_video(spec: &ActivitySpec, prototypes: &Tensor, first: usize, rng: &mut ChaCha8Rng) -> Result<VideoSample> {
    let t = spec.timesteps;
    let classes: Vec<usize> = match spec.task {
        Task::SingleLabel => vec![first],
        Task::MultiLabel => {
            let k = rng.random_range(1..=3usize.min(spec.num_classes));
            let mut cs = vec![first];
            while cs.len() < k {
                let c = rng.random_range(0..spec.num_classes);
                if !cs.contains(&c) {
                    cs.push(c);
                }
            }
            cs.sort_unstable();
            cs
        }
    };

    // Relevant budget, split across labels.
    let total = spec.relevant_count();
    let mut relevant: Vec<usize> = Vec::with_capacity(total);
    let mut mid_biased = false;
    for (li, &c) in classes.iter().enumerate() {
        let share = total / classes.len() + usize::from(li < total % classes.len());
        let r = &spec.class_recipes[c];
        if share < 2 {
            return Err(Error::Generation(format!(
                "relevant budget {share} for class {c} cannot hold a discriminative and a shared prototype"
            )));
        }
        let n_d = r.evidence_count.clamp(1, share - 1);
        let n_s = share - n_d;
        if classes.len() == 1 && n_s < r.shared.len() {
            return Err(Error::Generation(format!(
                "class {c}: {n_s} shared slots for {} shared prototypes (relevant fraction too small)",
                r.shared.len()
            )));
        }
        relevant.extend((0..n_d).map(|i| r.discriminative[i % r.discriminative.len()]));
        relevant.extend((0..n_s).map(|i| r.shared[i % r.shared.len()]));
        mid_biased |= r.placement == Placement::Middle;
    }

    // Distractor: a foreign class none of whose shared prototypes are present.
    let used_shared: Vec<usize> = classes
        .iter()
        .flat_map(|&c| spec.class_recipes[c].shared.iter().copied())
        .collect();
    let candidates: Vec<usize> = (0..spec.num_classes)
        .filter(|c| !classes.contains(c))
        .filter(|&c| spec.class_recipes[c].shared.iter().all(|s| !used_shared.contains(s)))
        .collect();
    let mut distractors = Vec::new();
    let mut blocked = used_shared.clone();
    if !candidates.is_empty() {
        let own_evidence: usize = classes
            .iter()
            .map(|&c| spec.class_recipes[c].evidence_count)
            .sum();
        let n_x = spec.evidence_slots.saturating_sub(own_evidence);
        let dc = candidates[rng.random_range(0..candidates.len())];
        let rd = &spec.class_recipes[dc];
        distractors.extend((0..n_x).map(|i| rd.discriminative[i % rd.discriminative.len()]));
        blocked.extend(rd.shared.iter().copied());
    }
    let filler_pool: Vec<usize> = spec
        .shared_prototypes
        .iter()
        .copied()
        .filter(|s| !blocked.contains(s))
        .collect();
    let mut filler: Vec<usize> = if filler_pool.is_empty() {
        Vec::new()
    } else {
        (0..spec.shared_filler)
            .map(|_| filler_pool[rng.random_range(0..filler_pool.len())])
            .collect()
    };

    if relevant.len() + distractors.len() + filler.len() > t {
        return Err(Error::Generation(format!(
            "{} relevant + {} distractor + {} filler timesteps exceed T = {t}",
            relevant.len(),
            distractors.len(),
            filler.len()
        )));
    }
    while relevant.len() + distractors.len() + filler.len() < t {
        let b = spec.background_prototypes[rng.random_range(0..spec.background_prototypes.len())];
        filler.push(b);
    }

    // Positions: relevant first (possibly mid-biased), the rest anywhere.
    let mut positions: Vec<usize> = (0..t).collect();
    let relevant_pos: Vec<usize> = if mid_biased && classes.len() == 1 {
        let (lo, hi) = middle_window(t, relevant.len());
        let mut window: Vec<usize> = (lo..hi).collect();
        window.shuffle(rng);
        window.truncate(relevant.len());
        window
    } else {
        positions.shuffle(rng);
        positions[..relevant.len()].to_vec()
    };
    let mut rest: Vec<usize> = (0..t).filter(|p| !relevant_pos.contains(p)).collect();
    rest.shuffle(rng);
    relevant.shuffle(rng);
    let mut others = distractors;
    others.extend(filler);

    let mut protos = vec![usize::MAX; t];
    for (&pos, &p) in relevant_pos.iter().zip(&relevant) {
        protos[pos] = p;
    }
    for (&pos, &p) in rest.iter().zip(&others) {
        protos[pos] = p;
    }
    debug_assert!(protos.iter().all(|&p| p != usize::MAX));

    let relevance = relevance_mask(spec, &protos, &classes);
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("valid sigma");
    let (f, d) = (spec.frames_per_timestep, spec.raw_dim);
    let mut frames = Vec::with_capacity(t * f * d);
    for &p in &protos {
        let base = &prototypes.data()[p * d..(p + 1) * d];
        for _ in 0..f {
            for &v in base {
                let n = if spec.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                frames.push(v + n);
            }
        }
    }
    let labels = match spec.task {
        Task::SingleLabel => Labels::Single(first),
        Task::MultiLabel => Labels::Multi(classes),
    };
    Ok(VideoSample {
        frames: Tensor::new(&[t * f, d], frames)?,
        labels,
        relevance,
        prototypes: protos,
    })
}

/// Index of the prototype closest (Euclidean) to `frame`.
pub fn nearest_prototype(prototypes: &Tensor, frame: &[f64]) -> usize {
    let d = prototypes.shape()[1];
    prototypes
        .data()
        .chunks(d)
        .map(|p| p.iter().zip(frame).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub split: String,
    pub seed: u64,
    pub spec: ActivitySpec,
    pub prototypes: Vec<f64>,
    pub videos: usize,
    pub timesteps: usize,
    pub frames_per_video: usize,
    pub raw_dim: usize,
}

pub(crate) fn write_container(w: &mut impl Write, magic: &[u8; 4], version: u32, header: &[u8]) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&version.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(header)?;
    Ok(())
}

pub(crate) fn read_container(r: &mut impl Read, path: &Path, magic: &[u8; 4], version: u32) -> Result<Vec<u8>> {
    let corrupt = |reason: &str| Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut m = [0u8; 4];
    r.read_exact(&mut m).map_err(|_| corrupt("missing magic"))?;
    if &m != magic {
        return Err(corrupt("bad magic"));
    }
    let found = read_u32(r, path)?;
    if found != version {
        return Err(Error::Version { found, expected: version });
    }
    let len = read_u64(r, path)?;
    if len > 1 << 32 {
        return Err(corrupt("implausible header length"));
    }
    let mut header = vec![0u8; len as usize];
    r.read_exact(&mut header).map_err(|_| corrupt("truncated header"))?;
    Ok(header)
}

pub(crate) fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Corrupt {
        path: path.to_path_buf(),
        reason: "truncated record".into(),
    })?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| Error::Corrupt {
        path: path.to_path_buf(),
        reason: "truncated record".into(),
    })?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64s(r: &mut impl Read, path: &Path, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf).map_err(|_| Error::Corrupt {
        path: path.to_path_buf(),
        reason: "truncated values".into(),
    })?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub(crate) fn write_f64s(w: &mut impl Write, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

impl Dataset {
    pub fn header(&self) -> DatasetHeader {
        DatasetHeader {
            format_version: DATASET_FORMAT_VERSION,
            split: self.split.clone(),
            seed: self.seed,
            spec: self.spec.clone(),
            prototypes: self.prototypes.data().to_vec(),
            videos: self.videos.len(),
            timesteps: self.spec.timesteps,
            frames_per_video: self.spec.frames_per_video(),
            raw_dim: self.spec.raw_dim,
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = serde_json::to_vec(&self.header())?;
        write_container(w, DATASET_MAGIC, DATASET_FORMAT_VERSION, &header)?;
        for v in &self.videos {
            let classes = v.labels.classes();
            w.write_all(&(classes.len() as u32).to_le_bytes())?;
            for &c in classes {
                w.write_all(&(c as u32).to_le_bytes())?;
            }
            let mask: Vec<u8> = v.relevance.iter().map(|&r| u8::from(r)).collect();
            w.write_all(&mask)?;
            for &p in &v.prototypes {
                w.write_all(&(p as u32).to_le_bytes())?;
            }
            write_f64s(w, v.frames.data())?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r, path)
    }

    pub fn read_from(r: &mut impl Read, path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        let header_bytes = read_container(r, path, DATASET_MAGIC, DATASET_FORMAT_VERSION)?;
        let h: DatasetHeader =
            serde_json::from_slice(&header_bytes).map_err(|e| corrupt(format!("header: {e}")))?;
        if h.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Version {
                found: h.format_version,
                expected: DATASET_FORMAT_VERSION,
            });
        }
        h.spec.validate().map_err(|e| corrupt(format!("spec: {e}")))?;
        if h.timesteps != h.spec.timesteps
            || h.frames_per_video != h.spec.frames_per_video()
            || h.raw_dim != h.spec.raw_dim
        {
            return Err(corrupt("header counts disagree with spec".into()));
        }
        let prototypes = Tensor::new(&[h.spec.num_prototypes, h.raw_dim], h.prototypes)
            .map_err(|e| corrupt(format!("prototypes: {e}")))?;
        let t = h.timesteps;
        let mut videos = Vec::with_capacity(h.videos.min(1 << 20));
        for _ in 0..h.videos {
            let k = read_u32(r, path)? as usize;
            if k == 0 || k > h.spec.num_classes {
                return Err(corrupt(format!("bad label count {k}")));
            }
            let mut classes = Vec::with_capacity(k);
            for _ in 0..k {
                let c = read_u32(r, path)? as usize;
                if c >= h.spec.num_classes {
                    return Err(corrupt(format!("label {c} out of range")));
                }
                classes.push(c);
            }
            let mut mask = vec![0u8; t];
            r.read_exact(&mut mask)
                .map_err(|_| corrupt("truncated relevance mask".into()))?;
            if mask.iter().any(|&b| b > 1) {
                return Err(corrupt("relevance byte is not 0/1".into()));
            }
            let mut protos = Vec::with_capacity(t);
            for _ in 0..t {
                let p = read_u32(r, path)? as usize;
                if p >= h.spec.num_prototypes {
                    return Err(corrupt(format!("prototype {p} out of range")));
                }
                protos.push(p);
            }
            let frames = read_f64s(r, path, h.frames_per_video * h.raw_dim)?;
            let labels = match h.spec.task {
                Task::SingleLabel if k == 1 => Labels::Single(classes[0]),
                Task::SingleLabel => return Err(corrupt("multiple labels in single-label split".into())),
                Task::MultiLabel => Labels::Multi(classes),
            };
            videos.push(VideoSample {
                frames: Tensor::new(&[h.frames_per_video, h.raw_dim], frames)?,
                labels,
                relevance: mask.into_iter().map(|b| b == 1).collect(),
                prototypes: protos,
            });
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(corrupt("trailing bytes after last video".into()));
        }
        Ok(Dataset {
            spec: h.spec,
            prototypes,
            seed: h.seed,
            split: h.split,
            videos,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SplitDataset {
        generate_dataset(&ActivitySpec::default(), 200, 50, 5).unwrap()
    }

    #[test]
    fn default_spec_invariants() {
        let spec = ActivitySpec::default();
        spec.validate().unwrap();
        assert_eq!(spec.num_classes, 10);
        assert_eq!(spec.num_prototypes, 24);
        assert_eq!(spec.shared_prototypes.len(), 6);
        assert_eq!(spec.relevant_count(), 10);
    }

    #[test]
    fn noiseless_frames_decode_to_planted_prototypes() {
        let mut spec = ActivitySpec::default();
        spec.noise_sigma = 0.0;
        spec.frames_per_timestep = 2;
        let ds = generate_dataset(&spec, 20, 0, 1).unwrap();
        for v in &ds.train.videos {
            for f in 0..v.num_frames() {
                let p = nearest_prototype(&ds.train.prototypes, v.frame(f));
                assert_eq!(p, v.prototypes[f / 2]);
            }
        }
    }

    #[test]
    fn fixed_seed_is_byte_identical() {
        let bytes = |ds: &Dataset| {
            let mut buf = Vec::new();
            ds.write_to(&mut buf).unwrap();
            buf
        };
        let (a, b) = (small(), small());
        assert_eq!(bytes(&a.train), bytes(&b.train));
        assert_eq!(bytes(&a.test), bytes(&b.test));
        let c = generate_dataset(&ActivitySpec::default(), 200, 50, 6).unwrap();
        assert_ne!(bytes(&a.train), bytes(&c.train));
    }

    #[test]
    fn class_balance_and_mask_cardinality() {
        let ds = small();
        let spec = &ds.train.spec;
        let n = ds.train.videos.len() as f64;
        for c in 0..spec.num_classes {
            let count = ds.train.videos.iter().filter(|v| v.labels == Labels::Single(c)).count() as f64;
            assert!((count - n / 10.0).abs() <= 0.1 * n / 10.0);
        }
        let target = spec.relevant_count() as i64;
        for v in ds.train.videos.iter().chain(&ds.test.videos) {
            let k = v.relevance.iter().filter(|&&r| r).count() as i64;
            assert!((k - target).abs() <= 2, "mask cardinality {k}");
        }
    }

    #[test]
    fn relevance_oracle_examples() {
        let ds = small();
        let spec = &ds.train.spec;
        let v = &ds.train.videos[0];
        let own = v.labels.single().unwrap();
        assert_eq!(relevance_oracle(spec, v, own).unwrap(), v.relevance);
        assert!(matches!(relevance_oracle(spec, v, 10), Err(Error::Domain(_))));

        for v in &ds.train.videos {
            for c in 0..spec.num_classes {
                let mask = relevance_oracle(spec, v, c).unwrap();
                for (i, &p) in v.prototypes.iter().enumerate() {
                    if spec.background_prototypes.contains(&p) {
                        assert!(!mask[i]);
                    }
                }
            }
        }
    }

    #[test]
    fn shared_prototype_relevant_for_one_class_only() {
        let ds = small();
        let spec = &ds.train.spec;
        // Find a class-A video and a shared timestep of A's recipe, then a
        // class B whose recipe does not contain that shared prototype.
        let v = &ds.train.videos[0];
        let a = v.labels.single().unwrap();
        let (i, &s) = v
            .prototypes
            .iter()
            .enumerate()
            .find(|(_, p)| spec.class_recipes[a].shared.contains(p))
            .unwrap();
        let b = (0..spec.num_classes)
            .find(|&b| !spec.class_recipes[b].members().contains(&s))
            .unwrap();
        // direct recipe-membership check
        assert!(spec.class_recipes[a].shared.contains(&s));
        assert!(!spec.class_recipes[b].members().contains(&s));
        assert!(relevance_oracle(spec, v, a).unwrap()[i]);
        assert!(!relevance_oracle(spec, v, b).unwrap()[i]);
    }

    #[test]
    fn same_prototype_relevant_in_one_video_irrelevant_in_another() {
        let ds = small();
        let d0 = 0; // discriminative prototype of class 0
        let relevant = ds.train.videos.iter().find(|v| {
            v.labels == Labels::Single(0) && v.prototypes.contains(&d0)
        });
        let distracting = ds.train.videos.iter().find(|v| {
            v.labels != Labels::Single(0) && v.prototypes.contains(&d0)
        });
        let (r, x) = (relevant.unwrap(), distracting.unwrap());
        let ir = r.prototypes.iter().position(|&p| p == d0).unwrap();
        let ix = x.prototypes.iter().position(|&p| p == d0).unwrap();
        assert!(r.relevance[ir]);
        assert!(!x.relevance[ix]);
    }

    #[test]
    fn multi_label_unions_recipes() {
        let mut spec = ActivitySpec::default();
        spec.task = Task::MultiLabel;
        let ds = generate_dataset(&spec, 60, 0, 3).unwrap();
        for v in &ds.train.videos {
            let cs = v.labels.classes();
            assert!((1..=3).contains(&cs.len()));
            for (i, &p) in v.prototypes.iter().enumerate() {
                if v.relevance[i] {
                    assert!(cs.iter().any(|&c| spec.class_recipes[c].members().contains(&p)));
                }
            }
        }
    }

    #[test]
    fn infeasible_fraction_is_generation_error() {
        let mut spec = ActivitySpec::default();
        spec.relevant_fraction = 0.05;
        assert!(matches!(generate_dataset(&spec, 10, 0, 1), Err(Error::Generation(_))));
        let mut spec = ActivitySpec::default();
        spec.relevant_fraction = 0.95;
        assert!(matches!(generate_dataset(&spec, 10, 0, 1), Err(Error::Generation(_))));
    }

    #[test]
    fn invalid_recipes_rejected() {
        let mut spec = ActivitySpec::default();
        spec.class_recipes[1] = spec.class_recipes[0].clone();
        assert!(spec.validate().is_err());
        let mut spec = ActivitySpec::default();
        spec.background_prototypes.push(0);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn round_trip_is_exact_and_truncation_fails() {
        let ds = small().test;
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        let path = Path::new("mem");
        let back = Dataset::read_from(&mut buf.as_slice(), path).unwrap();
        assert_eq!(back, ds);

        let cut = &buf[..buf.len() - 3];
        assert!(matches!(Dataset::read_from(&mut &cut[..], path), Err(Error::Corrupt { .. })));

        let mut bumped = buf.clone();
        bumped[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            Dataset::read_from(&mut bumped.as_slice(), path),
            Err(Error::Version { found: 2, .. })
        ));
    }
}
