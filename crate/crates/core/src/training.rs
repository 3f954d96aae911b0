//! Training loops for every model kind, checkpoints, and the frozen-weight
//! inference wrappers built from them.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, TensorMap};
use crate::compression::{apply_int8, ActivationRange, QuantizedCheckpoint};
use crate::corpus::{read_tensor, write_tensor, Corpus, StoredTensor, UtteranceRecord};
use crate::dsp::{Frontend, N_MELS};
use crate::encoders::{
    ContextAggregator, CpcEncoder, CpcPredictors, ParalinguisticEncoder, VqVaeCoder, CODEBOOK, CPC_DOWNSAMPLE, MEL_NORM,
};
use crate::error::{Error, Result};
use crate::losses::{
    lower_cpc_loss, lower_distill_loss, lower_triplet_loss, lower_vqvae_loss, DistillConfig, NegativeSet, TripletConfig,
    VqLossConfig,
};
use crate::nn::{cast_params, count_params, init_params, is_trainable, Layer, Sequential};
use crate::optim::{round_to_f32, Adam, AdamConfig};
use crate::quantizers::{kmeans_assign, kmeans_fit, Codebook, KMeansConfig, UnitEncoder};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{nearest_row, Tensor};

pub const CHECKPOINT_INDEX: &str = "checkpoint.json";
/// k-means centroids over context features, fitted after CPC training.
pub const UNIT_CODEBOOK: &str = "units.codebook";
/// Desk-task (speaker) classifier on top of an utterance embedding.
pub const TASK_HEAD: &str = "task.cls";

const INIT_STREAM: u64 = 0;
const DATA_STREAM: u64 = 1;
const SPLIT_STREAM: u64 = 2;
const KMEANS_STREAM: u64 = 3;
const HEAD_STREAM: u64 = 4;
const RESTART_STREAM: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    CpcKmeans,
    CpcVq,
    #[default]
    VqVae,
    Paralinguistic,
    DistillStudent,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::CpcKmeans => "cpc-kmeans",
            ModelKind::CpcVq => "cpc-vq",
            ModelKind::VqVae => "vq-vae",
            ModelKind::Paralinguistic => "paralinguistic",
            ModelKind::DistillStudent => "distill-student",
        }
    }

    pub fn is_linguistic(self) -> bool {
        matches!(self, ModelKind::CpcKmeans | ModelKind::CpcVq | ModelKind::VqVae)
    }

    fn uses_waveform(self) -> bool {
        matches!(self, ModelKind::CpcKmeans | ModelKind::CpcVq)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub kind: ModelKind,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// CPC width `H` and VQ-VAE hidden width.
    pub hidden: usize,
    /// VQ-VAE latent width `D`.
    pub latent: usize,
    /// VQ codebook size for cpc-vq and vq-vae.
    pub codes: usize,
    pub kmeans_k: usize,
    pub kmeans_restarts: usize,
    pub horizon: usize,
    pub n_neg: usize,
    pub inclusive_denominator: bool,
    /// CPC training crop, in encoder frames.
    pub crop_frames: usize,
    /// Triplet window, in mel frames.
    pub window_frames: usize,
    pub vq: VqLossConfig,
    /// Every this many steps, codes that no batch frame was assigned to since
    /// the last check are re-seeded from encoder outputs. 0 disables.
    pub code_restart_every: usize,
    pub triplet: TripletConfig,
    pub distill: DistillConfig,
    pub paralinguistic: ParalinguisticEncoder,
    pub student: ParalinguisticEncoder,
    /// Teacher checkpoint directory for distill-student.
    pub teacher: Option<PathBuf>,
    /// Adam steps for the full-batch desk-task head.
    pub head_steps: usize,
    pub train_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::default(),
            steps: 500,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
            hidden: 64,
            latent: 64,
            codes: 512,
            kmeans_k: 50,
            kmeans_restarts: 3,
            horizon: 4,
            n_neg: 10,
            inclusive_denominator: true,
            crop_frames: 32,
            window_frames: 12,
            vq: VqLossConfig::default(),
            code_restart_every: 10,
            triplet: TripletConfig::default(),
            distill: DistillConfig::default(),
            paralinguistic: ParalinguisticEncoder::default(),
            student: ParalinguisticEncoder {
                width: 32,
                layers: 2,
                ..ParalinguisticEncoder::default()
            },
            teacher: None,
            head_steps: 300,
            train_fraction: 0.75,
        }
    }
}

impl TrainConfig {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::invalid(format!("train config: {m}")));
        if self.batch_size == 0 {
            return fail("batch size must be at least 1");
        }
        if !(self.learning_rate > 0.0) {
            return fail("learning rate must be positive");
        }
        if self.hidden == 0 || self.latent == 0 || self.codes == 0 || self.kmeans_k == 0 {
            return fail("widths and codebook sizes must be positive");
        }
        if self.horizon == 0 || self.n_neg == 0 || self.crop_frames <= self.horizon {
            return fail("CPC needs horizon >= 1, n_neg >= 1 and crop_frames > horizon");
        }
        if self.window_frames == 0 || self.triplet.window == 0 || self.triplet.margin < 0.0 {
            return fail("triplet windows must be positive and the margin non-negative");
        }
        if self.vq.beta < 0.0 {
            return fail("commitment weight must be non-negative");
        }
        if !(self.distill.temperature > 0.0) || !(0.0..=1.0).contains(&self.distill.alpha) {
            return fail("distillation needs T > 0 and alpha in [0, 1]");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return fail("train fraction must lie in (0, 1)");
        }
        if self.kind == ModelKind::DistillStudent && self.teacher.is_none() {
            return fail("distill-student needs a teacher checkpoint");
        }
        Ok(())
    }

    pub fn cpc_encoder(&self) -> CpcEncoder {
        CpcEncoder { hidden: self.hidden }
    }

    pub fn context(&self) -> ContextAggregator {
        ContextAggregator { hidden: self.hidden }
    }

    pub fn predictors(&self) -> CpcPredictors {
        CpcPredictors {
            hidden: self.hidden,
            horizon: self.horizon,
        }
    }

    pub fn vqvae(&self) -> VqVaeCoder {
        VqVaeCoder {
            hidden: self.hidden,
            latent: self.latent,
            codes: self.codes,
        }
    }

    /// Embedder trained by this config: the teacher architecture for
    /// paralinguistic, the student for distill-student.
    pub fn embedder(&self) -> &ParalinguisticEncoder {
        if self.kind == ModelKind::DistillStudent {
            &self.student
        } else {
            &self.paralinguistic
        }
    }

    /// Stack producing the continuous frame features that get discretized.
    pub fn feature_stack(&self) -> Result<Sequential> {
        match self.kind {
            ModelKind::CpcKmeans => {
                let mut layers = self.cpc_encoder().stack().layers;
                layers.extend(self.context().stack().layers);
                Ok(Sequential::new(layers))
            }
            ModelKind::CpcVq => Ok(self.cpc_encoder().stack()),
            ModelKind::VqVae => Ok(self.vqvae().feature_stack()),
            other => Err(Error::invalid(format!("{} is not a linguistic model", other.name()))),
        }
    }

    fn param_specs(&self, classes: usize) -> Vec<(String, Vec<usize>, usize)> {
        let h = self.hidden;
        match self.kind {
            ModelKind::CpcKmeans | ModelKind::CpcVq => {
                let mut specs = self.cpc_encoder().stack().param_specs();
                specs.extend(self.context().stack().param_specs());
                specs.extend(self.predictors().param_specs());
                if self.kind == ModelKind::CpcVq {
                    specs.push((CODEBOOK.into(), vec![self.codes, h], h));
                }
                specs
            }
            ModelKind::VqVae => self.vqvae().param_specs(),
            // the teacher's head is fitted after embedding training
            ModelKind::Paralinguistic => self.paralinguistic.stack().param_specs(),
            ModelKind::DistillStudent => {
                let mut specs = self.student.stack().param_specs();
                specs.extend(Layer::linear(TASK_HEAD, self.student.dim, classes).params());
                specs
            }
        }
    }
}

/// Deterministic train/test split of `0..n`.
pub fn train_test_split(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::derive(seed, SPLIT_STREAM).shuffle(&mut idx);
    let cut = if n < 2 {
        n
    } else {
        ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1)
    };
    let mut train = idx[..cut].to_vec();
    let mut test = idx[cut..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointIndex {
    config: TrainConfig,
    steps: usize,
    final_loss: Option<f64>,
    history: Vec<f64>,
    /// Speaker classes of the desk-task head, when present.
    classes: usize,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Values are always representable in f32, the on-disk precision.
    pub params: TensorMap<f64>,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub history: Vec<f64>,
    pub classes: usize,
}

impl Checkpoint {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tensors = Vec::with_capacity(self.params.len());
        for (name, t) in &self.params {
            let file = format!("{name}.edgt");
            write_tensor(dir.join(&file), &StoredTensor::F32(t.cast()))?;
            tensors.push(TensorEntry {
                name: name.clone(),
                file,
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
            });
        }
        let index = CheckpointIndex {
            config: self.config.clone(),
            steps: self.steps,
            final_loss: self.final_loss,
            history: self.history.clone(),
            classes: self.classes,
            tensors,
        };
        let path = dir.join(CHECKPOINT_INDEX);
        fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(CHECKPOINT_INDEX);
        if !path.exists() {
            return Err(Error::MissingArtifact {
                stage: "checkpoint".into(),
                path,
            });
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: CheckpointIndex = serde_json::from_str(&text)?;
        let mut params = TensorMap::new();
        for entry in &index.tensors {
            let t = read_tensor(dir.join(&entry.file))?.into_f32()?;
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::invalid(format!("tensor {} does not match its index shape", entry.name)));
            }
            params.insert(entry.name.clone(), t.cast());
        }
        Ok(Self {
            config: index.config,
            params,
            steps: index.steps,
            final_loss: index.final_loss,
            history: index.history,
            classes: index.classes,
        })
    }

    /// Trainable parameters plus derived tensors, excluding buffers.
    pub fn param_count(&self) -> usize {
        self.params.iter().filter(|(k, _)| is_trainable(k)).map(|(_, v)| v.len()).sum()
    }

    pub fn payload_bytes(&self) -> usize {
        count_params(&self.params) * 4
    }
}

/// Waveforms and mel features of a corpus, kept in memory for training.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<UtteranceRecord>,
    pub waves: Vec<Vec<f64>>,
    pub mels: Vec<Tensor<f64>>,
}

impl Dataset {
    pub fn load(corpus: &Corpus) -> Result<Self> {
        let frontend = Frontend::default();
        let mut waves = Vec::with_capacity(corpus.records.len());
        let mut mels = Vec::with_capacity(corpus.records.len());
        for record in &corpus.records {
            let wave: Vec<f64> = corpus.load_waveform(record)?.iter().map(|&v| v as f64).collect();
            mels.push(frontend.mel_frames(&wave)?);
            waves.push(wave);
        }
        Ok(Self {
            records: corpus.records.clone(),
            waves,
            mels,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn speakers(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.speaker_id).collect()
    }

    /// Per-band mean and inverse standard deviation over all frames.
    pub fn mel_stats(&self) -> (Tensor<f64>, Tensor<f64>) {
        let mut sum = vec![0.0; N_MELS];
        let mut sq = vec![0.0; N_MELS];
        let mut n = 0usize;
        for m in &self.mels {
            for t in 0..m.rows() {
                for (j, &v) in m.row(t).iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let inv: Vec<f64> = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| 1.0 / (s / n - m * m).max(1e-6).sqrt())
            .collect();
        (Tensor::vector(mean), Tensor::vector(inv))
    }
}

/// Epoch-wise shuffled index stream.
struct Batcher {
    pool: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    seed: u64,
}

impl Batcher {
    fn new(pool: Vec<usize>, seed: u64) -> Self {
        Self {
            pool,
            order: Vec::new(),
            pos: 0,
            epoch: 0,
            seed,
        }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order = self.pool.clone();
            Rng::derive(self.seed, 1000 + self.epoch).shuffle(&mut self.order);
            self.epoch += 1;
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

fn mean_of<T: Scalar>(g: &mut Graph<T>, terms: &[NodeId]) -> Result<NodeId> {
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    g.scale(total, T::lit(1.0 / terms.len() as f64))
}

fn crop<'a>(wave: &'a [f64], samples: usize, rng: &mut Rng) -> &'a [f64] {
    if wave.len() <= samples {
        return wave;
    }
    let start = rng.below(wave.len() - samples + 1);
    &wave[start..start + samples]
}

fn frames(m: &Tensor<f64>, start: usize, len: usize) -> Tensor<f64> {
    let len = len.min(m.rows() - start);
    Tensor::new(vec![len, m.cols()], m.data()[start * m.cols()..(start + len) * m.cols()].to_vec()).expect("window")
}

/// Loss graph for one CPC crop; `quantize` inserts the VQ layer between
/// encoder and context network.
fn cpc_crop_loss(g: &mut Graph<f64>, cfg: &TrainConfig, wave: &[f64], rng: &mut Rng, quantize: bool) -> Result<(NodeId, NodeId)> {
    let x = g.constant(Tensor::new(vec![wave.len(), 1], wave.to_vec())?);
    let z_e = cfg.cpc_encoder().stack().lower(g, x)?;
    let len = g.shape(z_e)[0];
    let (z, extra) = if quantize {
        let cb = g.param(CODEBOOK, &[cfg.codes, cfg.hidden]);
        let z_q = g.nearest_code(z_e, cb)?;
        let st = g.straight_through(z_e, z_q)?;
        let nodes = VqTerms::lower(g, z_e, z_q, cfg.vq)?;
        (st, Some(nodes))
    } else {
        (z_e, None)
    };
    let c = cfg.context().stack().lower(g, z)?;
    let preds: Vec<NodeId> = (1..=cfg.horizon)
        .map(|k| g.param(CpcPredictors::name(k), &[cfg.hidden, cfg.hidden]))
        .collect();
    let negs = NegativeSet::sample(len, cfg.horizon, cfg.n_neg, rng)?;
    let loss = lower_cpc_loss(g, z, c, &preds, &negs, cfg.inclusive_denominator)?;
    let loss = match extra {
        Some(vq) => g.add(loss, vq)?,
        None => loss,
    };
    Ok((loss, z_e))
}

/// Codebook + commitment terms without a reconstruction term.
struct VqTerms;

impl VqTerms {
    fn lower(g: &mut Graph<f64>, z_e: NodeId, z_q: NodeId, cfg: VqLossConfig) -> Result<NodeId> {
        let ze_sg = g.stop_gradient(z_e)?;
        let d = g.sq_dist(ze_sg, z_q)?;
        let codebook = g.mean(d)?;
        let zq_sg = g.stop_gradient(z_q)?;
        let d = g.sq_dist(z_e, zq_sg)?;
        let d = g.mean(d)?;
        let commit = g.scale(d, cfg.beta)?;
        g.add(codebook, commit)
    }
}

struct StepGraph {
    graph: Graph<f64>,
    loss: NodeId,
    /// Pre-quantization encoder outputs, for codebook maintenance.
    encodings: Vec<NodeId>,
}

/// Tracks which codes receive frames and re-seeds the ones that starve.
struct CodeRestarts {
    every: usize,
    used: Vec<bool>,
}

impl CodeRestarts {
    fn new(every: usize, codes: usize) -> Self {
        Self {
            every,
            used: vec![false; codes],
        }
    }

    /// Records this step's assignments; on a check step replaces every unused
    /// code by a random batch frame and clears its optimizer state.
    fn observe(&mut self, step: usize, frames: &[&[f64]], params: &mut TensorMap<f64>, opt: &mut Adam, rng: &mut Rng) {
        if self.every == 0 || frames.is_empty() {
            return;
        }
        let Some(codebook) = params.get_mut(CODEBOOK) else { return };
        let dim = codebook.cols();
        for f in frames {
            self.used[nearest_row(codebook.data(), dim, f).0] = true;
        }
        if (step + 1) % self.every != 0 {
            return;
        }
        let dead: Vec<usize> = (0..self.used.len()).filter(|&k| !self.used[k]).collect();
        for &k in &dead {
            let src = frames[rng.below(frames.len())];
            codebook.data_mut()[k * dim..(k + 1) * dim].copy_from_slice(src);
        }
        opt.reset_rows(CODEBOOK, &dead, dim);
        self.used.fill(false);
    }
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    data: &'a Dataset,
    /// Utterances triplet negatives are drawn from.
    negative_pool: Vec<usize>,
    teacher_logits: Vec<Option<Tensor<f64>>>,
}

impl Trainer<'_> {
    fn step_graph(&self, batch: &[usize], rng: &mut Rng) -> Result<StepGraph> {
        let cfg = self.cfg;
        let mut g = Graph::new();
        let mut encodings = Vec::new();
        let loss = match cfg.kind {
            ModelKind::CpcKmeans | ModelKind::CpcVq => {
                let samples = cfg.crop_frames * CPC_DOWNSAMPLE;
                let mut terms = Vec::with_capacity(batch.len());
                for &i in batch {
                    let wave = crop(&self.data.waves[i], samples, rng);
                    let (loss, z_e) = cpc_crop_loss(&mut g, cfg, wave, rng, cfg.kind == ModelKind::CpcVq)?;
                    terms.push(loss);
                    encodings.push(z_e);
                }
                mean_of(&mut g, &terms)?
            }
            ModelKind::VqVae => {
                let coder = cfg.vqvae();
                let mut terms = Vec::with_capacity(batch.len());
                for &i in batch {
                    let x = g.constant(self.data.mels[i].clone());
                    let nodes = coder.lower(&mut g, x)?;
                    terms.push(lower_vqvae_loss(&mut g, nodes.target, nodes.recon, nodes.z_e, nodes.z_q, cfg.vq)?.total);
                    encodings.push(nodes.z_e);
                }
                mean_of(&mut g, &terms)?
            }
            ModelKind::Paralinguistic => {
                let stack = cfg.paralinguistic.stack();
                let w = cfg.window_frames;
                let (mut a, mut p, mut n) = (Vec::new(), Vec::new(), Vec::new());
                for &i in batch {
                    let m = &self.data.mels[i];
                    let span = m.rows().saturating_sub(w);
                    let start = rng.below(span + 1);
                    let lo = start.saturating_sub(cfg.triplet.window);
                    let hi = (start + cfg.triplet.window).min(span);
                    let pos = lo + rng.below(hi - lo + 1);
                    let other = loop {
                        let j = self.negative_pool[rng.below(self.negative_pool.len())];
                        if j != i || self.negative_pool.len() == 1 {
                            break j;
                        }
                    };
                    let mo = &self.data.mels[other];
                    let neg = rng.below(mo.rows().saturating_sub(w) + 1);
                    for (dst, src, s) in [(&mut a, m, start), (&mut p, m, pos), (&mut n, mo, neg)] {
                        let x = g.constant(frames(src, s, w));
                        dst.push(stack.lower(&mut g, x)?);
                    }
                }
                let a = g.concat(&a, 0)?;
                let p = g.concat(&p, 0)?;
                let n = g.concat(&n, 0)?;
                lower_triplet_loss(&mut g, a, p, n, cfg.triplet)?
            }
            ModelKind::DistillStudent => {
                let mut logits = Vec::with_capacity(batch.len());
                let mut teacher = Vec::with_capacity(batch.len());
                let mut labels = Vec::with_capacity(batch.len());
                for &i in batch {
                    let x = g.constant(self.data.mels[i].clone());
                    let e = cfg.student.stack().lower(&mut g, x)?;
                    logits.push(Layer::linear(TASK_HEAD, cfg.student.dim, self.classes()).lower(&mut g, e)?);
                    teacher.extend_from_slice(self.teacher_logits[i].as_ref().expect("train split").data());
                    labels.push(self.data.records[i].speaker_id);
                }
                let s = g.concat(&logits, 0)?;
                let t = Tensor::new(vec![batch.len(), self.classes()], teacher)?;
                lower_distill_loss(&mut g, s, &t, &labels, cfg.distill)?
            }
        };
        Ok(StepGraph {
            graph: g,
            loss,
            encodings,
        })
    }

    fn classes(&self) -> usize {
        self.data.records.iter().map(|r| r.speaker_id + 1).max().unwrap_or(0)
    }
}

/// Random encoder frames as initial codes, so that no code starts out of reach.
fn init_codebook_from_data(cfg: &TrainConfig, params: &TensorMap<f64>, data: &Dataset, rng: &mut Rng) -> Result<Tensor<f64>> {
    let (stack, width) = match cfg.kind {
        ModelKind::CpcVq => (cfg.cpc_encoder().stack(), cfg.hidden),
        _ => (cfg.vqvae().feature_stack(), cfg.latent),
    };
    let mut pool = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut order);
    for &i in &order {
        let z = if cfg.kind == ModelKind::CpcVq {
            let w = &data.waves[i];
            stack.apply(params, &Tensor::new(vec![w.len(), 1], w.clone())?)?
        } else {
            stack.apply(params, &data.mels[i])?
        };
        pool.extend((0..z.rows()).map(|t| z.row(t).to_vec()));
        if pool.len() >= 4 * cfg.codes {
            break;
        }
    }
    let mut codes = Vec::with_capacity(cfg.codes * width);
    for _ in 0..cfg.codes {
        let row = &pool[rng.below(pool.len())];
        codes.extend(row.iter().map(|&v| v + 0.01 * rng.normal()));
    }
    Tensor::new(vec![cfg.codes, width], codes)
}

/// Trains the model described by `cfg` on `corpus`.
pub fn train(cfg: &TrainConfig, corpus: &Corpus) -> Result<Checkpoint> {
    cfg.validate()?;
    let data = Dataset::load(corpus)?;
    train_on(cfg, &data)
}

pub fn train_on(cfg: &TrainConfig, data: &Dataset) -> Result<Checkpoint> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let (train_idx, _) = train_test_split(data.len(), cfg.train_fraction, cfg.seed);
    let classes = data.records.iter().map(|r| r.speaker_id + 1).max().unwrap_or(0);
    let mut init_rng = Rng::derive(cfg.seed, INIT_STREAM);
    let mut params = init_params(&cfg.param_specs(classes), &mut init_rng);

    if !cfg.kind.uses_waveform() {
        let (mean, inv) = data.mel_stats();
        params.insert(format!("{MEL_NORM}.mean"), mean.cast::<f32>().cast());
        params.insert(format!("{MEL_NORM}.inv_std"), inv.cast::<f32>().cast());
    }
    if matches!(cfg.kind, ModelKind::CpcVq | ModelKind::VqVae) {
        let mut cb = init_codebook_from_data(cfg, &params, data, &mut init_rng)?;
        cb = cb.cast::<f32>().cast();
        params.insert(CODEBOOK.into(), cb);
    }

    let mut teacher_logits = vec![None; data.len()];
    if cfg.kind == ModelKind::DistillStudent {
        let path = cfg.teacher.as_ref().expect("validated");
        let teacher = ParalinguisticModel::from_checkpoint(&Checkpoint::load(path)?)?;
        if teacher.param_count() <= param_count_of(cfg, classes) {
            return Err(Error::invalid("student is not smaller than the teacher"));
        }
        for &i in &train_idx {
            teacher_logits[i] = Some(teacher.logits_mel(&data.mels[i])?);
        }
    }

    // An unsupervised model's pool is the whole corpus; supervised ones see
    // only the training split.
    let pool: Vec<usize> = match cfg.kind {
        ModelKind::DistillStudent => train_idx.clone(),
        _ => (0..data.len()).collect(),
    };
    let trainer = Trainer {
        cfg,
        data,
        negative_pool: pool.clone(),
        teacher_logits,
    };
    let mut batcher = Batcher::new(pool, cfg.seed);
    let mut rng = Rng::derive(cfg.seed, DATA_STREAM);
    let mut opt = Adam::new(AdamConfig::new(cfg.learning_rate));
    let mut history = Vec::with_capacity(cfg.steps);
    let mut restarts = CodeRestarts::new(cfg.code_restart_every, cfg.codes);
    let mut restart_rng = Rng::derive(cfg.seed, RESTART_STREAM);

    for step in 0..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch_size).map(|_| batcher.next()).collect();
        let StepGraph { graph: g, loss, encodings } = trainer.step_graph(&batch, &mut rng)?;
        let eval = match g.evaluate(&params, &TensorMap::new()) {
            Ok(e) => e,
            Err(Error::NonFinite { .. }) => return Err(Error::NanLoss { step }),
            Err(e) => return Err(e),
        };
        let value = eval.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NanLoss { step });
        }
        let grads = match g.backward(&eval, loss) {
            Ok(gr) => gr,
            Err(Error::NonFinite { .. }) => return Err(Error::NanLoss { step }),
            Err(e) => return Err(e),
        };
        opt.step(&mut params, grads.params());
        let frames: Vec<&[f64]> = encodings
            .iter()
            .flat_map(|&z| {
                let z = eval.get(z);
                (0..z.rows()).map(move |t| z.row(t))
            })
            .collect();
        restarts.observe(step, &frames, &mut params, &mut opt, &mut restart_rng);
        history.push(value);
    }
    round_to_f32(&mut params);

    match cfg.kind {
        ModelKind::CpcKmeans => {
            let model = LinguisticModel::<f64>::with_params(cfg.clone(), params.clone())?;
            let mut rows = Vec::new();
            for w in &data.waves {
                let f = model.features_f64(w)?;
                rows.extend((0..f.rows()).map(|t| f.row(t).to_vec()));
            }
            let points = Tensor::from_rows(&rows)?;
            let mut km = KMeansConfig::new(cfg.kmeans_k.min(points.rows()), cfg.seed ^ KMEANS_STREAM);
            km.restarts = cfg.kmeans_restarts;
            let fit = kmeans_fit(&points, &km)?;
            params.insert(UNIT_CODEBOOK.into(), fit.codebook.into_codes().cast::<f32>().cast());
        }
        ModelKind::Paralinguistic => {
            let enc = &cfg.paralinguistic;
            let feats: Vec<Vec<f64>> = train_idx
                .iter()
                .map(|&i| enc.stack().apply(&params, &data.mels[i]).map(Tensor::into_data))
                .collect::<Result<_>>()?;
            let labels: Vec<usize> = train_idx.iter().map(|&i| data.records[i].speaker_id).collect();
            let head = fit_softmax_head(
                &Tensor::from_rows(&feats)?,
                &labels,
                classes,
                cfg.head_steps,
                1e-2,
                cfg.seed ^ HEAD_STREAM,
            )?;
            params.extend(head.into_iter().map(|(k, v)| (format!("{TASK_HEAD}.{k}"), v)));
            round_to_f32(&mut params);
        }
        _ => {}
    }

    Ok(Checkpoint {
        config: cfg.clone(),
        params,
        steps: cfg.steps,
        final_loss: history.last().copied(),
        history,
        classes,
    })
}

fn param_count_of(cfg: &TrainConfig, classes: usize) -> usize {
    cfg.param_specs(classes)
        .iter()
        .filter(|(k, _, _)| is_trainable(k))
        .map(|(_, s, _)| s.iter().product::<usize>())
        .sum()
}

/// Multinomial logistic regression fitted full-batch with Adam; features are
/// standardized inside (statistics folded into the returned `w`, `b`).
pub fn fit_softmax_head(features: &Tensor<f64>, labels: &[usize], classes: usize, steps: usize, lr: f64, seed: u64) -> Result<TensorMap<f64>> {
    let (n, d) = (features.rows(), features.cols());
    if n == 0 || labels.len() != n || classes < 2 || labels.iter().any(|&l| l >= classes) {
        return Err(Error::invalid("softmax head needs one in-range label per row and at least two classes"));
    }
    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| features.row(i)[j]).sum::<f64>() / n as f64).collect();
    let inv: Vec<f64> = (0..d)
        .map(|j| {
            let var = (0..n).map(|i| (features.row(i)[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
            if var > 1e-12 {
                1.0 / var.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let standardized = Tensor::new(
        vec![n, d],
        (0..n * d).map(|k| (features.data()[k] - mean[k % d]) * inv[k % d]).collect(),
    )?;
    let layer = Layer::linear("head", d, classes);
    let mut params = init_params(&layer.params(), &mut Rng::new(seed));
    for t in params.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut g = Graph::new();
    let x = g.constant(standardized);
    let logits = layer.lower(&mut g, x)?;
    let ls = g.log_softmax(logits)?;
    let picked = g.gather(ls, labels.iter().enumerate().map(|(i, &l)| i * classes + l).collect(), &[n])?;
    let loss = g.mean(picked)?;
    let loss = g.scale(loss, -1.0)?;
    let mut opt = Adam::new(AdamConfig::new(lr));
    for step in 0..steps {
        let eval = g.evaluate(&params, &TensorMap::new())?;
        if !eval.scalar(loss).is_finite() {
            return Err(Error::NanLoss { step });
        }
        let grads = g.backward(&eval, loss)?;
        opt.step(&mut params, grads.params());
    }
    // fold standardization: (x - μ) ⊙ s W + b = x (s ⊙ W) + (b - (μ ⊙ s) W)
    let w = &params["head.w"];
    let b = &params["head.b"];
    let mut w2 = vec![0.0; d * classes];
    let mut b2 = b.data().to_vec();
    for j in 0..d {
        for c in 0..classes {
            let v = w.data()[j * classes + c] * inv[j];
            w2[j * classes + c] = v;
            b2[c] -= mean[j] * v;
        }
    }
    Ok([
        ("w".to_string(), Tensor::new(vec![d, classes], w2)?),
        ("b".to_string(), Tensor::vector(b2)),
    ]
    .into())
}

/// Frozen linguistic model: continuous frame features and discrete units.
#[derive(Debug, Clone)]
pub struct LinguisticModel<T> {
    config: TrainConfig,
    params: TensorMap<T>,
    stack: Sequential,
    codebook: Codebook<T>,
    frontend: Frontend,
    /// INT8 activation grids; empty for full-precision inference.
    activations: Vec<ActivationRange>,
}

pub type LinguisticModel32 = LinguisticModel<f32>;

impl<T: Scalar> LinguisticModel<T> {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Self::with_params(ckpt.config.clone(), cast_params(&ckpt.params))
    }

    /// Weights dequantized from INT8 storage, activations snapped to their
    /// calibrated grids.
    pub fn from_quantized(q: &QuantizedCheckpoint) -> Result<Self> {
        if !q.config.kind.is_linguistic() {
            return Err(Error::invalid(format!("{} checkpoint is not a linguistic model", q.config.kind.name())));
        }
        let mut model = Self::with_params(q.config.clone(), q.dequantized_params())?;
        model.activations = q.activations.clone();
        Ok(model)
    }

    pub fn is_quantized(&self) -> bool {
        !self.activations.is_empty()
    }

    fn with_params(config: TrainConfig, params: TensorMap<T>) -> Result<Self> {
        let stack = config.feature_stack()?;
        let cb_name = if config.kind == ModelKind::CpcKmeans { UNIT_CODEBOOK } else { CODEBOOK };
        let codebook = match params.get(cb_name) {
            Some(cb) => Codebook::new(cb.clone())?,
            // before the k-means fit: a placeholder so features can be computed
            None => Codebook::new(Tensor::<T>::zeros(&[1, 1]))?,
        };
        Ok(Self {
            config,
            params,
            stack,
            codebook,
            frontend: Frontend::default(),
            activations: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &TensorMap<T> {
        &self.params
    }

    pub fn stack(&self) -> &Sequential {
        &self.stack
    }

    pub fn codebook(&self) -> &Codebook<T> {
        &self.codebook
    }

    /// The network input for a waveform: `[samples, 1]` or log-mel frames.
    pub fn prepare(&self, wave: &[f32]) -> Result<Tensor<T>> {
        let samples: Vec<T> = wave.iter().map(|&v| T::lit(v as f64)).collect();
        if self.config.kind.uses_waveform() {
            if samples.len() < CPC_DOWNSAMPLE {
                return Err(Error::invalid("waveform shorter than one encoder frame"));
            }
            Tensor::new(vec![samples.len(), 1], samples)
        } else {
            self.frontend.mel_frames(&samples)
        }
    }

    /// Continuous frames that are discretized into units.
    pub fn features(&self, wave: &[f32]) -> Result<Tensor<T>> {
        let x = self.prepare(wave)?;
        if self.activations.is_empty() {
            self.stack.apply(&self.params, &x)
        } else {
            apply_int8(&self.stack, &self.params, &x, &self.activations)
        }
    }

    pub fn assign(&self, features: &Tensor<T>) -> Result<Vec<usize>> {
        kmeans_assign(features, &self.codebook)
    }
}

impl LinguisticModel<f64> {
    fn features_f64(&self, wave: &[f64]) -> Result<Tensor<f64>> {
        let x = if self.config.kind.uses_waveform() {
            Tensor::new(vec![wave.len(), 1], wave.to_vec())?
        } else {
            self.frontend.mel_frames(wave)?
        };
        self.stack.apply(&self.params, &x)
    }
}

impl<T: Scalar> UnitEncoder for LinguisticModel<T> {
    fn codes(&self) -> usize {
        self.codebook.len()
    }

    fn frame_period(&self) -> usize {
        if self.config.kind.uses_waveform() {
            CPC_DOWNSAMPLE
        } else {
            2 * self.frontend.config().hop
        }
    }

    fn frame_offset(&self) -> usize {
        if self.config.kind.uses_waveform() {
            CPC_DOWNSAMPLE / 2
        } else {
            // latent t pools mel frames 2t and 2t + 1
            let stft = self.frontend.config();
            stft.window / 2 + stft.hop / 2
        }
    }

    fn units(&self, wave: &[f32]) -> Result<Vec<usize>> {
        let f = self.features(wave)?;
        Ok((0..f.rows())
            .map(|t| nearest_row(self.codebook.codes().data(), self.codebook.dim(), f.row(t)).0)
            .collect())
    }
}

/// Frozen utterance embedder with its desk-task head.
#[derive(Debug, Clone)]
pub struct ParalinguisticModel<T> {
    encoder: ParalinguisticEncoder,
    params: TensorMap<T>,
    frontend: Frontend,
    activations: Vec<ActivationRange>,
}

impl<T: Scalar> ParalinguisticModel<T> {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if !matches!(ckpt.config.kind, ModelKind::Paralinguistic | ModelKind::DistillStudent) {
            return Err(Error::invalid(format!("{} checkpoint is not an embedder", ckpt.config.kind.name())));
        }
        Ok(Self {
            encoder: ckpt.config.embedder().clone(),
            params: cast_params(&ckpt.params),
            frontend: Frontend::default(),
            activations: Vec::new(),
        })
    }

    pub fn from_quantized(q: &QuantizedCheckpoint) -> Result<Self> {
        if !matches!(q.config.kind, ModelKind::Paralinguistic | ModelKind::DistillStudent) {
            return Err(Error::invalid(format!("{} checkpoint is not an embedder", q.config.kind.name())));
        }
        Ok(Self {
            encoder: q.config.embedder().clone(),
            params: q.dequantized_params(),
            frontend: Frontend::default(),
            activations: q.activations.clone(),
        })
    }

    /// Embedding stack followed by the desk-task head.
    pub fn stack_with_head(encoder: &ParalinguisticEncoder, classes: usize) -> Sequential {
        let mut layers = encoder.stack().layers;
        layers.push(Layer::linear(TASK_HEAD, encoder.dim, classes));
        Sequential::new(layers)
    }

    fn run(&self, stack: &Sequential, mel: &Tensor<T>) -> Result<Tensor<T>> {
        if self.activations.is_empty() {
            stack.apply(&self.params, mel)
        } else {
            apply_int8(stack, &self.params, mel, &self.activations)
        }
    }

    pub fn encoder(&self) -> &ParalinguisticEncoder {
        &self.encoder
    }

    pub fn params(&self) -> &TensorMap<T> {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().filter(|(k, _)| is_trainable(k)).map(|(_, v)| v.len()).sum()
    }

    pub fn mel(&self, wave: &[f32]) -> Result<Tensor<T>> {
        let samples: Vec<T> = wave.iter().map(|&v| T::lit(v as f64)).collect();
        self.frontend.mel_frames(&samples)
    }

    pub fn embed_mel(&self, mel: &Tensor<T>) -> Result<Vec<T>> {
        if self.activations.is_empty() {
            return crate::encoders::paralinguistic_embed(mel, &self.encoder, &self.params);
        }
        if mel.rank() != 2 || mel.rows() == 0 {
            return Err(Error::invalid("paralinguistic embedding needs at least one mel frame"));
        }
        Ok(self.run(&self.encoder.stack(), mel)?.into_data())
    }

    pub fn embed(&self, wave: &[f32]) -> Result<Vec<T>> {
        self.embed_mel(&self.mel(wave)?)
    }

    pub fn logits_mel(&self, mel: &Tensor<T>) -> Result<Tensor<T>> {
        let classes = self
            .params
            .get(&format!("{TASK_HEAD}.b"))
            .ok_or_else(|| Error::Unbound(format!("{TASK_HEAD}.b")))?
            .len();
        self.run(&Self::stack_with_head(&self.encoder, classes), mel)
    }

    pub fn classify_mel(&self, mel: &Tensor<T>) -> Result<usize> {
        Ok(argmax(self.logits_mel(mel)?.data()))
    }

    /// Predicted speaker for a waveform.
    pub fn classify(&self, wave: &[f32]) -> Result<usize> {
        self.classify_mel(&self.mel(wave)?)
    }
}

pub(crate) fn argmax<T: Scalar>(v: &[T]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrips_through_json() {
        let cfg = TrainConfig::new(ModelKind::CpcKmeans);
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"cpc-kmeans\""));
        assert_eq!(serde_json::from_str::<TrainConfig>(&text).unwrap(), cfg);
        let partial: TrainConfig = serde_json::from_str(r#"{"kind":"paralinguistic","steps":3}"#).unwrap();
        assert_eq!(partial.kind, ModelKind::Paralinguistic);
        assert_eq!(partial.steps, 3);
        assert_eq!(partial.batch_size, 8);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::new(ModelKind::DistillStudent).validate().is_err());
    }

    #[test]
    fn split_partitions_indices() {
        let (a, b) = train_test_split(200, 0.75, 3);
        assert_eq!(a.len(), 150);
        assert_eq!(b.len(), 50);
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
        assert_eq!(train_test_split(200, 0.75, 3), (a, b));
    }

    #[test]
    fn softmax_head_separates_blobs() {
        let mut rng = Rng::new(1);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..60 {
            let c = i % 3;
            rows.push(vec![c as f64 * 4.0 + rng.normal(), rng.normal() * 0.1 + 7.0]);
            labels.push(c);
        }
        let x = Tensor::from_rows(&rows).unwrap();
        let head = fit_softmax_head(&x, &labels, 3, 300, 0.05, 0).unwrap();
        let correct = (0..60)
            .filter(|&i| {
                let logits: Vec<f64> = (0..3)
                    .map(|c| head["b"].data()[c] + (0..2).map(|j| rows[i][j] * head["w"].data()[j * 3 + c]).sum::<f64>())
                    .collect();
                argmax(&logits) == labels[i]
            })
            .count();
        assert!(correct >= 58, "{correct}");
    }
}
