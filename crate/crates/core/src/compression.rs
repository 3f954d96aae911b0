//! Post-training INT8 quantization with size accounting, quantized
//! inference, and the distillation driver.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::TensorMap;
use crate::corpus::{read_tensor, Corpus, StoredTensor};
use crate::error::{Error, Result};
use crate::nn::{is_trainable, Sequential};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::{
    train, train_test_split, Checkpoint, LinguisticModel, ModelKind, ParalinguisticModel, TrainConfig, CHECKPOINT_INDEX,
};

pub const QUANTIZED_INDEX: &str = "quantized.json";
/// Utterances drawn from the training split for activation calibration.
pub const CALIBRATION_UTTERANCES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantMode {
    Symmetric,
    Affine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub values: Vec<i8>,
    pub scale: f64,
    pub zero_point: i32,
    /// The tensor was all zeros; `scale` was set to 1.
    pub flagged: bool,
}

/// Scale and zero point of a quantization grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub scale: f64,
    pub zero_point: i32,
    pub flagged: bool,
}

impl Grid {
    /// `scale = max|x| / 127`, zero point 0.
    pub fn symmetric(max_abs: f64) -> Self {
        if max_abs > 0.0 {
            Self {
                scale: max_abs / 127.0,
                zero_point: 0,
                flagged: false,
            }
        } else {
            Self {
                scale: 1.0,
                zero_point: 0,
                flagged: true,
            }
        }
    }

    /// `scale = (max - min) / 255`, `zero_point = round(-min / scale) - 128`.
    /// The range is widened to contain 0 so the zero point stays in range.
    pub fn affine(min: f64, max: f64) -> Self {
        let (lo, hi) = (min.min(0.0), max.max(0.0));
        if hi > lo {
            let scale = (hi - lo) / 255.0;
            Self {
                scale,
                zero_point: ((-lo / scale).round() as i32 - 128).clamp(-128, 127),
                flagged: false,
            }
        } else {
            Self {
                scale: 1.0,
                zero_point: -128,
                flagged: true,
            }
        }
    }

    pub fn quantize(&self, x: f64) -> i8 {
        ((x / self.scale).round() + self.zero_point as f64).clamp(-128.0, 127.0) as i8
    }

    pub fn dequantize(&self, q: i8) -> f64 {
        (q as i32 - self.zero_point) as f64 * self.scale
    }

    /// Round trip through the grid.
    pub fn fake_quant(&self, x: f64) -> f64 {
        self.dequantize(self.quantize(x))
    }
}

pub fn quantize_int8<T: Scalar>(t: &Tensor<T>, mode: QuantMode) -> Result<QuantizedTensor> {
    if !t.is_finite() {
        return Err(Error::invalid("cannot quantize a tensor with non-finite values"));
    }
    let data: Vec<f64> = t.data().iter().map(|v| v.to_f64().expect("finite")).collect();
    let grid = match mode {
        QuantMode::Symmetric => Grid::symmetric(data.iter().fold(0.0, |m, v| m.max(v.abs()))),
        QuantMode::Affine => {
            let (lo, hi) = data
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            Grid::affine(lo, hi)
        }
    };
    Ok(QuantizedTensor {
        shape: t.shape().to_vec(),
        values: data.iter().map(|&v| grid.quantize(v)).collect(),
        scale: grid.scale,
        zero_point: grid.zero_point,
        flagged: grid.flagged,
    })
}

/// `(value - zero_point) * scale` in the original shape.
pub fn dequantize<T: Scalar>(q: &QuantizedTensor) -> Tensor<T> {
    let grid = q.grid();
    let data = q.values.iter().map(|&v| T::lit(grid.dequantize(v))).collect();
    Tensor::new(q.shape.clone(), data).expect("quantized tensor keeps its shape")
}

impl QuantizedTensor {
    pub fn grid(&self) -> Grid {
        Grid {
            scale: self.scale,
            zero_point: self.zero_point,
            flagged: self.flagged,
        }
    }

    fn stored(&self) -> StoredTensor {
        StoredTensor::I8 {
            shape: self.shape.clone(),
            data: self.values.clone(),
        }
    }
}

/// Calibrated output range of one layer of the inference stack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationRange {
    pub layer: usize,
    pub min: f64,
    pub max: f64,
    pub scale: f64,
    pub zero_point: i32,
}

impl ActivationRange {
    fn new(layer: usize, min: f64, max: f64) -> Self {
        let grid = Grid::affine(min, max);
        Self {
            layer,
            min,
            max,
            scale: grid.scale,
            zero_point: grid.zero_point,
        }
    }

    pub fn grid(&self) -> Grid {
        Grid {
            scale: self.scale,
            zero_point: self.zero_point,
            flagged: false,
        }
    }
}

/// Runs `stack` with every calibrated layer output snapped to its INT8 grid.
/// Weights are expected already dequantized from their integer storage.
pub fn apply_int8<T: Scalar>(
    stack: &Sequential,
    params: &TensorMap<T>,
    x: &Tensor<T>,
    ranges: &[ActivationRange],
) -> Result<Tensor<T>> {
    let by_layer: BTreeMap<usize, Grid> = ranges.iter().map(|r| (r.layer, r.grid())).collect();
    stack.apply_with(params, x, |i, out| match by_layer.get(&i) {
        Some(grid) => out.map(|v| T::lit(grid.fake_quant(v.to_f64().expect("finite")))),
        None => out,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct QuantizedEntry {
    name: String,
    shape: Vec<usize>,
    scale: f64,
    zero_point: i32,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct QuantizedIndex {
    config: TrainConfig,
    classes: usize,
    /// i8 weight tensors, stored as `<name>.edgt`.
    weights: Vec<QuantizedEntry>,
    /// f32 buffers kept at full precision.
    buffers: Vec<String>,
    activations: Vec<ActivationRange>,
}

/// Symmetric per-tensor INT8 weights, full-precision buffers, and affine
/// activation grids from calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedCheckpoint {
    pub config: TrainConfig,
    pub classes: usize,
    pub weights: BTreeMap<String, QuantizedTensor>,
    pub buffers: TensorMap<f64>,
    pub activations: Vec<ActivationRange>,
}

impl QuantizedCheckpoint {
    fn index(&self) -> QuantizedIndex {
        QuantizedIndex {
            config: self.config.clone(),
            classes: self.classes,
            weights: self
                .weights
                .iter()
                .map(|(name, q)| QuantizedEntry {
                    name: name.clone(),
                    shape: q.shape.clone(),
                    scale: q.scale,
                    zero_point: q.zero_point,
                    flagged: q.flagged,
                })
                .collect(),
            buffers: self.buffers.keys().cloned().collect(),
            activations: self.activations.clone(),
        }
    }

    fn files(&self) -> Result<Vec<(String, Vec<u8>)>> {
        let mut files = Vec::new();
        for (name, q) in &self.weights {
            files.push((format!("{name}.edgt"), q.stored().to_bytes()));
        }
        for (name, t) in &self.buffers {
            files.push((format!("{name}.edgt"), StoredTensor::F32(t.cast()).to_bytes()));
        }
        files.push((QUANTIZED_INDEX.to_string(), serde_json::to_vec(&self.index())?));
        Ok(files)
    }

    /// Bytes the checkpoint occupies on disk: tensor files plus index.
    pub fn total_bytes(&self) -> Result<usize> {
        Ok(self.files()?.iter().map(|(_, b)| b.len()).sum())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (file, bytes) in self.files()? {
            let path = dir.join(file);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(QUANTIZED_INDEX);
        if !path.exists() {
            return Err(Error::MissingArtifact {
                stage: "quantized checkpoint".into(),
                path,
            });
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: QuantizedIndex = serde_json::from_str(&text)?;
        let mut weights = BTreeMap::new();
        for e in index.weights {
            let (shape, values) = read_tensor(dir.join(format!("{}.edgt", e.name)))?.into_i8()?;
            if shape != e.shape {
                return Err(Error::invalid(format!("tensor {} does not match its index shape", e.name)));
            }
            weights.insert(
                e.name,
                QuantizedTensor {
                    shape,
                    values,
                    scale: e.scale,
                    zero_point: e.zero_point,
                    flagged: e.flagged,
                },
            );
        }
        let mut buffers = TensorMap::new();
        for name in index.buffers {
            let t = read_tensor(dir.join(format!("{name}.edgt")))?.into_f32()?;
            buffers.insert(name, t.cast());
        }
        Ok(Self {
            config: index.config,
            classes: index.classes,
            weights,
            buffers,
            activations: index.activations,
        })
    }

    /// Weights dequantized from integer storage, plus buffers.
    pub fn dequantized_params<T: Scalar>(&self) -> TensorMap<T> {
        let mut params: TensorMap<T> = self.weights.iter().map(|(k, q)| (k.clone(), dequantize(q))).collect();
        params.extend(self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())));
        params
    }

    pub fn weight_count(&self) -> usize {
        self.weights.values().map(|q| q.values.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub weight_tensors: usize,
    pub fp32_payload_bytes: usize,
    pub int8_payload_bytes: usize,
    /// `int8_payload_bytes / fp32_payload_bytes`, 0.25 by construction.
    pub payload_ratio: f64,
    /// FP32 tensor files (weights and buffers) with their headers.
    pub fp32_total_bytes: usize,
    /// Every file of the quantized checkpoint, index included.
    pub int8_total_bytes: usize,
    pub total_ratio: f64,
    pub flagged_tensors: Vec<String>,
    pub calibration_utterances: usize,
}

/// Inference stack whose layer outputs get activation grids.
pub fn inference_stack(cfg: &TrainConfig, classes: usize) -> Result<Sequential> {
    match cfg.kind {
        kind if kind.is_linguistic() => cfg.feature_stack(),
        _ => Ok(ParalinguisticModel::<f64>::stack_with_head(cfg.embedder(), classes)),
    }
}

/// Quantizes every trainable tensor symmetrically and calibrates affine
/// activation grids from min/max over `calibration` waveforms.
pub fn quantize_model(ckpt: &Checkpoint, calibration: &[Vec<f32>]) -> Result<(QuantizedCheckpoint, SizeReport)> {
    if calibration.is_empty() {
        return Err(Error::invalid("calibration batch is empty"));
    }
    let mut weights = BTreeMap::new();
    let mut buffers = TensorMap::new();
    for (name, t) in &ckpt.params {
        if is_trainable(name) {
            weights.insert(name.clone(), quantize_int8(t, QuantMode::Symmetric)?);
        } else {
            buffers.insert(name.clone(), t.clone());
        }
    }

    let stack = inference_stack(&ckpt.config, ckpt.classes)?;
    let prepare = input_preparer(ckpt)?;
    let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); stack.layers.len()];
    for wave in calibration {
        let x = prepare(wave)?;
        for (r, out) in ranges.iter_mut().zip(stack.trace(&ckpt.params, &x)?) {
            let (lo, hi) = out.min_max();
            *r = (r.0.min(lo), r.1.max(hi));
        }
    }
    let activations = ranges
        .iter()
        .enumerate()
        .map(|(i, &(lo, hi))| ActivationRange::new(i, lo, hi))
        .collect();

    let q = QuantizedCheckpoint {
        config: ckpt.config.clone(),
        classes: ckpt.classes,
        weights,
        buffers,
        activations,
    };
    let weight_count = q.weight_count();
    let fp32_total_bytes = ckpt
        .params
        .values()
        .map(|t| StoredTensor::F32(t.cast()).encoded_len())
        .sum();
    let int8_total_bytes = q.total_bytes()?;
    let report = SizeReport {
        weight_tensors: q.weights.len(),
        fp32_payload_bytes: weight_count * 4,
        int8_payload_bytes: weight_count,
        payload_ratio: weight_count as f64 / (weight_count * 4) as f64,
        fp32_total_bytes,
        int8_total_bytes,
        total_ratio: int8_total_bytes as f64 / fp32_total_bytes as f64,
        flagged_tensors: q.weights.iter().filter(|(_, t)| t.flagged).map(|(k, _)| k.clone()).collect(),
        calibration_utterances: calibration.len(),
    };
    Ok((q, report))
}

fn input_preparer(ckpt: &Checkpoint) -> Result<Box<dyn Fn(&[f32]) -> Result<Tensor<f64>>>> {
    if ckpt.config.kind.is_linguistic() {
        let model = LinguisticModel::<f64>::from_checkpoint(ckpt)?;
        Ok(Box::new(move |w| model.prepare(w)))
    } else {
        let model = ParalinguisticModel::<f64>::from_checkpoint(ckpt)?;
        Ok(Box::new(move |w| model.mel(w)))
    }
}

/// Up to [`CALIBRATION_UTTERANCES`] waveforms from the training split of
/// `corpus`, in manifest order.
pub fn calibration_batch(corpus: &Corpus, train_fraction: f64, seed: u64) -> Result<Vec<Vec<f32>>> {
    let (train_idx, _) = train_test_split(corpus.records.len(), train_fraction, seed);
    train_idx
        .iter()
        .take(CALIBRATION_UTTERANCES)
        .map(|&i| corpus.load_waveform(&corpus.records[i]))
        .collect()
}

/// Either precision of a checkpoint directory.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyCheckpoint {
    Fp32(Checkpoint),
    Int8(QuantizedCheckpoint),
}

impl AnyCheckpoint {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        if dir.join(QUANTIZED_INDEX).exists() {
            Ok(AnyCheckpoint::Int8(QuantizedCheckpoint::load(dir)?))
        } else if dir.join(CHECKPOINT_INDEX).exists() {
            Ok(AnyCheckpoint::Fp32(Checkpoint::load(dir)?))
        } else {
            Err(Error::MissingArtifact {
                stage: "checkpoint".into(),
                path: dir.join(CHECKPOINT_INDEX),
            })
        }
    }

    pub fn config(&self) -> &TrainConfig {
        match self {
            AnyCheckpoint::Fp32(c) => &c.config,
            AnyCheckpoint::Int8(q) => &q.config,
        }
    }

    pub fn precision(&self) -> &'static str {
        match self {
            AnyCheckpoint::Fp32(_) => "fp32",
            AnyCheckpoint::Int8(_) => "int8",
        }
    }

    pub fn linguistic<T: Scalar>(&self) -> Result<LinguisticModel<T>> {
        match self {
            AnyCheckpoint::Fp32(c) => LinguisticModel::from_checkpoint(c),
            AnyCheckpoint::Int8(q) => LinguisticModel::from_quantized(q),
        }
    }

    pub fn paralinguistic<T: Scalar>(&self) -> Result<ParalinguisticModel<T>> {
        match self {
            AnyCheckpoint::Fp32(c) => ParalinguisticModel::from_checkpoint(c),
            AnyCheckpoint::Int8(q) => ParalinguisticModel::from_quantized(q),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub teacher_params: usize,
    pub student_params: usize,
    pub param_ratio: f64,
    pub teacher_accuracy: f64,
    pub student_accuracy: f64,
    pub test_utterances: usize,
    /// Best of three passes over the test split, per utterance.
    pub teacher_ms_per_utterance: f64,
    pub student_ms_per_utterance: f64,
    /// Teacher time over student time.
    pub speedup: f64,
    pub teacher_unchanged: bool,
}

/// Trains a student against the frozen teacher in `teacher_dir` and compares
/// both on the held-out speaker task.
pub fn distill(teacher_dir: impl AsRef<Path>, student_cfg: &TrainConfig, corpus: &Corpus) -> Result<(Checkpoint, DistillReport)> {
    let teacher_dir = teacher_dir.as_ref();
    let before = dir_bytes(teacher_dir)?;
    let teacher_ckpt = Checkpoint::load(teacher_dir)?;
    let mut cfg = student_cfg.clone();
    cfg.kind = ModelKind::DistillStudent;
    cfg.teacher = Some(teacher_dir.to_path_buf());
    let student_ckpt = train(&cfg, corpus)?;
    let teacher_unchanged = dir_bytes(teacher_dir)? == before;

    let teacher = ParalinguisticModel::<f32>::from_checkpoint(&teacher_ckpt)?;
    let student = ParalinguisticModel::<f32>::from_checkpoint(&student_ckpt)?;
    let (_, test) = train_test_split(corpus.records.len(), cfg.train_fraction, cfg.seed);
    let mels = test
        .iter()
        .map(|&i| teacher.mel(&corpus.load_waveform(&corpus.records[i])?))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = test.iter().map(|&i| corpus.records[i].speaker_id).collect();
    let (teacher_accuracy, teacher_ms) = timed_accuracy(&teacher, &mels, &labels)?;
    let (student_accuracy, student_ms) = timed_accuracy(&student, &mels, &labels)?;
    let report = DistillReport {
        teacher_params: teacher.param_count(),
        student_params: student.param_count(),
        param_ratio: student.param_count() as f64 / teacher.param_count() as f64,
        teacher_accuracy,
        student_accuracy,
        test_utterances: labels.len(),
        teacher_ms_per_utterance: teacher_ms,
        student_ms_per_utterance: student_ms,
        speedup: teacher_ms / student_ms,
        teacher_unchanged,
    };
    Ok((student_ckpt, report))
}

fn timed_accuracy(model: &ParalinguisticModel<f32>, mels: &[Tensor<f32>], labels: &[usize]) -> Result<(f64, f64)> {
    let mut best = f64::INFINITY;
    let mut correct = 0;
    for _ in 0..3 {
        let start = Instant::now();
        correct = 0;
        for (mel, &label) in mels.iter().zip(labels) {
            correct += usize::from(model.classify_mel(mel)? == label);
        }
        best = best.min(start.elapsed().as_secs_f64());
    }
    let n = labels.len().max(1) as f64;
    Ok((correct as f64 / n, best * 1e3 / n))
}

fn dir_bytes(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() {
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            out.insert(path, bytes);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, Layer, Padding};
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn symmetric_example() {
        let q = quantize_int8(&Tensor::vector(vec![-1.0f64, 0.0, 1.0]), QuantMode::Symmetric).unwrap();
        assert_eq!(q.scale, 1.0 / 127.0);
        assert_eq!(q.zero_point, 0);
        assert_eq!(q.values, vec![-127, 0, 127]);
        assert!(!q.flagged);
    }

    #[test]
    fn affine_grid_matches_formula() {
        let q = quantize_int8(&Tensor::vector(vec![-0.3f64, 0.2, 1.0]), QuantMode::Affine).unwrap();
        let scale = 1.3 / 255.0;
        assert_eq!(q.scale, scale);
        assert_eq!(q.zero_point, (0.3f64 / scale).round() as i32 - 128);
        assert_eq!(q.values[0], -128);
        assert_eq!(q.values[2], 127);
    }

    #[test]
    fn all_zero_tensor_is_flagged() {
        for mode in [QuantMode::Symmetric, QuantMode::Affine] {
            let q = quantize_int8(&Tensor::<f64>::zeros(&[3, 4]), mode).unwrap();
            assert!(q.flagged);
            assert_eq!(q.scale, 1.0);
            assert!(q.values.iter().all(|&v| v as i32 == q.zero_point));
        }
    }

    #[test]
    fn non_finite_is_rejected() {
        assert!(quantize_int8(&Tensor::vector(vec![1.0f64, f64::NAN]), QuantMode::Symmetric).is_err());
    }

    #[test]
    fn dequantize_examples() {
        let q = QuantizedTensor {
            shape: vec![2],
            values: vec![127, 5],
            scale: 1.0 / 127.0,
            zero_point: 5,
            flagged: false,
        };
        let t: Tensor<f64> = dequantize(&q);
        assert!((t.data()[0] - 122.0 / 127.0).abs() < 1e-15);
        assert_eq!(t.data()[1], 0.0);
        let q = QuantizedTensor { zero_point: 0, ..q };
        assert!((dequantize::<f64>(&q).data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn roundtrip_error_is_within_half_a_step() {
        let mut rng = Rng::new(7);
        for case in 0..1000 {
            let n = 1 + rng.below(40);
            let spread = 10f64.powf(rng.uniform(-3.0, 3.0));
            let data: Vec<f64> = (0..n).map(|_| rng.normal() * spread + rng.uniform(-1.0, 1.0) * spread).collect();
            let t = Tensor::vector(data);
            let mode = if case % 2 == 0 { QuantMode::Symmetric } else { QuantMode::Affine };
            let q = quantize_int8(&t, mode).unwrap();
            let back: Tensor<f64> = dequantize(&q);
            for (a, b) in t.data().iter().zip(back.data()) {
                assert!((a - b).abs() <= q.scale / 2.0 * (1.0 + 1e-9), "{mode:?} {a} {b} {}", q.scale);
            }
        }
    }

    proptest! {
        #[test]
        fn quantization_is_monotone(mut xs in prop::collection::vec(-100.0f64..100.0, 2..50), affine in any::<bool>()) {
            xs.sort_by(f64::total_cmp);
            let mode = if affine { QuantMode::Affine } else { QuantMode::Symmetric };
            let q = quantize_int8(&Tensor::vector(xs), mode).unwrap();
            prop_assert!(q.values.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn requantizing_the_grid_is_a_fixed_point(xs in prop::collection::vec(-5.0f64..5.0, 1..40), affine in any::<bool>()) {
            let mode = if affine { QuantMode::Affine } else { QuantMode::Symmetric };
            let q = quantize_int8(&Tensor::vector(xs), mode).unwrap();
            let again = quantize_int8(&dequantize::<f64>(&q), mode).unwrap();
            prop_assert_eq!(&again.values, &q.values);
            prop_assert_eq!(again.zero_point, q.zero_point);
            prop_assert!((again.scale - q.scale).abs() <= q.scale * 1e-12);
        }

        #[test]
        fn zero_point_dequantizes_to_zero(xs in prop::collection::vec(-5.0f64..5.0, 1..40)) {
            let q = quantize_int8(&Tensor::vector(xs), QuantMode::Affine).unwrap();
            prop_assert!((-128..=127).contains(&q.zero_point));
            prop_assert_eq!(q.grid().dequantize(q.zero_point as i8), 0.0);
        }
    }

    /// Worst-case output deviation of `relu(x W1 + b1) W2 + b2` when every
    /// weight and bias may move by half its quantization step, by interval
    /// arithmetic on the hidden layer.
    fn interval_bound(x: &[f64], params: &TensorMap<f64>, steps: &BTreeMap<String, f64>, hidden: usize, out: usize) -> f64 {
        let d = x.len();
        let (w1, b1) = (params["l1.w"].data(), params["l1.b"].data());
        let (w2, b2) = (params["l2.w"].data(), params["l2.b"].data());
        let (e_w1, e_b1) = (steps["l1.w"] / 2.0, steps["l1.b"] / 2.0);
        let (e_w2, e_b2) = (steps["l2.w"] / 2.0, steps["l2.b"] / 2.0);
        let mut lo = vec![0.0; hidden];
        let mut hi = vec![0.0; hidden];
        for j in 0..hidden {
            let pre: f64 = b1[j] + (0..d).map(|i| x[i] * w1[i * hidden + j]).sum::<f64>();
            let radius = e_b1 + (0..d).map(|i| x[i].abs() * e_w1).sum::<f64>();
            lo[j] = (pre - radius).max(0.0);
            hi[j] = (pre + radius).max(0.0);
        }
        let mut worst: f64 = 0.0;
        for k in 0..out {
            let exact: f64 = b2[k] + (0..hidden).map(|j| (b1[j] + (0..d).map(|i| x[i] * w1[i * hidden + j]).sum::<f64>()).max(0.0) * w2[j * out + k]).sum::<f64>();
            // extremes of sum_j h_j * (w + e) over h in [lo, hi], e in [-e_w2, e_w2]
            let mut min = b2[k] - e_b2;
            let mut max = b2[k] + e_b2;
            for j in 0..hidden {
                let (wl, wh) = (w2[j * out + k] - e_w2, w2[j * out + k] + e_w2);
                let corners = [lo[j] * wl, lo[j] * wh, hi[j] * wl, hi[j] * wh];
                min += corners.iter().copied().fold(f64::INFINITY, f64::min);
                max += corners.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            }
            worst = worst.max((max - exact).abs()).max((exact - min).abs());
        }
        worst
    }

    #[test]
    fn quantized_toy_model_stays_within_interval_bound() {
        let (d, hidden, out) = (6, 10, 3);
        let stack = Sequential::new(vec![Layer::linear("l1", d, hidden), Layer::Relu, Layer::linear("l2", hidden, out)]);
        for seed in 0..20 {
            let mut rng = Rng::new(seed);
            let params = init_params(&stack.param_specs(), &mut rng);
            let quantized: BTreeMap<String, QuantizedTensor> =
                params.iter().map(|(k, v)| (k.clone(), quantize_int8(v, QuantMode::Symmetric).unwrap())).collect();
            let steps: BTreeMap<String, f64> = quantized.iter().map(|(k, q)| (k.clone(), q.scale)).collect();
            let deq: TensorMap<f64> = quantized.iter().map(|(k, q)| (k.clone(), dequantize(q))).collect();
            for _ in 0..10 {
                let x: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
                let input = Tensor::new(vec![1, d], x.clone()).unwrap();
                let exact = stack.apply(&params, &input).unwrap();
                let approx = stack.apply(&deq, &input).unwrap();
                let dev = exact.data().iter().zip(approx.data()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                let bound = interval_bound(&x, &params, &steps, hidden, out);
                assert!(dev <= bound + 1e-12, "seed {seed}: deviation {dev} exceeds bound {bound}");
                // per-layer Lipschitz form: sum over layers of step * input norm * fan-out gain
                let l1 = (steps["l1.w"] / 2.0) * x.iter().map(|v| v.abs()).sum::<f64>() + steps["l1.b"] / 2.0;
                let w2_abs = (0..hidden).map(|j| (0..out).map(|k| params["l2.w"].data()[j * out + k].abs() + steps["l2.w"] / 2.0).fold(0.0, f64::max)).sum::<f64>();
                let h_abs: f64 = stack.trace(&params, &input).unwrap()[1].data().iter().map(|v| v.abs()).sum();
                let lipschitz = l1 * w2_abs + (steps["l2.w"] / 2.0) * h_abs + steps["l2.b"] / 2.0;
                assert!(dev <= lipschitz + 1e-12, "seed {seed}: deviation {dev} exceeds Lipschitz bound {lipschitz}");
            }
        }
    }

    #[test]
    fn activation_grids_snap_layer_outputs() {
        let stack = Sequential::new(vec![Layer::conv("c", 2, 3, 1, 1, Padding::Same), Layer::Relu]);
        let params = init_params(&stack.param_specs(), &mut Rng::new(3));
        let x = Tensor::new(vec![4, 2], vec![0.5, -1.0, 2.0, 0.1, -0.3, 0.7, 1.2, -2.0]).unwrap();
        let exact = stack.apply(&params, &x).unwrap();
        let (lo, hi) = exact.min_max();
        let range = ActivationRange::new(1, lo, hi);
        let out = apply_int8(&stack, &params, &x, &[range]).unwrap();
        for (a, b) in exact.data().iter().zip(out.data()) {
            assert!((a - b).abs() <= range.scale / 2.0 + 1e-12);
            assert_eq!(range.grid().fake_quant(*b), *b);
        }
    }

    #[test]
    fn empty_calibration_is_an_error() {
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::new(ModelKind::VqVae)
        };
        let ckpt = Checkpoint {
            params: init_params(&cfg.vqvae().param_specs(), &mut Rng::new(0)),
            config: cfg,
            steps: 0,
            final_loss: None,
            history: Vec::new(),
            classes: 8,
        };
        assert!(quantize_model(&ckpt, &[]).is_err());
        let wave: Vec<f32> = (0..4000).map(|i| (i as f32 * 0.05).sin() * 0.3).collect();
        let (q, report) = quantize_model(&ckpt, &[wave]).unwrap();
        assert_eq!(report.int8_payload_bytes * 4, report.fp32_payload_bytes);
        assert_eq!(report.payload_ratio, 0.25);
        assert_eq!(q.weights.len(), ckpt.params.keys().filter(|k| is_trainable(k)).count());
        let dir = tempfile::tempdir().unwrap();
        q.save(dir.path()).unwrap();
        let on_disk: u64 = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().metadata().unwrap().len()).sum();
        assert_eq!(on_disk as usize, report.int8_total_bytes);
        assert_eq!(QuantizedCheckpoint::load(dir.path()).unwrap(), q);
    }
}
