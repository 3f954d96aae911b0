//! Attribute-inference probes: shallow classifiers on frozen representations,
//! with leakage reported as accuracy above chance.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, TensorMap};
use crate::corpus::{UtteranceRecord, SEGMENT_SAMPLES};
use crate::dsp::{HOP, WINDOW};
use crate::error::{Error, Result};
use crate::evalmetrics::one_hot;
use crate::nn::{init_params, Layer, Sequential};
use crate::optim::{Adam, AdamConfig};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::{argmax, train_test_split, ParalinguisticModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeKind {
    #[default]
    Logistic,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub kind: ProbeKind,
    /// Hidden width of the MLP probe.
    pub hidden: usize,
    /// Full-batch optimizer steps.
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub train_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            kind: ProbeKind::Logistic,
            hidden: 32,
            epochs: 300,
            learning_rate: 1e-2,
            seed: 0,
            train_fraction: 0.75,
        }
    }
}

impl ProbeConfig {
    fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) || !(self.learning_rate > 0.0) {
            return Err(Error::invalid("probe needs split in (0, 1) and a positive learning rate"));
        }
        if self.kind == ProbeKind::Mlp && self.hidden == 0 {
            return Err(Error::invalid("MLP probe needs a hidden width"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub config: ProbeConfig,
    pub classes: usize,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    stack: Sequential,
    pub params: TensorMap<f64>,
}

impl Probe {
    fn standardize(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        standardize(x, &self.mean, &self.inv_std)
    }

    pub fn logits(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        if x.rank() != 2 || x.cols() != self.mean.len() {
            return Err(Error::invalid(format!("probe expects width {}, got {:?}", self.mean.len(), x.shape())));
        }
        self.stack.apply(&self.params, &self.standardize(x)?)
    }

    pub fn predict(&self, x: &Tensor<f64>) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
    }
}

fn standardize(x: &Tensor<f64>, mean: &[f64], inv: &[f64]) -> Result<Tensor<f64>> {
    let d = mean.len();
    Tensor::new(
        x.shape().to_vec(),
        x.data().iter().enumerate().map(|(k, v)| (v - mean[k % d]) * inv[k % d]).collect(),
    )
}

/// Trains a probe on every row of `x`.
pub fn train_probe(x: &Tensor<f64>, labels: &[usize], cfg: &ProbeConfig) -> Result<Probe> {
    cfg.validate()?;
    if x.rank() != 2 || x.rows() != labels.len() || x.rows() == 0 {
        return Err(Error::invalid(format!("{} labels for features {:?}", labels.len(), x.shape())));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut present = vec![false; classes];
    labels.iter().for_each(|&l| present[l] = true);
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::invalid("probe needs at least two classes"));
    }
    let (n, d) = (x.rows(), x.cols());
    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x.row(i)[j]).sum::<f64>() / n as f64).collect();
    let inv_std: Vec<f64> = (0..d)
        .map(|j| {
            let var = (0..n).map(|i| (x.row(i)[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
            if var > 1e-12 {
                1.0 / var.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let stack = match cfg.kind {
        ProbeKind::Logistic => Sequential::new(vec![Layer::linear("probe.out", d, classes)]),
        ProbeKind::Mlp => Sequential::new(vec![
            Layer::linear("probe.hidden", d, cfg.hidden),
            Layer::Relu,
            Layer::linear("probe.out", cfg.hidden, classes),
        ]),
    };
    let mut params = init_params(&stack.param_specs(), &mut Rng::new(cfg.seed));

    let mut g = Graph::new();
    let input = g.constant(standardize(x, &mean, &inv_std)?);
    let logits = stack.lower(&mut g, input)?;
    let ls = g.log_softmax(logits)?;
    let picked = g.gather(ls, labels.iter().enumerate().map(|(i, &l)| i * classes + l).collect(), &[n])?;
    let loss = g.mean(picked)?;
    let loss = g.scale(loss, -1.0)?;
    let mut opt = Adam::new(AdamConfig::new(cfg.learning_rate));
    for step in 0..cfg.epochs {
        let eval = g.evaluate(&params, &TensorMap::new())?;
        if !eval.scalar(loss).is_finite() {
            return Err(Error::NanLoss { step });
        }
        let grads = g.backward(&eval, loss)?;
        opt.step(&mut params, grads.params());
    }
    Ok(Probe {
        config: cfg.clone(),
        classes,
        mean,
        inv_std,
        stack,
        params,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub attribute: String,
    pub representation: String,
    pub accuracy: f64,
    pub chance: f64,
    /// `accuracy - chance`.
    pub leakage: f64,
    pub classes: usize,
    /// False when class counts differ; chance is then the majority share.
    pub balanced: bool,
    pub train_items: usize,
    pub test_items: usize,
}

/// Scores `probe` on held-out rows.
pub fn leakage_score(probe: &Probe, x: &Tensor<f64>, labels: &[usize], attribute: &str, representation: &str) -> Result<LeakageReport> {
    if labels.is_empty() || labels.len() != x.rows() {
        return Err(Error::invalid("leakage scoring needs one label per test row"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= probe.classes) {
        return Err(Error::invalid(format!("label {bad} was never seen by the {}-class probe", probe.classes)));
    }
    let predicted = probe.predict(x)?;
    let correct = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    let accuracy = correct as f64 / labels.len() as f64;
    Ok(report(accuracy, labels, probe.classes, attribute, representation, 0))
}

fn report(accuracy: f64, labels: &[usize], classes: usize, attribute: &str, representation: &str, train_items: usize) -> LeakageReport {
    let mut counts = vec![0usize; classes];
    labels.iter().for_each(|&l| counts[l] += 1);
    let present: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
    let balanced = present.windows(2).all(|w| w[0] == w[1]) && present.len() == classes;
    let chance = if balanced {
        1.0 / classes as f64
    } else {
        *counts.iter().max().unwrap_or(&0) as f64 / labels.len() as f64
    };
    LeakageReport {
        attribute: attribute.into(),
        representation: representation.into(),
        accuracy,
        chance,
        leakage: accuracy - chance,
        classes,
        balanced,
        train_items,
        test_items: labels.len(),
    }
}

/// Split, train, score. Chance uses the class balance of the full item set,
/// which is exact for the balanced synthetic corpus.
pub fn probe_attribute(x: &Tensor<f64>, labels: &[usize], cfg: &ProbeConfig, attribute: &str, representation: &str) -> Result<LeakageReport> {
    let (train, test) = train_test_split(x.rows(), cfg.train_fraction, cfg.seed);
    let rows = |idx: &[usize]| -> Result<Tensor<f64>> {
        Tensor::from_rows(&idx.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>())
    };
    let pick = |idx: &[usize]| -> Vec<usize> { idx.iter().map(|&i| labels[i]).collect() };
    let probe = train_probe(&rows(&train)?, &pick(&train), cfg)?;
    let test_labels = pick(&test);
    let mut r = leakage_score(&probe, &rows(&test)?, &test_labels, attribute, representation)?;
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(probe.classes);
    let full = report(r.accuracy, labels, classes, attribute, representation, train.len());
    r.chance = full.chance;
    r.balanced = full.balanced;
    r.classes = classes;
    r.leakage = r.accuracy - r.chance;
    r.train_items = train.len();
    Ok(r)
}

/// Normalized histogram of unit indices.
pub fn unit_histogram(units: &[usize], codes: usize) -> Vec<f64> {
    let mut h = vec![0.0; codes];
    for &u in units {
        if u < codes {
            h[u] += 1.0;
        }
    }
    let n = units.len().max(1) as f64;
    h.iter_mut().for_each(|v| *v /= n);
    h
}

/// Splits a frame sequence at the content-segment boundaries of its
/// utterance: frame `t` (centre `offset + t * period` samples) belongs to
/// segment `centre / segment_samples`. Returns `(segment index, frames)`.
pub fn segment_frames(frames: usize, period: usize, offset: usize, segment_samples: usize, segments: usize) -> Vec<(usize, Vec<usize>)> {
    let mut out: Vec<(usize, Vec<usize>)> = (0..segments).map(|s| (s, Vec::new())).collect();
    for t in 0..frames {
        let s = (offset + t * period) / segment_samples;
        if s < segments {
            out[s].1.push(t);
        }
    }
    out.retain(|(_, f)| !f.is_empty());
    out
}

/// Probe inputs for one representation: segment-level content items and
/// utterance-level speaker items.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSets {
    pub content_x: Tensor<f64>,
    pub content_y: Vec<usize>,
    pub speaker_x: Tensor<f64>,
    pub speaker_y: Vec<usize>,
}

impl ProbeSets {
    /// `frames[i]` is utterance `i`'s frame sequence (one-hot rows for
    /// units). Content items average the frames of each symbol segment,
    /// speaker items the whole utterance; for one-hot rows both averages are
    /// the normalized unit histograms.
    pub fn from_frames(records: &[UtteranceRecord], frames: &[Tensor<f64>], period: usize, offset: usize) -> Result<Self> {
        if records.len() != frames.len() || records.is_empty() {
            return Err(Error::invalid("probe sets need one frame sequence per utterance"));
        }
        let mean_of = |f: &Tensor<f64>, rows: &[usize]| -> Vec<f64> {
            let mut m = vec![0.0; f.cols()];
            for &t in rows {
                m.iter_mut().zip(f.row(t)).for_each(|(a, b)| *a += b);
            }
            m.iter_mut().for_each(|v| *v /= rows.len() as f64);
            m
        };
        let (mut cx, mut cy, mut sx, mut sy) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (record, f) in records.iter().zip(frames) {
            if f.rank() != 2 || f.rows() == 0 {
                return Err(Error::invalid(format!("utterance {} has no frames", record.id)));
            }
            let all: Vec<usize> = (0..f.rows()).collect();
            sx.push(mean_of(f, &all));
            sy.push(record.speaker_id);
            for (s, rows) in segment_frames(f.rows(), period, offset, SEGMENT_SAMPLES, record.content_symbols.len()) {
                cx.push(mean_of(f, &rows));
                cy.push(record.content_symbols[s]);
            }
        }
        Ok(Self {
            content_x: Tensor::from_rows(&cx)?,
            content_y: cy,
            speaker_x: Tensor::from_rows(&sx)?,
            speaker_y: sy,
        })
    }

    pub fn from_units(records: &[UtteranceRecord], units: &[Vec<usize>], codes: usize, period: usize, offset: usize) -> Result<Self> {
        let frames = units.iter().map(|u| one_hot(u, codes)).collect::<Result<Vec<_>>>()?;
        Self::from_frames(records, &frames, period, offset)
    }

    /// Utterance embeddings for speaker items, and one embedding per symbol
    /// segment (from that segment's mel frames) for content items.
    pub fn from_embedder<T: Scalar>(records: &[UtteranceRecord], waves: &[Vec<f32>], model: &ParalinguisticModel<T>) -> Result<Self> {
        if records.len() != waves.len() || records.is_empty() {
            return Err(Error::invalid("probe sets need one waveform per utterance"));
        }
        let as_f64 = |v: Vec<T>| v.into_iter().map(|x| x.as_f64()).collect::<Vec<f64>>();
        let (mut cx, mut cy, mut sx, mut sy) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (record, wave) in records.iter().zip(waves) {
            let mel = model.mel(wave)?;
            sx.push(as_f64(model.embed_mel(&mel)?));
            sy.push(record.speaker_id);
            for (s, rows) in segment_frames(mel.rows(), HOP, WINDOW / 2, SEGMENT_SAMPLES, record.content_symbols.len()) {
                let data = rows.iter().flat_map(|&t| mel.row(t).iter().copied()).collect();
                let seg = Tensor::new(vec![rows.len(), mel.cols()], data)?;
                cx.push(as_f64(model.embed_mel(&seg)?));
                cy.push(record.content_symbols[s]);
            }
        }
        Ok(Self {
            content_x: Tensor::from_rows(&cx)?,
            content_y: cy,
            speaker_x: Tensor::from_rows(&sx)?,
            speaker_y: sy,
        })
    }

    pub fn probe(&self, attribute: Attribute, cfg: &ProbeConfig, representation: &str) -> Result<LeakageReport> {
        match attribute {
            Attribute::Content => probe_attribute(&self.content_x, &self.content_y, cfg, "content", representation),
            Attribute::Speaker => probe_attribute(&self.speaker_x, &self.speaker_y, cfg, "speaker", representation),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Attribute {
    Speaker,
    Content,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n: usize, seed: u64) -> (Tensor<f64>, Vec<usize>) {
        let mut rng = Rng::new(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 2;
            rows.push(vec![if c == 0 { -3.0 } else { 3.0 } + rng.normal() * 0.5, rng.normal()]);
            labels.push(c);
        }
        (Tensor::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn separable_blobs_are_learned() {
        let (x, y) = blobs(80, 1);
        for kind in [ProbeKind::Logistic, ProbeKind::Mlp] {
            let cfg = ProbeConfig { kind, ..ProbeConfig::default() };
            let probe = train_probe(&x, &y, &cfg).unwrap();
            let r = leakage_score(&probe, &x, &y, "blob", "raw").unwrap();
            assert_eq!(r.accuracy, 1.0, "{kind:?}");
        }
    }

    #[test]
    fn constant_features_give_majority_share() {
        let x = Tensor::full(&[10, 3], 2.0);
        let y = vec![0, 1, 1, 1, 0, 1, 1, 0, 1, 1];
        let probe = train_probe(&x, &y, &ProbeConfig::default()).unwrap();
        let r = leakage_score(&probe, &x, &y, "a", "const").unwrap();
        assert!((r.accuracy - 0.7).abs() < 1e-12);
        assert!(!r.balanced);
        assert!((r.chance - 0.7).abs() < 1e-12);
    }

    #[test]
    fn probes_are_deterministic() {
        let (x, y) = blobs(40, 2);
        let cfg = ProbeConfig {
            kind: ProbeKind::Mlp,
            ..ProbeConfig::default()
        };
        assert_eq!(train_probe(&x, &y, &cfg).unwrap(), train_probe(&x, &y, &cfg).unwrap());
    }

    #[test]
    fn errors() {
        let x = Tensor::zeros(&[4, 2]);
        assert!(train_probe(&x, &[1, 1, 1, 1], &ProbeConfig::default()).is_err());
        let (x, y) = blobs(20, 3);
        let probe = train_probe(&x, &y, &ProbeConfig::default()).unwrap();
        assert!(leakage_score(&probe, &x, &vec![2; 20], "a", "r").is_err());
    }

    #[test]
    fn leakage_arithmetic() {
        let r = report(0.5, &[0, 1, 0, 1], 2, "a", "r", 0);
        assert_eq!(r.leakage, 0.0);
        let r = report(0.9, &[0, 1, 0, 1], 2, "a", "r", 0);
        assert!((r.leakage - 0.4).abs() < 1e-12);
    }

    #[test]
    fn histogram_and_segments() {
        assert_eq!(unit_histogram(&[0, 2, 2, 1], 3), vec![0.25, 0.25, 0.5]);
        // 10 ms frames over two 100 ms segments
        let segs = segment_frames(20, 160, 80, 1600, 2);
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].1, (0..10).collect::<Vec<_>>());
        assert_eq!(segs[1].1, (10..20).collect::<Vec<_>>());
    }

    #[test]
    fn unit_probe_items_are_histograms() {
        let record = UtteranceRecord {
            id: "u".into(),
            waveform_path: "u.edgt".into(),
            speaker_id: 1,
            content_symbols: vec![4, 7],
            duration_s: 0.2,
        };
        let units = vec![0, 0, 1, 2, 2, 2];
        let sets = ProbeSets::from_units(&[record], &[units.clone()], 3, 3200 / 6, 3200 / 12).unwrap();
        assert_eq!(sets.content_y, vec![4, 7]);
        assert_eq!(sets.content_x.row(0), unit_histogram(&units[..3], 3).as_slice());
        assert_eq!(sets.content_x.row(1), unit_histogram(&units[3..], 3).as_slice());
        assert_eq!(sets.speaker_x.row(0), unit_histogram(&units, 3).as_slice());
        assert_eq!(sets.speaker_y, vec![1]);
    }
}
