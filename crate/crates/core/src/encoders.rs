//! Encoder families: a strided convolutional waveform encoder with a recurrent
//! context network and linear future predictors, a mel-domain VQ-VAE, and a
//! time-pooled utterance embedder.

use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, TensorMap};
use crate::dsp::N_MELS;
use crate::error::{Error, Result};
use crate::nn::{Layer, Padding, Sequential, RMS_EPS};
use crate::scalar::Scalar;
use crate::tensor::{nearest_row, Tensor};

pub const CPC_KERNELS: [usize; 5] = [10, 8, 4, 4, 4];
pub const CPC_STRIDES: [usize; 5] = [5, 4, 2, 2, 2];
/// Product of [`CPC_STRIDES`]: one frame per 10 ms at 16 kHz.
pub const CPC_DOWNSAMPLE: usize = 160;
pub const EMBED_DIM: usize = 512;
pub const MEL_NORM: &str = "frontend.mel";
pub const VQ_COND: &str = "vq.cond";
pub const CODEBOOK: &str = "vq.codebook";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpcEncoder {
    pub hidden: usize,
}

impl Default for CpcEncoder {
    fn default() -> Self {
        Self { hidden: 64 }
    }
}

impl CpcEncoder {
    pub fn stack(&self) -> Sequential {
        let mut layers = Vec::new();
        let mut c_in = 1;
        for (i, (&k, &s)) in CPC_KERNELS.iter().zip(&CPC_STRIDES).enumerate() {
            if i > 0 {
                layers.push(Layer::Relu);
            }
            layers.push(Layer::conv(format!("cpc.enc.{i}"), c_in, self.hidden, k, s, Padding::Same));
            c_in = self.hidden;
        }
        Sequential::new(layers)
    }

    pub fn output_len(len: usize) -> usize {
        len.div_ceil(CPC_DOWNSAMPLE)
    }

    /// Input samples (inclusive, clipped to the signal) that can influence
    /// output frame `t` for a signal of `len` samples.
    pub fn receptive_field(len: usize, t: usize) -> RangeInclusive<usize> {
        let mut lens = vec![len];
        let mut pads = Vec::new();
        for (&k, &s) in CPC_KERNELS.iter().zip(&CPC_STRIDES) {
            let cur = *lens.last().expect("non-empty");
            pads.push(Padding::Same.resolve(cur, k, s).0);
            lens.push(cur.div_ceil(s));
        }
        let (mut lo, mut hi) = (t as i64, t as i64);
        for i in (0..CPC_KERNELS.len()).rev() {
            let (k, s, l) = (CPC_KERNELS[i] as i64, CPC_STRIDES[i] as i64, pads[i] as i64);
            lo = lo * s - l;
            hi = hi * s - l + k - 1;
        }
        let lo = lo.max(0) as usize;
        let hi = (hi.max(0) as usize).min(len - 1);
        lo..=hi
    }
}

/// Causal recurrent context network over encoder frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextAggregator {
    pub hidden: usize,
}

impl Default for ContextAggregator {
    fn default() -> Self {
        Self { hidden: 64 }
    }
}

impl ContextAggregator {
    pub fn stack(&self) -> Sequential {
        Sequential::new(vec![Layer::Gru {
            name: "cpc.ctx".into(),
            d_in: self.hidden,
            hidden: self.hidden,
        }])
    }
}

/// `W_1..W_K`, each `hidden × hidden`, bias-free.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpcPredictors {
    pub hidden: usize,
    pub horizon: usize,
}

impl Default for CpcPredictors {
    fn default() -> Self {
        Self { hidden: 64, horizon: 4 }
    }
}

impl CpcPredictors {
    pub fn name(k: usize) -> String {
        format!("cpc.pred.{k}.w")
    }

    pub fn param_specs(&self) -> Vec<(String, Vec<usize>, usize)> {
        (1..=self.horizon)
            .map(|k| (Self::name(k), vec![self.hidden, self.hidden], self.hidden))
            .collect()
    }
}

/// Mel encoder with total downsampling 2 and a mirrored decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqVaeCoder {
    pub hidden: usize,
    pub latent: usize,
    pub codes: usize,
}

impl Default for VqVaeCoder {
    fn default() -> Self {
        Self {
            hidden: 64,
            latent: 64,
            codes: 512,
        }
    }
}

/// Node handles of a lowered VQ-VAE.
#[derive(Debug, Clone, Copy)]
pub struct VqVaeNodes {
    /// Standardized input, the reconstruction target.
    pub target: NodeId,
    pub z_e: NodeId,
    pub z_q: NodeId,
    pub recon: NodeId,
}

impl VqVaeCoder {
    /// Global standardization, per-utterance centering, then per-frame unit
    /// RMS. Centering strips the static spectrum and the RMS step the
    /// speaker-dependent contrast of what remains. The autoencoder both reads
    /// and reconstructs this view of the mel frames.
    pub fn input_view(&self) -> Sequential {
        Sequential::new(vec![
            Layer::Normalize {
                name: MEL_NORM.into(),
                dim: N_MELS,
            },
            Layer::CenterTime,
            Layer::RmsNormalize,
        ])
    }

    /// [`Self::input_view`] followed by the encoder.
    pub fn feature_stack(&self) -> Sequential {
        let mut layers = self.input_view().layers;
        layers.extend(self.encoder().layers);
        Sequential::new(layers)
    }

    pub fn encoder(&self) -> Sequential {
        let h = self.hidden;
        Sequential::new(vec![
            Layer::conv("vq.enc.0", N_MELS, h, 3, 1, Padding::Same),
            Layer::Relu,
            Layer::conv("vq.enc.1", h, h, 3, 1, Padding::Same),
            Layer::Relu,
            Layer::conv("vq.enc.2", h, h, 4, 2, Padding::Same),
            Layer::Relu,
            Layer::conv("vq.enc.3", h, h, 3, 1, Padding::Same),
            Layer::Relu,
            Layer::conv("vq.enc.4", h, self.latent, 1, 1, Padding::Same),
        ])
    }

    pub fn decoder(&self) -> Sequential {
        let h = self.hidden;
        Sequential::new(vec![
            Layer::conv("vq.dec.0", self.latent, h, 3, 1, Padding::Same),
            Layer::Relu,
            Layer::Upsample { factor: 2 },
            Layer::conv("vq.dec.1", h, h, 3, 1, Padding::Same),
            Layer::Relu,
            Layer::conv("vq.dec.2", h, h, 3, 1, Padding::Same),
            Layer::Relu,
            Layer::conv("vq.dec.3", h, h, 3, 1, Padding::Same),
            Layer::Relu,
            Layer::conv("vq.dec.4", h, N_MELS, 3, 1, Padding::Same),
        ])
    }

    /// Projection of the utterance's static spectrum (the per-channel mean
    /// removed by [`Self::input_view`]) added after the first decoder layer, so
    /// the codes need not carry what is constant across the utterance.
    pub fn conditioner(&self) -> Layer {
        Layer::linear(VQ_COND, N_MELS, self.hidden)
    }

    pub fn latent_len(frames: usize) -> usize {
        frames.div_ceil(2)
    }

    pub fn param_specs(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut specs = self.input_view().param_specs();
        specs.extend(self.encoder().param_specs());
        specs.extend(self.decoder().param_specs());
        specs.extend(self.conditioner().params());
        specs.push((CODEBOOK.into(), vec![self.codes, self.latent], self.latent));
        specs
    }

    /// Lowers the full autoencoder onto mel input `x` of shape `[frames, 80]`,
    /// with the codebook as parameter [`CODEBOOK`].
    pub fn lower<T: Scalar>(&self, g: &mut Graph<T>, x: NodeId) -> Result<VqVaeNodes> {
        let frames = g.shape(x)[0];
        let target = self.input_view().lower(g, x)?;
        let z_e = self.encoder().lower(g, target)?;
        let codebook = g.param(CODEBOOK, &[self.codes, self.latent]);
        let z_q = g.nearest_code(z_e, codebook)?;
        let st = g.straight_through(z_e, z_q)?;
        let norm = Layer::Normalize {
            name: MEL_NORM.into(),
            dim: N_MELS,
        }
        .lower(g, x)?;
        let stat = g.mean_rows(norm)?;
        let stat = g.reshape(stat, &[1, N_MELS])?;
        let cond = self.conditioner().lower(g, stat)?;
        let cond = g.reshape(cond, &[self.hidden])?;
        let decoder = self.decoder().layers;
        let mut y = decoder[0].lower(g, st)?;
        y = g.add(y, cond)?;
        for layer in &decoder[1..] {
            y = layer.lower(g, y)?;
        }
        let recon = g.slice(y, 0, 0, frames)?;
        Ok(VqVaeNodes {
            target,
            z_e,
            z_q,
            recon,
        })
    }
}

/// Frame-wise (kernel 1) convolutions, global mean pooling, linear head to
/// [`EMBED_DIM`], projected onto the unit sphere so the triplet margin is
/// measured on a fixed scale. Pointwise layers keep the embedding invariant
/// to frame order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParalinguisticEncoder {
    pub width: usize,
    pub layers: usize,
    pub dim: usize,
}

impl Default for ParalinguisticEncoder {
    fn default() -> Self {
        Self {
            width: 128,
            layers: 4,
            dim: EMBED_DIM,
        }
    }
}

impl ParalinguisticEncoder {
    pub fn stack(&self) -> Sequential {
        let mut layers = vec![Layer::Normalize {
            name: MEL_NORM.into(),
            dim: N_MELS,
        }];
        let mut c_in = N_MELS;
        for i in 0..self.layers {
            layers.push(Layer::conv(format!("para.conv.{i}"), c_in, self.width, 1, 1, Padding::Same));
            layers.push(Layer::Relu);
            c_in = self.width;
        }
        layers.push(Layer::MeanPool);
        layers.push(Layer::linear("para.head", c_in, self.dim));
        layers.push(Layer::L2Normalize);
        Sequential::new(layers)
    }
}

/// Waveform to encoder frames `[ceil(len / 160), hidden]`.
pub fn cpc_encode<T: Scalar>(wave: &[T], enc: &CpcEncoder, params: &TensorMap<T>) -> Result<Tensor<T>> {
    if wave.len() < CPC_DOWNSAMPLE {
        return Err(Error::invalid(format!(
            "waveform of {} samples is shorter than one {CPC_DOWNSAMPLE}-sample frame",
            wave.len()
        )));
    }
    let x = Tensor::new(vec![wave.len(), 1], wave.to_vec())?;
    enc.stack().apply(params, &x)
}

/// Context sequence `c_1..c_T`, same length as `z`.
pub fn context_aggregate<T: Scalar>(z: &Tensor<T>, agg: &ContextAggregator, params: &TensorMap<T>) -> Result<Tensor<T>> {
    if z.rank() != 2 || z.rows() == 0 {
        return Err(Error::invalid("context aggregation needs a non-empty frame sequence"));
    }
    agg.stack().apply(params, z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VqVaeOutput<T> {
    pub z_e: Tensor<T>,
    pub z_q: Tensor<T>,
    pub indices: Vec<usize>,
    /// In the input's (unstandardized) mel units.
    pub reconstruction: Tensor<T>,
}

pub fn vqvae_forward<T: Scalar>(
    mel: &Tensor<T>,
    coder: &VqVaeCoder,
    params: &TensorMap<T>,
    codebook: &Tensor<T>,
) -> Result<VqVaeOutput<T>> {
    if mel.rank() != 2 || mel.cols() != N_MELS || mel.rows() == 0 {
        return Err(Error::invalid(format!("expected [frames, {N_MELS}] mel input, got {:?}", mel.shape())));
    }
    if codebook.rank() != 2 || codebook.cols() != coder.latent {
        return Err(Error::invalid(format!(
            "codebook width {} does not match latent width {}",
            codebook.shape().last().copied().unwrap_or(0),
            coder.latent
        )));
    }
    let coder = VqVaeCoder {
        codes: codebook.rows(),
        ..coder.clone()
    };
    let mut params = params.clone();
    params.insert(CODEBOOK.into(), codebook.clone());

    let mut g = Graph::new();
    let x = g.constant(mel.clone());
    let nodes = coder.lower(&mut g, x)?;

    // invert the input view: restore each frame's RMS and the utterance mean,
    // both taken from the input, then undo the standardization
    let norm = Layer::Normalize {
        name: MEL_NORM.into(),
        dim: N_MELS,
    }
    .lower(&mut g, x)?;
    let centred = Layer::CenterTime.lower(&mut g, norm)?;
    let eval = g.evaluate(&params, &TensorMap::new())?;
    let z_e = eval.get(nodes.z_e).clone();
    let indices = (0..z_e.rows())
        .map(|t| nearest_row(codebook.data(), coder.latent, z_e.row(t)).0)
        .collect();
    let (norm, centred) = (eval.get(norm), eval.get(centred));
    let mean = params.get(&format!("{MEL_NORM}.mean")).ok_or_else(|| Error::Unbound(format!("{MEL_NORM}.mean")))?;
    let inv_std = params
        .get(&format!("{MEL_NORM}.inv_std"))
        .ok_or_else(|| Error::Unbound(format!("{MEL_NORM}.inv_std")))?;
    let mut reconstruction = eval.get(nodes.recon).clone();
    for (t, row) in reconstruction.data_mut().chunks_mut(N_MELS).enumerate() {
        let c = centred.row(t);
        let ms = c.iter().fold(T::zero(), |acc, &v| acc + v * v) / T::lit(N_MELS as f64);
        let rms = (ms + T::lit(RMS_EPS)).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            let static_part = norm.row(t)[j] - c[j];
            *v = (*v * rms + static_part) / inv_std.data()[j] + mean.data()[j];
        }
    }
    Ok(VqVaeOutput {
        z_e,
        z_q: eval.get(nodes.z_q).clone(),
        indices,
        reconstruction,
    })
}

/// One [`EMBED_DIM`]-vector per utterance.
pub fn paralinguistic_embed<T: Scalar>(mel: &Tensor<T>, enc: &ParalinguisticEncoder, params: &TensorMap<T>) -> Result<Vec<T>> {
    if mel.rank() != 2 || mel.rows() == 0 {
        return Err(Error::invalid("paralinguistic embedding needs at least one mel frame"));
    }
    Ok(enc.stack().apply(params, mel)?.into_data())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;
    use crate::rng::Rng;

    fn cpc_params(seed: u64) -> TensorMap<f64> {
        let mut specs = CpcEncoder::default().stack().param_specs();
        specs.extend(ContextAggregator::default().stack().param_specs());
        init_params(&specs, &mut Rng::new(seed))
    }

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = Rng::new(seed);
        (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()
    }

    #[test]
    fn one_second_gives_one_hundred_frames() {
        let p = cpc_params(1);
        let enc = CpcEncoder::default();
        assert_eq!(cpc_encode(&noise(16000, 2), &enc, &p).unwrap().shape(), &[100, 64]);
        assert_eq!(cpc_encode(&noise(16001, 2), &enc, &p).unwrap().shape(), &[101, 64]);
        assert!(cpc_encode(&noise(159, 2), &enc, &p).is_err());
    }

    #[test]
    fn encoding_is_deterministic() {
        let p = cpc_params(3);
        let w = noise(4000, 4);
        let a = cpc_encode(&w, &CpcEncoder::default(), &p).unwrap();
        let b = cpc_encode(&w, &CpcEncoder::default(), &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn outside_receptive_field_has_no_effect() {
        let p = cpc_params(5);
        let enc = CpcEncoder::default();
        let len = 4800;
        let w = noise(len, 6);
        let base = cpc_encode(&w, &enc, &p).unwrap();
        for t in [0, 7, 15, 29] {
            let field = CpcEncoder::receptive_field(len, t);
            let masked: Vec<f64> = w
                .iter()
                .enumerate()
                .map(|(i, &v)| if field.contains(&i) { v } else { 0.0 })
                .collect();
            let out = cpc_encode(&masked, &enc, &p).unwrap();
            assert_eq!(out.row(t), base.row(t), "frame {t}, field {field:?}");
            // and the field is not vacuous: touching its centre moves z_t
            let mut poked = w.clone();
            poked[(field.start() + field.end()) / 2] += 1.0;
            let out = cpc_encode(&poked, &enc, &p).unwrap();
            assert_ne!(out.row(t), base.row(t));
        }
    }

    #[test]
    fn context_is_causal() {
        let p = cpc_params(7);
        let agg = ContextAggregator::default();
        let mut rng = Rng::new(8);
        let z = Tensor::new(vec![6, 64], (0..6 * 64).map(|_| rng.normal()).collect()).unwrap();
        let c = context_aggregate(&z, &agg, &p).unwrap();
        assert_eq!(c.rows(), 6);
        let mut z2 = z.clone();
        for v in &mut z2.data_mut()[4 * 64..5 * 64] {
            *v += 1.0;
        }
        let c2 = context_aggregate(&z2, &agg, &p).unwrap();
        assert_eq!(&c.data()[..4 * 64], &c2.data()[..4 * 64]);
        assert_ne!(c.row(4), c2.row(4));
        assert!(context_aggregate(&Tensor::<f64>::zeros(&[0, 64]), &agg, &p).is_err());
    }

    fn vq_setup(seed: u64) -> (VqVaeCoder, TensorMap<f64>) {
        let coder = VqVaeCoder {
            hidden: 16,
            latent: 8,
            codes: 12,
        };
        let p = init_params(&coder.param_specs(), &mut Rng::new(seed));
        (coder, p)
    }

    fn mel(frames: usize, seed: u64) -> Tensor<f64> {
        let mut rng = Rng::new(seed);
        Tensor::new(vec![frames, N_MELS], (0..frames * N_MELS).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn vqvae_shapes_and_nearest_codes() {
        let (coder, p) = vq_setup(9);
        let cb = p[CODEBOOK].clone();
        let out = vqvae_forward(&mel(96, 10), &coder, &p, &cb).unwrap();
        assert_eq!(out.z_e.shape(), &[48, 8]);
        assert_eq!(out.reconstruction.shape(), &[96, 80]);
        for (t, &q) in out.indices.iter().enumerate() {
            let z = out.z_e.row(t);
            let dists: Vec<f64> = (0..12)
                .map(|i| cb.row(i).iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum())
                .collect();
            let best = (0..12).fold(0, |b, i| if dists[i] < dists[b] { i } else { b });
            assert_eq!(q, best);
            assert_eq!(out.z_q.row(t), cb.row(q));
        }
        let narrow = Tensor::zeros(&[12, 7]);
        assert!(vqvae_forward(&mel(10, 1), &coder, &p, &narrow).is_err());
    }

    #[test]
    fn vqvae_restores_every_length() {
        let (coder, p) = vq_setup(11);
        let cb = p[CODEBOOK].clone();
        for frames in 2..=512 {
            let out = vqvae_forward(&mel(frames, frames as u64), &coder, &p, &cb).unwrap();
            assert_eq!(out.z_e.rows(), frames.div_ceil(2));
            assert_eq!(out.reconstruction.shape(), &[frames, N_MELS]);
        }
    }

    #[test]
    fn embedding_ignores_frame_order() {
        let enc = ParalinguisticEncoder {
            width: 16,
            layers: 4,
            dim: EMBED_DIM,
        };
        let p = init_params(&enc.stack().param_specs(), &mut Rng::new(12));
        let m = mel(9, 13);
        let a = paralinguistic_embed(&m, &enc, &p).unwrap();
        assert_eq!(a.len(), 512);
        let order = [3, 8, 0, 5, 1, 7, 2, 6, 4];
        let rows: Vec<Vec<f64>> = order.iter().map(|&i| m.row(i).to_vec()).collect();
        let b = paralinguistic_embed(&Tensor::from_rows(&rows).unwrap(), &enc, &p).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(paralinguistic_embed(&Tensor::<f64>::zeros(&[0, 80]), &enc, &p).is_err());
    }
}
