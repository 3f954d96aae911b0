//! Log-mel frontend: Hann-windowed STFT and an HTK-scale triangular filterbank.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SAMPLE_RATE: usize = 16_000;
pub const FFT_SIZE: usize = 2048;
pub const HOP: usize = 256;
pub const WINDOW: usize = 600;
pub const N_MELS: usize = 80;
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop: usize,
    pub window: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            fft_size: FFT_SIZE,
            hop: HOP,
            window: WINDOW,
        }
    }
}

impl StftConfig {
    pub fn num_frames(&self, len: usize) -> usize {
        if len < self.window {
            0
        } else {
            1 + (len - self.window) / self.hop
        }
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale spanning `[0, sample_rate / 2]`.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    n_mels: usize,
    n_bins: usize,
    /// `n_mels x n_bins`, row-major.
    weights: Vec<f64>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, fft_size: usize, sample_rate: usize) -> Result<Self> {
        let n_bins = fft_size / 2 + 1;
        if n_mels == 0 || n_mels > n_bins {
            return Err(Error::invalid(format!(
                "{n_mels} mel bands requested for {n_bins} frequency bins"
            )));
        }
        let nyquist = sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / fft_size as f64;
        let mut weights = vec![0.0; n_mels * n_bins];
        for m in 0..n_mels {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let w = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                weights[m * n_bins + k] = w;
            }
        }
        Ok(Self {
            n_mels,
            n_bins,
            weights,
            centers_hz: edges[1..=n_mels].to_vec(),
        })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn filter(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    pub fn center_hz(&self, m: usize) -> f64 {
        self.centers_hz[m]
    }
}

/// Reusable STFT + log-mel frontend (FFT plan and filterbank computed once).
#[derive(Clone)]
pub struct Frontend {
    cfg: StftConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    mel: MelFilterbank,
}

impl std::fmt::Debug for Frontend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Frontend").field("cfg", &self.cfg).finish()
    }
}

impl Default for Frontend {
    fn default() -> Self {
        Self::new(StftConfig::default(), N_MELS, SAMPLE_RATE).expect("default frontend is valid")
    }
}

impl Frontend {
    pub fn new(cfg: StftConfig, n_mels: usize, sample_rate: usize) -> Result<Self> {
        if cfg.window > cfg.fft_size || cfg.hop == 0 {
            return Err(Error::invalid("window must fit the FFT and hop must be positive"));
        }
        Ok(Self {
            cfg,
            window: hann(cfg.window),
            fft: FftPlanner::new().plan_fft_forward(cfg.fft_size),
            mel: MelFilterbank::new(n_mels, cfg.fft_size, sample_rate)?,
        })
    }

    pub fn config(&self) -> StftConfig {
        self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.mel
    }

    /// Magnitude spectrogram `[frames, fft_size / 2 + 1]`. Frames start at
    /// multiples of `hop` with no centering; the window is zero-padded to the
    /// FFT size.
    pub fn stft<T: Scalar>(&self, samples: &[T]) -> Result<Tensor<T>> {
        let cfg = self.cfg;
        if samples.len() < cfg.window {
            return Err(Error::invalid(format!(
                "signal of {} samples is shorter than the {}-sample window",
                samples.len(),
                cfg.window
            )));
        }
        let frames = cfg.num_frames(samples.len());
        let bins = cfg.num_bins();
        let mut out = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
        for t in 0..frames {
            let start = t * cfg.hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = if i < cfg.window {
                    Complex::new(samples[start + i].as_f64() * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process(&mut buf);
            out.extend(buf[..bins].iter().map(|c| T::lit(c.norm())));
        }
        Tensor::new(vec![frames, bins], out)
    }

    /// Natural-log mel energies `[frames, n_mels]` with floor [`LOG_FLOOR`].
    pub fn log_mel<T: Scalar>(&self, mag: &Tensor<T>) -> Result<Tensor<T>> {
        let bins = self.cfg.num_bins();
        if mag.rank() != 2 || mag.cols() != bins {
            return Err(Error::invalid(format!(
                "expected magnitude frames of width {bins}, got {:?}",
                mag.shape()
            )));
        }
        let n_mels = self.mel.n_mels;
        let mut out = Vec::with_capacity(mag.rows() * n_mels);
        for t in 0..mag.rows() {
            let frame = mag.row(t);
            for m in 0..n_mels {
                let e: f64 = self
                    .mel
                    .filter(m)
                    .iter()
                    .zip(frame)
                    .map(|(w, x)| w * x.as_f64())
                    .sum();
                out.push(T::lit(e.max(LOG_FLOOR).ln()));
            }
        }
        Tensor::new(vec![mag.rows(), n_mels], out)
    }

    pub fn mel_frames<T: Scalar>(&self, samples: &[T]) -> Result<Tensor<T>> {
        self.log_mel(&self.stft(samples)?)
    }
}

/// One-off STFT with explicit parameters.
pub fn stft<T: Scalar>(samples: &[T], cfg: StftConfig) -> Result<Tensor<T>> {
    Frontend::new(cfg, N_MELS.min(cfg.num_bins()), SAMPLE_RATE)?.stft(samples)
}

/// One-off log-mel projection of magnitude frames.
pub fn log_mel<T: Scalar>(mag: &Tensor<T>, n_mels: usize, sample_rate: usize) -> Result<Tensor<T>> {
    let fft_size = (mag.cols().max(1) - 1) * 2;
    let cfg = StftConfig {
        fft_size,
        window: fft_size.min(WINDOW),
        hop: HOP,
    };
    Frontend::new(cfg, n_mels, sample_rate)?.log_mel(mag)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, len: usize) -> Vec<f64> {
        (0..len)
            .map(|n| (2.0 * std::f64::consts::PI * freq * n as f64 / SAMPLE_RATE as f64).sin())
            .collect()
    }

    #[test]
    fn one_second_gives_61_frames() {
        let mag = stft(&vec![0.0f64; 16_000], StftConfig::default()).unwrap();
        assert_eq!(mag.shape(), &[61, 1025]);
        assert!(mag.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_signal_rejected() {
        assert!(stft(&vec![0.0f64; 599], StftConfig::default()).is_err());
    }

    #[test]
    fn tone_peaks_at_expected_bin() {
        let mag = stft(&tone(1000.0, 4000), StftConfig::default()).unwrap();
        let frame = mag.row(3);
        let argmax = (0..frame.len()).max_by(|&a, &b| frame[a].total_cmp(&frame[b])).unwrap();
        assert_eq!(argmax, 128);
    }

    #[test]
    fn stft_matches_direct_dft_on_one_frame() {
        let x = tone(437.0, 2000);
        let mag = stft(&x, StftConfig::default()).unwrap();
        let w = hann(WINDOW);
        let t = 2;
        for k in [0usize, 10, 56, 57, 300, 1024] {
            let (mut re, mut im) = (0.0, 0.0);
            for n in 0..WINDOW {
                let phase = -2.0 * std::f64::consts::PI * (k * n) as f64 / FFT_SIZE as f64;
                let v = x[t * HOP + n] * w[n];
                re += v * phase.cos();
                im += v * phase.sin();
            }
            let direct = (re * re + im * im).sqrt();
            assert!((direct - mag.row(t)[k]).abs() < 1e-8 * (1.0 + direct));
        }
    }

    #[test]
    fn zero_magnitudes_hit_log_floor() {
        let mel = log_mel(&Tensor::<f64>::zeros(&[61, 1025]), 80, SAMPLE_RATE).unwrap();
        assert_eq!(mel.shape(), &[61, 80]);
        assert!(mel.data().iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn too_many_mels_rejected() {
        assert!(log_mel(&Tensor::<f64>::zeros(&[2, 17]), 80, SAMPLE_RATE).is_err());
    }

    #[test]
    fn filterbank_is_triangular_and_covers_band() {
        let fb = MelFilterbank::new(80, FFT_SIZE, SAMPLE_RATE).unwrap();
        for m in 0..80 {
            let f = fb.filter(m);
            assert!(f.iter().all(|&w| (0.0..=1.0).contains(&w)));
            let peak = (0..f.len()).max_by(|&a, &b| f[a].total_cmp(&f[b])).unwrap();
            // rises to the peak, then falls
            assert!(f[..=peak].windows(2).all(|p| p[0] <= p[1]));
            assert!(f[peak..].windows(2).all(|p| p[0] >= p[1]));
            if m + 1 < 80 {
                let next = fb.filter(m + 1);
                assert!(f.iter().zip(next).any(|(a, b)| *a > 0.0 && *b > 0.0), "filters {m},{} overlap", m + 1);
            }
        }
        assert!(fb.filter(0)[1] > 0.0);
        assert!(fb.filter(79)[1023] > 0.0);
        assert!((mel_to_hz(hz_to_mel(8000.0)) - 8000.0).abs() < 1e-9);
    }

    #[test]
    fn tone_at_center_lands_in_its_band() {
        // Power of a tone at a filter's center, restricted to that filter's support.
        // Checked for every band at least as wide as the Hann main lobe (2 fs / window).
        let fe = Frontend::default();
        let fb = fe.filterbank();
        let main_lobe = 2.0 * SAMPLE_RATE as f64 / WINDOW as f64;
        let bin_hz = SAMPLE_RATE as f64 / FFT_SIZE as f64;
        let mut checked = 0;
        for m in 1..79 {
            let (lo, hi) = (fb.center_hz(m - 1), fb.center_hz(m + 1));
            let center = fb.center_hz(m);
            if center - lo < main_lobe {
                continue;
            }
            let mag = fe.stft(&tone(center, 3000)).unwrap();
            let power: Vec<f64> = mag.row(2).iter().map(|v| v * v).collect();
            let total: f64 = power.iter().sum();
            let inside: f64 = power
                .iter()
                .enumerate()
                .filter(|(k, _)| (lo..=hi).contains(&(*k as f64 * bin_hz)))
                .map(|(_, p)| p)
                .sum();
            assert!(inside / total >= 0.9, "band {m}: share {}", inside / total);
            checked += 1;
        }
        assert!(checked > 40);
    }

    #[test]
    fn hop_shift_moves_frames_by_one() {
        let x: Vec<f64> = (0..5000).map(|n| ((n * 7919) % 1000) as f64 / 1000.0 - 0.5).collect();
        let mut shifted = vec![0.0; HOP];
        shifted.extend_from_slice(&x);
        let fe = Frontend::default();
        let a = fe.stft(&x).unwrap();
        let b = fe.stft(&shifted).unwrap();
        for t in 0..a.rows() {
            assert_eq!(a.row(t), b.row(t + 1));
        }
    }
}
