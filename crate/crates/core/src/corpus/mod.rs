//! Procedural two-factor speech corpus and the on-disk formats around it.
//!
//! Every utterance is a string of 100 ms segments. A segment for content
//! symbol `k` carries two narrow resonant bands at symbol-specific
//! frequencies; the speaker contributes a harmonic source at
//! `f0 = 100 + 20 s` Hz with a speaker-specific spectral tilt that persists
//! through the whole utterance. Speaker is therefore a global factor and
//! content a local one.

mod tensor_file;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dsp::SAMPLE_RATE;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub use tensor_file::{read_tensor, write_tensor, Dtype, StoredTensor, MAGIC};

pub const SEGMENT_SAMPLES: usize = SAMPLE_RATE / 10;
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CONFIG_FILE: &str = "corpus.json";

const SOURCE_AMPLITUDE: f64 = 0.5;
const F1_AMPLITUDE: f64 = 0.6;
const F2_AMPLITUDE: f64 = 0.4;
const BAND_SPREAD_HZ: f64 = 40.0;
const RAMP_SAMPLES: usize = 80;
const NOISE_DB: f64 = -30.0;
const MAX_HARMONIC_HZ: f64 = 3800.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub speakers: usize,
    pub symbols: usize,
    pub utterances: usize,
    pub min_symbols: usize,
    pub max_symbols: usize,
    pub seed: u64,
    pub sample_rate: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            speakers: 8,
            symbols: 10,
            utterances: 200,
            min_symbols: 4,
            max_symbols: 8,
            seed: 0,
            sample_rate: SAMPLE_RATE,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(m));
        if self.speakers < 2 {
            return fail(format!("need at least 2 speakers, got {}", self.speakers));
        }
        if self.symbols < 2 || self.symbols > 60 {
            return fail(format!("symbol count must be in [2, 60], got {}", self.symbols));
        }
        if self.utterances < self.speakers * self.symbols {
            return fail(format!(
                "{} utterances cannot cover {} speakers x {} symbols",
                self.utterances, self.speakers, self.symbols
            ));
        }
        if self.min_symbols == 0 || self.min_symbols > self.max_symbols || self.max_symbols > self.symbols {
            return fail(format!(
                "symbols per utterance {}..={} must be non-empty and at most {}",
                self.min_symbols, self.max_symbols, self.symbols
            ));
        }
        if self.sample_rate != SAMPLE_RATE {
            return fail(format!("sample rate must be {SAMPLE_RATE}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub waveform_path: String,
    pub speaker_id: usize,
    pub content_symbols: Vec<usize>,
    pub duration_s: f64,
}

/// Centre frequencies of the two resonant bands of `symbol`.
pub fn formants(symbol: usize) -> (f64, f64) {
    (
        300.0 + 140.0 * (symbol % 5) as f64,
        1300.0 + 450.0 * (symbol / 5) as f64,
    )
}

pub fn speaker_f0(speaker: usize) -> f64 {
    100.0 + 20.0 * speaker as f64
}

/// Exponent of the harmonic amplitude roll-off `h^-tilt`.
pub fn speaker_tilt(speaker: usize) -> f64 {
    0.8 + 0.1 * speaker as f64
}

/// Synthesizes one utterance. Deterministic in `(speaker, symbols, rng)`.
pub fn synthesize(speaker: usize, symbols: &[usize], rng: &mut Rng) -> Vec<f32> {
    let len = symbols.len() * SEGMENT_SAMPLES;
    let sr = SAMPLE_RATE as f64;
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut x = vec![0.0f64; len];

    let f0 = speaker_f0(speaker);
    let tilt = speaker_tilt(speaker);
    let harmonics = (MAX_HARMONIC_HZ / f0).floor() as usize;
    for h in 1..=harmonics {
        let amp = SOURCE_AMPLITUDE * (h as f64).powf(-tilt);
        let phase = rng.uniform(0.0, two_pi);
        let w = two_pi * f0 * h as f64 / sr;
        for (n, v) in x.iter_mut().enumerate() {
            *v += amp * (w * n as f64 + phase).sin();
        }
    }

    for (seg, &sym) in symbols.iter().enumerate() {
        let (f1, f2) = formants(sym);
        let start = seg * SEGMENT_SAMPLES;
        let mut components = Vec::with_capacity(6);
        for (centre, amp) in [(f1, F1_AMPLITUDE), (f2, F2_AMPLITUDE)] {
            components.push((centre, amp));
            components.push((centre - BAND_SPREAD_HZ, 0.5 * amp));
            components.push((centre + BAND_SPREAD_HZ, 0.5 * amp));
        }
        let phases: Vec<f64> = components.iter().map(|_| rng.uniform(0.0, two_pi)).collect();
        for n in 0..SEGMENT_SAMPLES {
            let edge = n.min(SEGMENT_SAMPLES - 1 - n);
            let ramp = if edge < RAMP_SAMPLES {
                0.5 - 0.5 * (std::f64::consts::PI * edge as f64 / RAMP_SAMPLES as f64).cos()
            } else {
                1.0
            };
            let t = (start + n) as f64 / sr;
            let s: f64 = components
                .iter()
                .zip(&phases)
                .map(|(&(f, a), &p)| a * (two_pi * f * t + p).sin())
                .sum();
            x[start + n] += ramp * s;
        }
    }

    let rms = (x.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64).sqrt();
    let noise_rms = rms * 10f64.powf(NOISE_DB / 20.0);
    for v in x.iter_mut() {
        *v += noise_rms * rng.normal();
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = if peak > 0.0 { 0.9 / peak } else { 1.0 };
    x.iter().map(|v| (v * gain) as f32).collect()
}

#[derive(Debug, Clone)]
pub struct Corpus {
    root: PathBuf,
    pub config: CorpusConfig,
    pub records: Vec<UtteranceRecord>,
}

fn write_json_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for item in items {
        let line = serde_json::to_string(item)?;
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Writes `manifest.jsonl`, `corpus.json` and one f32 tensor file per utterance
/// under `out_dir`.
pub fn generate_corpus(cfg: &CorpusConfig, out_dir: impl AsRef<Path>) -> Result<Corpus> {
    cfg.validate()?;
    let root = out_dir.as_ref().to_path_buf();
    let wav_dir = root.join("wav");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let mut records = Vec::with_capacity(cfg.utterances);
    for i in 0..cfg.utterances {
        let mut rng = Rng::derive(cfg.seed, i as u64);
        let speaker = i % cfg.speakers;
        let count = cfg.min_symbols + rng.below(cfg.max_symbols - cfg.min_symbols + 1);
        let mut pool: Vec<usize> = (0..cfg.symbols).collect();
        rng.shuffle(&mut pool);
        let symbols = pool[..count].to_vec();
        let samples = synthesize(speaker, &symbols, &mut rng);
        let id = format!("utt{i:04}");
        let rel = format!("wav/{id}.edgt");
        let duration_s = samples.len() as f64 / SAMPLE_RATE as f64;
        write_tensor(root.join(&rel), &StoredTensor::F32(Tensor::vector(samples)))?;
        records.push(UtteranceRecord {
            id,
            waveform_path: rel,
            speaker_id: speaker,
            content_symbols: symbols,
            duration_s,
        });
    }
    write_json_lines(&root.join(MANIFEST_FILE), &records)?;
    let cfg_path = root.join(CONFIG_FILE);
    fs::write(&cfg_path, serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(&cfg_path, e))?;
    Ok(Corpus {
        root,
        config: cfg.clone(),
        records,
    })
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<UtteranceRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}

impl Corpus {
    /// Opens a corpus from its directory or from the path of its manifest.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let root = if path.is_dir() {
            path.to_path_buf()
        } else {
            path.parent().map(Path::to_path_buf).unwrap_or_default()
        };
        let manifest = if path.is_dir() { root.join(MANIFEST_FILE) } else { path.to_path_buf() };
        if !manifest.exists() {
            return Err(Error::MissingArtifact {
                stage: "corpus".into(),
                path: manifest,
            });
        }
        let records = read_manifest(&manifest)?;
        let cfg_path = root.join(CONFIG_FILE);
        let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config: CorpusConfig = serde_json::from_str(&text)?;
        Ok(Self { root, config, records })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn waveform_path(&self, record: &UtteranceRecord) -> PathBuf {
        self.root.join(&record.waveform_path)
    }

    pub fn load_waveform(&self, record: &UtteranceRecord) -> Result<Vec<f32>> {
        Ok(read_tensor(self.waveform_path(record))?.into_f32()?.into_data())
    }
}
