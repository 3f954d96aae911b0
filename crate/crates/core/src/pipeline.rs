//! Edge/cloud orchestration. The edge encodes waveforms and discretizes them
//! into unit files; the cloud sees only those files (plus the manifest for
//! evaluation labels) and runs probes and metrics. Every file read is
//! accounted for, so the boundary can be checked after the fact.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::compression::{calibration_batch, quantize_model, AnyCheckpoint};
use crate::corpus::{read_manifest, Corpus, StoredTensor, UtteranceRecord, MANIFEST_FILE};
use crate::dsp::{N_MELS, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::evalmetrics::{abx_score, parse_simi_pairs, segment_items, ssimi_report, AbxMode, AbxReport, SimiReport, SSIMI_REFERENCE};
use crate::privacy::{probe_attribute, Attribute, LeakageReport, ProbeConfig, ProbeSets};
use crate::quantizers::{write_units, UnitEncoder, UnitFileEntry, UnitIndex, UNIT_INDEX_FILE};
use crate::tensor::Tensor;
use crate::training::{LinguisticModel, ModelKind};

pub const REPORT_FILE: &str = "report.json";
pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
/// Bytes per transmitted unit index.
pub const UNIT_BYTES: usize = 2;
/// Bytes per frame of the continuous alternative: 80 f32 mel bands.
pub const FEATURE_FRAME_BYTES: usize = N_MELS * 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    #[default]
    Fp32,
    Int8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Encode,
    Quantize,
    Classify,
    Evaluate,
    Decode,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Encode => "encode",
            Stage::Quantize => "quantize",
            Stage::Classify => "classify",
            Stage::Evaluate => "evaluate",
            Stage::Decode => "decode",
        }
    }

    fn is_cloud(self) -> bool {
        matches!(self, Stage::Classify | Stage::Evaluate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Corpus directory or manifest path.
    pub corpus: PathBuf,
    /// Linguistic checkpoint, FP32 or INT8.
    pub linguistic: PathBuf,
    /// Paralinguistic checkpoint; the embedding stays on the edge.
    pub paralinguistic: Option<PathBuf>,
    /// INT8 with an FP32 checkpoint quantizes it on load, calibrating on the
    /// training split.
    pub precision: Precision,
    pub stages: Vec<Stage>,
    pub out: PathBuf,
    pub seed: u64,
    /// Also ship continuous features across the boundary, as the baseline the
    /// units are compared against.
    pub features_baseline: bool,
    pub probe: ProbeConfig,
    pub train_fraction: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("corpus"),
            linguistic: PathBuf::from("ckpt"),
            paralinguistic: None,
            precision: Precision::Fp32,
            stages: vec![Stage::Encode, Stage::Quantize, Stage::Classify, Stage::Evaluate],
            out: PathBuf::from("run"),
            seed: 0,
            features_baseline: false,
            probe: ProbeConfig::default(),
            train_fraction: 0.75,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::invalid("pipeline needs at least one stage"));
        }
        if self.stages.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("stages must follow encode, quantize, classify, evaluate, without repeats"));
        }
        if self.stages.contains(&Stage::Quantize) && !self.stages.contains(&Stage::Encode) {
            return Err(Error::invalid("quantize consumes encoder output and needs the encode stage"));
        }
        let edge = self.stages.iter().any(|s| !s.is_cloud());
        let manifest = self.manifest_path();
        if !manifest.exists() {
            let stage = if edge { Stage::Encode } else { self.stages[0] };
            return Err(missing(stage, manifest));
        }
        if edge {
            for dir in std::iter::once(&self.linguistic).chain(self.paralinguistic.as_ref()) {
                if !dir.is_dir() {
                    return Err(missing(Stage::Encode, dir.clone()));
                }
            }
        } else if !self.units_dir().join(UNIT_INDEX_FILE).exists() {
            return Err(missing(self.stages[0], self.units_dir().join(UNIT_INDEX_FILE)));
        }
        Ok(())
    }

    fn manifest_path(&self) -> PathBuf {
        if self.corpus.is_dir() {
            self.corpus.join(MANIFEST_FILE)
        } else {
            self.corpus.clone()
        }
    }

    /// What crosses the boundary.
    pub fn payload_dir(&self) -> PathBuf {
        self.out.join("payload")
    }

    pub fn units_dir(&self) -> PathBuf {
        self.payload_dir().join("units")
    }

    pub fn features_dir(&self) -> PathBuf {
        self.payload_dir().join("features")
    }

    /// Edge-local paralinguistic embeddings.
    pub fn local_dir(&self) -> PathBuf {
        self.out.join("edge").join("paralinguistic")
    }
}

fn missing(stage: Stage, path: PathBuf) -> Error {
    Error::MissingArtifact {
        stage: stage.name().into(),
        path,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FileKind {
    Manifest,
    Waveform,
    Checkpoint,
    UnitIndex,
    Units,
    Features,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRead {
    pub stage: Stage,
    pub kind: FileKind,
    pub path: PathBuf,
    pub bytes: u64,
}

/// Every file the pipeline reads goes through here.
#[derive(Debug, Default)]
struct Access {
    reads: Vec<FileRead>,
}

impl Access {
    fn read(&mut self, stage: Stage, kind: FileKind, path: &Path) -> Result<Vec<u8>> {
        if stage.is_cloud() && matches!(kind, FileKind::Waveform | FileKind::Checkpoint) {
            return Err(Error::invalid(format!("cloud stage {} may not read {}", stage.name(), path.display())));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.note(stage, kind, path, bytes.len() as u64);
        Ok(bytes)
    }

    fn note(&mut self, stage: Stage, kind: FileKind, path: &Path, bytes: u64) {
        self.reads.push(FileRead {
            stage,
            kind,
            path: path.to_path_buf(),
            bytes,
        });
    }

    fn manifest(&mut self, stage: Stage, path: &Path) -> Result<Vec<UtteranceRecord>> {
        self.read(stage, FileKind::Manifest, path)?;
        read_manifest(path)
    }

    fn tensor(&mut self, stage: Stage, kind: FileKind, path: &Path) -> Result<StoredTensor> {
        StoredTensor::from_bytes(&self.read(stage, kind, path)?)
    }

    fn checkpoint(&mut self, stage: Stage, dir: &Path) -> Result<AnyCheckpoint> {
        let ckpt = AnyCheckpoint::load(dir).map_err(|e| match e {
            Error::MissingArtifact { path, .. } => missing(stage, path),
            other => other,
        })?;
        let bytes = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok()?.metadata().ok())
            .map(|m| m.len())
            .sum();
        self.note(stage, FileKind::Checkpoint, dir, bytes);
        Ok(ckpt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageStatus {
    Ok,
    Failed,
    Skipped,
    NotImplemented,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    pub timing: StageTiming,
    pub error: Option<String>,
}

/// Clock and memory readings; the only fields allowed to differ between
/// two runs of the same configuration.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTiming {
    pub wall_ms: f64,
    pub cpu_ms: f64,
    /// Peak resident set of the process at the end of the stage.
    pub peak_rss_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayloadReport {
    pub utterances: usize,
    pub frames: usize,
    /// Unit indices only, `UNIT_BYTES` per frame.
    pub unit_payload_bytes: usize,
    /// Unit files as written: payload, tensor headers and the index.
    pub unit_file_bytes: u64,
    /// The same frames as 80-dim f32 features.
    pub feature_equivalent_bytes: usize,
    pub unit_bytes_per_frame: usize,
    pub feature_bytes_per_frame: usize,
    /// `feature_equivalent_bytes / unit_payload_bytes`.
    pub reduction: f64,
    /// Continuous features actually sent, when the baseline is enabled.
    pub feature_file_bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PipelineMetrics {
    /// Cloud probes on what crossed the boundary.
    pub leakage: Vec<LeakageReport>,
    /// Edge-local probe on the paralinguistic embedding.
    pub local_leakage: Vec<LeakageReport>,
    pub abx: Vec<AbxReport>,
    pub ssimi: Option<SimiReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EncoderTiming {
    pub audio_seconds: f64,
    pub encoder_ms_per_audio_second: f64,
    /// Encoder CPU time over audio duration.
    pub rtf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryReport {
    pub reads: Vec<FileRead>,
    /// True when a cloud stage read anything other than the manifest, unit
    /// files or (baseline only) feature files.
    pub cloud_read_signal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub version: String,
    pub config: PipelineConfig,
    pub model: Option<ModelKind>,
    pub precision: Precision,
    pub stages: Vec<StageRecord>,
    pub payload: Option<PayloadReport>,
    pub metrics: PipelineMetrics,
    pub encoder: Option<EncoderTiming>,
    pub boundary: BoundaryReport,
}

impl PipelineReport {
    /// The report with every clock and memory reading zeroed.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.stages.iter_mut().for_each(|s| s.timing = StageTiming::default());
        r.encoder = r.encoder.map(|e| EncoderTiming {
            audio_seconds: e.audio_seconds,
            ..EncoderTiming::default()
        });
        r
    }

    pub fn succeeded(&self) -> bool {
        self.stages
            .iter()
            .all(|s| matches!(s.status, StageStatus::Ok | StageStatus::NotImplemented))
    }

    pub fn stage(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// CPU seconds and peak resident bytes of this process.
fn usage() -> (f64, u64) {
    let mut ru = std::mem::MaybeUninit::<libc::rusage>::zeroed();
    // SAFETY: getrusage only writes into the provided struct.
    let rc = unsafe { libc::getrusage(libc::RUSAGE_SELF, ru.as_mut_ptr()) };
    if rc != 0 {
        return (0.0, 0);
    }
    // SAFETY: zero-initialized and filled by a successful call.
    let ru = unsafe { ru.assume_init() };
    let secs = |tv: libc::timeval| tv.tv_sec as f64 + tv.tv_usec as f64 * 1e-6;
    (secs(ru.ru_utime) + secs(ru.ru_stime), ru.ru_maxrss as u64 * 1024)
}

struct Clock {
    wall: Instant,
    cpu: f64,
}

impl Clock {
    fn start() -> Self {
        Self {
            wall: Instant::now(),
            cpu: usage().0,
        }
    }

    fn stop(&self) -> StageTiming {
        let (cpu, rss) = usage();
        StageTiming {
            wall_ms: self.wall.elapsed().as_secs_f64() * 1e3,
            cpu_ms: (cpu - self.cpu).max(0.0) * 1e3,
            peak_rss_bytes: rss,
        }
    }
}

/// Edge state handed from encode to quantize.
struct Encoded {
    model: LinguisticModel<f32>,
    features: Vec<Tensor<f32>>,
}

struct Run<'a> {
    cfg: &'a PipelineConfig,
    access: Access,
    records: Vec<UtteranceRecord>,
    encoded: Option<Encoded>,
    model: Option<ModelKind>,
    payload: Option<PayloadReport>,
    metrics: PipelineMetrics,
    encoder: Option<EncoderTiming>,
}

/// Runs the requested stages in order. Missing inputs are an error naming
/// the stage; a stage that fails mid-way yields a partial report with the
/// failure recorded and later stages skipped.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineReport> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let mut run = Run {
        cfg,
        access: Access::default(),
        records: Vec::new(),
        encoded: None,
        model: None,
        payload: None,
        metrics: PipelineMetrics::default(),
        encoder: None,
    };
    let mut stages = Vec::new();
    let mut failed = false;
    for &stage in &cfg.stages {
        if failed {
            stages.push(StageRecord {
                stage,
                status: StageStatus::Skipped,
                timing: StageTiming::default(),
                error: None,
            });
            continue;
        }
        let clock = Clock::start();
        let outcome = match stage {
            Stage::Encode => run.encode(),
            Stage::Quantize => run.quantize(),
            Stage::Classify => run.classify(),
            Stage::Evaluate => run.evaluate(),
            Stage::Decode => Ok(()),
        };
        let timing = clock.stop();
        if stage == Stage::Encode {
            if let Some(e) = run.encoder.as_mut() {
                e.encoder_ms_per_audio_second = timing.wall_ms / e.audio_seconds;
                e.rtf = timing.cpu_ms * 1e-3 / e.audio_seconds;
            }
        }
        let (status, error) = match (stage, outcome) {
            (Stage::Decode, _) => (StageStatus::NotImplemented, None),
            (_, Ok(())) => (StageStatus::Ok, None),
            (_, Err(e)) => {
                failed = true;
                (StageStatus::Failed, Some(e.to_string()))
            }
        };
        stages.push(StageRecord {
            stage,
            status,
            timing,
            error,
        });
    }
    if !cfg.stages.contains(&Stage::Decode) {
        // speech regeneration from units is outside this system
        stages.push(StageRecord {
            stage: Stage::Decode,
            status: StageStatus::NotImplemented,
            timing: StageTiming::default(),
            error: None,
        });
    }
    let allowed = |r: &FileRead| match r.kind {
        FileKind::Manifest | FileKind::UnitIndex | FileKind::Units => true,
        FileKind::Features => cfg.features_baseline,
        FileKind::Waveform | FileKind::Checkpoint => false,
    };
    let cloud_read_signal = run.access.reads.iter().any(|r| r.stage.is_cloud() && !allowed(r));
    let report = PipelineReport {
        version: VERSION.into(),
        config: cfg.clone(),
        model: run.model,
        precision: cfg.precision,
        stages,
        payload: run.payload,
        metrics: run.metrics,
        encoder: run.encoder,
        boundary: BoundaryReport {
            reads: run.access.reads,
            cloud_read_signal,
        },
    };
    report.save(cfg.out.join(REPORT_FILE))?;
    Ok(report)
}

impl Run<'_> {
    fn load_records(&mut self, stage: Stage) -> Result<()> {
        if self.records.is_empty() {
            self.records = self.access.manifest(stage, &self.cfg.manifest_path())?;
            if self.records.is_empty() {
                return Err(Error::invalid("manifest lists no utterances"));
            }
        }
        Ok(())
    }

    fn encode(&mut self) -> Result<()> {
        let cfg = self.cfg;
        self.load_records(Stage::Encode)?;
        let corpus = Corpus::open(&cfg.corpus)?;
        let model = match (self.access.checkpoint(Stage::Encode, &cfg.linguistic)?, cfg.precision) {
            (AnyCheckpoint::Fp32(ckpt), Precision::Int8) => {
                let calib = calibration_batch(&corpus, cfg.train_fraction, cfg.seed)?;
                LinguisticModel::from_quantized(&quantize_model(&ckpt, &calib)?.0)?
            }
            (AnyCheckpoint::Int8(_), Precision::Fp32) => {
                return Err(Error::invalid("an INT8 checkpoint cannot run at FP32 precision"));
            }
            (any, _) => any.linguistic()?,
        };
        self.model = Some(model.config().kind);
        let paralinguistic = match &cfg.paralinguistic {
            Some(dir) => Some(self.access.checkpoint(Stage::Encode, dir)?.paralinguistic::<f32>()?),
            None => None,
        };

        let mut features = Vec::with_capacity(self.records.len());
        let mut embeddings = Vec::new();
        let mut samples = 0usize;
        for record in &self.records {
            let path = corpus.waveform_path(record);
            let wave = self.access.tensor(Stage::Encode, FileKind::Waveform, &path)?.into_f32()?.into_data();
            samples += wave.len();
            features.push(model.features(&wave)?);
            if let Some(p) = &paralinguistic {
                embeddings.push(p.embed(&wave)?);
            }
        }
        let audio_seconds = samples as f64 / SAMPLE_RATE as f64;
        self.encoder = Some(EncoderTiming {
            audio_seconds,
            ..EncoderTiming::default()
        });

        if paralinguistic.is_some() {
            let dir = cfg.local_dir();
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (record, e) in self.records.iter().zip(&embeddings) {
                crate::corpus::write_tensor(dir.join(format!("{}.edgt", record.id)), &StoredTensor::F32(Tensor::vector(e.clone())))?;
            }
            let rows: Vec<Vec<f64>> = embeddings.iter().map(|e| e.iter().map(|&v| v as f64).collect()).collect();
            let speakers: Vec<usize> = self.records.iter().map(|r| r.speaker_id).collect();
            self.metrics.local_leakage.push(probe_attribute(
                &Tensor::from_rows(&rows)?,
                &speakers,
                &cfg.probe,
                "speaker",
                "paralinguistic",
            )?);
        }
        self.encoded = Some(Encoded { model, features });
        Ok(())
    }

    fn quantize(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let Encoded { model, features } = self.encoded.as_ref().ok_or_else(|| Error::invalid("no encoder output"))?;
        let units_dir = cfg.units_dir();
        reset_dir(&units_dir)?;
        let mut files = Vec::with_capacity(features.len());
        let mut frames = 0;
        for (record, f) in self.records.iter().zip(features) {
            let units = model.assign(f)?;
            frames += units.len();
            let file = format!("{}.edgt", record.id);
            write_units(units_dir.join(&file), &units)?;
            files.push(UnitFileEntry {
                id: record.id.clone(),
                file,
                frames: units.len(),
            });
        }
        let index = UnitIndex {
            codes: model.codes(),
            frame_period_samples: model.frame_period(),
            frame_offset_samples: model.frame_offset(),
            files,
        };
        let index_path = units_dir.join(UNIT_INDEX_FILE);
        fs::write(&index_path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&index_path, e))?;

        let feature_file_bytes = if cfg.features_baseline {
            let dir = cfg.features_dir();
            reset_dir(&dir)?;
            for (record, f) in self.records.iter().zip(features) {
                crate::corpus::write_tensor(dir.join(format!("{}.edgt", record.id)), &StoredTensor::F32(f.clone()))?;
            }
            Some(dir_size(&dir)?)
        } else {
            None
        };
        let unit_payload_bytes = frames * UNIT_BYTES;
        let feature_equivalent_bytes = frames * FEATURE_FRAME_BYTES;
        self.payload = Some(PayloadReport {
            utterances: self.records.len(),
            frames,
            unit_payload_bytes,
            unit_file_bytes: dir_size(&units_dir)?,
            feature_equivalent_bytes,
            unit_bytes_per_frame: UNIT_BYTES,
            feature_bytes_per_frame: FEATURE_FRAME_BYTES,
            reduction: feature_equivalent_bytes as f64 / unit_payload_bytes.max(1) as f64,
            feature_file_bytes,
        });
        Ok(())
    }

    /// Reads the unit payload through the boundary.
    fn cloud_units(&mut self, stage: Stage) -> Result<(UnitIndex, Vec<Vec<usize>>)> {
        self.load_records(stage)?;
        let dir = self.cfg.units_dir();
        let index: UnitIndex = serde_json::from_slice(&self.access.read(stage, FileKind::UnitIndex, &dir.join(UNIT_INDEX_FILE))?)?;
        let by_id: BTreeMap<&str, &UnitFileEntry> = index.files.iter().map(|f| (f.id.as_str(), f)).collect();
        let mut units = Vec::with_capacity(self.records.len());
        for record in &self.records {
            let entry = by_id
                .get(record.id.as_str())
                .ok_or_else(|| missing(stage, dir.join(format!("{}.edgt", record.id))))?;
            let t = self.access.tensor(stage, FileKind::Units, &dir.join(&entry.file))?;
            units.push(t.into_u16()?.into_iter().map(usize::from).collect());
        }
        Ok((index, units))
    }

    fn classify(&mut self) -> Result<()> {
        let (index, units) = self.cloud_units(Stage::Classify)?;
        let sets = ProbeSets::from_units(&self.records, &units, index.codes, index.frame_period_samples, index.frame_offset_samples)?;
        for attr in [Attribute::Content, Attribute::Speaker] {
            self.metrics.leakage.push(sets.probe(attr, &self.cfg.probe, "units")?);
        }
        if self.cfg.features_baseline {
            let dir = self.cfg.features_dir();
            let mut frames = Vec::with_capacity(self.records.len());
            for record in &self.records {
                let t = self.access.tensor(Stage::Classify, FileKind::Features, &dir.join(format!("{}.edgt", record.id)))?;
                frames.push(t.into_f32()?.cast());
            }
            let sets = ProbeSets::from_frames(&self.records, &frames, index.frame_period_samples, index.frame_offset_samples)?;
            for attr in [Attribute::Content, Attribute::Speaker] {
                self.metrics.leakage.push(sets.probe(attr, &self.cfg.probe, "features")?);
            }
        }
        Ok(())
    }

    fn evaluate(&mut self) -> Result<()> {
        let (index, units) = self.cloud_units(Stage::Evaluate)?;
        let mut items = Vec::new();
        for (record, u) in self.records.iter().zip(&units) {
            items.extend(segment_items(u, index.codes, index.frame_period_samples, index.frame_offset_samples, record)?);
        }
        for mode in [AbxMode::Within, AbxMode::Across] {
            self.metrics.abx.push(abx_score(&items, mode)?);
        }
        self.metrics.ssimi = Some(ssimi_report(&symbol_embeddings(&items), &parse_simi_pairs(SSIMI_REFERENCE)?)?);
        Ok(())
    }
}

/// Mean one-hot frame of every content symbol, pooled over its segments.
pub fn symbol_embeddings(items: &[crate::evalmetrics::AbxItem]) -> BTreeMap<usize, Vec<f64>> {
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for item in items {
        let (sum, n) = sums
            .entry(item.category)
            .or_insert_with(|| (vec![0.0; item.frames.cols()], 0));
        for t in 0..item.frames.rows() {
            sum.iter_mut().zip(item.frames.row(t)).for_each(|(a, b)| *a += b);
        }
        *n += item.frames.rows();
    }
    sums.into_iter()
        .map(|(k, (sum, n))| (k, sum.into_iter().map(|v| v / n as f64).collect()))
        .collect()
}

fn reset_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn dir_size(dir: &Path) -> Result<u64> {
    let mut total = 0;
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        total += entry.metadata().map_err(|e| Error::io(entry.path(), e))?.len();
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageBench {
    pub stage: Stage,
    pub fp32_ms: Vec<f64>,
    pub int8_ms: Vec<f64>,
    pub fp32_median_ms: f64,
    pub fp32_min_ms: f64,
    pub int8_median_ms: f64,
    pub int8_min_ms: f64,
    /// Median INT8 time over median FP32 time.
    pub int8_over_fp32: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub version: String,
    pub repeats: usize,
    pub stages: Vec<StageBench>,
    pub audio_seconds: f64,
    pub fp32_encoder_ms_per_audio_second: f64,
    pub int8_encoder_ms_per_audio_second: f64,
    /// The "tens of milliseconds" per second of audio this design targets.
    pub reference_ms_per_audio_second: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Runs the pipeline `repeats` times at each precision under `cfg.out/bench`
/// and tabulates per-stage wall time.
pub fn bench(cfg: &PipelineConfig, repeats: usize) -> Result<BenchReport> {
    if repeats < 3 {
        return Err(Error::invalid(format!("bench needs at least 3 repeats, got {repeats}")));
    }
    let mut samples: BTreeMap<(Precision, Stage), Vec<f64>> = BTreeMap::new();
    let mut per_second: BTreeMap<Precision, Vec<f64>> = BTreeMap::new();
    let mut audio_seconds = 0.0;
    for _ in 0..repeats {
        for precision in [Precision::Fp32, Precision::Int8] {
            let run_cfg = PipelineConfig {
                precision,
                out: cfg.out.join("bench").join(match precision {
                    Precision::Fp32 => "fp32",
                    Precision::Int8 => "int8",
                }),
                ..cfg.clone()
            };
            let report = run_pipeline(&run_cfg)?;
            if let Some(failed) = report.stages.iter().find(|s| s.status == StageStatus::Failed) {
                return Err(Error::invalid(format!(
                    "bench run failed at {}: {}",
                    failed.stage.name(),
                    failed.error.clone().unwrap_or_default()
                )));
            }
            for s in report.stages.iter().filter(|s| s.status == StageStatus::Ok) {
                samples.entry((precision, s.stage)).or_default().push(s.timing.wall_ms);
            }
            if let Some(e) = report.encoder {
                audio_seconds = e.audio_seconds;
                per_second.entry(precision).or_default().push(e.encoder_ms_per_audio_second);
            }
        }
    }
    let stages = cfg
        .stages
        .iter()
        .filter(|&&s| s != Stage::Decode)
        .map(|&stage| {
            let fp32 = samples.get(&(Precision::Fp32, stage)).cloned().unwrap_or_default();
            let int8 = samples.get(&(Precision::Int8, stage)).cloned().unwrap_or_default();
            let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
            StageBench {
                stage,
                fp32_median_ms: median(&fp32),
                fp32_min_ms: min(&fp32),
                int8_median_ms: median(&int8),
                int8_min_ms: min(&int8),
                int8_over_fp32: median(&int8) / median(&fp32),
                fp32_ms: fp32,
                int8_ms: int8,
            }
        })
        .collect();
    let med = |p: Precision| per_second.get(&p).map_or(f64::NAN, |v| median(v));
    Ok(BenchReport {
        version: VERSION.into(),
        repeats,
        stages,
        audio_seconds,
        fp32_encoder_ms_per_audio_second: med(Precision::Fp32),
        int8_encoder_ms_per_audio_second: med(Precision::Int8),
        reference_ms_per_audio_second: 50.0,
    })
}
