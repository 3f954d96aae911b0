//! Discrete bottlenecks: nearest-code lookup and k-means unit discovery, plus
//! the per-utterance unit files that are the only linguistic payload leaving
//! the device.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{read_tensor, write_tensor, Corpus, StoredTensor};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{nearest_row, sq_distance, Tensor};

pub const UNIT_INDEX_FILE: &str = "index.json";

/// `K × D` prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<T> {
    codes: Tensor<T>,
}

impl<T: Scalar> Codebook<T> {
    pub fn new(codes: Tensor<T>) -> Result<Self> {
        if codes.rank() != 2 || codes.rows() == 0 || codes.cols() == 0 {
            return Err(Error::invalid(format!("codebook must be a non-empty K x D matrix, got {:?}", codes.shape())));
        }
        if !codes.is_finite() {
            return Err(Error::invalid("codebook contains non-finite entries"));
        }
        Ok(Self { codes })
    }

    pub fn len(&self) -> usize {
        self.codes.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.codes.cols()
    }

    pub fn codes(&self) -> &Tensor<T> {
        &self.codes
    }

    pub fn into_codes(self) -> Tensor<T> {
        self.codes
    }

    pub fn code(&self, i: usize) -> &[T] {
        self.codes.row(i)
    }
}

/// `argmin_i ‖z_e − c_i‖²`, ties to the lowest index. The straight-through
/// gradient lives in the graph op `StraightThrough`.
pub fn vq_quantize<T: Scalar>(z_e: &[T], cb: &Codebook<T>) -> Result<(usize, Vec<T>)> {
    if z_e.len() != cb.dim() {
        return Err(Error::invalid(format!("vector of width {} against codebook width {}", z_e.len(), cb.dim())));
    }
    let (q, _) = nearest_row(cb.codes.data(), cb.dim(), z_e);
    Ok((q, cb.code(q).to_vec()))
}

/// Nearest centroid for every row of `points`.
pub fn kmeans_assign<T: Scalar>(points: &Tensor<T>, cb: &Codebook<T>) -> Result<Vec<usize>> {
    if points.rank() != 2 || points.cols() != cb.dim() {
        return Err(Error::invalid(format!(
            "points {:?} do not match codebook width {}",
            points.shape(),
            cb.dim()
        )));
    }
    Ok((0..points.rows())
        .map(|i| nearest_row(cb.codes.data(), cb.dim(), points.row(i)).0)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once the relative inertia change drops to this value.
    pub tol: f64,
    /// Independent k-means++ starts; the lowest final inertia wins.
    pub restarts: usize,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iters: 100,
            tol: 1e-6,
            restarts: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub codebook: Codebook<f64>,
    pub inertia: f64,
    /// Inertia after each assignment step of the winning start.
    pub history: Vec<f64>,
    pub iterations: usize,
    /// Set when fewer than `k` distinct points exist, so some centroids
    /// are duplicates.
    pub degenerate: bool,
}

pub fn kmeans_fit(points: &Tensor<f64>, cfg: &KMeansConfig) -> Result<KMeansFit> {
    if points.rank() != 2 {
        return Err(Error::invalid(format!("expected N x D points, got {:?}", points.shape())));
    }
    let (n, k) = (points.rows(), cfg.k);
    if k == 0 || n < k {
        return Err(Error::invalid(format!("k-means needs 1 <= k <= N, got k={k}, N={n}")));
    }
    if !points.is_finite() {
        return Err(Error::invalid("k-means points contain non-finite values"));
    }
    let mut best: Option<KMeansFit> = None;
    for start in 0..cfg.restarts.max(1) {
        let mut rng = Rng::derive(cfg.seed, start as u64);
        let fit = lloyd(points, cfg, &mut rng);
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one start"))
}

fn plus_plus_init(points: &Tensor<f64>, k: usize, rng: &mut Rng) -> (Vec<f64>, bool) {
    let (n, d) = (points.rows(), points.cols());
    let mut centroids = Vec::with_capacity(k * d);
    centroids.extend_from_slice(points.row(rng.below(n)));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_distance(points.row(i), &centroids[..d])).collect();
    let mut degenerate = false;
    for _ in 1..k {
        let pick = match rng.weighted(&nearest) {
            Some(i) => i,
            None => {
                // every point coincides with a chosen centroid
                degenerate = true;
                0
            }
        };
        let c = points.row(pick).to_vec();
        for (i, m) in nearest.iter_mut().enumerate() {
            *m = m.min(sq_distance(points.row(i), &c));
        }
        centroids.extend(c);
    }
    (centroids, degenerate)
}

fn assign(points: &Tensor<f64>, centroids: &[f64], labels: &mut [usize], dists: &mut [f64]) -> f64 {
    let d = points.cols();
    let mut inertia = 0.0;
    for i in 0..points.rows() {
        let (c, dist) = nearest_row(centroids, d, points.row(i));
        labels[i] = c;
        dists[i] = dist;
        inertia += dist;
    }
    inertia
}

fn lloyd(points: &Tensor<f64>, cfg: &KMeansConfig, rng: &mut Rng) -> KMeansFit {
    let (n, d, k) = (points.rows(), points.cols(), cfg.k);
    let (mut centroids, degenerate) = plus_plus_init(points, k, rng);
    let mut labels = vec![0; n];
    let mut dists = vec![0.0; n];
    let mut inertia = assign(points, &centroids, &mut labels, &mut dists);
    let mut history = vec![inertia];
    let mut iterations = 0;

    while iterations < cfg.max_iters {
        iterations += 1;
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for (s, &v) in sums[labels[i] * d..(labels[i] + 1) * d].iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        let mut next = centroids.clone();
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    next[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
                continue;
            }
            // empty cluster: move it onto the worst-served point
            let far = (0..n)
                .filter(|&i| !taken[i])
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if dists[b] >= dists[i] => Some(b),
                    _ => Some(i),
                });
            if let Some(i) = far {
                taken[i] = true;
                next[c * d..(c + 1) * d].copy_from_slice(points.row(i));
            }
        }
        let mut next_labels = vec![0; n];
        let mut next_dists = vec![0.0; n];
        let next_inertia = assign(points, &next, &mut next_labels, &mut next_dists);
        if next_inertia > inertia {
            // only reachable through rounding; the previous state is a fixed point
            break;
        }
        let change = (inertia - next_inertia) / inertia.max(f64::MIN_POSITIVE);
        centroids = next;
        labels = next_labels;
        dists = next_dists;
        inertia = next_inertia;
        history.push(inertia);
        if change <= cfg.tol {
            break;
        }
    }

    KMeansFit {
        codebook: Codebook::new(Tensor::new(vec![k, d], centroids).expect("k x d")).expect("finite centroids"),
        inertia,
        history,
        iterations,
        degenerate,
    }
}

/// Anything that turns a waveform into a discrete unit sequence.
pub trait UnitEncoder {
    /// Codebook size `K`; every emitted unit is below it.
    fn codes(&self) -> usize;
    /// Waveform samples per unit.
    fn frame_period(&self) -> usize;
    /// Sample position of the centre of unit 0; unit `t` is centred at
    /// `offset + t * period`.
    fn frame_offset(&self) -> usize {
        self.frame_period() / 2
    }
    fn units(&self, wave: &[f32]) -> Result<Vec<usize>>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitFileEntry {
    pub id: String,
    pub file: String,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitIndex {
    pub codes: usize,
    pub frame_period_samples: usize,
    pub frame_offset_samples: usize,
    pub files: Vec<UnitFileEntry>,
}

impl UnitIndex {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(UNIT_INDEX_FILE);
        if !path.exists() {
            return Err(Error::MissingArtifact {
                stage: "units".into(),
                path,
            });
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn total_frames(&self) -> usize {
        self.files.iter().map(|f| f.frames).sum()
    }
}

pub fn write_units(path: impl AsRef<Path>, units: &[usize]) -> Result<()> {
    let data = units
        .iter()
        .map(|&u| u16::try_from(u).map_err(|_| Error::invalid(format!("unit {u} does not fit in u16"))))
        .collect::<Result<Vec<u16>>>()?;
    write_tensor(
        path,
        &StoredTensor::U16 {
            shape: vec![data.len()],
            data,
        },
    )
}

pub fn read_units(path: impl AsRef<Path>) -> Result<Vec<u16>> {
    let t = read_tensor(path)?;
    if t.shape().len() != 1 {
        return Err(Error::invalid(format!("unit file must be rank 1, got {:?}", t.shape())));
    }
    t.into_u16()
}

/// Encodes every utterance and writes `<id>.edgt` (u16, rank 1) plus
/// `index.json` under `out_dir`, in manifest order.
pub fn export_units(corpus: &Corpus, encoder: &dyn UnitEncoder, out_dir: impl AsRef<Path>) -> Result<UnitIndex> {
    let out_dir = out_dir.as_ref();
    if encoder.codes() > usize::from(u16::MAX) + 1 {
        return Err(Error::invalid(format!("{} codes exceed the u16 unit range", encoder.codes())));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = Vec::with_capacity(corpus.records.len());
    for record in &corpus.records {
        let wave = corpus.load_waveform(record)?;
        let units = encoder.units(&wave)?;
        if let Some(&bad) = units.iter().find(|&&u| u >= encoder.codes()) {
            return Err(Error::invalid(format!("unit {bad} out of range for {} codes", encoder.codes())));
        }
        let file = format!("{}.edgt", record.id);
        write_units(out_dir.join(&file), &units)?;
        files.push(UnitFileEntry {
            id: record.id.clone(),
            file,
            frames: units.len(),
        });
    }
    let index = UnitIndex {
        codes: encoder.codes(),
        frame_period_samples: encoder.frame_period(),
        frame_offset_samples: encoder.frame_offset(),
        files,
    };
    let path: PathBuf = out_dir.join(UNIT_INDEX_FILE);
    fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::{any, prop_assert, proptest};

    fn cb(rows: &[Vec<f64>]) -> Codebook<f64> {
        Codebook::new(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn vq_examples() {
        let c = cb(&[vec![0.0, 0.0], vec![1.0, 1.0]]);
        assert_eq!(vq_quantize(&[0.9, 0.8], &c).unwrap(), (1, vec![1.0, 1.0]));
        assert_eq!(vq_quantize(&[0.5, 0.5], &c).unwrap().0, 0);
        assert!(vq_quantize(&[0.5], &c).is_err());
        let c4 = cb(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0]]);
        assert_eq!(vq_quantize(&[3.0], &c4).unwrap().0, 3);
    }

    #[test]
    fn assign_matches_scan_and_vq() {
        let mut rng = Rng::new(3);
        let codes = Tensor::new(vec![7, 3], (0..21).map(|_| rng.normal()).collect()).unwrap();
        let c = Codebook::new(codes).unwrap();
        let pts = Tensor::new(vec![1000, 3], (0..3000).map(|_| rng.normal()).collect()).unwrap();
        let got = kmeans_assign(&pts, &c).unwrap();
        for (i, &g) in got.iter().enumerate() {
            let p = pts.row(i);
            let mut best = 0;
            for j in 1..7 {
                let dj: f64 = c.code(j).iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum();
                let db: f64 = c.code(best).iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum();
                if dj < db {
                    best = j;
                }
            }
            assert_eq!(g, best);
            assert_eq!(vq_quantize(p, &c).unwrap().0, g);
        }
        assert_eq!(kmeans_assign(&Tensor::from_rows(&[vec![1.0, 1.0, 1.0]]).unwrap(), &cb(&[vec![0.0; 3], vec![2.0; 3], vec![1.0; 3]])).unwrap(), vec![2]);
        assert!(kmeans_assign(&Tensor::zeros(&[2, 2]), &c).is_err());
    }

    #[test]
    fn two_clusters_on_a_line() {
        let pts = Tensor::from_f64(vec![4, 1], &[0.0, 0.0, 10.0, 10.0]).unwrap();
        let fit = kmeans_fit(&pts, &KMeansConfig::new(2, 1)).unwrap();
        let mut c: Vec<f64> = fit.codebook.codes().data().to_vec();
        c.sort_by(f64::total_cmp);
        assert_eq!(c, vec![0.0, 10.0]);
        assert_eq!(fit.inertia, 0.0);
    }

    #[test]
    fn k_equals_n_has_zero_inertia() {
        let pts = Tensor::from_f64(vec![5, 2], &[0.0, 1.0, 2.0, 3.0, -1.0, 4.0, 7.0, 7.0, 0.5, 0.5]).unwrap();
        assert_eq!(kmeans_fit(&pts, &KMeansConfig::new(5, 9)).unwrap().inertia, 0.0);
    }

    #[test]
    fn identical_points_flag_degenerate() {
        let pts = Tensor::full(&[6, 2], 1.5);
        let fit = kmeans_fit(&pts, &KMeansConfig::new(3, 0)).unwrap();
        assert!(fit.degenerate);
        assert!(fit.codebook.codes().data().iter().all(|&v| v == 1.5));
        assert!(kmeans_fit(&pts, &KMeansConfig::new(7, 0)).is_err());
    }

    #[test]
    fn fit_is_deterministic() {
        let mut rng = Rng::new(5);
        let pts = Tensor::new(vec![200, 4], (0..800).map(|_| rng.normal()).collect()).unwrap();
        let a = kmeans_fit(&pts, &KMeansConfig::new(6, 77)).unwrap();
        let b = kmeans_fit(&pts, &KMeansConfig::new(6, 77)).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn inertia_never_increases(seed in any::<u64>(), n in 10usize..80, k in 1usize..8) {
            let mut rng = Rng::new(seed);
            let pts = Tensor::new(vec![n, 2], (0..2 * n).map(|_| rng.normal()).collect()).unwrap();
            let mut cfg = KMeansConfig::new(k, seed);
            cfg.restarts = 1;
            let fit = kmeans_fit(&pts, &cfg).unwrap();
            for w in fit.history.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
        }
    }

    #[test]
    fn unit_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.edgt");
        write_units(&path, &[0, 3, 65535]).unwrap();
        assert_eq!(read_units(&path).unwrap(), vec![0, 3, 65535]);
        assert!(write_units(&path, &[65536]).is_err());
    }
}
