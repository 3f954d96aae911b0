//! Training objectives. Each comes as a direct numeric function and as a graph
//! builder used by the training loops; tests keep the two in agreement.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{sq_distance, Tensor};

/// Candidate frame indices for every `(k, t)`: `candidates[k - 1][t][0]` is
/// the positive `t + k`, the rest are sampled negatives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeSet {
    pub n_neg: usize,
    pub candidates: Vec<Vec<Vec<usize>>>,
}

impl NegativeSet {
    /// Negatives drawn uniformly, with replacement, from the frames of the same
    /// sequence other than the positive. Anchors are `t < len - horizon`.
    pub fn sample(len: usize, horizon: usize, n_neg: usize, rng: &mut Rng) -> Result<Self> {
        if n_neg == 0 {
            return Err(Error::invalid("negative set is empty"));
        }
        if horizon == 0 || len <= horizon {
            return Err(Error::invalid(format!("sequence of {len} frames too short for horizon {horizon}")));
        }
        let anchors = len - horizon;
        let candidates = (1..=horizon)
            .map(|k| {
                (0..anchors)
                    .map(|t| {
                        let pos = t + k;
                        let mut set = Vec::with_capacity(n_neg + 1);
                        set.push(pos);
                        for _ in 0..n_neg {
                            let j = rng.below(len - 1);
                            set.push(if j >= pos { j + 1 } else { j });
                        }
                        set
                    })
                    .collect()
            })
            .collect();
        Ok(Self { n_neg, candidates })
    }

    pub fn horizon(&self) -> usize {
        self.candidates.len()
    }

    pub fn anchors(&self) -> usize {
        self.candidates.first().map_or(0, Vec::len)
    }

    fn validate(&self, len: usize) -> Result<()> {
        if self.n_neg == 0 || self.candidates.is_empty() {
            return Err(Error::invalid("negative set is empty"));
        }
        for (k0, per_k) in self.candidates.iter().enumerate() {
            if per_k.len() != self.anchors() {
                return Err(Error::invalid("ragged negative set"));
            }
            for (t, set) in per_k.iter().enumerate() {
                if set.len() != self.n_neg + 1 || set[0] != t + k0 + 1 || set.iter().any(|&j| j >= len) {
                    return Err(Error::invalid(format!("bad candidate set at k={}, t={t}", k0 + 1)));
                }
            }
        }
        Ok(())
    }
}

/// `-log softmax(scores)[0]`, or with `inclusive = false` the positive is left
/// out of the denominator: `-s_0 + log Σ_{j≥1} exp(s_j)`.
pub fn info_nce(scores: &[f64], inclusive: bool) -> Result<f64> {
    let denom = if inclusive { scores } else { scores.get(1..).unwrap_or(&[]) };
    if scores.is_empty() || denom.is_empty() {
        return Err(Error::invalid("empty candidate set"));
    }
    let max = denom.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + denom.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    Ok(lse - scores[0])
}

/// Contrastive predictive loss averaged over horizons and anchors.
/// `z`, `c`: `[T, H]`; `predictors[k - 1]`: `[H, H]`.
pub fn cpc_loss(z: &Tensor<f64>, c: &Tensor<f64>, predictors: &[Tensor<f64>], negs: &NegativeSet, inclusive: bool) -> Result<f64> {
    if z.shape() != c.shape() || z.rank() != 2 {
        return Err(Error::invalid(format!("z {:?} and c {:?} must match", z.shape(), c.shape())));
    }
    negs.validate(z.rows())?;
    if predictors.len() != negs.horizon() {
        return Err(Error::invalid("one predictor per horizon step required"));
    }
    let h = z.cols();
    let mut total = 0.0;
    for (k0, w) in predictors.iter().enumerate() {
        if w.shape() != [h, h] {
            return Err(Error::invalid(format!("predictor {} has shape {:?}", k0 + 1, w.shape())));
        }
        for (t, set) in negs.candidates[k0].iter().enumerate() {
            // W_k c_t
            let pred: Vec<f64> = (0..h).map(|j| (0..h).map(|i| c.row(t)[i] * w.data()[i * h + j]).sum()).collect();
            let scores: Vec<f64> = set
                .iter()
                .map(|&j| z.row(j).iter().zip(&pred).map(|(a, b)| a * b).sum())
                .collect();
            total += info_nce(&scores, inclusive)?;
        }
    }
    Ok(total / (negs.horizon() * negs.anchors()) as f64)
}

/// Graph form of [`cpc_loss`] for one sequence. Scores are `c W_k zᵀ`, so the
/// predictors are `[H, H]` nodes applied on the right of `c`.
pub fn lower_cpc_loss<T: Scalar>(
    g: &mut Graph<T>,
    z: NodeId,
    c: NodeId,
    predictors: &[NodeId],
    negs: &NegativeSet,
    inclusive: bool,
) -> Result<NodeId> {
    let len = g.shape(z)[0];
    negs.validate(len)?;
    if predictors.len() != negs.horizon() {
        return Err(Error::invalid("one predictor per horizon step required"));
    }
    let anchors = negs.anchors();
    let width = negs.n_neg + 1;
    let zt = g.transpose(z)?;
    let ctx = g.slice(c, 0, 0, anchors)?;
    let mut terms = Vec::with_capacity(predictors.len());
    for (k0, &w) in predictors.iter().enumerate() {
        let pred = g.matmul(ctx, w)?;
        let all = g.matmul(pred, zt)?;
        let per_row = |cols: &dyn Fn(&[usize]) -> Vec<usize>| -> Vec<usize> {
            negs.candidates[k0]
                .iter()
                .enumerate()
                .flat_map(|(t, set)| cols(set).into_iter().map(move |j| t * len + j))
                .collect()
        };
        let term = if inclusive {
            let idx = per_row(&|set| set.to_vec());
            let scores = g.gather(all, idx, &[anchors, width])?;
            let ls = g.log_softmax(scores)?;
            let pos = g.gather(ls, (0..anchors).map(|t| t * width).collect(), &[anchors])?;
            g.sum(pos)?
        } else {
            let idx = per_row(&|set| set[1..].to_vec());
            let scores = g.gather(all, idx, &[anchors, width - 1])?;
            let ls = g.log_softmax(scores)?;
            // log Σ exp(negs) = s_neg0 - log_softmax(negs)_0
            let first = g.gather(ls, (0..anchors).map(|t| t * (width - 1)).collect(), &[anchors])?;
            let neg0 = g.gather(all, per_row(&|set| vec![set[1]]), &[anchors])?;
            let pos = g.gather(all, per_row(&|set| vec![set[0]]), &[anchors])?;
            // per-anchor loss is -(s_pos - s_neg0 + first)
            let a = g.sub(pos, neg0)?;
            let a = g.add(a, first)?;
            g.sum(a)?
        };
        terms.push(term);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    let scale = -1.0 / (negs.horizon() * anchors) as f64;
    g.scale(total, T::lit(scale))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VqLossConfig {
    pub beta: f64,
}

impl Default for VqLossConfig {
    fn default() -> Self {
        Self { beta: 0.25 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VqLossTerms {
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub total: f64,
}

/// `mean_t ‖x_t - x̂_t‖² + mean_t ‖sg[z_e] - c_q‖² + β mean_t ‖z_e - sg[c_q]‖²`
/// over `[frames, channels]` tensors. All three terms are per-frame squared
/// norms so that their balance does not depend on the channel counts.
/// Stop-gradients do not change the value, so both VQ terms share a distance.
pub fn vqvae_loss(x: &Tensor<f64>, recon: &Tensor<f64>, z_e: &Tensor<f64>, z_q: &Tensor<f64>, cfg: VqLossConfig) -> Result<VqLossTerms> {
    if x.shape() != recon.shape() || x.rank() != 2 || z_e.shape() != z_q.shape() || z_e.rank() != 2 || x.is_empty() || z_e.rows() == 0 {
        return Err(Error::invalid(format!(
            "vq-vae loss shapes: x {:?}, recon {:?}, z_e {:?}, z_q {:?}",
            x.shape(),
            recon.shape(),
            z_e.shape(),
            z_q.shape()
        )));
    }
    if cfg.beta < 0.0 {
        return Err(Error::invalid("commitment weight must be non-negative"));
    }
    let reconstruction = sq_distance(x.data(), recon.data()) / x.rows() as f64;
    let dist = (0..z_e.rows()).map(|t| sq_distance(z_e.row(t), z_q.row(t))).sum::<f64>() / z_e.rows() as f64;
    Ok(VqLossTerms {
        reconstruction,
        codebook: dist,
        commitment: cfg.beta * dist,
        total: reconstruction + dist + cfg.beta * dist,
    })
}

/// Graph nodes of the three VQ-VAE terms and their sum.
#[derive(Debug, Clone, Copy)]
pub struct VqLossNodes {
    pub reconstruction: NodeId,
    pub codebook: NodeId,
    pub commitment: NodeId,
    pub total: NodeId,
}

pub fn lower_vqvae_loss<T: Scalar>(g: &mut Graph<T>, target: NodeId, recon: NodeId, z_e: NodeId, z_q: NodeId, cfg: VqLossConfig) -> Result<VqLossNodes> {
    let d_rec = g.sq_dist(recon, target)?;
    let reconstruction = g.mean(d_rec)?;

    let ze_sg = g.stop_gradient(z_e)?;
    let d_cb = g.sq_dist(ze_sg, z_q)?;
    let codebook = g.mean(d_cb)?;

    let zq_sg = g.stop_gradient(z_q)?;
    let d_commit = g.sq_dist(z_e, zq_sg)?;
    let d_commit = g.mean(d_commit)?;
    let commitment = g.scale(d_commit, T::lit(cfg.beta))?;

    let total = g.add(reconstruction, codebook)?;
    let total = g.add(total, commitment)?;
    Ok(VqLossNodes {
        reconstruction,
        codebook,
        commitment,
        total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletConfig {
    pub margin: f64,
    /// Positives are drawn within this many frames of the anchor.
    pub window: usize,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self { margin: 0.5, window: 10 }
    }
}

/// `[‖a - p‖² - ‖a - n‖² + δ]₊` for one triplet.
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], cfg: TripletConfig) -> Result<f64> {
    if anchor.len() != positive.len() || anchor.len() != negative.len() {
        return Err(Error::invalid("triplet embeddings differ in dimension"));
    }
    if cfg.margin < 0.0 {
        return Err(Error::invalid("triplet margin must be non-negative"));
    }
    Ok((sq_distance(anchor, positive) - sq_distance(anchor, negative) + cfg.margin).max(0.0))
}

/// Batch triplet loss over rows of `[B, D]` nodes, summed over the batch.
pub fn lower_triplet_loss<T: Scalar>(g: &mut Graph<T>, anchor: NodeId, positive: NodeId, negative: NodeId, cfg: TripletConfig) -> Result<NodeId> {
    let d_pos = g.sq_dist(anchor, positive)?;
    let d_neg = g.sq_dist(anchor, negative)?;
    let gap = g.sub(d_pos, d_neg)?;
    let margin = g.constant(Tensor::scalar(T::lit(cfg.margin)));
    let shifted = g.add(gap, margin)?;
    let hinge = g.relu(shifted)?;
    g.sum(hinge)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub temperature: f64,
    /// Weight of the hard-label cross-entropy.
    pub alpha: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: 4.0,
            alpha: 0.5,
        }
    }
}

impl DistillConfig {
    fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!(
                "distillation needs T > 0 and alpha in [0, 1], got T={}, alpha={}",
                self.temperature, self.alpha
            )));
        }
        Ok(())
    }
}

fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    scaled.iter().map(|v| v - lse).collect()
}

/// `α CE(student, labels) + (1 − α) T² KL(softmax(teacher/T) ‖ softmax(student/T))`,
/// each term averaged over the batch rows.
pub fn distill_loss(student: &Tensor<f64>, teacher: &Tensor<f64>, labels: &[usize], cfg: DistillConfig) -> Result<f64> {
    cfg.validate()?;
    if student.shape() != teacher.shape() || student.rank() != 2 || student.rows() != labels.len() || student.rows() == 0 {
        return Err(Error::invalid(format!(
            "student {:?}, teacher {:?}, {} labels",
            student.shape(),
            teacher.shape(),
            labels.len()
        )));
    }
    let classes = student.cols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
    }
    let t = cfg.temperature;
    let mut ce = 0.0;
    let mut kl = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        ce -= log_softmax(student.row(b), 1.0)[label];
        let lt = log_softmax(teacher.row(b), t);
        let ls = log_softmax(student.row(b), t);
        kl += lt.iter().zip(&ls).map(|(p, q)| p.exp() * (p - q)).sum::<f64>();
    }
    let n = labels.len() as f64;
    Ok(cfg.alpha * ce / n + (1.0 - cfg.alpha) * t * t * kl / n)
}

/// Graph form of [`distill_loss`]; teacher logits enter as a constant.
pub fn lower_distill_loss<T: Scalar>(g: &mut Graph<T>, student: NodeId, teacher: &Tensor<T>, labels: &[usize], cfg: DistillConfig) -> Result<NodeId> {
    cfg.validate()?;
    let shape = g.shape(student).to_vec();
    if shape.len() != 2 || teacher.shape() != shape.as_slice() || labels.len() != shape[0] || labels.iter().any(|&l| l >= shape[1]) {
        return Err(Error::invalid(format!(
            "student {shape:?}, teacher {:?}, {} labels",
            teacher.shape(),
            labels.len()
        )));
    }
    let (rows, classes) = (shape[0], shape[1]);
    let n = rows as f64;
    let t = cfg.temperature;

    let ls = g.log_softmax(student)?;
    let picked = g.gather(ls, labels.iter().enumerate().map(|(b, &l)| b * classes + l).collect(), &[rows])?;
    let ce = g.sum(picked)?;
    let ce = g.scale(ce, T::lit(-cfg.alpha / n))?;

    let mut p_t = Vec::with_capacity(rows * classes);
    let mut plogp = 0.0;
    for b in 0..rows {
        let row: Vec<f64> = teacher.row(b).iter().map(|v| v.as_f64()).collect();
        for lp in log_softmax(&row, t) {
            p_t.push(T::lit(lp.exp()));
            plogp += lp.exp() * lp;
        }
    }
    let p_t = g.constant(Tensor::new(shape.clone(), p_t)?);
    let soft = g.scale(student, T::lit(1.0 / t))?;
    let ls_t = g.log_softmax(soft)?;
    let cross = g.mul(ls_t, p_t)?;
    let cross = g.sum(cross)?;
    // KL = Σ p log p − Σ p log q
    let entropy_term = g.constant(Tensor::scalar(T::lit(plogp)));
    let kl = g.sub(entropy_term, cross)?;
    let kl = g.scale(kl, T::lit((1.0 - cfg.alpha) * t * t / n))?;
    g.add(ce, kl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::TensorMap;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn info_nce_examples() {
        assert!(close(info_nce(&[0.3; 8], true).unwrap(), 8f64.ln(), 1e-12));
        let want = -(10f64.exp() / (10f64.exp() + 2.0)).ln();
        let got = info_nce(&[10.0, 0.0, 0.0], true).unwrap();
        assert!(close(got, want, 1e-15));
        assert!(close(got, 9.08e-5, 1e-7));
        let lo = info_nce(&[1.0, 0.5, -0.2], true).unwrap();
        let hi = info_nce(&[1.5, 0.5, -0.2], true).unwrap();
        assert!(hi < lo);
        assert!(info_nce(&[1.0], false).is_err());
        assert!(info_nce(&[], true).is_err());
    }

    #[test]
    fn exclusive_can_go_negative_inclusive_cannot() {
        assert!(info_nce(&[10.0, 0.0, 0.0], false).unwrap() < 0.0);
        assert!(info_nce(&[10.0, 0.0, 0.0], true).unwrap() >= 0.0);
    }

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn cpc_graph_matches_direct() {
        let mut rng = Rng::new(1);
        for inclusive in [true, false] {
            let z = random(&[9, 4], &mut rng);
            let c = random(&[9, 4], &mut rng);
            let ws: Vec<Tensor<f64>> = (0..3).map(|_| random(&[4, 4], &mut rng)).collect();
            let negs = NegativeSet::sample(9, 3, 5, &mut rng).unwrap();
            let direct = cpc_loss(&z, &c, &ws, &negs, inclusive).unwrap();

            let mut g = Graph::new();
            let zn = g.input("z", &[9, 4]);
            let cn = g.input("c", &[9, 4]);
            let wn: Vec<NodeId> = (1..=3).map(|k| g.param(format!("w{k}"), &[4, 4])).collect();
            let loss = lower_cpc_loss(&mut g, zn, cn, &wn, &negs, inclusive).unwrap();
            let params: TensorMap<f64> = ws.iter().enumerate().map(|(i, w)| (format!("w{}", i + 1), w.clone())).collect();
            let inputs: TensorMap<f64> = [("z".to_string(), z.clone()), ("c".to_string(), c.clone())].into();
            let got = g.evaluate(&params, &inputs).unwrap().scalar(loss);
            assert!(close(got, direct, 1e-12), "{inclusive}: {got} vs {direct}");
        }
    }

    #[test]
    fn negative_sets_never_hold_the_positive_twice() {
        let mut rng = Rng::new(2);
        let negs = NegativeSet::sample(12, 4, 10, &mut rng).unwrap();
        assert_eq!(negs.anchors(), 8);
        for (k0, per_k) in negs.candidates.iter().enumerate() {
            for (t, set) in per_k.iter().enumerate() {
                assert_eq!(set[0], t + k0 + 1);
                assert!(set[1..].iter().all(|&j| j != set[0] && j < 12));
            }
        }
        assert!(NegativeSet::sample(4, 4, 3, &mut rng).is_err());
        assert!(NegativeSet::sample(8, 2, 0, &mut rng).is_err());
    }

    #[test]
    fn vq_examples() {
        let x = Tensor::from_f64(vec![1, 2], &[1.0, 2.0]).unwrap();
        let recon = Tensor::from_f64(vec![1, 2], &[1.0, 1.0]).unwrap();
        let r = 1.0;
        let ze = Tensor::from_f64(vec![1, 2], &[1.0, 0.0]).unwrap();
        let zq = Tensor::zeros(&[1, 2]);
        let terms = vqvae_loss(&x, &recon, &ze, &zq, VqLossConfig::default()).unwrap();
        assert!(close(terms.total, r + 1.0 + 0.25, 1e-15));
        let same = vqvae_loss(&x, &recon, &ze, &ze, VqLossConfig::default()).unwrap();
        assert_eq!(same.total, same.reconstruction);
        assert!(vqvae_loss(&x, &ze, &ze, &Tensor::zeros(&[2, 2]), VqLossConfig::default()).is_err());
    }

    #[test]
    fn vq_graph_matches_direct_and_beta_zero_detaches() {
        let mut rng = Rng::new(3);
        let x = random(&[4, 3], &mut rng);
        let recon = random(&[4, 3], &mut rng);
        let ze = random(&[2, 5], &mut rng);
        let zq = random(&[2, 5], &mut rng);
        for beta in [0.25, 0.0] {
            let cfg = VqLossConfig { beta };
            let mut g = Graph::new();
            let xn = g.input("x", &[4, 3]);
            let rn = g.param("r", &[4, 3]);
            let zen = g.param("ze", &[2, 5]);
            let zqn = g.input("zq", &[2, 5]);
            let nodes = lower_vqvae_loss(&mut g, xn, rn, zen, zqn, cfg).unwrap();
            let params: TensorMap<f64> = [("r".to_string(), recon.clone()), ("ze".to_string(), ze.clone())].into();
            let inputs: TensorMap<f64> = [("x".to_string(), x.clone()), ("zq".to_string(), zq.clone())].into();
            let eval = g.evaluate(&params, &inputs).unwrap();
            let direct = vqvae_loss(&x, &recon, &ze, &zq, cfg).unwrap();
            assert!(close(eval.scalar(nodes.total), direct.total, 1e-12));
            if beta == 0.0 {
                let grads = g.backward(&eval, nodes.total).unwrap();
                assert!(grads.param("ze").unwrap().data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn triplet_examples() {
        let cfg = TripletConfig::default();
        let a = [0.3, -1.0];
        assert_eq!(triplet_loss(&a, &a, &a, cfg).unwrap(), 0.5);
        // d²_pos = 1, d²_neg = 2
        assert_eq!(triplet_loss(&[0.0, 0.0], &[1.0, 0.0], &[1.0, 1.0], cfg).unwrap(), 0.0);
        assert_eq!(triplet_loss(&[0.0, 0.0], &[1.0, 1.0], &[1.0, 0.0], cfg).unwrap(), 1.5);
        assert!(triplet_loss(&[0.0], &[0.0, 1.0], &[0.0], cfg).is_err());
    }

    #[test]
    fn triplet_is_rotation_invariant() {
        let mut rng = Rng::new(4);
        let cfg = TripletConfig::default();
        for _ in 0..50 {
            let v: Vec<Vec<f64>> = (0..3).map(|_| (0..2).map(|_| rng.normal()).collect()).collect();
            let th = rng.uniform(0.0, std::f64::consts::TAU);
            let rot = |p: &[f64]| vec![th.cos() * p[0] - th.sin() * p[1], th.sin() * p[0] + th.cos() * p[1]];
            let a = triplet_loss(&v[0], &v[1], &v[2], cfg).unwrap();
            let b = triplet_loss(&rot(&v[0]), &rot(&v[1]), &rot(&v[2]), cfg).unwrap();
            assert!(close(a, b, 1e-12));
        }
    }

    #[test]
    fn distill_examples() {
        let t = Tensor::from_f64(vec![1, 2], &[2.0, 0.0]).unwrap();
        let s = Tensor::from_f64(vec![1, 2], &[0.0, 0.0]).unwrap();
        let kl_only = DistillConfig {
            temperature: 1.0,
            alpha: 0.0,
        };
        assert_eq!(distill_loss(&t, &t, &[0], kl_only).unwrap(), 0.0);
        assert!(distill_loss(&s, &s, &[1], DistillConfig { temperature: 3.0, alpha: 0.0 }).unwrap().abs() < 1e-15);
        // independent evaluation of KL(softmax(2,0) ‖ softmax(0,0))
        let p = 1.0 / (1.0 + (-2f64).exp());
        let want = p * (2.0 * p).ln() + (1.0 - p) * (2.0 * (1.0 - p)).ln();
        let got = distill_loss(&s, &t, &[0], kl_only).unwrap();
        assert!(close(got, want, 1e-14), "{got} vs {want}");
        assert!(close(got, 0.327_813, 1e-6));
        assert!(distill_loss(&s, &Tensor::zeros(&[1, 3]), &[0], kl_only).is_err());
    }

    #[test]
    fn distill_graph_matches_direct() {
        let mut rng = Rng::new(5);
        let s = random(&[3, 4], &mut rng);
        let t = random(&[3, 4], &mut rng);
        let labels = [1, 3, 0];
        let cfg = DistillConfig::default();
        let mut g = Graph::new();
        let sn = g.param("s", &[3, 4]);
        let loss = lower_distill_loss(&mut g, sn, &t, &labels, cfg).unwrap();
        let params: TensorMap<f64> = [("s".to_string(), s.clone())].into();
        let got = g.evaluate(&params, &TensorMap::new()).unwrap().scalar(loss);
        assert!(close(got, distill_loss(&s, &t, &labels, cfg).unwrap(), 1e-12));
    }
}
