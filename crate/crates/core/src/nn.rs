//! A small sequential layer description that can be lowered into a [`Graph`]
//! for training or interpreted directly by the integer inference engine.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, TensorMap};
use crate::error::Result;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    /// Output length `ceil(len / stride)`; left pad `(kernel - stride) / 2`,
    /// the remainder on the right.
    Same,
    Fixed(usize, usize),
}

impl Padding {
    pub fn resolve(self, len: usize, kernel: usize, stride: usize) -> (usize, usize) {
        match self {
            Padding::Fixed(l, r) => (l, r),
            Padding::Same => {
                let out = len.div_ceil(stride).max(1);
                let total = ((out - 1) * stride + kernel).saturating_sub(len);
                let left = (kernel.saturating_sub(stride) / 2).min(total);
                (left, total - left)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Conv1d {
        name: String,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    Linear {
        name: String,
        d_in: usize,
        d_out: usize,
    },
    /// Fixed per-channel standardization `(x - mean) * inv_std`. Its tensors are
    /// buffers, excluded from optimization.
    Normalize { name: String, dim: usize },
    Relu,
    /// `[time, c] -> [1, c]`
    MeanPool,
    /// Subtracts the per-channel mean over time, removing whatever is static
    /// across the whole sequence.
    CenterTime,
    /// Scales every frame to unit root-mean-square, keeping only its direction.
    RmsNormalize,
    /// Scales every row to unit Euclidean norm.
    L2Normalize,
    /// Nearest-neighbour repetition along time.
    Upsample { factor: usize },
    /// Gated recurrent unit over time, `[time, d_in] -> [time, hidden]`.
    Gru {
        name: String,
        d_in: usize,
        hidden: usize,
    },
}

impl Layer {
    pub fn conv(name: impl Into<String>, c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: Padding) -> Self {
        Layer::Conv1d {
            name: name.into(),
            c_in,
            c_out,
            kernel,
            stride,
            padding,
        }
    }

    pub fn linear(name: impl Into<String>, d_in: usize, d_out: usize) -> Self {
        Layer::Linear {
            name: name.into(),
            d_in,
            d_out,
        }
    }

    /// `(parameter name, shape, fan_in)` for every parameter of the layer.
    pub fn params(&self) -> Vec<(String, Vec<usize>, usize)> {
        match self {
            Layer::Conv1d {
                name,
                c_in,
                c_out,
                kernel,
                ..
            } => vec![
                (format!("{name}.w"), vec![*c_out, *c_in, *kernel], c_in * kernel),
                (format!("{name}.b"), vec![*c_out], c_in * kernel),
            ],
            Layer::Linear { name, d_in, d_out } => vec![
                (format!("{name}.w"), vec![*d_in, *d_out], *d_in),
                (format!("{name}.b"), vec![*d_out], *d_in),
            ],
            Layer::Gru { name, d_in, hidden } => vec![
                (format!("{name}.wx"), vec![*d_in, 3 * hidden], *d_in),
                (format!("{name}.wh"), vec![*hidden, 3 * hidden], *hidden),
                (format!("{name}.b"), vec![3 * hidden], *hidden),
            ],
            Layer::Normalize { name, dim } => vec![
                (format!("{name}.mean"), vec![*dim], 0),
                (format!("{name}.inv_std"), vec![*dim], 0),
            ],
            Layer::Relu
            | Layer::MeanPool
            | Layer::CenterTime
            | Layer::RmsNormalize
            | Layer::L2Normalize
            | Layer::Upsample { .. } => Vec::new(),
        }
    }

    pub fn lower<T: Scalar>(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        match self {
            Layer::Conv1d {
                name,
                c_in,
                c_out,
                kernel,
                stride,
                padding,
            } => {
                let len = g.shape(x)[0];
                let (l, r) = padding.resolve(len, *kernel, *stride);
                let w = g.param(format!("{name}.w"), &[*c_out, *c_in, *kernel]);
                let b = g.param(format!("{name}.b"), &[*c_out]);
                let y = g.conv1d(x, w, *stride, l, r)?;
                let y = g.add(y, b)?;
                Ok(g.label(y, name.clone()))
            }
            Layer::Linear { name, d_in, d_out } => {
                let w = g.param(format!("{name}.w"), &[*d_in, *d_out]);
                let b = g.param(format!("{name}.b"), &[*d_out]);
                let y = g.matmul(x, w)?;
                let y = g.add(y, b)?;
                Ok(g.label(y, name.clone()))
            }
            Layer::Normalize { name, dim } => {
                let mean = g.param(format!("{name}.mean"), &[*dim]);
                let inv_std = g.param(format!("{name}.inv_std"), &[*dim]);
                let centred = g.sub(x, mean)?;
                g.mul(centred, inv_std)
            }
            Layer::Relu => g.relu(x),
            Layer::MeanPool => {
                let c = g.shape(x)[1];
                let m = g.mean_rows(x)?;
                g.reshape(m, &[1, c])
            }
            Layer::CenterTime => {
                let m = g.mean_rows(x)?;
                g.sub(x, m)
            }
            Layer::RmsNormalize => {
                // rows become columns so the per-frame factor broadcasts
                let sq = g.mul(x, x)?;
                let sq_t = g.transpose(sq)?;
                let ms = g.mean_rows(sq_t)?;
                let eps = g.constant(Tensor::scalar(T::lit(RMS_EPS)));
                let ms = g.add(ms, eps)?;
                let log = g.log(ms)?;
                let half = g.scale(log, T::lit(-0.5))?;
                let inv = g.exp(half)?;
                let x_t = g.transpose(x)?;
                let y_t = g.mul(x_t, inv)?;
                g.transpose(y_t)
            }
            Layer::L2Normalize => {
                // unit RMS is norm sqrt(c)
                let c = g.shape(x)[1];
                let y = Layer::RmsNormalize.lower(g, x)?;
                g.scale(y, T::lit(1.0 / (c as f64).sqrt()))
            }
            Layer::Upsample { factor } => {
                let (len, c) = (g.shape(x)[0], g.shape(x)[1]);
                let indices = (0..len * factor)
                    .flat_map(|t| {
                        let src = t / factor;
                        (src * c)..(src * c + c)
                    })
                    .collect();
                g.gather(x, indices, &[len * factor, c])
            }
            Layer::Gru { name, d_in, hidden } => gru(g, x, name, *d_in, *hidden),
        }
    }
}

/// `r = σ(x Wr + h Ur + br)`, `u = σ(x Wu + h Uu + bu)`,
/// `n = tanh(x Wn + bn + r ⊙ (h Un))`, `h' = n + u ⊙ (h - n)`.
fn gru<T: Scalar>(g: &mut Graph<T>, x: NodeId, name: &str, d_in: usize, hidden: usize) -> Result<NodeId> {
    let len = g.shape(x)[0];
    let wx = g.param(format!("{name}.wx"), &[d_in, 3 * hidden]);
    let wh = g.param(format!("{name}.wh"), &[hidden, 3 * hidden]);
    let b = g.param(format!("{name}.b"), &[3 * hidden]);
    let xw = g.matmul(x, wx)?;
    let xw = g.add(xw, b)?;
    let mut h = g.constant(Tensor::zeros(&[1, hidden]));
    let mut outputs = Vec::with_capacity(len);
    for t in 0..len {
        let xt = g.slice(xw, 0, t, t + 1)?;
        let hu = g.matmul(h, wh)?;
        let xr = g.slice(xt, 1, 0, hidden)?;
        let xu = g.slice(xt, 1, hidden, 2 * hidden)?;
        let xn = g.slice(xt, 1, 2 * hidden, 3 * hidden)?;
        let hr = g.slice(hu, 1, 0, hidden)?;
        let hz = g.slice(hu, 1, hidden, 2 * hidden)?;
        let hn = g.slice(hu, 1, 2 * hidden, 3 * hidden)?;
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r)?;
        let u = g.add(xu, hz)?;
        let u = g.sigmoid(u)?;
        let rn = g.mul(r, hn)?;
        let n = g.add(xn, rn)?;
        let n = g.tanh(n)?;
        let diff = g.sub(h, n)?;
        let gated = g.mul(u, diff)?;
        h = g.add(n, gated)?;
        outputs.push(h);
    }
    let out = g.concat(&outputs, 0)?;
    Ok(g.label(out, name.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn lower<T: Scalar>(&self, g: &mut Graph<T>, mut x: NodeId) -> Result<NodeId> {
        for layer in &self.layers {
            x = layer.lower(g, x)?;
        }
        Ok(x)
    }

    pub fn param_specs(&self) -> Vec<(String, Vec<usize>, usize)> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum()
    }

    /// Runs the stack on one input through a throwaway graph.
    pub fn apply<T: Scalar>(&self, params: &TensorMap<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let input = g.constant(x.clone());
        let out = self.lower(&mut g, input)?;
        Ok(g.evaluate(params, &TensorMap::new())?.get(out).clone())
    }

    /// Output of every layer in order; the last entry equals [`Self::apply`].
    pub fn trace<T: Scalar>(&self, params: &TensorMap<T>, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let mut node = g.constant(x.clone());
        let mut outputs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            node = layer.lower(&mut g, node)?;
            outputs.push(node);
        }
        let eval = g.evaluate(params, &TensorMap::new())?;
        Ok(outputs.into_iter().map(|n| eval.get(n).clone()).collect())
    }

    /// Applies the stack layer by layer, passing each output through `hook`.
    pub fn apply_with<T: Scalar>(
        &self,
        params: &TensorMap<T>,
        x: &Tensor<T>,
        mut hook: impl FnMut(usize, Tensor<T>) -> Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut g = Graph::new();
            let input = g.constant(cur);
            let out = layer.lower(&mut g, input)?;
            cur = hook(i, g.evaluate(params, &TensorMap::new())?.get(out).clone());
        }
        Ok(cur)
    }
}

/// Buffers (normalization statistics) live under this prefix and are never optimized.
pub const BUFFER_PREFIX: &str = "frontend.";

/// Added to the mean square before [`Layer::RmsNormalize`] divides by it.
pub const RMS_EPS: f64 = 1e-6;

pub fn is_trainable(name: &str) -> bool {
    !name.starts_with(BUFFER_PREFIX)
}

/// Uniform initialization drawn in the order given: conv and linear weights
/// (`.w`) use the ReLU-preserving bound `sqrt(6/fan_in)`, everything else
/// `1/sqrt(fan_in)`. Buffers start as the identity transform.
pub fn init_params(specs: &[(String, Vec<usize>, usize)], rng: &mut Rng) -> TensorMap<f64> {
    let mut out = BTreeMap::new();
    for (name, shape, fan_in) in specs {
        if !is_trainable(name) {
            let fill = if name.ends_with(".inv_std") { 1.0 } else { 0.0 };
            out.insert(name.clone(), Tensor::full(shape, fill));
            continue;
        }
        let gain = if name.ends_with(".w") { 6.0 } else { 1.0 };
        let bound = (gain / *fan_in.max(&1) as f64).sqrt();
        let n: usize = shape.iter().product();
        // drawn at storage precision so a checkpoint of the initial state is exact
        let data = (0..n).map(|_| rng.uniform(-bound, bound) as f32 as f64).collect();
        out.insert(name.clone(), Tensor::new(shape.clone(), data).expect("spec shape"));
    }
    out
}

/// Casts every tensor of a parameter map.
pub fn cast_params<A: Scalar, B: Scalar>(params: &TensorMap<A>) -> TensorMap<B> {
    params.iter().map(|(k, v)| (k.clone(), v.cast())).collect()
}

pub fn count_params<T: Scalar>(params: &TensorMap<T>) -> usize {
    params.values().map(Tensor::len).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_gives_ceil_length() {
        for len in 1..200 {
            for (k, s) in [(10, 5), (8, 4), (4, 2), (3, 1), (4, 2)] {
                if len + 10 < k {
                    continue;
                }
                let (l, r) = Padding::Same.resolve(len, k, s);
                let out = (len + l + r - k) / s + 1;
                assert_eq!(out, len.div_ceil(s), "len {len} k {k} s {s}");
            }
        }
    }

    #[test]
    fn gru_one_step_matches_hand_arithmetic() {
        // 1-dim GRU: wx = [a_r, a_u, a_n], wh = [c_r, c_u, c_n], b = [b_r, b_u, b_n]
        let layer = Layer::Gru {
            name: "g".into(),
            d_in: 1,
            hidden: 1,
        };
        let mut p = TensorMap::new();
        p.insert("g.wx".into(), Tensor::from_f64(vec![1, 3], &[0.5, -0.3, 0.8]).unwrap());
        p.insert("g.wh".into(), Tensor::from_f64(vec![1, 3], &[0.2, 0.4, -0.6]).unwrap());
        p.insert("g.b".into(), Tensor::from_f64(vec![3], &[0.1, 0.0, -0.2]).unwrap());
        let x: Tensor<f64> = Tensor::from_f64(vec![2, 1], &[1.0, -2.0]).unwrap();
        let out = Sequential::new(vec![layer]).apply(&p, &x).unwrap();

        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let step = |h: f64, x: f64| {
            let r = sig(0.5 * x + 0.1 + 0.2 * h);
            let u = sig(-0.3 * x + 0.4 * h);
            let n = (0.8 * x - 0.2 + r * (-0.6 * h)).tanh();
            n + u * (h - n)
        };
        let h1 = step(0.0, 1.0);
        let h2 = step(h1, -2.0);
        assert!((out.data()[0] - h1).abs() < 1e-12);
        assert!((out.data()[1] - h2).abs() < 1e-12);
    }

    #[test]
    fn upsample_repeats_rows() {
        let seq = Sequential::new(vec![Layer::Upsample { factor: 2 }]);
        let x: Tensor<f64> = Tensor::from_f64(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = seq.apply(&TensorMap::new(), &x).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);
    }

    #[test]
    fn center_time_removes_channel_means() {
        let seq = Sequential::new(vec![Layer::CenterTime]);
        let x: Tensor<f64> = Tensor::from_f64(vec![2, 2], &[1.0, 10.0, 3.0, 20.0]).unwrap();
        let y = seq.apply(&TensorMap::new(), &x).unwrap();
        assert_eq!(y.data(), &[-1.0, -5.0, 1.0, 5.0]);
    }

    #[test]
    fn rms_normalize_keeps_direction_at_unit_rms() {
        let seq = Sequential::new(vec![Layer::RmsNormalize]);
        let x: Tensor<f64> = Tensor::from_f64(vec![2, 2], &[3.0, 4.0, -6.0, 8.0]).unwrap();
        let y = seq.apply(&TensorMap::new(), &x).unwrap();
        // rms of (3, 4) is 5 / sqrt(2)
        let want = [3.0, 4.0, -6.0 / 2.0, 8.0 / 2.0].map(|v: f64| v * 2f64.sqrt() / 5.0);
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn l2_normalize_gives_unit_rows() {
        let seq = Sequential::new(vec![Layer::L2Normalize]);
        let x: Tensor<f64> = Tensor::from_f64(vec![2, 2], &[3.0, 4.0, -6.0, 8.0]).unwrap();
        let y = seq.apply(&TensorMap::new(), &x).unwrap();
        for (a, b) in y.data().iter().zip([0.6, 0.8, -0.6, 0.8]) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}
