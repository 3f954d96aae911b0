//! Forward and vector-Jacobian kernels for every [`Op`].

use super::graph::Op;
use crate::scalar::Scalar;
use crate::tensor::{nearest_row, Tensor};

fn tensor<T: Scalar>(shape: &[usize], data: Vec<T>) -> Tensor<T> {
    Tensor::new(shape.to_vec(), data).expect("kernel output matches inferred shape")
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

fn transpose_data<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Reorders a `[c_out, c_in, kernel]` weight into `[kernel, c_in, c_out]`.
fn weight_kio<T: Scalar>(w: &[T], c_out: usize, c_in: usize, kernel: usize) -> Vec<T> {
    let mut out = vec![T::zero(); w.len()];
    for co in 0..c_out {
        for ci in 0..c_in {
            for k in 0..kernel {
                out[(k * c_in + ci) * c_out + co] = w[(co * c_in + ci) * kernel + k];
            }
        }
    }
    out
}

pub(crate) struct ConvDims {
    pub len: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_left: usize,
    pub len_out: usize,
}

pub(crate) fn conv1d_forward<T: Scalar>(x: &[T], w: &[T], d: &ConvDims) -> Vec<T> {
    let wt = weight_kio(w, d.c_out, d.c_in, d.kernel);
    let mut out = vec![T::zero(); d.len_out * d.c_out];
    for o in 0..d.len_out {
        let row = &mut out[o * d.c_out..(o + 1) * d.c_out];
        for k in 0..d.kernel {
            let pos = (o * d.stride + k) as isize - d.pad_left as isize;
            if pos < 0 || pos as usize >= d.len {
                continue;
            }
            let xrow = &x[pos as usize * d.c_in..(pos as usize + 1) * d.c_in];
            for (ci, &xv) in xrow.iter().enumerate() {
                if xv == T::zero() {
                    continue;
                }
                let wrow = &wt[(k * d.c_in + ci) * d.c_out..(k * d.c_in + ci + 1) * d.c_out];
                for (r, &wv) in row.iter_mut().zip(wrow) {
                    *r = *r + xv * wv;
                }
            }
        }
    }
    out
}

fn conv1d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    g: &[T],
    d: &ConvDims,
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let wt = weight_kio(w, d.c_out, d.c_in, d.kernel);
    let mut dx = want_x.then(|| vec![T::zero(); d.len * d.c_in]);
    let mut dwt = want_w.then(|| vec![T::zero(); wt.len()]);
    for o in 0..d.len_out {
        let grow = &g[o * d.c_out..(o + 1) * d.c_out];
        for k in 0..d.kernel {
            let pos = (o * d.stride + k) as isize - d.pad_left as isize;
            if pos < 0 || pos as usize >= d.len {
                continue;
            }
            let pos = pos as usize;
            for ci in 0..d.c_in {
                let base = (k * d.c_in + ci) * d.c_out;
                if let Some(dx) = dx.as_mut() {
                    let wrow = &wt[base..base + d.c_out];
                    let s = grow
                        .iter()
                        .zip(wrow)
                        .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                    dx[pos * d.c_in + ci] = dx[pos * d.c_in + ci] + s;
                }
                if let Some(dwt) = dwt.as_mut() {
                    let xv = x[pos * d.c_in + ci];
                    if xv != T::zero() {
                        for (acc, &gv) in dwt[base..base + d.c_out].iter_mut().zip(grow) {
                            *acc = *acc + xv * gv;
                        }
                    }
                }
            }
        }
    }
    let dw = dwt.map(|dwt| {
        let mut dw = vec![T::zero(); dwt.len()];
        for co in 0..d.c_out {
            for ci in 0..d.c_in {
                for k in 0..d.kernel {
                    dw[(co * d.c_in + ci) * d.kernel + k] = dwt[(k * d.c_in + ci) * d.c_out + co];
                }
            }
        }
        dw
    });
    (dx, dw)
}

fn conv_dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad_left: usize, len_out: usize) -> ConvDims {
    ConvDims {
        len: x.shape()[0],
        c_in: x.shape()[1],
        c_out: w.shape()[0],
        kernel: w.shape()[2],
        stride,
        pad_left,
        len_out,
    }
}

fn softmax_rows<T: Scalar>(x: &[T], cols: usize, log: bool) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, orow) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let total = row.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp());
        if log {
            let lse = total.ln();
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = v - max - lse;
            }
        } else {
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - max).exp() / total;
            }
        }
    }
    out
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn forward<T: Scalar>(op: &Op<T>, args: &[&Tensor<T>], shape: &[usize]) -> Tensor<T> {
    let a = args[0];
    let unary = |f: &dyn Fn(T) -> T| tensor(shape, a.data().iter().map(|&v| f(v)).collect());
    match op {
        Op::Input(_) | Op::Param(_) | Op::Const(_) => unreachable!("leaves are bound, not computed"),
        Op::MatMul => {
            let (m, k, n) = (a.shape()[0], a.shape()[1], args[1].shape()[1]);
            tensor(shape, matmul(a.data(), args[1].data(), m, k, n))
        }
        Op::Conv1d {
            stride, pad_left, ..
        } => {
            let d = conv_dims(a, args[1], *stride, *pad_left, shape[0]);
            tensor(shape, conv1d_forward(a.data(), args[1].data(), &d))
        }
        Op::Add | Op::Sub | Op::Mul => {
            let b = args[1].data();
            let bl = b.len();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let y = b[i % bl];
                    match op {
                        Op::Add => x + y,
                        Op::Sub => x - y,
                        _ => x * y,
                    }
                })
                .collect();
            tensor(shape, data)
        }
        Op::Scale(c) => unary(&|v| v * *c),
        Op::Relu => unary(&|v| if v > T::zero() { v } else { T::zero() }),
        Op::Sigmoid => unary(&sigmoid),
        Op::Tanh => unary(&|v| v.tanh()),
        Op::Exp => unary(&|v| v.exp()),
        Op::Log => unary(&|v| v.ln()),
        Op::StopGradient => a.clone(),
        Op::Sum => Tensor::scalar(a.data().iter().copied().sum()),
        Op::Mean => {
            let n = T::lit(a.len() as f64);
            Tensor::scalar(a.data().iter().copied().sum::<T>() / n)
        }
        Op::MeanRows => {
            let (rows, cols) = (a.shape()[0], a.shape()[1]);
            let mut out = vec![T::zero(); cols];
            for r in a.data().chunks_exact(cols) {
                for (o, &v) in out.iter_mut().zip(r) {
                    *o = *o + v;
                }
            }
            let n = T::lit(rows as f64);
            tensor(shape, out.into_iter().map(|v| v / n).collect())
        }
        Op::SqDist => {
            let cols = a.cols();
            let data = a
                .data()
                .chunks_exact(cols)
                .zip(args[1].data().chunks_exact(cols))
                .map(|(x, y)| crate::tensor::sq_distance(x, y))
                .collect();
            tensor(shape, data)
        }
        Op::Softmax => tensor(shape, softmax_rows(a.data(), a.cols(), false)),
        Op::LogSoftmax => tensor(shape, softmax_rows(a.data(), a.cols(), true)),
        Op::Concat { axis } => {
            let (outer, inner) = outer_inner(shape, *axis);
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for part in args {
                    let chunk = part.shape()[*axis] * inner;
                    data.extend_from_slice(&part.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            tensor(shape, data)
        }
        Op::Slice { axis, start, end } => {
            let (outer, inner) = outer_inner(a.shape(), *axis);
            let full = a.shape()[*axis] * inner;
            let mut data = Vec::with_capacity(outer * (end - start) * inner);
            for o in 0..outer {
                data.extend_from_slice(&a.data()[o * full + start * inner..o * full + end * inner]);
            }
            tensor(shape, data)
        }
        Op::Transpose => tensor(shape, transpose_data(a.data(), a.shape()[0], a.shape()[1])),
        Op::Reshape(_) => tensor(shape, a.data().to_vec()),
        Op::Gather { indices, .. } => tensor(shape, indices.iter().map(|&i| a.data()[i]).collect()),
        Op::NearestCode => {
            let cb = args[1];
            let dim = cb.cols();
            let mut data = Vec::with_capacity(a.len());
            for row in a.data().chunks_exact(dim) {
                let (q, _) = nearest_row(cb.data(), dim, row);
                data.extend_from_slice(cb.row(q));
            }
            tensor(shape, data)
        }
        Op::StraightThrough => args[1].clone(),
    }
}

/// Returns one optional gradient per input. Entries for inputs with
/// `wants[i] == false` may be `None`.
pub(crate) fn backward<T: Scalar>(
    op: &Op<T>,
    args: &[&Tensor<T>],
    out: &Tensor<T>,
    g: &Tensor<T>,
    wants: &[bool],
) -> Vec<Option<Tensor<T>>> {
    let a = args[0];
    let gd = g.data();
    let like = |t: &Tensor<T>, data: Vec<T>| tensor(t.shape(), data);
    let elementwise = |f: &dyn Fn(usize) -> T| {
        vec![Some(like(a, (0..a.len()).map(|i| gd[i] * f(i)).collect()))]
    };
    match op {
        Op::Input(_) | Op::Param(_) | Op::Const(_) => vec![],
        Op::MatMul => {
            let b = args[1];
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let da = wants[0].then(|| {
                let bt = transpose_data(b.data(), k, n);
                like(a, matmul(gd, &bt, m, n, k))
            });
            let db = wants[1].then(|| {
                let at = transpose_data(a.data(), m, k);
                like(b, matmul(&at, gd, k, m, n))
            });
            vec![da, db]
        }
        Op::Conv1d {
            stride, pad_left, ..
        } => {
            let w = args[1];
            let d = conv_dims(a, w, *stride, *pad_left, out.shape()[0]);
            let (dx, dw) = conv1d_backward(a.data(), w.data(), gd, &d, wants[0], wants[1]);
            vec![dx.map(|v| like(a, v)), dw.map(|v| like(w, v))]
        }
        Op::Add | Op::Sub | Op::Mul => {
            let b = args[1];
            let bl = b.len();
            let da = wants[0].then(|| match op {
                Op::Mul => like(a, (0..a.len()).map(|i| gd[i] * b.data()[i % bl]).collect()),
                _ => g.clone(),
            });
            let db = wants[1].then(|| {
                let mut acc = vec![T::zero(); bl];
                for (i, &gv) in gd.iter().enumerate() {
                    let contrib = match op {
                        Op::Add => gv,
                        Op::Sub => -gv,
                        _ => gv * a.data()[i],
                    };
                    acc[i % bl] = acc[i % bl] + contrib;
                }
                like(b, acc)
            });
            vec![da, db]
        }
        Op::Scale(c) => elementwise(&|_| *c),
        Op::Relu => elementwise(&|i| {
            if a.data()[i] > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }),
        Op::Sigmoid => elementwise(&|i| {
            let y = out.data()[i];
            y * (T::one() - y)
        }),
        Op::Tanh => elementwise(&|i| {
            let y = out.data()[i];
            T::one() - y * y
        }),
        Op::Exp => elementwise(&|i| out.data()[i]),
        Op::Log => elementwise(&|i| T::one() / a.data()[i]),
        Op::StopGradient => vec![None],
        Op::Sum => vec![Some(Tensor::full(a.shape(), gd[0]))],
        Op::Mean => {
            let n = T::lit(a.len() as f64);
            vec![Some(Tensor::full(a.shape(), gd[0] / n))]
        }
        Op::MeanRows => {
            let (rows, cols) = (a.shape()[0], a.shape()[1]);
            let n = T::lit(rows as f64);
            let data = (0..rows * cols).map(|i| gd[i % cols] / n).collect();
            vec![Some(like(a, data))]
        }
        Op::SqDist => {
            let b = args[1];
            let cols = a.cols();
            let two = T::lit(2.0);
            let diff: Vec<T> = (0..a.len())
                .map(|i| two * (a.data()[i] - b.data()[i]) * gd[i / cols])
                .collect();
            let db = wants[1].then(|| like(b, diff.iter().map(|&v| -v).collect()));
            vec![wants[0].then(|| like(a, diff)), db]
        }
        Op::Softmax => {
            let cols = a.cols();
            let mut data = vec![T::zero(); a.len()];
            for ((y, gr), dr) in out
                .data()
                .chunks_exact(cols)
                .zip(gd.chunks_exact(cols))
                .zip(data.chunks_exact_mut(cols))
            {
                let dot = y.iter().zip(gr).fold(T::zero(), |acc, (&p, &q)| acc + p * q);
                for ((d, &p), &q) in dr.iter_mut().zip(y).zip(gr) {
                    *d = p * (q - dot);
                }
            }
            vec![Some(like(a, data))]
        }
        Op::LogSoftmax => {
            let cols = a.cols();
            let mut data = vec![T::zero(); a.len()];
            for ((y, gr), dr) in out
                .data()
                .chunks_exact(cols)
                .zip(gd.chunks_exact(cols))
                .zip(data.chunks_exact_mut(cols))
            {
                let total: T = gr.iter().copied().sum();
                for ((d, &ly), &q) in dr.iter_mut().zip(y).zip(gr) {
                    *d = q - ly.exp() * total;
                }
            }
            vec![Some(like(a, data))]
        }
        Op::Concat { axis } => {
            let (outer, inner) = outer_inner(out.shape(), *axis);
            let full = out.shape()[*axis] * inner;
            let mut offset = 0;
            let mut result = Vec::with_capacity(args.len());
            for (part, want) in args.iter().zip(wants) {
                let chunk = part.shape()[*axis] * inner;
                if *want {
                    let mut data = Vec::with_capacity(part.len());
                    for o in 0..outer {
                        data.extend_from_slice(&gd[o * full + offset..o * full + offset + chunk]);
                    }
                    result.push(Some(like(part, data)));
                } else {
                    result.push(None);
                }
                offset += chunk;
            }
            result
        }
        Op::Slice { axis, start, end } => {
            let (outer, inner) = outer_inner(a.shape(), *axis);
            let full = a.shape()[*axis] * inner;
            let width = (end - start) * inner;
            let mut data = vec![T::zero(); a.len()];
            for o in 0..outer {
                data[o * full + start * inner..o * full + start * inner + width]
                    .copy_from_slice(&gd[o * width..(o + 1) * width]);
            }
            vec![Some(like(a, data))]
        }
        Op::Transpose => {
            let (r, c) = (a.shape()[0], a.shape()[1]);
            vec![Some(like(a, transpose_data(gd, c, r)))]
        }
        Op::Reshape(_) => vec![Some(like(a, gd.to_vec()))],
        Op::Gather { indices, .. } => {
            let mut data = vec![T::zero(); a.len()];
            for (&i, &gv) in indices.iter().zip(gd) {
                data[i] = data[i] + gv;
            }
            vec![Some(like(a, data))]
        }
        Op::NearestCode => {
            let cb = args[1];
            let dim = cb.cols();
            let dcb = wants[1].then(|| {
                let mut data = vec![T::zero(); cb.len()];
                for (row, grow) in a.data().chunks_exact(dim).zip(gd.chunks_exact(dim)) {
                    let (q, _) = nearest_row(cb.data(), dim, row);
                    for (d, &gv) in data[q * dim..(q + 1) * dim].iter_mut().zip(grow) {
                        *d = *d + gv;
                    }
                }
                like(cb, data)
            });
            vec![None, dcb]
        }
        Op::StraightThrough => vec![wants[0].then(|| g.clone()), None],
    }
}
