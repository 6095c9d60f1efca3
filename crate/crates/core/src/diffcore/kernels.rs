//! Raw numeric kernels shared by the graph ops and their backward passes.

use crate::error::{Error, Result};

/// Strided matrix view: element (i, j) lives at `offset + i*rs + j*cs`.
#[derive(Clone, Copy)]
pub(crate) struct Mat {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Mat {
    pub fn dense(offset: usize, rows: usize, cols: usize) -> Self {
        Mat {
            offset,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn last(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            self.offset
        } else {
            self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
        }
    }
}

/// `c = a·b + beta·c` over strided views.
pub(crate) fn gemm(a: &[f64], av: Mat, b: &[f64], bv: Mat, beta: f64, c: &mut [f64], cv: Mat) {
    assert_eq!(av.cols, bv.rows, "gemm inner dims");
    assert_eq!((av.rows, bv.cols), (cv.rows, cv.cols), "gemm output dims");
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    assert!(cv.last() < c.len(), "gemm c out of bounds");
    if av.cols == 0 {
        for i in 0..cv.rows {
            for j in 0..cv.cols {
                let p = cv.offset + i * cv.rs + j * cv.cs;
                c[p] *= beta;
            }
        }
        return;
    }
    assert!(av.last() < a.len(), "gemm a out of bounds");
    assert!(bv.last() < b.len(), "gemm b out of bounds");
    // SAFETY: every index reachable through the three views was bounds-checked above,
    // and `c` is uniquely borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            av.rows,
            av.cols,
            bv.cols,
            1.0,
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::arg(format!(
            "axis {axis} invalid for shape {shape:?}"
        )));
    }
    Ok(())
}

pub(crate) fn softmax_forward(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                max = max.max(x[base + j * inner]);
            }
            let mut total = 0.0;
            for j in 0..len {
                let e = (x[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                total += e;
            }
            for j in 0..len {
                out[base + j * inner] /= total;
            }
        }
    }
    out
}

/// dx = y ⊙ (dy − Σ_axis dy ⊙ y)
pub(crate) fn softmax_backward(y: &[f64], dy: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let dot: f64 = (0..len)
                .map(|j| dy[base + j * inner] * y[base + j * inner])
                .sum();
            for j in 0..len {
                let p = base + j * inner;
                dx[p] = y[p] * (dy[p] - dot);
            }
        }
    }
    dx
}

pub(crate) fn log_softmax_forward(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                max = max.max(x[base + j * inner]);
            }
            let lse = max
                + (0..len)
                    .map(|j| (x[base + j * inner] - max).exp())
                    .sum::<f64>()
                    .ln();
            for j in 0..len {
                out[base + j * inner] = x[base + j * inner] - lse;
            }
        }
    }
    out
}

/// dx = dy − softmax(x) ⊙ Σ_axis dy
pub(crate) fn log_softmax_backward(
    y: &[f64],
    dy: &[f64],
    shape: &[usize],
    axis: usize,
) -> Vec<f64> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let total: f64 = (0..len).map(|j| dy[base + j * inner]).sum();
            for j in 0..len {
                let p = base + j * inner;
                dx[p] = dy[p] - y[p].exp() * total;
            }
        }
    }
    dx
}

/// Row-wise normalization over the last axis. Returns (y, x_hat, inv_std).
pub(crate) fn layer_norm_forward(
    x: &[f64],
    width: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / width;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv[r] = is;
        for c in 0..width {
            let h = (row[c] - mean) * is;
            xhat[r * width + c] = h;
            y[r * width + c] = h * gamma[c] + beta[c];
        }
    }
    (y, xhat, inv)
}

/// Returns (dx, dgamma, dbeta).
pub(crate) fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    inv: &[f64],
    gamma: &[f64],
    width: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = dy.len() / width;
    let n = width as f64;
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; width];
    let mut dbeta = vec![0.0; width];
    for r in 0..rows {
        let off = r * width;
        let mut sum_dh = 0.0;
        let mut sum_dh_h = 0.0;
        for c in 0..width {
            let g = dy[off + c];
            let h = xhat[off + c];
            dgamma[c] += g * h;
            dbeta[c] += g;
            let dh = g * gamma[c];
            sum_dh += dh;
            sum_dh_h += dh * h;
        }
        for c in 0..width {
            let dh = dy[off + c] * gamma[c];
            dx[off + c] = inv[r] / n * (n * dh - sum_dh - xhat[off + c] * sum_dh_h);
        }
    }
    (dx, dgamma, dbeta)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

// tanh through one exp; absolute error stays near 1e-16, which is all GELU needs
fn tanh_abs(x: f64) -> f64 {
    if x.abs() > 20.0 {
        return x.signum();
    }
    let e = (2.0 * x).exp();
    (e - 1.0) / (e + 1.0)
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + tanh_abs(GELU_C * (x + GELU_A * x * x * x)))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = tanh_abs(GELU_C * (x + GELU_A * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::arg(format!(
            "rank mismatch for broadcast: {a:?} vs {b:?}"
        )));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::arg(format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

/// Element strides of `shape` read through `out_shape`, zero on broadcast axes.
pub(crate) fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 && out_shape[d] != 1 {
            0
        } else {
            acc
        };
        acc *= shape[d];
    }
    strides
}

/// Walks every element of `out_shape`, yielding (out index, a index, b index).
pub(crate) fn for_each_broadcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out_shape.iter().product();
    if total == 0 {
        return;
    }
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let last = rank - 1;
    let inner = out_shape[last];
    let (ia_step, ib_step) = (sa[last], sb[last]);
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut o = 0;
    loop {
        let (mut pa, mut pb) = (ia, ib);
        for _ in 0..inner {
            f(o, pa, pb);
            o += 1;
            pa += ia_step;
            pb += ib_step;
        }
        // carry into the outer axes
        let mut d = last;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            ia -= sa[d] * idx[d];
            ib -= sb[d] * idx[d];
            idx[d] = 0;
        }
    }
}

/// Sums `grad` (shaped `out_shape`) down to `shape` along broadcast axes.
pub(crate) fn reduce_to(grad: &[f64], out_shape: &[usize], shape: &[usize]) -> Vec<f64> {
    if out_shape == shape {
        return grad.to_vec();
    }
    let mut res = vec![0.0; shape.iter().product()];
    let sa = broadcast_strides(shape, out_shape);
    for_each_broadcast(out_shape, &sa, &sa, |o, ia, _| res[ia] += grad[o]);
    res
}

pub(crate) fn permute(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = vec![0.0; data.len()];
    for_each_broadcast(&out_shape, &strides, &strides, |o, i, _| out[o] = data[i]);
    (out, out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_walk_matches_naive_indexing() {
        let out = [2, 3, 4];
        let sa = broadcast_strides(&[2, 1, 4], &out);
        let sb = broadcast_strides(&[1, 3, 1], &out);
        let mut seen = Vec::new();
        for_each_broadcast(&out, &sa, &sb, |o, a, b| seen.push((o, a, b)));
        let mut expect = Vec::new();
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    expect.push((i * 12 + j * 4 + k, i * 4 + k, j));
                }
            }
        }
        assert_eq!(seen, expect);
    }

    #[test]
    fn gemm_handles_transposed_views() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]; aᵀ·b = [[26,30],[38,44]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(
            &a,
            Mat::dense(0, 2, 2).t(),
            &b,
            Mat::dense(0, 2, 2),
            0.0,
            &mut c,
            Mat::dense(0, 2, 2),
        );
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
    }

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
