//! Dense row-major matrices and the handful of row kernels the model needs.
//!
//! Every reduction runs in a fixed order so that results are bit-reproducible
//! and the incremental decoder reproduces the full forward pass exactly.

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec shape");
        Self { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `out = x · W` for `W` of shape `x.len() × out.len()`.
#[inline]
pub fn vec_mat(x: &[f64], w: &Mat, out: &mut [f64]) {
    debug_assert_eq!(x.len(), w.rows);
    debug_assert_eq!(out.len(), w.cols);
    out.fill(0.0);
    for (i, &xi) in x.iter().enumerate() {
        axpy(xi, w.row(i), out);
    }
}

/// `dx += dy · Wᵀ`.
#[inline]
pub fn vec_mat_t_acc(dy: &[f64], w: &Mat, dx: &mut [f64]) {
    debug_assert_eq!(dy.len(), w.cols);
    for (i, d) in dx.iter_mut().enumerate() {
        *d += dot(w.row(i), dy);
    }
}

/// `dW += xᵀ · dy` for a single row.
#[inline]
pub fn outer_acc(x: &[f64], dy: &[f64], dw: &mut Mat) {
    for (i, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            axpy(xi, dy, dw.row_mut(i));
        }
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Layer normalization of one row. Writes the normalized row into `xhat`,
/// the affine output into `out`, and returns the reciprocal std.
#[inline]
pub fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64], xhat: &mut [f64], out: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * rstd;
        out[i] = gain[i] * xhat[i] + bias[i];
    }
    rstd
}

/// Backward of [`layer_norm_row`]: accumulates into `dx`, `dgain`, `dbias`.
#[inline]
pub fn layer_norm_row_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: f64,
    gain: &[f64],
    dx: &mut [f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) {
    let n = dy.len() as f64;
    let mut mean_dxhat = 0.0;
    let mut mean_dxhat_xhat = 0.0;
    for i in 0..dy.len() {
        let dxh = dy[i] * gain[i];
        mean_dxhat += dxh;
        mean_dxhat_xhat += dxh * xhat[i];
        dgain[i] += dy[i] * xhat[i];
        dbias[i] += dy[i];
    }
    mean_dxhat /= n;
    mean_dxhat_xhat /= n;
    for i in 0..dy.len() {
        let dxh = dy[i] * gain[i];
        dx[i] += rstd * (dxh - mean_dxhat - xhat[i] * mean_dxhat_xhat);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[inline]
pub fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_K * u * u * u)).tanh())
}

#[inline]
pub fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_K * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * u * u)
}

/// Numerically stable `log(sum(exp(v)))`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
