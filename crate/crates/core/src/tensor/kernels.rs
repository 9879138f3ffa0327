//! Slice-level numeric kernels shared by [`Tensor`](super::Tensor) and the tape.

/// `out[m×n] += a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[k×n] += aᵀ · g` where `a` is `m×k` and `g` is `m×n`.
pub fn matmul_at_b(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[l * n..(l + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
}

/// `out[m×k] += g · bᵀ` where `g` is `m×n` and `b` is `k×n`.
pub fn matmul_a_bt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for l in 0..k {
            let b_row = &b[l * n..(l + 1) * n];
            let dot: f64 = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            out[i * k + l] += dot;
        }
    }
}

pub fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

pub fn kron(a: &[f64], p: usize, q: usize, b: &[f64], r: usize, s: usize) -> Vec<f64> {
    let cols = q * s;
    let mut out = vec![0.0; p * r * cols];
    for i in 0..p {
        for j in 0..q {
            let aij = a[i * q + j];
            for k in 0..r {
                let dst = (i * r + k) * cols + j * s;
                for l in 0..s {
                    out[dst + l] = aij * b[k * s + l];
                }
            }
        }
    }
    out
}

/// `out[m×(q·s)] = x[m×(p·r)] · (A[p×q] ⊗ B[r×s])` without materializing the
/// Kronecker product: output block `j` is `Σ_i A[i, j] · x_i · B`.
#[allow(clippy::too_many_arguments)]
pub fn kron_matmul(
    x: &[f64],
    m: usize,
    a: &[f64],
    p: usize,
    q: usize,
    b: &[f64],
    r: usize,
    s: usize,
    out: &mut [f64],
) {
    let in_cols = p * r;
    let out_cols = q * s;
    // xb[row, i, :] = x_i[row, :] · B
    let mut xb = vec![0.0; m * p * s];
    for row in 0..m {
        for i in 0..p {
            let xi = &x[row * in_cols + i * r..row * in_cols + (i + 1) * r];
            let dst = &mut xb[(row * p + i) * s..(row * p + i + 1) * s];
            for (kk, &xv) in xi.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (d, &bv) in dst.iter_mut().zip(&b[kk * s..(kk + 1) * s]) {
                    *d += xv * bv;
                }
            }
        }
    }
    for row in 0..m {
        for j in 0..q {
            let dst = &mut out[row * out_cols + j * s..row * out_cols + (j + 1) * s];
            for i in 0..p {
                let aij = a[i * q + j];
                if aij == 0.0 {
                    continue;
                }
                let src = &xb[(row * p + i) * s..(row * p + i + 1) * s];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += aij * v;
                }
            }
        }
    }
}

pub fn log_softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = x.iter().map(|v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    for (o, v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

pub fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = inner.tanh();
    let d_inner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}
