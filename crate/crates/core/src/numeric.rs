//! Max-shifted log-sum-exp and friends.

/// `ln Σ exp(v_i)` evaluated with a max shift. Returns `-inf` for an empty
/// slice or when every entry is `-inf`.
pub fn lse(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m.is_infinite() || m.is_nan() {
        return m;
    }
    let s: f64 = v.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Softmax written into `out`; returns the log-normalizer.
pub fn softmax_into(v: &[f64], out: &mut [f64]) -> f64 {
    debug_assert_eq!(v.len(), out.len());
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &x) in out.iter_mut().zip(v) {
        *o = (x - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
    m + s.ln()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    softmax_into(v, &mut out);
    out
}

/// `v - lse(v)`.
pub fn log_softmax(v: &[f64]) -> Vec<f64> {
    let z = lse(v);
    v.iter().map(|&x| x - z).collect()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

#[inline]
pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}


/// `out += M x` for a column-major nalgebra matrix.
#[inline]
pub fn mat_vec_add(out: &mut [f64], m: &nalgebra::DMatrix<f64>, x: &[f64]) {
    let rows = m.nrows();
    debug_assert_eq!(out.len(), rows);
    debug_assert_eq!(x.len(), m.ncols());
    let data = m.as_slice();
    for (j, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        let col = &data[j * rows..(j + 1) * rows];
        for (o, &c) in out.iter_mut().zip(col) {
            *o += c * xj;
        }
    }
}

/// `out += Mᵀ y` for a column-major nalgebra matrix.
#[inline]
pub fn mat_t_vec_add(out: &mut [f64], m: &nalgebra::DMatrix<f64>, y: &[f64]) {
    let rows = m.nrows();
    debug_assert_eq!(y.len(), rows);
    debug_assert_eq!(out.len(), m.ncols());
    let data = m.as_slice();
    for (j, o) in out.iter_mut().enumerate() {
        *o += dot(&data[j * rows..(j + 1) * rows], y);
    }
}
