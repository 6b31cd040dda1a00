//! Dense vector helpers and a Householder QR for tall, thin column sets.
//!
//! Everything here works on plain `f64` slices. The matrices the audit
//! touches are either `d × K` with `K ≤ 4` or are only ever applied to
//! vectors, so a general matrix library buys nothing.

use rand::Rng;
use rand_distr::StandardNormal;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `y += alpha * x`
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|x| x.is_finite())
}

/// Standard-normal vector of length `d`.
pub fn gaussian<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

/// Outcome of [`householder_qr`]: orthonormal columns spanning the input.
#[derive(Debug, Clone)]
pub struct ThinQr {
    /// Orthonormal basis columns, one per retained pivot.
    pub q: Vec<Vec<f64>>,
    /// Diagonal of R for every input column; zero for columns judged
    /// dependent on their predecessors.
    pub r_diag: Vec<f64>,
    /// Which input columns produced a basis vector.
    pub kept: Vec<usize>,
}

/// Householder QR of the columns `cols` (each of length `d`), in the order
/// given.
///
/// A column whose residual (after reflecting away the previously accepted
/// columns) has norm below `rank_tol * reference` is treated as dependent:
/// it consumes no reflection and contributes no basis vector. `reference`
/// is the largest input column norm, which bounds every diagonal of R from
/// above. Basis signs are fixed so each retained diagonal is nonnegative.
pub fn householder_qr(cols: &[Vec<f64>], rank_tol: f64) -> ThinQr {
    let k = cols.len();
    let d = cols.first().map_or(0, Vec::len);
    let reference = cols.iter().map(|c| norm(c)).fold(0.0_f64, f64::max);

    let mut work: Vec<Vec<f64>> = cols.to_vec();
    // (row offset, unit Householder vector over rows offset..d)
    let mut reflectors: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut signs: Vec<f64> = Vec::new();
    let mut r_diag = vec![0.0; k];
    let mut kept = Vec::new();
    let mut row = 0usize;

    for j in 0..k {
        if row >= d {
            break;
        }
        let x = &work[j][row..];
        let x_norm = norm(x);
        if reference == 0.0 || x_norm <= rank_tol * reference {
            continue;
        }
        let alpha = if x[0] >= 0.0 { -x_norm } else { x_norm };
        let mut v = x.to_vec();
        v[0] -= alpha;
        let v_norm = norm(&v);
        if v_norm > 0.0 {
            for vi in v.iter_mut() {
                *vi /= v_norm;
            }
            for col in work.iter_mut().skip(j) {
                let tail = &mut col[row..];
                let proj = 2.0 * dot(&v, tail);
                axpy(tail, -proj, &v);
            }
        } else {
            // x is already a positive multiple of e_row; H = I would be
            // fine but a zero reflector keeps the bookkeeping uniform.
            v.iter_mut().for_each(|vi| *vi = 0.0);
        }
        let diag = work[j][row];
        signs.push(if diag < 0.0 { -1.0 } else { 1.0 });
        r_diag[j] = diag.abs();
        reflectors.push((row, v));
        kept.push(j);
        row += 1;
    }

    let q = (0..reflectors.len())
        .map(|i| {
            let mut e = vec![0.0; d];
            e[i] = signs[i];
            for (offset, v) in reflectors.iter().rev() {
                let tail = &mut e[*offset..];
                let proj = 2.0 * dot(v, tail);
                axpy(tail, -proj, v);
            }
            e
        })
        .collect();

    ThinQr { q, r_diag, kept }
}
