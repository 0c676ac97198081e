//! Parallel vector kernels with reductions whose result does not depend on
//! the thread count: partial sums over fixed-size chunks, then a sequential
//! sum of the partials.

use rayon::prelude::*;

pub(crate) const CHUNK: usize = 8192;

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let partial: Vec<f64> = a
        .par_chunks(CHUNK)
        .zip(b.par_chunks(CHUNK))
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u * v).sum::<f64>())
        .collect();
    partial.iter().sum()
}

/// `sum_i a_i b_i w(i)` where `w` is evaluated from the global index.
pub(crate) fn weighted_dot<W>(a: &[f64], b: &[f64], w: W) -> f64
where
    W: Fn(usize) -> f64 + Sync,
{
    debug_assert_eq!(a.len(), b.len());
    let partial: Vec<f64> = a
        .par_chunks(CHUNK)
        .zip(b.par_chunks(CHUNK))
        .enumerate()
        .map(|(c, (x, y))| {
            let base = c * CHUNK;
            x.iter()
                .zip(y)
                .enumerate()
                .map(|(k, (u, v))| u * v * w(base + k))
                .sum::<f64>()
        })
        .collect();
    partial.iter().sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha x`
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.par_chunks_mut(CHUNK)
        .zip(x.par_chunks(CHUNK))
        .for_each(|(yc, xc)| {
            for (u, v) in yc.iter_mut().zip(xc) {
                *u += alpha * v;
            }
        });
}

/// `y = x + beta y`
pub(crate) fn xpby(x: &[f64], beta: f64, y: &mut [f64]) {
    y.par_chunks_mut(CHUNK)
        .zip(x.par_chunks(CHUNK))
        .for_each(|(yc, xc)| {
            for (u, v) in yc.iter_mut().zip(xc) {
                *u = v + beta * *u;
            }
        });
}

pub(crate) fn scale(alpha: f64, y: &mut [f64]) {
    y.par_chunks_mut(CHUNK).for_each(|c| c.iter_mut().for_each(|v| *v *= alpha));
}

/// `z_i = x_i * y_i`
pub(crate) fn hadamard(x: &[f64], y: &[f64], z: &mut [f64]) {
    z.par_chunks_mut(CHUNK)
        .zip(x.par_chunks(CHUNK).zip(y.par_chunks(CHUNK)))
        .for_each(|(zc, (xc, yc))| {
            for ((o, a), b) in zc.iter_mut().zip(xc).zip(yc) {
                *o = a * b;
            }
        });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reductions_match_sequential_within_rounding() {
        let a: Vec<f64> = (0..50_000).map(|i| ((i as f64) * 0.37).sin()).collect();
        let b: Vec<f64> = (0..50_000).map(|i| ((i as f64) * 0.11).cos()).collect();
        let seq: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - seq).abs() < 1e-9);
        assert_eq!(dot(&a, &b), dot(&a, &b));
        assert!((weighted_dot(&a, &b, |_| 2.0) - 2.0 * seq).abs() < 1e-9);
        let mut y = b.clone();
        axpy(2.0, &a, &mut y);
        assert!((y[7] - (b[7] + 2.0 * a[7])).abs() < 1e-15);
        xpby(&a, 0.5, &mut y);
        assert!((y[7] - (a[7] + 0.5 * (b[7] + 2.0 * a[7]))).abs() < 1e-15);
    }
}
