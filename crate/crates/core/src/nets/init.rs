// SPDX-License-Identifier: Apache-2.0

use alloc::vec;
use alloc::vec::Vec;

use crate::rng::RngStream;

pub const BIAS_STD: f64 = 0.001;

/// Row-major `rows × cols` matrix with orthonormal rows (rows ≤ cols) or
/// orthonormal columns (rows > cols), gain 1.
///
/// Built from a Gaussian matrix by Gram-Schmidt, which is the Q factor of
/// its QR decomposition with a positive diagonal in R.
pub fn orthogonal(rows: usize, cols: usize, rng: &mut RngStream) -> Vec<f64> {
    let (n, m) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    // m vectors of length n, stored vector-major
    let mut q: Vec<f64> = (0..n * m).map(|_| rng.normal()).collect();
    for j in 0..m {
        // two passes of modified Gram-Schmidt keep it orthogonal to rounding
        for _ in 0..2 {
            for i in 0..j {
                let (done, rest) = q.split_at_mut(j * n);
                let qi = &done[i * n..(i + 1) * n];
                let qj = &mut rest[..n];
                let d: f64 = qi.iter().zip(qj.iter()).map(|(a, b)| a * b).sum();
                for (b, a) in qj.iter_mut().zip(qi) {
                    *b -= d * a;
                }
            }
        }
        let qj = &mut q[j * n..(j + 1) * n];
        let norm = libm::sqrt(qj.iter().map(|v| v * v).sum::<f64>());
        for v in qj.iter_mut() {
            *v /= norm;
        }
    }
    if rows >= cols {
        // vectors are columns
        let mut out = vec![0.0; rows * cols];
        for j in 0..cols {
            for i in 0..rows {
                out[i * cols + j] = q[j * n + i];
            }
        }
        out
    } else {
        q
    }
}

/// Normal with standard deviation `std`, redrawn outside two deviations.
pub fn truncated_normal(len: usize, std: f64, rng: &mut RngStream) -> Vec<f64> {
    (0..len)
        .map(|_| loop {
            let v = rng.normal();
            if v.abs() <= 2.0 {
                break v * std;
            }
        })
        .collect()
}
