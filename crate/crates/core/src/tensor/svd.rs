//! Top-2 singular value decomposition by orthogonal (block power) iteration
//! on the Gram matrix, used to project feature embeddings onto their two
//! principal components.

use super::Tensor;

#[derive(Debug, Clone)]
pub struct Svd2 {
    /// sigma[0] >= sigma[1] >= 0
    pub sigma: [f64; 2],
    /// Left singular vectors, columns of a K x 2 matrix.
    pub left: Tensor,
    /// Right singular vectors, columns of a d x 2 matrix.
    pub right: Tensor,
}

const MAX_ITERS: usize = 50_000;
const TOL: f64 = 1e-14;

/// Leading two singular triplets of an arbitrary K x d matrix (K, d >= 2).
///
/// Iterates V <- orth(M^T M V) on a 2-column block with a Rayleigh-Ritz
/// rotation each sweep. A zero matrix yields sigma = (0, 0) with an
/// arbitrary orthonormal basis.
pub fn svd_top2(m: &Tensor) -> Svd2 {
    assert_eq!(m.shape.len(), 2, "svd_top2 expects a 2-D matrix");
    let (rows, cols) = (m.shape[0], m.shape[1]);
    assert!(rows >= 2 && cols >= 2, "svd_top2 needs at least a 2x2 matrix");

    let frob: f64 = m.data.iter().map(|v| v * v).sum::<f64>().sqrt();
    if frob == 0.0 {
        let mut left = Tensor::zeros(&[rows, 2]);
        left.data[0] = 1.0; // e1
        left.data[3] = 1.0; // e2 (row 1, col 1)
        let mut right = Tensor::zeros(&[cols, 2]);
        right.data[0] = 1.0;
        right.data[3] = 1.0;
        return Svd2 {
            sigma: [0.0, 0.0],
            left,
            right,
        };
    }

    // Gram matrix B = M^T M (cols x cols).
    let mut b = vec![0.0; cols * cols];
    for r in 0..rows {
        let row = &m.data[r * cols..(r + 1) * cols];
        for i in 0..cols {
            for j in 0..cols {
                b[i * cols + j] += row[i] * row[j];
            }
        }
    }

    // Deterministic full-rank start block.
    let mut v = [vec![0.0; cols], vec![0.0; cols]];
    for j in 0..cols {
        v[0][j] = 1.0 + (j as f64 + 1.0) * 0.01;
        v[1][j] = if j % 2 == 0 { 1.0 } else { -1.0 } + (j as f64) * 0.003;
    }
    orthonormalize(&mut v);

    let mut prev = [0.0f64; 2];
    for _ in 0..MAX_ITERS {
        let mut w = [mat_vec(&b, &v[0], cols), mat_vec(&b, &v[1], cols)];
        orthonormalize(&mut w);
        let eig0 = quad_form(&b, &w[0], cols);
        let eig1 = quad_form(&b, &w[1], cols);
        let eigs = if eig0 >= eig1 {
            [eig0, eig1]
        } else {
            w.swap(0, 1);
            [eig1, eig0]
        };
        let delta = (eigs[0] - prev[0]).abs() + (eigs[1] - prev[1]).abs();
        prev = eigs;
        v = w;
        if delta <= TOL * frob * frob {
            break;
        }
    }

    // Rayleigh-Ritz on the converged subspace: diagonalize V^T B V so the
    // two columns line up with eigenvectors even when the gap is small.
    {
        let bv0 = mat_vec(&b, &v[0], cols);
        let bv1 = mat_vec(&b, &v[1], cols);
        let h00 = dot(&v[0], &bv0);
        let h01 = dot(&v[0], &bv1);
        let h11 = dot(&v[1], &bv1);
        let (c, s) = jacobi_rotation(h00, h01, h11);
        let r0: Vec<f64> = (0..cols).map(|j| c * v[0][j] - s * v[1][j]).collect();
        let r1: Vec<f64> = (0..cols).map(|j| s * v[0][j] + c * v[1][j]).collect();
        v = [r0, r1];
        if quad_form(&b, &v[0], cols) < quad_form(&b, &v[1], cols) {
            v.swap(0, 1);
        }
    }

    let sigma0 = quad_form(&b, &v[0], cols).max(0.0).sqrt();
    let sigma1 = quad_form(&b, &v[1], cols).max(0.0).sqrt();

    // Left vectors u_i = M v_i / sigma_i; fall back to an arbitrary unit
    // vector orthogonal to u_0 when sigma_i vanishes (rank-1 input).
    let mut left = Tensor::zeros(&[rows, 2]);
    let mut right = Tensor::zeros(&[cols, 2]);
    for (i, (vi, sig)) in v.iter().zip([sigma0, sigma1]).enumerate() {
        for j in 0..cols {
            right.data[j * 2 + i] = vi[j];
        }
        let mut u: Vec<f64> = (0..rows)
            .map(|r| dot(&m.data[r * cols..(r + 1) * cols], vi))
            .collect();
        let nrm = dot(&u, &u).sqrt();
        if sig > 1e-300 && nrm > 1e-300 {
            for x in u.iter_mut() {
                *x /= nrm;
            }
        } else {
            // degenerate direction: pick a deterministic unit vector
            // orthogonal to the existing left column
            u = vec![0.0; rows];
            u[i.min(rows - 1)] = 1.0;
            if i == 1 {
                let u0: Vec<f64> = (0..rows).map(|r| left.data[r * 2]).collect();
                let proj = dot(&u, &u0);
                for r in 0..rows {
                    u[r] -= proj * u0[r];
                }
                let n = dot(&u, &u).sqrt();
                if n > 1e-300 {
                    for x in u.iter_mut() {
                        *x /= n;
                    }
                } else {
                    u = vec![0.0; rows];
                    u[(i + 1) % rows] = 1.0;
                }
            }
        }
        for r in 0..rows {
            left.data[r * 2 + i] = u[r];
        }
    }

    Svd2 {
        sigma: [sigma0, sigma1],
        left,
        right,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mat_vec(b: &[f64], v: &[f64], n: usize) -> Vec<f64> {
    (0..n).map(|i| dot(&b[i * n..(i + 1) * n], v)).collect()
}

fn quad_form(b: &[f64], v: &[f64], n: usize) -> f64 {
    dot(v, &mat_vec(b, v, n))
}

/// Gram-Schmidt on two vectors in place, with a deterministic replacement
/// if the second collapses onto the first.
fn orthonormalize(v: &mut [Vec<f64>]) {
    let n0 = dot(&v[0], &v[0]).sqrt();
    if n0 > 1e-300 {
        for x in v[0].iter_mut() {
            *x /= n0;
        }
    } else {
        v[0].iter_mut().for_each(|x| *x = 0.0);
        v[0][0] = 1.0;
    }
    let proj = dot(&v[0], &v[1]);
    let v0 = v[0].clone();
    for (x, y) in v[1].iter_mut().zip(&v0) {
        *x -= proj * y;
    }
    let n1 = dot(&v[1], &v[1]).sqrt();
    if n1 > 1e-12 {
        for x in v[1].iter_mut() {
            *x /= n1;
        }
    } else {
        // restart second direction against a shifted basis vector
        let n = v[1].len();
        for j in 0..n {
            v[1][j] = if j == 1 { 1.0 } else { 0.0 };
        }
        let proj = dot(&v0, &v[1]);
        for (x, y) in v[1].iter_mut().zip(&v0) {
            *x -= proj * y;
        }
        let n1 = dot(&v[1], &v[1]).sqrt();
        for x in v[1].iter_mut() {
            *x /= n1;
        }
    }
}

/// Rotation (c, s) diagonalizing the symmetric 2x2 [[h00, h01], [h01, h11]].
fn jacobi_rotation(h00: f64, h01: f64, h11: f64) -> (f64, f64) {
    if h01.abs() < 1e-300 {
        return (1.0, 0.0);
    }
    let tau = (h11 - h00) / (2.0 * h01);
    let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
    let c = 1.0 / (1.0 + t * t).sqrt();
    (c, t * c)
}
