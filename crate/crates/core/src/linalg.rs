//! Small dense linear algebra over complex matrices.
//!
//! Everything in this crate operates on tiny systems (code length 4, at most
//! a few dozen devices), so a cyclic Jacobi eigensolver on the real symmetric
//! embedding of a Hermitian matrix is plenty. A complex Hermitian `A = X + iY`
//! embeds as the real symmetric `[[X, -Y], [Y, X]]`, whose spectrum is that
//! of `A` with every eigenvalue doubled.

use ndarray::{Array1, Array2};
use num_complex::Complex;

use crate::scalar::Scalar;

/// Eigen-decomposition of a real symmetric matrix by cyclic Jacobi rotations.
/// Returns `(eigenvalues, eigenvectors)` with eigenvectors in columns,
/// unsorted.
pub fn symmetric_eigen<T: Scalar>(a: &Array2<T>) -> (Array1<T>, Array2<T>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "symmetric_eigen: square matrix required");
    let mut m = a.clone();
    let mut v = Array2::<T>::eye(n);
    let eps = T::epsilon() * T::from_f64_c(64.0);

    for _sweep in 0..100 {
        let mut off = T::zero();
        for p in 0..n {
            for q in (p + 1)..n {
                off = off + m[[p, q]] * m[[p, q]];
            }
        }
        let scale = m.iter().fold(T::zero(), |acc, &x| acc + x * x);
        if off <= eps * eps * scale.max(T::min_positive_value()) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq == T::zero() {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let tau = (aqq - app) / (T::from_f64_c(2.0) * apq);
                // stable tangent of the rotation angle
                let t = {
                    let sign = if tau >= T::zero() { T::one() } else { -T::one() };
                    sign / (tau.abs() + (T::one() + tau * tau).sqrt())
                };
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let vals = Array1::from_iter((0..n).map(|i| m[[i, i]]));
    (vals, v)
}

/// Real symmetric embedding of a complex Hermitian matrix.
fn embed_hermitian<T: Scalar>(a: &Array2<Complex<T>>) -> Array2<T> {
    let n = a.nrows();
    let mut e = Array2::<T>::zeros((2 * n, 2 * n));
    for i in 0..n {
        for j in 0..n {
            let z = a[[i, j]];
            e[[i, j]] = z.re;
            e[[i + n, j + n]] = z.re;
            e[[i, j + n]] = -z.im;
            e[[i + n, j]] = z.im;
        }
    }
    e
}

/// Eigenvalues of a complex Hermitian matrix, ascending.
pub fn hermitian_eigenvalues<T: Scalar>(a: &Array2<Complex<T>>) -> Vec<T> {
    let n = a.nrows();
    let (vals, _) = symmetric_eigen(&embed_hermitian(a));
    let mut v: Vec<T> = vals.to_vec();
    v.sort_by(|x, y| x.partial_cmp(y).unwrap());
    // spectrum is doubled by the embedding; keep one copy of each pair
    v.into_iter().step_by(2).take(n).collect()
}

/// Gram matrix `A^H A` of an `L x k` complex matrix.
pub fn gram<T: Scalar>(a: &Array2<Complex<T>>) -> Array2<Complex<T>> {
    let k = a.ncols();
    let mut g = Array2::<Complex<T>>::zeros((k, k));
    for i in 0..k {
        for j in 0..k {
            let mut acc = Complex::new(T::zero(), T::zero());
            for r in 0..a.nrows() {
                acc = acc + a[[r, i]].conj() * a[[r, j]];
            }
            g[[i, j]] = acc;
        }
    }
    g
}

/// Least-squares solution of `A x = y` for a complex `L x k` matrix, in the
/// minimum-norm sense when `A` is rank deficient.
///
/// Solves the normal equations through a pseudo-inverse of the Gram matrix,
/// so it never aborts on singular selections.
pub fn lstsq<T: Scalar>(a: &Array2<Complex<T>>, y: &[Complex<T>]) -> Vec<Complex<T>> {
    let l = a.nrows();
    let k = a.ncols();
    assert_eq!(l, y.len(), "lstsq: rhs length mismatch");
    // b = A^H y
    let mut b = vec![Complex::new(T::zero(), T::zero()); k];
    for i in 0..k {
        for r in 0..l {
            b[i] = b[i] + a[[r, i]].conj() * y[r];
        }
    }
    let g = gram(a);
    // real embedding: [[X, -Y],[Y, X]] [re; im] = [b_re; b_im]
    let ge = embed_hermitian(&g);
    let (vals, vecs) = symmetric_eigen(&ge);
    let max_abs = vals.iter().fold(T::zero(), |m, &x| m.max(x.abs()));
    let tol = max_abs * T::epsilon() * T::from_f64_c((2 * k) as f64).max(T::one());
    let dim = 2 * k;
    let mut rhs = vec![T::zero(); dim];
    for i in 0..k {
        rhs[i] = b[i].re;
        rhs[i + k] = b[i].im;
    }
    // x = V diag(1/lambda) V^T rhs, dropping near-zero modes
    let mut coeff = vec![T::zero(); dim];
    for j in 0..dim {
        if vals[j].abs() <= tol {
            continue;
        }
        let mut dot = T::zero();
        for i in 0..dim {
            dot = dot + vecs[[i, j]] * rhs[i];
        }
        coeff[j] = dot / vals[j];
    }
    let mut x = vec![T::zero(); dim];
    for i in 0..dim {
        let mut acc = T::zero();
        for j in 0..dim {
            acc = acc + vecs[[i, j]] * coeff[j];
        }
        x[i] = acc;
    }
    (0..k).map(|i| Complex::new(x[i], x[i + k])).collect()
}

/// Residual `y - A x`.
pub fn residual<T: Scalar>(
    a: &Array2<Complex<T>>,
    x: &[Complex<T>],
    y: &[Complex<T>],
) -> Vec<Complex<T>> {
    let l = a.nrows();
    let k = a.ncols();
    let mut r = y.to_vec();
    for i in 0..k {
        for row in 0..l {
            r[row] = r[row] - a[[row, i]] * x[i];
        }
    }
    r
}

/// Squared Euclidean norm of a complex vector.
pub fn norm_sq<T: Scalar>(v: &[Complex<T>]) -> T {
    v.iter().map(|z| z.norm_sqr()).fold(T::zero(), |a, b| a + b)
}
