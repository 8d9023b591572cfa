//! Active-device detectors: the neural detector, LS-BOMP, complex AMP, and
//! an exhaustive least-squares oracle. All share one result shape.

use ndarray::Array2;
use num_complex::Complex;

use crate::codebook::{binomial, k_subsets, SpreadingMatrix};
use crate::error::{Error, Result};
use crate::linalg;
use crate::nn::MlpModel;
use crate::scalar::Scalar;
use crate::sim::stack_real;

/// Default cap on the subsets the exhaustive oracle will enumerate.
pub const DEFAULT_ORACLE_SUBSET_CAP: u128 = 200_000;
/// Default C-AMP iteration budget and threshold tuning constant.
pub const DEFAULT_CAMP_ITERS: usize = 30;
pub const DEFAULT_CAMP_ALPHA: f64 = 1.4;

/// How the support size is decided.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DetectMode<T: Scalar> {
    /// The sparsity level is known; take the top-n scores.
    KnownN(usize),
    /// No sparsity knowledge; threshold the scores.
    Blind(T),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult<T: Scalar> {
    /// Estimated active device indices, ascending.
    pub support: Vec<usize>,
    /// Per-device confidence, higher = more likely active.
    pub scores: Vec<T>,
    /// Set when the detector fell back to matched-filter scores.
    pub fallback: bool,
}

/// Indices of the `n` largest scores, ties broken by lowest index;
/// returned ascending.
pub fn top_n_support<T: Scalar>(scores: &[T], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // stable sort keeps lower indices first among equal scores
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut out: Vec<usize> = idx.into_iter().take(n).collect();
    out.sort_unstable();
    out
}

fn resolve_support<T: Scalar>(scores: &[T], mode: DetectMode<T>) -> Result<Vec<usize>> {
    match mode {
        DetectMode::KnownN(n) => {
            if n == 0 || n > scores.len() {
                return Err(Error::Config(format!(
                    "known-n sparsity {n} out of range 1..={}",
                    scores.len()
                )));
            }
            Ok(top_n_support(scores, n))
        }
        DetectMode::Blind(threshold) => Ok(scores
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| (s >= threshold).then_some(i))
            .collect()),
    }
}

/// Neural detector: sigmoid scores on the stacked-real input.
///
/// Refuses to run when the model's recorded codebook hash does not match
/// the codebook the caller is using.
pub fn detect_dnn<T: Scalar>(
    model: &MlpModel<T>,
    codebook_hash: &str,
    y_p: &[Complex<T>],
    mode: DetectMode<T>,
) -> Result<DetectionResult<T>> {
    if model.codebook_hash != codebook_hash {
        return Err(Error::CodebookMismatch {
            expected: model.codebook_hash.clone(),
            actual: codebook_hash.to_string(),
        });
    }
    let row = stack_real(y_p);
    if row.len() != model.input_width {
        return Err(Error::Shape(format!(
            "y_p length {} does not match model input width {}",
            y_p.len(),
            model.input_width
        )));
    }
    let x = Array2::from_shape_vec((1, row.len()), row).expect("row shape");
    let probs = model.infer(&x)?;
    let scores: Vec<T> = probs.row(0).to_vec();
    let support = resolve_support(&scores, mode)?;
    Ok(DetectionResult { support, scores, fallback: false })
}

/// Greedy least-squares orthogonal matching pursuit over complex columns
/// (block size 1): pick the column best correlated with the residual, then
/// re-project onto all selected columns.
pub fn detect_ls_bomp<T: Scalar>(
    codebook: &SpreadingMatrix<T>,
    y_p: &[Complex<T>],
    n: usize,
) -> Result<DetectionResult<T>> {
    let n_dev = codebook.n_devices();
    let l = codebook.code_length();
    if n == 0 || n > n_dev {
        return Err(Error::Config(format!("sparsity {n} out of range 1..={n_dev}")));
    }
    if y_p.len() != l {
        return Err(Error::Shape(format!("y_p length {} != L {}", y_p.len(), l)));
    }
    let phi = codebook.normalized_columns();
    let mut selected: Vec<usize> = Vec::with_capacity(n);
    let mut residual = y_p.to_vec();
    for _ in 0..n {
        let mut best = None;
        let mut best_mag = -T::one();
        for j in 0..n_dev {
            if selected.contains(&j) {
                continue;
            }
            let mut dot = Complex::new(T::zero(), T::zero());
            for row in 0..l {
                dot = dot + phi[[row, j]].conj() * residual[row];
            }
            let mag = dot.norm();
            if mag > best_mag {
                best_mag = mag;
                best = Some(j);
            }
        }
        selected.push(best.expect("candidate column exists"));
        let sub = columns_submatrix(&phi, &selected);
        let x = linalg::lstsq(&sub, y_p);
        residual = linalg::residual(&sub, &x, y_p);
    }
    // earlier pick -> higher score
    let mut scores = vec![T::zero(); n_dev];
    for (rank, &j) in selected.iter().enumerate() {
        scores[j] = T::from_usize(n - rank).unwrap();
    }
    selected.sort_unstable();
    Ok(DetectionResult { support: selected, scores, fallback: false })
}

/// Complex approximate message passing with a complex soft-threshold
/// denoiser and Onsager correction. Falls back to matched-filter scores if
/// the residual blows up.
pub fn detect_camp<T: Scalar>(
    codebook: &SpreadingMatrix<T>,
    y_p: &[Complex<T>],
    n: usize,
    iters: usize,
    alpha: T,
) -> Result<DetectionResult<T>> {
    let n_dev = codebook.n_devices();
    let l = codebook.code_length();
    if n == 0 || n > n_dev {
        return Err(Error::Config(format!("sparsity {n} out of range 1..={n_dev}")));
    }
    if iters == 0 {
        return Err(Error::Config("camp needs at least one iteration".into()));
    }
    if y_p.len() != l {
        return Err(Error::Shape(format!("y_p length {} != L {}", y_p.len(), l)));
    }
    let phi = codebook.normalized_columns();
    let zero = Complex::new(T::zero(), T::zero());
    let mut x = vec![zero; n_dev];
    let mut z: Vec<Complex<T>> = y_p.to_vec();
    let y_norm_sq = linalg::norm_sq(y_p);
    let blowup = T::from_f64_c(1e12) * (y_norm_sq + T::from_f64_c(1e-30));
    let undersampling = T::from_usize(n_dev).unwrap() / T::from_usize(l).unwrap();
    let rel_tol = T::from_f64_c(1e-6);

    let mut prev_res = linalg::norm_sq(&z);
    for _ in 0..iters {
        // pseudo-data v = x + Phi^H z
        let mut v = x.clone();
        for j in 0..n_dev {
            for row in 0..l {
                v[j] = v[j] + phi[[row, j]].conj() * z[row];
            }
        }
        let tau = alpha * (linalg::norm_sq(&z) / T::from_usize(l).unwrap()).sqrt();
        // complex soft threshold and its average Wirtinger derivative
        let mut deriv_sum = T::zero();
        let mut x_new = vec![zero; n_dev];
        for j in 0..n_dev {
            let mag = v[j].norm();
            if mag > tau {
                let shrink = T::one() - tau / mag;
                x_new[j] = v[j] * shrink;
                deriv_sum = deriv_sum + (T::one() - tau / (T::from_f64_c(2.0) * mag));
            }
        }
        let onsager = deriv_sum / T::from_usize(n_dev).unwrap();
        let mut z_new: Vec<Complex<T>> = y_p.to_vec();
        for j in 0..n_dev {
            if x_new[j] != zero {
                for row in 0..l {
                    z_new[row] = z_new[row] - phi[[row, j]] * x_new[j];
                }
            }
        }
        for row in 0..l {
            z_new[row] = z_new[row] + z[row] * (undersampling * onsager);
        }
        let res = linalg::norm_sq(&z_new);
        if !res.is_finite() || res > blowup {
            // diverged: matched-filter fallback
            let mut scores = vec![T::zero(); n_dev];
            for j in 0..n_dev {
                let mut dot = zero;
                for row in 0..l {
                    dot = dot + phi[[row, j]].conj() * y_p[row];
                }
                scores[j] = dot.norm();
            }
            let support = top_n_support(&scores, n);
            return Ok(DetectionResult { support, scores, fallback: true });
        }
        x = x_new;
        z = z_new;
        let denom = prev_res.max(T::from_f64_c(1e-30));
        if ((res - prev_res).abs() / denom) < rel_tol {
            break;
        }
        prev_res = res;
    }
    let scores: Vec<T> = x.iter().map(|v| v.norm()).collect();
    let support = top_n_support(&scores, n);
    Ok(DetectionResult { support, scores, fallback: false })
}

/// Exhaustive maximum-likelihood oracle: least-squares residual over every
/// size-n support, global minimizer wins.
pub fn detect_oracle<T: Scalar>(
    codebook: &SpreadingMatrix<T>,
    y_p: &[Complex<T>],
    n: usize,
    subset_cap: u128,
) -> Result<DetectionResult<T>> {
    let n_dev = codebook.n_devices();
    let l = codebook.code_length();
    if n == 0 || n > n_dev {
        return Err(Error::Config(format!("sparsity {n} out of range 1..={n_dev}")));
    }
    if y_p.len() != l {
        return Err(Error::Shape(format!("y_p length {} != L {}", y_p.len(), l)));
    }
    let count = binomial(n_dev, n).ok_or_else(|| Error::TooExpensive("subset overflow".into()))?;
    if count > subset_cap {
        return Err(Error::TooExpensive(format!(
            "C({n_dev},{n}) = {count} supports exceeds cap {subset_cap}"
        )));
    }
    let phi = codebook.normalized_columns();
    let mut best: Option<(T, Vec<usize>, Vec<Complex<T>>)> = None;
    for subset in k_subsets(n_dev, n) {
        let sub = columns_submatrix(&phi, &subset);
        let x = linalg::lstsq(&sub, y_p);
        let res = linalg::norm_sq(&linalg::residual(&sub, &x, y_p));
        if best.as_ref().is_none_or(|(b, _, _)| res < *b) {
            best = Some((res, subset, x));
        }
    }
    let (_, support, x) = best.expect("at least one subset");
    let mut scores = vec![T::zero(); n_dev];
    for (k, &j) in support.iter().enumerate() {
        scores[j] = x[k].norm() + T::one();
    }
    Ok(DetectionResult { support, scores, fallback: false })
}

/// Least-squares residual power of `y_p` on a fixed support; the quantity
/// the oracle minimizes. Useful for dominance checks.
pub fn support_residual<T: Scalar>(
    codebook: &SpreadingMatrix<T>,
    y_p: &[Complex<T>],
    support: &[usize],
) -> T {
    if support.is_empty() {
        return linalg::norm_sq(y_p);
    }
    let phi = codebook.normalized_columns();
    let sub = columns_submatrix(&phi, support);
    let x = linalg::lstsq(&sub, y_p);
    linalg::norm_sq(&linalg::residual(&sub, &x, y_p))
}

fn columns_submatrix<T: Scalar>(
    phi: &Array2<Complex<T>>,
    cols: &[usize],
) -> Array2<Complex<T>> {
    let l = phi.nrows();
    let mut sub = Array2::<Complex<T>>::zeros((l, cols.len()));
    for (k, &j) in cols.iter().enumerate() {
        for row in 0..l {
            sub[[row, k]] = phi[[row, j]];
        }
    }
    sub
}
