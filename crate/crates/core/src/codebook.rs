//! MUSA complex spreading codebooks: sequence-space enumeration, heuristic
//! low-cross-correlation selection, and quality diagnostics.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Scalar;

/// Default cap on the number of column subsets the RIC estimator will visit.
pub const DEFAULT_RIC_SUBSET_CAP: u128 = 1_000_000;

/// The M-ary complex element constellation the sequences draw from.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexElementSet<T: Scalar> {
    pub m_ary: u8,
    pub elements: Vec<Complex<T>>,
}

impl<T: Scalar> ComplexElementSet<T> {
    /// Constellation for the given M-ary level: `{a+bi}` with `a, b` ranging
    /// over `{-1,0,1}` (M=3) or `{-2..2}` (M=5).
    pub fn new(m_ary: u8) -> Result<Self> {
        let half: i32 = match m_ary {
            3 => 1,
            5 => 2,
            other => {
                return Err(Error::Config(format!(
                    "unsupported M-ary level {other}: only 3 and 5 are defined"
                )))
            }
        };
        let mut elements = Vec::new();
        for a in -half..=half {
            for b in -half..=half {
                elements.push(Complex::new(
                    T::from_i32(a).unwrap(),
                    T::from_i32(b).unwrap(),
                ));
            }
        }
        Ok(Self { m_ary, elements })
    }
}

/// Lazily yields every nonzero length-`code_length` vector over the element
/// set, exactly once, in mixed-radix counter order.
pub fn enumerate_sequence_space<T: Scalar>(
    element_set: &ComplexElementSet<T>,
    code_length: usize,
) -> Result<impl Iterator<Item = Vec<Complex<T>>> + '_> {
    if code_length == 0 {
        return Err(Error::Config("code_length must be >= 1".into()));
    }
    let base = element_set.elements.len() as u64;
    let total = base
        .checked_pow(u32::try_from(code_length).map_err(|_| {
            Error::Config(format!("code_length {code_length} too large"))
        })?)
        .ok_or_else(|| {
            Error::Config(format!(
                "sequence space {base}^{code_length} overflows the count type"
            ))
        })?;

    let elems = &element_set.elements;
    let zero_index = elems
        .iter()
        .position(|z| z.re == T::zero() && z.im == T::zero());
    Ok((0..total).filter_map(move |mut idx| {
        let mut digits = vec![0usize; code_length];
        for d in digits.iter_mut().rev() {
            *d = (idx % base) as usize;
            idx /= base;
        }
        if let Some(zi) = zero_index {
            if digits.iter().all(|&d| d == zi) {
                return None; // all-zero vector cannot spread a signal
            }
        }
        Some(digits.iter().map(|&d| elems[d]).collect())
    }))
}

/// Total nonzero sequence count for a given constellation and length.
pub fn sequence_space_size<T: Scalar>(
    element_set: &ComplexElementSet<T>,
    code_length: usize,
) -> Result<u64> {
    let base = element_set.elements.len() as u64;
    let total = base
        .checked_pow(u32::try_from(code_length).map_err(|_| {
            Error::Config(format!("code_length {code_length} too large"))
        })?)
        .ok_or_else(|| {
            Error::Config(format!(
                "sequence space {base}^{code_length} overflows the count type"
            ))
        })?;
    Ok(total - 1)
}

/// A selected codebook: pilot-scaled spreading sequences as the columns of an
/// `L x N` complex matrix plus the selection metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct SpreadingMatrix<T: Scalar> {
    /// `L x N` matrix of raw (unnormalized) spreading sequences.
    pub columns: Array2<Complex<T>>,
    /// Cross-correlation selection threshold used by Algorithm 1.
    pub rho: T,
    /// Seed that produced this selection.
    pub seed: u64,
}

impl<T: Scalar> SpreadingMatrix<T> {
    pub fn code_length(&self) -> usize {
        self.columns.nrows()
    }

    pub fn n_devices(&self) -> usize {
        self.columns.ncols()
    }

    /// Overloading ratio in percent: `100 * N / L`.
    pub fn or_percent(&self) -> T {
        T::from_f64_c(100.0) * T::from_usize(self.n_devices()).unwrap()
            / T::from_usize(self.code_length()).unwrap()
    }

    /// Columns scaled to unit Euclidean norm.
    pub fn normalized_columns(&self) -> Array2<Complex<T>> {
        let mut m = self.columns.clone();
        for mut col in m.columns_mut() {
            let n = col.iter().map(|z| z.norm_sqr()).fold(T::zero(), |a, b| a + b).sqrt();
            if n > T::zero() {
                let inv = Complex::new(T::one() / n, T::zero());
                for z in col.iter_mut() {
                    *z = *z * inv;
                }
            }
        }
        m
    }

    /// SHA-256 of the canonical text serialization; detectors use this to
    /// check that a model and a codebook belong together.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_text().as_bytes());
        hex_string(&hasher.finalize())
    }

    /// Canonical text form: header `L N rho seed`, then one column per line
    /// as `re,im` pairs. Round-trips bit-exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{} {} {} {}\n",
            self.code_length(),
            self.n_devices(),
            self.rho,
            self.seed
        ));
        for j in 0..self.n_devices() {
            let mut parts = Vec::with_capacity(self.code_length());
            for i in 0..self.code_length() {
                let z = self.columns[[i, j]];
                parts.push(format!("{},{}", z.re, z.im));
            }
            out.push_str(&parts.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let fmt = |msg: &str| Error::Format {
            path: origin.to_string(),
            msg: msg.to_string(),
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| fmt("empty codebook file"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(fmt("header must be `L N rho seed`"));
        }
        let l: usize = fields[0].parse().map_err(|_| fmt("bad L"))?;
        let n: usize = fields[1].parse().map_err(|_| fmt("bad N"))?;
        let rho: T = fields[2].parse().map_err(|_| fmt("bad rho"))?;
        let seed: u64 = fields[3].parse().map_err(|_| fmt("bad seed"))?;
        let mut columns = Array2::<Complex<T>>::zeros((l, n));
        for j in 0..n {
            let line = lines.next().ok_or_else(|| fmt("missing column line"))?;
            let pairs: Vec<&str> = line.split_whitespace().collect();
            if pairs.len() != l {
                return Err(fmt("column length does not match header L"));
            }
            for (i, p) in pairs.iter().enumerate() {
                let (re, im) = p
                    .split_once(',')
                    .ok_or_else(|| fmt("entry must be `re,im`"))?;
                columns[[i, j]] = Complex::new(
                    re.parse().map_err(|_| fmt("bad real part"))?,
                    im.parse().map_err(|_| fmt("bad imaginary part"))?,
                );
            }
        }
        Ok(Self { columns, rho, seed })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut text = String::new();
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        loop {
            let mut line = String::new();
            if r.read_line(&mut line)? == 0 {
                break;
            }
            text.push_str(&line);
        }
        Self::from_text(&text, &path.display().to_string())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Magnitude of the normalized Hermitian inner product of two columns.
fn corr<T: Scalar>(a: &[Complex<T>], b: &[Complex<T>]) -> T {
    let mut dot = Complex::new(T::zero(), T::zero());
    let mut na = T::zero();
    let mut nb = T::zero();
    for (x, y) in a.iter().zip(b) {
        dot = dot + x.conj() * *y;
        na = na + x.norm_sqr();
        nb = nb + y.norm_sqr();
    }
    dot.norm() / (na.sqrt() * nb.sqrt())
}

/// Algorithm-1 style heuristic selection: repeatedly pick a random surviving
/// candidate, keep it, and drop every candidate whose normalized correlation
/// magnitude with the pick exceeds `rho`. Deterministic for a fixed seed.
pub fn select_low_correlation<T: Scalar, I>(
    space: I,
    n_needed: usize,
    rho: T,
    rng_seed: u64,
) -> Result<SpreadingMatrix<T>>
where
    I: IntoIterator<Item = Vec<Complex<T>>>,
{
    if n_needed == 0 {
        return Err(Error::Config("n_needed must be >= 1".into()));
    }
    if rho <= T::zero() || rho > T::one() {
        return Err(Error::Config("rho must lie in (0, 1]".into()));
    }
    let mut candidates: Vec<Vec<Complex<T>>> = space.into_iter().collect();
    if candidates.is_empty() {
        return Err(Error::Config("empty sequence space".into()));
    }
    let code_length = candidates[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut selected: Vec<Vec<Complex<T>>> = Vec::with_capacity(n_needed);
    // numeric slack so ties at the threshold survive in either scalar type
    let slack = T::from_f64_c(1e-9);
    while selected.len() < n_needed {
        if candidates.is_empty() {
            return Err(Error::ThresholdInfeasible {
                found: selected.len(),
                needed: n_needed,
                rho: rho.to_f64().unwrap_or(f64::NAN),
            });
        }
        let pick = rng.gen_range(0..candidates.len());
        let chosen = candidates.swap_remove(pick);
        candidates.retain(|c| corr(c, &chosen) <= rho + slack);
        selected.push(chosen);
    }
    let mut columns = Array2::<Complex<T>>::zeros((code_length, n_needed));
    for (j, col) in selected.iter().enumerate() {
        for (i, z) in col.iter().enumerate() {
            columns[[i, j]] = *z;
        }
    }
    Ok(SpreadingMatrix { columns, rho, seed: rng_seed })
}

/// Build an M-ary codebook for `n_devices` devices of length `code_length`.
pub fn build_codebook<T: Scalar>(
    m_ary: u8,
    code_length: usize,
    n_devices: usize,
    rho: T,
    seed: u64,
) -> Result<SpreadingMatrix<T>> {
    let set = ComplexElementSet::<T>::new(m_ary)?;
    let space = enumerate_sequence_space(&set, code_length)?;
    select_low_correlation(space, n_devices, rho, seed)
}

/// Mutual coherence: max over column pairs of the magnitude of the Hermitian
/// inner product of the l2-normalized columns.
pub fn mutual_coherence<T: Scalar>(matrix: &SpreadingMatrix<T>) -> Result<T> {
    let n = matrix.n_devices();
    if n < 2 {
        return Err(Error::Config("mutual coherence needs at least 2 columns".into()));
    }
    let cols: Vec<Vec<Complex<T>>> = (0..n)
        .map(|j| matrix.columns.column(j).to_vec())
        .collect();
    let mut best = T::zero();
    for i in 0..n {
        for j in (i + 1)..n {
            best = best.max(corr(&cols[i], &cols[j]));
        }
    }
    Ok(best)
}

/// Number of k-subsets of an n-set, or `None` on overflow.
pub fn binomial(n: usize, k: usize) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul((n - i) as u128)?;
        acc /= (i + 1) as u128;
    }
    Some(acc)
}

/// Iterates all size-`k` index subsets of `0..n` in lexicographic order.
pub fn k_subsets(n: usize, k: usize) -> impl Iterator<Item = Vec<usize>> {
    let mut current: Option<Vec<usize>> = if k <= n {
        Some((0..k).collect())
    } else {
        None
    };
    std::iter::from_fn(move || {
        let out = current.clone()?;
        // advance to the next combination
        let cur = current.as_mut().unwrap();
        let mut i = k;
        loop {
            if i == 0 {
                current = None;
                break;
            }
            i -= 1;
            if cur[i] < n - (k - i) {
                cur[i] += 1;
                for j in (i + 1)..k {
                    cur[j] = cur[j - 1] + 1;
                }
                break;
            }
        }
        Some(out)
    })
}

/// Exhaustive restricted-isometry constant estimate for sparsity `s`:
/// the largest deviation of any size-`s` normalized-column submatrix's
/// squared singular values from 1.
pub fn estimate_ric<T: Scalar>(
    matrix: &SpreadingMatrix<T>,
    sparsity: usize,
    subset_cap: u128,
) -> Result<T> {
    let n = matrix.n_devices();
    if sparsity == 0 || sparsity > n {
        return Err(Error::Config(format!(
            "sparsity {sparsity} out of range 1..={n}"
        )));
    }
    let count = binomial(n, sparsity)
        .ok_or_else(|| Error::TooExpensive("subset count overflow".into()))?;
    if count > subset_cap {
        return Err(Error::TooExpensive(format!(
            "C({n},{sparsity}) = {count} subsets exceeds cap {subset_cap}"
        )));
    }
    let normalized = matrix.normalized_columns();
    let l = matrix.code_length();
    let subsets: Vec<Vec<usize>> = k_subsets(n, sparsity).collect();
    let delta = subsets
        .par_iter()
        .map(|subset| {
            let mut sub = Array2::<Complex<T>>::zeros((l, sparsity));
            for (jj, &j) in subset.iter().enumerate() {
                for i in 0..l {
                    sub[[i, jj]] = normalized[[i, j]];
                }
            }
            let eigs = linalg::hermitian_eigenvalues(&linalg::gram(&sub));
            let lo = eigs.first().copied().unwrap_or(T::one());
            let hi = eigs.last().copied().unwrap_or(T::one());
            (hi - T::one()).max(T::one() - lo)
        })
        .reduce(|| T::zero(), |a, b| a.max(b));
    Ok(delta.max(T::zero()))
}

/// Codebook quality summary.
#[derive(Debug, Clone)]
pub struct CodebookDiagnostics<T: Scalar> {
    pub mutual_coherence: T,
    /// RIC estimate per sparsity level, `(s, delta_s)`.
    pub ric_by_sparsity: Vec<(usize, T)>,
}

pub fn diagnostics<T: Scalar>(
    matrix: &SpreadingMatrix<T>,
    max_sparsity: usize,
    subset_cap: u128,
) -> Result<CodebookDiagnostics<T>> {
    let mu = mutual_coherence(matrix)?;
    let mut ric = Vec::new();
    for s in 1..=max_sparsity.min(matrix.n_devices()) {
        ric.push((s, estimate_ric(matrix, s, subset_cap)?));
    }
    Ok(CodebookDiagnostics { mutual_coherence: mu, ric_by_sparsity: ric })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn c(re: f64, im: f64) -> Complex<f64> {
        Complex::new(re, im)
    }

    fn orthonormal_2x2() -> SpreadingMatrix<f64> {
        SpreadingMatrix {
            columns: ndarray::array![[c(1.0, 0.0), c(0.0, 0.0)], [c(0.0, 0.0), c(1.0, 0.0)]],
            rho: 0.75,
            seed: 0,
        }
    }

    #[test]
    fn element_set_sizes_and_closure() {
        let m3 = ComplexElementSet::<f64>::new(3).unwrap();
        assert_eq!(m3.elements.len(), 9);
        let m5 = ComplexElementSet::<f64>::new(5).unwrap();
        assert_eq!(m5.elements.len(), 25);
        for set in [&m3, &m5] {
            for z in &set.elements {
                assert!(set.elements.contains(&-z));
                assert!(set.elements.contains(&z.conj()));
            }
        }
        assert!(ComplexElementSet::<f64>::new(7).is_err());
    }

    #[test]
    fn enumeration_counts() {
        let m3 = ComplexElementSet::<f64>::new(3).unwrap();
        assert_eq!(enumerate_sequence_space(&m3, 4).unwrap().count(), 6560);
        assert_eq!(enumerate_sequence_space(&m3, 1).unwrap().count(), 8);
        let m5 = ComplexElementSet::<f64>::new(5).unwrap();
        assert_eq!(enumerate_sequence_space(&m5, 2).unwrap().count(), 624);
        assert_eq!(sequence_space_size(&m3, 4).unwrap(), 6560);
    }

    #[test]
    fn enumeration_excludes_zero_and_is_unique() {
        let m3 = ComplexElementSet::<f64>::new(3).unwrap();
        let seqs: Vec<_> = enumerate_sequence_space(&m3, 2).unwrap().collect();
        assert_eq!(seqs.len(), 80);
        for s in &seqs {
            assert!(s.iter().any(|z| z.norm_sqr() > 0.0));
        }
        let mut keys: Vec<String> = seqs
            .iter()
            .map(|s| s.iter().map(|z| format!("{},{};", z.re, z.im)).collect())
            .collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 80);
    }

    #[test]
    fn enumeration_rejects_overflowing_length() {
        let m3 = ComplexElementSet::<f64>::new(3).unwrap();
        assert!(matches!(
            enumerate_sequence_space(&m3, 64).err(),
            Some(Error::Config(_))
        ));
    }

    #[test]
    fn selection_respects_threshold() {
        let cb = build_codebook::<f64>(3, 4, 8, 0.75, 42).unwrap();
        assert_eq!(cb.code_length(), 4);
        assert_eq!(cb.n_devices(), 8);
        // exhaustive pairwise scan
        let mu = mutual_coherence(&cb).unwrap();
        assert!(mu <= 0.75 + 1e-9, "coherence {mu} exceeds rho");
        assert_abs_diff_eq!(cb.or_percent(), 200.0);
    }

    #[test]
    fn selection_single_column_trivial() {
        let m3 = ComplexElementSet::<f64>::new(3).unwrap();
        let space = enumerate_sequence_space(&m3, 2).unwrap();
        let cb = select_low_correlation(space, 1, 0.5, 7).unwrap();
        assert_eq!(cb.n_devices(), 1);
    }

    #[test]
    fn selection_orthogonal_space_all_selected() {
        // 3 mutually orthogonal columns survive any threshold
        let space = vec![
            vec![c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)],
            vec![c(0.0, 0.0), c(1.0, 0.0), c(0.0, 0.0)],
            vec![c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)],
        ];
        let cb = select_low_correlation(space, 3, 0.01, 123).unwrap();
        assert_eq!(cb.n_devices(), 3);
    }

    #[test]
    fn selection_infeasible_reports_found() {
        // two highly correlated columns: can never pick 3
        let space = vec![
            vec![c(1.0, 0.0), c(0.0, 0.0)],
            vec![c(1.0, 0.0), c(0.1, 0.0)],
            vec![c(1.0, 0.0), c(-0.1, 0.0)],
        ];
        match select_low_correlation(space, 3, 0.5, 9) {
            Err(Error::ThresholdInfeasible { found, needed, .. }) => {
                assert_eq!(found, 1);
                assert_eq!(needed, 3);
            }
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn selection_is_seed_deterministic() {
        let a = build_codebook::<f64>(3, 4, 8, 0.75, 5).unwrap();
        let b = build_codebook::<f64>(3, 4, 8, 0.75, 5).unwrap();
        assert_eq!(a, b);
        let c = build_codebook::<f64>(3, 4, 8, 0.75, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn coherence_orthonormal_is_zero() {
        assert_abs_diff_eq!(mutual_coherence(&orthonormal_2x2()).unwrap(), 0.0);
    }

    #[test]
    fn coherence_identical_columns_is_one() {
        let m = SpreadingMatrix {
            columns: ndarray::array![[c(2.0, 0.0), c(1.0, 0.0)], [c(0.0, 2.0), c(0.0, 1.0)]],
            rho: 1.0,
            seed: 0,
        };
        assert_abs_diff_eq!(mutual_coherence(&m).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn coherence_unit_phase_invariant() {
        let cb = build_codebook::<f64>(3, 4, 6, 0.8, 11).unwrap();
        let before = mutual_coherence(&cb).unwrap();
        let mut rotated = cb.clone();
        let phase = Complex::from_polar(1.0, 0.7);
        for i in 0..rotated.code_length() {
            rotated.columns[[i, 2]] *= phase;
        }
        let after = mutual_coherence(&rotated).unwrap();
        assert_abs_diff_eq!(before, after, epsilon = 1e-12);
    }

    #[test]
    fn ric_orthonormal_is_zero() {
        let m = orthonormal_2x2();
        assert_abs_diff_eq!(estimate_ric(&m, 1, 1000).unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(estimate_ric(&m, 2, 1000).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn ric_identical_columns_is_one() {
        let m = SpreadingMatrix {
            columns: ndarray::array![[c(1.0, 0.0), c(1.0, 0.0)], [c(0.0, 1.0), c(0.0, 1.0)]],
            rho: 1.0,
            seed: 0,
        };
        assert_abs_diff_eq!(estimate_ric(&m, 2, 1000).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ric_matches_analytic_2x2_oracle() {
        // independent oracle: for s=2 the Gram of two unit columns is
        // [[1, g],[g*, 1]] with eigenvalues 1 +/- |g|, so the per-subset
        // delta is exactly |g| and delta_2 = mutual coherence.
        let cb = build_codebook::<f64>(3, 4, 8, 0.75, 42).unwrap();
        let delta2 = estimate_ric(&cb, 2, 1000).unwrap();
        let mu = mutual_coherence(&cb).unwrap();
        assert_abs_diff_eq!(delta2, mu, epsilon = 1e-10);
        assert!(delta2 > 0.0 && delta2 < 1.0);
    }

    #[test]
    fn ric_monotone_in_sparsity() {
        let cb = build_codebook::<f64>(3, 4, 8, 0.75, 42).unwrap();
        let mut prev = 0.0;
        for s in 1..=4 {
            let d = estimate_ric(&cb, s, 10_000).unwrap();
            assert!(d >= prev - 1e-12, "delta_{s} = {d} < delta_{} = {prev}", s - 1);
            prev = d;
        }
    }

    #[test]
    fn ric_refuses_above_cap() {
        let cb = build_codebook::<f64>(3, 4, 8, 0.75, 42).unwrap();
        assert!(matches!(
            estimate_ric(&cb, 4, 10).err(),
            Some(Error::TooExpensive(_))
        ));
    }

    #[test]
    fn text_round_trip_bit_exact() {
        let cb = build_codebook::<f64>(3, 4, 8, 0.75, 42).unwrap();
        let text = cb.to_text();
        let back = SpreadingMatrix::<f64>::from_text(&text, "mem").unwrap();
        assert_eq!(cb, back);
        assert_eq!(text, back.to_text());
        assert_eq!(cb.hash(), back.hash());
    }

    #[test]
    fn k_subsets_counts() {
        assert_eq!(k_subsets(5, 2).count(), 10);
        assert_eq!(k_subsets(4, 4).count(), 1);
        assert_eq!(k_subsets(3, 4).count(), 0);
        assert_eq!(binomial(16, 8), Some(12870));
    }
}
