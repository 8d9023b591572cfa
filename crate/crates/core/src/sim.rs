//! Link-level synthesis: device activity, received pilot vectors and
//! labeled datasets for detector training and evaluation.

use ndarray::Array2;
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{complex_gaussian, draw_channel, ChannelParams};
use crate::codebook::SpreadingMatrix;
use crate::dataset::{Dataset, SplitCounts};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// How many devices are active in a snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActivityPolicy<T: Scalar> {
    /// Exactly `n` active devices, placed uniformly without replacement.
    FixedN { n: usize },
    /// Each device active independently with probability `p`.
    Bernoulli { p: T },
    /// `n` drawn uniformly from a set, then placed as `FixedN`.
    UniformN { choices: Vec<usize> },
}

/// Per-snapshot SNR draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SnrPolicy<T: Scalar> {
    Fixed { db: T },
    UniformDb { lo: T, hi: T },
}

/// Requested noise condition for a single snapshot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SnrSpec<T: Scalar> {
    /// Receive SNR in dB, realized by scaling the common signal amplitude.
    Db(T),
    /// No noise at all; the signal keeps unit amplitude.
    Noiseless,
}

/// One simulated instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot<T: Scalar> {
    pub psi: Vec<u8>,
    pub h: Vec<Complex<T>>,
    /// `psi ∘ h`, the sparse activity-channel vector.
    pub varphi: Vec<Complex<T>>,
    pub y_p: Vec<Complex<T>>,
    pub support: Vec<usize>,
    pub snr_db: Option<T>,
    /// Common signal amplitude applied to realize the requested SNR.
    pub amplitude: T,
    /// Set when the activity vector was all-zero and only noise was emitted.
    pub noise_only: bool,
}

/// Draws an activity vector under the given policy.
pub fn draw_activity<T: Scalar, R: Rng + ?Sized>(
    n_devices: usize,
    policy: &ActivityPolicy<T>,
    rng: &mut R,
) -> Result<Vec<u8>> {
    match policy {
        ActivityPolicy::FixedN { n } => {
            if *n > n_devices || *n == 0 {
                return Err(Error::Config(format!(
                    "fixed n = {n} out of range 1..={n_devices}"
                )));
            }
            let mut psi = vec![0u8; n_devices];
            // partial Fisher-Yates over the index set
            let mut idx: Vec<usize> = (0..n_devices).collect();
            for k in 0..*n {
                let j = rng.gen_range(k..n_devices);
                idx.swap(k, j);
                psi[idx[k]] = 1;
            }
            Ok(psi)
        }
        ActivityPolicy::Bernoulli { p } => {
            let p64 = p.to_f64().unwrap_or(-1.0);
            if !(0.0..=1.0).contains(&p64) {
                return Err(Error::Config(format!("bernoulli p = {p} not in [0,1]")));
            }
            Ok((0..n_devices)
                .map(|_| u8::from(rng.gen::<f64>() < p64))
                .collect())
        }
        ActivityPolicy::UniformN { choices } => {
            if choices.is_empty() {
                return Err(Error::Config("uniform_n needs a non-empty choice set".into()));
            }
            let n = choices[rng.gen_range(0..choices.len())];
            draw_activity(n_devices, &ActivityPolicy::<T>::FixedN { n }, rng)
        }
    }
}

/// Synthesizes `y_p = a * Phi (psi ∘ h) + w`.
///
/// Noise is unit-variance circularly-symmetric complex Gaussian per resource;
/// the amplitude `a` is scaled so that `||a * Phi(psi∘h)||^2 / E||w||^2`
/// equals the requested SNR for this snapshot. An all-zero activity vector
/// yields a noise-only snapshot with the `noise_only` flag set.
pub fn synthesize_snapshot<T: Scalar, R: Rng + ?Sized>(
    codebook: &SpreadingMatrix<T>,
    psi: &[u8],
    h: &[Complex<T>],
    snr: SnrSpec<T>,
    rng: &mut R,
) -> Result<Snapshot<T>> {
    let l = codebook.code_length();
    let n = codebook.n_devices();
    if psi.len() != n || h.len() != n {
        return Err(Error::Shape(format!(
            "psi/h length must equal N = {n} (got {} / {})",
            psi.len(),
            h.len()
        )));
    }
    let varphi: Vec<Complex<T>> = psi
        .iter()
        .zip(h)
        .map(|(&a, &hi)| {
            if a == 1 {
                hi
            } else {
                Complex::new(T::zero(), T::zero())
            }
        })
        .collect();
    // s = Phi varphi
    let mut signal = vec![Complex::new(T::zero(), T::zero()); l];
    for (j, &v) in varphi.iter().enumerate() {
        if v.norm_sqr() == T::zero() {
            continue;
        }
        for (row, sig) in signal.iter_mut().enumerate() {
            *sig = *sig + codebook.columns[[row, j]] * v;
        }
    }
    let sig_norm_sq = crate::linalg::norm_sq(&signal);
    let noise_only = sig_norm_sq == T::zero();

    let (amplitude, noise_var, snr_db) = match snr {
        SnrSpec::Noiseless => (T::one(), T::zero(), None),
        SnrSpec::Db(db) => {
            let lin = T::from_f64_c(10.0).powf(db / T::from_f64_c(10.0));
            let a = if noise_only {
                T::zero()
            } else {
                (lin * T::from_usize(l).unwrap() / sig_norm_sq).sqrt()
            };
            (a, T::one(), Some(db))
        }
    };

    let mut y_p = Vec::with_capacity(l);
    for sig in &signal {
        let w = if noise_var > T::zero() {
            complex_gaussian(rng, noise_var)
        } else {
            Complex::new(T::zero(), T::zero())
        };
        y_p.push(*sig * amplitude + w);
    }
    let support: Vec<usize> = psi
        .iter()
        .enumerate()
        .filter_map(|(i, &a)| (a == 1).then_some(i))
        .collect();
    Ok(Snapshot {
        psi: psi.to_vec(),
        h: h.to_vec(),
        varphi,
        y_p,
        support,
        snr_db,
        amplitude,
        noise_only,
    })
}

/// Stacked real input row `[Re(y_p); Im(y_p)]` for the neural detector.
pub fn stack_real<T: Scalar>(y_p: &[Complex<T>]) -> Vec<T> {
    y_p.iter()
        .map(|z| z.re)
        .chain(y_p.iter().map(|z| z.im))
        .collect()
}

/// Derives an independent, reproducible RNG for snapshot `index` of a run
/// seeded with `seed` (splitmix64 over both words).
pub fn snapshot_rng(seed: u64, index: u64) -> ChaCha8Rng {
    fn splitmix(mut x: u64) -> u64 {
        x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^ (x >> 31)
    }
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(index)))
}

/// Dataset generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec<T: Scalar> {
    pub size: usize,
    /// Train / validation / test fractions; must sum to 1.
    pub fractions: [f64; 3],
    pub snr_policy: SnrPolicy<T>,
    pub activity: ActivityPolicy<T>,
    pub seed: u64,
}

impl<T: Scalar> DatasetSpec<T> {
    /// Training policy used by the pipeline: active count uniform over
    /// `{1..ceil(N/2)}`, SNR uniform over the sweep range.
    pub fn training_default(n_devices: usize, size: usize, snr_lo: T, snr_hi: T, seed: u64) -> Self {
        let half = n_devices.div_ceil(2);
        Self {
            size,
            fractions: [0.8, 0.1, 0.1],
            snr_policy: SnrPolicy::UniformDb { lo: snr_lo, hi: snr_hi },
            activity: ActivityPolicy::UniformN { choices: (1..=half).collect() },
            seed,
        }
    }
}

fn split_counts(size: usize, fractions: [f64; 3]) -> Result<SplitCounts> {
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || fractions.iter().any(|&f| f < 0.0) {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    if size < 10 {
        return Err(Error::Config(format!(
            "dataset size {size} too small to split meaningfully (min 10)"
        )));
    }
    let train = (fractions[0] * size as f64).round() as usize;
    let val = (fractions[1] * size as f64).round() as usize;
    if train + val > size {
        return Err(Error::Config("split fractions round above the size".into()));
    }
    Ok(SplitCounts { train, val, test: size - train - val })
}

/// Generates `spec.size` snapshots and packs them as stacked-real rows with
/// binary labels. Snapshot `d` draws from its own RNG stream, so worker
/// count and order never change the result.
pub fn build_dataset<T: Scalar>(
    codebook: &SpreadingMatrix<T>,
    channel: &ChannelParams<T>,
    spec: &DatasetSpec<T>,
    config_blob: String,
) -> Result<Dataset> {
    let split = split_counts(spec.size, spec.fractions)?;
    let l = codebook.code_length();
    let n = codebook.n_devices();

    let rows: Vec<(Vec<f32>, Vec<u8>)> = (0..spec.size as u64)
        .into_par_iter()
        .map(|d| -> Result<(Vec<f32>, Vec<u8>)> {
            let mut rng = snapshot_rng(spec.seed, d);
            let psi = draw_activity(n, &spec.activity, &mut rng)?;
            let h = draw_channel(channel, n, &mut rng);
            let snr = match &spec.snr_policy {
                SnrPolicy::Fixed { db } => *db,
                SnrPolicy::UniformDb { lo, hi } => rng.gen_range(*lo..=*hi),
            };
            let snap = synthesize_snapshot(codebook, &psi, &h, SnrSpec::Db(snr), &mut rng)?;
            let row: Vec<f32> = stack_real(&snap.y_p)
                .iter()
                .map(|v| v.to_f32().unwrap_or(f32::NAN))
                .collect();
            Ok((row, snap.psi))
        })
        .collect::<Result<_>>()?;

    let mut inputs = Array2::<f32>::zeros((spec.size, 2 * l));
    let mut labels = Array2::<u8>::zeros((spec.size, n));
    for (d, (row, psi)) in rows.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            inputs[[d, j]] = v;
        }
        for (j, v) in psi.into_iter().enumerate() {
            labels[[d, j]] = v;
        }
    }
    Ok(Dataset { inputs, labels, split, config_blob })
}
