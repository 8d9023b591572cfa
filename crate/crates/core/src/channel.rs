//! Large- and small-scale uplink channel model: log-distance path loss,
//! log-normal shadowing and Rayleigh fading.

use num_complex::Complex;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Channel and noise parameters. Defaults follow the usual urban-macro
/// numbers: `PL(r) = 128.1 + 37.6 log10(r[km])`, 8 dB shadowing,
/// -170 dBm/Hz noise density over 1 MHz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams<T: Scalar> {
    pub shadowing_std_db: T,
    pub noise_psd_dbm_hz: T,
    pub bandwidth_hz: T,
    pub cell_radius_km: T,
    /// Minimum device distance; keeps the path-loss law finite.
    pub min_distance_km: T,
}

impl<T: Scalar> Default for ChannelParams<T> {
    fn default() -> Self {
        Self {
            shadowing_std_db: T::from_f64_c(8.0),
            noise_psd_dbm_hz: T::from_f64_c(-170.0),
            bandwidth_hz: T::from_f64_c(1e6),
            cell_radius_km: T::from_f64_c(1.0),
            min_distance_km: T::from_f64_c(0.05),
        }
    }
}

impl<T: Scalar> ChannelParams<T> {
    /// Path loss in dB at distance `r_km`.
    pub fn pathloss_db_at(&self, r_km: T) -> T {
        T::from_f64_c(128.1) + T::from_f64_c(37.6) * r_km.log10()
    }

    /// Thermal noise power in dBm over the transmission bandwidth.
    pub fn noise_power_dbm(&self) -> T {
        self.noise_psd_dbm_hz + T::from_f64_c(10.0) * self.bandwidth_hz.log10()
    }
}

/// One sample of a circularly-symmetric complex Gaussian with variance
/// `var` (total over both components).
pub fn complex_gaussian<T: Scalar, R: Rng + ?Sized>(rng: &mut R, var: T) -> Complex<T> {
    let half = (var / T::from_f64_c(2.0)).sqrt();
    let re = T::standard_normal(rng);
    let im = T::standard_normal(rng);
    Complex::new(re * half, im * half)
}

/// Draws per-device channel coefficients `h_i = sqrt(g_i) f_i` with
/// `g_i` the large-scale gain (path loss + shadowing at a uniform radial
/// distance) and `f_i` unit-variance Rayleigh fading.
pub fn draw_channel<T: Scalar, R: Rng + ?Sized>(
    params: &ChannelParams<T>,
    n_devices: usize,
    rng: &mut R,
) -> Vec<Complex<T>> {
    (0..n_devices)
        .map(|_| {
            let r = rng.gen_range(params.min_distance_km..=params.cell_radius_km);
            let x = T::standard_normal(rng) * params.shadowing_std_db;
            let loss_db = params.pathloss_db_at(r) + x;
            let gain = T::from_f64_c(10.0).powf(-loss_db / T::from_f64_c(10.0));
            let fade = complex_gaussian(rng, T::one());
            fade * gain.sqrt()
        })
        .collect()
}
