//! Synthetic confocal scans and 3D point-spread-function localisation.
//!
//! The PSF is an anisotropic Gaussian surrogate; voxel counts are Poisson.
//! Localisation fits position plus log-amplitude and log-background with the
//! shared least-squares engine, using Gaussian-approximation weighting where
//! the model mean exceeds 10 counts and Poisson deviance residuals below.

use crate::aberration::{focal_fwhm, FocusConfig};
use crate::error::{Error, Result};
use crate::fabrication::FWHM_TO_SIGMA;
use crate::fit::{self, FitOptions, LeastSquaresProblem};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PSFModel {
    pub sigma_xy_nm: f64,
    pub sigma_z_nm: f64,
    /// Peak detected rate of one emitter (counts/s).
    pub peak_rate_per_s: f64,
    /// Background rate per voxel (counts/s).
    pub background_rate_per_s: f64,
}

impl PSFModel {
    /// Derive the Gaussian widths from the scalar focal model at the given
    /// focus configuration (FWHM -> sigma).
    pub fn from_focus_config(cfg: &FocusConfig, peak_rate_per_s: f64, background_rate_per_s: f64) -> Result<Self> {
        let fwhm = focal_fwhm(cfg)?;
        Ok(PSFModel {
            sigma_xy_nm: fwhm.radial_nm / FWHM_TO_SIGMA,
            sigma_z_nm: fwhm.axial_nm / FWHM_TO_SIGMA,
            peak_rate_per_s,
            background_rate_per_s,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_xy_nm > 0.0) || !(self.sigma_z_nm > 0.0) {
            return Err(Error::invalid("psf", "sigmas must be > 0"));
        }
        if self.peak_rate_per_s < 0.0 || self.background_rate_per_s < 0.0 {
            return Err(Error::invalid("psf", "rates must be >= 0"));
        }
        Ok(())
    }
}

impl Default for PSFModel {
    /// Widths from the scalar focal model of the 532 nm confocal excitation
    /// through the NA 1.4 oil objective into diamond.
    fn default() -> Self {
        let cfg = FocusConfig {
            wavelength_nm: 532.0,
            ..FocusConfig::default()
        };
        PSFModel::from_focus_config(&cfg, 2.0e5, 1.0e3).expect("default focus config is valid")
    }
}

/// Scan geometry. `origin_um` is the centre of voxel (0, 0, 0).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumeSpec {
    pub origin_um: [f64; 3],
    pub voxel_pitch_nm: [f64; 3],
    pub dims: [usize; 3],
    pub dwell_s: f64,
}

impl VolumeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 1) {
            return Err(Error::invalid("volume.dims", "every axis needs >= 1 voxel"));
        }
        if self.voxel_pitch_nm.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::invalid("volume.voxel_pitch_nm", "must be > 0"));
        }
        if !(self.dwell_s > 0.0) {
            return Err(Error::invalid("volume.dwell_s", "must be > 0"));
        }
        Ok(())
    }

    pub fn n_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Centre of a voxel in nm.
    pub fn voxel_center_nm(&self, idx: [usize; 3]) -> [f64; 3] {
        [
            self.origin_um[0] * 1000.0 + idx[0] as f64 * self.voxel_pitch_nm[0],
            self.origin_um[1] * 1000.0 + idx[1] as f64 * self.voxel_pitch_nm[1],
            self.origin_um[2] * 1000.0 + idx[2] as f64 * self.voxel_pitch_nm[2],
        ]
    }

    fn axis_coords_nm(&self, axis: usize) -> Vec<f64> {
        (0..self.dims[axis])
            .map(|i| self.origin_um[axis] * 1000.0 + i as f64 * self.voxel_pitch_nm[axis])
            .collect()
    }

    fn covers_nm(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|ax| {
            let lo = self.origin_um[ax] * 1000.0 - 0.5 * self.voxel_pitch_nm[ax];
            let hi = lo + self.dims[ax] as f64 * self.voxel_pitch_nm[ax];
            p[ax] >= lo && p[ax] <= hi
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfocalVolume {
    pub spec: VolumeSpec,
    /// Counts in x-fastest order.
    pub counts: Vec<u32>,
    /// True when an emitter fell outside the scanned box.
    pub clipped: bool,
}

impl ConfocalVolume {
    pub fn index(&self, idx: [usize; 3]) -> usize {
        idx[0] + self.spec.dims[0] * (idx[1] + self.spec.dims[1] * idx[2])
    }

    pub fn total_counts(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RenderOptions {
    /// Poisson-sample voxel counts; `false` rounds the expected values.
    pub poisson_noise: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            poisson_noise: true,
        }
    }
}

fn gaussian_axis_profile(coords: &[f64], center: f64, sigma: f64) -> Vec<f64> {
    coords
        .iter()
        .map(|&x| (-((x - center) * (x - center)) / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Expected voxel means dwell*(background + sum_e peak * G(voxel - e)).
pub fn expected_field(emitters_um: &[[f64; 3]], psf: &PSFModel, spec: &VolumeSpec) -> Vec<f64> {
    let xs = spec.axis_coords_nm(0);
    let ys = spec.axis_coords_nm(1);
    let zs = spec.axis_coords_nm(2);
    let mut field = vec![psf.background_rate_per_s * spec.dwell_s; spec.n_voxels()];
    for e in emitters_um {
        let enm = [e[0] * 1000.0, e[1] * 1000.0, e[2] * 1000.0];
        let gx = gaussian_axis_profile(&xs, enm[0], psf.sigma_xy_nm);
        let gy = gaussian_axis_profile(&ys, enm[1], psf.sigma_xy_nm);
        let gz = gaussian_axis_profile(&zs, enm[2], psf.sigma_z_nm);
        let amp = psf.peak_rate_per_s * spec.dwell_s;
        let mut i = 0;
        for vz in &gz {
            for vy in &gy {
                let ayz = amp * vy * vz;
                for vx in &gx {
                    field[i] += ayz * vx;
                    i += 1;
                }
            }
        }
    }
    field
}

/// Render a scan of the given emitters.
pub fn render_scan(
    emitters_um: &[[f64; 3]],
    psf: &PSFModel,
    spec: &VolumeSpec,
    opts: RenderOptions,
    rng: &mut impl Rng,
) -> Result<ConfocalVolume> {
    psf.validate()?;
    spec.validate()?;
    let clipped = emitters_um.iter().any(|e| {
        let enm = [e[0] * 1000.0, e[1] * 1000.0, e[2] * 1000.0];
        !spec.covers_nm(&enm)
    });
    let field = expected_field(emitters_um, psf, spec);
    let counts = field
        .iter()
        .map(|&mean| {
            if opts.poisson_noise && mean > 0.0 {
                Poisson::new(mean).expect("mean > 0").sample(rng) as u32
            } else {
                mean.round() as u32
            }
        })
        .collect();
    Ok(ConfocalVolume {
        spec: spec.clone(),
        counts,
        clipped,
    })
}

/// Centre of the brightest voxel, the usual localisation seed.
pub fn brightest_voxel_um(volume: &ConfocalVolume) -> [f64; 3] {
    let mut best = 0usize;
    let mut best_val = 0u32;
    for (i, &c) in volume.counts.iter().enumerate() {
        if c > best_val {
            best_val = c;
            best = i;
        }
    }
    let nx = volume.spec.dims[0];
    let ny = volume.spec.dims[1];
    let idx = [best % nx, (best / nx) % ny, best / (nx * ny)];
    let nm = volume.spec.voxel_center_nm(idx);
    [nm[0] / 1000.0, nm[1] / 1000.0, nm[2] / 1000.0]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Localization {
    pub position_nm: [f64; 3],
    /// Position covariance (nm^2), symmetric positive semi-definite when the
    /// fit converged.
    pub covariance_nm2: [[f64; 3]; 3],
    /// Fitted peak rate (counts/s).
    pub amplitude: f64,
    /// Fitted background rate per voxel (counts/s).
    pub background: f64,
    pub converged: bool,
    pub iterations: usize,
}

struct LocalizationProblem<'a> {
    volume: &'a ConfocalVolume,
    sigma_xy: f64,
    sigma_z: f64,
    xs: Vec<f64>,
    ys: Vec<f64>,
    zs: Vec<f64>,
}

impl LocalizationProblem<'_> {
    /// Model mean and its derivative weights for one voxel.
    #[inline]
    fn residual_and_grad(mean: f64, obs: f64) -> (f64, f64) {
        if mean > 10.0 {
            // Gaussian approximation: r = (m - o)/sqrt(m).
            let s = mean.sqrt();
            let r = (mean - obs) / s;
            (r, (1.0 - 0.5 * r / s) / s)
        } else {
            // Poisson deviance residual.
            let m = mean.max(1e-12);
            let dev = if obs > 0.0 {
                2.0 * (m - obs + obs * (obs / m).ln())
            } else {
                2.0 * m
            };
            let r = (m - obs).signum() * dev.max(0.0).sqrt();
            let dr = if r.abs() > 1e-9 {
                (1.0 - obs / m) / r
            } else {
                1.0 / m.max(obs).max(1e-12).sqrt()
            };
            (r, dr)
        }
    }

    fn evaluate(&self, p: &[f64], mut jac: Option<&mut DMatrix<f64>>) -> Vec<f64> {
        let (x0, y0, z0) = (p[0], p[1], p[2]);
        let amp = p[3].exp();
        let bg = p[4].exp();
        let dwell = self.volume.spec.dwell_s;
        let gx = gaussian_axis_profile(&self.xs, x0, self.sigma_xy);
        let gy = gaussian_axis_profile(&self.ys, y0, self.sigma_xy);
        let gz = gaussian_axis_profile(&self.zs, z0, self.sigma_z);
        let sxy2 = self.sigma_xy * self.sigma_xy;
        let sz2 = self.sigma_z * self.sigma_z;

        let mut res = Vec::with_capacity(self.volume.counts.len());
        let mut i = 0;
        for (kz, vz) in gz.iter().enumerate() {
            for (ky, vy) in gy.iter().enumerate() {
                for (kx, vx) in gx.iter().enumerate() {
                    let g = vx * vy * vz;
                    let signal = dwell * amp * g;
                    let mean = signal + dwell * bg;
                    let obs = self.volume.counts[i] as f64;
                    let (r, dr) = Self::residual_and_grad(mean, obs);
                    res.push(r);
                    if let Some(j) = jac.as_deref_mut() {
                        j[(i, 0)] = dr * signal * (self.xs[kx] - x0) / sxy2;
                        j[(i, 1)] = dr * signal * (self.ys[ky] - y0) / sxy2;
                        j[(i, 2)] = dr * signal * (self.zs[kz] - z0) / sz2;
                        j[(i, 3)] = dr * signal;
                        j[(i, 4)] = dr * dwell * bg;
                    }
                    i += 1;
                }
            }
        }
        res
    }
}

impl LeastSquaresProblem for LocalizationProblem<'_> {
    fn param_count(&self) -> usize {
        5
    }
    fn residuals(&self, p: &[f64]) -> Vec<f64> {
        self.evaluate(p, None)
    }
    fn jacobian(&self, p: &[f64]) -> Option<DMatrix<f64>> {
        let mut j = DMatrix::zeros(self.volume.counts.len(), 5);
        self.evaluate(p, Some(&mut j));
        Some(j)
    }
}

/// Fit the 3D Gaussian + constant background model around `seed_um`.
pub fn localize(
    volume: &ConfocalVolume,
    psf: &PSFModel,
    seed_um: [f64; 3],
) -> Result<Localization> {
    psf.validate()?;
    volume.spec.validate()?;
    let seed_nm = [seed_um[0] * 1000.0, seed_um[1] * 1000.0, seed_um[2] * 1000.0];
    if !volume.spec.covers_nm(&seed_nm) {
        return Err(Error::invalid("seed_position", "outside the scanned volume"));
    }
    let total = volume.total_counts();
    if total == 0 {
        return Err(Error::InsufficientData(
            "volume contains no counts".to_string(),
        ));
    }

    let dwell = volume.spec.dwell_s;
    let max_count = *volume.counts.iter().max().unwrap() as f64;
    // Robust-ish background guess: mean of the lowest quartile of counts.
    let mut sorted = volume.counts.clone();
    sorted.sort_unstable();
    let q = (sorted.len() / 4).max(1);
    let bg0 = (sorted[..q].iter().map(|&c| c as f64).sum::<f64>() / q as f64 / dwell).max(1e-6);
    let amp0 = ((max_count / dwell) - bg0).max(bg0.max(1.0));

    let problem = LocalizationProblem {
        volume,
        sigma_xy: psf.sigma_xy_nm,
        sigma_z: psf.sigma_z_nm,
        xs: volume.spec.axis_coords_nm(0),
        ys: volume.spec.axis_coords_nm(1),
        zs: volume.spec.axis_coords_nm(2),
    };
    let initial = [seed_nm[0], seed_nm[1], seed_nm[2], amp0.ln(), bg0.ln()];
    let out = fit::least_squares(&problem, &initial, &FitOptions::default())?;

    let mut covariance_nm2 = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            // Symmetrise against round-off.
            covariance_nm2[r][c] = 0.5 * (out.covariance[(r, c)] + out.covariance[(c, r)]);
        }
    }
    Ok(Localization {
        position_nm: [out.params[0], out.params[1], out.params[2]],
        covariance_nm2,
        amplitude: out.params[3].exp(),
        background: out.params[4].exp(),
        converged: out.converged,
        iterations: out.iterations,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AxisHistogram {
    pub bin_edges_nm: Vec<f64>,
    pub counts: Vec<u64>,
}

fn histogram(values: &[f64], half_range: f64, n_bins: usize) -> AxisHistogram {
    let width = 2.0 * half_range / n_bins as f64;
    let mut counts = vec![0u64; n_bins];
    for &v in values {
        let i = ((v + half_range) / width).floor();
        if i >= 0.0 && (i as usize) < n_bins {
            counts[i as usize] += 1;
        }
    }
    let bin_edges_nm = (0..=n_bins).map(|i| -half_range + i as f64 * width).collect();
    AxisHistogram {
        bin_edges_nm,
        counts,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrecisionReport {
    /// fitted - target, nm, one row per localisation.
    pub residuals_nm: Vec<[f64; 3]>,
    pub mean_nm: [f64; 3],
    pub std_nm: [f64; 3],
    pub histograms: [AxisHistogram; 3],
    /// Residual stds after removing the best-fit affine map from targets to
    /// fitted positions (drift/scale removed); `None` when the registration
    /// is degenerate.
    pub registered_std_nm: Option<[f64; 3]>,
}

/// Per-axis residual statistics of localisations against their targets.
pub fn precision_report(
    localizations: &[Localization],
    targets_um: &[[f64; 3]],
) -> Result<PrecisionReport> {
    if localizations.is_empty() {
        return Err(Error::Empty("precision_report needs at least one localization"));
    }
    if localizations.len() != targets_um.len() {
        return Err(Error::LengthMismatch {
            what: "localizations vs targets",
            left: localizations.len(),
            right: targets_um.len(),
        });
    }
    let residuals_nm: Vec<[f64; 3]> = localizations
        .iter()
        .zip(targets_um)
        .map(|(l, t)| {
            [
                l.position_nm[0] - t[0] * 1000.0,
                l.position_nm[1] - t[1] * 1000.0,
                l.position_nm[2] - t[2] * 1000.0,
            ]
        })
        .collect();

    let mut mean_nm = [0.0; 3];
    let mut std_nm = [0.0; 3];
    let mut histograms: [AxisHistogram; 3] = std::array::from_fn(|_| AxisHistogram {
        bin_edges_nm: vec![],
        counts: vec![],
    });
    for ax in 0..3 {
        let vals: Vec<f64> = residuals_nm.iter().map(|r| r[ax]).collect();
        let (m, s) = crate::numeric::mean_std(&vals);
        mean_nm[ax] = m;
        std_nm[ax] = s;
        // 50 nm multiples keep the histograms comparable across runs.
        let half = ((4.0 * s.max(25.0) / 50.0).ceil() * 50.0).max(50.0);
        histograms[ax] = histogram(&vals, half, 40);
    }

    let registered_std_nm = affine_registered_std(localizations, targets_um);
    Ok(PrecisionReport {
        residuals_nm,
        mean_nm,
        std_nm,
        histograms,
        registered_std_nm,
    })
}

fn affine_registered_std(
    localizations: &[Localization],
    targets_um: &[[f64; 3]],
) -> Option<[f64; 3]> {
    let n = localizations.len();
    if n < 8 {
        return None;
    }
    // Least squares for fitted ~ A*target + c, solved per output axis with a
    // pseudo-inverse so degenerate target geometries (single plane) work.
    let mut design = DMatrix::zeros(n, 4);
    let mut rhs = DMatrix::zeros(n, 3);
    for (i, (l, t)) in localizations.iter().zip(targets_um).enumerate() {
        design[(i, 0)] = t[0] * 1000.0;
        design[(i, 1)] = t[1] * 1000.0;
        design[(i, 2)] = t[2] * 1000.0;
        design[(i, 3)] = 1.0;
        for ax in 0..3 {
            rhs[(i, ax)] = l.position_nm[ax];
        }
    }
    let pinv = (design.transpose() * &design).pseudo_inverse(1e-9).ok()?;
    let coef = pinv * design.transpose() * &rhs;
    let pred = design * coef;
    let mut std = [0.0; 3];
    for ax in 0..3 {
        let vals: Vec<f64> = (0..n).map(|i| rhs[(i, ax)] - pred[(i, ax)]).collect();
        let (_, s) = crate::numeric::mean_std(&vals);
        std[ax] = s;
    }
    Some(std)
}
