//! Depth-dependent spherical aberration of a high-NA focus through the
//! oil-diamond interface, its corrective pupil phase, and scalar focal
//! metrics.
//!
//! Index-mismatch pupil phase at nominal focus depth d:
//!
//!   phi(rho) = (2 pi / lambda) * d * (sqrt(n2^2 - NA^2 rho^2)
//!                                   - sqrt(n1^2 - NA^2 rho^2))
//!
//! with rho the normalised pupil radius. The corrective phase is -phi. On-axis
//! intensity uses the scalar Debye integral
//! I(z) = |int_0^1 exp(i [phi(rho) + k z sqrt(n2^2 - NA^2 rho^2)]) rho drho|^2,
//! normalised to the aberration-free peak.

use crate::error::{Error, Result};
use crate::numeric;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FocusConfig {
    pub wavelength_nm: f64,
    pub numerical_aperture: f64,
    pub n_immersion: f64,
    pub n_diamond: f64,
    /// Nominal focus depth below the surface (um), as programmed at the stage.
    pub depth_um: f64,
}

impl Default for FocusConfig {
    fn default() -> Self {
        FocusConfig {
            wavelength_nm: 790.0,
            numerical_aperture: 1.4,
            n_immersion: 1.518,
            n_diamond: 2.417,
            depth_um: 0.0,
        }
    }
}

impl FocusConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.wavelength_nm > 0.0) {
            return Err(Error::invalid("focus.wavelength_nm", "must be > 0"));
        }
        if !(self.numerical_aperture > 0.0 && self.numerical_aperture < self.n_immersion) {
            return Err(Error::invalid(
                "focus.numerical_aperture",
                format!(
                    "must satisfy 0 < NA < n_immersion ({} vs {})",
                    self.numerical_aperture, self.n_immersion
                ),
            ));
        }
        if self.n_immersion <= 1.0 || self.n_diamond <= 1.0 {
            return Err(Error::invalid("focus.indices", "refractive indices must be > 1"));
        }
        if self.depth_um < 0.0 {
            return Err(Error::invalid("focus.depth_um", "must be >= 0"));
        }
        Ok(())
    }

    fn k_per_nm(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.wavelength_nm
    }

    /// Axial wavenumber factor sqrt(n2^2 - NA^2 rho^2).
    fn w_diamond(&self, rho: f64) -> f64 {
        (self.n_diamond * self.n_diamond
            - self.numerical_aperture * self.numerical_aperture * rho * rho)
            .sqrt()
    }

    /// Paraxial estimate of the actual focal shift caused by the index
    /// mismatch, reported as metadata alongside profiles.
    pub fn nominal_focal_shift_um(&self) -> f64 {
        self.depth_um * (self.n_diamond / self.n_immersion - 1.0)
    }
}

/// Index-mismatch pupil phase (radians) at normalised radius `rho`, without
/// piston/defocus removal.
pub fn aberration_phase(cfg: &FocusConfig, rho: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::invalid("rho", "must lie in [0, 1]"));
    }
    let na_rho = cfg.numerical_aperture * rho;
    if na_rho >= cfg.n_immersion {
        return Err(Error::invalid(
            "rho",
            format!("NA*rho = {na_rho} reaches the evanescent region (n_immersion {})", cfg.n_immersion),
        ));
    }
    let w2 = cfg.w_diamond(rho);
    let w1 = (cfg.n_immersion * cfg.n_immersion - na_rho * na_rho).sqrt();
    Ok(cfg.k_per_nm() * cfg.depth_um * 1000.0 * (w2 - w1))
}

/// Radial pupil phase on a sample grid covering [0, 1].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PupilPhase {
    pub samples: Vec<(f64, f64)>,
    pub piston_defocus_removed: bool,
}

impl PupilPhase {
    pub fn validate(&self) -> Result<()> {
        if self.samples.len() < 2 {
            return Err(Error::invalid("pupil_phase", "needs at least two samples"));
        }
        if self.samples[0].0 != 0.0 || self.samples.last().unwrap().0 != 1.0 {
            return Err(Error::invalid("pupil_phase", "samples must cover [0, 1]"));
        }
        for w in self.samples.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(Error::invalid("pupil_phase", "rho must be strictly increasing"));
            }
        }
        Ok(())
    }

    /// Linear interpolation between samples.
    pub fn value(&self, rho: f64) -> f64 {
        let s = &self.samples;
        if rho <= s[0].0 {
            return s[0].1;
        }
        if rho >= s[s.len() - 1].0 {
            return s[s.len() - 1].1;
        }
        let i = s.partition_point(|(r, _)| *r <= rho).min(s.len() - 1);
        let (r0, p0) = s[i - 1];
        let (r1, p1) = s[i];
        p0 + (p1 - p0) * (rho - r0) / (r1 - r0)
    }

    /// Uniformly sampled aberration phase for `cfg`.
    pub fn of_aberration(cfg: &FocusConfig, n_samples: usize, remove_piston_defocus: bool) -> Result<Self> {
        cfg.validate()?;
        let n = n_samples.max(2);
        let raw: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let rho = i as f64 / (n - 1) as f64;
                aberration_phase(cfg, rho).map(|p| (rho, p))
            })
            .collect::<Result<_>>()?;
        let mut phase = PupilPhase {
            samples: raw,
            piston_defocus_removed: false,
        };
        if remove_piston_defocus {
            phase = phase.without_piston_defocus(cfg)?;
        }
        Ok(phase)
    }

    /// Corrective phase: the pointwise negation.
    pub fn correction(&self) -> Self {
        PupilPhase {
            samples: self.samples.iter().map(|&(r, p)| (r, -p)).collect(),
            piston_defocus_removed: self.piston_defocus_removed,
        }
    }

    /// Least-squares projection of the phase onto {1, rho^2} over the pupil
    /// area element rho drho, subtracted out (the SLM convention: piston and
    /// defocus are not aberrations).
    pub fn without_piston_defocus(&self, _cfg: &FocusConfig) -> Result<Self> {
        self.validate()?;
        let phi = |rho: f64| self.value(rho);
        let b0 = numeric::integrate(|r| phi(r) * r, 0.0, 1.0, 1e-10)?;
        let b1 = numeric::integrate(|r| phi(r) * r * r * r, 0.0, 1.0, 1e-10)?;
        // Gram matrix of {1, rho^2} under rho drho: [[1/2, 1/4], [1/4, 1/6]].
        let det = 1.0 / 48.0;
        let c0 = (b0 / 6.0 - b1 / 4.0) / det;
        let c1 = (b1 / 2.0 - b0 / 4.0) / det;
        Ok(PupilPhase {
            samples: self
                .samples
                .iter()
                .map(|&(r, p)| (r, p - c0 - c1 * r * r))
                .collect(),
            piston_defocus_removed: true,
        })
    }

    pub fn peak_to_valley(&self) -> f64 {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &(_, p) in &self.samples {
            lo = lo.min(p);
            hi = hi.max(p);
        }
        hi - lo
    }
}

/// |int_0^1 exp(i [phase(rho) + k z W2(rho)]) rho drho|^2 for one z (nm).
fn pupil_intensity(cfg: &FocusConfig, phase: &dyn Fn(f64) -> f64, z_nm: f64) -> Result<f64> {
    let k = cfg.k_per_nm();
    let total = |rho: f64| phase(rho) + k * z_nm * cfg.w_diamond(rho);
    // Panel count tracks the total phase excursion so the oscillations are
    // resolved before adaptive refinement starts.
    let excursion = (total(1.0) - total(0.0)).abs()
        + (total(0.5) - 0.5 * (total(0.0) + total(1.0))).abs() * 4.0;
    let n_panels = ((excursion / std::f64::consts::PI) as usize + 8).min(4096);
    let breaks: Vec<f64> = (0..=n_panels)
        .map(|i| i as f64 / n_panels as f64)
        .collect();
    let re = numeric::integrate_panels(|r| total(r).cos() * r, &breaks, 1e-9, 1e-14)?;
    let im = numeric::integrate_panels(|r| total(r).sin() * r, &breaks, 1e-9, 1e-14)?;
    Ok(re * re + im * im)
}

/// Aberration-free on-axis peak |int rho drho|^2.
const IDEAL_PEAK: f64 = 0.25;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AxialProfile {
    pub z_um: Vec<f64>,
    /// Intensity normalised to the aberration-free peak.
    pub intensity: Vec<f64>,
    pub peak_z_um: f64,
    pub peak_intensity: f64,
    /// Paraxial index-mismatch focal shift for this depth (metadata).
    pub nominal_focal_shift_um: f64,
}

/// On-axis intensity profile with `applied` added to the depth aberration.
pub fn axial_intensity(
    cfg: &FocusConfig,
    applied: &PupilPhase,
    z_range_um: (f64, f64),
    n_samples: usize,
) -> Result<AxialProfile> {
    cfg.validate()?;
    applied.validate()?;
    let phase = |rho: f64| {
        // cfg validation guarantees the argument stays out of the evanescent
        // region for rho in [0, 1].
        aberration_phase(cfg, rho).unwrap_or(0.0) + applied.value(rho)
    };
    axial_profile_of(cfg, &phase, z_range_um, n_samples)
}

fn axial_profile_of(
    cfg: &FocusConfig,
    phase: &dyn Fn(f64) -> f64,
    z_range_um: (f64, f64),
    n_samples: usize,
) -> Result<AxialProfile> {
    let (z_lo, z_hi) = z_range_um;
    if !(z_hi > z_lo) || n_samples < 3 {
        return Err(Error::invalid("z_range", "need z_hi > z_lo and >= 3 samples"));
    }
    let n = n_samples;
    let mut z_um = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    let mut best = (0usize, f64::NEG_INFINITY);
    for i in 0..n {
        let z = z_lo + (z_hi - z_lo) * i as f64 / (n - 1) as f64;
        let v = pupil_intensity(cfg, phase, z * 1000.0)? / IDEAL_PEAK;
        if v > best.1 {
            best = (i, v);
        }
        z_um.push(z);
        intensity.push(v);
    }
    // Refine the peak between the neighbours of the best sample.
    let lo = z_um[best.0.saturating_sub(1)];
    let hi = z_um[(best.0 + 1).min(n - 1)];
    let (peak_z_um, peak_intensity) = numeric::golden_max(
        |z| pupil_intensity(cfg, phase, z * 1000.0).unwrap_or(0.0) / IDEAL_PEAK,
        lo,
        hi,
        60,
    );
    Ok(AxialProfile {
        z_um,
        intensity,
        peak_z_um,
        peak_intensity,
        nominal_focal_shift_um: cfg.nominal_focal_shift_um(),
    })
}

fn strehl_scan_range(cfg: &FocusConfig) -> (f64, f64) {
    let d = cfg.depth_um;
    (-0.3 * d - 2.0, 1.0 * d + 2.0)
}

/// Peak focal intensity relative to the aberration-free ideal, with refocus:
/// the peak is searched over the axial scan range.
pub fn strehl(cfg: &FocusConfig, corrected: bool) -> Result<f64> {
    cfg.validate()?;
    let profile = if corrected {
        // Correction built as the exact pointwise negation, so the total
        // phase cancels identically.
        let phase = |rho: f64| {
            let ab = aberration_phase(cfg, rho).unwrap_or(0.0);
            ab + (-ab)
        };
        axial_profile_of(cfg, &phase, (-2.0, 2.0), 81)?
    } else {
        let phase = |rho: f64| aberration_phase(cfg, rho).unwrap_or(0.0);
        let range = strehl_scan_range(cfg);
        let n = (((range.1 - range.0) / 0.1) as usize).clamp(81, 1200);
        axial_profile_of(cfg, &phase, range, n)?
    };
    Ok(profile.peak_intensity)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FocalFwhm {
    pub radial_nm: f64,
    pub axial_nm: f64,
}

/// Scalar-model focal FWHMs for a corrected (aberration-free) focus.
///
/// Radial: I(r) = |int_0^1 J0(k NA r rho) rho drho|^2 through its half point;
/// axial: width of the corrected on-axis profile.
pub fn focal_fwhm(cfg: &FocusConfig) -> Result<FocalFwhm> {
    cfg.validate()?;
    let k = cfg.k_per_nm();
    let na = cfg.numerical_aperture;
    let radial_intensity = |r_nm: f64| -> f64 {
        let f = |rho: f64| libm::j0(k * na * r_nm * rho) * rho;
        let v = numeric::integrate(f, 0.0, 1.0, 1e-10).unwrap_or(0.0);
        v * v
    };
    let i0 = radial_intensity(0.0);
    // Bracket the half point: the Airy half-radius sits near 1.62/(k NA).
    let r_scale = 1.0 / (k * na);
    let r_half = numeric::bisect(radial_intensity, 0.0, 3.0 * r_scale, 0.5 * i0, 80);

    let zero_phase = |_rho: f64| 0.0;
    let z0 = pupil_intensity(cfg, &zero_phase, 0.0)?;
    let axial_at = |z_nm: f64| pupil_intensity(cfg, &zero_phase, z_nm).unwrap_or(0.0);
    // Axial scale from the W2 spread across the pupil.
    let dw = cfg.n_diamond - cfg.w_diamond(1.0);
    let z_scale = 2.78 / (k * dw);
    let z_half = numeric::bisect(axial_at, 0.0, 2.5 * z_scale, 0.5 * z0, 80);

    Ok(FocalFwhm {
        radial_nm: 2.0 * r_half,
        axial_nm: 2.0 * z_half,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cfg_at(depth_um: f64) -> FocusConfig {
        FocusConfig {
            depth_um,
            ..FocusConfig::default()
        }
    }

    #[test]
    fn zero_depth_has_no_aberration() {
        let cfg = cfg_at(0.0);
        for rho in [0.0, 0.3, 0.7, 1.0] {
            assert_eq!(aberration_phase(&cfg, rho).unwrap(), 0.0);
        }
    }

    #[test]
    fn on_axis_phase_matches_closed_form() {
        let cfg = cfg_at(10.0);
        let expected = 2.0 * std::f64::consts::PI / 790.0 * 10_000.0 * (2.417 - 1.518);
        assert_relative_eq!(aberration_phase(&cfg, 0.0).unwrap(), expected, max_relative = 1e-12);
    }

    #[test]
    fn evanescent_and_out_of_range_inputs_are_rejected() {
        let cfg = cfg_at(5.0);
        assert!(aberration_phase(&cfg, 1.2).is_err());
        let bad = FocusConfig {
            numerical_aperture: 1.6,
            ..cfg
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn residual_phase_grows_with_depth_and_is_reproducible() {
        let mut prev = 0.0;
        for depth in [5.0, 10.0, 20.0] {
            let cfg = cfg_at(depth);
            let a = PupilPhase::of_aberration(&cfg, 2001, true).unwrap();
            let b = PupilPhase::of_aberration(&cfg, 2001, true).unwrap();
            let pv = a.peak_to_valley();
            assert_relative_eq!(pv, b.peak_to_valley(), max_relative = 1e-6);
            assert!(pv > prev, "PV {pv} at depth {depth}");
            prev = pv;
        }
    }

    #[test]
    fn zero_phase_profile_peaks_at_focus_and_is_symmetric() {
        let cfg = cfg_at(0.0);
        let flat = PupilPhase {
            samples: vec![(0.0, 0.0), (1.0, 0.0)],
            piston_defocus_removed: false,
        };
        let profile = axial_intensity(&cfg, &flat, (-3.0, 3.0), 121).unwrap();
        assert!(profile.peak_z_um.abs() < 0.02, "{}", profile.peak_z_um);
        assert_relative_eq!(profile.peak_intensity, 1.0, epsilon = 1e-9);
        let n = profile.intensity.len();
        for i in 0..n / 2 {
            assert_relative_eq!(
                profile.intensity[i],
                profile.intensity[n - 1 - i],
                epsilon = 1e-6
            );
        }
    }

    #[test]
    fn corrected_profile_equals_zero_phase_profile() {
        // Dense sampling keeps the piecewise-linear correction's residual
        // below the intensity tolerance.
        let cfg = cfg_at(12.0);
        let ab = PupilPhase::of_aberration(&cfg, 16385, false).unwrap();
        let corrected = axial_intensity(&cfg, &ab.correction(), (-2.0, 2.0), 81).unwrap();
        let flat = PupilPhase {
            samples: vec![(0.0, 0.0), (1.0, 0.0)],
            piston_defocus_removed: false,
        };
        let ideal = axial_intensity(&cfg_at(0.0), &flat, (-2.0, 2.0), 81).unwrap();
        for (a, b) in corrected.intensity.iter().zip(&ideal.intensity) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn uncorrected_focus_degrades_with_depth() {
        let deep = strehl(&cfg_at(15.0), false).unwrap();
        let shallow = strehl(&cfg_at(6.0), false).unwrap();
        assert!(deep < shallow, "{deep} !< {shallow}");
        assert!(shallow < 0.999);
    }

    #[test]
    fn strehl_is_unity_at_zero_depth_and_when_corrected() {
        assert_relative_eq!(strehl(&cfg_at(0.0), false).unwrap(), 1.0, epsilon = 1e-9);
        for depth in [6.0, 9.0, 12.0, 15.0, 50.0] {
            let s = strehl(&cfg_at(depth), true).unwrap();
            assert!((s - 1.0).abs() < 1e-6, "depth {depth}: {s}");
        }
    }

    #[test]
    fn focal_fwhm_matches_scalar_estimates() {
        let fwhm = focal_fwhm(&FocusConfig::default()).unwrap();
        // Scalar-model values for 790 nm / NA 1.4 / diamond.
        assert!((fwhm.radial_nm - 350.0).abs() / 350.0 < 0.25, "{}", fwhm.radial_nm);
        assert!((fwhm.axial_nm - 1700.0).abs() / 1700.0 < 0.25, "{}", fwhm.axial_nm);
    }

    #[test]
    fn fwhm_scales_linearly_with_wavelength() {
        let base = focal_fwhm(&FocusConfig::default()).unwrap();
        let doubled = focal_fwhm(&FocusConfig {
            wavelength_nm: 1580.0,
            ..FocusConfig::default()
        })
        .unwrap();
        assert_relative_eq!(doubled.radial_nm, 2.0 * base.radial_nm, max_relative = 1e-4);
        assert_relative_eq!(doubled.axial_nm, 2.0 * base.axial_nm, max_relative = 1e-4);
    }

    #[test]
    fn fwhm_shrinks_with_numerical_aperture() {
        let mut prev_r = f64::INFINITY;
        let mut prev_a = f64::INFINITY;
        for na in [1.0, 1.2, 1.4] {
            let f = focal_fwhm(&FocusConfig {
                numerical_aperture: na,
                ..FocusConfig::default()
            })
            .unwrap();
            assert!(f.radial_nm < prev_r);
            assert!(f.axial_nm < prev_a);
            prev_r = f.radial_nm;
            prev_a = f.axial_nm;
        }
    }

    #[test]
    fn quadrature_is_step_converged() {
        // Doubling the sample density changes the defocus-removed PV by
        // less than 1e-4 relative.
        let cfg = cfg_at(15.0);
        let coarse = PupilPhase::of_aberration(&cfg, 1001, true).unwrap().peak_to_valley();
        let fine = PupilPhase::of_aberration(&cfg, 2001, true).unwrap().peak_to_valley();
        assert!((coarse - fine).abs() / fine < 1e-4);

        let ab = PupilPhase::of_aberration(&cfg, 2001, false).unwrap();
        let p1 = axial_intensity(&cfg, &ab.correction(), (-1.0, 1.0), 41).unwrap();
        let p2 = axial_intensity(&cfg, &ab.correction(), (-1.0, 1.0), 81).unwrap();
        assert!((p1.peak_intensity - p2.peak_intensity).abs() < 1e-4);
    }
}
