//! Hanbury-Brown-Twiss photon statistics for k-emitter sites.
//!
//! Each emitter is a two-level renewal source: after a detected photon the
//! next one arrives after an excitation wait plus a radiative decay, thinned
//! by the collection/detection efficiency. Thinning is sampled directly
//! (geometric number of undetected cycles, gamma-distributed total wait), so
//! low-efficiency detection costs nothing extra. Background light is a
//! homogeneous Poisson process, and every photon is routed to one of the two
//! detectors with probability 1/2.
//!
//! For k equal independent emitters the ideal zero-delay correlation is
//! g2(0) = 1 - 1/k; background at signal fraction p lifts it to 1 - p^2/k.

use crate::error::{Error, Result};
use crate::fit::{self, FitOptions, LeastSquaresProblem};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp, Gamma, Geometric};
use serde::{Deserialize, Serialize};

/// A site's emitters plus detection parameters. Rates are per second,
/// the lifetime in nanoseconds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EmitterModel {
    /// Number of independent emitters at the site.
    pub k: u32,
    /// Re-excitation rate per emitter (s^-1).
    pub excitation_rate_per_s: f64,
    /// Radiative lifetime (ns).
    pub emission_lifetime_ns: f64,
    /// Detected count rate per emitter after all losses (s^-1).
    pub detected_rate_per_s: f64,
    /// Detected background rate (s^-1).
    pub background_rate_per_s: f64,
    /// Detector dead time (s); photons closer than this on the same detector
    /// are dropped. Default 0 (off).
    #[serde(default)]
    pub dead_time_s: f64,
}

impl Default for EmitterModel {
    /// Representative NV defaults: 12 ns lifetime and ~1e5 detected counts
    /// per second per emitter. Configuration values, not measured ones.
    fn default() -> Self {
        EmitterModel {
            k: 1,
            excitation_rate_per_s: 2.0e7,
            emission_lifetime_ns: 12.0,
            detected_rate_per_s: 1.0e5,
            background_rate_per_s: 0.0,
            dead_time_s: 0.0,
        }
    }
}

impl EmitterModel {
    /// Photon emission rate of one emitter before detection losses.
    pub fn intrinsic_rate_per_s(&self) -> f64 {
        let a = self.excitation_rate_per_s;
        let b = 1.0 / (self.emission_lifetime_ns * 1e-9);
        a * b / (a + b)
    }

    /// Correlation-dip timescale 1/(excitation rate + decay rate), in seconds.
    pub fn dip_timescale_s(&self) -> f64 {
        1.0 / (self.excitation_rate_per_s + 1.0 / (self.emission_lifetime_ns * 1e-9))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.emission_lifetime_ns > 0.0) {
            return Err(Error::invalid("hbt.emission_lifetime_ns", "must be > 0"));
        }
        for (name, v) in [
            ("hbt.excitation_rate_per_s", self.excitation_rate_per_s),
            ("hbt.detected_rate_per_s", self.detected_rate_per_s),
            ("hbt.background_rate_per_s", self.background_rate_per_s),
            ("hbt.dead_time_s", self.dead_time_s),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::invalid(name, format!("must be >= 0, got {v}")));
            }
        }
        if self.k > 0 && self.detected_rate_per_s > self.intrinsic_rate_per_s() * (1.0 + 1e-9) {
            return Err(Error::invalid(
                "hbt.detected_rate_per_s",
                format!(
                    "exceeds intrinsic emission rate {:.3e} /s",
                    self.intrinsic_rate_per_s()
                ),
            ));
        }
        Ok(())
    }
}

/// Timestamps (seconds) recorded on the two detectors, each strictly
/// increasing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhotonStream {
    pub duration_s: f64,
    pub detector_a: Vec<f64>,
    pub detector_b: Vec<f64>,
}

impl PhotonStream {
    pub fn total_counts(&self) -> usize {
        self.detector_a.len() + self.detector_b.len()
    }
}

/// Simulate a two-detector stream for one site.
pub fn simulate_stream(
    model: &EmitterModel,
    duration_s: f64,
    rng: &mut impl Rng,
) -> Result<PhotonStream> {
    model.validate()?;
    if !(duration_s > 0.0) {
        return Err(Error::invalid("duration_s", "must be > 0"));
    }

    let mut photons: Vec<f64> = Vec::new();
    let a = model.excitation_rate_per_s;
    let b = 1.0 / (model.emission_lifetime_ns * 1e-9);
    let eta = if model.k > 0 && model.intrinsic_rate_per_s() > 0.0 {
        (model.detected_rate_per_s / model.intrinsic_rate_per_s()).min(1.0)
    } else {
        0.0
    };

    if eta > 0.0 {
        let geo = if eta < 1.0 {
            Some(Geometric::new(eta).expect("0 < eta < 1"))
        } else {
            None
        };
        for _ in 0..model.k {
            let mut t = 0.0;
            loop {
                // Number of emission cycles until one is detected, then the
                // total wait: a sum of that many excitation and decay delays.
                let cycles = 1 + geo.as_ref().map_or(0, |g| g.sample(rng));
                let shape = cycles as f64;
                let gap = Gamma::new(shape, 1.0 / a).expect("valid").sample(rng)
                    + Gamma::new(shape, 1.0 / b).expect("valid").sample(rng);
                t += gap;
                if t > duration_s {
                    break;
                }
                photons.push(t);
            }
        }
    }

    if model.background_rate_per_s > 0.0 {
        let exp = Exp::new(model.background_rate_per_s).expect("rate > 0");
        let mut t = 0.0;
        loop {
            t += exp.sample(rng);
            if t > duration_s {
                break;
            }
            photons.push(t);
        }
    }

    photons.sort_unstable_by(|x, y| x.total_cmp(y));
    photons.dedup();

    let mut detector_a = Vec::with_capacity(photons.len() / 2);
    let mut detector_b = Vec::with_capacity(photons.len() / 2);
    for t in photons {
        if rng.gen::<bool>() {
            detector_a.push(t);
        } else {
            detector_b.push(t);
        }
    }
    if model.dead_time_s > 0.0 {
        apply_dead_time(&mut detector_a, model.dead_time_s);
        apply_dead_time(&mut detector_b, model.dead_time_s);
    }
    Ok(PhotonStream {
        duration_s,
        detector_a,
        detector_b,
    })
}

fn apply_dead_time(times: &mut Vec<f64>, dead: f64) {
    let mut last = f64::NEG_INFINITY;
    times.retain(|&t| {
        if t - last >= dead {
            last = t;
            true
        } else {
            false
        }
    });
}

/// Normalised cross-correlation histogram.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct G2Histogram {
    pub bin_width_s: f64,
    /// Bin centres (seconds), symmetric around zero delay.
    pub tau_s: Vec<f64>,
    pub raw_counts: Vec<u64>,
    pub g2: Vec<f64>,
    /// Poisson counting error per normalised bin.
    pub err: Vec<f64>,
    /// Expected coincidences per bin at large delay.
    pub normalization: f64,
    pub duration_s: f64,
}

impl G2Histogram {
    pub fn center_index(&self) -> usize {
        self.tau_s.len() / 2
    }
}

/// Histogram of cross-detector pair delays within +-window.
///
/// Every unordered pair enters at both +delay and -delay, which makes the
/// histogram exactly symmetric; the normalisation is the expected
/// coincidences per bin for uncorrelated streams counted the same way, so
/// uncorrelated light sits at 1.
pub fn g2_histogram(stream: &PhotonStream, bin_width_s: f64, window_s: f64) -> Result<G2Histogram> {
    if !(bin_width_s > 0.0) {
        return Err(Error::invalid("bin_width_s", "must be > 0"));
    }
    if window_s < bin_width_s {
        return Err(Error::invalid("window_s", "must be >= bin_width_s"));
    }
    if stream.total_counts() < 2 {
        return Err(Error::InsufficientData(
            "need at least two photons to correlate".to_string(),
        ));
    }
    if stream.detector_a.is_empty() || stream.detector_b.is_empty() {
        return Err(Error::InsufficientData(
            "one detector recorded no photons".to_string(),
        ));
    }

    let n = (window_s / bin_width_s).round() as i64;
    let nbins = (2 * n + 1) as usize;
    let mut raw = vec![0u64; nbins];
    let edge = (n as f64 + 0.5) * bin_width_s;

    let a = &stream.detector_a;
    let b = &stream.detector_b;
    let mut lo = 0usize;
    for &ta in a {
        while lo < b.len() && b[lo] < ta - edge {
            lo += 1;
        }
        let mut j = lo;
        while j < b.len() && b[j] <= ta + edge {
            let d = b[j] - ta;
            let i = (d / bin_width_s).round() as i64;
            if i.abs() <= n {
                raw[(n + i) as usize] += 1;
                raw[(n - i) as usize] += 1;
            }
            j += 1;
        }
    }

    let rate_a = a.len() as f64 / stream.duration_s;
    let rate_b = b.len() as f64 / stream.duration_s;
    let normalization = 2.0 * rate_a * rate_b * stream.duration_s * bin_width_s;
    let tau_s: Vec<f64> = (-n..=n).map(|i| i as f64 * bin_width_s).collect();
    let g2: Vec<f64> = raw.iter().map(|&c| c as f64 / normalization).collect();
    let err: Vec<f64> = raw
        .iter()
        .map(|&c| (c.max(1) as f64).sqrt() / normalization)
        .collect();
    Ok(G2Histogram {
        bin_width_s,
        tau_s,
        raw_counts: raw,
        g2,
        err,
        normalization,
        duration_s: stream.duration_s,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum G2ZeroMethod {
    DipFit,
    CentralBins,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct G2ZeroEstimate {
    pub g2_zero: f64,
    pub g2_zero_err: f64,
    pub method: G2ZeroMethod,
    /// Set when a requested dip fit failed and the estimate fell back to the
    /// central bins.
    pub fit_fallback: bool,
    /// Fitted dip timescale (s), when the dip fit was used.
    pub tau0_s: Option<f64>,
}

struct DipProblem<'a> {
    hist: &'a G2Histogram,
}

impl LeastSquaresProblem for DipProblem<'_> {
    fn param_count(&self) -> usize {
        2
    }
    // Model g2(tau) = 1 - a * exp(-|tau|/tau0), params (a, ln tau0).
    fn residuals(&self, p: &[f64]) -> Vec<f64> {
        let a = p[0];
        let tau0 = p[1].exp();
        self.hist
            .tau_s
            .iter()
            .zip(self.hist.g2.iter().zip(&self.hist.err))
            .map(|(t, (g, e))| ((1.0 - a * (-t.abs() / tau0).exp()) - g) / e)
            .collect()
    }
    fn jacobian(&self, p: &[f64]) -> Option<DMatrix<f64>> {
        let a = p[0];
        let tau0 = p[1].exp();
        let n = self.hist.tau_s.len();
        let mut j = DMatrix::zeros(n, 2);
        for (i, t) in self.hist.tau_s.iter().enumerate() {
            let e = self.hist.err[i];
            let k = (-t.abs() / tau0).exp();
            j[(i, 0)] = -k / e;
            j[(i, 1)] = -a * k * (t.abs() / tau0) / e;
        }
        Some(j)
    }
}

/// Estimate g2(0) from a histogram, with no background subtraction.
///
/// The default estimator fits 1 - a*exp(-|tau|/tau0) and reports 1 - a with
/// the covariance error; `dip_model_fit = false` (or a failed fit) averages
/// the three central bins with Poisson error propagation. Values are clamped
/// at zero: an ideal antibunching dip can fluctuate marginally negative.
pub fn estimate_g2_zero(hist: &G2Histogram, dip_model_fit: bool) -> Result<G2ZeroEstimate> {
    if hist.tau_s.is_empty() || hist.tau_s[0] > 0.0 || *hist.tau_s.last().unwrap() < 0.0 {
        return Err(Error::invalid("histogram", "must cover tau = 0"));
    }
    let c = hist.center_index();
    let central = central_bins_estimate(hist, c);
    if !dip_model_fit {
        return Ok(central);
    }

    let a0 = (1.0 - central.g2_zero).clamp(0.05, 1.0);
    // Initial timescale: first delay at which the dip has recovered to
    // 1 - a0/e, falling back to five bins.
    let target = 1.0 - a0 * (1.0 - 1.0 / std::f64::consts::E);
    let mut tau0 = 5.0 * hist.bin_width_s;
    for (t, g) in hist.tau_s[c..].iter().zip(&hist.g2[c..]) {
        if *g >= target && *t > 0.0 {
            tau0 = *t;
            break;
        }
    }
    let problem = DipProblem { hist };
    match fit::least_squares(&problem, &[a0, tau0.ln()], &FitOptions::default()) {
        Ok(out) if out.converged => {
            let err = out.covariance[(0, 0)].max(0.0).sqrt();
            Ok(G2ZeroEstimate {
                g2_zero: (1.0 - out.params[0]).max(0.0),
                g2_zero_err: err,
                method: G2ZeroMethod::DipFit,
                fit_fallback: false,
                tau0_s: Some(out.params[1].exp()),
            })
        }
        _ => Ok(G2ZeroEstimate {
            fit_fallback: true,
            ..central
        }),
    }
}

fn central_bins_estimate(hist: &G2Histogram, c: usize) -> G2ZeroEstimate {
    let lo = c.saturating_sub(1);
    let hi = (c + 1).min(hist.g2.len() - 1);
    let vals = &hist.g2[lo..=hi];
    let raws = &hist.raw_counts[lo..=hi];
    let nb = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / nb;
    let total_raw: u64 = raws.iter().sum();
    let err = (total_raw.max(1) as f64).sqrt() / (nb * hist.normalization);
    G2ZeroEstimate {
        g2_zero: mean.max(0.0),
        g2_zero_err: err,
        method: G2ZeroMethod::CentralBins,
        fit_fallback: false,
        tau0_s: None,
    }
}

/// Correct a measured g2(0) for uncorrelated background at known signal
/// fraction p: g2_corr = (g2 - (1 - p^2)) / p^2.
pub fn background_corrected(g2_zero: f64, signal_fraction: f64) -> f64 {
    let p2 = signal_fraction * signal_fraction;
    (g2_zero - (1.0 - p2)) / p2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmitterClass {
    Single,
    Double,
    Triple,
    Unresolved,
}

/// Classify a site by its zero-delay correlation. Half-open bands:
/// below 0.5 single, [0.5, 0.66) double, [0.66, 0.75) triple, and everything
/// at or above 0.75 unresolved.
pub fn classify(g2_zero: f64) -> Result<EmitterClass> {
    if g2_zero < 0.0 || !g2_zero.is_finite() {
        return Err(Error::invalid(
            "g2_zero",
            format!("must be >= 0 and finite, got {g2_zero}"),
        ));
    }
    Ok(if g2_zero < 0.5 {
        EmitterClass::Single
    } else if g2_zero < 0.66 {
        EmitterClass::Double
    } else if g2_zero < 0.75 {
        EmitterClass::Triple
    } else {
        EmitterClass::Unresolved
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiplicityReport {
    /// Counts of Single/Double/Triple/Unresolved.
    pub counts: [u64; 4],
    pub fractions: [f64; 4],
    pub total: u64,
}

/// Fractions of each class among the classified sites.
pub fn multiplicity_report(classes: &[EmitterClass]) -> Result<MultiplicityReport> {
    if classes.is_empty() {
        return Err(Error::Empty("multiplicity_report needs at least one class"));
    }
    let mut counts = [0u64; 4];
    for c in classes {
        let i = match c {
            EmitterClass::Single => 0,
            EmitterClass::Double => 1,
            EmitterClass::Triple => 2,
            EmitterClass::Unresolved => 3,
        };
        counts[i] += 1;
    }
    let total = classes.len() as u64;
    let fractions = counts.map(|c| c as f64 / total as f64);
    Ok(MultiplicityReport {
        counts,
        fractions,
        total,
    })
}
