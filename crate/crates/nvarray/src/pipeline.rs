//! Config-driven experiment runs: stages, per-site RNG streams, manifests.
//!
//! A run executes the stage chain for its experiment, writes plot-ready
//! CSV/JSON outputs into the run directory, and finishes with a manifest
//! listing every output with its SHA-256 digest. Equal (config, seed) pairs
//! produce byte-identical outputs at any parallelism.

use crate::coherence::{self, NoiseModel, PulseSequence};
use crate::config::{Experiment, RunConfig};
use crate::error::{Error, Result};
use crate::export;
use crate::fabrication::{poisson_fit, site_statistics, EmitterSite, PoissonFit, YieldStats};
use crate::geometry::plan_sites;
use crate::imaging::{self, PSFModel, RenderOptions, VolumeSpec};
use crate::photonstats::{self, EmitterClass};
use crate::report;
use crate::rng::{self, STAGE_COHERENCE, STAGE_HBT, STAGE_IMAGING};
use crate::aberration::{self, FocusConfig, PupilPhase};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageTiming {
    pub name: String,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub toolkit_version: String,
    pub experiment: String,
    pub master_seed: u64,
    pub parallelism: usize,
    pub config_toml: String,
    pub stages: Vec<StageTiming>,
    pub outputs: Vec<OutputRecord>,
}

/// Summary persisted by the fabricate stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct YieldSummary {
    pub stats: YieldStats,
    pub poisson: PoissonFit,
}

/// Summary persisted by the image stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrecisionSummary {
    pub attempted: usize,
    pub used: usize,
    pub mean_nm: [f64; 3],
    pub std_nm: [f64; 3],
    pub registered_std_nm: Option<[f64; 3]>,
}

/// Summary persisted by the hbt stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HbtSummary {
    pub measured_sites: usize,
    pub report: photonstats::MultiplicityReport,
    /// Fraction of sites whose class matches the simulated emitter count
    /// (counts above 3 map to Unresolved).
    pub truth_agreement: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoherenceSummary {
    pub survey_total: u64,
    pub survey_above_threshold: u64,
    pub threshold_us: f64,
    pub tally_line: String,
    pub echo_t2_us_median: f64,
    pub xy8_label: String,
    pub xy8_t2_ms: f64,
    pub xy8_n: f64,
    pub t1_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AberrationSummary {
    pub depths_um: Vec<f64>,
    pub corrected_strehl: Vec<f64>,
    pub uncorrected_strehl: Vec<f64>,
    pub fwhm_radial_nm: f64,
    pub fwhm_axial_nm: f64,
}

struct RunContext<'a> {
    config: &'a RunConfig,
    out_dir: &'a Path,
    files: Vec<PathBuf>,
    stages: Vec<StageTiming>,
}

impl RunContext<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn record(&mut self, path: PathBuf) {
        self.files.push(path);
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let value = f(self)?;
        self.stages.push(StageTiming {
            name: name.to_string(),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        Ok(value)
    }
}

/// Execute the experiment named in `config`, writing outputs and the manifest
/// into `out_dir`.
pub fn run(config: &RunConfig, out_dir: &Path, parallelism: usize) -> Result<RunManifest> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;

    let work = || -> Result<RunContext> {
        let mut ctx = RunContext {
            config,
            out_dir,
            files: Vec::new(),
            stages: Vec::new(),
        };
        match config.experiment {
            Experiment::Plan => {
                ctx.stage("plan", stage_plan)?;
            }
            Experiment::Fabricate => {
                ctx.stage("plan", stage_plan)?;
                ctx.stage("fabricate", stage_fabricate)?;
            }
            Experiment::Image => {
                ctx.stage("plan", stage_plan)?;
                let outcomes = ctx.stage("fabricate", stage_fabricate)?;
                ctx.stage("image", |c| stage_image(c, &outcomes))?;
            }
            Experiment::Hbt => {
                ctx.stage("plan", stage_plan)?;
                let outcomes = ctx.stage("fabricate", stage_fabricate)?;
                ctx.stage("hbt", |c| stage_hbt(c, &outcomes))?;
            }
            Experiment::Coherence => {
                ctx.stage("plan", stage_plan)?;
                let outcomes = ctx.stage("fabricate", stage_fabricate)?;
                ctx.stage("coherence", |c| stage_coherence(c, &outcomes))?;
            }
            Experiment::Aberration => {
                ctx.stage("aberration", stage_aberration)?;
            }
            Experiment::FullPipeline => {
                ctx.stage("plan", stage_plan)?;
                let outcomes = ctx.stage("fabricate", stage_fabricate)?;
                ctx.stage("image", |c| stage_image(c, &outcomes))?;
                ctx.stage("hbt", |c| stage_hbt(c, &outcomes))?;
                ctx.stage("coherence", |c| stage_coherence(c, &outcomes))?;
                ctx.stage("aberration", stage_aberration)?;
                ctx.stage("report", |c| {
                    let path = report::generate(c.out_dir)?;
                    c.record(path);
                    Ok(())
                })?;
            }
        }
        Ok(ctx)
    };

    // A dedicated pool pins the worker count; per-site RNG streams make the
    // outputs identical for any value.
    let ctx = if parallelism > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(work)?
    } else {
        work()?
    };

    let mut outputs = Vec::new();
    for file in &ctx.files {
        let bytes = fs::read(file)?;
        let digest = Sha256::digest(&bytes);
        let rel = file
            .strip_prefix(out_dir)
            .unwrap_or(file)
            .to_string_lossy()
            .to_string();
        outputs.push(OutputRecord {
            path: rel,
            sha256: format!("{digest:x}"),
            bytes: bytes.len() as u64,
        });
    }
    outputs.sort_by(|a, b| a.path.cmp(&b.path));

    let manifest = RunManifest {
        toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
        experiment: config.experiment.name().to_string(),
        master_seed: config.master_seed,
        parallelism,
        config_toml: config.to_toml_string()?,
        stages: ctx.stages,
        outputs,
    };
    export::write_json(&out_dir.join("run_manifest.json"), &manifest)?;
    Ok(manifest)
}

fn stage_plan(ctx: &mut RunContext) -> Result<()> {
    let sites = plan_sites(&ctx.config.plan)?;
    let path = ctx.path("sites.csv");
    export::write_sites_csv(&path, &sites)?;
    ctx.record(path);
    Ok(())
}

fn stage_fabricate(ctx: &mut RunContext) -> Result<Vec<EmitterSite>> {
    let model = ctx.config.fabrication_model()?;
    let outcomes = model.simulate_plan(&ctx.config.plan, ctx.config.master_seed)?;
    let stats = site_statistics(&outcomes)?;
    let fit = poisson_fit(&stats.counts)?;

    let path = ctx.path("outcomes.csv");
    export::write_outcomes_csv(&path, &outcomes)?;
    ctx.record(path);
    let path = ctx.path("yield.json");
    export::write_json(
        &path,
        &YieldSummary {
            stats,
            poisson: fit,
        },
    )?;
    ctx.record(path);
    Ok(outcomes)
}

fn imaging_psf(config: &RunConfig) -> Result<PSFModel> {
    let img = &config.imaging;
    if img.sigma_xy_nm > 0.0 && img.sigma_z_nm > 0.0 {
        Ok(PSFModel {
            sigma_xy_nm: img.sigma_xy_nm,
            sigma_z_nm: img.sigma_z_nm,
            peak_rate_per_s: img.peak_rate_per_s,
            background_rate_per_s: img.background_rate_per_s,
        })
    } else {
        let cfg = FocusConfig {
            wavelength_nm: 532.0,
            numerical_aperture: config.aberration.numerical_aperture,
            n_immersion: config.aberration.n_immersion,
            n_diamond: config.aberration.n_diamond,
            depth_um: 0.0,
        };
        PSFModel::from_focus_config(&cfg, img.peak_rate_per_s, img.background_rate_per_s)
    }
}

fn volume_around(config: &RunConfig, target_um: [f64; 3]) -> VolumeSpec {
    let img = &config.imaging;
    let mut dims = [0usize; 3];
    let mut origin = [0.0; 3];
    for ax in 0..3 {
        let pitch_um = img.voxel_pitch_nm[ax] / 1000.0;
        let mut n = (2.0 * img.half_extent_um[ax] / pitch_um).round() as usize;
        if n % 2 == 0 {
            n += 1;
        }
        dims[ax] = n.max(3);
        origin[ax] = target_um[ax] - pitch_um * (dims[ax] as f64 - 1.0) / 2.0;
    }
    VolumeSpec {
        origin_um: origin,
        voxel_pitch_nm: img.voxel_pitch_nm,
        dims,
        dwell_s: img.dwell_s,
    }
}

fn stage_image(ctx: &mut RunContext, outcomes: &[EmitterSite]) -> Result<()> {
    let config = ctx.config;
    let psf = imaging_psf(config)?;
    let singles: Vec<(usize, &EmitterSite)> = outcomes
        .iter()
        .enumerate()
        .filter(|(_, o)| o.multiplicity() == 1)
        .take(config.imaging.max_fits)
        .collect();

    let fits: Vec<(String, [f64; 3], imaging::Localization)> = singles
        .par_iter()
        .map(|(idx, site)| {
            let mut rng = rng::stream(config.master_seed, STAGE_IMAGING, *idx as u64);
            let spec = volume_around(config, site.site.target_um);
            let volume = imaging::render_scan(
                &site.nvc_positions_um,
                &psf,
                &spec,
                RenderOptions::default(),
                &mut rng,
            )?;
            let seed = imaging::brightest_voxel_um(&volume);
            let loc = imaging::localize(&volume, &psf, seed)?;
            Ok((export::site_id(&site.site), site.site.target_um, loc))
        })
        .collect::<Result<_>>()?;

    let attempted = fits.len();
    let converged: Vec<&(String, [f64; 3], imaging::Localization)> =
        fits.iter().filter(|(_, _, l)| l.converged).collect();
    if converged.is_empty() {
        return Err(Error::InsufficientData(
            "no localization converged; nothing to report".to_string(),
        ));
    }
    let locs: Vec<imaging::Localization> = converged.iter().map(|(_, _, l)| l.clone()).collect();
    let targets: Vec<[f64; 3]> = converged.iter().map(|(_, t, _)| *t).collect();
    let ids: Vec<String> = converged.iter().map(|(id, _, _)| id.clone()).collect();
    let report = imaging::precision_report(&locs, &targets)?;

    let path = ctx.path("residuals.csv");
    export::write_residuals_csv(&path, &ids, &report.residuals_nm)?;
    ctx.record(path);
    let path = ctx.path("precision.json");
    export::write_json(
        &path,
        &PrecisionSummary {
            attempted,
            used: locs.len(),
            mean_nm: report.mean_nm,
            std_nm: report.std_nm,
            registered_std_nm: report.registered_std_nm,
        },
    )?;
    ctx.record(path);
    Ok(())
}

fn class_of_truth(k: usize) -> EmitterClass {
    match k {
        1 => EmitterClass::Single,
        2 => EmitterClass::Double,
        3 => EmitterClass::Triple,
        _ => EmitterClass::Unresolved,
    }
}

fn stage_hbt(ctx: &mut RunContext, outcomes: &[EmitterSite]) -> Result<()> {
    let config = ctx.config;
    let occupied: Vec<(usize, &EmitterSite)> = outcomes
        .iter()
        .enumerate()
        .filter(|(_, o)| o.multiplicity() > 0)
        .take(config.hbt.max_sites)
        .collect();
    if occupied.is_empty() {
        return Err(Error::InsufficientData(
            "no occupied sites to measure".to_string(),
        ));
    }

    let bin_s = config.hbt.bin_width_ns * 1e-9;
    let window_s = config.hbt.window_ns * 1e-9;
    let measured: Vec<(String, usize, photonstats::G2ZeroEstimate, EmitterClass)> = occupied
        .par_iter()
        .map(|(idx, site)| {
            let mut rng = rng::stream(config.master_seed, STAGE_HBT, *idx as u64);
            let model = config.hbt.emitter_model(site.multiplicity() as u32);
            let stream = photonstats::simulate_stream(&model, config.hbt.duration_s, &mut rng)?;
            let hist = photonstats::g2_histogram(&stream, bin_s, window_s)?;
            let est = photonstats::estimate_g2_zero(&hist, config.hbt.dip_model_fit)?;
            let class = photonstats::classify(est.g2_zero)?;
            Ok((export::site_id(&site.site), site.multiplicity(), est, class))
        })
        .collect::<Result<_>>()?;

    let path = ctx.path("g2_sites.csv");
    {
        let mut w = std::io::BufWriter::new(fs::File::create(&path)?);
        use std::io::Write;
        writeln!(w, "site_id,k_true,g2_zero,g2_zero_err,class")?;
        for (id, k, est, class) in &measured {
            writeln!(w, "{id},{k},{},{},{class:?}", est.g2_zero, est.g2_zero_err)?;
        }
    }
    ctx.record(path);

    // Example histogram from the first measured site.
    let (first_idx, first_site) = occupied[0];
    let mut rng = rng::stream(config.master_seed, STAGE_HBT, first_idx as u64);
    let model = config.hbt.emitter_model(first_site.multiplicity() as u32);
    let stream = photonstats::simulate_stream(&model, config.hbt.duration_s, &mut rng)?;
    let hist = photonstats::g2_histogram(&stream, bin_s, window_s)?;
    let path = ctx.path("g2_example.csv");
    export::write_g2_csv(&path, &hist)?;
    ctx.record(path);

    let classes: Vec<EmitterClass> = measured.iter().map(|(_, _, _, c)| *c).collect();
    let report = photonstats::multiplicity_report(&classes)?;
    let agree = measured
        .iter()
        .filter(|(_, k, _, c)| class_of_truth(*k) == *c)
        .count() as f64
        / measured.len() as f64;
    let path = ctx.path("multiplicity.json");
    export::write_json(
        &path,
        &HbtSummary {
            measured_sites: measured.len(),
            report,
            truth_agreement: agree,
        },
    )?;
    ctx.record(path);
    Ok(())
}

fn stage_coherence(ctx: &mut RunContext, outcomes: &[EmitterSite]) -> Result<()> {
    let config = ctx.config;
    let coh = &config.coherence;
    let singles: Vec<(usize, &EmitterSite)> = outcomes
        .iter()
        .enumerate()
        .filter(|(_, o)| o.multiplicity() == 1)
        .take(coh.n_curves)
        .collect();
    if singles.is_empty() {
        return Err(Error::InsufficientData(
            "no single-NVC sites for the coherence survey".to_string(),
        ));
    }

    let times: Vec<f64> = (1..=coh.points)
        .map(|i| coh.t_max_s * i as f64 / coh.points as f64)
        .collect();
    // The bath model is site-independent; evaluate the envelope once.
    let mut envelope = Vec::with_capacity(times.len());
    for &t in &times {
        envelope.push(coherence::coherence_signal(
            PulseSequence::HahnEcho,
            t,
            &coh.noise,
        )?);
    }

    let fits: Vec<(String, f64, coherence::StretchedExpFit, coherence::DecayCurve)> = singles
        .par_iter()
        .map(|(idx, site)| {
            let mut rng = rng::stream(config.master_seed, STAGE_COHERENCE, *idx as u64);
            let curve = coherence::sample_curve(
                |t| {
                    let i = times.iter().position(|&x| x == t).unwrap();
                    envelope[i]
                },
                &times,
                coh.shots_per_point,
                &mut rng,
            )?;
            let fit = coherence::fit_stretched_exp(&curve)?;
            Ok((
                export::site_id(&site.site),
                site.site.target_um[2],
                fit,
                curve,
            ))
        })
        .collect::<Result<_>>()?;

    let path = ctx.path("t2_survey.csv");
    {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(fs::File::create(&path)?);
        writeln!(w, "site_id,depth_um,t2_us,t2_err_us,n,n_err,converged")?;
        for (id, depth, fit, _) in &fits {
            writeln!(
                w,
                "{id},{depth},{},{},{},{},{}",
                fit.t2_s * 1e6,
                fit.t2_err_s * 1e6,
                fit.n,
                fit.n_err,
                fit.converged
            )?;
        }
    }
    ctx.record(path);

    let path = ctx.path("echo_curve.csv");
    export::write_decay_csv(&path, &fits[0].3)?;
    ctx.record(path);

    let survey_fits: Vec<coherence::StretchedExpFit> =
        fits.iter().map(|(_, _, f, _)| f.clone()).collect();
    let depths: Vec<f64> = fits.iter().map(|(_, d, _, _)| *d).collect();
    let survey = coherence::survey(
        &survey_fits,
        &depths,
        coh.threshold_us * 1e-6,
        &config.plan.depths_um,
    )?;

    // Decoupling demonstration on the bath model, plus a T1 reference decay.
    let xy8_seq = PulseSequence::Xy8(coh.xy8_order);
    let xy8_times: Vec<f64> = (1..=coh.points)
        .map(|i| coh.xy8_t_max_s * i as f64 / coh.points as f64)
        .collect();
    let mut rng = rng::stream(config.master_seed, STAGE_COHERENCE, u64::MAX);
    let xy8_curve = coherence::synth_decay(
        xy8_seq,
        &coh.noise,
        &xy8_times,
        coh.shots_per_point,
        &mut rng,
    )?;
    let xy8_fit = coherence::fit_stretched_exp(&xy8_curve)?;
    let path = ctx.path("xy8_curve.csv");
    export::write_decay_csv(&path, &xy8_curve)?;
    ctx.record(path);

    let t1_noise = NoiseModel {
        b_rad_per_s: 0.0,
        ..coh.noise
    };
    let t1_times: Vec<f64> = (1..=coh.points)
        .map(|i| 3.0 * coh.noise.t1_s * i as f64 / coh.points as f64)
        .collect();
    let t1_curve = coherence::synth_decay(
        PulseSequence::Ramsey,
        &t1_noise,
        &t1_times,
        coh.shots_per_point,
        &mut rng,
    )?;
    let t1_fit = coherence::fit_t1(&t1_curve)?;

    let mut t2s: Vec<f64> = survey_fits.iter().map(|f| f.t2_s).collect();
    t2s.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let median = t2s[t2s.len() / 2];

    let path = ctx.path("coherence.json");
    export::write_json(
        &path,
        &CoherenceSummary {
            survey_total: survey.total,
            survey_above_threshold: survey.above_threshold,
            threshold_us: coh.threshold_us,
            tally_line: survey.tally_line(),
            echo_t2_us_median: median * 1e6,
            xy8_label: format!("{xy8_seq}"),
            xy8_t2_ms: xy8_fit.t2_s * 1e3,
            xy8_n: xy8_fit.n,
            t1_ms: t1_fit.t1_s * 1e3,
        },
    )?;
    ctx.record(path);
    Ok(())
}

fn stage_aberration(ctx: &mut RunContext) -> Result<()> {
    let config = ctx.config;
    let ab = &config.aberration;
    let mut corrected = Vec::new();
    let mut uncorrected = Vec::new();
    for &depth in &ab.depths_um {
        let cfg = ab.focus_at(depth);
        corrected.push(aberration::strehl(&cfg, true)?);
        uncorrected.push(aberration::strehl(&cfg, false)?);
        let phase = PupilPhase::of_aberration(&cfg, 513, true)?;
        let path = ctx.path(&format!("pupil_phase_{depth}um.csv"));
        export::write_pupil_csv(&path, &phase.samples)?;
        ctx.record(path);
    }

    let path = ctx.path("strehl.csv");
    {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(fs::File::create(&path)?);
        writeln!(w, "depth_um,strehl_corrected,strehl_uncorrected")?;
        for (i, &d) in ab.depths_um.iter().enumerate() {
            writeln!(w, "{d},{},{}", corrected[i], uncorrected[i])?;
        }
    }
    ctx.record(path);

    // Axial profile at the deepest layer, uncorrected, as plot-ready data.
    let deepest = *ab.depths_um.last().unwrap();
    let cfg = ab.focus_at(deepest);
    let flat = PupilPhase {
        samples: vec![(0.0, 0.0), (1.0, 0.0)],
        piston_defocus_removed: false,
    };
    let profile = aberration::axial_intensity(
        &cfg,
        &flat,
        (-0.3 * deepest - 2.0, deepest + 2.0),
        241,
    )?;
    let path = ctx.path(&format!("axial_profile_{deepest}um.csv"));
    export::write_axial_csv(&path, &profile.z_um, &profile.intensity)?;
    ctx.record(path);

    let fwhm = aberration::focal_fwhm(&ab.focus_at(0.0))?;
    let path = ctx.path("aberration.json");
    export::write_json(
        &path,
        &AberrationSummary {
            depths_um: ab.depths_um.clone(),
            corrected_strehl: corrected,
            uncorrected_strehl: uncorrected,
            fwhm_radial_nm: fwhm.radial_nm,
            fwhm_axial_nm: fwhm.axial_nm,
        },
    )?;
    ctx.record(path);
    Ok(())
}
