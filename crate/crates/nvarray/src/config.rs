//! Run configuration: a TOML document mirrored one-to-one by CLI override
//! flags, validated against module preconditions before any compute starts.

use crate::aberration::FocusConfig;
use crate::coherence::NoiseModel;
use crate::error::{Error, Result};
use crate::fabrication::{CalibrationCurve, FabricationModel, FocalSpot, MaterialSpec};
use crate::geometry::ArrayPlan;
use crate::photonstats::EmitterModel;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Plan,
    Fabricate,
    Image,
    Hbt,
    Coherence,
    Aberration,
    FullPipeline,
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Plan => "plan",
            Experiment::Fabricate => "fabricate",
            Experiment::Image => "image",
            Experiment::Hbt => "hbt",
            Experiment::Coherence => "coherence",
            Experiment::Aberration => "aberration",
            Experiment::FullPipeline => "full-pipeline",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FabricationConfig {
    pub spot: FocalSpot,
    /// Capture radius as a multiple of the mean nitrogen spacing.
    pub capture_radius_factor: f64,
    pub interaction_shrink: f64,
    pub dispersion_shape: f64,
    pub calibration: CalibrationCurve,
}

impl Default for FabricationConfig {
    fn default() -> Self {
        FabricationConfig {
            spot: FocalSpot::default(),
            capture_radius_factor: 2.0,
            interaction_shrink: 1.0,
            dispersion_shape: 0.0,
            calibration: CalibrationCurve::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct HbtConfig {
    pub emission_lifetime_ns: f64,
    pub excitation_rate_per_s: f64,
    pub detected_rate_per_s: f64,
    pub background_rate_per_s: f64,
    pub duration_s: f64,
    pub bin_width_ns: f64,
    pub window_ns: f64,
    /// Cap on the number of occupied sites measured.
    pub max_sites: usize,
    pub dip_model_fit: bool,
}

impl Default for HbtConfig {
    fn default() -> Self {
        let m = EmitterModel::default();
        HbtConfig {
            emission_lifetime_ns: m.emission_lifetime_ns,
            excitation_rate_per_s: m.excitation_rate_per_s,
            detected_rate_per_s: m.detected_rate_per_s,
            background_rate_per_s: m.background_rate_per_s,
            duration_s: 3.0,
            bin_width_ns: 2.0,
            window_ns: 150.0,
            max_sites: 40,
            dip_model_fit: true,
        }
    }
}

impl HbtConfig {
    pub fn emitter_model(&self, k: u32) -> EmitterModel {
        EmitterModel {
            k,
            excitation_rate_per_s: self.excitation_rate_per_s,
            emission_lifetime_ns: self.emission_lifetime_ns,
            detected_rate_per_s: self.detected_rate_per_s,
            background_rate_per_s: self.background_rate_per_s,
            dead_time_s: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ImagingConfig {
    /// Explicit PSF sigmas; zero means "derive from the 532 nm focus".
    pub sigma_xy_nm: f64,
    pub sigma_z_nm: f64,
    pub peak_rate_per_s: f64,
    pub background_rate_per_s: f64,
    pub voxel_pitch_nm: [f64; 3],
    pub half_extent_um: [f64; 3],
    pub dwell_s: f64,
    pub max_fits: usize,
}

impl Default for ImagingConfig {
    fn default() -> Self {
        ImagingConfig {
            sigma_xy_nm: 0.0,
            sigma_z_nm: 0.0,
            peak_rate_per_s: 2.0e5,
            background_rate_per_s: 1.0e3,
            voxel_pitch_nm: [80.0, 80.0, 220.0],
            half_extent_um: [0.68, 0.68, 2.6],
            dwell_s: 2.0e-3,
            max_fits: 120,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CoherenceConfig {
    pub noise: NoiseModel,
    /// Echo-survey sampling grid.
    pub t_max_s: f64,
    pub points: usize,
    pub shots_per_point: u64,
    /// Number of single-NVC sites surveyed.
    pub n_curves: usize,
    pub threshold_us: f64,
    /// XY8 order for the decoupling demonstration curve.
    pub xy8_order: u32,
    pub xy8_t_max_s: f64,
}

impl Default for CoherenceConfig {
    fn default() -> Self {
        CoherenceConfig {
            noise: NoiseModel::default(),
            t_max_s: 1.6e-3,
            points: 24,
            shots_per_point: 600,
            n_curves: 23,
            threshold_us: 500.0,
            xy8_order: 4,
            xy8_t_max_s: 7.2e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AberrationConfig {
    pub wavelength_nm: f64,
    pub numerical_aperture: f64,
    pub n_immersion: f64,
    pub n_diamond: f64,
    pub depths_um: Vec<f64>,
}

impl Default for AberrationConfig {
    fn default() -> Self {
        let f = FocusConfig::default();
        AberrationConfig {
            wavelength_nm: f.wavelength_nm,
            numerical_aperture: f.numerical_aperture,
            n_immersion: f.n_immersion,
            n_diamond: f.n_diamond,
            depths_um: vec![6.0, 9.0, 12.0, 15.0],
        }
    }
}

impl AberrationConfig {
    pub fn focus_at(&self, depth_um: f64) -> FocusConfig {
        FocusConfig {
            wavelength_nm: self.wavelength_nm,
            numerical_aperture: self.numerical_aperture,
            n_immersion: self.n_immersion,
            n_diamond: self.n_diamond,
            depth_um,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub master_seed: u64,
    pub experiment: Experiment,
    pub plan: ArrayPlan,
    pub material: MaterialSpec,
    pub fabrication: FabricationConfig,
    pub hbt: HbtConfig,
    pub imaging: ImagingConfig,
    pub coherence: CoherenceConfig,
    pub aberration: AberrationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            master_seed: 42,
            experiment: Experiment::FullPipeline,
            plan: ArrayPlan::default(),
            material: MaterialSpec::default(),
            fabrication: FabricationConfig::default(),
            hbt: HbtConfig::default(),
            imaging: ImagingConfig::default(),
            coherence: CoherenceConfig::default(),
            aberration: AberrationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text)?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Assemble the fabrication model from the material and fabrication blocks.
    pub fn fabrication_model(&self) -> Result<FabricationModel> {
        let mut model = FabricationModel::new(self.material)?;
        model.spot = self.fabrication.spot;
        model.calibration = self.fabrication.calibration;
        model.capture_radius_um *= self.fabrication.capture_radius_factor / 2.0;
        model.interaction_shrink = self.fabrication.interaction_shrink;
        model.dispersion_shape = self.fabrication.dispersion_shape;
        model.validate()?;
        Ok(model)
    }

    /// Validate every block against its module preconditions.
    pub fn validate(&self) -> Result<()> {
        self.plan.validate(self.fabrication.calibration.domain_nj)?;
        self.fabrication_model()?;
        self.hbt.emitter_model(1).validate()?;
        if !(self.hbt.duration_s > 0.0) {
            return Err(Error::invalid("hbt.duration_s", "must be > 0"));
        }
        if !(self.hbt.bin_width_ns > 0.0) || self.hbt.window_ns < self.hbt.bin_width_ns {
            return Err(Error::invalid(
                "hbt.window_ns",
                "need bin_width_ns > 0 and window_ns >= bin_width_ns",
            ));
        }
        self.coherence.noise.validate()?;
        if self.coherence.points < 5 {
            return Err(Error::invalid("coherence.points", "must be >= 5"));
        }
        if self.coherence.shots_per_point < 1 {
            return Err(Error::invalid("coherence.shots_per_point", "must be >= 1"));
        }
        if !(self.coherence.t_max_s > 0.0) {
            return Err(Error::invalid("coherence.t_max_s", "must be > 0"));
        }
        for (name, v) in [
            ("imaging.dwell_s", self.imaging.dwell_s),
            ("imaging.peak_rate_per_s", self.imaging.peak_rate_per_s),
        ] {
            if !(v > 0.0) {
                return Err(Error::invalid(name, "must be > 0"));
            }
        }
        if self.imaging.voxel_pitch_nm.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::invalid("imaging.voxel_pitch_nm", "must be > 0"));
        }
        if self.aberration.depths_um.is_empty() {
            return Err(Error::invalid("aberration.depths_um", "must list at least one depth"));
        }
        for &d in &self.aberration.depths_um {
            self.aberration.focus_at(d).validate()?;
        }
        Ok(())
    }
}

/// Apply `key.path=value` overrides onto a TOML document before parsing.
/// Values are parsed as TOML literals, falling back to strings.
pub fn apply_overrides(text: &str, overrides: &[String]) -> Result<String> {
    let mut doc: toml::Value = toml::from_str(text)?;
    for entry in overrides {
        let (key, value) = entry.split_once('=').ok_or_else(|| {
            Error::Config(format!("override '{entry}' is not KEY=VALUE"))
        })?;
        // Parse the value as a TOML literal (number, bool, array, quoted
        // string); bare words fall back to strings.
        let parsed: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {value}")) {
            Ok(mut t) => t.remove("v").expect("key v present"),
            Err(_) => toml::Value::String(value.to_string()),
        };
        let parts: Vec<&str> = key.split('.').collect();
        let (last, parents) = parts.split_last().expect("split_once gave a key");
        let mut node = &mut doc;
        for part in parents {
            let table = node.as_table_mut().ok_or_else(|| {
                Error::Config(format!("override '{key}': '{part}' is not a table"))
            })?;
            node = table
                .entry(part.to_string())
                .or_insert(toml::Value::Table(Default::default()));
        }
        let table = node.as_table_mut().ok_or_else(|| {
            Error::Config(format!("override '{key}': '{last}' is not a table"))
        })?;
        table.insert(last.to_string(), parsed);
    }
    toml::to_string_pretty(&doc).map_err(|e| Error::Config(e.to_string()))
}
