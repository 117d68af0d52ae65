//! Array planning and qubit-capacity arithmetic.
//!
//! Positions are in micrometres throughout. Chip extents are given in
//! millimetres and converted internally.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Pulse-energy window (nJ) over which the write calibration is defined.
pub const DEFAULT_ENERGY_RANGE_NJ: (f64, f64) = (14.0, 19.0);

/// A diamond chip and the depth range usable for writing.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ChipSpec {
    pub x_extent_mm: f64,
    pub y_extent_mm: f64,
    pub z_extent_mm: f64,
    pub usable_depth_um: f64,
}

impl ChipSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("chip.x_extent_mm", self.x_extent_mm),
            ("chip.y_extent_mm", self.y_extent_mm),
            ("chip.z_extent_mm", self.z_extent_mm),
            ("chip.usable_depth_um", self.usable_depth_um),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(name, format!("must be > 0, got {v}")));
            }
        }
        if self.usable_depth_um > self.z_extent_mm * 1000.0 {
            return Err(Error::invalid(
                "chip.usable_depth_um",
                format!(
                    "usable depth {} um exceeds chip thickness {} um",
                    self.usable_depth_um,
                    self.z_extent_mm * 1000.0
                ),
            ));
        }
        Ok(())
    }
}

impl Default for ChipSpec {
    /// Commercially available electronic-grade stone: 4.5 x 4.5 x 0.5 mm,
    /// with the upper 50 um available for arrays.
    fn default() -> Self {
        ChipSpec {
            x_extent_mm: 4.5,
            y_extent_mm: 4.5,
            z_extent_mm: 0.5,
            usable_depth_um: 50.0,
        }
    }
}

/// Write geometry for one labelled 3D array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayPlan {
    pub label: String,
    /// Corner of the grid in chip coordinates (um).
    pub origin_um: [f64; 3],
    pub nx: u32,
    pub ny: u32,
    pub pitch_xy_um: f64,
    /// Depths below the surface (um), strictly increasing.
    pub depths_um: Vec<f64>,
    pub pulse_energy_nj: f64,
}

impl ArrayPlan {
    /// Structural checks plus the pulse energy against a calibration window.
    pub fn validate(&self, energy_range_nj: (f64, f64)) -> Result<()> {
        self.validate_geometry()?;
        let (lo, hi) = energy_range_nj;
        if !(self.pulse_energy_nj >= lo && self.pulse_energy_nj <= hi) {
            return Err(Error::invalid(
                "plan.pulse_energy_nj",
                format!("{} nJ outside calibrated range [{lo}, {hi}] nJ", self.pulse_energy_nj),
            ));
        }
        Ok(())
    }

    pub fn validate_geometry(&self) -> Result<()> {
        if self.nx < 1 {
            return Err(Error::invalid("plan.nx", "must be >= 1"));
        }
        if self.ny < 1 {
            return Err(Error::invalid("plan.ny", "must be >= 1"));
        }
        if !(self.pitch_xy_um > 0.0) {
            return Err(Error::invalid(
                "plan.pitch_xy_um",
                format!("must be > 0, got {}", self.pitch_xy_um),
            ));
        }
        if self.depths_um.is_empty() {
            return Err(Error::invalid("plan.depths_um", "must list at least one depth"));
        }
        let mut prev = 0.0;
        for &d in &self.depths_um {
            if !(d > prev) {
                return Err(Error::invalid(
                    "plan.depths_um",
                    format!("depths must be strictly increasing and > 0, got {:?}", self.depths_um),
                ));
            }
            prev = d;
        }
        Ok(())
    }

    pub fn site_count(&self) -> usize {
        self.nx as usize * self.ny as usize * self.depths_um.len()
    }
}

impl Default for ArrayPlan {
    /// Geometry of the featured array: 21 x 20 grid, five depth layers,
    /// 3 um pitch, 17.5 nJ pulses.
    fn default() -> Self {
        ArrayPlan {
            label: "M".to_string(),
            origin_um: [0.0, 0.0, 0.0],
            nx: 21,
            ny: 20,
            pitch_xy_um: 3.0,
            depths_um: vec![3.0, 6.0, 9.0, 12.0, 15.0],
            pulse_energy_nj: 17.5,
        }
    }
}

/// One target site of a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub array_label: String,
    pub ix: u32,
    pub iy: u32,
    pub iz: u32,
    pub target_um: [f64; 3],
}

/// Expand a plan into its ordered site list.
///
/// Sites are ordered depth layer first, then row-major within the layer
/// (iy outer, ix inner), matching layer-by-layer writing and keeping exports
/// diffable. Only the geometric invariants are checked here; the pulse
/// energy is validated by whichever fabrication model consumes the plan.
pub fn plan_sites(plan: &ArrayPlan) -> Result<Vec<Site>> {
    plan.validate_geometry()?;
    let mut sites = Vec::with_capacity(plan.site_count());
    for (iz, &depth) in plan.depths_um.iter().enumerate() {
        for iy in 0..plan.ny {
            for ix in 0..plan.nx {
                sites.push(Site {
                    array_label: plan.label.clone(),
                    ix,
                    iy,
                    iz: iz as u32,
                    target_um: [
                        plan.origin_um[0] + ix as f64 * plan.pitch_xy_um,
                        plan.origin_um[1] + iy as f64 * plan.pitch_xy_um,
                        plan.origin_um[2] + depth,
                    ],
                });
            }
        }
    }
    Ok(sites)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capacity {
    pub nvc_sites: u64,
    pub total_qubits: u64,
}

/// Number of NVC sites that fit in a chip at a cubic pitch, and the qubit
/// count they provide. Counts nuclear-register qubits only; set
/// `include_electron` to add one electron spin per site.
pub fn capacity(
    chip: &ChipSpec,
    site_pitch_um: f64,
    qubits_per_nvc: u64,
    include_electron: bool,
) -> Result<Capacity> {
    chip.validate()?;
    if !(site_pitch_um > 0.0) {
        return Err(Error::invalid("site_pitch_um", "must be > 0"));
    }
    if qubits_per_nvc < 1 {
        return Err(Error::invalid("qubits_per_nvc", "must be >= 1"));
    }
    let nx = (chip.x_extent_mm * 1000.0 / site_pitch_um).floor() as u64;
    let ny = (chip.y_extent_mm * 1000.0 / site_pitch_um).floor() as u64;
    let nz = (chip.usable_depth_um / site_pitch_um).floor() as u64;
    let nvc_sites = nx * ny * nz;
    let per_site = qubits_per_nvc + u64::from(include_electron);
    Ok(Capacity {
        nvc_sites,
        total_qubits: nvc_sites * per_site,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_plan_has_2100_sites() {
        let sites = plan_sites(&ArrayPlan::default()).unwrap();
        assert_eq!(sites.len(), 2100);
        // 21 such arrays overshoot the 44,000 total writing sites quoted for
        // the full fabrication run.
        assert!(21 * sites.len() > 44_000);
    }

    #[test]
    fn single_site_plan() {
        let plan = ArrayPlan {
            nx: 1,
            ny: 1,
            depths_um: vec![6.0],
            ..ArrayPlan::default()
        };
        let sites = plan_sites(&plan).unwrap();
        assert_eq!(sites.len(), 1);
        assert_eq!(sites[0].target_um, [0.0, 0.0, 6.0]);
    }

    /// Exhaustive pairwise check: with a 3 um pitch the nearest in-plane
    /// neighbour of every site sits exactly one pitch away.
    #[test]
    fn nearest_neighbour_distance_equals_pitch() {
        let plan = ArrayPlan {
            nx: 3,
            ny: 2,
            pitch_xy_um: 3.0,
            depths_um: vec![6.0, 9.0],
            ..ArrayPlan::default()
        };
        let sites = plan_sites(&plan).unwrap();
        assert_eq!(sites.len(), 12);
        for a in &sites {
            let mut best = f64::INFINITY;
            for b in &sites {
                if a == b || a.iz != b.iz {
                    continue;
                }
                let d = ((a.target_um[0] - b.target_um[0]).powi(2)
                    + (a.target_um[1] - b.target_um[1]).powi(2))
                .sqrt();
                best = best.min(d);
            }
            assert_eq!(best, 3.0);
        }
    }

    #[test]
    fn invalid_plans_name_the_field() {
        let plan = ArrayPlan {
            nx: 0,
            ..ArrayPlan::default()
        };
        let err = plan_sites(&plan).unwrap_err().to_string();
        assert!(err.contains("plan.nx"), "{err}");

        let plan = ArrayPlan {
            depths_um: vec![9.0, 6.0],
            ..ArrayPlan::default()
        };
        let err = plan_sites(&plan).unwrap_err().to_string();
        assert!(err.contains("plan.depths_um"), "{err}");

        let plan = ArrayPlan {
            pulse_energy_nj: 25.0,
            ..ArrayPlan::default()
        };
        let err = plan
            .validate(DEFAULT_ENERGY_RANGE_NJ)
            .unwrap_err()
            .to_string();
        assert!(err.contains("plan.pulse_energy_nj"), "{err}");
    }

    #[test]
    fn capacity_matches_headline_arithmetic() {
        let chip = ChipSpec::default();
        let c = capacity(&chip, 10.0, 1, false).unwrap();
        assert_eq!(c.nvc_sites, 1_012_500);
        let c = capacity(&chip, 10.0, 5, false).unwrap();
        assert_eq!(c.total_qubits, 5_062_500);
        // Optional electron-spin counting adds one per site.
        let c = capacity(&chip, 10.0, 5, true).unwrap();
        assert_eq!(c.total_qubits, 6_075_000);
    }

    #[test]
    fn capacity_floor_semantics() {
        let chip = ChipSpec {
            x_extent_mm: 0.01,
            y_extent_mm: 0.01,
            z_extent_mm: 0.01,
            usable_depth_um: 10.0,
        };
        assert_eq!(capacity(&chip, 10.0, 1, false).unwrap().nvc_sites, 1);
        // A pitch larger than every dimension gives zero sites, not an error.
        assert_eq!(capacity(&chip, 100.0, 1, false).unwrap().nvc_sites, 0);
    }

    #[test]
    fn plan_sites_is_deterministic() {
        let plan = ArrayPlan::default();
        let a = plan_sites(&plan).unwrap();
        let b = plan_sites(&plan).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ordering_is_depth_major() {
        let sites = plan_sites(&ArrayPlan::default()).unwrap();
        assert_eq!((sites[0].ix, sites[0].iy, sites[0].iz), (0, 0, 0));
        assert_eq!((sites[1].ix, sites[1].iy, sites[1].iz), (1, 0, 0));
        assert_eq!(sites[21].iy, 1);
        assert_eq!(sites[420].iz, 1);
    }

    #[test]
    fn plan_round_trips_through_toml() {
        let plan = ArrayPlan::default();
        let text = toml::to_string(&plan).unwrap();
        let back: ArrayPlan = toml::from_str(&text).unwrap();
        assert_eq!(plan, back);
    }

    proptest! {
        #[test]
        fn site_count_is_product(nx in 1u32..12, ny in 1u32..12, nz in 1usize..6,
                                 pitch in 0.5f64..8.0) {
            let depths: Vec<f64> = (0..nz).map(|i| 3.0 * (i as f64 + 1.0)).collect();
            let plan = ArrayPlan {
                nx, ny, pitch_xy_um: pitch, depths_um: depths,
                ..ArrayPlan::default()
            };
            let sites = plan_sites(&plan).unwrap();
            prop_assert_eq!(sites.len(), nx as usize * ny as usize * nz);
        }

        #[test]
        fn capacity_monotone_in_pitch(p1 in 1.0f64..40.0, p2 in 1.0f64..40.0) {
            let chip = ChipSpec::default();
            let (lo, hi) = if p1 < p2 { (p1, p2) } else { (p2, p1) };
            let c_lo = capacity(&chip, lo, 1, false).unwrap();
            let c_hi = capacity(&chip, hi, 1, false).unwrap();
            prop_assert!(c_lo.nvc_sites >= c_hi.nvc_sites);
        }

        #[test]
        fn capacity_multiplicative_in_qubits(q in 1u64..12) {
            let chip = ChipSpec::default();
            let base = capacity(&chip, 10.0, 1, false).unwrap();
            let scaled = capacity(&chip, 10.0, q, false).unwrap();
            prop_assert_eq!(scaled.total_qubits, base.nvc_sites * q);
        }
    }
}
