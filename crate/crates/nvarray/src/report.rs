//! Human-readable run summary, built purely from the persisted stage outputs
//! so it can be regenerated from a run directory at any time.

use crate::error::Result;
use crate::pipeline::{
    AberrationSummary, CoherenceSummary, HbtSummary, PrecisionSummary, YieldSummary,
};
use serde::de::DeserializeOwned;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

fn load<T: DeserializeOwned>(dir: &Path, name: &str) -> Option<T> {
    let text = fs::read_to_string(dir.join(name)).ok()?;
    serde_json::from_str(&text).ok()
}

fn csv_rows(dir: &Path, name: &str) -> Option<usize> {
    let text = fs::read_to_string(dir.join(name)).ok()?;
    Some(text.lines().count().saturating_sub(1))
}

/// Assemble the report text for a run directory.
pub fn build(dir: &Path) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "nvarray run report");
    let _ = writeln!(out, "==================");
    let _ = writeln!(out);

    let _ = writeln!(out, "[plan]");
    match csv_rows(dir, "sites.csv") {
        Some(n) => {
            let _ = writeln!(out, "  planned sites: {n} (sites.csv)");
        }
        None => {
            let _ = writeln!(out, "  not run");
        }
    }
    let _ = writeln!(out);

    let _ = writeln!(out, "[yield]");
    match load::<YieldSummary>(dir, "yield.json") {
        Some(y) => {
            let s = &y.stats;
            let _ = writeln!(
                out,
                "  sites: {}, occupied: {:.2}% ({})",
                s.counts.n_sites,
                100.0 * s.occupied_fraction,
                s.counts.occupied()
            );
            let _ = writeln!(
                out,
                "  multiplicity fractions of all sites: 0: {:.3}  1: {:.4}  2: {:.4}  3: {:.5}  4+: {:.5}",
                s.fraction_of_sites[0],
                s.fraction_of_sites[1],
                s.fraction_of_sites[2],
                s.fraction_of_sites[3],
                s.fraction_of_sites[4]
            );
            let _ = writeln!(
                out,
                "  of occupied sites: single {:.1}%  double {:.1}%  triple {:.1}%",
                100.0 * s.fraction_of_occupied[1],
                100.0 * s.fraction_of_occupied[2],
                100.0 * s.fraction_of_occupied[3]
            );
            let _ = writeln!(
                out,
                "  Poisson fit: lambda_hat = {:.5}, gof p = {:.3}",
                y.poisson.lambda_hat, y.poisson.gof_p
            );
        }
        None => {
            let _ = writeln!(out, "  not run");
        }
    }
    let _ = writeln!(out);

    let _ = writeln!(out, "[placement precision]");
    match load::<PrecisionSummary>(dir, "precision.json") {
        Some(p) => {
            let _ = writeln!(
                out,
                "  localizations used: {} of {} attempted",
                p.used, p.attempted
            );
            let _ = writeln!(
                out,
                "  residual std (raw): x {:.0} nm, y {:.0} nm, z {:.0} nm",
                p.std_nm[0], p.std_nm[1], p.std_nm[2]
            );
            if let Some(r) = p.registered_std_nm {
                let _ = writeln!(
                    out,
                    "  residual std (grid-registered): x {:.0} nm, y {:.0} nm, z {:.0} nm",
                    r[0], r[1], r[2]
                );
            }
        }
        None => {
            let _ = writeln!(out, "  not run");
        }
    }
    let _ = writeln!(out);

    let _ = writeln!(out, "[emitter multiplicity (HBT)]");
    match load::<HbtSummary>(dir, "multiplicity.json") {
        Some(h) => {
            let r = &h.report;
            let _ = writeln!(out, "  measured sites: {}", h.measured_sites);
            let _ = writeln!(
                out,
                "  classes: single {:.1}%  double {:.1}%  triple {:.1}%  unresolved {:.1}%",
                100.0 * r.fractions[0],
                100.0 * r.fractions[1],
                100.0 * r.fractions[2],
                100.0 * r.fractions[3]
            );
            let _ = writeln!(
                out,
                "  agreement with simulated emitter counts: {:.1}%",
                100.0 * h.truth_agreement
            );
        }
        None => {
            let _ = writeln!(out, "  not run");
        }
    }
    let _ = writeln!(out);

    let _ = writeln!(out, "[spin coherence]");
    match load::<CoherenceSummary>(dir, "coherence.json") {
        Some(c) => {
            let _ = writeln!(out, "  spin-echo survey: {}", c.tally_line);
            let _ = writeln!(out, "  median echo T2: {:.0} us", c.echo_t2_us_median);
            let _ = writeln!(
                out,
                "  {}: T2 = {:.1} ms (n = {:.2})",
                c.xy8_label, c.xy8_t2_ms, c.xy8_n
            );
            let _ = writeln!(out, "  T1 reference: {:.1} ms", c.t1_ms);
        }
        None => {
            let _ = writeln!(out, "  not run");
        }
    }
    let _ = writeln!(out);

    let _ = writeln!(out, "[aberration correction]");
    match load::<AberrationSummary>(dir, "aberration.json") {
        Some(a) => {
            for (i, d) in a.depths_um.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "  depth {d} um: Strehl corrected {:.6}, uncorrected {:.4}",
                    a.corrected_strehl[i], a.uncorrected_strehl[i]
                );
            }
            let _ = writeln!(
                out,
                "  corrected focal FWHM: radial {:.0} nm, axial {:.0} nm",
                a.fwhm_radial_nm, a.fwhm_axial_nm
            );
        }
        None => {
            let _ = writeln!(out, "  not run");
        }
    }
    out
}

/// Write report.txt into the run directory and return its path.
pub fn generate(dir: &Path) -> Result<PathBuf> {
    let text = build(dir);
    let path = dir.join("report.txt");
    fs::write(&path, text)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn missing_stages_are_marked_not_run() {
        let dir = tempdir().unwrap();
        let text = build(dir.path());
        // No stage outputs at all: every section reports "not run".
        assert_eq!(text.matches("not run").count(), 6);
    }
}
