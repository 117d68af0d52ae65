//! Plot-ready CSV and JSON writers. Numeric formatting uses Rust's shortest
//! round-trip representation, which is deterministic and locale-independent.

use crate::coherence::DecayCurve;
use crate::error::{Error, Result};
use crate::fabrication::EmitterSite;
use crate::geometry::Site;
use crate::imaging::{ConfocalVolume, VolumeSpec};
use crate::photonstats::{G2Histogram, PhotonStream};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

fn writer(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(fs::File::create(path)?))
}

pub fn site_id(site: &Site) -> String {
    format!("{}-{}-{}-{}", site.array_label, site.ix, site.iy, site.iz)
}

pub fn write_sites_csv(path: &Path, sites: &[Site]) -> Result<()> {
    let mut w = writer(path)?;
    writeln!(w, "array_label,ix,iy,iz,x_um,y_um,z_um")?;
    for s in sites {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            s.array_label, s.ix, s.iy, s.iz, s.target_um[0], s.target_um[1], s.target_um[2]
        )?;
    }
    Ok(())
}

/// One row per NVC (site id repeated at multi-NVC sites); empty sites keep a
/// row with blank displacement columns.
pub fn write_outcomes_csv(path: &Path, outcomes: &[EmitterSite]) -> Result<()> {
    let mut w = writer(path)?;
    writeln!(w, "site_id,multiplicity,dx_nm,dy_nm,dz_nm")?;
    for o in outcomes {
        let id = site_id(&o.site);
        if o.nvc_positions_um.is_empty() {
            writeln!(w, "{id},0,,,")?;
            continue;
        }
        for p in &o.nvc_positions_um {
            writeln!(
                w,
                "{},{},{},{},{}",
                id,
                o.multiplicity(),
                (p[0] - o.site.target_um[0]) * 1000.0,
                (p[1] - o.site.target_um[1]) * 1000.0,
                (p[2] - o.site.target_um[2]) * 1000.0
            )?;
        }
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = writer(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn write_g2_csv(path: &Path, hist: &G2Histogram) -> Result<()> {
    let mut w = writer(path)?;
    writeln!(w, "tau_ns,g2,raw,err")?;
    for i in 0..hist.tau_s.len() {
        writeln!(
            w,
            "{},{},{},{}",
            hist.tau_s[i] * 1e9,
            hist.g2[i],
            hist.raw_counts[i],
            hist.err[i]
        )?;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StreamSidecar {
    pub duration_s: f64,
    pub counts_a: usize,
    pub counts_b: usize,
    pub seed: u64,
    pub detected_rate_per_s: f64,
    pub background_rate_per_s: f64,
}

/// Timestamp CSV plus a JSON sidecar describing the acquisition.
pub fn write_stream(path_csv: &Path, path_json: &Path, stream: &PhotonStream, sidecar: &StreamSidecar) -> Result<()> {
    let mut w = writer(path_csv)?;
    writeln!(w, "t_s,detector")?;
    let mut ia = 0;
    let mut ib = 0;
    // Merge the two channels in time order.
    while ia < stream.detector_a.len() || ib < stream.detector_b.len() {
        let ta = stream.detector_a.get(ia).copied().unwrap_or(f64::INFINITY);
        let tb = stream.detector_b.get(ib).copied().unwrap_or(f64::INFINITY);
        if ta <= tb {
            writeln!(w, "{ta},a")?;
            ia += 1;
        } else {
            writeln!(w, "{tb},b")?;
            ib += 1;
        }
    }
    write_json(path_json, sidecar)
}

pub fn read_stream_csv(path: &Path, duration_s: f64) -> Result<PhotonStream> {
    let text = fs::read_to_string(path)?;
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let (t, det) = line
            .split_once(',')
            .ok_or_else(|| Error::Config(format!("bad stream row: {line}")))?;
        let t: f64 = t
            .parse()
            .map_err(|e| Error::Config(format!("bad timestamp {t}: {e}")))?;
        match det {
            "a" => a.push(t),
            "b" => b.push(t),
            other => return Err(Error::Config(format!("unknown detector {other}"))),
        }
    }
    Ok(PhotonStream {
        duration_s,
        detector_a: a,
        detector_b: b,
    })
}

pub fn write_decay_csv(path: &Path, curve: &DecayCurve) -> Result<()> {
    let mut w = writer(path)?;
    writeln!(w, "t_s,signal,sigma")?;
    for i in 0..curve.times_s.len() {
        writeln!(w, "{},{},{}", curve.times_s[i], curve.signal[i], curve.sigma[i])?;
    }
    Ok(())
}

pub fn write_residuals_csv(path: &Path, ids: &[String], residuals_nm: &[[f64; 3]]) -> Result<()> {
    let mut w = writer(path)?;
    writeln!(w, "site_id,dx_nm,dy_nm,dz_nm")?;
    for (id, r) in ids.iter().zip(residuals_nm) {
        writeln!(w, "{id},{},{},{}", r[0], r[1], r[2])?;
    }
    Ok(())
}

pub fn write_pupil_csv(path: &Path, samples: &[(f64, f64)]) -> Result<()> {
    let mut w = writer(path)?;
    writeln!(w, "rho,phase_rad")?;
    for (rho, phase) in samples {
        writeln!(w, "{rho},{phase}")?;
    }
    Ok(())
}

pub fn write_axial_csv(path: &Path, z_um: &[f64], intensity: &[f64]) -> Result<()> {
    let mut w = writer(path)?;
    writeln!(w, "z_um,intensity")?;
    for (z, i) in z_um.iter().zip(intensity) {
        writeln!(w, "{z},{i}")?;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub voxel_pitch_nm: [f64; 3],
    pub origin_um: [f64; 3],
    pub dwell_s: f64,
    pub seed: u64,
    pub clipped: bool,
}

/// Flat little-endian u32 array plus a JSON header.
pub fn write_volume(path_bin: &Path, path_json: &Path, volume: &ConfocalVolume, seed: u64) -> Result<()> {
    let mut w = writer(path_bin)?;
    for c in &volume.counts {
        w.write_all(&c.to_le_bytes())?;
    }
    write_json(
        path_json,
        &VolumeHeader {
            dims: volume.spec.dims,
            voxel_pitch_nm: volume.spec.voxel_pitch_nm,
            origin_um: volume.spec.origin_um,
            dwell_s: volume.spec.dwell_s,
            seed,
            clipped: volume.clipped,
        },
    )
}

pub fn read_volume(path_bin: &Path, path_json: &Path) -> Result<ConfocalVolume> {
    let header: VolumeHeader = serde_json::from_str(&fs::read_to_string(path_json)?)?;
    let bytes = fs::read(path_bin)?;
    let n = header.dims[0] * header.dims[1] * header.dims[2];
    if bytes.len() != 4 * n {
        return Err(Error::Config(format!(
            "volume payload is {} bytes, header implies {}",
            bytes.len(),
            4 * n
        )));
    }
    let counts = bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(ConfocalVolume {
        spec: VolumeSpec {
            origin_um: header.origin_um,
            voxel_pitch_nm: header.voxel_pitch_nm,
            dims: header.dims,
            dwell_s: header.dwell_s,
        },
        counts,
        clipped: header.clipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{render_scan, PSFModel, RenderOptions};
    use crate::photonstats::{simulate_stream, EmitterModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    #[test]
    fn stream_round_trips_through_csv() {
        let dir = tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let stream = simulate_stream(&EmitterModel::default(), 0.05, &mut rng).unwrap();
        let csv = dir.path().join("stream.csv");
        let json = dir.path().join("stream.json");
        write_stream(
            &csv,
            &json,
            &stream,
            &StreamSidecar {
                duration_s: stream.duration_s,
                counts_a: stream.detector_a.len(),
                counts_b: stream.detector_b.len(),
                seed: 1,
                detected_rate_per_s: 1e5,
                background_rate_per_s: 0.0,
            },
        )
        .unwrap();
        let back = read_stream_csv(&csv, stream.duration_s).unwrap();
        assert_eq!(back.detector_a, stream.detector_a);
        assert_eq!(back.detector_b, stream.detector_b);
    }

    #[test]
    fn volume_round_trips_through_binary() {
        let dir = tempdir().unwrap();
        let psf = PSFModel {
            sigma_xy_nm: 100.0,
            sigma_z_nm: 400.0,
            peak_rate_per_s: 1e5,
            background_rate_per_s: 500.0,
        };
        let spec = crate::imaging::VolumeSpec {
            origin_um: [-0.2, -0.2, -0.6],
            voxel_pitch_nm: [50.0, 50.0, 150.0],
            dims: [9, 9, 9],
            dwell_s: 1e-3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vol = render_scan(&[[0.0; 3]], &psf, &spec, RenderOptions::default(), &mut rng).unwrap();
        let bin = dir.path().join("vol.bin");
        let json = dir.path().join("vol.json");
        write_volume(&bin, &json, &vol, 2).unwrap();
        let back = read_volume(&bin, &json).unwrap();
        assert_eq!(back.counts, vol.counts);
        assert_eq!(back.spec.dims, vol.spec.dims);
    }
}
