//! File formats: raw little-endian f32 arrays with a one-line JSON sidecar,
//! 16-bit PGM exports for visual inspection, the trace CSV, and metric
//! reports.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::FanBeamGeometry;
use crate::metrics::MetricReport;
use crate::scalar::Scalar;
use crate::spener::TraceRecord;
use crate::tomo::{Image, Sinogram};

/// One-line JSON sidecar describing a raw array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub shape: [usize; 2],
    pub pixel_size: f64,
}

pub fn raw_path(stem: &Path) -> PathBuf {
    stem.with_extension("f32")
}

pub fn sidecar_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

pub fn pgm_path(stem: &Path) -> PathBuf {
    stem.with_extension("pgm")
}

fn write_raw<S: Scalar>(path: &Path, values: &[S]) -> Result<()> {
    let mut file = BufWriter::new(fs::File::create(path)?);
    for v in values {
        file.write_all(&(v.as_f64() as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_raw<S: Scalar>(path: &Path, expected: usize) -> Result<Vec<S>> {
    let bytes = fs::read(path)?;
    if bytes.len() != expected * 4 {
        return Err(Error::DimensionMismatch {
            expected: format!("{} bytes in {}", expected * 4, path.display()),
            got: format!("{}", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| S::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect())
}

fn write_sidecar(stem: &Path, sidecar: &Sidecar) -> Result<()> {
    let mut line = serde_json::to_string(sidecar)?;
    line.push('\n');
    fs::write(sidecar_path(stem), line)?;
    Ok(())
}

fn read_sidecar(stem: &Path) -> Result<Sidecar> {
    let text = fs::read_to_string(sidecar_path(stem))?;
    Ok(serde_json::from_str(text.trim())?)
}

/// Writes `<stem>.f32` and `<stem>.json`.
pub fn save_image<S: Scalar>(img: &Image<S>, stem: &Path) -> Result<()> {
    write_raw(&raw_path(stem), img.values())?;
    write_sidecar(
        stem,
        &Sidecar {
            shape: [img.size(), img.size()],
            pixel_size: img.pixel_size().as_f64(),
        },
    )
}

pub fn load_image<S: Scalar>(stem: &Path) -> Result<Image<S>> {
    let sidecar = read_sidecar(stem)?;
    let [h, w] = sidecar.shape;
    if h != w {
        return Err(Error::invalid(format!(
            "image sidecar must be square, got {h}x{w}"
        )));
    }
    let values = read_raw(&raw_path(stem), h * w)?;
    Image::new(h, S::of(sidecar.pixel_size), values)
}

/// Sinograms use the same raw+sidecar format with shape
/// `[n_views, n_detectors]` and the detector spacing in `pixel_size`.
pub fn save_sinogram<S: Scalar>(sino: &Sinogram<S>, stem: &Path) -> Result<()> {
    let geom = sino.geometry();
    write_raw(&raw_path(stem), sino.values())?;
    write_sidecar(
        stem,
        &Sidecar {
            shape: [geom.n_views, geom.n_detectors],
            pixel_size: geom.detector_spacing.as_f64(),
        },
    )
}

pub fn load_sinogram<S: Scalar>(stem: &Path, geom: &FanBeamGeometry<S>) -> Result<Sinogram<S>> {
    let sidecar = read_sidecar(stem)?;
    if sidecar.shape != [geom.n_views, geom.n_detectors] {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{} sinogram", geom.n_views, geom.n_detectors),
            got: format!("{}x{}", sidecar.shape[0], sidecar.shape[1]),
        });
    }
    let values = read_raw(&raw_path(stem), geom.n_rays())?;
    Sinogram::new(geom.clone(), values)
}

/// 16-bit PGM export with window/level mapping; `window == None` spans the
/// image's own min/max. Rows are flipped so the physical +y axis points up
/// in the viewer.
pub fn save_pgm<S: Scalar>(img: &Image<S>, stem: &Path, window: Option<(f64, f64)>) -> Result<()> {
    let (lo, hi) = match window {
        Some((lo, hi)) if hi > lo => (lo, hi),
        Some(_) => return Err(Error::invalid("PGM window must satisfy hi > lo")),
        None => {
            let (lo, hi) = img.min_max();
            let (lo, hi) = (lo.as_f64(), hi.as_f64());
            if hi > lo {
                (lo, hi)
            } else {
                (lo, lo + 1.0)
            }
        }
    };
    let n = img.size();
    let mut file = BufWriter::new(fs::File::create(pgm_path(stem))?);
    write!(file, "P5\n{n} {n}\n65535\n")?;
    for r in (0..n).rev() {
        for c in 0..n {
            let v = ((img.get(r, c).as_f64() - lo) / (hi - lo)).clamp(0.0, 1.0);
            let q = (v * 65535.0).round() as u16;
            file.write_all(&q.to_be_bytes())?;
        }
    }
    Ok(())
}

/// Appends nothing; writes the whole trace as CSV
/// (`iteration,loss_dc,loss_reg,psnr,ssim`).
pub fn save_trace(trace: &[TraceRecord], path: &Path) -> Result<()> {
    let mut file = BufWriter::new(fs::File::create(path)?);
    writeln!(file, "iteration,loss_dc,loss_reg,psnr,ssim")?;
    for r in trace {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        writeln!(
            file,
            "{},{:.8},{:.8},{},{}",
            r.iteration,
            r.loss_dc,
            r.loss_reg,
            fmt(r.psnr),
            fmt(r.ssim)
        )?;
    }
    Ok(())
}

/// Metric report as a JSON line, both printed and persisted.
pub fn save_report(report: &MetricReport, path: &Path) -> Result<()> {
    let mut line = serde_json::to_string(report)?;
    line.push('\n');
    fs::write(path, line)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_geometry;

    #[test]
    fn image_roundtrip_is_bit_exact_for_f32() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("img");
        let values: Vec<f32> = (0..16 * 16).map(|i| (i as f32 * 0.37).sin()).collect();
        let img = Image::new(16, 1.0f32 / 16.0, values).unwrap();
        save_image(&img, &stem).unwrap();
        let loaded: Image<f32> = load_image(&stem).unwrap();
        assert_eq!(loaded.values(), img.values());
        assert_eq!(loaded.size(), 16);
    }

    #[test]
    fn sinogram_roundtrip_checks_geometry() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("sino");
        let geom = make_geometry::<f32>(4, 8, 3.0, 3.0, 0.1, 32, 1.0 / 32.0).unwrap();
        let mut sino = Sinogram::zeros(geom.clone());
        sino.values_mut()[5] = 1.25;
        save_sinogram(&sino, &stem).unwrap();
        let loaded = load_sinogram::<f32>(&stem, &geom).unwrap();
        assert_eq!(loaded.values(), sino.values());

        let other = make_geometry::<f32>(8, 8, 3.0, 3.0, 0.1, 32, 1.0 / 32.0).unwrap();
        assert!(load_sinogram::<f32>(&stem, &other).is_err());
    }

    #[test]
    fn pgm_header_and_size_are_correct() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("img");
        let img = Image::new(8, 1.0f64 / 8.0, (0..64).map(|i| i as f64).collect()).unwrap();
        save_pgm(&img, &stem, None).unwrap();
        let bytes = fs::read(pgm_path(&stem)).unwrap();
        let header = b"P5\n8 8\n65535\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 64 * 2);
        // Max value maps to 65535: pixel (7,7) is written in the first row
        // because of the vertical flip.
        assert_eq!(&bytes[header.len() + 14..header.len() + 16], &0xFFFFu16.to_be_bytes());
    }

    #[test]
    fn trace_csv_has_one_row_per_iteration() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let trace = vec![
            TraceRecord { iteration: 1, loss_dc: 0.5, loss_reg: 0.1, psnr: Some(22.0), ssim: Some(0.8) },
            TraceRecord { iteration: 2, loss_dc: 0.25, loss_reg: 0.05, psnr: None, ssim: None },
        ];
        save_trace(&trace, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "iteration,loss_dc,loss_reg,psnr,ssim");
        assert!(lines[1].starts_with("1,0.5"));
        assert!(lines[2].ends_with(",,"));
    }
}
