//! Volume and expression file IO plus volume preprocessing.
//!
//! Volumes are raw little-endian f32 in C order (z, y, x) with a JSON
//! sidecar at `<path>.json` declaring shape and voxel spacing. Expression
//! vectors are two-column TSV files with a `gene_id\tvalue` header.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array3;

use crate::encoders::{ExpressionVector, VolumeTensor};
use crate::error::{CoreError, Result};
use crate::numeric::DenseVector;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct VolumeSidecar {
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
}

fn sidecar_path(data_path: &Path) -> std::path::PathBuf {
    let mut s = data_path.as_os_str().to_owned();
    s.push(".json");
    std::path::PathBuf::from(s)
}

pub fn write_volume(path: &Path, v: &VolumeTensor, spacing_mm: [f64; 3]) -> Result<()> {
    let (d, h, w) = v.shape();
    let sidecar = VolumeSidecar {
        shape: [d, h, w],
        spacing_mm,
    };
    let json = serde_json::to_vec_pretty(&sidecar)?;
    fs::write(sidecar_path(path), json).map_err(|e| CoreError::io(sidecar_path(path), e))?;

    let mut bytes = Vec::with_capacity(d * h * w * 4);
    for &x in v.voxels().iter() {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| CoreError::io(path, e))?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<(VolumeTensor, [f64; 3])> {
    let sc_path = sidecar_path(path);
    let sc_bytes = fs::read(&sc_path).map_err(|e| CoreError::io(&sc_path, e))?;
    let sidecar: VolumeSidecar = serde_json::from_slice(&sc_bytes)?;
    let [d, h, w] = sidecar.shape;
    if d == 0 || h == 0 || w == 0 {
        return Err(CoreError::Manifest(format!(
            "sidecar {} declares an empty shape",
            sc_path.display()
        )));
    }

    let mut f = fs::File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| CoreError::io(path, e))?;
    let expected = d * h * w * 4;
    if bytes.len() != expected {
        return Err(CoreError::Manifest(format!(
            "{}: expected {} bytes for shape {:?}, found {}",
            path.display(),
            expected,
            sidecar.shape,
            bytes.len()
        )));
    }
    let mut vox = Array3::zeros((d, h, w));
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let val = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
        let z = i / (h * w);
        let y = (i / w) % h;
        let x = i % w;
        vox[[z, y, x]] = val;
    }
    Ok((VolumeTensor::new(vox)?, sidecar.spacing_mm))
}

pub fn write_expression(path: &Path, values: &[f64]) -> Result<()> {
    let mut out = String::from("gene_id\tvalue\n");
    for (i, v) in values.iter().enumerate() {
        out.push_str(&format!("g{i:05}\t{v}\n"));
    }
    fs::write(path, out).map_err(|e| CoreError::io(path, e))
}

pub fn read_expression(path: &Path) -> Result<ExpressionVector> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == "gene_id\tvalue" => {}
        _ => {
            return Err(CoreError::Manifest(format!(
                "{}: expression file must start with a gene_id\\tvalue header",
                path.display()
            )))
        }
    }
    let mut values = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let _gene = cols.next();
        let value = cols
            .next()
            .ok_or_else(|| {
                CoreError::Manifest(format!("{}: line {} has no value column", path.display(), lineno + 2))
            })?
            .trim();
        let v: f64 = value.parse().map_err(|_| {
            CoreError::Manifest(format!(
                "{}: line {} has a non-numeric value {value:?}",
                path.display(),
                lineno + 2
            ))
        })?;
        values.push(v);
    }
    if values.is_empty() {
        return Err(CoreError::EmptyInput("expression file"));
    }
    Ok(ExpressionVector::new(DenseVector::new(values)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    ZScore,
}

impl Normalization {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "zscore" => Ok(Self::ZScore),
            other => Err(CoreError::InvalidConfig(format!(
                "unknown normalization {other:?} (supported: zscore)"
            ))),
        }
    }
}

/// Trilinear resample to `target` then normalize. Returns the volume and a
/// degenerate flag set when the input had zero variance (output is zeros).
pub fn preprocess_volume(
    raw: &VolumeTensor,
    target: (usize, usize, usize),
    normalization: Normalization,
) -> Result<(VolumeTensor, bool)> {
    if target.0 == 0 || target.1 == 0 || target.2 == 0 {
        return Err(CoreError::InvalidConfig("target shape axes must be positive".into()));
    }
    let resampled = if raw.shape() == target {
        raw.voxels().clone()
    } else {
        resample_trilinear(raw.voxels(), target)
    };
    match normalization {
        Normalization::ZScore => {
            let n = resampled.len() as f64;
            let mean = resampled.sum() / n;
            let var = resampled.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let std = var.sqrt();
            if std < 1e-12 {
                log::warn!("zero-variance volume normalized to zeros");
                return Ok((VolumeTensor::new(Array3::zeros(target))?, true));
            }
            let out = resampled.mapv(|v| (v - mean) / std);
            Ok((VolumeTensor::new(out)?, false))
        }
    }
}

/// Pixel-center-aligned trilinear interpolation: output voxel i samples the
/// input at (i + 0.5) * in/out - 0.5, clamped to the valid range.
fn resample_trilinear(v: &ndarray::Array3<f64>, target: (usize, usize, usize)) -> Array3<f64> {
    let (id, ih, iw) = v.dim();
    let (od, oh, ow) = target;
    let src = |out_i: usize, out_n: usize, in_n: usize| -> f64 {
        let s = (out_i as f64 + 0.5) * in_n as f64 / out_n as f64 - 0.5;
        s.clamp(0.0, (in_n - 1) as f64)
    };
    Array3::from_shape_fn((od, oh, ow), |(z, y, x)| {
        let sz = src(z, od, id);
        let sy = src(y, oh, ih);
        let sx = src(x, ow, iw);
        let (z0, y0, x0) = (sz.floor() as usize, sy.floor() as usize, sx.floor() as usize);
        let (z1, y1, x1) = (
            (z0 + 1).min(id - 1),
            (y0 + 1).min(ih - 1),
            (x0 + 1).min(iw - 1),
        );
        let (fz, fy, fx) = (sz - z0 as f64, sy - y0 as f64, sx - x0 as f64);
        let c00 = v[[z0, y0, x0]] * (1.0 - fx) + v[[z0, y0, x1]] * fx;
        let c01 = v[[z0, y1, x0]] * (1.0 - fx) + v[[z0, y1, x1]] * fx;
        let c10 = v[[z1, y0, x0]] * (1.0 - fx) + v[[z1, y0, x1]] * fx;
        let c11 = v[[z1, y1, x0]] * (1.0 - fx) + v[[z1, y1, x1]] * fx;
        let c0 = c00 * (1.0 - fy) + c01 * fy;
        let c1 = c10 * (1.0 - fy) + c11 * fy;
        c0 * (1.0 - fz) + c1 * fz
    })
}
