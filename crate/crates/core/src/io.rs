//! On-disk formats: the raster binary container with its JSON sidecar, the
//! parameter container (flat binary plus a JSON shape manifest), and small
//! deterministic JSON/CSV writers.
//!
//! Every writer produces byte-identical output for identical values, so
//! reruns of a seeded experiment can be diffed file for file.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{CvaParams, SnfParams};
use crate::geom::{BevGridSpec, BevRaster};
use crate::layers::{AffineLayer, ConvLayer};
use crate::ovs::OvsScorerParams;

const RASTER_MAGIC: &[u8; 4] = b"BEVR";
const PARAMS_MAGIC: &[u8; 4] = b"PRMB";
const FORMAT_VERSION: u32 = 1;

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::io(path.display().to_string(), e)
}

// ── Raster container ────────────────────────────────────────────────────────

/// Sidecar describing the raster binary next to it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RasterSidecar {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub resolution: f64,
    pub dtype: String,
    pub layout: String,
}

/// Writes a raster: magic, version, H/W/C, grid spec, then the data as
/// little-endian f32 in storage order (row-major cells, channel fastest).
/// A `.json` sidecar with the same stem describes the layout.
pub fn write_raster(path: &Path, r: &BevRaster) -> Result<()> {
    let spec = r.spec;
    let mut buf = Vec::with_capacity(64 + r.data.len() * 4);
    buf.extend_from_slice(RASTER_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(spec.h() as u32).to_le_bytes());
    buf.extend_from_slice(&(spec.w() as u32).to_le_bytes());
    buf.extend_from_slice(&(r.channels as u32).to_le_bytes());
    for v in [
        spec.x_min,
        spec.x_max,
        spec.y_min,
        spec.y_max,
        spec.resolution,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in &r.data {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, &buf).map_err(|e| io_err(path, e))?;
    let sidecar = RasterSidecar {
        h: spec.h(),
        w: spec.w(),
        channels: r.channels,
        x_range: (spec.x_min, spec.x_max),
        y_range: (spec.y_min, spec.y_max),
        resolution: spec.resolution,
        dtype: "f32le".into(),
        layout: "row-major, channel fastest".into(),
    };
    write_json(&path.with_extension("json"), &sidecar)
}

/// Reads a raster written by [`write_raster`]. Values round-trip through
/// f32.
pub fn read_raster(path: &Path) -> Result<BevRaster> {
    let mut file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf).map_err(|e| io_err(path, e))?;
    let fail = |msg: &str| Error::InvalidInput(format!("{}: {msg}", path.display()));
    if buf.len() < 60 || &buf[0..4] != RASTER_MAGIC {
        return Err(fail("not a raster container"));
    }
    let u32_at = |off: usize| u32::from_le_bytes(buf[off..off + 4].try_into().unwrap());
    let f64_at = |off: usize| f64::from_le_bytes(buf[off..off + 8].try_into().unwrap());
    if u32_at(4) != FORMAT_VERSION {
        return Err(fail("unsupported container version"));
    }
    let (h, w, c) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
    let spec = BevGridSpec::new(
        (f64_at(20), f64_at(28)),
        (f64_at(36), f64_at(44)),
        f64_at(52),
    )?;
    if spec.h() != h || spec.w() != w {
        return Err(fail("header dims disagree with grid spec"));
    }
    let expected = 60 + h * w * c * 4;
    if buf.len() != expected {
        return Err(fail("truncated raster data"));
    }
    let mut r = BevRaster::zeros(spec, c);
    for (k, v) in r.data.iter_mut().enumerate() {
        let off = 60 + k * 4;
        *v = f32::from_le_bytes(buf[off..off + 4].try_into().unwrap()) as f64;
    }
    Ok(r)
}

// ── Parameter container ─────────────────────────────────────────────────────

fn write_flat(path: &Path, flat: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + flat.len() * 8);
    buf.extend_from_slice(PARAMS_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for v in flat {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, &buf).map_err(|e| io_err(path, e))
}

fn read_flat(path: &Path) -> Result<Vec<f64>> {
    let buf = fs::read(path).map_err(|e| io_err(path, e))?;
    let fail = |msg: &str| Error::InvalidInput(format!("{}: {msg}", path.display()));
    if buf.len() < 16 || &buf[0..4] != PARAMS_MAGIC {
        return Err(fail("not a parameter container"));
    }
    if u32::from_le_bytes(buf[4..8].try_into().unwrap()) != FORMAT_VERSION {
        return Err(fail("unsupported container version"));
    }
    let len = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
    if buf.len() != 16 + len * 8 {
        return Err(fail("truncated parameter data"));
    }
    Ok((0..len)
        .map(|k| f64::from_le_bytes(buf[16 + k * 8..24 + k * 8].try_into().unwrap()))
        .collect())
}

/// Shape manifest stored as `<path>.json` beside a parameter binary.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamManifest {
    Cva {
        n_off: usize,
        channels: usize,
    },
    Snf {
        feature_channels: usize,
        semantic_channels: usize,
    },
    Scorer {
        conv1: (usize, usize, usize),
        conv2: (usize, usize, usize),
        cva_n_off: usize,
        cva_channels: usize,
        embed_dim: usize,
        mlp_hidden: usize,
    },
}

fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    path.with_file_name(name)
}

fn write_manifest(path: &Path, manifest: &ParamManifest, flat: &[f64]) -> Result<()> {
    write_flat(path, flat)?;
    write_json(&manifest_path(path), manifest)
}

fn read_manifest(path: &Path) -> Result<(ParamManifest, Vec<f64>)> {
    let manifest: ParamManifest = read_json(&manifest_path(path))?;
    Ok((manifest, read_flat(path)?))
}

pub fn save_cva_params(path: &Path, params: &CvaParams) -> Result<()> {
    write_manifest(
        path,
        &ParamManifest::Cva {
            n_off: params.n_off,
            channels: params.channels,
        },
        &params.flatten(),
    )
}

pub fn load_cva_params(path: &Path) -> Result<CvaParams> {
    let (manifest, flat) = read_manifest(path)?;
    match manifest {
        ParamManifest::Cva { n_off, channels } => {
            CvaParams::identity(n_off, channels).unflatten(&flat)
        }
        _ => Err(Error::InvalidInput(format!(
            "{}: manifest is not an alignment parameter set",
            path.display()
        ))),
    }
}

pub fn save_snf_params(path: &Path, params: &SnfParams) -> Result<()> {
    let mut flat = params.score.weights.clone();
    flat.extend_from_slice(&params.score.bias);
    write_manifest(
        path,
        &ParamManifest::Snf {
            feature_channels: params.feature_channels,
            semantic_channels: params.semantic_channels,
        },
        &flat,
    )
}

pub fn load_snf_params(path: &Path) -> Result<SnfParams> {
    let (manifest, flat) = read_manifest(path)?;
    match manifest {
        ParamManifest::Snf {
            feature_channels,
            semantic_channels,
        } => {
            let mut p = SnfParams::zeros(feature_channels, semantic_channels);
            let nw = p.score.weights.len();
            if flat.len() != nw + p.score.bias.len() {
                return Err(Error::InvalidInput(format!(
                    "{}: parameter count disagrees with manifest shapes",
                    path.display()
                )));
            }
            p.score.weights.copy_from_slice(&flat[..nw]);
            p.score.bias.copy_from_slice(&flat[nw..]);
            Ok(p)
        }
        _ => Err(Error::InvalidInput(format!(
            "{}: manifest is not a fusion gate parameter set",
            path.display()
        ))),
    }
}

pub fn save_scorer_params(path: &Path, params: &OvsScorerParams) -> Result<()> {
    write_manifest(
        path,
        &ParamManifest::Scorer {
            conv1: (
                params.conv1.in_channels,
                params.conv1.out_channels,
                params.conv1.stride,
            ),
            conv2: (
                params.conv2.in_channels,
                params.conv2.out_channels,
                params.conv2.stride,
            ),
            cva_n_off: params.cva.n_off,
            cva_channels: params.cva.channels,
            embed_dim: params.embed_dim,
            mlp_hidden: params.mlp1.out_dim,
        },
        &params.flatten(),
    )
}

pub fn load_scorer_params(path: &Path) -> Result<OvsScorerParams> {
    let (manifest, flat) = read_manifest(path)?;
    match manifest {
        ParamManifest::Scorer {
            conv1,
            conv2,
            cva_n_off,
            cva_channels,
            embed_dim,
            mlp_hidden,
        } => {
            let template = OvsScorerParams {
                conv1: ConvLayer::zeros(conv1.0, conv1.1, conv1.2),
                conv2: ConvLayer::zeros(conv2.0, conv2.1, conv2.2),
                cva: CvaParams::identity(cva_n_off, cva_channels),
                embed_dim,
                mlp1: AffineLayer::zeros(embed_dim, mlp_hidden),
                mlp2: AffineLayer::zeros(mlp_hidden, 1),
            };
            template.unflatten(&flat)
        }
        _ => Err(Error::InvalidInput(format!(
            "{}: manifest is not a scorer parameter set",
            path.display()
        ))),
    }
}

// ── JSON and CSV helpers ────────────────────────────────────────────────────

/// Pretty JSON plus a trailing newline; field order follows declaration
/// order, so identical values serialize identically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidInput(format!("serialize {}: {e}", path.display())))?;
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(body.as_bytes())
        .and_then(|_| f.write_all(b"\n"))
        .map_err(|e| io_err(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let body = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&body)
        .map_err(|e| Error::InvalidInput(format!("parse {}: {e}", path.display())))
}

/// Writes prebuilt CSV lines (header first) with `\n` endings.
pub fn write_csv_lines(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut body = String::with_capacity(header.len() + rows.iter().map(|r| r.len() + 1).sum::<usize>() + 1);
    body.push_str(header);
    body.push('\n');
    for row in rows {
        body.push_str(row);
        body.push('\n');
    }
    fs::write(path, body).map_err(|e| io_err(path, e))
}
