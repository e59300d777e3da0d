//! On-disk dataset bundles.
//!
//! A bundle is a directory holding a `manifest.json` with keys `I`, `K`,
//! `J` (array), `dtype` = `"f64le"` (and `R` for factor bundles), plus one
//! binary file per matrix of row-major little-endian 64-bit floats:
//! `slice_000.bin ...` for data, `mask_000.bin ...` for masks, and
//! `A.bin`, `B_000.bin ...`, `C.bin` for factors.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Parafac2Factors;
use crate::stack::{DimSpec, MaskStack, SliceStack};

const DTYPE: &str = "f64le";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(rename = "I")]
    pub i: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "J")]
    pub j: Vec<usize>,
    pub dtype: String,
    #[serde(rename = "R", skip_serializing_if = "Option::is_none", default)]
    pub r: Option<usize>,
}

impl Manifest {
    fn for_dims(dims: &DimSpec, r: Option<usize>) -> Self {
        Manifest {
            i: dims.i,
            k: dims.k,
            j: dims.j.clone(),
            dtype: DTYPE.to_string(),
            r,
        }
    }

    pub fn dims(&self) -> Result<DimSpec> {
        DimSpec::new(self.i, self.j.clone())
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::InvalidBundle(format!("{}: {}", path.display(), e)))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.dtype != DTYPE {
        return Err(Error::InvalidBundle(format!(
            "unsupported dtype '{}'",
            manifest.dtype
        )));
    }
    Ok(manifest)
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

fn write_matrix(path: &Path, m: &Array2<f64>) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut out = BufWriter::new(file);
    for row in m.rows() {
        for v in row.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_matrix(path: &Path, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let file = fs::File::open(path)
        .map_err(|e| Error::InvalidBundle(format!("{}: {}", path.display(), e)))?;
    let mut reader = BufReader::new(file);
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    let expect = rows * cols * 8;
    if bytes.len() != expect {
        return Err(Error::InvalidBundle(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            expect,
            bytes.len()
        )));
    }
    let mut m = Array2::zeros((rows, cols));
    for (idx, chunk) in bytes.chunks_exact(8).enumerate() {
        m[(idx / cols, idx % cols)] = f64::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok(m)
}

pub fn save_stack(dir: &Path, x: &SliceStack) -> Result<()> {
    let dims = x.dims();
    write_manifest(dir, &Manifest::for_dims(&dims, None))?;
    for (k, slice) in x.slices().iter().enumerate() {
        write_matrix(&dir.join(format!("slice_{:03}.bin", k)), slice)?;
    }
    Ok(())
}

pub fn load_stack(dir: &Path) -> Result<SliceStack> {
    let manifest = read_manifest(dir)?;
    let dims = manifest.dims()?;
    let slices = (0..dims.k)
        .map(|k| read_matrix(&dir.join(format!("slice_{:03}.bin", k)), dims.i, dims.j[k]))
        .collect::<Result<Vec<_>>>()?;
    SliceStack::new(slices)
}

pub fn save_mask(dir: &Path, w: &MaskStack) -> Result<()> {
    let dims = w.dims();
    write_manifest(dir, &Manifest::for_dims(&dims, None))?;
    for (k, slice) in w.slices().iter().enumerate() {
        write_matrix(&dir.join(format!("mask_{:03}.bin", k)), slice)?;
    }
    Ok(())
}

pub fn load_mask(dir: &Path) -> Result<MaskStack> {
    let manifest = read_manifest(dir)?;
    let dims = manifest.dims()?;
    let slices = (0..dims.k)
        .map(|k| read_matrix(&dir.join(format!("mask_{:03}.bin", k)), dims.i, dims.j[k]))
        .collect::<Result<Vec<_>>>()?;
    MaskStack::new(slices)
}

pub fn save_factors(dir: &Path, f: &Parafac2Factors) -> Result<()> {
    let dims = f.dims();
    write_manifest(dir, &Manifest::for_dims(&dims, Some(f.rank())))?;
    write_matrix(&dir.join("A.bin"), &f.a)?;
    for (k, b) in f.b.iter().enumerate() {
        write_matrix(&dir.join(format!("B_{:03}.bin", k)), b)?;
    }
    write_matrix(&dir.join("C.bin"), &f.c)?;
    Ok(())
}

pub fn load_factors(dir: &Path) -> Result<Parafac2Factors> {
    let manifest = read_manifest(dir)?;
    let dims = manifest.dims()?;
    let r = manifest
        .r
        .ok_or_else(|| Error::InvalidBundle("factor bundle missing R".into()))?;
    let a = read_matrix(&dir.join("A.bin"), dims.i, r)?;
    let b = (0..dims.k)
        .map(|k| read_matrix(&dir.join(format!("B_{:03}.bin", k)), dims.j[k], r))
        .collect::<Result<Vec<_>>>()?;
    let c = read_matrix(&dir.join("C.bin"), dims.k, r)?;
    Parafac2Factors::new(a, b, c)
}
