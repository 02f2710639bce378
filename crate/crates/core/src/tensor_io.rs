//! Tensor files: NPY v1.0 little-endian f32 payloads plus a JSON sidecar
//! carrying shape, layout, and dtype. The sidecar travels next to the
//! `.npy` under the same stem, so other toolchains can read the payload
//! with any NPY loader and recover the layout from plain JSON.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Layout, TensorSpec};
use crate::kernels::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSidecar {
    pub dims: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<Layout>,
    pub dtype: String,
}

pub fn sidecar_path(npy: &Path) -> PathBuf {
    npy.with_extension("json")
}

fn npy_header(dims: &[usize]) -> Vec<u8> {
    let shape = match dims.len() {
        1 => format!("({},)", dims[0]),
        _ => format!("({})", dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")),
    };
    let mut dict = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {shape}, }}");
    // Total header (magic + version + length field + dict + newline) pads
    // to a 64-byte boundary per the format spec.
    let unpadded = 10 + dict.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    dict.extend(std::iter::repeat_n(' ', pad));
    dict.push('\n');

    let mut out = Vec::with_capacity(10 + dict.len());
    out.extend_from_slice(b"\x93NUMPY\x01\x00");
    out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out
}

/// Writes `tensor` as `.npy` plus its sidecar.
pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    let mut bytes = npy_header(&tensor.spec.dims);
    bytes.reserve(tensor.data.len() * 4);
    for v in &tensor.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))?;

    let sidecar = TensorSidecar {
        dims: tensor.spec.dims.clone(),
        layout: tensor.spec.layout,
        dtype: "f32".to_string(),
    };
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| Error::malformed("tensor sidecar", e))?;
    fs::write(&side, text).map_err(|e| Error::io(side.display().to_string(), e))?;
    Ok(())
}

fn parse_shape(dict: &str) -> Result<Vec<usize>> {
    let bad = || Error::malformed("npy header", dict.trim_end().to_string());
    let start = dict.find("'shape':").ok_or_else(bad)?;
    let open = dict[start..].find('(').ok_or_else(bad)? + start;
    let close = dict[open..].find(')').ok_or_else(bad)? + open;
    let mut dims = Vec::new();
    for part in dict[open + 1..close].split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        dims.push(part.parse::<usize>().map_err(|_| bad())?);
    }
    if dims.is_empty() {
        return Err(bad());
    }
    Ok(dims)
}

/// Reads an `.npy` file; the sidecar, when present, supplies the layout
/// and must agree with the payload's shape.
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let bad = |detail: &str| Error::malformed("npy file", format!("{}: {detail}", path.display()));
    if bytes.len() < 10 || &bytes[..6] != b"\x93NUMPY" {
        return Err(bad("missing NPY magic"));
    }
    if bytes[6] != 1 {
        return Err(bad("only NPY format version 1 is supported"));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let data_start = 10 + header_len;
    if bytes.len() < data_start {
        return Err(bad("truncated header"));
    }
    let dict = std::str::from_utf8(&bytes[10..data_start]).map_err(|_| bad("non-UTF8 header"))?;
    if !dict.contains("'descr': '<f4'") {
        return Err(bad("payload must be little-endian f32 ('<f4')"));
    }
    if !dict.contains("'fortran_order': False") {
        return Err(bad("payload must be C-ordered"));
    }
    let dims = parse_shape(dict)?;

    let count: usize = dims.iter().product();
    let payload = &bytes[data_start..];
    if payload.len() != count * 4 {
        return Err(bad(&format!(
            "shape {:?} needs {} bytes, file holds {}",
            dims,
            count * 4,
            payload.len()
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let mut spec = TensorSpec::new(dims);
    let side = sidecar_path(path);
    if side.exists() {
        let text = fs::read_to_string(&side).map_err(|e| Error::io(side.display().to_string(), e))?;
        let sidecar: TensorSidecar = serde_json::from_str(&text)
            .map_err(|e| Error::malformed("tensor sidecar", format!("{}: {e}", side.display())))?;
        if sidecar.dims != spec.dims {
            return Err(Error::ShapeMismatch(format!(
                "sidecar dims {:?} disagree with payload dims {:?}",
                sidecar.dims, spec.dims
            )));
        }
        if sidecar.dtype != "f32" {
            return Err(Error::malformed("tensor sidecar", format!("dtype '{}'", sidecar.dtype)));
        }
        if sidecar.layout.is_some() {
            spec.layout = sidecar.layout;
        }
    }
    Tensor::new(spec, data)
}
