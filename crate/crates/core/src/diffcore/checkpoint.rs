//! Parameter checkpoint format.
//!
//! Two files: a text manifest with one `name<TAB>d0,d1,...` line per array
//! (an empty dimension list denotes a scalar), and a binary buffer holding,
//! for each array in manifest order, a little-endian `u64` element count
//! followed by that many little-endian `f64` values.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use super::params::ParamStore;
use crate::error::{Error, Result};

pub fn encode_params(store: &ParamStore) -> (String, Vec<u8>) {
    let mut manifest = String::new();
    let mut buffer = Vec::with_capacity(store.num_scalars() * 8 + store.len() * 8);
    for (_, name, value) in store.iter() {
        let dims: Vec<String> = value.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(name);
        manifest.push('\t');
        manifest.push_str(&dims.join(","));
        manifest.push('\n');
        buffer.extend_from_slice(&(value.len() as u64).to_le_bytes());
        for v in value.iter() {
            buffer.extend_from_slice(&v.to_le_bytes());
        }
    }
    (manifest, buffer)
}

pub fn decode_params(manifest: &str, buffer: &[u8], manifest_path: &Path) -> Result<ParamStore> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: manifest_path.to_path_buf(),
        line,
        msg,
    };
    let mut store = ParamStore::new();
    let mut offset = 0usize;
    let mut take = |n: usize| -> Option<&[u8]> {
        let out = buffer.get(offset..offset + n)?;
        offset += n;
        Some(out)
    };
    for (i, line) in manifest.lines().enumerate() {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let (name, dims) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(lineno, "expected name<TAB>shape".into()))?;
        let shape: Vec<usize> = if dims.is_empty() {
            vec![]
        } else {
            dims.split(',')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| parse_err(lineno, format!("bad shape {dims:?}: {e}")))?
        };
        let expected: usize = shape.iter().product();
        let count_bytes = take(8).ok_or_else(|| parse_err(lineno, "buffer truncated".into()))?;
        let count = u64::from_le_bytes(count_bytes.try_into().unwrap()) as usize;
        if count != expected {
            return Err(parse_err(
                lineno,
                format!("buffer holds {count} values, shape {shape:?} needs {expected}"),
            ));
        }
        let bytes = take(count * 8).ok_or_else(|| parse_err(lineno, "buffer truncated".into()))?;
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let array = ArrayD::from_shape_vec(IxDyn(&shape), values).unwrap();
        store
            .insert(name, array)
            .map_err(|e| parse_err(lineno, e.to_string()))?;
    }
    if offset != buffer.len() {
        return Err(parse_err(
            manifest.lines().count(),
            format!("{} trailing bytes in buffer", buffer.len() - offset),
        ));
    }
    Ok(store)
}

pub fn write_params(store: &ParamStore, manifest_path: &Path, buffer_path: &Path) -> Result<()> {
    let (manifest, buffer) = encode_params(store);
    fs::write(manifest_path, manifest).map_err(|e| Error::io(manifest_path, e))?;
    let mut f = fs::File::create(buffer_path).map_err(|e| Error::io(buffer_path, e))?;
    f.write_all(&buffer).map_err(|e| Error::io(buffer_path, e))?;
    Ok(())
}

pub fn read_params(manifest_path: &Path, buffer_path: &Path) -> Result<ParamStore> {
    let manifest = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let buffer = fs::read(buffer_path).map_err(|e| Error::io(buffer_path, e))?;
    decode_params(&manifest, &buffer, manifest_path)
}
