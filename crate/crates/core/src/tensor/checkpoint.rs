//! Checkpoint format: a text manifest with one `name<TAB>shape<TAB>offset`
//! line per tensor (shape comma-separated, offset in bytes) next to a raw
//! blob of little-endian `f64` values.

use std::fs;
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MANIFEST: &str = "checkpoint.manifest";
pub const CHECKPOINT_BLOB: &str = "checkpoint.bin";
const HEADER: &str = "# ssc checkpoint v1";

pub fn write_checkpoint(dir: &Path, store: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from(HEADER);
    manifest.push('\n');
    let mut blob = Vec::with_capacity(store.parameter_count() * 8);
    for (name, t) in store.iter() {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!("{name}\t{}\t{}\n", shape.join(","), blob.len()));
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mp = dir.join(CHECKPOINT_MANIFEST);
    fs::write(&mp, manifest).map_err(|e| Error::io(&mp, e))?;
    let bp = dir.join(CHECKPOINT_BLOB);
    fs::write(&bp, blob).map_err(|e| Error::io(&bp, e))?;
    Ok(())
}

pub fn read_checkpoint(dir: &Path) -> Result<ParamStore> {
    let mp = dir.join(CHECKPOINT_MANIFEST);
    let bp = dir.join(CHECKPOINT_BLOB);
    let manifest = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let blob = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    let mut lines = manifest.lines();
    if lines.next() != Some(HEADER) {
        return Err(Error::format(&mp, "missing checkpoint header"));
    }
    let mut store = ParamStore::new();
    let mut expected_offset = 0usize;
    for (ln, line) in lines.enumerate() {
        let bad = |why: &str| Error::format(&mp, format!("line {}: {why}", ln + 2));
        let mut parts = line.split('\t');
        let (Some(name), Some(shape), Some(offset), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad("expected name, shape and offset"));
        };
        let shape: Vec<usize> = shape
            .split(',')
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("bad shape"))?;
        let offset: usize = offset.parse().map_err(|_| bad("bad offset"))?;
        if offset != expected_offset {
            return Err(bad("offsets are not contiguous"));
        }
        let n: usize = shape.iter().product();
        let end = offset + n * 8;
        if end > blob.len() {
            return Err(bad("tensor extends past the end of the blob"));
        }
        let data = blob[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        store
            .add(name, Tensor::new(shape, data)?)
            .map_err(|_| bad("duplicate tensor name"))?;
        expected_offset = end;
    }
    if expected_offset != blob.len() {
        return Err(Error::format(&bp, "trailing bytes after the last tensor"));
    }
    Ok(store)
}
