//! On-disk scenes: `<id>.json` manifest plus little-endian raw blobs
//! `<id>.depth.f64`, `<id>.rgb.f64`, `<id>.seg2d.u8`, `<id>.labels.u8` and
//! `<id>.vis.u8`. A directory of scenes carries an `index.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CameraModel, DepthImage, GridSpec, LabeledBox, SceneMetadata, SceneSample, Visibility, VoxelGrid};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SCENE_INDEX: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub scene_id: String,
    pub seed: u64,
    pub dims: [usize; 3],
    pub voxel_size: f64,
    pub origin: [f64; 3],
    pub camera: CameraModel,
    pub categories: Vec<String>,
    pub min_range: f64,
    pub max_range: f64,
    pub boxes: Vec<LabeledBox>,
    pub skipped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SceneIndex {
    scenes: Vec<String>,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn f64_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn f64_values(path: &Path, bytes: &[u8], expected: usize) -> Result<Vec<f64>> {
    if bytes.len() != expected * 8 {
        return Err(Error::format(
            path,
            format!("expected {} bytes, found {}", expected * 8, bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

fn u8_values(path: &Path, bytes: Vec<u8>, expected: usize) -> Result<Vec<u8>> {
    if bytes.len() != expected {
        return Err(Error::format(path, format!("expected {expected} bytes, found {}", bytes.len())));
    }
    Ok(bytes)
}

pub fn write_scene(dir: &Path, s: &SceneSample) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let spec = s.grid_gt.spec;
    let manifest = SceneManifest {
        scene_id: s.scene_id.clone(),
        seed: s.metadata.seed,
        dims: spec.dims,
        voxel_size: spec.voxel_size,
        origin: spec.origin,
        camera: s.camera.clone(),
        categories: s.categories.clone(),
        min_range: s.min_range,
        max_range: s.max_range,
        boxes: s.metadata.boxes.clone(),
        skipped: s.metadata.skipped.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let id = &s.scene_id;
    write(&dir.join(format!("{id}.json")), json.as_bytes())?;
    write(&dir.join(format!("{id}.depth.f64")), &f64_bytes(&s.depth.values))?;
    write(&dir.join(format!("{id}.rgb.f64")), &f64_bytes(s.rgb.data()))?;
    write(&dir.join(format!("{id}.seg2d.u8")), &s.seg2d_gt)?;
    write(&dir.join(format!("{id}.labels.u8")), &s.grid_gt.labels)?;
    let vis: Vec<u8> = s.grid_gt.visibility.iter().map(|&v| v as u8).collect();
    write(&dir.join(format!("{id}.vis.u8")), &vis)
}

pub fn read_scene(dir: &Path, scene_id: &str) -> Result<SceneSample> {
    let mp = dir.join(format!("{scene_id}.json"));
    let text = read(&mp)?;
    let m: SceneManifest = serde_json::from_slice(&text).map_err(|e| Error::format(&mp, e.to_string()))?;
    if m.scene_id != scene_id {
        return Err(Error::format(&mp, format!("manifest names scene {:?}", m.scene_id)));
    }
    m.camera.validate()?;
    let (w, h) = (m.camera.image_width, m.camera.image_height);
    let spec = GridSpec {
        dims: m.dims,
        voxel_size: m.voxel_size,
        origin: m.origin,
    };

    let p = dir.join(format!("{scene_id}.depth.f64"));
    let depth = DepthImage::new(w, h, f64_values(&p, &read(&p)?, w * h)?)?;
    let p = dir.join(format!("{scene_id}.rgb.f64"));
    let rgb = Tensor::new(vec![3, h, w], f64_values(&p, &read(&p)?, 3 * w * h)?)?;
    let p = dir.join(format!("{scene_id}.seg2d.u8"));
    let seg2d_gt = u8_values(&p, read(&p)?, w * h)?;
    let p = dir.join(format!("{scene_id}.labels.u8"));
    let labels = u8_values(&p, read(&p)?, spec.len())?;
    let p = dir.join(format!("{scene_id}.vis.u8"));
    let visibility = u8_values(&p, read(&p)?, spec.len())?
        .into_iter()
        .map(|v| Visibility::from_u8(v).ok_or_else(|| Error::format(&p, format!("bad visibility code {v}"))))
        .collect::<Result<Vec<_>>>()?;

    let grid_gt = VoxelGrid {
        spec,
        labels,
        visibility,
    };
    grid_gt.validate(m.categories.len().saturating_sub(1))?;
    Ok(SceneSample {
        scene_id: m.scene_id,
        rgb,
        depth,
        camera: m.camera,
        seg2d_gt,
        grid_gt,
        categories: m.categories,
        min_range: m.min_range,
        max_range: m.max_range,
        metadata: SceneMetadata {
            seed: m.seed,
            boxes: m.boxes,
            skipped: m.skipped,
        },
    })
}

pub fn write_scene_index(dir: &Path, scene_ids: &[String]) -> Result<()> {
    let idx = SceneIndex {
        scenes: scene_ids.to_vec(),
    };
    let json = serde_json::to_string_pretty(&idx).expect("index serializes");
    write(&dir.join(SCENE_INDEX), json.as_bytes())
}

pub fn read_scene_index(dir: &Path) -> Result<Vec<String>> {
    let p = dir.join(SCENE_INDEX);
    let idx: SceneIndex = serde_json::from_slice(&read(&p)?).map_err(|e| Error::format(&p, e.to_string()))?;
    Ok(idx.scenes)
}
