//! Browser bindings: generate a synthetic scene, look at its images and
//! voxel slices, and list the category boxes the guidance branch consumes.

use wasm_bindgen::prelude::*;

use ssc_core::export::PALETTE;
use ssc_core::geometry::{
    compute_projection_map, generate_scene, project_labels, SceneConfig, SceneSample, Visibility, CATEGORIES,
};

fn js_err(e: ssc_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

const VISIBILITY_COLORS: [[u8; 3]; 4] = [[245, 245, 245], [230, 120, 40], [60, 90, 200], [40, 40, 40]];

fn visibility_color(v: Visibility) -> [u8; 3] {
    match v {
        Visibility::Free => VISIBILITY_COLORS[0],
        Visibility::VisibleSurface => VISIBILITY_COLORS[1],
        Visibility::Occluded => VISIBILITY_COLORS[2],
        Visibility::OutsideView => VISIBILITY_COLORS[3],
    }
}

fn push_rgba(out: &mut Vec<u8>, [r, g, b]: [u8; 3]) {
    out.extend_from_slice(&[r, g, b, 255]);
}

#[wasm_bindgen]
pub struct DemoScene {
    scene: SceneSample,
}

#[wasm_bindgen]
impl DemoScene {
    /// Generates the scene for `seed` with the default configuration.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<DemoScene, JsError> {
        let scene = generate_scene(&SceneConfig::default(), seed as u64).map_err(js_err)?;
        Ok(Self { scene })
    }

    pub fn id(&self) -> String {
        self.scene.scene_id.clone()
    }

    pub fn width(&self) -> usize {
        self.scene.depth.width
    }

    pub fn height(&self) -> usize {
        self.scene.depth.height
    }

    /// `[dx, dy, dz]`.
    pub fn dims(&self) -> Vec<usize> {
        self.scene.grid_gt.spec.dims.to_vec()
    }

    /// RGBA pixels of `"rgb"`, `"depth"` or `"labels"`.
    pub fn image(&self, kind: &str) -> Result<Vec<u8>, JsError> {
        image_rgba(&self.scene, kind).ok_or_else(|| JsError::new(&format!("unknown image kind {kind:?}")))
    }

    /// Horizontal slice at height `z`, as `dx` columns by `dy` rows with the
    /// far wall on top; `mode` is `"labels"` or `"visibility"`.
    pub fn slice(&self, z: usize, mode: &str) -> Result<Vec<u8>, JsError> {
        slice_rgba(&self.scene, z, mode).ok_or_else(|| JsError::new(&format!("bad slice {z} or mode {mode:?}")))
    }

    /// JSON list of `{category, lo, hi}` voxel boxes of the projected
    /// ground-truth labels, plus visibility counts.
    pub fn guidance_boxes(&self) -> Result<String, JsError> {
        guidance_json(&self.scene).map_err(js_err)
    }
}

pub fn image_rgba(s: &SceneSample, kind: &str) -> Option<Vec<u8>> {
    let n = s.depth.width * s.depth.height;
    let mut out = Vec::with_capacity(4 * n);
    match kind {
        "rgb" => {
            let d = s.rgb.data();
            for p in 0..n {
                let c = [0, 1, 2].map(|k| (d[k * n + p].clamp(0.0, 1.0) * 255.0).round() as u8);
                push_rgba(&mut out, c);
            }
        }
        "depth" => {
            for &z in &s.depth.values {
                let v = if z > 0.0 {
                    (255.0 * (1.0 - (z - s.min_range) / (s.max_range - s.min_range))).clamp(0.0, 255.0) as u8
                } else {
                    0
                };
                push_rgba(&mut out, [v, v, v]);
            }
        }
        "labels" => {
            for &l in &s.seg2d_gt {
                push_rgba(&mut out, PALETTE[l as usize % PALETTE.len()]);
            }
        }
        _ => return None,
    }
    Some(out)
}

pub fn slice_rgba(s: &SceneSample, z: usize, mode: &str) -> Option<Vec<u8>> {
    let g = &s.grid_gt;
    let [dx, dy, dz] = g.spec.dims;
    if z >= dz || !matches!(mode, "labels" | "visibility") {
        return None;
    }
    let mut out = Vec::with_capacity(4 * dx * dy);
    for y in (0..dy).rev() {
        for x in 0..dx {
            let i = g.spec.linear([x, y, z]);
            let c = if mode == "labels" {
                PALETTE[g.labels[i] as usize % PALETTE.len()]
            } else {
                visibility_color(g.visibility[i])
            };
            push_rgba(&mut out, c);
        }
    }
    Some(out)
}

pub fn guidance_json(s: &SceneSample) -> ssc_core::Result<String> {
    let map = compute_projection_map(&s.depth, &s.camera, &s.grid_gt.spec)?;
    let sem = project_labels(&s.seg2d_gt, &map)?;
    let mut boxes = Vec::new();
    for c in 1..=s.num_categories() as u8 {
        let idx: Vec<[usize; 3]> = sem
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == c)
            .map(|(i, _)| s.grid_gt.spec.unravel(i))
            .collect();
        if idx.is_empty() {
            continue;
        }
        let lo: Vec<usize> = (0..3).map(|a| idx.iter().map(|v| v[a]).min().unwrap_or(0)).collect();
        let hi: Vec<usize> = (0..3).map(|a| idx.iter().map(|v| v[a]).max().unwrap_or(0)).collect();
        boxes.push(serde_json::json!({
            "category": CATEGORIES.get(c as usize).copied().unwrap_or("?"),
            "color": PALETTE[c as usize % PALETTE.len()],
            "lo": lo,
            "hi": hi,
            "voxels": idx.len(),
        }));
    }
    let counts = serde_json::json!({
        "free": s.grid_gt.count(Visibility::Free),
        "visible_surface": s.grid_gt.count(Visibility::VisibleSurface),
        "occluded": s.grid_gt.count(Visibility::Occluded),
        "outside_view": s.grid_gt.count(Visibility::OutsideView),
    });
    Ok(serde_json::json!({ "boxes": boxes, "visibility": counts }).to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene() -> SceneSample {
        generate_scene(&SceneConfig::default(), 3).unwrap()
    }

    #[test]
    fn images_have_one_rgba_per_pixel() {
        let s = scene();
        for kind in ["rgb", "depth", "labels"] {
            assert_eq!(image_rgba(&s, kind).unwrap().len(), 4 * 64 * 48);
        }
        assert!(image_rgba(&s, "normals").is_none());
    }

    #[test]
    fn slices_cover_the_floor_plan() {
        let s = scene();
        let [dx, dy, dz] = s.grid_gt.spec.dims;
        assert_eq!(slice_rgba(&s, 0, "labels").unwrap().len(), 4 * dx * dy);
        assert!(slice_rgba(&s, dz, "labels").is_none());
        assert!(slice_rgba(&s, 0, "depth").is_none());
    }

    #[test]
    fn boxes_contain_their_voxels() {
        let s = scene();
        let v: serde_json::Value = serde_json::from_str(&guidance_json(&s).unwrap()).unwrap();
        let boxes = v["boxes"].as_array().unwrap();
        assert!(!boxes.is_empty());
        for b in boxes {
            let (lo, hi) = (b["lo"].as_array().unwrap(), b["hi"].as_array().unwrap());
            let vol: u64 = (0..3).map(|a| hi[a].as_u64().unwrap() - lo[a].as_u64().unwrap() + 1).product();
            assert!(b["voxels"].as_u64().unwrap() <= vol);
        }
        let total: u64 = ["free", "visible_surface", "occluded", "outside_view"]
            .iter()
            .map(|k| v["visibility"][k].as_u64().unwrap())
            .sum();
        assert_eq!(total as usize, s.grid_gt.spec.len());
    }
}
