//! Procedural indoor scenes: an axis-aligned room shell with labeled boxes,
//! rendered by exact ray/box intersection.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    compute_projection_map, dot, CameraModel, DepthImage, GridSpec, Visibility, VoxelGrid, CATEGORIES, CEILING,
    FLOOR, NUM_CATEGORIES, OBJECT_CATEGORIES, WALL, WINDOW,
};
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// Depth is reported this far past the first hit so that back-projection
/// lands inside the surface voxel under floor indexing.
pub(crate) const SURFACE_BIAS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeRange {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub grid_dims: [usize; 3],
    pub voxel_size: f64,
    pub image_width: usize,
    pub image_height: usize,
    pub horizontal_fov_deg: f64,
    pub min_range: f64,
    pub max_range: f64,
    /// Category names in label order, index 0 being empty.
    pub categories: Vec<String>,
    /// Inclusive range for the number of furniture boxes.
    pub object_count: [usize; 2],
    pub window_probability: f64,
    /// Camera height as a fraction of room height.
    pub camera_height: [f64; 2],
    pub pitch_deg: [f64; 2],
    pub yaw_jitter_deg: f64,
    pub max_placement_retries: usize,
    /// Per-pixel uniform color noise amplitude.
    pub color_noise: f64,
}

impl Default for SceneConfig {
    /// Desk-scale default: 16 x 16 x 12 voxels of 0.2 m, 64 x 48 images.
    fn default() -> Self {
        Self {
            grid_dims: [16, 16, 12],
            voxel_size: 0.2,
            image_width: 64,
            image_height: 48,
            horizontal_fov_deg: 70.0,
            min_range: 0.3,
            max_range: 10.0,
            categories: CATEGORIES.iter().map(|s| s.to_string()).collect(),
            object_count: [3, 6],
            window_probability: 0.7,
            camera_height: [0.45, 0.65],
            pitch_deg: [12.0, 25.0],
            yaw_jitter_deg: 15.0,
            max_placement_retries: 30,
            color_noise: 0.02,
        }
    }
}

impl SceneConfig {
    /// 60 x 60 x 36 voxels of 0.08 m (4.8 x 4.8 x 2.88 m room).
    pub fn full_resolution() -> Self {
        Self {
            grid_dims: [60, 60, 36],
            voxel_size: 0.08,
            image_width: 160,
            image_height: 120,
            ..Self::default()
        }
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len() - 1
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec {
            dims: self.grid_dims,
            voxel_size: self.voxel_size,
            origin: [0.0; 3],
        }
    }

    pub fn room_height(&self) -> f64 {
        self.grid_dims[2] as f64 * self.voxel_size
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.grid_dims.iter().all(|&d| d >= 4),
            "grid dims {:?} too small for a room shell",
            self.grid_dims
        );
        ensure!(self.voxel_size > 0.0, "voxel size must be positive");
        ensure!(
            self.image_width > 0 && self.image_height > 0,
            "image extents must be positive"
        );
        ensure!(
            self.horizontal_fov_deg > 0.0 && self.horizontal_fov_deg < 180.0,
            "field of view must be in (0, 180)"
        );
        ensure!(
            0.0 < self.min_range && self.min_range < self.max_range,
            "need 0 < min_range < max_range"
        );
        ensure!(
            self.categories.len() == NUM_CATEGORIES + 1,
            "the generator draws from the {} default categories; palette has {} entries",
            NUM_CATEGORIES + 1,
            self.categories.len()
        );
        ensure!(
            self.object_count[0] <= self.object_count[1],
            "object count range is inverted"
        );
        ensure!(
            (0.0..=1.0).contains(&self.window_probability),
            "window probability outside [0, 1]"
        );
        Ok(())
    }

    fn size_range(&self, category: u8) -> SizeRange {
        let (min, max) = match category {
            5 => ([0.4, 0.4, 0.6], [0.6, 0.6, 1.0]),  // chair
            6 => ([1.0, 1.4, 0.4], [1.6, 2.0, 0.6]),  // bed
            7 => ([0.8, 1.4, 0.6], [1.0, 2.0, 0.8]),  // sofa
            8 => ([0.6, 0.8, 0.6], [1.0, 1.4, 0.8]),  // table
            9 => ([0.2, 0.6, 0.8], [0.4, 1.0, 1.2]),  // tvs
            10 => ([0.4, 0.8, 1.0], [0.6, 1.4, 1.8]), // furn.
            _ => ([0.2, 0.2, 0.2], [0.4, 0.4, 0.4]),  // objs.
        };
        SizeRange { min, max }
    }
}

/// Box in voxel units: covers voxels `lo..hi` on each axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
    pub label: u8,
}

impl LabeledBox {
    fn overlaps(&self, o: &LabeledBox) -> bool {
        (0..3).all(|a| self.lo[a] < o.hi[a] && o.lo[a] < self.hi[a])
    }

    pub fn contains_voxel(&self, i: [usize; 3]) -> bool {
        (0..3).all(|a| self.lo[a] <= i[a] && i[a] < self.hi[a])
    }
}

/// Boxes in paint order: later boxes win where they overlap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneModel {
    pub grid: GridSpec,
    pub boxes: Vec<LabeledBox>,
}

impl SceneModel {
    pub fn label_grid(&self) -> Vec<u8> {
        let mut labels = vec![0u8; self.grid.len()];
        for b in &self.boxes {
            for x in b.lo[0]..b.hi[0] {
                for y in b.lo[1]..b.hi[1] {
                    for z in b.lo[2]..b.hi[2] {
                        labels[self.grid.linear([x, y, z])] = b.label;
                    }
                }
            }
        }
        labels
    }

    /// Nearest box entry along `origin + t * dir`, `t > 0`: returns
    /// `(t, box index, axis, sign of the outward face normal)`.
    pub fn first_hit(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<(f64, usize, usize, f64)> {
        let mut best: Option<(f64, usize, usize, f64)> = None;
        for (bi, b) in self.boxes.iter().enumerate() {
            let mut t_near = f64::NEG_INFINITY;
            let mut t_far = f64::INFINITY;
            let mut axis = 0;
            let mut sign = 0.0;
            let mut miss = false;
            for a in 0..3 {
                let lo = self.grid.origin[a] + b.lo[a] as f64 * self.grid.voxel_size;
                let hi = self.grid.origin[a] + b.hi[a] as f64 * self.grid.voxel_size;
                if dir[a] == 0.0 {
                    if origin[a] < lo || origin[a] >= hi {
                        miss = true;
                        break;
                    }
                    continue;
                }
                let (t1, t2) = ((lo - origin[a]) / dir[a], (hi - origin[a]) / dir[a]);
                let (tn, tf) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
                if tn > t_near {
                    t_near = tn;
                    axis = a;
                    sign = if dir[a] > 0.0 { -1.0 } else { 1.0 };
                }
                t_far = t_far.min(tf);
            }
            if miss || t_near > t_far || t_near <= 0.0 {
                continue;
            }
            if best.is_none_or(|(t, ..)| t_near < t) {
                best = Some((t_near, bi, axis, sign));
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMetadata {
    pub seed: u64,
    pub boxes: Vec<LabeledBox>,
    /// Categories that could not be placed within the retry budget.
    pub skipped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub scene_id: String,
    /// `[3, H, W]`, values in `[0, 1]`.
    pub rgb: Tensor,
    pub depth: DepthImage,
    pub camera: CameraModel,
    /// Row-major `H x W` category ids.
    pub seg2d_gt: Vec<u8>,
    pub grid_gt: VoxelGrid,
    pub categories: Vec<String>,
    pub min_range: f64,
    pub max_range: f64,
    pub metadata: SceneMetadata,
}

impl SceneSample {
    pub fn num_categories(&self) -> usize {
        self.categories.len() - 1
    }

    pub fn room_height(&self) -> f64 {
        self.grid_gt.spec.extent()[2]
    }

    pub fn model(&self) -> SceneModel {
        SceneModel {
            grid: self.grid_gt.spec,
            boxes: self.metadata.boxes.clone(),
        }
    }

    /// Checks that every valid pixel's 2D label equals the label of the voxel
    /// it projects into, and that visible-surface voxels are exactly the
    /// projection targets.
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        self.grid_gt.validate(self.num_categories())?;
        let map = compute_projection_map(&self.depth, &self.camera, &self.grid_gt.spec)?;
        for (p, t) in map.pixel_to_voxel().iter().enumerate() {
            if let Some(v) = t {
                ensure!(
                    self.seg2d_gt[p] == self.grid_gt.labels[*v],
                    "{}: pixel {p} has label {} but its voxel {v} has {}",
                    self.scene_id,
                    self.seg2d_gt[p],
                    self.grid_gt.labels[*v]
                );
            }
        }
        let mut visible = vec![false; self.grid_gt.spec.len()];
        for &(v, _) in map.voxel_to_pixels() {
            visible[v] = true;
        }
        for (v, (&vis, &is_vis)) in self.grid_gt.visibility.iter().zip(&visible).enumerate() {
            ensure!(
                (vis == Visibility::VisibleSurface) == is_vis,
                "{}: voxel {v} visibility {vis:?} disagrees with the projection map",
                self.scene_id
            );
        }
        Ok(())
    }
}

/// Per-pixel ray-cast results.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub depth: DepthImage,
    /// Outward normal of the surface hit, `None` where nothing was hit.
    pub normals: Vec<Option<[f64; 3]>>,
    /// `(box index, axis, sign)` of the face hit.
    pub faces: Vec<Option<(usize, usize, i8)>>,
}

pub fn render_view(model: &SceneModel, camera: &CameraModel, max_range: f64) -> Result<RenderOutput> {
    let (w, h) = (camera.image_width, camera.image_height);
    let origin = camera.position();
    let mut depth = vec![0.0; w * h];
    let mut normals = vec![None; w * h];
    let mut faces = vec![None; w * h];
    for v in 0..h {
        for u in 0..w {
            let dir = camera.ray_direction(u as f64, v as f64);
            if let Some((t, bi, axis, sign)) = model.first_hit(origin, dir) {
                let d = t + SURFACE_BIAS;
                if d <= max_range {
                    let p = v * w + u;
                    depth[p] = d;
                    let mut n = [0.0; 3];
                    n[axis] = sign;
                    normals[p] = Some(n);
                    faces[p] = Some((bi, axis, sign as i8));
                }
            }
        }
    }
    Ok(RenderOutput {
        depth: DepthImage::new(w, h, depth)?,
        normals,
        faces,
    })
}

fn base_color(label: u8) -> [f64; 3] {
    match label {
        CEILING => [0.92, 0.92, 0.88],
        FLOOR => [0.55, 0.38, 0.22],
        WALL => [0.78, 0.74, 0.66],
        WINDOW => [0.55, 0.75, 0.95],
        5 => [0.85, 0.25, 0.2],
        6 => [0.3, 0.35, 0.8],
        7 => [0.2, 0.6, 0.3],
        8 => [0.7, 0.55, 0.15],
        9 => [0.12, 0.12, 0.14],
        10 => [0.5, 0.3, 0.55],
        _ => [0.95, 0.6, 0.1],
    }
}

fn shell(grid: &GridSpec) -> Vec<LabeledBox> {
    let [dx, dy, dz] = grid.dims;
    let b = |lo: [usize; 3], hi: [usize; 3], label| LabeledBox { lo, hi, label };
    vec![
        b([0, 0, 0], [1, dy, dz], WALL),
        b([dx - 1, 0, 0], [dx, dy, dz], WALL),
        b([0, 0, 0], [dx, 1, dz], WALL),
        b([0, dy - 1, 0], [dx, dy, dz], WALL),
        b([0, 0, dz - 1], [dx, dy, dz], CEILING),
        b([0, 0, 0], [dx, dy, 1], FLOOR),
    ]
}

fn sample_camera(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> CameraModel {
    let [lx, ly, lz] = cfg.grid_spec().extent();
    let vs = cfg.voxel_size;
    let pos = [
        rng.gen_range(0.35 * lx..=0.65 * lx),
        rng.gen_range(vs * 1.5..=(vs * 1.5).max(0.2 * ly)),
        rng.gen_range(cfg.camera_height[0] * lz..=cfg.camera_height[1] * lz),
    ];
    let yaw = (90.0 + rng.gen_range(-cfg.yaw_jitter_deg..=cfg.yaw_jitter_deg)).to_radians();
    let pitch = -rng.gen_range(cfg.pitch_deg[0]..=cfg.pitch_deg[1]).to_radians();
    let forward = [yaw.cos() * pitch.cos(), yaw.sin() * pitch.cos(), pitch.sin()];
    let f = cfg.image_width as f64 / 2.0 / (cfg.horizontal_fov_deg.to_radians() / 2.0).tan();
    CameraModel::look_along(pos, forward, f, f, cfg.image_width, cfg.image_height)
}

fn voxels(meters: f64, vs: f64) -> usize {
    ((meters / vs).round() as usize).max(1)
}

/// Deterministic synthetic RGB-D observation with 2D and 3D ground truth.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<SceneSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = cfg.grid_spec();
    let [dx, dy, dz] = grid.dims;
    let camera = sample_camera(cfg, &mut rng);
    let cam_voxel = grid.locate(camera.position());

    let mut boxes = shell(&grid);
    if rng.gen_bool(cfg.window_probability) {
        // On one of the three walls facing the camera side.
        let wall = rng.gen_range(0..3);
        let len = rng.gen_range(2..=(dx.min(dy) / 3).max(2));
        let z0 = rng.gen_range(dz / 3..=(dz / 2).max(dz / 3));
        let z1 = (z0 + (dz / 3).max(1)).min(dz - 1);
        let w = match wall {
            0 => {
                let y0 = rng.gen_range(1..dy - 1 - len);
                LabeledBox { lo: [0, y0, z0], hi: [1, y0 + len, z1], label: WINDOW }
            }
            1 => {
                let y0 = rng.gen_range(1..dy - 1 - len);
                LabeledBox { lo: [dx - 1, y0, z0], hi: [dx, y0 + len, z1], label: WINDOW }
            }
            _ => {
                let x0 = rng.gen_range(1..dx - 1 - len);
                LabeledBox { lo: [x0, dy - 1, z0], hi: [x0 + len, dy, z1], label: WINDOW }
            }
        };
        boxes.push(w);
    }

    let mut placed: Vec<LabeledBox> = Vec::new();
    let mut skipped = Vec::new();
    let count = rng.gen_range(cfg.object_count[0]..=cfg.object_count[1]);
    for _ in 0..count {
        let label = OBJECT_CATEGORIES[rng.gen_range(0..OBJECT_CATEGORIES.len())];
        let range = cfg.size_range(label);
        let mut size: [usize; 3] =
            std::array::from_fn(|a| voxels(rng.gen_range(range.min[a]..=range.max[a]), cfg.voxel_size));
        if rng.gen_bool(0.5) {
            size.swap(0, 1);
        }
        size[0] = size[0].min(dx - 2);
        size[1] = size[1].min(dy - 2);
        size[2] = size[2].min(dz - 2);
        let mut ok = None;
        for _ in 0..cfg.max_placement_retries {
            let x0 = rng.gen_range(1..=dx - 1 - size[0]);
            let y0 = rng.gen_range(1..=dy - 1 - size[1]);
            let cand = LabeledBox {
                lo: [x0, y0, 1],
                hi: [x0 + size[0], y0 + size[1], 1 + size[2]],
                label,
            };
            let clear_of_camera = cam_voxel.is_none_or(|c| {
                !(c[0] + 1 >= cand.lo[0] && c[0] <= cand.hi[0] && c[1] + 1 >= cand.lo[1] && c[1] <= cand.hi[1])
            });
            if clear_of_camera && placed.iter().all(|p| !p.overlaps(&cand)) {
                ok = Some(cand);
                break;
            }
        }
        match ok {
            Some(b) => placed.push(b),
            None => skipped.push(cfg.categories[label as usize].clone()),
        }
    }
    boxes.extend(placed);
    let model = SceneModel { grid, boxes };
    let labels = model.label_grid();

    let render = render_view(&model, &camera, cfg.max_range)?;
    let (w, h) = (cfg.image_width, cfg.image_height);
    let mut seg = vec![0u8; w * h];
    let mut rgb = vec![0.0; 3 * w * h];
    let tints: Vec<f64> = (0..model.boxes.len()).map(|_| rng.gen_range(0.85..=1.15)).collect();
    let light = super::normalize([0.3, 0.5, 0.8]);
    for v in 0..h {
        for u in 0..w {
            let p = v * w + u;
            let d = render.depth.values[p];
            if d <= 0.0 {
                continue;
            }
            let x = camera.backproject(u as f64, v as f64, d);
            let (bi, ..) = render.faces[p].expect("valid depth has a face");
            let label = grid.locate(x).map_or(model.boxes[bi].label, |i| labels[grid.linear(i)]);
            seg[p] = label;
            let n = render.normals[p].expect("valid depth has a normal");
            let shade = 0.55 + 0.45 * dot(n, light).abs();
            let base = base_color(label);
            for c in 0..3 {
                let noise = rng.gen_range(-cfg.color_noise..=cfg.color_noise);
                rgb[c * w * h + p] = (base[c] * tints[bi] * shade + noise).clamp(0.0, 1.0);
            }
        }
    }

    let visibility = carve_visibility(&model, &camera, &render.depth)?;
    let grid_gt = VoxelGrid {
        spec: grid,
        labels,
        visibility,
    };

    Ok(SceneSample {
        scene_id: format!("scene_{seed:08}"),
        rgb: Tensor::new(vec![3, h, w], rgb)?,
        depth: render.depth,
        camera,
        seg2d_gt: seg,
        grid_gt,
        categories: cfg.categories.clone(),
        min_range: cfg.min_range,
        max_range: cfg.max_range,
        metadata: SceneMetadata {
            seed,
            boxes: model.boxes.clone(),
            skipped,
        },
    })
}

/// Ray carving: projection targets are visible-surface; other voxels whose
/// center projects onto the image are free when the segment from the camera
/// to the center crosses no box, occluded otherwise.
pub fn carve_visibility(model: &SceneModel, camera: &CameraModel, depth: &DepthImage) -> Result<Vec<Visibility>> {
    let spec = &model.grid;
    let map = compute_projection_map(depth, camera, spec)?;
    let origin = camera.position();
    let mut vis: Vec<Visibility> = (0..spec.len())
        .map(|i| {
            let c = spec.center(spec.unravel(i));
            match camera.project(c) {
                Some((u, v, _)) if camera.in_image(u, v) => match model.first_hit(origin, super::sub(c, origin)) {
                    Some((t, ..)) if t < 1.0 => Visibility::Occluded,
                    _ => Visibility::Free,
                },
                _ => Visibility::OutsideView,
            }
        })
        .collect();
    for &(v, _) in map.voxel_to_pixels() {
        vis[v] = Visibility::VisibleSurface;
    }
    Ok(vis)
}
