//! Camera model, HHA encoding, synthetic scenes, voxel visibility and the
//! pixel-to-voxel projection layer.
//!
//! World frame is right-handed with gravity along `-z` (up is `+z`). Voxel
//! grids are indexed `(x, y, z)` with `z` fastest in memory.

mod camera;
mod hha;
mod io;
mod projection;
mod scene;

pub use camera::{CameraModel, DepthImage};
pub use hha::{estimate_normals, hha_encode, HhaImage, HhaRanges};
pub use io::{read_scene, SCENE_INDEX, read_scene_index, write_scene, write_scene_index, SceneManifest};
pub use projection::{backproject_gradients, compute_projection_map, project_2d_to_3d, project_labels, ProjectionMap};
pub use scene::{
    carve_visibility, generate_scene, render_view, LabeledBox, RenderOutput, SceneConfig, SceneMetadata, SceneModel,
    SceneSample, SizeRange,
};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Category names in label order; label 0 is empty space.
pub const CATEGORIES: [&str; 12] = [
    "empty", "ceil.", "floor", "wall", "win.", "chair", "bed", "sofa", "table", "tvs", "furn.", "objs.",
];

pub const EMPTY: u8 = 0;
pub const CEILING: u8 = 1;
pub const FLOOR: u8 = 2;
pub const WALL: u8 = 3;
pub const WINDOW: u8 = 4;
/// Non-structural categories that objects are drawn from.
pub const OBJECT_CATEGORIES: [u8; 7] = [5, 6, 7, 8, 9, 10, 11];

/// Number of non-empty categories in the default palette.
pub const NUM_CATEGORIES: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum Visibility {
    /// In view, in front of the first surface hit.
    Free = 0,
    /// First-hit voxel of at least one pixel ray.
    VisibleSurface = 1,
    /// In view, behind the first surface hit.
    Occluded = 2,
    OutsideView = 3,
}

impl Visibility {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::Free),
            1 => Some(Self::VisibleSurface),
            2 => Some(Self::Occluded),
            3 => Some(Self::OutsideView),
            _ => None,
        }
    }
}

/// Placement and resolution of a voxel grid. Cells are half-open:
/// voxel `i` covers `[origin + i * size, origin + (i + 1) * size)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub voxel_size: f64,
    pub origin: [f64; 3],
}

impl GridSpec {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn linear(&self, [x, y, z]: [usize; 3]) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    pub fn unravel(&self, i: usize) -> [usize; 3] {
        let z = i % self.dims[2];
        let y = (i / self.dims[2]) % self.dims[1];
        let x = i / (self.dims[1] * self.dims[2]);
        [x, y, z]
    }

    /// Voxel containing a world point, or `None` outside the grid.
    pub fn locate(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.voxel_size).floor();
            if !(f >= 0.0 && f < self.dims[a] as f64) {
                return None;
            }
            idx[a] = f as usize;
        }
        Some(idx)
    }

    pub fn center(&self, idx: [usize; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + (idx[a] as f64 + 0.5) * self.voxel_size)
    }

    pub fn extent(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.dims[a] as f64 * self.voxel_size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub spec: GridSpec,
    pub labels: Vec<u8>,
    pub visibility: Vec<Visibility>,
}

impl VoxelGrid {
    pub fn empty(spec: GridSpec) -> Self {
        Self {
            spec,
            labels: vec![EMPTY; spec.len()],
            visibility: vec![Visibility::OutsideView; spec.len()],
        }
    }

    pub fn validate(&self, num_categories: usize) -> Result<()> {
        ensure!(
            self.labels.len() == self.spec.len() && self.visibility.len() == self.spec.len(),
            "voxel grid arrays do not match dims {:?}",
            self.spec.dims
        );
        if let Some((i, l)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize > num_categories)
        {
            return Err(crate::Error::contract(format!(
                "voxel {i} has label {l} outside [0, {num_categories}]"
            )));
        }
        Ok(())
    }

    pub fn count(&self, v: Visibility) -> usize {
        self.visibility.iter().filter(|&&x| x == v).count()
    }
}

pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    if n > 0.0 {
        [a[0] / n, a[1] / n, a[2] / n]
    } else {
        a
    }
}
