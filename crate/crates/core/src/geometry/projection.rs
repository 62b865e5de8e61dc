//! Pixel-to-voxel correspondence. Features are scattered forward by averaging
//! the pixels that land in a voxel; gradients travel back only through those
//! visible-surface voxels, each pixel receiving its share `1/k`.

use std::sync::Arc;

use super::{CameraModel, DepthImage, GridSpec};
use crate::error::{ensure, Result};
use crate::tensor::{ScatterPlan, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMap {
    width: usize,
    height: usize,
    grid: GridSpec,
    pixel_to_voxel: Vec<Option<usize>>,
    /// Sorted by voxel index; pixel lists ascending.
    voxel_to_pixels: Vec<(usize, Vec<usize>)>,
}

/// Back-projects each valid pixel and records the voxel its point falls in.
pub fn compute_projection_map(depth: &DepthImage, camera: &CameraModel, grid: &GridSpec) -> Result<ProjectionMap> {
    ensure!(
        depth.width == camera.image_width && depth.height == camera.image_height,
        "depth image {}x{} does not match camera {}x{}",
        depth.width,
        depth.height,
        camera.image_width,
        camera.image_height
    );
    let mut pixel_to_voxel = vec![None; depth.width * depth.height];
    for v in 0..depth.height {
        for u in 0..depth.width {
            let d = depth.get(u, v);
            if d <= 0.0 {
                continue;
            }
            let x = camera.backproject(u as f64, v as f64, d);
            pixel_to_voxel[v * depth.width + u] = grid.locate(x).map(|i| grid.linear(i));
        }
    }
    Ok(ProjectionMap::from_pixel_targets(depth.width, depth.height, *grid, pixel_to_voxel))
}

impl ProjectionMap {
    pub fn from_pixel_targets(width: usize, height: usize, grid: GridSpec, pixel_to_voxel: Vec<Option<usize>>) -> Self {
        let mut pairs: Vec<(usize, usize)> = pixel_to_voxel
            .iter()
            .enumerate()
            .filter_map(|(p, t)| t.map(|v| (v, p)))
            .collect();
        pairs.sort_unstable();
        let mut voxel_to_pixels: Vec<(usize, Vec<usize>)> = Vec::new();
        for (v, p) in pairs {
            match voxel_to_pixels.last_mut() {
                Some((last, ps)) if *last == v => ps.push(p),
                _ => voxel_to_pixels.push((v, vec![p])),
            }
        }
        Self {
            width,
            height,
            grid,
            pixel_to_voxel,
            voxel_to_pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn pixel_to_voxel(&self) -> &[Option<usize>] {
        &self.pixel_to_voxel
    }

    pub fn voxel_to_pixels(&self) -> &[(usize, Vec<usize>)] {
        &self.voxel_to_pixels
    }

    /// Averaging scatter from `[C, H, W]` to `[C, Dx, Dy, Dz]`.
    pub fn scatter_plan(&self) -> Result<Arc<ScatterPlan>> {
        ScatterPlan::averaging(self.grid.dims.to_vec(), self.pixel_to_voxel.clone()).map(Arc::new)
    }

    fn check_image(&self, t: &Tensor, what: &str) -> Result<()> {
        ensure!(
            t.shape().len() == 3 && t.shape()[1] == self.height && t.shape()[2] == self.width,
            "{what} shape {:?} does not match the projection map's {}x{} image",
            t.shape(),
            self.height,
            self.width
        );
        Ok(())
    }
}

/// Scatters `[C, H, W]` features and per-pixel labels into the grid. Voxels
/// hit by several pixels get the mean feature and the majority label, ties
/// going to the smallest id.
pub fn project_2d_to_3d(features: &Tensor, labels: &[u8], map: &ProjectionMap) -> Result<(Tensor, Vec<u8>)> {
    map.check_image(features, "feature map")?;
    let c = features.shape()[0];
    let sem = project_labels(labels, map)?;
    let plan = map.scatter_plan()?;
    let flat = features.clone().reshape(&[c, map.width * map.height])?;
    let volume = plan.apply(&flat)?;
    Ok((volume, sem))
}

/// Majority pixel label per hit voxel, ties to the smallest id; 0 elsewhere.
pub fn project_labels(labels: &[u8], map: &ProjectionMap) -> Result<Vec<u8>> {
    ensure!(
        labels.len() == map.width * map.height,
        "label image has {} entries, projection map expects {}",
        labels.len(),
        map.width * map.height
    );
    let mut sem = vec![0u8; map.grid.len()];
    for (v, pixels) in &map.voxel_to_pixels {
        let mut counts = [0usize; 256];
        for &p in pixels {
            counts[labels[p] as usize] += 1;
        }
        let mut best = 0;
        for (l, &n) in counts.iter().enumerate() {
            if n > counts[best] {
                best = l;
            }
        }
        sem[*v] = best as u8;
    }
    Ok(sem)
}

/// Adjoint of the feature scatter: `[C, Dx, Dy, Dz]` gradients to `[C, H, W]`.
pub fn backproject_gradients(volume_grad: &Tensor, map: &ProjectionMap) -> Result<Tensor> {
    let s = volume_grad.shape();
    ensure!(
        s.len() == 4 && s[1..] == map.grid.dims,
        "volume gradient shape {s:?} does not match grid dims {:?}",
        map.grid.dims
    );
    let c = s[0];
    let plan = map.scatter_plan()?;
    let g = plan.adjoint(volume_grad.data(), c)?;
    Tensor::new(vec![c, map.height, map.width], g)
}
