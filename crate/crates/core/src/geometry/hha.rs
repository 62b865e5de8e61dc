//! Geocentric depth encoding: disparity, height above the floor and angle of
//! the surface normal with gravity, each scaled to `[0, 1]`.

use std::f64::consts::PI;

use super::{cross, dot, normalize, sub, CameraModel, DepthImage};
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// Fixed normalization ranges of a scene configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HhaRanges {
    pub min_range: f64,
    pub max_range: f64,
    /// World `z` of the ceiling; the floor is at `z = 0`.
    pub room_height: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HhaImage {
    /// `[3, H, W]`: disparity, height, angle.
    pub channels: Tensor,
    /// Set when no pixel had valid depth and the image is all zeros.
    pub all_invalid: bool,
}

/// Camera-facing unit normals from central differences of the back-projected
/// point cloud, falling back to one-sided differences at holes and borders.
pub fn estimate_normals(depth: &DepthImage, camera: &CameraModel) -> Vec<Option<[f64; 3]>> {
    let (w, h) = (depth.width, depth.height);
    let points: Vec<Option<[f64; 3]>> = (0..w * h)
        .map(|p| {
            let (u, v) = (p % w, p / w);
            let d = depth.values[p];
            (d > 0.0).then(|| camera.backproject(u as f64, v as f64, d))
        })
        .collect();
    let at = |u: isize, v: isize| -> Option<[f64; 3]> {
        if u < 0 || v < 0 || u >= w as isize || v >= h as isize {
            None
        } else {
            points[v as usize * w + u as usize]
        }
    };
    let tangent = |c: [f64; 3], prev: Option<[f64; 3]>, next: Option<[f64; 3]>| match (prev, next) {
        (Some(a), Some(b)) => Some(sub(b, a)),
        (None, Some(b)) => Some(sub(b, c)),
        (Some(a), None) => Some(sub(c, a)),
        (None, None) => None,
    };
    let eye = camera.position();
    (0..w * h)
        .map(|p| {
            let c = points[p]?;
            let (u, v) = ((p % w) as isize, (p / w) as isize);
            let tu = tangent(c, at(u - 1, v), at(u + 1, v))?;
            let tv = tangent(c, at(u, v - 1), at(u, v + 1))?;
            let n = cross(tu, tv);
            if dot(n, n) == 0.0 {
                return None;
            }
            let n = normalize(n);
            Some(if dot(n, sub(eye, c)) < 0.0 { [-n[0], -n[1], -n[2]] } else { n })
        })
        .collect()
}

pub fn hha_encode(depth: &DepthImage, camera: &CameraModel, ranges: &HhaRanges) -> Result<HhaImage> {
    ensure!(
        depth.width == camera.image_width && depth.height == camera.image_height,
        "depth image {}x{} does not match camera {}x{}",
        depth.width,
        depth.height,
        camera.image_width,
        camera.image_height
    );
    ensure!(
        0.0 < ranges.min_range && ranges.min_range < ranges.max_range && ranges.room_height > 0.0,
        "invalid HHA ranges {ranges:?}"
    );
    camera.validate()?;
    let (w, h) = (depth.width, depth.height);
    let n = w * h;
    let mut out = vec![0.0; 3 * n];
    if depth.valid_count() == 0 {
        log::warn!("depth image has no valid pixels; HHA is all zeros");
        return Ok(HhaImage {
            channels: Tensor::new(vec![3, h, w], out)?,
            all_invalid: true,
        });
    }
    let normals = estimate_normals(depth, camera);
    let (dmin, dmax) = (1.0 / ranges.max_range, 1.0 / ranges.min_range);
    for p in 0..n {
        let d = depth.values[p];
        if d <= 0.0 {
            continue;
        }
        let x = camera.backproject((p % w) as f64, (p / w) as f64, d);
        out[p] = ((1.0 / d - dmin) / (dmax - dmin)).clamp(0.0, 1.0);
        out[n + p] = (x[2] / ranges.room_height).clamp(0.0, 1.0);
        if let Some(nv) = normals[p] {
            out[2 * n + p] = nv[2].clamp(-1.0, 1.0).acos() / PI;
        }
    }
    Ok(HhaImage {
        channels: Tensor::new(vec![3, h, w], out)?,
        all_invalid: false,
    })
}
