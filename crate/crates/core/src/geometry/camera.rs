use serde::{Deserialize, Serialize};

use super::{cross, dot, normalize, sub};
use crate::error::{ensure, Result};

/// Pinhole camera. The camera frame has `x` right, `y` down and `z` along
/// the optical axis; `extrinsic` maps camera coordinates to world
/// coordinates. Pixel `(u, v)` is the ray through `((u - cx) / fx, (v - cy) / fy, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub extrinsic: [[f64; 4]; 4],
    pub image_width: usize,
    pub image_height: usize,
}

impl CameraModel {
    /// Camera at `position` looking along `forward` with world `+z` up.
    pub fn look_along(
        position: [f64; 3],
        forward: [f64; 3],
        fx: f64,
        fy: f64,
        image_width: usize,
        image_height: usize,
    ) -> Self {
        let f = normalize(forward);
        let right = normalize(cross(f, [0.0, 0.0, 1.0]));
        let down = cross(f, right);
        let mut e = [[0.0; 4]; 4];
        for r in 0..3 {
            e[r][0] = right[r];
            e[r][1] = down[r];
            e[r][2] = f[r];
            e[r][3] = position[r];
        }
        e[3][3] = 1.0;
        Self {
            fx,
            fy,
            cx: image_width as f64 / 2.0,
            cy: image_height as f64 / 2.0,
            extrinsic: e,
            image_width,
            image_height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.fx > 0.0 && self.fy > 0.0, "focal lengths must be positive");
        ensure!(
            self.image_width > 0 && self.image_height > 0,
            "image extents must be positive"
        );
        let r = self.rotation();
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let rtr: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let id = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((rtr - id).abs());
            }
        }
        ensure!(
            worst < 1e-9,
            "extrinsic rotation is not orthonormal (|R^T R - I| = {worst:e})"
        );
        let last = self.extrinsic[3];
        ensure!(
            last == [0.0, 0.0, 0.0, 1.0],
            "extrinsic bottom row must be [0, 0, 0, 1]"
        );
        Ok(())
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        std::array::from_fn(|r| std::array::from_fn(|c| self.extrinsic[r][c]))
    }

    pub fn position(&self) -> [f64; 3] {
        [self.extrinsic[0][3], self.extrinsic[1][3], self.extrinsic[2][3]]
    }

    pub fn pixel_count(&self) -> usize {
        self.image_width * self.image_height
    }

    pub fn camera_to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let e = &self.extrinsic;
        std::array::from_fn(|r| e[r][0] * p[0] + e[r][1] * p[1] + e[r][2] * p[2] + e[r][3])
    }

    pub fn world_to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let d = sub(p, self.position());
        let r = self.rotation();
        std::array::from_fn(|c| r[0][c] * d[0] + r[1][c] * d[1] + r[2][c] * d[2])
    }

    /// World-frame direction whose camera-frame depth component is 1.
    pub fn ray_direction(&self, u: f64, v: f64) -> [f64; 3] {
        let d = [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0];
        let r = self.rotation();
        std::array::from_fn(|i| dot(r[i], d))
    }

    /// World point seen at pixel `(u, v)` with camera depth `depth`.
    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> [f64; 3] {
        let p = [(u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth];
        self.camera_to_world(p)
    }

    /// Continuous pixel coordinates and depth of a world point, if it lies in
    /// front of the camera.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64, f64)> {
        let c = self.world_to_camera(p);
        (c[2] > 0.0).then(|| (self.fx * c[0] / c[2] + self.cx, self.fy * c[1] / c[2] + self.cy, c[2]))
    }

    /// Whether continuous pixel coordinates fall on the image, taking pixel
    /// `(u, v)` to cover `[u - 0.5, u + 0.5) x [v - 0.5, v + 0.5)`.
    pub fn in_image(&self, u: f64, v: f64) -> bool {
        u >= -0.5 && u < self.image_width as f64 - 0.5 && v >= -0.5 && v < self.image_height as f64 - 0.5
    }
}

/// Metric camera depth per pixel, row-major `H x W`; `0` marks invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        ensure!(
            values.len() == width * height,
            "depth image {width}x{height} needs {} values, got {}",
            width * height,
            values.len()
        );
        ensure!(
            values.iter().all(|v| v.is_finite() && *v >= 0.0),
            "depth values must be finite and non-negative"
        );
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.values[v * self.width + u]
    }

    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        self.get(u, v) > 0.0
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|&&d| d > 0.0).count()
    }
}
