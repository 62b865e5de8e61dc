//! Static exports of labeled voxel volumes: an ASCII PLY surface mesh and a
//! plain point list.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{ensure, Error, Result};
use crate::geometry::VoxelGrid;

/// RGB per category id, index 0 (empty) unused.
pub const PALETTE: [[u8; 3]; 12] = [
    [0, 0, 0],
    [214, 214, 200],
    [140, 110, 80],
    [190, 175, 150],
    [120, 180, 230],
    [170, 60, 60],
    [70, 130, 70],
    [230, 160, 60],
    [110, 90, 160],
    [60, 150, 160],
    [200, 110, 170],
    [120, 120, 120],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    SurfaceMesh,
    PointList,
}

impl FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "surface-mesh" => Ok(Self::SurfaceMesh),
            "point-list" => Ok(Self::PointList),
            _ => Err(Error::contract(format!(
                "unknown export format {s:?}, expected surface-mesh or point-list"
            ))),
        }
    }
}

/// A voxel face whose neighbor across it is empty or outside the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Face {
    pub voxel: [usize; 3],
    pub axis: usize,
    /// +1 for the high side of the voxel.
    pub sign: i8,
    pub label: u8,
}

/// Exposed faces in row-major voxel order, `-x, +x, -y, +y, -z, +z` within
/// a voxel.
pub fn exposed_faces(grid: &VoxelGrid) -> Vec<Face> {
    let d = grid.spec.dims;
    let mut out = Vec::new();
    for (i, &label) in grid.labels.iter().enumerate() {
        if label == 0 {
            continue;
        }
        let v = grid.spec.unravel(i);
        for axis in 0..3 {
            for sign in [-1i8, 1] {
                let mut n = v;
                let inside = if sign < 0 {
                    v[axis] > 0 && {
                        n[axis] -= 1;
                        true
                    }
                } else {
                    v[axis] + 1 < d[axis] && {
                        n[axis] += 1;
                        true
                    }
                };
                if !inside || grid.labels[grid.spec.linear(n)] == 0 {
                    out.push(Face { voxel: v, axis, sign, label });
                }
            }
        }
    }
    out
}

/// Corners in counter-clockwise order seen from outside.
fn face_corners(f: &Face) -> [[usize; 3]; 4] {
    let (a, b, c) = (f.axis, (f.axis + 1) % 3, (f.axis + 2) % 3);
    let mut base = f.voxel;
    if f.sign > 0 {
        base[a] += 1;
    }
    let at = |db: usize, dc: usize| {
        let mut p = base;
        p[b] += db;
        p[c] += dc;
        p
    };
    let ring = [at(0, 0), at(1, 0), at(1, 1), at(0, 1)];
    if f.sign > 0 {
        ring
    } else {
        [ring[0], ring[3], ring[2], ring[1]]
    }
}

fn check_labels(grid: &VoxelGrid) -> Result<()> {
    ensure!(
        grid.labels.len() == grid.spec.len(),
        "volume has {} labels for {} voxels",
        grid.labels.len(),
        grid.spec.len()
    );
    if let Some((i, l)) = grid.labels.iter().enumerate().find(|(_, &l)| l as usize >= PALETTE.len()) {
        return Err(Error::contract(format!("label {l} at voxel {i} has no palette color")));
    }
    Ok(())
}

/// ASCII PLY with four unshared vertices per exposed face, in world units.
pub fn surface_mesh(grid: &VoxelGrid) -> Result<String> {
    check_labels(grid)?;
    let faces = exposed_faces(grid);
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\ncomment labeled voxel surface\n");
    let _ = writeln!(s, "element vertex {}", 4 * faces.len());
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    let _ = writeln!(s, "element face {}", faces.len());
    s.push_str("property list uchar int vertex_indices\nend_header\n");
    let (o, vs) = (grid.spec.origin, grid.spec.voxel_size);
    for f in &faces {
        let [r, g, b] = PALETTE[f.label as usize];
        for p in face_corners(f) {
            let w: Vec<f64> = (0..3).map(|k| o[k] + p[k] as f64 * vs).collect();
            let _ = writeln!(s, "{} {} {} {r} {g} {b}", w[0], w[1], w[2]);
        }
    }
    for i in 0..faces.len() {
        let _ = writeln!(s, "4 {} {} {} {}", 4 * i, 4 * i + 1, 4 * i + 2, 4 * i + 3);
    }
    Ok(s)
}

/// One `x y z label` line per non-empty voxel, row-major.
pub fn point_list(grid: &VoxelGrid) -> Result<String> {
    check_labels(grid)?;
    let mut s = String::from("# x y z label\n");
    for (i, &l) in grid.labels.iter().enumerate().filter(|(_, &l)| l != 0) {
        let [x, y, z] = grid.spec.unravel(i);
        let _ = writeln!(s, "{x} {y} {z} {l}");
    }
    Ok(s)
}

/// Writes `grid` to `path`; returns the number of faces or points.
pub fn export_voxels(grid: &VoxelGrid, path: &Path, format: ExportFormat) -> Result<usize> {
    let (text, n) = match format {
        ExportFormat::SurfaceMesh => (surface_mesh(grid)?, exposed_faces(grid).len()),
        ExportFormat::PointList => (point_list(grid)?, grid.labels.iter().filter(|&&l| l != 0).count()),
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GridSpec;

    fn grid(dims: [usize; 3], labels: Vec<u8>) -> VoxelGrid {
        let mut g = VoxelGrid::empty(GridSpec {
            dims,
            voxel_size: 0.5,
            origin: [1.0, 0.0, 0.0],
        });
        g.labels = labels;
        g
    }

    #[test]
    fn empty_volume_is_header_only() {
        let g = grid([2, 2, 2], vec![0; 8]);
        let s = surface_mesh(&g).unwrap();
        assert!(s.contains("element vertex 0\n") && s.contains("element face 0\n"));
        assert!(s.ends_with("end_header\n"));
        assert_eq!(point_list(&g).unwrap(), "# x y z label\n");
    }

    #[test]
    fn single_voxel_cube() {
        let mut labels = vec![0; 27];
        labels[13] = 5;
        let g = grid([3, 3, 3], labels);
        assert_eq!(exposed_faces(&g).len(), 6);
        let s = surface_mesh(&g).unwrap();
        assert!(s.contains("element vertex 24\n") && s.contains("element face 6\n"));
        assert_eq!(point_list(&g).unwrap(), "# x y z label\n1 1 1 5\n");
    }

    #[test]
    fn quads_face_outward() {
        let g = grid([1, 1, 1], vec![1]);
        for f in exposed_faces(&g) {
            let c = face_corners(&f).map(|p| p.map(|v| v as f64));
            let e1 = [c[1][0] - c[0][0], c[1][1] - c[0][1], c[1][2] - c[0][2]];
            let e2 = [c[2][0] - c[1][0], c[2][1] - c[1][1], c[2][2] - c[1][2]];
            let n = crate::geometry::cross(e1, e2);
            assert_eq!(n[f.axis], f.sign as f64, "{f:?}");
        }
    }

    #[test]
    fn bad_label_and_format_rejected() {
        assert!(surface_mesh(&grid([1, 1, 1], vec![12])).is_err());
        assert!("obj".parse::<ExportFormat>().is_err());
    }
}
