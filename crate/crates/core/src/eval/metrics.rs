//! Completion (binary, occluded voxels) and semantic completion (per class,
//! observed and occluded voxels) IoU metrics.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::geometry::{Visibility, VoxelGrid};

/// Per-voxel evaluation regions.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalMask {
    /// Occluded voxels.
    pub sc: Vec<bool>,
    /// Visible-surface and occluded voxels.
    pub ssc: Vec<bool>,
    pub loss: Vec<bool>,
}

impl EvalMask {
    /// The loss region is the SSC region, plus free voxels when `include_free`.
    pub fn from_visibility(vis: &[Visibility], include_free: bool) -> Self {
        let sc: Vec<bool> = vis.iter().map(|&v| v == Visibility::Occluded).collect();
        let ssc: Vec<bool> = vis
            .iter()
            .map(|&v| matches!(v, Visibility::Occluded | Visibility::VisibleSurface))
            .collect();
        let loss = vis
            .iter()
            .zip(&ssc)
            .map(|(&v, &s)| s || (include_free && v == Visibility::Free))
            .collect();
        Self { sc, ssc, loss }
    }

    pub fn len(&self) -> usize {
        self.ssc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ssc.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    pub fn add(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn iou(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }
}

fn ratio(a: u64, b: u64) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

fn check_dims(pred: &VoxelGrid, gt: &VoxelGrid, mask: &EvalMask) -> Result<()> {
    ensure!(
        pred.spec.dims == gt.spec.dims,
        "prediction dims {:?} differ from ground truth {:?}",
        pred.spec.dims,
        gt.spec.dims
    );
    ensure!(
        pred.labels.len() == gt.labels.len() && mask.len() == gt.labels.len(),
        "label or mask length does not match the grid"
    );
    Ok(())
}

/// Occupied-versus-empty counts over the SC region.
pub fn sc_counts(pred: &VoxelGrid, gt: &VoxelGrid, mask: &EvalMask) -> Result<Counts> {
    check_dims(pred, gt, mask)?;
    let mut c = Counts::default();
    for i in (0..gt.labels.len()).filter(|&i| mask.sc[i]) {
        match (pred.labels[i] != 0, gt.labels[i] != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(c)
}

/// Precision, recall and IoU; `None` where the denominator is zero.
pub fn sc_metrics(pred: &VoxelGrid, gt: &VoxelGrid, mask: &EvalMask) -> Result<(Option<f64>, Option<f64>, Option<f64>)> {
    let c = sc_counts(pred, gt, mask)?;
    Ok((c.precision(), c.recall(), c.iou()))
}

/// Counts for categories `1..=num_categories` (index 0 is category 1) over
/// the SSC region.
pub fn ssc_counts(pred: &VoxelGrid, gt: &VoxelGrid, mask: &EvalMask, num_categories: usize) -> Result<Vec<Counts>> {
    check_dims(pred, gt, mask)?;
    let mut counts = vec![Counts::default(); num_categories];
    for i in (0..gt.labels.len()).filter(|&i| mask.ssc[i]) {
        let (p, g) = (pred.labels[i] as usize, gt.labels[i] as usize);
        ensure!(
            p <= num_categories && g <= num_categories,
            "label at voxel {i} exceeds {num_categories} categories"
        );
        if p == g {
            if p != 0 {
                counts[p - 1].tp += 1;
            }
            continue;
        }
        if p != 0 {
            counts[p - 1].fp += 1;
        }
        if g != 0 {
            counts[g - 1].fn_ += 1;
        }
    }
    Ok(counts)
}

/// Per-class IoU and their mean over the classes that occur.
pub fn ssc_metrics(
    pred: &VoxelGrid,
    gt: &VoxelGrid,
    mask: &EvalMask,
    num_categories: usize,
) -> Result<(Vec<Option<f64>>, Option<f64>)> {
    let counts = ssc_counts(pred, gt, mask, num_categories)?;
    let ious: Vec<Option<f64>> = counts.iter().map(Counts::iou).collect();
    let avg = mean_present(&ious);
    Ok((ious, avg))
}

fn mean_present(ious: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = ious.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// Metrics accumulated over a test set. Counts are summed across scenes
/// before any ratio is taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub categories: Vec<String>,
    pub sc_precision: Option<f64>,
    pub sc_recall: Option<f64>,
    pub sc_iou: Option<f64>,
    /// One entry per non-empty category; `None` marks an absent class.
    pub ssc_iou_per_class: Vec<Option<f64>>,
    pub ssc_avg: Option<f64>,
    /// Mean over all categories with absent ones counted as 0.
    pub ssc_avg_all_classes: f64,
    pub sc_counts: Counts,
    pub ssc_counts: Vec<Counts>,
    pub scenes: usize,
}

impl MetricsReport {
    pub fn from_counts(label: &str, categories: &[String], sc: Counts, ssc: Vec<Counts>, scenes: usize) -> Self {
        let ious: Vec<Option<f64>> = ssc.iter().map(Counts::iou).collect();
        Self {
            label: label.to_string(),
            categories: categories.to_vec(),
            sc_precision: sc.precision(),
            sc_recall: sc.recall(),
            sc_iou: sc.iou(),
            ssc_avg: mean_present(&ious),
            ssc_avg_all_classes: ious.iter().map(|v| v.unwrap_or(0.0)).sum::<f64>() / ious.len().max(1) as f64,
            ssc_iou_per_class: ious,
            sc_counts: sc,
            ssc_counts: ssc,
            scenes,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Column header of the text table.
    pub fn table_header(categories: &[String]) -> String {
        let mut s = format!("{:<18}{:>7}{:>7}{:>7}", "", "prec.", "recall", "IoU");
        for c in categories {
            s.push_str(&format!("{c:>7}"));
        }
        s.push_str(&format!("{:>7}", "avg."));
        s
    }

    /// One table row, percentages with one decimal, `-` for undefined.
    pub fn table_row(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| format!("{:>7}", "-"), |x| format!("{:>7.1}", 100.0 * x));
        let mut s = format!("{:<18}", self.label);
        for v in [self.sc_precision, self.sc_recall, self.sc_iou] {
            s.push_str(&f(v));
        }
        for v in &self.ssc_iou_per_class {
            s.push_str(&f(*v));
        }
        s.push_str(&f(self.ssc_avg));
        s
    }

    pub fn to_text(&self) -> String {
        format!(
            "{}\n{}\n{} test scenes\n",
            Self::table_header(&self.categories[1..]),
            self.table_row(),
            self.scenes
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GridSpec;

    fn grid(labels: Vec<u8>) -> VoxelGrid {
        let n = labels.len();
        VoxelGrid {
            spec: GridSpec {
                dims: [n, 1, 1],
                voxel_size: 1.0,
                origin: [0.0; 3],
            },
            labels,
            visibility: vec![Visibility::Occluded; n],
        }
    }

    #[test]
    fn hand_counted_sc() {
        let pred = grid(vec![1, 1, 0, 0]);
        let gt = grid(vec![0, 2, 3, 0]);
        let mask = EvalMask::from_visibility(&gt.visibility, false);
        let c = sc_counts(&pred, &gt, &mask).unwrap();
        assert_eq!(c, Counts { tp: 1, fp: 1, fn_: 1 });
        assert_eq!(c.iou(), Some(1.0 / 3.0));
        let (p, r, i) = sc_metrics(&gt, &gt, &mask).unwrap();
        assert_eq!((p, r, i), (Some(1.0), Some(1.0), Some(1.0)));
    }

    #[test]
    fn empty_denominators_are_undefined() {
        let z = grid(vec![0, 0]);
        let mask = EvalMask::from_visibility(&z.visibility, false);
        assert_eq!(sc_metrics(&z, &z, &mask).unwrap(), (None, None, None));
        let (ious, avg) = ssc_metrics(&z, &z, &mask, 3).unwrap();
        assert_eq!(ious, vec![None; 3]);
        assert_eq!(avg, None);
    }

    #[test]
    fn one_voxel_confusion() {
        let (pred, gt) = (grid(vec![2]), grid(vec![1]));
        let mask = EvalMask::from_visibility(&gt.visibility, false);
        let (ious, avg) = ssc_metrics(&pred, &gt, &mask, 3).unwrap();
        assert_eq!(ious, vec![Some(0.0), Some(0.0), None]);
        assert_eq!(avg, Some(0.0));
    }

    #[test]
    fn free_voxels_only_in_loss_when_requested() {
        let vis = [Visibility::Free, Visibility::Occluded, Visibility::OutsideView, Visibility::VisibleSurface];
        let m = EvalMask::from_visibility(&vis, false);
        assert_eq!(m.sc, vec![false, true, false, false]);
        assert_eq!(m.ssc, vec![false, true, false, true]);
        assert_eq!(m.loss, m.ssc);
        let m = EvalMask::from_visibility(&vis, true);
        assert_eq!(m.loss, vec![true, true, false, true]);
    }

    #[test]
    fn dims_checked() {
        let mask = EvalMask::from_visibility(&[Visibility::Occluded; 2], false);
        assert!(sc_counts(&grid(vec![0, 0]), &grid(vec![0, 0, 0]), &mask).is_err());
    }
}
