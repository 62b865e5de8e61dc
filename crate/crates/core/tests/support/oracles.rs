//! Brute-force reference implementations, written without reuse of the
//! library's index arithmetic.

use ssc_core::tensor::{ConvSpec, PoolAxes, PoolKind, Tensor};

/// Direct summation over the padded, dilated window. Returns `None` when the
/// dilated kernel does not fit the padded input on some axis.
pub fn conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &ConvSpec) -> Option<Tensor> {
    let r = spec.kernel.len();
    // lift to three spatial axes
    let lift = |v: &[usize], fill: usize| -> [usize; 3] {
        let mut o = [fill; 3];
        o[3 - r..].copy_from_slice(v);
        o
    };
    let n = lift(x.spatial(), 1);
    let k = lift(&spec.kernel, 1);
    let s = lift(&spec.stride, 1);
    let d = lift(&spec.dilation, 1);
    let p = lift(&spec.padding, 0);
    let mut out_ext = [0usize; 3];
    for a in 0..3 {
        let padded = (n[a] + 2 * p[a]) as i64;
        let span = (d[a] * (k[a] - 1) + 1) as i64;
        if padded < span {
            return None;
        }
        out_ext[a] = ((padded - span) / s[a] as i64 + 1) as usize;
    }
    let (cin, cout) = (spec.in_channels, spec.out_channels);
    let xv = x.data();
    let wv = w.data();
    let mut out = Vec::new();
    for co in 0..cout {
        for o0 in 0..out_ext[0] {
            for o1 in 0..out_ext[1] {
                for o2 in 0..out_ext[2] {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cin {
                        for k0 in 0..k[0] {
                            for k1 in 0..k[1] {
                                for k2 in 0..k[2] {
                                    let i0 = (o0 * s[0] + k0 * d[0]) as i64 - p[0] as i64;
                                    let i1 = (o1 * s[1] + k1 * d[1]) as i64 - p[1] as i64;
                                    let i2 = (o2 * s[2] + k2 * d[2]) as i64 - p[2] as i64;
                                    if i0 < 0 || i1 < 0 || i2 < 0 {
                                        continue;
                                    }
                                    let (i0, i1, i2) = (i0 as usize, i1 as usize, i2 as usize);
                                    if i0 >= n[0] || i1 >= n[1] || i2 >= n[2] {
                                        continue;
                                    }
                                    let xi = ((ci * n[0] + i0) * n[1] + i1) * n[2] + i2;
                                    let wi = (((co * cin + ci) * k[0] + k0) * k[1] + k1) * k[2] + k2;
                                    acc += wv[wi] * xv[xi];
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    let mut shape = vec![cout];
    shape.extend_from_slice(&out_ext[3 - r..]);
    Some(Tensor::new(shape, out).unwrap())
}

pub fn pool(x: &Tensor, kind: PoolKind, axes: PoolAxes) -> Tensor {
    let c = x.shape()[0];
    let s: usize = x.shape()[1..].iter().product();
    let at = |ch: usize, i: usize| x.data()[ch * s + i];
    let reduce = |vals: Vec<f64>| match kind {
        PoolKind::Avg => vals.iter().sum::<f64>() / vals.len() as f64,
        PoolKind::Max => vals.into_iter().fold(f64::NEG_INFINITY, f64::max),
    };
    match axes {
        PoolAxes::Spatial => {
            let data = (0..c).map(|ch| reduce((0..s).map(|i| at(ch, i)).collect())).collect();
            Tensor::new(vec![c], data).unwrap()
        }
        PoolAxes::Channel => {
            let data = (0..s).map(|i| reduce((0..c).map(|ch| at(ch, i)).collect())).collect();
            let mut shape = vec![1];
            shape.extend_from_slice(&x.shape()[1..]);
            Tensor::new(shape, data).unwrap()
        }
    }
}

/// Box membership of voxel `v` for category `c`: on every axis some voxel of
/// `c` lies at or below `v` and some at or above.
pub fn roi(labels: &[u8], dims: [usize; 3], num_categories: usize) -> Vec<f64> {
    let coords = |i: usize| [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]];
    let n = labels.len();
    let mut out = vec![0.0; num_categories * n];
    for c in 1..=num_categories {
        let members: Vec<[usize; 3]> = (0..n).filter(|&i| labels[i] as usize == c).map(coords).collect();
        for v in 0..n {
            let q = coords(v);
            let inside = (0..3).all(|a| members.iter().any(|m| m[a] <= q[a]) && members.iter().any(|m| m[a] >= q[a]));
            if inside {
                out[(c - 1) * n + v] = 1.0;
            }
        }
    }
    out
}

/// Per destination, the mean over the sources assigned to it.
pub fn scatter_mean(x: &[f64], channels: usize, targets: &[Option<usize>], dst_len: usize) -> Vec<f64> {
    let src = targets.len();
    let mut out = vec![0.0; channels * dst_len];
    for t in 0..dst_len {
        let srcs: Vec<usize> = (0..src).filter(|&p| targets[p] == Some(t)).collect();
        if srcs.is_empty() {
            continue;
        }
        for ch in 0..channels {
            out[ch * dst_len + t] = srcs.iter().map(|&p| x[ch * src + p]).sum::<f64>() / srcs.len() as f64;
        }
    }
    out
}

/// Each source reads its destination, divided by the destination's fan-in.
pub fn gather_mean(y: &[f64], channels: usize, targets: &[Option<usize>], dst_len: usize) -> Vec<f64> {
    let src = targets.len();
    let mut out = vec![0.0; channels * src];
    for p in 0..src {
        if let Some(t) = targets[p] {
            let k = targets.iter().filter(|&&q| q == Some(t)).count() as f64;
            for ch in 0..channels {
                out[ch * src + p] = y[ch * dst_len + t] / k;
            }
        }
    }
    out
}

/// `(tp, fp, fn)` of the predicate pair over the masked voxels.
pub fn confusion(pred: &[bool], gt: &[bool], mask: &[bool]) -> (u64, u64, u64) {
    let count = |f: &dyn Fn(usize) -> bool| (0..mask.len()).filter(|&i| mask[i] && f(i)).count() as u64;
    (
        count(&|i| pred[i] && gt[i]),
        count(&|i| pred[i] && !gt[i]),
        count(&|i| !pred[i] && gt[i]),
    )
}

pub fn sc_counts(pred: &[u8], gt: &[u8], mask: &[bool]) -> (u64, u64, u64) {
    let p: Vec<bool> = pred.iter().map(|&l| l != 0).collect();
    let g: Vec<bool> = gt.iter().map(|&l| l != 0).collect();
    confusion(&p, &g, mask)
}

pub fn ssc_counts(pred: &[u8], gt: &[u8], mask: &[bool], num_categories: usize) -> Vec<(u64, u64, u64)> {
    (1..=num_categories as u8)
        .map(|c| {
            let p: Vec<bool> = pred.iter().map(|&l| l == c).collect();
            let g: Vec<bool> = gt.iter().map(|&l| l == c).collect();
            confusion(&p, &g, mask)
        })
        .collect()
}

/// Mean of `-ln softmax(logits)[label]` over masked positions, computed from
/// logits with the log-sum-exp shift.
pub fn cross_entropy_from_logits(logits: &[f64], k: usize, labels: &[u8], mask: &[bool]) -> f64 {
    let s = labels.len();
    let mut total = 0.0;
    let mut n = 0;
    for p in (0..s).filter(|&p| mask[p]) {
        let col: Vec<f64> = (0..k).map(|c| logits[c * s + p]).collect();
        let m = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + col.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - col[labels[p] as usize];
        n += 1;
    }
    total / n as f64
}
