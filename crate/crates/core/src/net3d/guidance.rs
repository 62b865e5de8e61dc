//! Guidance branch: per-category bounding-box encoding of a semantic volume,
//! three dense 3D convolutions and a sigmoid.

use rand::Rng;

use crate::error::{ensure, Result};
use crate::tensor::{Bound, ConvLayer, ConvSpec, Graph, ParamStore, Tensor, Var};

pub const GUIDANCE_SCOPE: &str = "guidance";

/// Initial bias of the last guidance convolution; the gate starts near 1.
pub const GATE_BIAS_INIT: f64 = 2.0;

/// Channel `c - 1` is the indicator of the inclusive axis-aligned bounding box
/// of all voxels labeled `c`; absent categories give an all-zero channel.
pub fn one_hot_roi_encode(labels: &[u8], dims: [usize; 3], num_categories: usize) -> Result<Tensor> {
    let n: usize = dims.iter().product();
    ensure!(
        labels.len() == n,
        "label volume has {} entries, dims {dims:?} need {n}",
        labels.len()
    );
    let mut lo = vec![[usize::MAX; 3]; num_categories];
    let mut hi = vec![[0usize; 3]; num_categories];
    let mut present = vec![false; num_categories];
    for (i, &l) in labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let c = l as usize - 1;
        ensure!(c < num_categories, "label {l} at voxel {i} exceeds {num_categories} categories");
        let idx = [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]];
        present[c] = true;
        for a in 0..3 {
            lo[c][a] = lo[c][a].min(idx[a]);
            hi[c][a] = hi[c][a].max(idx[a]);
        }
    }
    let mut out = Tensor::zeros(&[num_categories, dims[0], dims[1], dims[2]]);
    let data = out.data_mut();
    for c in (0..num_categories).filter(|&c| present[c]) {
        for x in lo[c][0]..=hi[c][0] {
            for y in lo[c][1]..=hi[c][1] {
                let base = c * n + (x * dims[1] + y) * dims[2];
                data[base + lo[c][2]..=base + hi[c][2]].fill(1.0);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceParams {
    pub convs: [ConvLayer; 3],
}

impl GuidanceParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        num_categories: usize,
        hidden: usize,
        out_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut conv = |i: usize, cin, cout| {
            ConvLayer::new(
                store,
                &format!("{name}/conv{i}"),
                ConvSpec::new(cin, cout, &[3, 3, 3]).same_padding(),
                true,
                rng,
            )
        };
        let convs = [
            conv(1, num_categories, hidden)?,
            conv(2, hidden, hidden)?,
            conv(3, hidden, out_channels)?,
        ];
        if let Some(b) = convs[2].b {
            store.get_mut(b).data_mut().fill(GATE_BIAS_INIT);
        }
        Ok(Self { convs })
    }

    /// conv, relu, conv, relu, conv, sigmoid.
    pub fn forward(&self, g: &mut Graph, p: &Bound, encoded: Var) -> Result<Var> {
        g.push_scope(GUIDANCE_SCOPE);
        let out = (|| {
            let mut h = encoded;
            for (i, c) in self.convs.iter().enumerate() {
                h = c.apply(g, p, h)?;
                h = if i < 2 { g.relu(h) } else { g.sigmoid(h) };
            }
            Ok(h)
        })();
        g.pop_scope();
        out
    }
}
