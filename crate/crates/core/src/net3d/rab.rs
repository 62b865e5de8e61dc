//! Residual attention block `y = A(D(x)) + x`: a DDR stack `D` followed by
//! channel then spatial attention `A`, wrapped by an identity shortcut.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Result};
use crate::tensor::{
    mlp2, mlp_hidden, xavier_uniform, Bound, ConvLayer, ConvSpec, Graph, ParamId, ParamStore, PoolAxes, PoolKind,
    Var,
};

/// Hidden channels between the two spatial-attention convolutions.
pub const SPATIAL_HIDDEN: usize = 4;

pub const ATTENTION_SCOPE: &str = "attention";

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// Shared MLP `[h, C]` and `[C, h]`, no biases.
    pub mlp_hidden: ParamId,
    pub mlp_out: ParamId,
    /// `5x5x5` over the pooled pair, then `1x1x1` to one channel.
    pub spatial1: ConvLayer,
    pub spatial2: ConvLayer,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, rng: &mut impl Rng) -> Result<Self> {
        let h = mlp_hidden(c);
        let mlp_hidden = store.add(format!("{name}/mlp_hidden"), xavier_uniform(&[h, c], c, h, rng))?;
        let mlp_out = store.add(format!("{name}/mlp_out"), xavier_uniform(&[c, h], h, c, rng))?;
        let spatial1 = ConvLayer::new(
            store,
            &format!("{name}/spatial1"),
            ConvSpec::new(2, SPATIAL_HIDDEN, &[5, 5, 5]).same_padding(),
            true,
            rng,
        )?;
        let spatial2 = ConvLayer::new(
            store,
            &format!("{name}/spatial2"),
            ConvSpec::new(SPATIAL_HIDDEN, 1, &[1, 1, 1]),
            true,
            rng,
        )?;
        Ok(Self {
            mlp_hidden,
            mlp_out,
            spatial1,
            spatial2,
        })
    }
}

/// `sigmoid(mlp(avgpool(x)) + mlp(maxpool(x)))`, one weight per channel.
pub fn channel_attention(g: &mut Graph, p: &Bound, a: &AttentionParams, x: Var) -> Result<Var> {
    let avg = g.pool(x, PoolKind::Avg, PoolAxes::Spatial)?;
    let max = g.pool(x, PoolKind::Max, PoolAxes::Spatial)?;
    let ya = mlp2(g, avg, p[a.mlp_hidden], p[a.mlp_out])?;
    let ym = mlp2(g, max, p[a.mlp_hidden], p[a.mlp_out])?;
    let s = g.add(ya, ym)?;
    Ok(g.sigmoid(s))
}

/// `sigmoid(conv1(relu(conv5([avg_c(x), max_c(x)]))))`, shape `[1, ...]`.
pub fn spatial_attention(g: &mut Graph, p: &Bound, a: &AttentionParams, x: Var) -> Result<Var> {
    let avg = g.pool(x, PoolKind::Avg, PoolAxes::Channel)?;
    let max = g.pool(x, PoolKind::Max, PoolAxes::Channel)?;
    let pair = g.concat(&[avg, max])?;
    let h = a.spatial1.apply(g, p, pair)?;
    let h = g.relu(h);
    let s = a.spatial2.apply(g, p, h)?;
    Ok(g.sigmoid(s))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rab {
    pub channels: usize,
    pub ddr: [ConvLayer; 3],
    /// `None` replaces the attention block by the constant 1.
    pub attention: Option<AttentionParams>,
}

impl Rab {
    /// The attention weights come from a child stream, so the remaining
    /// weights do not depend on whether attention is present.
    pub fn new(store: &mut ParamStore, name: &str, c: usize, attention: bool, rng: &mut impl Rng) -> Result<Self> {
        let attention_seed: u64 = rng.gen();
        let mut stage = |i: usize, k: [usize; 3]| {
            ConvLayer::new(
                store,
                &format!("{name}/ddr{i}"),
                ConvSpec::new(c, c, &k).same_padding(),
                true,
                rng,
            )
        };
        let ddr = [stage(1, [1, 1, 3])?, stage(2, [1, 3, 1])?, stage(3, [3, 1, 1])?];
        let attention = if attention {
            let mut child = ChaCha8Rng::seed_from_u64(attention_seed);
            Some(AttentionParams::new(store, &format!("{name}/attn"), c, &mut child)?)
        } else {
            None
        };
        Ok(Self {
            channels: c,
            ddr,
            attention,
        })
    }

    /// `D(x)`: relu after the first two stages only.
    pub fn ddr_forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.ddr.iter().enumerate() {
            h = l.apply(g, p, h)?;
            if i < 2 {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// `A(D(x))`, the residual branch.
    pub fn branch(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let d = self.ddr_forward(g, p, x)?;
        let Some(a) = &self.attention else {
            return Ok(d);
        };
        g.push_scope(ATTENTION_SCOPE);
        let out = (|| {
            let cw = channel_attention(g, p, a, d)?;
            let refined = g.scale_channels(d, cw)?;
            let s = spatial_attention(g, p, a, refined)?;
            g.scale_spatial(refined, s)
        })();
        g.pop_scope();
        out
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let c = g.value(x).channels();
        ensure!(
            g.value(x).shape().len() == 4 && c == self.channels,
            "RAB expects [{}, D, H, W], got {:?}",
            self.channels,
            g.value(x).shape()
        );
        let b = self.branch(g, p, x)?;
        ensure!(
            g.value(b).shape() == g.value(x).shape(),
            "RAB branch changed shape from {:?} to {:?}",
            g.value(x).shape(),
            g.value(b).shape()
        );
        g.add(b, x)
    }
}
