//! Volume network: a completion branch of residual attention blocks and an
//! optional guidance branch whose sigmoid output gates the completion scores
//! multiplicatively before the softmax.

mod guidance;
mod rab;

pub use guidance::{one_hot_roi_encode, GuidanceParams, GATE_BIAS_INIT, GUIDANCE_SCOPE};
pub use rab::{channel_attention, spatial_attention, AttentionParams, Rab, ATTENTION_SCOPE, SPATIAL_HIDDEN};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::net2d::{check_dilations, Aspp};
use crate::tensor::{Bound, ConvLayer, ConvSpec, Graph, ParamStore, Var};

pub const RAB_COUNT: usize = 4;
pub const CASCADE_DEPTH: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Net3dConfig {
    /// Channels of the projected image features.
    pub input_channels: usize,
    /// Width `C` of the completion branch.
    pub channels: usize,
    pub guidance_channels: usize,
    pub aspp_dilations: Vec<usize>,
    pub num_categories: usize,
}

impl Default for Net3dConfig {
    fn default() -> Self {
        Self {
            input_channels: 64,
            channels: 16,
            guidance_channels: 8,
            aspp_dilations: vec![1, 2, 3],
            num_categories: 11,
        }
    }
}

impl Net3dConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.input_channels >= 1 && self.channels >= 1 && self.guidance_channels >= 1,
            "3D channel widths must be positive"
        );
        ensure!(self.num_categories >= 1, "num_categories must be at least 1");
        check_dilations(&self.aspp_dilations)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionParams {
    pub input_proj: ConvLayer,
    pub rabs: Vec<Rab>,
    /// `1x1x1` convolution over the concatenated RAB outputs.
    pub fuse: ConvLayer,
    pub aspp: Aspp,
    pub cascade: Vec<ConvLayer>,
}

impl CompletionParams {
    pub fn new(store: &mut ParamStore, cfg: &Net3dConfig, attention: bool, rng: &mut impl Rng) -> Result<Self> {
        let name = "net3d/completion";
        let c = cfg.channels;
        let point = |i, o| ConvSpec::new(i, o, &[1, 1, 1]);
        let input_proj = ConvLayer::new(store, &format!("{name}/input"), point(cfg.input_channels, c), true, rng)?;
        let rabs = (0..RAB_COUNT)
            .map(|i| Rab::new(store, &format!("{name}/rab{i}"), c, attention, rng))
            .collect::<Result<_>>()?;
        let fuse = ConvLayer::new(store, &format!("{name}/fuse"), point(RAB_COUNT * c, c), true, rng)?;
        let aspp = Aspp::new(store, &format!("{name}/aspp"), 3, c, c, &cfg.aspp_dilations, rng)?;
        let cascade = (0..CASCADE_DEPTH)
            .map(|i| {
                let out = if i + 1 == CASCADE_DEPTH { cfg.num_categories + 1 } else { c };
                ConvLayer::new(store, &format!("{name}/cascade{i}"), point(c, out), true, rng)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            input_proj,
            rabs,
            fuse,
            aspp,
            cascade,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, features: Var) -> Result<Var> {
        let h = self.input_proj.apply(g, p, features)?;
        let mut h = g.relu(h);
        let mut levels = Vec::with_capacity(self.rabs.len());
        for r in &self.rabs {
            h = r.forward(g, p, h)?;
            levels.push(h);
        }
        let cat = g.concat(&levels)?;
        let h = self.fuse.apply(g, p, cat)?;
        let h = g.relu(h);
        let mut h = self.aspp.forward(g, p, h)?;
        for (i, c) in self.cascade.iter().enumerate() {
            h = c.apply(g, p, h)?;
            if i + 1 < self.cascade.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

/// Parameter handles of the volume network; values live under `net3d/`.
#[derive(Debug, Clone, PartialEq)]
pub struct Net3d {
    pub config: Net3dConfig,
    pub completion: CompletionParams,
    /// Absent when the guidance branch is removed.
    pub guidance: Option<GuidanceParams>,
}

#[derive(Debug, Clone, Copy)]
pub struct Net3dVars {
    pub scores: Var,
    pub guidance: Option<Var>,
    pub probs: Var,
}

impl Net3d {
    pub fn new(
        cfg: &Net3dConfig,
        attention: bool,
        guidance: bool,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let guidance_seed: u64 = rng.gen();
        let completion = CompletionParams::new(store, cfg, attention, rng)?;
        let guidance = if guidance {
            Some(GuidanceParams::new(
                store,
                "net3d/guidance",
                cfg.num_categories,
                cfg.guidance_channels,
                cfg.num_categories + 1,
                &mut ChaCha8Rng::seed_from_u64(guidance_seed),
            )?)
        } else {
            None
        };
        Ok(Self {
            config: cfg.clone(),
            completion,
            guidance,
        })
    }

    /// `encoded` is the box encoding fed to the guidance branch; it is
    /// required exactly when the branch exists.
    pub fn forward(&self, g: &mut Graph, p: &Bound, features: Var, encoded: Option<Var>) -> Result<Net3dVars> {
        let scores = self.completion.forward(g, p, features)?;
        let guidance = match (&self.guidance, encoded) {
            (Some(gp), Some(e)) => Some(gp.forward(g, p, e)?),
            (None, None) => None,
            (Some(_), None) => return Err(crate::Error::contract("guidance branch needs an encoded volume")),
            (None, Some(_)) => return Err(crate::Error::contract("network has no guidance branch")),
        };
        let probs = fuse_and_classify(g, scores, guidance)?;
        Ok(Net3dVars {
            scores,
            guidance,
            probs,
        })
    }
}

/// `softmax(completion * guidance)` over channels; without guidance the
/// product is skipped.
pub fn fuse_and_classify(g: &mut Graph, completion: Var, guidance: Option<Var>) -> Result<Var> {
    let gated = match guidance {
        Some(gd) => {
            ensure!(
                g.value(completion).shape() == g.value(gd).shape(),
                "completion {:?} and guidance {:?} shapes differ",
                g.value(completion).shape(),
                g.value(gd).shape()
            );
            g.mul(completion, gd)?
        }
        None => completion,
    };
    Ok(g.softmax(gated))
}
