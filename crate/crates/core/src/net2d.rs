//! Two-stream image segmentation network: separate RGB and HHA
//! encoder-decoders with ASPP, fused by a 1x1 convolution into a feature map,
//! followed by a 1x1 classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tensor::{xavier_uniform, Bound, ConvLayer, ConvSpec, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seg2dConfig {
    pub stem_channels: usize,
    /// `(channels, stride)` per residual stage.
    pub encoder_blocks: Vec<(usize, usize)>,
    pub aspp_dilations: Vec<usize>,
    pub feature_channels: usize,
    pub num_categories: usize,
}

impl Default for Seg2dConfig {
    fn default() -> Self {
        Self {
            stem_channels: 16,
            encoder_blocks: vec![(16, 2), (32, 2)],
            aspp_dilations: vec![1, 2, 4],
            feature_channels: 64,
            num_categories: 11,
        }
    }
}

impl Seg2dConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.feature_channels >= 1, "feature_channels must be at least 1");
        ensure!(self.stem_channels >= 1, "stem_channels must be at least 1");
        ensure!(self.num_categories >= 1, "num_categories must be at least 1");
        for (i, &(c, s)) in self.encoder_blocks.iter().enumerate() {
            ensure!(c >= 1 && s >= 1, "encoder stage {i} needs positive channels and stride");
        }
        check_dilations(&self.aspp_dilations)
    }

    /// Product of the encoder strides.
    pub fn downsampling(&self) -> usize {
        self.encoder_blocks.iter().map(|b| b.1).product()
    }
}

pub(crate) fn check_dilations(d: &[usize]) -> Result<()> {
    ensure!(!d.is_empty(), "ASPP needs at least one dilation rate");
    for (i, &a) in d.iter().enumerate() {
        ensure!(a >= 1, "ASPP dilation rates must be at least 1, got {a}");
        ensure!(!d[..i].contains(&a), "duplicate ASPP dilation rate {a}");
    }
    Ok(())
}

/// Parallel dilated `3^rank` convolutions, each followed by relu, summed and
/// projected by a `1^rank` convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Aspp {
    pub branches: Vec<ConvLayer>,
    pub proj: ConvLayer,
}

impl Aspp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        rank: usize,
        in_channels: usize,
        out_channels: usize,
        dilations: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_dilations(dilations)?;
        let branches = dilations
            .iter()
            .map(|&d| {
                let spec = ConvSpec::new(in_channels, out_channels, &vec![3; rank])
                    .with_dilation(&vec![d; rank])
                    .same_padding();
                ConvLayer::new(store, &format!("{name}/d{d}"), spec, true, rng)
            })
            .collect::<Result<_>>()?;
        let proj = ConvLayer::new(
            store,
            &format!("{name}/proj"),
            ConvSpec::new(out_channels, out_channels, &vec![1; rank]),
            true,
            rng,
        )?;
        Ok(Self { branches, proj })
    }

    /// Sum of the relu'd branch outputs, before projection.
    pub fn branch_sum(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for b in &self.branches {
            let y = b.apply(g, p, x)?;
            let y = g.relu(y);
            acc = Some(match acc {
                Some(a) => g.add(a, y)?,
                None => y,
            });
        }
        Ok(acc.expect("at least one branch"))
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let s = self.branch_sum(g, p, x)?;
        self.proj.apply(g, p, s)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ResidualStage {
    conv1: ConvLayer,
    conv2: ConvLayer,
    shortcut: Option<ConvLayer>,
}

impl ResidualStage {
    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.conv1.apply(g, p, x)?;
        let h = g.relu(h);
        let h = self.conv2.apply(g, p, h)?;
        let skip = match &self.shortcut {
            Some(s) => s.apply(g, p, x)?,
            None => x,
        };
        let y = g.add(h, skip)?;
        Ok(g.relu(y))
    }
}

/// One encoder-ASPP-decoder stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    stem: ConvLayer,
    stages: Vec<ResidualStage>,
    aspp: Aspp,
    /// `(upsampling factor, conv)` from coarse to fine.
    decoder: Vec<(usize, ConvLayer)>,
}

impl Stream {
    fn new(store: &mut ParamStore, name: &str, cfg: &Seg2dConfig, rng: &mut impl Rng) -> Result<Self> {
        let conv3 = |i, o| ConvSpec::new(i, o, &[3, 3]).same_padding();
        let stem = ConvLayer::new(store, &format!("{name}/stem"), conv3(3, cfg.stem_channels), true, rng)?;
        let mut stages = Vec::new();
        let mut widths = vec![cfg.stem_channels];
        let mut c = cfg.stem_channels;
        for (i, &(out, s)) in cfg.encoder_blocks.iter().enumerate() {
            let n = format!("{name}/enc{i}");
            let conv1 = ConvLayer::new(store, &format!("{n}/conv1"), conv3(c, out).with_stride(&[s, s]), true, rng)?;
            let conv2 = ConvLayer::new(store, &format!("{n}/conv2"), conv3(out, out), true, rng)?;
            let shortcut = if s != 1 || c != out {
                let spec = ConvSpec::new(c, out, &[1, 1]).with_stride(&[s, s]);
                Some(ConvLayer::new(store, &format!("{n}/skip"), spec, false, rng)?)
            } else {
                None
            };
            stages.push(ResidualStage { conv1, conv2, shortcut });
            c = out;
            widths.push(out);
        }
        let aspp = Aspp::new(store, &format!("{name}/aspp"), 2, c, c, &cfg.aspp_dilations, rng)?;
        let mut decoder = Vec::new();
        for (i, &(_, s)) in cfg.encoder_blocks.iter().enumerate().rev() {
            let out = widths[i];
            let conv = ConvLayer::new(store, &format!("{name}/dec{i}"), conv3(c, out), true, rng)?;
            decoder.push((s, conv));
            c = out;
        }
        Ok(Self {
            stem,
            stages,
            aspp,
            decoder,
        })
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.stem.apply(g, p, x)?;
        let mut h = g.relu(h);
        for s in &self.stages {
            h = s.forward(g, p, h)?;
        }
        h = self.aspp.forward(g, p, h)?;
        for (f, conv) in &self.decoder {
            if *f > 1 {
                h = g.upsample(h, &[*f, *f])?;
            }
            h = conv.apply(g, p, h)?;
            h = g.relu(h);
        }
        Ok(h)
    }
}

/// Parameter handles of the two-stream network; values live in a
/// [`ParamStore`] under the `net2d/` prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct Seg2dNet {
    pub config: Seg2dConfig,
    pub rgb: Stream,
    pub hha: Stream,
    /// Halves of the 1x1 fusion kernel acting on each stream's output.
    pub fuse_rgb: ParamId,
    pub fuse_hha: ParamId,
    pub fuse_b: ParamId,
    pub classifier: ConvLayer,
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Seg2dVars {
    pub features: Var,
    pub logits: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Seg2dOutput {
    pub features: Tensor,
    pub logits: Tensor,
    pub seg_map: Vec<u8>,
}

impl Seg2dNet {
    pub fn new(cfg: &Seg2dConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let rgb = Stream::new(store, "net2d/rgb", cfg, rng)?;
        let hha = Stream::new(store, "net2d/hha", cfg, rng)?;
        let (s, f) = (cfg.stem_channels, cfg.feature_channels);
        let fuse_rgb = store.add("net2d/fuse/w_rgb", xavier_uniform(&[f, s, 1, 1], 2 * s, f, rng))?;
        let fuse_hha = store.add("net2d/fuse/w_hha", xavier_uniform(&[f, s, 1, 1], 2 * s, f, rng))?;
        let fuse_b = store.add("net2d/fuse/b", Tensor::zeros(&[f]))?;
        let classifier = ConvLayer::new(
            store,
            "net2d/classifier",
            ConvSpec::new(f, cfg.num_categories + 1, &[1, 1]),
            true,
            rng,
        )?;
        Ok(Self {
            config: cfg.clone(),
            rgb,
            hha,
            fuse_rgb,
            fuse_hha,
            fuse_b,
            classifier,
        })
    }

    /// The two streams must have identically shaped parameters.
    pub fn check_streams(&self, store: &ParamStore) -> Result<()> {
        let rgb = store.subset("net2d/rgb/");
        let hha = store.subset("net2d/hha/");
        ensure!(rgb.len() == hha.len(), "RGB and HHA streams have different layer counts");
        for ((na, a), (nb, b)) in rgb.iter().zip(hha.iter()) {
            ensure!(
                na["net2d/rgb/".len()..] == nb["net2d/hha/".len()..] && a.shape() == b.shape(),
                "stream mismatch: {na} {:?} vs {nb} {:?}",
                a.shape(),
                b.shape()
            );
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, rgb: Var, hha: Var) -> Result<Seg2dVars> {
        for (name, v) in [("rgb", rgb), ("hha", hha)] {
            let s = g.value(v).shape();
            ensure!(
                s.len() == 3 && s[0] == 3,
                "{name} input must be [3, H, W], got {s:?}"
            );
            let f = self.config.downsampling();
            ensure!(
                s[1] % f == 0 && s[2] % f == 0,
                "{name} extents {}x{} are not divisible by the encoder downsampling {f}",
                s[1],
                s[2]
            );
        }
        ensure!(
            g.value(rgb).shape() == g.value(hha).shape(),
            "rgb {:?} and hha {:?} shapes differ",
            g.value(rgb).shape(),
            g.value(hha).shape()
        );
        let a = self.rgb.forward(g, p, rgb)?;
        let b = self.hha.forward(g, p, hha)?;
        let spec = ConvSpec::new(self.config.stem_channels, self.config.feature_channels, &[1, 1]);
        let fa = g.conv(a, p[self.fuse_rgb], None, &spec)?;
        let fb = g.conv(b, p[self.fuse_hha], None, &spec)?;
        let sum = g.add(fa, fb)?;
        let features = g.bias_add(sum, p[self.fuse_b])?;
        let logits = self.classifier.apply(g, p, features)?;
        Ok(Seg2dVars { features, logits })
    }

    /// Forward pass with frozen parameters.
    pub fn infer(&self, store: &ParamStore, rgb: &Tensor, hha: &Tensor) -> Result<Seg2dOutput> {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let (r, h) = (g.constant(rgb.clone()), g.constant(hha.clone()));
        let out = self.forward(&mut g, &p, r, h)?;
        let logits = g.value(out.logits).clone();
        Ok(Seg2dOutput {
            features: g.value(out.features).clone(),
            seg_map: argmax_channels(&logits),
            logits,
        })
    }
}

/// Per-location argmax over channels, ties to the smallest index.
pub fn argmax_channels(t: &Tensor) -> Vec<u8> {
    let c = t.channels();
    let n = t.spatial_len();
    let d = t.data();
    (0..n)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if d[k * n + p] > d[best * n + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}
