//! Finite-difference checks of every differentiable block at small sizes.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssc_core::eval::{masked_cross_entropy, EvalMask};
use ssc_core::geometry::{GridSpec, ProjectionMap, Visibility, VoxelGrid};
use ssc_core::net2d::{Aspp, Seg2dConfig, Seg2dNet};
use ssc_core::net3d::{
    channel_attention, fuse_and_classify, one_hot_roi_encode, spatial_attention, AttentionParams, CompletionParams,
    GuidanceParams, Net3d, Net3dConfig, Rab,
};
use ssc_core::tensor::{
    ddr_conv3d, grad_check, Bound, ConvSpec, CustomOp, GradCheckOptions, GradCheckReport, Graph, ParamStore, Tensor,
    Var,
};
use ssc_core::{Error, Result};

pub const TOLERANCE: f64 = 1e-4;
pub const EPSILON: f64 = 1e-5;
/// Step for the deep composites (completion branch, end-to-end loss), whose
/// smallest gradient entries sit near the rounding noise of a `1e-5`
/// central difference.
pub const COMPOSITE_EPSILON: f64 = 1e-3;

pub const BLOCKS: [&str; 14] = [
    "conv2d",
    "conv3d",
    "ddr",
    "channel-attention",
    "spatial-attention",
    "rab",
    "aspp2d",
    "aspp3d",
    "projection",
    "guidance",
    "completion",
    "fusion",
    "net2d",
    "loss",
];

#[derive(Debug, Clone)]
pub struct BlockResult {
    pub block: &'static str,
    pub report: GradCheckReport,
}

impl BlockResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < TOLERANCE && self.report.checked > 0
    }
}

/// Identity forward with a doubled gradient.
struct WrongBackward;

impl CustomOp for WrongBackward {
    fn name(&self) -> &str {
        "wrong-backward"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(inputs[0].clone())
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad_out.iter().map(|g| 2.0 * g).collect())]
    }
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Parameters of `store` followed by `inputs`, as one list for the checker.
fn with_inputs(store: &ParamStore, inputs: &[Tensor]) -> Vec<Tensor> {
    store.tensors().iter().cloned().chain(inputs.iter().cloned()).collect()
}

/// Scalar objective: a fixed random linear functional of `y`, routed through
/// the faulty op when `fault` is set.
fn readout(g: &mut Graph, y: Var, weights: &Tensor, fault: bool) -> Result<Var> {
    let y = if fault { g.custom(&[y], Arc::new(WrongBackward))? } else { y };
    g.weighted_sum(y, weights)
}

struct Case {
    params: Vec<Tensor>,
    samples: usize,
    epsilon: f64,
    f: Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>,
}

fn case(block: &str, fault: bool, rng: &mut ChaCha8Rng) -> Result<Case> {
    let mut store = ParamStore::new();
    let c = match block {
        "conv2d" => {
            let spec = ConvSpec::new(2, 3, &[3, 3]).with_stride(&[2, 1]).with_padding(&[1, 1]);
            let (x, w, b) = (rand_tensor(&[2, 7, 6], rng), rand_tensor(&[3, 2, 3, 3], rng), rand_tensor(&[3], rng));
            let out = spec.output_extents(&[7, 6])?;
            let r = rand_tensor(&[3, out[0], out[1]], rng);
            Case {
                params: vec![x, w, b],
                samples: 40,
                epsilon: EPSILON,
                f: Box::new(move |g, v| {
                    let y = g.conv(v[0], v[1], Some(v[2]), &spec)?;
                    readout(g, y, &r, fault)
                }),
            }
        }
        "conv3d" => {
            let spec = ConvSpec::new(2, 2, &[3, 3, 3]).with_dilation(&[2, 1, 2]).same_padding();
            let (x, w, b) = (rand_tensor(&[2, 5, 4, 6], rng), rand_tensor(&[2, 2, 3, 3, 3], rng), rand_tensor(&[2], rng));
            let r = rand_tensor(&[2, 5, 4, 6], rng);
            Case {
                params: vec![x, w, b],
                samples: 40,
                epsilon: EPSILON,
                f: Box::new(move |g, v| {
                    let y = g.conv(v[0], v[1], Some(v[2]), &spec)?;
                    readout(g, y, &r, fault)
                }),
            }
        }
        "ddr" => {
            let params = vec![
                rand_tensor(&[3, 4, 5, 3], rng),
                rand_tensor(&[3, 3, 1, 1, 3], rng),
                rand_tensor(&[3, 3, 1, 3, 1], rng),
                rand_tensor(&[3, 3, 3, 1, 1], rng),
            ];
            let r = rand_tensor(&[3, 4, 5, 3], rng);
            Case {
                params,
                samples: 40,
                epsilon: EPSILON,
                f: Box::new(move |g, v| {
                    let y = ddr_conv3d(g, v[0], v[1], v[2], v[3])?;
                    readout(g, y, &r, fault)
                }),
            }
        }
        "channel-attention" | "spatial-attention" => {
            let a = AttentionParams::new(&mut store, "attn", 8, rng)?;
            let x = rand_tensor(&[8, 3, 4, 3], rng);
            let spatial = block == "spatial-attention";
            let r = rand_tensor(if spatial { &[1, 3, 4, 3] } else { &[8] }, rng);
            let n = store.len();
            Case {
                params: with_inputs(&store, &[x]),
                samples: 30,
                epsilon: EPSILON,
                f: Box::new(move |g, v| {
                    let p = Bound::from_vars(v[..n].to_vec());
                    let y = if spatial {
                        spatial_attention(g, &p, &a, v[n])?
                    } else {
                        channel_attention(g, &p, &a, v[n])?
                    };
                    readout(g, y, &r, fault)
                }),
            }
        }
        "rab" => {
            let rab = Rab::new(&mut store, "rab", 4, true, rng)?;
            let x = rand_tensor(&[4, 3, 4, 3], rng);
            let r = rand_tensor(&[4, 3, 4, 3], rng);
            let n = store.len();
            Case {
                params: with_inputs(&store, &[x]),
                samples: 20,
                epsilon: EPSILON,
                f: Box::new(move |g, v| {
                    let p = Bound::from_vars(v[..n].to_vec());
                    let y = rab.forward(g, &p, v[n])?;
                    readout(g, y, &r, fault)
                }),
            }
        }
        "aspp2d" | "aspp3d" => {
            let rank = if block == "aspp2d" { 2 } else { 3 };
            let aspp = Aspp::new(&mut store, "aspp", rank, 3, 3, &[1, 2, 3], rng)?;
            let shape: Vec<usize> = if rank == 2 { vec![3, 6, 5] } else { vec![3, 4, 5, 3] };
            let x = rand_tensor(&shape, rng);
            let r = rand_tensor(&shape, rng);
            let n = store.len();
            Case {
                params: with_inputs(&store, &[x]),
                samples: 25,
                epsilon: EPSILON,
                f: Box::new(move |g, v| {
                    let p = Bound::from_vars(v[..n].to_vec());
                    let y = aspp.forward(g, &p, v[n])?;
                    readout(g, y, &r, fault)
                }),
            }
        }
        "projection" => {
            let grid = GridSpec {
                dims: [4, 3, 5],
                voxel_size: 1.0,
                origin: [0.0; 3],
            };
            let targets: Vec<Option<usize>> = (0..48)
                .map(|_| rng.gen_bool(0.8).then(|| rng.gen_range(0..grid.len())))
                .collect();
            let plan = ProjectionMap::from_pixel_targets(8, 6, grid, targets).scatter_plan()?;
            let x = rand_tensor(&[3, 6, 8], rng);
            let r = rand_tensor(&[3, 4, 3, 5], rng);
            Case {
                params: vec![x],
                samples: 144,
                epsilon: EPSILON,
                f: Box::new(move |g, v| {
                    let y = g.scatter(v[0], plan.clone())?;
                    readout(g, y, &r, fault)
                }),
            }
        }
        "guidance" => {
            let gp = GuidanceParams::new(&mut store, "guidance", 3, 4, 4, rng)?;
            let dims = [4, 3, 4];
            let labels: Vec<u8> = (0..48).map(|_| rng.gen_range(0..4)).collect();
            let enc = one_hot_roi_encode(&labels, dims, 3)?;
            let r = rand_tensor(&[4, 4, 3, 4], rng);
            let n = store.len();
            Case {
                params: with_inputs(&store, &[enc]),
                samples: 25,
                epsilon: EPSILON,
                f: Box::new(move |g, v| {
                    let p = Bound::from_vars(v[..n].to_vec());
                    let y = gp.forward(g, &p, v[n])?;
                    readout(g, y, &r, fault)
                }),
            }
        }
        "completion" => {
            let cfg = small_net3d();
            let cp = CompletionParams::new(&mut store, &cfg, true, rng)?;
            let x = rand_tensor(&[cfg.input_channels, 4, 3, 4], rng);
            let r = rand_tensor(&[cfg.num_categories + 1, 4, 3, 4], rng);
            let n = store.len();
            Case {
                params: with_inputs(&store, &[x]),
                samples: 8,
                epsilon: COMPOSITE_EPSILON,
                f: Box::new(move |g, v| {
                    let p = Bound::from_vars(v[..n].to_vec());
                    let y = cp.forward(g, &p, v[n])?;
                    readout(g, y, &r, fault)
                }),
            }
        }
        "fusion" => {
            let s = rand_tensor(&[4, 3, 2, 3], rng);
            let gd = Tensor::from_fn(&[4, 3, 2, 3], |_| rng.gen_range(0.1..0.9));
            let r = rand_tensor(&[4, 3, 2, 3], rng);
            Case {
                params: vec![s, gd],
                samples: 72,
                epsilon: EPSILON,
                f: Box::new(move |g, v| {
                    let y = fuse_and_classify(g, v[0], Some(v[1]))?;
                    readout(g, y, &r, fault)
                }),
            }
        }
        "net2d" => {
            let cfg = Seg2dConfig {
                stem_channels: 3,
                encoder_blocks: vec![(3, 2)],
                aspp_dilations: vec![1, 2],
                feature_channels: 4,
                num_categories: 3,
            };
            let net = Seg2dNet::new(&cfg, &mut store, rng)?;
            let (rgb, hha) = (rand_tensor(&[3, 6, 4], rng), rand_tensor(&[3, 6, 4], rng));
            let r = rand_tensor(&[4, 6, 4], rng);
            let n = store.len();
            Case {
                params: with_inputs(&store, &[rgb, hha]),
                samples: 6,
                epsilon: EPSILON,
                f: Box::new(move |g, v| {
                    let p = Bound::from_vars(v[..n].to_vec());
                    let y = net.forward(g, &p, v[n], v[n + 1])?;
                    readout(g, y.logits, &r, fault)
                }),
            }
        }
        "loss" => return end_to_end_case(fault, rng),
        other => return Err(Error::contract(format!("unknown gradient-check block {other:?}"))),
    };
    Ok(c)
}

fn small_net3d() -> Net3dConfig {
    Net3dConfig {
        input_channels: 3,
        channels: 3,
        guidance_channels: 2,
        aspp_dilations: vec![1, 2],
        num_categories: 3,
    }
}

/// Image features scattered into a 12x9x12 grid, through the full volume
/// network with guidance, into the masked cross-entropy.
fn end_to_end_case(fault: bool, rng: &mut ChaCha8Rng) -> Result<Case> {
    let cfg = small_net3d();
    let mut store = ParamStore::new();
    let net = Net3d::new(&cfg, true, true, &mut store, rng)?;
    // Unit-variance pre-activations keep every gradient well above the
    // finite-difference noise floor.
    for t in store.tensors_mut() {
        let fan_in = (t.numel() / t.shape()[0]).max(1) as f64;
        let s = if t.shape().len() == 1 { 0.5 } else { 1.7 / fan_in.sqrt() };
        *t = Tensor::from_fn(t.shape(), |_| s * rng.gen_range(-1.0..1.0));
    }
    let grid = GridSpec {
        dims: [12, 9, 12],
        voxel_size: 1.0,
        origin: [0.0; 3],
    };
    let (w, h) = (10, 8);
    let targets: Vec<Option<usize>> = (0..w * h)
        .map(|_| rng.gen_bool(0.9).then(|| rng.gen_range(0..grid.len())))
        .collect();
    let plan = ProjectionMap::from_pixel_targets(w, h, grid.clone(), targets).scatter_plan()?;
    let mut gt = VoxelGrid::empty(grid);
    for l in gt.labels.iter_mut() {
        *l = rng.gen_range(0..=cfg.num_categories as u8);
    }
    gt.visibility = (0..gt.labels.len())
        .map(|_| match rng.gen_range(0..40) {
            0 => Visibility::Occluded,
            1 => Visibility::VisibleSurface,
            _ => Visibility::Free,
        })
        .collect();
    let mask = EvalMask::from_visibility(&gt.visibility, false);
    let enc = one_hot_roi_encode(&gt.labels, gt.spec.dims, cfg.num_categories)?;
    let feats = rand_tensor(&[cfg.input_channels, h, w], rng);
    let n = store.len();
    Ok(Case {
        params: with_inputs(&store, &[feats]),
        samples: 4,
        epsilon: COMPOSITE_EPSILON,
        f: Box::new(move |g, v| {
            let p = Bound::from_vars(v[..n].to_vec());
            let vol = g.scatter(v[n], plan.clone())?;
            let e = g.constant(enc.clone());
            let out = net.forward(g, &p, vol, Some(e))?;
            let probs = if fault {
                g.custom(&[out.probs], Arc::new(WrongBackward))?
            } else {
                out.probs
            };
            masked_cross_entropy(g, probs, &gt, &mask)
        }),
    })
}

/// Checks one block with inputs drawn from `seed`.
pub fn check_block(block: &'static str, seed: u64, fault: bool) -> Result<BlockResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = case(block, fault, &mut rng)?;
    let opts = GradCheckOptions {
        samples_per_param: c.samples,
        epsilon: c.epsilon,
        seed,
        ..GradCheckOptions::default()
    };
    let report = grad_check(&c.f, &c.params, &opts).map_err(|e| match e {
        Error::Numerical(m) => Error::Numerical(format!("{block}: {m}")),
        e => e,
    })?;
    Ok(BlockResult { block, report })
}

/// Every block in [`BLOCKS`]; `fault` names a block whose gradient is
/// deliberately corrupted.
pub fn run_suite(seed: u64, fault: Option<&str>, mut on_block: impl FnMut(&BlockResult)) -> Result<Vec<BlockResult>> {
    if let Some(f) = fault {
        if !BLOCKS.contains(&f) {
            return Err(Error::contract(format!("unknown gradient-check block {f:?}")));
        }
    }
    let mut out = Vec::new();
    for b in BLOCKS {
        let r = check_block(b, seed, fault == Some(b))?;
        on_block(&r);
        out.push(r);
    }
    Ok(out)
}
