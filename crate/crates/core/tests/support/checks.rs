//! Randomized equivalence and identity checks. Each returns a one-line
//! summary on success and the first discrepancy on failure.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssc_core::eval::{
    sc_counts, ssc_counts, AblationConfig, AblationLabel, GuidanceSource, Model, NetworkConfig, PreparedScene,
    EvalMask,
};
use ssc_core::geometry::{
    backproject_gradients, compute_projection_map, generate_scene, project_2d_to_3d, project_labels, GridSpec,
    ProjectionMap, SceneConfig, Visibility, VoxelGrid,
};
use ssc_core::net3d::{
    channel_attention, fuse_and_classify, one_hot_roi_encode, spatial_attention, AttentionParams, Rab,
    ATTENTION_SCOPE, GUIDANCE_SCOPE,
};
use ssc_core::tensor::conv::conv_forward;
use ssc_core::tensor::{ddr_conv3d, ConvSpec, Graph, OpKind, ParamStore, PoolAxes, PoolKind, ScatterPlan, Tensor};

use super::oracles;

pub type Check = Result<String, String>;

pub const INSTANCES: usize = 120;
pub const NUMERIC_TOL: f64 = 1e-9;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn within(what: &str, i: usize, err: f64, tol: f64) -> Result<(), String> {
    if err <= tol {
        Ok(())
    } else {
        Err(format!("{what}: instance {i} differs by {err:.3e} (tolerance {tol:e})"))
    }
}

/// Random convolution geometry, including dilated spans wider than the input
/// that only fit thanks to padding.
pub fn random_conv_case(rng: &mut impl Rng) -> (Tensor, Tensor, Option<Tensor>, ConvSpec) {
    let r = rng.gen_range(1..=3);
    let cin = rng.gen_range(1..=3);
    let cout = rng.gen_range(1..=3);
    let pick = |rng: &mut dyn rand::RngCore, lo: usize, hi: usize| -> Vec<usize> {
        (0..r).map(|_| rng.gen_range(lo..=hi)).collect()
    };
    let extents = pick(rng, 1, 6);
    let spec = ConvSpec::new(cin, cout, &pick(rng, 1, 3))
        .with_stride(&pick(rng, 1, 2))
        .with_dilation(&pick(rng, 1, 4))
        .with_padding(&pick(rng, 0, 4));
    let mut shape = vec![cin];
    shape.extend(&extents);
    let x = random_tensor(&shape, rng);
    let w = random_tensor(&spec.weight_shape(), rng);
    let b = rng.gen_bool(0.5).then(|| random_tensor(&[cout], rng));
    (x, w, b, spec)
}

pub fn convolution(seed: u64) -> Check {
    let mut rng = rng(seed);
    let (mut compared, mut rejected, mut wide) = (0, 0, 0);
    let mut i = 0;
    while compared < INSTANCES {
        let (x, w, b, spec) = random_conv_case(&mut rng);
        let expect = oracles::conv(&x, &w, b.as_ref(), &spec);
        let got = conv_forward(&x, &w, b.as_ref(), &spec);
        match (expect, got) {
            (None, Err(_)) => rejected += 1,
            (None, Ok(_)) => return Err(format!("convolution: instance {i} accepted an impossible geometry {spec:?}")),
            (Some(_), Err(e)) => return Err(format!("convolution: instance {i} rejected {spec:?}: {e}")),
            (Some(e), Ok(y)) => {
                if e.shape() != y.shape() {
                    return Err(format!("convolution: instance {i} shape {:?} vs {:?}", y.shape(), e.shape()));
                }
                within("convolution", i, y.max_abs_diff(&e), NUMERIC_TOL)?;
                compared += 1;
                let span_exceeds = (0..spec.rank())
                    .any(|a| spec.dilation[a] * (spec.kernel[a] - 1) + 1 > x.spatial()[a]);
                wide += span_exceeds as usize;
            }
        }
        i += 1;
    }
    Ok(format!(
        "{compared} instances match ({wide} with dilated span wider than the input), {rejected} invalid geometries rejected"
    ))
}

pub fn pooling(seed: u64) -> Check {
    let mut rng = rng(seed);
    for i in 0..INSTANCES {
        let r = rng.gen_range(1..=3);
        let mut shape = vec![rng.gen_range(1..=4)];
        shape.extend((0..r).map(|_| rng.gen_range(1..=5)));
        let mut x = random_tensor(&shape, &mut rng);
        if i % 3 == 0 {
            // ties
            for v in x.data_mut() {
                *v = (*v * 2.0).round() / 2.0;
            }
        }
        for kind in [PoolKind::Avg, PoolKind::Max] {
            for axes in [PoolAxes::Spatial, PoolAxes::Channel] {
                let mut g = Graph::new();
                let xv = g.constant(x.clone());
                let y = g.pool(xv, kind, axes).map_err(|e| e.to_string())?;
                let e = oracles::pool(&x, kind, axes);
                if g.value(y).shape() != e.shape() {
                    return Err(format!("pooling {kind:?}/{axes:?}: instance {i} shape mismatch"));
                }
                within(&format!("pooling {kind:?}/{axes:?}"), i, g.value(y).max_abs_diff(&e), NUMERIC_TOL)?;
            }
        }
    }
    Ok(format!("{INSTANCES} instances x 4 reductions match"))
}

pub fn random_labels(n: usize, num_categories: usize, density: f64, rng: &mut impl Rng) -> Vec<u8> {
    (0..n)
        .map(|_| if rng.gen_bool(density) { rng.gen_range(1..=num_categories as u8) } else { 0 })
        .collect()
}

pub fn roi_boxes(seed: u64) -> Check {
    let mut rng = rng(seed);
    for i in 0..INSTANCES {
        let dims = [rng.gen_range(1..=6), rng.gen_range(1..=6), rng.gen_range(1..=6)];
        let n: usize = dims.iter().product();
        let k = rng.gen_range(1..=5);
        let labels = random_labels(n, k, rng.gen_range(0.0..0.3), &mut rng);
        let got = one_hot_roi_encode(&labels, dims, k).map_err(|e| e.to_string())?;
        if got.data() != oracles::roi(&labels, dims, k).as_slice() {
            return Err(format!("one-hot boxes: instance {i} differs"));
        }
    }
    Ok(format!("{INSTANCES} label volumes encode exactly"))
}

fn random_targets(src: usize, dst: usize, rng: &mut impl Rng) -> Vec<Option<usize>> {
    (0..src).map(|_| rng.gen_bool(0.7).then(|| rng.gen_range(0..dst))).collect()
}

pub fn scatter_gather(seed: u64) -> Check {
    let mut rng = rng(seed);
    for i in 0..INSTANCES {
        let c = rng.gen_range(1..=3);
        let src = rng.gen_range(1..=30);
        let dst_spatial = vec![rng.gen_range(1..=4), rng.gen_range(1..=3), rng.gen_range(1..=4)];
        let dst: usize = dst_spatial.iter().product();
        let targets = random_targets(src, dst, &mut rng);
        let plan = Arc::new(ScatterPlan::averaging(dst_spatial, targets.clone()).map_err(|e| e.to_string())?);
        let x = random_tensor(&[c, src], &mut rng);
        let y = random_tensor(&[c, dst], &mut rng);
        let fwd = plan.apply(&x).map_err(|e| e.to_string())?;
        within("scatter", i, max_diff(fwd.data(), &oracles::scatter_mean(x.data(), c, &targets, dst)), NUMERIC_TOL)?;
        let back = plan.adjoint(y.data(), c).map_err(|e| e.to_string())?;
        let expect = oracles::gather_mean(y.data(), c, &targets, dst);
        within("gather", i, max_diff(&back, &expect), NUMERIC_TOL)?;
        // the tape's backward rule is the same gather
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let s = g.scatter(xv, plan.clone()).map_err(|e| e.to_string())?;
        let l = g.weighted_sum(s, &y).map_err(|e| e.to_string())?;
        g.backward(l).map_err(|e| e.to_string())?;
        within("scatter backward", i, max_diff(g.grad(xv).unwrap_or(&[]), &expect), NUMERIC_TOL)?;
    }
    Ok(format!("{INSTANCES} maps: scatter, gather and tape gradient match"))
}

pub fn random_grid(dims: [usize; 3], k: usize, rng: &mut impl Rng) -> VoxelGrid {
    let spec = GridSpec {
        dims,
        voxel_size: 0.2,
        origin: [0.0; 3],
    };
    let mut g = VoxelGrid::empty(spec);
    g.labels = random_labels(spec.len(), k, 0.6, rng);
    g.visibility = (0..spec.len())
        .map(|_| Visibility::from_u8(rng.gen_range(0..4)).expect("four classes"))
        .collect();
    g
}

fn triple(c: &ssc_core::eval::Counts) -> (u64, u64, u64) {
    (c.tp, c.fp, c.fn_)
}

pub fn metrics(seed: u64) -> Check {
    let mut rng = rng(seed);
    for i in 0..INSTANCES {
        let dims = [rng.gen_range(1..=5), rng.gen_range(1..=5), rng.gen_range(1..=5)];
        let k = rng.gen_range(1..=6);
        let gt = random_grid(dims, k, &mut rng);
        let mut pred = gt.clone();
        pred.labels = random_labels(gt.labels.len(), k, 0.5, &mut rng);
        let mask = EvalMask::from_visibility(&gt.visibility, false);
        let sc = sc_counts(&pred, &gt, &mask).map_err(|e| e.to_string())?;
        if triple(&sc) != oracles::sc_counts(&pred.labels, &gt.labels, &mask.sc) {
            return Err(format!("SC counts: instance {i} differs"));
        }
        let ssc = ssc_counts(&pred, &gt, &mask, k).map_err(|e| e.to_string())?;
        let got: Vec<_> = ssc.iter().map(triple).collect();
        if got != oracles::ssc_counts(&pred.labels, &gt.labels, &mask.ssc, k) {
            return Err(format!("SSC counts: instance {i} differs"));
        }
        for (c, counts) in ssc.iter().enumerate() {
            let (tp, fp, fn_) = triple(counts);
            let expect = (tp + fp + fn_ > 0).then(|| tp as f64 / (tp + fp + fn_) as f64);
            if counts.iou() != expect {
                return Err(format!("IoU: instance {i} class {} differs", c + 1));
            }
        }
    }
    Ok(format!("{INSTANCES} volumes: SC and per-class counts exact"))
}

pub fn cross_entropy(seed: u64) -> Check {
    let mut rng = rng(seed);
    for i in 0..INSTANCES {
        let k = rng.gen_range(2..=6);
        let s = rng.gen_range(1..=40);
        let logits = Tensor::from_fn(&[k, s], |_| rng.gen_range(-4.0..4.0));
        let labels: Vec<u8> = (0..s).map(|_| rng.gen_range(0..k as u8)).collect();
        let mut mask: Vec<bool> = (0..s).map(|_| rng.gen_bool(0.6)).collect();
        mask[rng.gen_range(0..s)] = true;
        let mut g = Graph::new();
        let z = g.param(logits.clone());
        let p = g.softmax(z);
        let l = g.masked_cross_entropy(p, &labels, &mask).map_err(|e| e.to_string())?;
        g.backward(l).map_err(|e| e.to_string())?;
        let expect = oracles::cross_entropy_from_logits(logits.data(), k, &labels, &mask);
        within("cross-entropy", i, (g.value(l).data()[0] - expect).abs(), NUMERIC_TOL)?;
        // d/dz = (softmax - onehot) / |mask| at masked positions
        let n = mask.iter().filter(|&&m| m).count() as f64;
        let probs = g.value(p).data();
        let mut grad = vec![0.0; k * s];
        for q in (0..s).filter(|&q| mask[q]) {
            for c in 0..k {
                grad[c * s + q] = (probs[c * s + q] - (labels[q] as usize == c) as u8 as f64) / n;
            }
        }
        within("cross-entropy gradient", i, max_diff(g.grad(z).unwrap_or(&[]), &grad), NUMERIC_TOL)?;
    }
    Ok(format!("{INSTANCES} instances: loss and logit gradient match"))
}

// ---- structural identities ----

fn attention_rab(c: usize, seed: u64) -> (ParamStore, Rab) {
    let mut store = ParamStore::new();
    let rab = Rab::new(&mut store, "rab", c, true, &mut rng(seed)).expect("valid block");
    (store, rab)
}

fn randomize(store: &mut ParamStore, rng: &mut impl Rng) {
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.gen_range(-0.8..0.8);
        }
    }
}

pub fn residual_identity(seed: u64) -> Check {
    let mut r = rng(seed);
    let trials = 20;
    for i in 0..trials {
        let c = r.gen_range(1..=5);
        let dims = [r.gen_range(1..=5), r.gen_range(1..=5), r.gen_range(1..=5)];
        let (mut store, rab) = attention_rab(c, r.gen());
        randomize(&mut store, &mut r);
        store.get_mut(rab.ddr[2].w).data_mut().fill(0.0);
        for l in &rab.ddr {
            store.get_mut(l.b.expect("DDR stages carry biases")).data_mut().fill(0.0);
        }
        let x = random_tensor(&[c, dims[0], dims[1], dims[2]], &mut r);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let y = rab.forward(&mut g, &p, xv).map_err(|e| e.to_string())?;
        if g.value(y) != &x {
            return Err(format!("residual identity: trial {i} output differs from the input"));
        }
        // shortcut additivity with unconstrained parameters
        randomize(&mut store, &mut r);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let y = rab.forward(&mut g, &p, xv).map_err(|e| e.to_string())?;
        let mut g2 = Graph::new();
        let p2 = store.bind_frozen(&mut g2);
        let xv2 = g2.constant(x.clone());
        let branch = rab.branch(&mut g2, &p2, xv2).map_err(|e| e.to_string())?;
        let diff: Vec<f64> = g.value(y).data().iter().zip(x.data()).map(|(a, b)| a - b).collect();
        within("shortcut additivity", i, max_diff(&diff, g2.value(branch).data()), 1e-12)?;
    }
    Ok(format!("{trials} blocks: zero branch gives y = x exactly, y - x equals the branch"))
}

pub fn softmax_normalization(seed: u64) -> Check {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let k = r.gen_range(2..=12);
        let s = r.gen_range(1..=30);
        // beyond a spread of about 37 the largest entry rounds to exactly 1,
        // so the open-interval bound is only checked on the first two scales
        let scale = [1.0, 10.0, 30.0][i % 3];
        let x = Tensor::from_fn(&[k, s], |_| r.gen_range(-scale..scale));
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = g.softmax(xv);
        let d = g.value(y).data();
        for q in 0..s {
            let sum: f64 = (0..k).map(|c| d[c * s + q]).sum();
            worst = worst.max((sum - 1.0).abs());
            if scale < 30.0 && (0..k).any(|c| !(d[c * s + q] > 0.0 && d[c * s + q] < 1.0)) {
                return Err(format!("softmax: instance {i} position {q} has an entry outside (0,1)"));
            }
        }
        within("softmax sum", i, worst, 1e-12)?;
    }
    Ok(format!("{INSTANCES} instances: max |sum - 1| = {worst:.1e}"))
}

pub fn attention_bounds(seed: u64) -> Check {
    let mut r = rng(seed);
    let trials = 40;
    for i in 0..trials {
        let c = r.gen_range(1..=6);
        let dims = [r.gen_range(1..=5), r.gen_range(1..=5), r.gen_range(1..=5)];
        let mut store = ParamStore::new();
        let a = AttentionParams::new(&mut store, "attn", c, &mut rng(r.gen())).map_err(|e| e.to_string())?;
        randomize(&mut store, &mut r);
        let x = Tensor::from_fn(&[c, dims[0], dims[1], dims[2]], |_| r.gen_range(-3.0..3.0));
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let xv = g.constant(x);
        let cw = channel_attention(&mut g, &p, &a, xv).map_err(|e| e.to_string())?;
        let sw = spatial_attention(&mut g, &p, &a, xv).map_err(|e| e.to_string())?;
        for (name, v) in [("channel", cw), ("spatial", sw)] {
            if g.value(v).data().iter().any(|&w| !(w > 0.0 && w < 1.0)) {
                return Err(format!("{name} attention: trial {i} left (0,1)"));
            }
        }
    }
    Ok(format!("{trials} blocks: channel and spatial weights strictly inside (0,1)"))
}

pub fn projection_adjointness(seed: u64) -> Check {
    let mut r = rng(seed);
    let mut maps: Vec<ProjectionMap> = Vec::new();
    let cfg = SceneConfig::default();
    for s in 0..4 {
        let scene = generate_scene(&cfg, seed.wrapping_add(s)).map_err(|e| e.to_string())?;
        maps.push(compute_projection_map(&scene.depth, &scene.camera, &scene.grid_gt.spec).map_err(|e| e.to_string())?);
    }
    for _ in 0..16 {
        let grid = GridSpec {
            dims: [r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(1..=4)],
            voxel_size: 0.1,
            origin: [0.0; 3],
        };
        let (w, h) = (r.gen_range(1..=6), r.gen_range(1..=6));
        let targets = random_targets(w * h, grid.len(), &mut r);
        maps.push(ProjectionMap::from_pixel_targets(w, h, grid, targets));
    }
    let mut worst: f64 = 0.0;
    for (i, map) in maps.iter().enumerate() {
        let c = r.gen_range(1..=3);
        let u = random_tensor(&[c, map.height(), map.width()], &mut r);
        let d = map.grid().dims;
        let v = random_tensor(&[c, d[0], d[1], d[2]], &mut r);
        let labels = vec![0u8; map.width() * map.height()];
        let (pu, _) = project_2d_to_3d(&u, &labels, map).map_err(|e| e.to_string())?;
        let bv = backproject_gradients(&v, map).map_err(|e| e.to_string())?;
        let lhs = pu.data().iter().zip(v.data()).map(|(a, b)| a * b).sum::<f64>();
        let rhs = u.data().iter().zip(bv.data()).map(|(a, b)| a * b).sum::<f64>();
        worst = worst.max((lhs - rhs).abs());
        within("adjointness", i, (lhs - rhs).abs(), NUMERIC_TOL)?;
    }
    Ok(format!("{} maps (4 rendered scenes): max |<Pu,v> - <u,P*v>| = {worst:.1e}", maps.len()))
}

pub fn ddr_separable(seed: u64) -> Check {
    let mut r = rng(seed);
    let trials = 40;
    for i in 0..trials {
        let dims = [r.gen_range(1..=6), r.gen_range(1..=6), r.gen_range(1..=6)];
        let x = random_tensor(&[1, dims[0], dims[1], dims[2]], &mut r);
        let f: Vec<Vec<f64>> = (0..3).map(|_| (0..3).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let w1 = g.constant(Tensor::new(vec![1, 1, 1, 1, 3], f[2].clone()).unwrap());
        let w2 = g.constant(Tensor::new(vec![1, 1, 1, 3, 1], f[1].clone()).unwrap());
        let w3 = g.constant(Tensor::new(vec![1, 1, 3, 1, 1], f[0].clone()).unwrap());
        let y = ddr_conv3d(&mut g, xv, w1, w2, w3).map_err(|e| e.to_string())?;
        let dense = Tensor::from_fn(&[1, 1, 3, 3, 3], |j| f[0][j / 9] * f[1][(j / 3) % 3] * f[2][j % 3]);
        let spec = ConvSpec::new(1, 1, &[3, 3, 3]).same_padding();
        let expect = oracles::conv(&x, &dense, None, &spec).expect("same padding fits");
        within("DDR vs dense", i, g.value(y).max_abs_diff(&expect), NUMERIC_TOL)?;
    }
    Ok(format!("{trials} rank-1 kernels: factorized stages equal the dense 3x3x3 convolution"))
}

// ---- ablation wiring ----

pub fn argmax_labels(t: &Tensor) -> Vec<u8> {
    let (k, s) = (t.channels(), t.spatial_len());
    (0..s)
        .map(|q| {
            let mut best = 0;
            for c in 1..k {
                if t.data()[c * s + q] > t.data()[best * s + q] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Small networks over the default scene geometry.
pub fn small_network() -> NetworkConfig {
    let mut n = NetworkConfig::default();
    n.net2d.stem_channels = 4;
    n.net2d.encoder_blocks = vec![(4, 1), (6, 1)];
    n.net2d.feature_channels = 5;
    n.net3d.input_channels = 5;
    n.net3d.channels = 4;
    n.net3d.guidance_channels = 3;
    n
}

struct Traced {
    attention_ops: usize,
    guidance_ops: usize,
    fuse_products: usize,
}

pub fn ablation_wiring(seed: u64) -> Check {
    let scene = generate_scene(&SceneConfig::default(), seed).map_err(|e| e.to_string())?;
    let prepared = PreparedScene::new(&scene, false).map_err(|e| e.to_string())?;
    let network = small_network();
    let rabs = 4;
    let mut summary = Vec::new();
    for label in AblationLabel::ALL {
        let ab = AblationConfig::preset(label);
        let model = Model::new(&network, &ab, seed).map_err(|e| e.to_string())?;
        let names = model.store3d.names();
        let has_attn = names.iter().any(|n| n.contains("/attn/"));
        let has_guid = names.iter().any(|n| n.contains("guidance"));
        if has_attn != ab.attention || has_guid != ab.guidance {
            return Err(format!("{label}: parameter set does not match the flags"));
        }
        let mut g = Graph::new();
        let p2 = model.store2d.bind_frozen(&mut g);
        let p3 = model.store3d.bind_frozen(&mut g);
        let start = g.trace().len();
        let out = model
            .forward(&mut g, &p2, &p3, &prepared, ab.guidance_source)
            .map_err(|e| e.to_string())?;
        let trace = &g.trace()[start..];
        let t = Traced {
            attention_ops: trace.iter().filter(|e| e.scope.split('/').any(|s| s == ATTENTION_SCOPE)).count(),
            guidance_ops: trace.iter().filter(|e| e.scope.split('/').any(|s| s == GUIDANCE_SCOPE)).count(),
            fuse_products: trace.iter().filter(|e| e.scope.is_empty() && e.kind == OpKind::Mul).count(),
        };
        let sigmoids_in_attention = trace
            .iter()
            .filter(|e| e.scope == ATTENTION_SCOPE && e.kind == OpKind::Sigmoid)
            .count();
        if ab.attention {
            if sigmoids_in_attention != 2 * rabs {
                return Err(format!("{label}: {sigmoids_in_attention} attention gates, expected {}", 2 * rabs));
            }
        } else if t.attention_ops != 0 {
            return Err(format!("{label}: {} attention operations recorded", t.attention_ops));
        }
        if ab.guidance != (t.guidance_ops > 0) || t.fuse_products != ab.guidance as usize {
            return Err(format!(
                "{label}: {} guidance operations and {} fusion products",
                t.guidance_ops, t.fuse_products
            ));
        }

        // reductions
        let vol = out.volume;
        match vol.guidance {
            None => {
                let mut h = Graph::new();
                let s = h.constant(g.value(vol.scores).clone());
                let pr = h.softmax(s);
                if h.value(pr) != g.value(vol.probs) {
                    return Err(format!("{label}: probabilities differ from softmax(completion)"));
                }
            }
            Some(gd) => {
                let expect_enc = match ab.guidance_source {
                    GuidanceSource::GroundTruth => prepared.gt_encoding.clone(),
                    GuidanceSource::Predicted => {
                        let sem = project_labels(&argmax_labels(g.value(out.seg.logits)), &prepared.map)
                            .map_err(|e| e.to_string())?;
                        one_hot_roi_encode(&sem, prepared.grid_gt.spec.dims, network.net3d.num_categories)
                            .map_err(|e| e.to_string())?
                    }
                };
                let mut h = Graph::new();
                let p = model.store3d.bind_frozen(&mut h);
                let e = h.constant(expect_enc);
                let gp = model.net3d.guidance.as_ref().expect("guidance flag set");
                let gv = gp.forward(&mut h, &p, e).map_err(|e| e.to_string())?;
                if h.value(gv) != g.value(gd) {
                    return Err(format!("{label}: guidance does not come from the {:?} segmentation", ab.guidance_source));
                }
                let s = h.constant(g.value(vol.scores).clone());
                let pr = fuse_and_classify(&mut h, s, Some(gv)).map_err(|e| e.to_string())?;
                if h.value(pr) != g.value(vol.probs) {
                    return Err(format!("{label}: probabilities differ from softmax(completion * guidance)"));
                }
            }
        }
        if !ab.attention {
            for (j, rab) in model.net3d.completion.rabs.iter().enumerate() {
                let mut h = Graph::new();
                let p = model.store3d.bind_frozen(&mut h);
                let d = prepared.grid_gt.spec.dims;
                let x = h.constant(random_tensor(&[rab.channels, d[0], d[1], d[2]], &mut rng(seed + j as u64)));
                let y = rab.forward(&mut h, &p, x).map_err(|e| e.to_string())?;
                let dx = rab.ddr_forward(&mut h, &p, x).map_err(|e| e.to_string())?;
                let sum = h.add(dx, x).map_err(|e| e.to_string())?;
                if h.value(y) != h.value(sum) {
                    return Err(format!("{label}: block {} is not DDR + shortcut", j + 1));
                }
            }
        }
        summary.push(format!(
            "{label}: attention {} ops, guidance {} ops",
            t.attention_ops, t.guidance_ops
        ));
    }
    Ok(summary.join("; "))
}
