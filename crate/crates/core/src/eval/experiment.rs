//! Two-phase training (image network alone, then end to end) and test-set
//! evaluation for one ablation configuration.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ablation::{AblationConfig, AblationLabel, GuidanceSource};
use super::metrics::{sc_counts, ssc_counts, Counts, EvalMask, MetricsReport};
use crate::error::{ensure, Error, Result};
use crate::geometry::{
    compute_projection_map, hha_encode, project_labels, HhaRanges, ProjectionMap, SceneSample, VoxelGrid,
};
use crate::net2d::{argmax_channels, Seg2dConfig, Seg2dNet, Seg2dVars};
use crate::net3d::{one_hot_roi_encode, Net3d, Net3dConfig, Net3dVars};
use crate::tensor::{sgd_step, Bound, Graph, OptimizerState, ParamStore, ScatterPlan, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub net2d: Seg2dConfig,
    pub net3d: Net3dConfig,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            net2d: Seg2dConfig::default(),
            net3d: Net3dConfig::default(),
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        self.net2d.validate()?;
        self.net3d.validate()?;
        ensure!(
            self.net2d.feature_channels == self.net3d.input_channels,
            "net2d.feature_channels {} must equal net3d.input_channels {}",
            self.net2d.feature_channels,
            self.net3d.input_channels
        );
        ensure!(
            self.net2d.num_categories == self.net3d.num_categories,
            "net2d and net3d disagree on num_categories ({} vs {})",
            self.net2d.num_categories,
            self.net3d.num_categories
        );
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    /// Image-network steps before end-to-end training.
    pub pretrain_steps: usize,
    /// End-to-end steps.
    pub steps: usize,
    pub lr_2d: f64,
    pub lr_3d: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Adds free voxels to the loss region as empty-class targets.
    pub include_free_in_loss: bool,
    pub train_fraction: f64,
    /// Learning-rate schedule within each phase.
    pub lr_decay: LrDecay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrDecay {
    #[default]
    Constant,
    /// Falls linearly from the base rate to `base / steps` at the last step.
    Linear,
}

impl LrDecay {
    /// Multiplier of the base rate at 1-based `step` of `steps`.
    pub fn factor(self, step: usize, steps: usize) -> f64 {
        match self {
            LrDecay::Constant => 1.0,
            LrDecay::Linear => (steps + 1 - step.min(steps)) as f64 / steps.max(1) as f64,
        }
    }
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            pretrain_steps: 2000,
            steps: 500,
            lr_2d: 0.001,
            lr_3d: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            include_free_in_loss: false,
            train_fraction: 0.8,
            lr_decay: LrDecay::Constant,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.train_fraction > 0.0 && self.train_fraction < 1.0,
            "train_fraction {} must lie in (0, 1)",
            self.train_fraction
        );
        OptimizerState::new(self.lr_2d, self.momentum, self.weight_decay)?;
        OptimizerState::new(self.lr_3d, self.momentum, self.weight_decay)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    EndToEnd,
}

/// Per-step losses of both phases, step 1 first.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub pretrain: Vec<f64>,
    pub end_to_end: Vec<f64>,
}

/// 64-bit seed for an independent stream named `tag`.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Train and test indices. Scenes are ordered by the SHA-256 of their id and
/// the first `round(fraction * n)` train; each side keeps at least one scene
/// when `n >= 2`.
pub fn split_scenes(ids: &[&str], train_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<(Vec<u8>, usize)> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| (Sha256::digest(id.as_bytes()).to_vec(), i))
        .collect();
    order.sort();
    let n = ids.len();
    let mut k = (train_fraction * n as f64).round() as usize;
    if n >= 2 {
        k = k.clamp(1, n - 1);
    }
    let mut train: Vec<usize> = order[..k].iter().map(|o| o.1).collect();
    let mut test: Vec<usize> = order[k..].iter().map(|o| o.1).collect();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Network inputs and targets derived once per scene.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub scene_id: String,
    pub rgb: Tensor,
    pub hha: Tensor,
    pub map: ProjectionMap,
    pub plan: Arc<ScatterPlan>,
    pub seg2d_gt: Vec<u8>,
    /// Pixels with valid depth.
    pub pixel_mask: Vec<bool>,
    pub grid_gt: VoxelGrid,
    pub mask: EvalMask,
    /// Box encoding of the projected ground-truth segmentation.
    pub gt_encoding: Tensor,
}

impl PreparedScene {
    pub fn new(scene: &SceneSample, include_free_in_loss: bool) -> Result<Self> {
        let n = scene.num_categories();
        let hha = hha_encode(
            &scene.depth,
            &scene.camera,
            &HhaRanges {
                min_range: scene.min_range,
                max_range: scene.max_range,
                room_height: scene.room_height(),
            },
        )?;
        let map = compute_projection_map(&scene.depth, &scene.camera, &scene.grid_gt.spec)?;
        let plan = map.scatter_plan()?;
        let gt_sem = project_labels(&scene.seg2d_gt, &map)?;
        let gt_encoding = one_hot_roi_encode(&gt_sem, scene.grid_gt.spec.dims, n)?;
        let pixel_mask = scene.depth.values.iter().map(|&d| d > 0.0).collect();
        Ok(Self {
            scene_id: scene.scene_id.clone(),
            rgb: scene.rgb.clone(),
            hha: hha.channels,
            map,
            plan,
            seg2d_gt: scene.seg2d_gt.clone(),
            pixel_mask,
            grid_gt: scene.grid_gt.clone(),
            mask: EvalMask::from_visibility(&scene.grid_gt.visibility, include_free_in_loss),
            gt_encoding,
        })
    }
}

/// Both networks with their parameter stores.
#[derive(Debug, Clone)]
pub struct Model {
    pub network: NetworkConfig,
    pub ablation: AblationConfig,
    pub net2d: Seg2dNet,
    pub net3d: Net3d,
    pub store2d: ParamStore,
    pub store3d: ParamStore,
}

pub struct ForwardVars {
    pub seg: Seg2dVars,
    pub volume: Net3dVars,
}

impl Model {
    /// Initial parameters depend only on `seed` and the wiring, so configurations
    /// sharing a seed start the image network from identical weights.
    pub fn new(network: &NetworkConfig, ablation: &AblationConfig, seed: u64) -> Result<Self> {
        network.validate()?;
        ablation.validate()?;
        let mut store2d = ParamStore::new();
        let net2d = Seg2dNet::new(
            &network.net2d,
            &mut store2d,
            &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "init/net2d")),
        )?;
        let mut store3d = ParamStore::new();
        let net3d = Net3d::new(
            &network.net3d,
            ablation.attention,
            ablation.guidance,
            &mut store3d,
            &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "init/net3d")),
        )?;
        Ok(Self {
            network: network.clone(),
            ablation: *ablation,
            net2d,
            net3d,
            store2d,
            store3d,
        })
    }

    /// All parameters in one store, image network first.
    pub fn params(&self) -> ParamStore {
        let mut out = self.store2d.clone();
        for (name, t) in self.store3d.iter() {
            out.add(name, t.clone()).expect("prefixes are disjoint");
        }
        out
    }

    /// Loads a store produced by [`params`](Self::params); any name or shape
    /// difference is an error listing each one.
    pub fn load_params(&mut self, all: &ParamStore) -> Result<()> {
        let mut expected = self.params();
        expected.load_from(all)?;
        self.store2d.load_from(&all.subset("net2d/"))?;
        self.store3d.load_from(&all.subset("net3d/"))
    }

    /// Guidance input for `scene`, or `None` without a guidance branch.
    /// Predicted labels are taken from the current logits and treated as a
    /// constant.
    fn encoding(&self, g: &Graph, seg: &Seg2dVars, scene: &PreparedScene, source: GuidanceSource) -> Result<Option<Tensor>> {
        if self.net3d.guidance.is_none() {
            return Ok(None);
        }
        match source {
            GuidanceSource::GroundTruth => Ok(Some(scene.gt_encoding.clone())),
            GuidanceSource::Predicted => {
                let labels = argmax_channels(g.value(seg.logits));
                let sem = project_labels(&labels, &scene.map)?;
                one_hot_roi_encode(&sem, scene.grid_gt.spec.dims, self.network.net3d.num_categories).map(Some)
            }
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p2: &Bound,
        p3: &Bound,
        scene: &PreparedScene,
        source: GuidanceSource,
    ) -> Result<ForwardVars> {
        let rgb = g.constant(scene.rgb.clone());
        let hha = g.constant(scene.hha.clone());
        let seg = self.net2d.forward(g, p2, rgb, hha)?;
        let volume_in = g.scatter(seg.features, scene.plan.clone())?;
        let encoded = match self.encoding(g, &seg, scene, source)? {
            Some(t) => Some(g.constant(t)),
            None => None,
        };
        let volume = self.net3d.forward(g, p3, volume_in, encoded)?;
        Ok(ForwardVars { seg, volume })
    }

    /// Per-voxel argmax labels with frozen parameters.
    pub fn predict(&self, scene: &PreparedScene, source: GuidanceSource) -> Result<VoxelGrid> {
        let mut g = Graph::new();
        let p2 = self.store2d.bind_frozen(&mut g);
        let p3 = self.store3d.bind_frozen(&mut g);
        let out = self.forward(&mut g, &p2, &p3, scene, source)?;
        let mut grid = scene.grid_gt.clone();
        grid.labels = argmax_channels(g.value(out.volume.probs));
        Ok(grid)
    }
}

fn check_loss(loss: f64, phase: Phase, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        let name = match phase {
            Phase::Pretrain => "pre-training",
            Phase::EndToEnd => "end-to-end training",
        };
        Err(Error::Numerical(format!("{name} loss is {loss} at step {step}")))
    }
}

/// Scene indices for `steps` steps: reshuffled passes over `0..n`.
fn visit_order(n: usize, steps: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(steps);
    while out.len() < steps && n > 0 {
        let mut pass: Vec<usize> = (0..n).collect();
        pass.shuffle(&mut rng);
        out.extend(pass);
    }
    out.truncate(steps);
    out
}

/// Pixel cross-entropy on the image network alone.
pub fn pretrain(
    model: &mut Model,
    train: &[PreparedScene],
    schedule: &TrainSchedule,
    seed: u64,
    on_step: &mut dyn FnMut(Phase, usize, f64),
) -> Result<Vec<f64>> {
    ensure!(!train.is_empty() || schedule.pretrain_steps == 0, "no training scenes");
    let mut opt = OptimizerState::new(schedule.lr_2d, schedule.momentum, schedule.weight_decay)?;
    let mut losses = Vec::with_capacity(schedule.pretrain_steps);
    for (i, s) in visit_order(train.len(), schedule.pretrain_steps, derive_seed(seed, "order/pretrain"))
        .into_iter()
        .enumerate()
    {
        let scene = &train[s];
        let mut g = Graph::new();
        let p = model.store2d.bind(&mut g);
        let rgb = g.constant(scene.rgb.clone());
        let hha = g.constant(scene.hha.clone());
        let out = model.net2d.forward(&mut g, &p, rgb, hha)?;
        let probs = g.softmax(out.logits);
        let loss = g.masked_cross_entropy(probs, &scene.seg2d_gt, &scene.pixel_mask)?;
        let l = g.value(loss).data()[0];
        check_loss(l, Phase::Pretrain, i + 1)?;
        g.backward(loss)?;
        model.store2d.pull_grads(&g, &p)?;
        opt.learning_rate = schedule.lr_2d * schedule.lr_decay.factor(i + 1, schedule.pretrain_steps);
        sgd_step(model.store2d.tensors_mut(), &mut opt)?;
        on_step(Phase::Pretrain, i + 1, l);
        losses.push(l);
    }
    Ok(losses)
}

/// Voxel cross-entropy over the loss region, updating both networks with
/// their own learning rates.
pub fn train_end_to_end(
    model: &mut Model,
    train: &[PreparedScene],
    schedule: &TrainSchedule,
    seed: u64,
    on_step: &mut dyn FnMut(Phase, usize, f64),
) -> Result<Vec<f64>> {
    ensure!(!train.is_empty() || schedule.steps == 0, "no training scenes");
    let mut opt2 = OptimizerState::new(schedule.lr_2d, schedule.momentum, schedule.weight_decay)?;
    let mut opt3 = OptimizerState::new(schedule.lr_3d, schedule.momentum, schedule.weight_decay)?;
    let mut losses = Vec::with_capacity(schedule.steps);
    for (i, s) in visit_order(train.len(), schedule.steps, derive_seed(seed, "order/end-to-end"))
        .into_iter()
        .enumerate()
    {
        let scene = &train[s];
        let mut g = Graph::new();
        let p2 = model.store2d.bind(&mut g);
        let p3 = model.store3d.bind(&mut g);
        let out = model.forward(&mut g, &p2, &p3, scene, GuidanceSource::Predicted)?;
        let loss = masked_cross_entropy(&mut g, out.volume.probs, &scene.grid_gt, &scene.mask)?;
        let l = g.value(loss).data()[0];
        check_loss(l, Phase::EndToEnd, i + 1)?;
        g.backward(loss)?;
        model.store2d.pull_grads(&g, &p2)?;
        model.store3d.pull_grads(&g, &p3)?;
        let f = schedule.lr_decay.factor(i + 1, schedule.steps);
        opt2.learning_rate = schedule.lr_2d * f;
        opt3.learning_rate = schedule.lr_3d * f;
        sgd_step(model.store2d.tensors_mut(), &mut opt2)?;
        sgd_step(model.store3d.tensors_mut(), &mut opt3)?;
        on_step(Phase::EndToEnd, i + 1, l);
        losses.push(l);
    }
    Ok(losses)
}

/// Mean `-ln p(gt)` over the loss region of `mask`.
pub fn masked_cross_entropy(g: &mut Graph, probs: Var, gt: &VoxelGrid, mask: &EvalMask) -> Result<Var> {
    ensure!(
        g.value(probs).spatial() == gt.spec.dims,
        "probabilities {:?} do not match grid dims {:?}",
        g.value(probs).shape(),
        gt.spec.dims
    );
    g.masked_cross_entropy(probs, &gt.labels, &mask.loss)
}

/// Counts summed over `test` in order, then turned into ratios.
pub fn evaluate(model: &Model, test: &[PreparedScene], source: GuidanceSource, label: &str) -> Result<MetricsReport> {
    let n = model.network.net3d.num_categories;
    let mut sc = Counts::default();
    let mut ssc = vec![Counts::default(); n];
    for scene in test {
        let pred = model.predict(scene, source)?;
        sc.add(sc_counts(&pred, &scene.grid_gt, &scene.mask)?);
        for (acc, c) in ssc.iter_mut().zip(ssc_counts(&pred, &scene.grid_gt, &scene.mask, n)?) {
            acc.add(c);
        }
    }
    let names = crate::geometry::CATEGORIES.iter().take(n + 1).map(|s| s.to_string()).collect::<Vec<_>>();
    Ok(MetricsReport::from_counts(label, &names, sc, ssc, test.len()))
}

/// Dataset split into prepared train and test scenes.
pub fn prepare_split(dataset: &[SceneSample], schedule: &TrainSchedule) -> Result<(Vec<PreparedScene>, Vec<PreparedScene>)> {
    ensure!(dataset.len() >= 2, "need at least two scenes to split, got {}", dataset.len());
    let ids: Vec<&str> = dataset.iter().map(|s| s.scene_id.as_str()).collect();
    let (tr, te) = split_scenes(&ids, schedule.train_fraction);
    let prep = |idx: Vec<usize>| {
        idx.into_iter()
            .map(|i| PreparedScene::new(&dataset[i], schedule.include_free_in_loss))
            .collect::<Result<Vec<_>>>()
    };
    Ok((prep(tr)?, prep(te)?))
}

pub struct ExperimentOutcome {
    pub report: MetricsReport,
    pub model: Model,
    pub log: TrainLog,
}

/// Pre-training then end-to-end training on `train`.
pub fn train_model(
    train: &[PreparedScene],
    network: &NetworkConfig,
    ablation: &AblationConfig,
    schedule: &TrainSchedule,
    seed: u64,
    on_step: &mut dyn FnMut(Phase, usize, f64),
) -> Result<(Model, TrainLog)> {
    schedule.validate()?;
    let mut model = Model::new(network, ablation, seed)?;
    let pre = pretrain(&mut model, train, schedule, seed, on_step)?;
    let e2e = train_end_to_end(&mut model, train, schedule, seed, on_step)?;
    Ok((
        model,
        TrainLog {
            pretrain: pre,
            end_to_end: e2e,
        },
    ))
}

/// Pre-training, end-to-end training and evaluation of one configuration.
/// Ground-truth guidance only replaces the guidance input at evaluation.
pub fn run_experiment(
    dataset: &[SceneSample],
    network: &NetworkConfig,
    ablation: &AblationConfig,
    schedule: &TrainSchedule,
    seed: u64,
    on_step: &mut dyn FnMut(Phase, usize, f64),
) -> Result<ExperimentOutcome> {
    schedule.validate()?;
    let (train, test) = prepare_split(dataset, schedule)?;
    let (model, log) = train_model(&train, network, ablation, schedule, seed, on_step)?;
    let report = evaluate(&model, &test, ablation.guidance_source, ablation.label.row_name())?;
    Ok(ExperimentOutcome { report, model, log })
}

pub struct AblationRow {
    pub label: AblationLabel,
    pub report: MetricsReport,
    pub log: TrainLog,
}

/// Every configuration with a shared seed. The image-network pre-training is
/// run once and shared; the ground-truth-guidance row evaluates the full
/// model.
pub fn run_ablation(
    dataset: &[SceneSample],
    network: &NetworkConfig,
    labels: &[AblationLabel],
    schedule: &TrainSchedule,
    seed: u64,
    on_step: &mut dyn FnMut(AblationLabel, Phase, usize, f64),
) -> Result<Vec<AblationRow>> {
    schedule.validate()?;
    let (train, test) = prepare_split(dataset, schedule)?;
    let mut base = Model::new(network, &AblationConfig::default(), seed)?;
    let pre = pretrain(&mut base, &train, schedule, seed, &mut |p, s, l| on_step(AblationLabel::Full, p, s, l))?;
    let mut trained: Vec<(AblationLabel, Model, Vec<f64>)> = Vec::new();
    let mut rows = Vec::new();
    for &label in labels {
        let ablation = AblationConfig::preset(label);
        let train_label = ablation.training_label();
        if !trained.iter().any(|t| t.0 == train_label) {
            let mut model = Model::new(network, &AblationConfig::preset(train_label), seed)?;
            model.store2d = base.store2d.clone();
            let e2e = train_end_to_end(&mut model, &train, schedule, seed, &mut |p, s, l| {
                on_step(train_label, p, s, l)
            })?;
            trained.push((train_label, model, e2e));
        }
        let (_, model, e2e) = trained.iter().find(|t| t.0 == train_label).expect("trained above");
        let report = evaluate(model, &test, ablation.guidance_source, label.row_name())?;
        rows.push(AblationRow {
            label,
            report,
            log: TrainLog {
                pretrain: pre.clone(),
                end_to_end: e2e.clone(),
            },
        });
    }
    Ok(rows)
}

/// Header plus one row per report.
pub fn ablation_table(rows: &[MetricsReport]) -> String {
    let Some(first) = rows.first() else {
        return String::new();
    };
    let mut s = MetricsReport::table_header(&first.categories[1..]);
    for r in rows {
        s.push('\n');
        s.push_str(&r.table_row());
    }
    s.push('\n');
    s
}
