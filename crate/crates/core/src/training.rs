//! Optimisation: initialization, Adam, the step schedule, the training loop
//! with resumable checkpoints, and finite-difference verification of every
//! differentiable operation.
//!
//! Parameters and Adam moments are kept at `f32` precision between steps so
//! that checkpoints restore the exact optimizer state.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::camera_sim::{bracket, render_scene, CameraProfile, DEFAULT_EVS};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::formats::{read_json, read_params, write_checkpoint, write_json, write_params};
use crate::gradcheck::{check_gradients, CheckOptions, CheckReport};
use crate::hdr_merge::merge;
use crate::losses::{loss_terms_graph, LossWeights, PerceptualLoss, PyramidGradientLoss};
use crate::masks::{default_hard_masks, mask_loss_graph, soft_masks_graph, MaskTriple};
use crate::metrics::{psnr_mu, reference_peak, table_db, DEFAULT_MU};
use crate::net::params::ParamVars;
use crate::net::{
    dig_graph, forward_graph, forward_packed, gsg_graph, leff_graph, lewin_graph, net_specs, w_msa_graph, NetConfig,
    NetParams,
};
use crate::raw_model::{pack, HdrImage, PackedRaw, RawMosaic};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Square crop side in Raw pixels; 0 trains on whole images.
    pub crop_size: usize,
    /// Save a checkpoint every this many epochs; 0 saves only at the end.
    pub checkpoint_every: usize,
    /// Score the holdout set every this many epochs; 0 never.
    pub eval_every: usize,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            lr_drop_epoch: 1000,
            lr_drop_factor: 10.0,
            epochs: 2000,
            batch_size: 1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            crop_size: 64,
            checkpoint_every: 0,
            eval_every: 1,
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return arg_err(format!("lr0 must be finite and >= 0, got {}", self.lr0));
        }
        if !(self.lr_drop_factor > 0.0) {
            return arg_err("lr_drop_factor must be positive");
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return arg_err(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return arg_err("adam_eps must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return arg_err("epochs and batch_size must be at least 1");
        }
        if self.crop_size % 2 == 1 {
            return arg_err("crop_size must be even");
        }
        let w = self.loss_weights;
        if !(w.tau1 >= 0.0 && w.tau2 >= 0.0) {
            return arg_err("loss weights must be non-negative");
        }
        Ok(())
    }
}

/// `lr0` before `lr_drop_epoch`, `lr0 / lr_drop_factor` from then on.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.lr_drop_epoch {
        cfg.lr0
    } else {
        cfg.lr0 / cfg.lr_drop_factor
    }
}

/// Kaiming-normal weights, zero biases, unit LN gains.
pub fn init_params(config: &NetConfig, seed: u64) -> Result<NetParams> {
    config.validate()?;
    Ok(NetParams::from_specs(&net_specs(config), seed))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: NetParams,
    pub v: NetParams,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &NetParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// One bias-corrected Adam update. Arrays without a gradient are treated as
/// having a zero gradient. Nothing is modified if any gradient is non-finite.
pub fn adam_step(
    params: &mut NetParams,
    grads: &NetParams,
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params
            .get(name)
            .ok_or_else(|| Error::Argument(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return shape_err(format!("gradient shape {:?} for {name} {:?}", g.shape(), p.shape()));
        }
        if let Some(i) = g.first_non_finite() {
            return Err(Error::Numerical {
                location: format!("gradient of {name} at index {i}"),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for (name, p) in params.iter_mut() {
        let g = grads.get(name);
        let m = state.m.expect_mut(name);
        let v = state.v.expect_mut(name);
        for i in 0..p.len() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
            let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + cfg.adam_eps);
            p.data_mut()[i] = round_f32(p.data()[i] - update);
            m.data_mut()[i] = round_f32(mi);
            v.data_mut()[i] = round_f32(vi);
        }
    }
    Ok(())
}

/// A 0 EV input frame and its packed-resolution radiance target.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub scene_id: String,
    pub raw: RawMosaic,
    pub hdr: HdrImage,
}

impl TrainingPair {
    pub fn new(scene_id: impl Into<String>, raw: RawMosaic, hdr: HdrImage) -> Result<Self> {
        let want = [raw.height() / 2, raw.width() / 2, 4];
        if hdr.shape() != want {
            return shape_err(format!("target {:?} does not match raw, expected {want:?}", hdr.shape()));
        }
        Ok(Self {
            scene_id: scene_id.into(),
            raw,
            hdr,
        })
    }
}

/// `count` synthetic pairs: default 20-stop scenes, a noiseless default
/// profile, −3/0/+3 EV brackets merged into the target.
pub fn synthetic_pairs(count: usize, raw_size: (usize, usize), seed: u64) -> Result<Vec<TrainingPair>> {
    let profile = CameraProfile::default();
    (0..count)
        .map(|i| {
            let s = seed.wrapping_mul(1000).wrapping_add(i as u64);
            let scene = render_scene(s, raw_size, 20)?;
            let stack = bracket(&scene, &profile, &DEFAULT_EVS, s)?;
            let hdr = merge(&stack)?;
            let raw = stack.at_ev(0.0).expect("0 EV is bracketed").clone();
            TrainingPair::new(format!("scene{i:03}"), raw, hdr)
        })
        .collect()
}

fn crop_hwc(t: &Tensor, y: usize, x: usize, h: usize, w: usize) -> Tensor {
    let [_, tw, c] = t.dims3().expect("images are rank 3");
    let d = t.data();
    let mut out = Vec::with_capacity(h * w * c);
    for yy in y..y + h {
        let row = (yy * tw + x) * c;
        out.extend_from_slice(&d[row..row + w * c]);
    }
    Tensor::new(&[h, w, c], out).expect("crop is in bounds")
}

/// Packed input and target kept in memory for cropping.
struct Prepared {
    packed: PackedRaw,
    target: Tensor,
}

fn prepare(dataset: &[TrainingPair]) -> Result<Vec<Prepared>> {
    dataset
        .iter()
        .map(|p| {
            Ok(Prepared {
                packed: pack(&p.raw)?,
                target: p.hdr.tensor().clone(),
            })
        })
        .collect()
}

/// Loss components of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub log_l2: f64,
    pub perceptual: f64,
    pub mask: f64,
}

impl LossValues {
    fn add(&mut self, o: &LossValues) {
        self.total += o.total;
        self.log_l2 += o.log_l2;
        self.perceptual += o.perceptual;
        self.mask += o.mask;
    }

    fn scaled(&self, s: f64) -> LossValues {
        LossValues {
            total: self.total * s,
            log_l2: self.log_l2 * s,
            perceptual: self.perceptual * s,
            mask: self.mask * s,
        }
    }
}

/// Loss on one packed sample, plus parameter gradients when requested.
fn sample_loss(
    params: &NetParams,
    packed: &PackedRaw,
    target_hwc: &Tensor,
    net: &NetConfig,
    weights: LossWeights,
    perceptual: &dyn PerceptualLoss,
    with_grads: bool,
) -> Result<(LossValues, Option<NetParams>)> {
    let g = Graph::new();
    let pv = ParamVars::bind(&g, params, with_grads);
    let out = forward_graph(&pv, packed, net)?;
    let hard = default_hard_masks(packed);
    let soft = out.soft_over.zip(out.soft_under);
    let target = target_hwc.hwc_to_chw()?;
    let terms = loss_terms_graph(&g, out.hdr, &target, soft, &hard, weights, perceptual)?;
    let value = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
    let values = LossValues {
        total: value(Some(terms.total)),
        log_l2: value(Some(terms.log_l2)),
        perceptual: value(terms.perceptual),
        mask: value(terms.mask),
    };
    if !values.total.is_finite() {
        return Err(Error::Numerical {
            location: format!("training loss is {} ({values:?})", values.total),
        });
    }
    if !with_grads {
        return Ok((values, None));
    }
    let mut grads = g.backward(terms.total);
    let grads = pv
        .iter()
        .map(|(name, var)| {
            let shape = params.get(name).expect("bound from params").shape();
            let grad = grads.take(*var).unwrap_or_else(|| Tensor::zeros(shape));
            (name.clone(), grad)
        })
        .collect();
    Ok((values, Some(grads)))
}

/// Mean loss over whole images.
pub fn dataset_loss(
    params: &NetParams,
    dataset: &[TrainingPair],
    net: &NetConfig,
    weights: LossWeights,
) -> Result<LossValues> {
    if dataset.is_empty() {
        return arg_err("empty dataset");
    }
    let perceptual = PyramidGradientLoss::default();
    let mut acc = LossValues::default();
    for p in prepare(dataset)? {
        let (v, _) = sample_loss(params, &p.packed, &p.target, net, weights, &perceptual, false)?;
        acc.add(&v);
    }
    Ok(acc.scaled(1.0 / dataset.len() as f64))
}

/// Mean PSNR-μ (capped, per-scene reference peak) of whole-image predictions.
pub fn mean_psnr_mu(params: &NetParams, dataset: &[TrainingPair], net: &NetConfig) -> Result<f64> {
    if dataset.is_empty() {
        return arg_err("empty dataset");
    }
    let mut total = 0.0;
    for p in dataset {
        let pred = forward_packed(&pack(&p.raw)?, params, net)?;
        let reference = p.hdr.tensor();
        total += table_db(psnr_mu(pred.tensor(), reference, DEFAULT_MU, reference_peak(reference))?);
    }
    Ok(total / dataset.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: u64,
    /// Means over the epoch's samples.
    pub loss: LossValues,
    pub holdout_psnr_mu: Option<f64>,
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: NetParams,
    pub adam: AdamState,
    /// Next epoch to run.
    pub epoch: usize,
    pub step: u64,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn fresh(net: &NetConfig, cfg: &TrainConfig) -> Result<Self> {
        let params = init_params(net, cfg.seed)?;
        Ok(Self {
            adam: AdamState::new(&params),
            params,
            epoch: 0,
            step: 0,
            history: Vec::new(),
        })
    }
}

pub const STATE_VERSION: u32 = 1;
pub const MODEL_FILE: &str = "model.rhnp";
pub const OPTIMIZER_FILE: &str = "optimizer.rhnp";
pub const STATE_FILE: &str = "state.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateFile {
    format_version: u32,
    epoch: usize,
    step: u64,
    seed: u64,
    adam_t: u64,
    params: String,
    optimizer: String,
    history: Vec<EpochRecord>,
}

/// Writes `model.rhnp` (+ config), `optimizer.rhnp` and `state.json`.
pub fn save_state(dir: &Path, state: &TrainState, net: &NetConfig, cfg: &TrainConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_checkpoint(&dir.join(MODEL_FILE), &state.params, net)?;
    let moments: NetParams = state
        .adam
        .m
        .iter()
        .map(|(n, t)| (format!("m.{n}"), t.clone()))
        .chain(state.adam.v.iter().map(|(n, t)| (format!("v.{n}"), t.clone())))
        .collect();
    write_params(&dir.join(OPTIMIZER_FILE), &moments)?;
    write_json(
        &dir.join(STATE_FILE),
        &StateFile {
            format_version: STATE_VERSION,
            epoch: state.epoch,
            step: state.step,
            seed: cfg.seed,
            adam_t: state.adam.t,
            params: MODEL_FILE.into(),
            optimizer: OPTIMIZER_FILE.into(),
            history: state.history.clone(),
        },
    )
}

pub fn load_state(dir: &Path, net: &NetConfig, cfg: &TrainConfig) -> Result<TrainState> {
    let file: StateFile = read_json(&dir.join(STATE_FILE))?;
    if file.format_version != STATE_VERSION {
        return Err(Error::Version {
            found: file.format_version,
            expected: STATE_VERSION,
        });
    }
    if file.seed != cfg.seed {
        return arg_err(format!("checkpoint seed {} differs from config seed {}", file.seed, cfg.seed));
    }
    let (params, saved_net) = crate::formats::read_checkpoint(&dir.join(&file.params))?;
    if &saved_net != net {
        return arg_err("checkpoint network config differs from the requested one");
    }
    let moments = read_params(&dir.join(&file.optimizer))?;
    let mut adam = AdamState::new(&params);
    for (name, t) in moments.iter() {
        let (slot, pname) = match name.split_once('.') {
            Some(("m", rest)) => (&mut adam.m, rest),
            Some(("v", rest)) => (&mut adam.v, rest),
            _ => return Err(Error::Format(format!("unexpected optimizer record {name}"))),
        };
        match slot.get_mut(pname) {
            Some(dst) if dst.shape() == t.shape() => *dst = t.clone(),
            _ => return Err(Error::Format(format!("optimizer record {name} does not match the model"))),
        }
    }
    adam.t = file.adam_t;
    Ok(TrainState {
        params,
        adam,
        epoch: file.epoch,
        step: file.step,
        history: file.history,
    })
}

/// Per-epoch stream derived from `(seed, epoch)` so a resumed run draws the
/// same crops and order as an uninterrupted one.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    pub holdout: &'a [TrainingPair],
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop after this epoch index even if `epochs` is larger.
    pub stop_after: Option<usize>,
    pub perceptual: Option<&'a dyn PerceptualLoss>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

/// Train from scratch.
pub fn train(
    dataset: &[TrainingPair],
    net: &NetConfig,
    cfg: &TrainConfig,
) -> Result<(NetParams, Vec<EpochRecord>)> {
    let mut state = TrainState::fresh(net, cfg)?;
    run(&mut state, dataset, net, cfg, TrainOptions::default())?;
    Ok((state.params, state.history))
}

/// Continue `state` until `cfg.epochs` (or `opts.stop_after`).
pub fn run(
    state: &mut TrainState,
    dataset: &[TrainingPair],
    net: &NetConfig,
    cfg: &TrainConfig,
    mut opts: TrainOptions,
) -> Result<()> {
    cfg.validate()?;
    net.validate()?;
    if dataset.is_empty() {
        return arg_err("empty dataset");
    }
    let default_perceptual = PyramidGradientLoss::default();
    let perceptual = opts.perceptual.unwrap_or(&default_perceptual);
    let data = prepare(dataset)?;
    let end = opts.stop_after.map_or(cfg.epochs, |s| cfg.epochs.min(s + 1));

    for epoch in state.epoch..end {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let lr = lr_at(epoch, cfg);
        let mut acc = LossValues::default();
        let mut steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Option<NetParams> = None;
            for &i in batch {
                let d = &data[i];
                let (h, w) = (d.packed.height(), d.packed.width());
                let (ch, cw) = if cfg.crop_size == 0 {
                    (h, w)
                } else {
                    ((cfg.crop_size / 2).min(h), (cfg.crop_size / 2).min(w))
                };
                let y = rng.random_range(0..=h - ch);
                let x = rng.random_range(0..=w - cw);
                let packed = PackedRaw::new(crop_hwc(d.packed.tensor(), y, x, ch, cw))?;
                let target = crop_hwc(&d.target, y, x, ch, cw);
                let (values, g) = sample_loss(&state.params, &packed, &target, net, cfg.loss_weights, perceptual, true)
                    .map_err(|e| match e {
                        Error::Numerical { location } => Error::Numerical {
                            location: format!("epoch {epoch}, step {}, {}: {location}", state.step, dataset[i].scene_id),
                        },
                        e => e,
                    })?;
                acc.add(&values);
                let g = g.expect("gradients requested");
                match grads.as_mut() {
                    None => grads = Some(g),
                    Some(sum) => {
                        for (name, t) in sum.iter_mut() {
                            t.add_assign(g.get(name).expect("same parameter set"));
                        }
                    }
                }
            }
            adam_step(&mut state.params, &grads.expect("non-empty batch"), &mut state.adam, lr, cfg)?;
            state.step += 1;
            steps += 1;
        }
        let holdout_psnr_mu = if !opts.holdout.is_empty() && cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 {
            Some(mean_psnr_mu(&state.params, opts.holdout, net)?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            lr,
            steps,
            loss: acc.scaled(1.0 / data.len() as f64),
            holdout_psnr_mu,
        };
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&record);
        }
        state.history.push(record);
        state.epoch = epoch + 1;
        if let Some(dir) = &opts.checkpoint_dir {
            let due = cfg.checkpoint_every > 0 && state.epoch.is_multiple_of(cfg.checkpoint_every);
            if due || state.epoch == end {
                save_state(dir, state, net, cfg)?;
            }
        }
    }
    Ok(())
}

/// Operations covered by [`grad_check`].
pub const GRAD_OPS: [&str; 9] = [
    "log_l2",
    "mask_loss",
    "soft_masks",
    "dual_intensity_guidance",
    "w_msa",
    "leff",
    "lewin_block",
    "global_spatial_guidance",
    "forward",
];

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `Σ x ⊙ r` for a fixed random `r`, turning a map into a scalar.
fn projection(g: &Graph, x: Var, r: &Tensor) -> Var {
    g.sum(g.mul(x, g.constant(r.clone())))
}

fn named(params: &NetParams, prefixes: &[&str]) -> Vec<(String, Tensor)> {
    params
        .iter()
        .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect()
}

/// Binds `vars[offset..]` under the names of `inputs[offset..]`.
fn bind_tail<'g>(g: &'g Graph, inputs: &[(String, Tensor)], vars: &[Var], offset: usize) -> ParamVars<'g> {
    ParamVars::from_vars(g, inputs[offset..].iter().map(|(n, _)| n.clone()).zip(vars[offset..].iter().copied()))
}

/// Central-difference check (step 1e-5) of the named operation on seeded
/// random inputs at the default network config. Large parameter arrays are
/// sub-sampled; the forward check runs on a 16×16 Raw frame.
pub fn grad_check(op: &str, seed: u64) -> Result<CheckReport> {
    let config = NetConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = init_params(&config, seed)?;
    let sampled = |k| CheckOptions {
        samples_per_array: Some(k),
        seed,
        ..CheckOptions::default()
    };
    let width = config.base_width;
    let report = match op {
        "log_l2" => {
            let target = uniform(&[4, 8, 8], 0.0, 4.0, &mut rng);
            let inputs = vec![("h".to_string(), uniform(&[4, 8, 8], 0.01, 4.0, &mut rng))];
            check_gradients(|g, v| g.log_l2(v[0], &target, crate::losses::LOG_EPS), &inputs, &CheckOptions::default())
        }
        "mask_loss" => {
            let hard = MaskTriple::from_over_under(
                uniform(&[8, 8, 1], 0.0, 1.0, &mut rng).map(f64::round),
                uniform(&[8, 8, 1], 0.0, 1.0, &mut rng).map(f64::round),
            )?;
            let inputs = vec![
                ("over".to_string(), uniform(&[1, 8, 8], 0.05, 0.95, &mut rng)),
                ("under".to_string(), uniform(&[1, 8, 8], 0.05, 0.95, &mut rng)),
            ];
            check_gradients(
                |g, v| mask_loss_graph(g, v[0], v[1], &hard).expect("shapes agree"),
                &inputs,
                &CheckOptions::default(),
            )
        }
        "soft_masks" => {
            let x = uniform(&[4, 8, 8], 0.0, 1.0, &mut rng);
            let (ro, ru) = (uniform(&[1, 8, 8], -1.0, 1.0, &mut rng), uniform(&[1, 8, 8], -1.0, 1.0, &mut rng));
            let inputs = named(&params, &["mask_"]);
            check_gradients(
                |g, v| {
                    let pv = bind_tail(g, &inputs, v, 0);
                    let (o, u) = soft_masks_graph(&pv, g.constant(x.clone()), &config);
                    g.add(projection(g, o, &ro), projection(g, u, &ru))
                },
                &inputs,
                &sampled(48),
            )
        }
        "dual_intensity_guidance" => {
            let x = uniform(&[4, 8, 8], 0.0, 1.0, &mut rng);
            let r = uniform(&[width, 8, 8], -1.0, 1.0, &mut rng);
            let mut inputs = vec![
                ("over".to_string(), uniform(&[1, 8, 8], 0.0, 1.0, &mut rng)),
                ("under".to_string(), uniform(&[1, 8, 8], 0.0, 1.0, &mut rng)),
            ];
            inputs.extend(named(&params, &["ue_", "d_"]));
            check_gradients(
                |g, v| {
                    let pv = bind_tail(g, &inputs, v, 2);
                    let y = dig_graph(&pv, g.constant(x.clone()), v[0], v[1], &config).expect("valid shapes");
                    projection(g, y, &r)
                },
                &inputs,
                &sampled(48),
            )
        }
        "w_msa" | "leff" | "lewin_block" => {
            let prefix = "gsg.enc0.block0";
            let x = uniform(&[width, 8, 8], -1.0, 1.0, &mut rng);
            let r = uniform(&[width, 8, 8], -1.0, 1.0, &mut rng);
            let part = match op {
                "w_msa" => format!("{prefix}.attn"),
                "leff" => format!("{prefix}.leff"),
                _ => prefix.to_string(),
            };
            let mut inputs = vec![("x".to_string(), x)];
            inputs.extend(named(&params, &[&format!("{part}.")]));
            check_gradients(
                |g, v| {
                    let pv = bind_tail(g, &inputs, v, 1);
                    let y = match op {
                        "w_msa" => w_msa_graph(&pv, &part, v[0], &config),
                        "leff" => leff_graph(&pv, &part, v[0], &config),
                        _ => lewin_graph(&pv, &part, v[0], &config),
                    };
                    projection(g, y, &r)
                },
                &inputs,
                &sampled(48),
            )
        }
        "global_spatial_guidance" => {
            let x = uniform(&[width, 16, 16], -1.0, 1.0, &mut rng);
            let r = uniform(&[width, 16, 16], -1.0, 1.0, &mut rng);
            let mut inputs = vec![("x".to_string(), x)];
            inputs.extend(named(&params, &["gsg."]).into_iter().filter(|(n, _)| !n.starts_with("gsg.embed")));
            check_gradients(
                |g, v| {
                    let pv = bind_tail(g, &inputs, v, 1);
                    let y = gsg_graph(&pv, v[0], &config).expect("valid shapes");
                    projection(g, y, &r)
                },
                &inputs,
                &sampled(12),
            )
        }
        "forward" => {
            let pair = synthetic_pairs(1, (16, 16), seed)?.remove(0);
            let packed = pack(&pair.raw)?;
            let target = pair.hdr.tensor().hwc_to_chw()?;
            let hard = default_hard_masks(&packed);
            let perceptual = PyramidGradientLoss::default();
            let inputs: Vec<(String, Tensor)> = params.iter().map(|(n, t)| (n.clone(), t.clone())).collect();
            check_gradients(
                |g, v| {
                    let pv = bind_tail(g, &inputs, v, 0);
                    let out = forward_graph(&pv, &packed, &config).expect("valid input");
                    let soft = out.soft_over.zip(out.soft_under);
                    loss_terms_graph(g, out.hdr, &target, soft, &hard, LossWeights::default(), &perceptual)
                        .expect("valid shapes")
                        .total
                },
                &inputs,
                &sampled(3),
            )
        }
        _ => return arg_err(format!("unknown op '{op}'; expected one of {}", GRAD_OPS.join(", "))),
    };
    Ok(report)
}

#[cfg(test)]
mod tests;
