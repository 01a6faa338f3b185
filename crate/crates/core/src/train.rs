//! Two-stage training.
//!
//! Stage 1 fits the denoiser on spatial tokens with the denoising objective;
//! the spatial encoder stays at its init so the token distribution is fixed,
//! and its values are cached per scene. Stage 2 loads the stage-1 weights,
//! marks every `diffusion.*` parameter untrainable (the optimizer never
//! touches them and reports zero gradient for them) and fits everything else
//! with L = λ_int·L_int + λ_traj·(λ_0·L_0 + λ_1·L_NLL).
//!
//! Batches are processed scene by scene with gradient accumulation, so
//! variable neighbor/polyline counts never need padding. All shuffling and
//! noise comes from seeded streams: one seed, one checkpoint, bit for bit.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::{Config, DatasetKind, LossWeight, TrainStage};
use crate::decoder::{mixture_nll, mixture_nll_var, DecodedVars, MixturePrediction};
use crate::error::CoreError;
use crate::model::{AblationToggles, CausalPredictor, ForwardBundle};
use crate::nn::{Forward, ParamId, ParamSet};
use crate::perturb::inject_noise;
use crate::rng::Rng;
use crate::scene::{AgentClass, Scene};
use crate::tensor::Tensor;
use crate::Result;

/// Serialized training artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub stage: TrainStage,
    pub step: u64,
    pub config_fingerprint: String,
    pub model: crate::config::ModelConfig,
    pub toggles: AblationToggles,
    pub weights: BTreeMap<String, Tensor>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn validate(&self) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(CoreError::usage(alloc::format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let config = Config {
            model: self.model.clone(),
            ..Config::default()
        };
        if config.model_fingerprint() != self.config_fingerprint {
            return Err(CoreError::usage(
                "checkpoint fingerprint does not match its embedded config",
            ));
        }
        Ok(())
    }

    pub fn rebuild(&self) -> Result<CausalPredictor> {
        self.validate()?;
        let mut model = CausalPredictor::new(&self.model, self.toggles, 0)?;
        model.params.load_map(&self.weights)?;
        Ok(model)
    }
}

fn snapshot(
    model: &CausalPredictor,
    config: &Config,
    stage: TrainStage,
    step: u64,
) -> Checkpoint {
    let cfg = Config {
        model: model.config.clone(),
        ..config.clone()
    };
    Checkpoint {
        version: CHECKPOINT_VERSION,
        stage,
        step,
        config_fingerprint: cfg.model_fingerprint(),
        model: model.config.clone(),
        toggles: model.toggles,
        weights: model.params.to_map(),
    }
}

/// One row of the per-step metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: u64,
    pub loss: f64,
    pub intention: f64,
    pub trajectory: f64,
    pub lambda0: f64,
    pub lambda1: f64,
}

impl TrainLogRow {
    pub fn csv_header() -> &'static str {
        "step,loss,intention,trajectory,lambda0,lambda1"
    }

    pub fn csv_line(&self) -> String {
        alloc::format!(
            "{},{},{},{},{},{}",
            self.step,
            self.loss,
            self.intention,
            self.trajectory,
            self.lambda0,
            self.lambda1
        )
    }
}

/// Adam with bias correction and global-norm clipping.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let m = params
            .ids()
            .map(|id| {
                let (r, c) = params.get(id).shape();
                Tensor::zeros(r, c)
            })
            .collect::<Vec<_>>();
        let v = m.clone();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m,
            v,
            t: 0,
        }
    }

    /// Apply one update from accumulated gradients; frozen parameters are
    /// skipped even if a gradient is present.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &BTreeMap<usize, Tensor>,
        clip: f64,
    ) {
        self.t += 1;
        let mut norm_sq = 0.0;
        for (&id, g) in grads {
            if params.is_trainable(ParamId(id)) {
                norm_sq += g.squared_norm();
            }
        }
        let norm = crate::mathx::sqrt(norm_sq);
        let scale = if clip > 0.0 && norm > clip {
            clip / norm
        } else {
            1.0
        };
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for (&id, g) in grads {
            let pid = ParamId(id);
            if !params.is_trainable(pid) {
                continue;
            }
            let g = g.scale(scale);
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            for i in 0..g.len() {
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * g.data[i];
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * g.data[i] * g.data[i];
            }
            let mut value = params.get(pid).clone();
            for i in 0..value.len() {
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                value.data[i] -= self.lr * mhat / (crate::mathx::sqrt(vhat) + self.eps);
            }
            params.set(pid, value);
        }
    }
}

/// Cross-entropy of the ground-truth maneuver under the predicted
/// probabilities: −log p[gt], clamped at 1e-12.
pub fn intention_loss(pred_probs: &[f64], gt_maneuver: usize) -> Result<f64> {
    Ok(intention_loss_checked(pred_probs, gt_maneuver)?.0)
}

/// As [`intention_loss`], also reporting whether the clamp engaged.
pub fn intention_loss_checked(pred_probs: &[f64], gt_maneuver: usize) -> Result<(f64, bool)> {
    if gt_maneuver >= pred_probs.len() {
        return Err(CoreError::domain(alloc::format!(
            "maneuver {gt_maneuver} outside 0..{}",
            pred_probs.len()
        )));
    }
    let p = pred_probs[gt_maneuver];
    if !(0.0..=1.0 + 1e-9).contains(&p) {
        return Err(CoreError::domain("probabilities must lie in [0, 1]"));
    }
    let clamped = p < 1e-12;
    Ok((-crate::mathx::ln(p.max(1e-12)), clamped))
}

fn intention_loss_var<'t>(f: &Forward<'t, '_>, probs: Var<'t>, gt: usize) -> Var<'t> {
    let _ = f;
    probs
        .gather(alloc::vec![gt as i64], 1, 1)
        .add_scalar(1e-12)
        .ln()
        .neg()
}

/// Displacement loss L_0 for one decoded scene, dispatched on dataset kind.
fn displacement_loss_var<'t>(
    f: &Forward<'t, '_>,
    decoded: &DecodedVars<'t>,
    gt: &[[f64; 2]],
    gt_maneuver: usize,
    kind: DatasetKind,
    class_weight: f64,
) -> Var<'t> {
    let t_f = gt.len();
    let mut gt_tensor = Tensor::zeros(t_f, 2);
    for (i, p) in gt.iter().enumerate() {
        gt_tensor.set(i, 0, p[0]);
        gt_tensor.set(i, 1, p[1]);
    }
    let per_mode_ade = |mode: usize| -> Var<'t> {
        let diff = f.tape.constant(gt_tensor.clone()).sub(decoded.modes[mode].mu);
        let dx = diff.slice_cols(0, 1);
        let dy = diff.slice_cols(1, 1);
        dx.mul(dx).add(dy.mul(dy)).add_scalar(1e-12).sqrt().mean()
    };
    match kind {
        // RMSE of the ground-truth maneuver's mode.
        DatasetKind::Synthetic | DatasetKind::HighwayLike => {
            let diff = f
                .tape
                .constant(gt_tensor.clone())
                .sub(decoded.modes[gt_maneuver].mu);
            diff.squared_norm()
                .scale(1.0 / t_f as f64)
                .add_scalar(1e-12)
                .sqrt()
        }
        // Best-of-K ADE: the gradient flows into the closest mode.
        DatasetKind::NuscenesLike => {
            let ades: Vec<Var<'t>> = (0..decoded.modes.len()).map(per_mode_ade).collect();
            let mut best = 0;
            for (i, a) in ades.iter().enumerate() {
                if a.item() < ades[best].item() {
                    best = i;
                }
            }
            ades[best]
        }
        // Class-weighted ADE of the ground-truth mode.
        DatasetKind::ApolloscapeLike => per_mode_ade(gt_maneuver).scale(class_weight),
    }
}

fn class_weight(config: &Config, class: AgentClass) -> f64 {
    config
        .eval
        .class_weights
        .iter()
        .find(|(c, _)| *c == class)
        .map(|(_, w)| *w)
        .unwrap_or(1.0)
}

/// Value-domain trajectory loss λ_0·L_0 + λ_1·L_NLL (reporting path).
pub fn trajectory_loss(
    pred: &MixturePrediction,
    gt_future: &[[f64; 2]],
    gt_maneuver: usize,
    kind: DatasetKind,
    lambda0: f64,
    lambda1: f64,
    class_weight: f64,
) -> Result<f64> {
    if gt_maneuver >= pred.modes() {
        return Err(CoreError::domain("maneuver outside mixture"));
    }
    let l0 = match kind {
        DatasetKind::Synthetic | DatasetKind::HighwayLike => {
            let means = pred.mode_means(gt_maneuver);
            let mut sq = 0.0;
            for (m, g) in means.iter().zip(gt_future) {
                sq += (m[0] - g[0]) * (m[0] - g[0]) + (m[1] - g[1]) * (m[1] - g[1]);
            }
            crate::mathx::sqrt(sq / gt_future.len() as f64)
        }
        DatasetKind::NuscenesLike => {
            let mut best = f64::INFINITY;
            for k in 0..pred.modes() {
                let ade = crate::metrics::ade(&pred.mode_means(k), gt_future)?;
                best = best.min(ade);
            }
            best
        }
        DatasetKind::ApolloscapeLike => {
            class_weight * crate::metrics::ade(&pred.mode_means(gt_maneuver), gt_future)?
        }
    };
    let nll = mixture_nll(pred, gt_future, gt_maneuver)?;
    Ok(lambda0 * l0 + lambda1 * nll)
}

/// Fixed value or softplus-parameterized trainable weight.
enum WeightHandle {
    Fixed(f64),
    Learnable(ParamId),
}

impl WeightHandle {
    fn register(params: &mut ParamSet, name: &str, weight: LossWeight) -> Result<Self> {
        if !weight.learnable {
            return Ok(WeightHandle::Fixed(weight.init));
        }
        if weight.init <= 0.0 {
            return Err(CoreError::config(alloc::format!(
                "learnable weight {name} needs a positive init"
            )));
        }
        // softplus(raw) == init
        let raw = crate::mathx::ln(crate::mathx::exp(weight.init) - 1.0);
        Ok(WeightHandle::Learnable(params.register(
            alloc::format!("loss.{name}"),
            Tensor::from_vec(1, 1, alloc::vec![raw]),
        )))
    }

    fn as_var<'t>(&self, f: &Forward<'t, '_>) -> Var<'t> {
        match self {
            WeightHandle::Fixed(v) => f.tape.constant(Tensor::from_vec(1, 1, alloc::vec![*v])),
            WeightHandle::Learnable(id) => f.p(*id).softplus(),
        }
    }

    fn value(&self, params: &ParamSet) -> f64 {
        match self {
            WeightHandle::Fixed(v) => *v,
            WeightHandle::Learnable(id) => crate::mathx::softplus(params.get(*id).data[0]),
        }
    }
}

struct LossWeights {
    lambda0: WeightHandle,
    lambda1: WeightHandle,
    lambda_int: WeightHandle,
    lambda_traj: WeightHandle,
}

impl LossWeights {
    fn register(params: &mut ParamSet, config: &Config) -> Result<Self> {
        Ok(LossWeights {
            lambda0: WeightHandle::register(params, "lambda0", config.train.lambda_0)?,
            lambda1: WeightHandle::register(params, "lambda1", config.train.lambda_1)?,
            lambda_int: WeightHandle::register(params, "lambda_int", config.train.lambda_int)?,
            lambda_traj: WeightHandle::register(params, "lambda_traj", config.train.lambda_traj)?,
        })
    }
}

/// Full stage-2 loss of one scene; also used by the gradient-integrity
/// acceptance check.
pub fn scene_loss_var<'t>(
    model: &CausalPredictor,
    f: &Forward<'t, '_>,
    scene: &Scene,
    config: &Config,
    sample_seed: u64,
    weights: Option<&LossWeights>,
) -> Result<(Var<'t>, ForwardBundle<'t>)> {
    let gt_maneuver = scene
        .maneuver_label
        .ok_or_else(|| CoreError::validation(alloc::format!("scene {}: training needs a maneuver label", scene.id)))?;
    if gt_maneuver >= model.config.decoder.modes {
        return Err(CoreError::validation(alloc::format!(
            "scene {}: maneuver {gt_maneuver} outside 0..{}",
            scene.id,
            model.config.decoder.modes
        )));
    }
    let bundle = model.forward(f, scene, sample_seed)?;
    let gt = scene.target_future();
    let l_int = intention_loss_var(f, bundle.decoded.probs, gt_maneuver);
    let cw = class_weight(config, scene.target.class_label);
    let l0 = displacement_loss_var(
        f,
        &bundle.decoded,
        gt,
        gt_maneuver,
        config.train.dataset_kind,
        cw,
    );
    let nll = mixture_nll_var(f, &bundle.decoded.modes[gt_maneuver], gt);
    let (w0, w1, wi, wt) = match weights {
        Some(w) => (
            w.lambda0.as_var(f),
            w.lambda1.as_var(f),
            w.lambda_int.as_var(f),
            w.lambda_traj.as_var(f),
        ),
        None => (
            f.tape.scalar(config.train.lambda_0.init),
            f.tape.scalar(config.train.lambda_1.init),
            f.tape.scalar(config.train.lambda_int.init),
            f.tape.scalar(config.train.lambda_traj.init),
        ),
    };
    let traj = w0.mul(l0).add(w1.mul(nll));
    let total = wi.mul(l_int).add(wt.mul(traj));
    Ok((total, bundle))
}

fn accumulate_grads(
    into: &mut BTreeMap<usize, Tensor>,
    tape: &Tape,
    f: &Forward<'_, '_>,
    loss: Var<'_>,
    batch_scale: f64,
) {
    let grads = tape.backward(loss);
    for (pid, node) in f.touched() {
        let g = grads.of(tape.var_at(node)).scale(batch_scale);
        match into.get_mut(&pid.0) {
            Some(acc) => acc.add_assign(&g),
            None => {
                into.insert(pid.0, g);
            }
        }
    }
}

/// Stage 1: fit the denoiser on the dataset's spatial tokens.
pub fn train_diffusion(
    scenes: &[Scene],
    config: &Config,
) -> Result<(CausalPredictor, Checkpoint, Vec<TrainLogRow>)> {
    config.validate()?;
    if scenes.is_empty() {
        return Err(CoreError::config("train_diffusion: empty dataset"));
    }
    let seed = config.train.seed;
    let mut model = CausalPredictor::new(&config.model, AblationToggles::default(), seed)?;
    // Only the backdoor module trains in stage 1.
    model.params.set_trainable_by_prefix("", false);
    model.params.set_trainable_by_prefix("diffusion.", true);

    // The spatial encoder is fixed, so token values are computed once.
    let mut tokens = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let tape = Tape::new();
        let f = Forward::new(&tape, &model.params);
        let spatial = model.spatial_encoder().encode(&f, &scene.map)?;
        tokens.push(spatial.values.value());
    }

    let mut adam = Adam::new(&model.params, config.train.learning_rate);
    let mut logs = Vec::new();
    let mut order_rng = Rng::substream(seed, b"stage1-order");
    let mut noise_rng = Rng::substream(seed, b"stage1-noise");
    let batch = config.train.batch_size.min(tokens.len());
    let mut step: u64 = 0;
    for _epoch in 0..config.train.epochs {
        let mut order: Vec<usize> = (0..tokens.len()).collect();
        order_rng.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            let batch_tokens: Vec<Tensor> =
                chunk.iter().map(|&i| tokens[i].clone()).collect();
            let tape = Tape::new();
            let f = Forward::new(&tape, &model.params);
            let loss = crate::diffusion::diffusion_loss(
                &f,
                &batch_tokens,
                model.denoiser().expect("stage 1 has a denoiser"),
                model.schedule().expect("stage 1 has a schedule"),
                config.model.diffusion.norm,
                &mut noise_rng,
            )?;
            let loss_value = loss.item();
            if !loss_value.is_finite() {
                return Err(CoreError::numerical(alloc::format!(
                    "diffusion loss diverged at step {step}: {loss_value}"
                )));
            }
            let mut grads = BTreeMap::new();
            accumulate_grads(&mut grads, &tape, &f, loss, 1.0);
            adam.step(&mut model.params, &grads, config.train.grad_clip);
            step += 1;
            logs.push(TrainLogRow {
                step,
                loss: loss_value,
                intention: 0.0,
                trajectory: loss_value,
                lambda0: 0.0,
                lambda1: 0.0,
            });
        }
    }
    let ckpt = snapshot(&model, config, TrainStage::Diffusion, step);
    Ok((model, ckpt, logs))
}

/// Stage 2: full-model training with the diffusion weights frozen.
pub fn train_full(
    scenes: &[Scene],
    diffusion_ckpt: Option<&Checkpoint>,
    config: &Config,
    toggles: AblationToggles,
) -> Result<(CausalPredictor, Checkpoint, Vec<TrainLogRow>)> {
    config.validate()?;
    if scenes.is_empty() {
        return Err(CoreError::config("train_full: empty dataset"));
    }
    let seed = config.train.seed;
    let mut model = CausalPredictor::new(&config.model, toggles, seed)?;
    if toggles.causal {
        let ckpt = diffusion_ckpt.ok_or_else(|| {
            CoreError::usage("train_full with causal modules needs a diffusion checkpoint")
        })?;
        if ckpt.stage != TrainStage::Diffusion {
            return Err(CoreError::usage(alloc::format!(
                "diffusion checkpoint has stage {:?}, expected Diffusion",
                ckpt.stage
            )));
        }
        ckpt.validate()?;
        model.params.load_map_prefix(&ckpt.weights, "diffusion.")?;
        model.params.load_map_prefix(&ckpt.weights, "spatial.")?;
        model.params.set_trainable_by_prefix("diffusion.", false);
    }
    if config.train.freeze_spatial {
        model.params.set_trainable_by_prefix("spatial.", false);
    }
    let weights = LossWeights::register(&mut model.params, config)?;
    let frozen_checksum = model.params.checksum_by_prefix("diffusion.");

    let mut adam = Adam::new(&model.params, config.train.learning_rate);
    let mut logs = Vec::new();
    let mut order_rng = Rng::substream(seed, b"stage2-order");
    let mut aug_rng = Rng::substream(seed, b"stage2-augment");
    let batch = config.train.batch_size.min(scenes.len());
    let mut step: u64 = 0;
    for _epoch in 0..config.train.epochs {
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order_rng.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            let sample_seed = crate::util::fnv1a64(&[seed.to_le_bytes(), step.to_le_bytes()].concat());
            let mut grads = BTreeMap::new();
            let mut total = 0.0;
            let mut total_int = 0.0;
            let mut total_traj = 0.0;
            let scale = 1.0 / chunk.len() as f64;
            for &idx in chunk {
                let scene = augment_scene(&scenes[idx], config, &mut aug_rng)?;
                let tape = Tape::new();
                let f = Forward::new(&tape, &model.params);
                let (loss, bundle) =
                    scene_loss_var(&model, &f, &scene, config, sample_seed, Some(&weights))?;
                let loss_value = loss.item();
                if !loss_value.is_finite() {
                    return Err(CoreError::numerical(alloc::format!(
                        "training loss diverged at step {step} on scene {}",
                        scene.id
                    )));
                }
                total += loss_value * scale;
                let int_val = intention_loss(
                    &bundle.decoded.probs.value().data,
                    scene.maneuver_label.unwrap(),
                )?;
                total_int += int_val * scale;
                total_traj +=
                    (loss_value - weights.lambda_int.value(&model.params) * int_val) * scale;
                accumulate_grads(&mut grads, &tape, &f, loss, scale);
            }
            adam.step(&mut model.params, &grads, config.train.grad_clip);
            step += 1;
            logs.push(TrainLogRow {
                step,
                loss: total,
                intention: total_int,
                trajectory: total_traj,
                lambda0: weights.lambda0.value(&model.params),
                lambda1: weights.lambda1.value(&model.params),
            });
        }
    }
    if toggles.causal {
        debug_assert_eq!(
            model.params.checksum_by_prefix("diffusion."),
            frozen_checksum,
            "frozen diffusion weights moved"
        );
    }
    let ckpt = snapshot(&model, config, TrainStage::Full, step);
    Ok((model, ckpt, logs))
}

/// Robustness-protocol training augmentation: curvature noise at an α drawn
/// from the configured list, futures untouched.
fn augment_scene(scene: &Scene, config: &Config, rng: &mut Rng) -> Result<Scene> {
    if config.train.train_noise_alphas.is_empty() {
        return Ok(scene.clone());
    }
    let alpha =
        config.train.train_noise_alphas[rng.below(config.train.train_noise_alphas.len())];
    let hist = scene.history_len();
    let mut out = scene.clone();
    let seed = rng.next_u64();
    out.target = inject_noise(&scene.target, hist, alpha, 1, seed)?;
    for (i, n) in scene.neighbors.iter().enumerate() {
        out.neighbors[i] = inject_noise(n, hist, alpha, 1, seed.wrapping_add(i as u64 + 1))?;
    }
    Ok(out)
}

/// Value-domain loss of a trained model on one scene (reporting).
pub fn evaluate_scene_loss(
    model: &CausalPredictor,
    scene: &Scene,
    config: &Config,
    sample_seed: u64,
) -> Result<f64> {
    let tape = Tape::new();
    let f = Forward::new(&tape, &model.params);
    let (loss, _) = scene_loss_var(model, &f, scene, config, sample_seed, None)?;
    Ok(loss.item())
}
