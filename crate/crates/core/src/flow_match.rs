//! Rectified-flow objective, Euler sampler and training loop.
//!
//! Data sits at `t = 0` and noise at `t = 1` on the straight path
//! `x_t = (1−t)·x0 + t·n`, whose velocity `n − x0` is the regression target.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dit::{encode_condition, predict_velocity, Condition, ConditionVars, Model, ModelConfig};
use crate::error::{Error, Result, ResultExt};
use crate::latent_codec::{encode, encode_image};
use crate::numerics::{adamw_step, AdamState, AdamWConfig, Rng, Tape, Tensor, Var};
use crate::params::Binding;
use crate::pose_kit::{render_pose_frame, render_pose_maps, ClipRecord, PoseSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub seed: u64,
    /// Probability of marking the first `g` latent frames as given, indexed by `g`.
    pub given_probs: Vec<f64>,
    /// Drive the pose paths; off for pose-free pretraining.
    pub use_pose: bool,
    #[serde(default)]
    pub schedule: LrSchedule,
    /// Spatial token positions start at a random offset in `0..=position_jitter`
    /// per example, so larger grids at sampling time reuse trained positions.
    pub position_jitter: usize,
    /// Abort when the loss stays above `divergence_factor × initial` ...
    pub divergence_factor: f64,
    /// ... for this many consecutive steps.
    pub divergence_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            batch_size: 1,
            lr: 1e-3,
            weight_decay: 0.0,
            seed: 0,
            given_probs: vec![0.5, 0.25, 0.25],
            use_pose: true,
            schedule: LrSchedule::Constant,
            position_jitter: 0,
            divergence_factor: 10.0,
            divergence_patience: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be finite and > 0", self.lr)));
        }
        if self.given_probs.is_empty() || self.given_probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::config(format!("given_probs {:?} must be probabilities", self.given_probs)));
        }
        let total: f64 = self.given_probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("given_probs sum to {total}, not 1")));
        }
        if !(self.divergence_factor > 1.0) || self.divergence_patience == 0 {
            return Err(Error::config("divergence_factor must exceed 1 and patience be >= 1"));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    /// Learning rate used for update `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let u = step as f64 / self.steps.max(1) as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * u).cos())
            }
        }
    }

    fn draw_given(&self, rng: &mut Rng) -> usize {
        let u = rng.uniform();
        let mut acc = 0.0;
        for (g, &p) in self.given_probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return g;
            }
        }
        self.given_probs.len() - 1
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `lr` down to zero over the run.
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub steps: usize,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { steps: 20, seed: 0 }
    }
}

/// One training clip in latent form.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub name: String,
    /// `[C, T_lat, h, w]`.
    pub x0: Tensor,
    pub condition: Condition,
}

/// `[C,h,w]` latent of a `[3,H,W]` image.
pub fn reference_latent(image: &Tensor) -> Result<Tensor> {
    let z = encode_image(image)?;
    let s = z.shape().to_vec();
    z.reshape(vec![s[0], s[2], s[3]])
}

/// Conditioning for a reference image and its pose plus driving poses.
pub fn build_condition(
    cfg: &ModelConfig,
    reference: &Tensor,
    reference_pose: &PoseSequence,
    poses: &PoseSequence,
) -> Result<Condition> {
    if reference_pose.canvas() != poses.canvas() {
        return Err(Error::validation(format!(
            "reference pose canvas {:?} differs from driving canvas {:?}",
            reference_pose.canvas(),
            poses.canvas()
        )));
    }
    if reference.shape()[1..] != poses.canvas() {
        return Err(Error::validation(format!(
            "reference image {:?} does not match pose canvas {:?}",
            reference.shape(),
            poses.canvas()
        )));
    }
    if poses.joints() != cfg.pose_joints || reference_pose.joints() != cfg.pose_joints {
        return Err(Error::validation(format!(
            "model expects {} joints, poses carry {}",
            cfg.pose_joints,
            poses.joints()
        )));
    }
    Ok(Condition {
        ref_latent: reference_latent(reference)?,
        pose_maps: Some(render_pose_maps(poses, cfg.pose_sigma)?),
        ref_pose_map: Some(render_pose_frame(reference_pose, 0, cfg.pose_sigma)?),
    })
}

impl TrainExample {
    pub fn from_clip(clip: &ClipRecord, cfg: &ModelConfig) -> Result<TrainExample> {
        Ok(TrainExample {
            name: clip.name.clone(),
            x0: encode(&clip.video)?,
            condition: build_condition(cfg, &clip.reference, &clip.reference_pose, &clip.poses)
                .map_err(|e| e.context(clip.name.clone()))?,
        })
    }

    fn without_pose(&self) -> Condition {
        Condition {
            ref_latent: self.condition.ref_latent.clone(),
            pose_maps: None,
            ref_pose_map: None,
        }
    }
}

/// `(1−t)·x0 + t·noise`.
pub fn interpolate(x0: &Tensor, noise: &Tensor, t: f64) -> Result<Tensor> {
    if x0.shape() != noise.shape() {
        return Err(Error::shape(format!("x0 {:?} vs noise {:?}", x0.shape(), noise.shape())));
    }
    Tensor::new(
        x0.shape().to_vec(),
        x0.data().iter().zip(noise.data()).map(|(&a, &n)| (1.0 - t) * a + t * n).collect(),
    )
}

/// Mean squared error between `pred` and `noise − x0` over frames `g..`.
pub fn masked_velocity_loss(tape: &mut Tape, pred: Var, x0: &Tensor, noise: &Tensor, g: usize) -> Result<Var> {
    let frames = x0.shape()[1];
    if g >= frames {
        return Err(Error::validation(format!("given prefix {g} leaves no frame of {frames} to supervise")));
    }
    let target = Tensor::new(
        x0.shape().to_vec(),
        noise.data().iter().zip(x0.data()).map(|(&n, &a)| n - a).collect(),
    )?;
    let target = tape.constant(target);
    let diff = tape.sub(pred, target)?;
    let diff = tape.narrow(diff, 1, g, frames)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean(sq)
}

/// Flow-matching loss of one example at time `t` with noise `noise` and
/// the first `g` latent frames given.
#[allow(clippy::too_many_arguments)]
pub fn fm_loss(
    tape: &mut Tape,
    p: &Binding,
    model: &Model,
    x0: &Tensor,
    cond: &ConditionVars,
    t: f64,
    noise: &Tensor,
    g: usize,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::validation(format!("flow time {t} outside [0,1]")));
    }
    let xt = tape.constant(interpolate(x0, noise, t)?);
    let given = if g > 0 {
        Some(tape.constant(x0.narrow(1, 0, g)?))
    } else {
        None
    };
    let pred = predict_velocity(tape, p, &model.config, model.lora_scale(), xt, t, cond, given)?;
    let loss = masked_velocity_loss(tape, pred, x0, noise, g)?;
    let v = tape.value(loss).data()[0];
    if !v.is_finite() {
        return Err(Error::numerical(format!("flow-matching loss is {v} at t={t}")));
    }
    Ok(loss)
}

/// Anything that predicts a velocity for a latent at a flow time.
pub trait VelocityField {
    fn velocity(&self, x: &Tensor, t: f64, given: Option<&Tensor>) -> Result<Tensor>;
}

/// A model with its condition features computed once.
pub struct ConditionedModel<'a> {
    model: &'a Model,
    ref_latent: Tensor,
    ref_pose_feat: Option<Tensor>,
    pose_feat: Option<Tensor>,
}

impl<'a> ConditionedModel<'a> {
    pub fn new(model: &'a Model, cond: &Condition) -> Result<Self> {
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, false);
        let vars = encode_condition(&mut tape, &p, &model.config, cond)?;
        Ok(ConditionedModel {
            model,
            ref_latent: cond.ref_latent.clone(),
            ref_pose_feat: vars.ref_pose_feat.map(|v| tape.value(v).clone()),
            pose_feat: vars.pose_feat.map(|v| tape.value(v).clone()),
        })
    }

    /// Latent shape `[C, T_lat, h, w]` this conditioning produces.
    pub fn latent_shape(&self, frames: usize) -> Vec<usize> {
        let s = self.ref_latent.shape();
        vec![s[0], frames, s[1], s[2]]
    }
}

impl VelocityField for ConditionedModel<'_> {
    fn velocity(&self, x: &Tensor, t: f64, given: Option<&Tensor>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.model.params.bind(&mut tape, false);
        let cond = ConditionVars {
            ref_latent: tape.constant(self.ref_latent.clone()),
            ref_pose_feat: self.ref_pose_feat.as_ref().map(|f| tape.constant(f.clone())),
            pose_feat: self.pose_feat.as_ref().map(|f| tape.constant(f.clone())),
            origin: [0; 3],
        };
        let xv = tape.constant(x.clone());
        let gv = given.map(|g| tape.constant(g.clone()));
        let v = predict_velocity(&mut tape, &p, &self.model.config, self.model.lora_scale(), xv, t, &cond, gv)?;
        Ok(tape.value(v).clone())
    }
}

fn hold_given(x: &mut Tensor, given: &Tensor) -> Result<()> {
    x.assign_narrow(1, 0, given)
}

/// Euler integration from `t = 1` to `t = 0` in `cfg.steps` uniform steps.
pub fn sample(field: &dyn VelocityField, shape: &[usize], given: Option<&Tensor>, cfg: &SampleConfig) -> Result<Tensor> {
    sample_with_rng(field, shape, given, cfg.steps, &mut Rng::new(cfg.seed))
}

/// [`sample`] drawing its initial noise from `rng`.
pub fn sample_with_rng(
    field: &dyn VelocityField,
    shape: &[usize],
    given: Option<&Tensor>,
    steps: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::config("sampler needs at least one step"));
    }
    if shape.len() != 4 {
        return Err(Error::shape(format!("latent shape must be [C,T,h,w], got {shape:?}")));
    }
    if let Some(g) = given {
        let gs = g.shape();
        if gs.len() != 4 || gs[0] != shape[0] || gs[1] > shape[1] || gs[2..] != shape[2..] {
            return Err(Error::shape(format!("given prefix {gs:?} does not fit latent {shape:?}")));
        }
    }
    let mut x = rng.normal_tensor(shape.to_vec());
    if let Some(g) = given {
        hold_given(&mut x, g)?;
    }
    let dt = 1.0 / steps as f64;
    for i in 0..steps {
        let t = (steps - i) as f64 / steps as f64;
        let v = field.velocity(&x, t, given).with_context(|| format!("sampler step {i}"))?;
        if v.shape() != x.shape() {
            return Err(Error::shape(format!("velocity {:?} for latent {:?}", v.shape(), x.shape())));
        }
        for (a, &b) in x.data_mut().iter_mut().zip(v.data()) {
            *a -= dt * b;
        }
        x.check_finite(&format!("sampler step {i} (t={t})"))?;
        if let Some(g) = given {
            hold_given(&mut x, g)?;
        }
    }
    Ok(x)
}

/// Per-step record of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl TrainLog {
    pub fn initial(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }

    /// Mean of the last `n` losses.
    pub fn tail_mean(&self, n: usize) -> Option<f64> {
        let n = n.min(self.losses.len());
        (n > 0).then(|| self.losses[self.losses.len() - n..].iter().sum::<f64>() / n as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            let _ = writeln!(s, "{i},{l:e}");
        }
        s
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// One minibatch: loss value and gradients of every trainable parameter.
pub fn batch_gradients(
    model: &Model,
    data: &[TrainExample],
    cfg: &TrainConfig,
    step: usize,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut rng = Rng::new(cfg.seed).split(step as u64);
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, true);
    let mut total: Option<Var> = None;
    for _ in 0..cfg.batch_size {
        let ex = &data[rng.below(data.len())];
        let t = rng.uniform();
        let g = cfg.draw_given(&mut rng);
        let noise = rng.normal_tensor(ex.x0.shape().to_vec());
        let cond = if cfg.use_pose {
            ex.condition.clone()
        } else {
            ex.without_pose()
        };
        let mut vars = encode_condition(&mut tape, &p, &model.config, &cond)?;
        if cfg.position_jitter > 0 {
            let j = cfg.position_jitter + 1;
            vars.origin = [0, rng.below(j), rng.below(j)];
        }
        let l = fm_loss(&mut tape, &p, model, &ex.x0, &vars, t, &noise, g).with_context(|| ex.name.clone())?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let loss = tape.scale(total.expect("batch_size >= 1"), 1.0 / cfg.batch_size as f64)?;
    let value = tape.value(loss).data()[0];
    let mut grads = tape.backward(loss)?;
    Ok((value, p.collect_grads(&mut grads)))
}

/// Flow-matching loss averaged over every example at the fixed times
/// `(k+½)/times`, with noise drawn from `seed` and no given frames. Being
/// deterministic, it tracks training progress without minibatch noise.
pub fn probe_loss(model: &Model, data: &[TrainExample], times: usize, seed: u64, use_pose: bool) -> Result<f64> {
    if data.is_empty() || times == 0 {
        return Err(Error::validation("probe loss needs examples and at least one time"));
    }
    let mut rng = Rng::new(seed);
    let mut total = 0.0;
    for ex in data {
        let cond = if use_pose { ex.condition.clone() } else { ex.without_pose() };
        for k in 0..times {
            let t = (k as f64 + 0.5) / times as f64;
            let noise = rng.normal_tensor(ex.x0.shape().to_vec());
            let mut tape = Tape::new();
            let p = model.params.bind(&mut tape, false);
            let vars = encode_condition(&mut tape, &p, &model.config, &cond)?;
            let l = fm_loss(&mut tape, &p, model, &ex.x0, &vars, t, &noise, 0)?;
            total += tape.value(l).data()[0];
        }
    }
    Ok(total / (data.len() * times) as f64)
}

/// AdamW on the flow-matching loss. `on_step(step, loss)` runs after every
/// update.
pub fn train(
    model: &mut Model,
    data: &[TrainExample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::validation("training set is empty"));
    }
    let mut adam = cfg.adamw();
    let mut state = AdamState::new();
    let mut log = TrainLog { losses: Vec::with_capacity(cfg.steps) };
    let mut over = 0usize;
    for step in 0..cfg.steps {
        let (loss, grads) = batch_gradients(model, data, cfg, step).with_context(|| format!("training step {step}"))?;
        adam.lr = cfg.lr_at(step);
        adamw_step(model.params.tensors_mut(), &grads, &mut state, &adam)
            .with_context(|| format!("training step {step}"))?;
        log.losses.push(loss);
        on_step(step, loss);
        let initial = log.losses[0];
        if loss > cfg.divergence_factor * initial {
            over += 1;
            if over >= cfg.divergence_patience {
                return Err(Error::numerical(format!(
                    "training diverged: loss {loss:.4e} above {}x the initial {initial:.4e} for {over} steps (step {step})",
                    cfg.divergence_factor
                )));
            }
        } else {
            over = 0;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Oracle {
        x0: Tensor,
        noise: Tensor,
    }

    impl VelocityField for Oracle {
        fn velocity(&self, _x: &Tensor, _t: f64, _g: Option<&Tensor>) -> Result<Tensor> {
            Tensor::new(
                self.x0.shape().to_vec(),
                self.noise.data().iter().zip(self.x0.data()).map(|(&n, &a)| n - a).collect(),
            )
        }
    }

    fn oracle(seed: u64) -> Oracle {
        let mut rng = Rng::new(77);
        let x0 = rng.uniform_tensor(vec![3, 5, 2, 2], 0.0, 1.0);
        let noise = Rng::new(seed).normal_tensor(vec![3, 5, 2, 2]);
        Oracle { x0, noise }
    }

    #[test]
    fn interpolation_endpoints() {
        let o = oracle(1);
        assert!(interpolate(&o.x0, &o.noise, 0.0).unwrap().bit_eq(&o.x0));
        assert!(interpolate(&o.x0, &o.noise, 1.0).unwrap().bit_eq(&o.noise));
    }

    #[test]
    fn exact_prediction_has_zero_loss() {
        let o = oracle(1);
        let mut tape = Tape::new();
        let pred = tape.constant(o.velocity(&o.x0, 0.5, None).unwrap());
        let l = masked_velocity_loss(&mut tape, pred, &o.x0, &o.noise, 1).unwrap();
        assert_eq!(tape.value(l).data(), &[0.0]);
    }

    #[test]
    fn oracle_velocity_recovers_data() {
        for steps in [1, 3, 20] {
            let o = oracle(5);
            let cfg = SampleConfig { steps, seed: 5 };
            let x = sample(&o, &[3, 5, 2, 2], None, &cfg).unwrap();
            assert!(x.max_abs_diff(&o.x0) < 1e-12, "S={steps}");
        }
    }

    #[test]
    fn given_prefix_is_held_bitwise() {
        let o = oracle(2);
        let given = Rng::new(9).normal_tensor(vec![3, 2, 2, 2]);
        let x = sample(&o, &[3, 5, 2, 2], Some(&given), &SampleConfig { steps: 7, seed: 2 }).unwrap();
        assert!(x.narrow(1, 0, 2).unwrap().bit_eq(&given));
    }

    #[test]
    fn given_table_draws() {
        let cfg = TrainConfig::default();
        let mut rng = Rng::new(3);
        let mut counts = [0usize; 3];
        for _ in 0..8000 {
            counts[cfg.draw_given(&mut rng)] += 1;
        }
        assert!((counts[0] as f64 / 8000.0 - 0.5).abs() < 0.03, "{counts:?}");
        assert!((counts[2] as f64 / 8000.0 - 0.25).abs() < 0.03, "{counts:?}");
    }

    #[test]
    fn config_checks() {
        let bad = TrainConfig { given_probs: vec![0.5, 0.4], ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let zero = TrainConfig { lr: 0.0, ..TrainConfig::default() };
        assert!(zero.validate().is_err());
        let neg = TrainConfig { lr: -1.0, ..TrainConfig::default() };
        assert!(neg.validate().is_err());
    }
}
