use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{LoraConfig, ModelConfig};
use super::position::{position_table_from, timestep_embedding};
use crate::conditioning::{
    assemble_input, assembled_channels, init_pose_encoder, init_ref_pose_encoder, pose_encoder_forward,
    ref_pose_encoder_forward, REF_POSE_ENCODER_PREFIX,
};
use crate::container::{canonical_json, Container};
use crate::error::{Error, Result, ResultExt};
use crate::numerics::{Rng, Tape, Tensor, Var};
use crate::params::{Binding, ParamStore};

/// Weights plus the configuration needed to run them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub lora: Option<LoraConfig>,
    pub params: ParamStore,
}

/// Checkpoint header, stored as canonical JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub lora: Option<LoraConfig>,
    pub frozen: Vec<String>,
}

fn linear_init(p: &mut ParamStore, name: &str, d_out: usize, d_in: usize, rng: &mut Rng) {
    p.init_normal(&format!("{name}.weight"), vec![d_out, d_in], 1.0 / (d_in as f64).sqrt(), rng);
    p.init_zeros(&format!("{name}.bias"), vec![d_out]);
}

fn zero_linear(p: &mut ParamStore, name: &str, d_out: usize, d_in: usize) {
    p.init_zeros(&format!("{name}.weight"), vec![d_out, d_in]);
    p.init_zeros(&format!("{name}.bias"), vec![d_out]);
}

impl Model {
    /// Fresh weights. Modulation, output and pose-injection layers start at
    /// zero, so a new model predicts zero velocity and ignores the poses.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut p = ParamStore::new();
        let d = config.token_dim;
        let pv = config.patch_volume();
        let c = config.latent_channels;
        init_pose_encoder(&mut p, &config.pose_encoder, config.pose_joints, &mut rng);
        init_ref_pose_encoder(&mut p, &config.ref_pose_encoder, config.pose_joints, &mut rng);
        let last = config.ref_pose_encoder.channels.len() - 1;
        for suffix in ["weight", "bias"] {
            let name = format!("{REF_POSE_ENCODER_PREFIX}.{last}.{suffix}");
            let shape = p.get(&name)?.shape().to_vec();
            p.insert(name, Tensor::zeros(shape));
        }
        linear_init(&mut p, "patch_embed", d, assembled_channels(c) * pv, &mut rng);
        zero_linear(&mut p, "pose_proj", d, config.pose_channels * pv);
        linear_init(&mut p, "time_mlp.fc1", d, d, &mut rng);
        linear_init(&mut p, "time_mlp.fc2", d, d, &mut rng);
        let hidden = config.mlp_ratio * d;
        for i in 0..config.depth {
            zero_linear(&mut p, &format!("blocks.{i}.mod"), 6 * d, d);
            for proj in ["q", "k", "v", "out"] {
                linear_init(&mut p, &format!("blocks.{i}.attn.{proj}"), d, d, &mut rng);
            }
            // softmax ignores a shared shift of the scores, so a key bias never trains
            p.remove(&format!("blocks.{i}.attn.k.bias"));
            linear_init(&mut p, &format!("blocks.{i}.mlp.fc1"), hidden, d, &mut rng);
            linear_init(&mut p, &format!("blocks.{i}.mlp.fc2"), d, hidden, &mut rng);
        }
        zero_linear(&mut p, "final.mod", 2 * d, d);
        zero_linear(&mut p, "final.linear", c * pv, d);
        Ok(Model {
            config,
            lora: None,
            params: p,
        })
    }

    pub fn lora_scale(&self) -> Option<f64> {
        self.lora.as_ref().map(LoraConfig::scale)
    }

    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            model: self.config.clone(),
            lora: self.lora.clone(),
            frozen: self.params.frozen().iter().cloned().collect(),
        }
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(canonical_json(&self.header())?);
        c.tensors = self.params.tensors().clone();
        Ok(c)
    }

    pub fn from_container(c: Container) -> Result<Model> {
        let header: CheckpointHeader = serde_json::from_str(&c.config)
            .map_err(|e| Error::validation(format!("checkpoint header: {e}")))?;
        header.model.validate()?;
        if let Some(l) = &header.lora {
            l.validate()?;
        }
        let mut params = ParamStore::new();
        for (k, v) in c.tensors {
            params.insert(k, v);
        }
        for name in &header.frozen {
            params.freeze(name)?;
        }
        let model = Model {
            config: header.model,
            lora: header.lora,
            params,
        };
        let fresh = Model::new(model.config.clone(), 0)?;
        for (name, t) in fresh.params.iter() {
            let got = model.params.get(name).context("checkpoint")?;
            if got.shape() != t.shape() {
                return Err(Error::validation(format!(
                    "checkpoint tensor `{name}` has shape {:?}, config implies {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Model> {
        Model::from_container(Container::load(path)?).map_err(|e| e.context(path.display().to_string()))
    }
}

/// `[C, T, H, W]` → `[N, C·pt·ph·pw]`, tokens time-major then row-major.
pub fn patchify_tensor(x: &Tensor, patch: [usize; 3]) -> Result<Tensor> {
    let (shape, perm) = patchify_layout(x.shape(), patch)?;
    let pv: usize = patch.iter().product();
    let (c, n) = (x.shape()[0], x.numel() / x.shape()[0] / pv);
    x.reshape(shape)?.permute(&perm)?.reshape(vec![n, c * pv])
}

/// Inverse of [`patchify_tensor`].
pub fn unpatchify_tensor(tokens: &Tensor, channels: usize, grid: [usize; 3], patch: [usize; 3]) -> Result<Tensor> {
    let (shape, perm) = unpatchify_layout(tokens.shape(), channels, grid, patch)?;
    tokens
        .reshape(shape)?
        .permute(&perm)?
        .reshape(vec![channels, grid[0], grid[1], grid[2]])
}

fn patchify_layout(s: &[usize], patch: [usize; 3]) -> Result<(Vec<usize>, [usize; 7])> {
    if s.len() != 4 {
        return Err(Error::shape(format!("patchify needs [C,T,H,W], got {s:?}")));
    }
    for a in 0..3 {
        if patch[a] == 0 || s[a + 1] % patch[a] != 0 {
            return Err(Error::config(format!("patch {patch:?} does not divide grid {:?}", &s[1..])));
        }
    }
    let [pt, ph, pw] = patch;
    Ok((
        vec![s[0], s[1] / pt, pt, s[2] / ph, ph, s[3] / pw, pw],
        [1, 3, 5, 0, 2, 4, 6],
    ))
}

fn unpatchify_layout(s: &[usize], channels: usize, grid: [usize; 3], patch: [usize; 3]) -> Result<(Vec<usize>, [usize; 7])> {
    let pv: usize = patch.iter().product();
    let mut tg = [0; 3];
    for a in 0..3 {
        if patch[a] == 0 || grid[a] % patch[a] != 0 {
            return Err(Error::config(format!("patch {patch:?} does not divide grid {grid:?}")));
        }
        tg[a] = grid[a] / patch[a];
    }
    if s != [tg.iter().product(), channels * pv] {
        return Err(Error::shape(format!(
            "tokens {s:?} do not match {channels} channels on grid {grid:?} with patch {patch:?}"
        )));
    }
    Ok((
        vec![tg[0], tg[1], tg[2], channels, patch[0], patch[1], patch[2]],
        [3, 0, 4, 1, 5, 2, 6],
    ))
}

pub fn patchify(tape: &mut Tape, x: Var, patch: [usize; 3]) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (shape, perm) = patchify_layout(&s, patch)?;
    let pv: usize = patch.iter().product();
    let n = (s[1] / patch[0]) * (s[2] / patch[1]) * (s[3] / patch[2]);
    let y = tape.reshape(x, shape)?;
    let y = tape.permute(y, &perm)?;
    tape.reshape(y, vec![n, s[0] * pv])
}

pub fn unpatchify(tape: &mut Tape, tokens: Var, channels: usize, grid: [usize; 3], patch: [usize; 3]) -> Result<Var> {
    let (shape, perm) = unpatchify_layout(tape.shape(tokens), channels, grid, patch)?;
    let y = tape.reshape(tokens, shape)?;
    let y = tape.permute(y, &perm)?;
    tape.reshape(y, vec![channels, grid[0], grid[1], grid[2]])
}

/// Linear layer `name`, plus its low-rank update when adapters are bound.
fn project(tape: &mut Tape, p: &Binding, name: &str, x: Var, lora_scale: Option<f64>) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let bias = format!("{name}.bias");
    let b = if p.has(&bias) { Some(p.get(&bias)?) } else { None };
    let y = tape.linear(x, w, b)?;
    let a_name = format!("{name}.lora_a");
    if !p.has(&a_name) {
        return Ok(y);
    }
    let scale = lora_scale.ok_or_else(|| Error::config(format!("`{name}` has adapters but no LoRA config")))?;
    let a = p.get(&a_name)?;
    let bm = p.get(&format!("{name}.lora_b"))?;
    let u = tape.linear(x, a, None)?;
    let u = tape.linear(u, bm, None)?;
    let u = tape.scale(u, scale)?;
    tape.add(y, u)
}

/// Adds projected, patchified pose features to the matching tokens.
pub fn inject_pose_tokens(
    tape: &mut Tape,
    p: &Binding,
    cfg: &ModelConfig,
    tokens: Var,
    pose_feat: Var,
    latent_grid: [usize; 3],
) -> Result<Var> {
    let ps = tape.shape(pose_feat).to_vec();
    if ps.len() != 4 || ps[1..] != latent_grid {
        return Err(Error::shape(format!(
            "pose features {ps:?} do not sit on latent grid {latent_grid:?}"
        )));
    }
    let pt = patchify(tape, pose_feat, cfg.patch)?;
    let add = tape.linear(pt, p.get("pose_proj.weight")?, Some(p.get("pose_proj.bias")?))?;
    tape.add(tokens, add)
}

/// `[rows, n]` copy of a `[1, n]` row.
fn rows(tape: &mut Tape, v: Var, n: usize) -> Result<Var> {
    tape.expand(v, 0, n)
}

/// `norm(x)·(1 + scale) + shift`, with `shift` and `scale` given as `[1,D]`.
fn modulate(tape: &mut Tape, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = tape.shape(x)[0];
    let h = tape.layer_norm(x, None, None)?;
    let s = tape.add_scalar(scale, 1.0)?;
    let s = rows(tape, s, n)?;
    let h = tape.mul(h, s)?;
    let sh = rows(tape, shift, n)?;
    tape.add(h, sh)
}

fn chunk(tape: &mut Tape, m: Var, i: usize, d: usize) -> Result<Var> {
    tape.narrow(m, 1, i * d, (i + 1) * d)
}

fn block(tape: &mut Tape, p: &Binding, cfg: &ModelConfig, i: usize, x: Var, c: Var, lora: Option<f64>) -> Result<Var> {
    let d = cfg.token_dim;
    let n = tape.shape(x)[0];
    let pre = format!("blocks.{i}");
    let m = project(tape, p, &format!("{pre}.mod"), c, lora)?;
    let (shift1, scale1, gate1) = (chunk(tape, m, 0, d)?, chunk(tape, m, 1, d)?, chunk(tape, m, 2, d)?);
    let (shift2, scale2, gate2) = (chunk(tape, m, 3, d)?, chunk(tape, m, 4, d)?, chunk(tape, m, 5, d)?);

    let h = modulate(tape, x, shift1, scale1)?;
    let q = project(tape, p, &format!("{pre}.attn.q"), h, lora)?;
    let k = project(tape, p, &format!("{pre}.attn.k"), h, lora)?;
    let v = project(tape, p, &format!("{pre}.attn.v"), h, lora)?;
    let a = tape.attention(q, k, v, cfg.heads)?;
    let a = project(tape, p, &format!("{pre}.attn.out"), a, lora)?;
    let g = rows(tape, gate1, n)?;
    let a = tape.mul(a, g)?;
    let x = tape.add(x, a)?;

    let h = modulate(tape, x, shift2, scale2)?;
    let h = project(tape, p, &format!("{pre}.mlp.fc1"), h, lora)?;
    let h = tape.gelu(h)?;
    let h = project(tape, p, &format!("{pre}.mlp.fc2"), h, lora)?;
    let g = rows(tape, gate2, n)?;
    let h = tape.mul(h, g)?;
    tape.add(x, h)
}

/// Velocity prediction `[C_lat, T, h, w]` for an assembled input
/// `[2·C_lat+1, T, h, w]` at flow time `t`. Token positions start at
/// `origin`, which is zero outside training.
#[allow(clippy::too_many_arguments)]
pub fn dit_forward(
    tape: &mut Tape,
    p: &Binding,
    cfg: &ModelConfig,
    lora_scale: Option<f64>,
    x: Var,
    t: f64,
    pose_feat: Option<Var>,
    origin: [usize; 3],
) -> Result<Var> {
    if !t.is_finite() {
        return Err(Error::numerical(format!("flow time {t} is not finite")));
    }
    let s = tape.shape(x).to_vec();
    let c_in = assembled_channels(cfg.latent_channels);
    if s.len() != 4 || s[0] != c_in {
        return Err(Error::shape(format!("DiT input must be [{c_in},T,h,w], got {s:?}")));
    }
    let grid = [s[1], s[2], s[3]];
    let tgrid = cfg.token_grid(grid)?;
    let d = cfg.token_dim;

    let patches = patchify(tape, x, cfg.patch)?;
    let mut h = project(tape, p, "patch_embed", patches, lora_scale).context("patch embedding")?;
    let pos = tape.constant(position_table_from(origin, tgrid, d));
    h = tape.add(h, pos)?;
    if let Some(f) = pose_feat {
        h = inject_pose_tokens(tape, p, cfg, h, f, grid).context("pose injection")?;
    }

    let temb = tape.constant(timestep_embedding(t, d));
    let c = project(tape, p, "time_mlp.fc1", temb, lora_scale)?;
    let c = tape.gelu(c)?;
    let c = project(tape, p, "time_mlp.fc2", c, lora_scale)?;
    let c = tape.gelu(c).context("time embedding")?;

    for i in 0..cfg.depth {
        h = block(tape, p, cfg, i, h, c, lora_scale).with_context(|| format!("block {i}"))?;
    }

    let m = project(tape, p, "final.mod", c, lora_scale)?;
    let (shift, scale) = (chunk(tape, m, 0, d)?, chunk(tape, m, 1, d)?);
    let h = modulate(tape, h, shift, scale)?;
    let out = project(tape, p, "final.linear", h, lora_scale).context("final layer")?;
    unpatchify(tape, out, cfg.latent_channels, grid, cfg.patch)
}

/// Conditioning inputs for one clip.
#[derive(Clone, Debug)]
pub struct Condition {
    /// `[C_lat, h, w]` encoded reference frame.
    pub ref_latent: Tensor,
    /// `[J, T, H, W]` driving-pose heatmaps; `None` disables the pose path.
    pub pose_maps: Option<Tensor>,
    /// `[J, H, W]` reference-pose heatmap; `None` disables that path.
    pub ref_pose_map: Option<Tensor>,
}

/// Condition features on a tape, reusable across flow times.
#[derive(Clone, Copy, Debug)]
pub struct ConditionVars {
    pub ref_latent: Var,
    pub ref_pose_feat: Option<Var>,
    pub pose_feat: Option<Var>,
    /// Position of the first token.
    pub origin: [usize; 3],
}

pub fn encode_condition(tape: &mut Tape, p: &Binding, cfg: &ModelConfig, cond: &Condition) -> Result<ConditionVars> {
    let ref_latent = tape.constant(cond.ref_latent.clone());
    let pose_feat = match &cond.pose_maps {
        Some(m) => {
            let mv = tape.constant(m.clone());
            Some(pose_encoder_forward(tape, p, &cfg.pose_encoder, mv).context("pose encoder")?)
        }
        None => None,
    };
    let ref_pose_feat = match &cond.ref_pose_map {
        Some(m) => {
            let mv = tape.constant(m.clone());
            Some(ref_pose_encoder_forward(tape, p, &cfg.ref_pose_encoder, mv).context("ref-pose encoder")?)
        }
        None => None,
    };
    Ok(ConditionVars {
        ref_latent,
        ref_pose_feat,
        pose_feat,
        origin: [0; 3],
    })
}

/// Assembles the input and runs the DiT.
pub fn predict_velocity(
    tape: &mut Tape,
    p: &Binding,
    cfg: &ModelConfig,
    lora_scale: Option<f64>,
    noisy: Var,
    t: f64,
    cond: &ConditionVars,
    given: Option<Var>,
) -> Result<Var> {
    let x = assemble_input(tape, noisy, cond.ref_latent, cond.ref_pose_feat, given)?;
    dit_forward(tape, p, cfg, lora_scale, x, t, cond.pose_feat, cond.origin)
}
