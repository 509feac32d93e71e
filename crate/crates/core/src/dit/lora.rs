//! Low-rank adapters on the block linears.
//!
//! Wrapping adds `<layer>.lora_a [r, d_in]` (normal, std `1/√r`) and
//! `<layer>.lora_b [d_out, r]` (zero) beside each target weight, so the
//! effective weight `W + (α/r)·B·A` starts out equal to `W`. All weights that
//! stood in for pretrained ones are then frozen; the conditioning modules and
//! the patch/pose projections stay trainable.

use serde::Serialize;

use super::config::LoraConfig;
use super::model::Model;
use crate::conditioning::{POSE_ENCODER_PREFIX, REF_POSE_ENCODER_PREFIX};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Parameters that stay trainable when the model is wrapped.
pub const NEW_MODULE_PREFIXES: [&str; 4] = [POSE_ENCODER_PREFIX, REF_POSE_ENCODER_PREFIX, "pose_proj", "patch_embed"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AdapterEntry {
    pub layer: String,
    pub d_in: usize,
    pub d_out: usize,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LoraReport {
    pub rank: usize,
    pub adapters: Vec<AdapterEntry>,
    pub adapter_params: usize,
    /// Base (pre-wrap) parameters inside the transformer blocks.
    pub block_base_params: usize,
    /// Adapter share of all block parameters after wrapping.
    pub block_trainable_fraction: f64,
    pub trainable_params: usize,
    pub frozen_params: usize,
}

pub fn is_adapter(name: &str) -> bool {
    name.ends_with(".lora_a") || name.ends_with(".lora_b")
}

fn is_new_module(name: &str) -> bool {
    NEW_MODULE_PREFIXES
        .iter()
        .any(|p| name.strip_prefix(p).is_some_and(|rest| rest.starts_with('.')))
}

pub fn is_wrapped(model: &Model) -> bool {
    model.params.names().any(is_adapter)
}

/// Wraps every target layer of every block and freezes the base weights.
pub fn lora_apply(model: &mut Model, cfg: &LoraConfig, seed: u64) -> Result<LoraReport> {
    cfg.validate()?;
    if is_wrapped(model) {
        return Err(Error::config("model already carries LoRA adapters; merge them first"));
    }
    let r = cfg.rank;
    let mut rng = Rng::new(seed);
    let mut adapters = Vec::new();
    for i in 0..model.config.depth {
        for target in &cfg.targets {
            let layer = format!("blocks.{i}.{target}");
            let w = model.params.get(&format!("{layer}.weight"))?;
            let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
            model
                .params
                .init_normal(&format!("{layer}.lora_a"), vec![r, d_in], 1.0 / (r as f64).sqrt(), &mut rng);
            model.params.init_zeros(&format!("{layer}.lora_b"), vec![d_out, r]);
            adapters.push(AdapterEntry {
                layer,
                d_in,
                d_out,
                params: r * (d_in + d_out),
            });
        }
    }
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    for name in &names {
        if !is_adapter(name) && !is_new_module(name) {
            model.params.freeze(name)?;
        }
    }
    model.lora = Some(cfg.clone());
    Ok(census(model, r, adapters))
}

fn census(model: &Model, rank: usize, adapters: Vec<AdapterEntry>) -> LoraReport {
    let p = &model.params;
    let adapter_params: usize = adapters.iter().map(|a| a.params).sum();
    let block_base_params = p.count_where(|n| n.starts_with("blocks.") && !is_adapter(n));
    let trainable_params = p.count_where(|n| !p.is_frozen(n));
    LoraReport {
        rank,
        adapters,
        adapter_params,
        block_base_params,
        block_trainable_fraction: adapter_params as f64 / (block_base_params + adapter_params) as f64,
        trainable_params,
        frozen_params: p.count_where(|n| p.is_frozen(n)),
    }
}

/// Folds `scale·B·A` into each wrapped weight, drops the adapters and
/// unfreezes everything. Returns how many layers were merged; a model
/// without adapters is left untouched.
pub fn lora_merge(model: &mut Model) -> Result<usize> {
    if !is_wrapped(model) {
        return Ok(0);
    }
    let scale = model
        .lora
        .as_ref()
        .map(LoraConfig::scale)
        .ok_or_else(|| Error::config("adapters present without a LoRA config"))?;
    let layers: Vec<String> = model
        .params
        .names()
        .filter_map(|n| n.strip_suffix(".lora_a"))
        .map(str::to_string)
        .collect();
    for layer in &layers {
        let a = model.params.remove(&format!("{layer}.lora_a")).expect("listed adapter");
        let b = model
            .params
            .remove(&format!("{layer}.lora_b"))
            .ok_or_else(|| Error::config(format!("`{layer}` has lora_a without lora_b")))?;
        let w = model.params.get_mut(&format!("{layer}.weight"))?;
        let delta = low_rank_product(&b, &a);
        if delta.shape() != w.shape() {
            return Err(Error::shape(format!(
                "`{layer}`: adapter product {:?} does not match weight {:?}",
                delta.shape(),
                w.shape()
            )));
        }
        for (wv, dv) in w.data_mut().iter_mut().zip(delta.data()) {
            *wv += scale * dv;
        }
    }
    model.params.unfreeze_all();
    model.lora = None;
    Ok(layers.len())
}

/// `B[d_out, r] · A[r, d_in]`.
fn low_rank_product(b: &Tensor, a: &Tensor) -> Tensor {
    let (d_out, r, d_in) = (b.shape()[0], b.shape()[1], a.shape()[1]);
    Tensor::from_fn(vec![d_out, d_in], |i| {
        (0..r).map(|k| b.data()[i[0] * r + k] * a.data()[k * d_in + i[1]]).sum()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dit::ModelConfig;

    #[test]
    fn census_matches_closed_form() {
        let mut model = Model::new(ModelConfig::default(), 0).unwrap();
        let report = lora_apply(&mut model, &LoraConfig::default(), 1).unwrap();
        assert_eq!(report.adapters.len(), 24);
        for a in &report.adapters {
            assert_eq!(a.params, 4 * (a.d_in + a.d_out));
        }
        let q = report.adapters.iter().find(|a| a.layer == "blocks.0.attn.q").unwrap();
        assert_eq!(q.params, 512);
        assert_eq!(report.adapter_params, 4 * 4608);
        assert_eq!(report.block_base_params, 4 * 74624);
        assert!(report.block_trainable_fraction < 0.15);
        assert!(model.params.is_frozen("blocks.2.mod.weight"));
        assert!(model.params.is_frozen("time_mlp.fc1.bias"));
        assert!(!model.params.is_frozen("pose_proj.weight"));
        assert!(!model.params.is_frozen("pose_encoder.3.weight"));
        assert!(!model.params.is_frozen("blocks.0.mlp.fc2.lora_b"));
    }

    #[test]
    fn double_wrap_rejected_and_merge_idempotent() {
        let mut model = Model::new(ModelConfig::default(), 0).unwrap();
        let base = model.params.clone();
        lora_apply(&mut model, &LoraConfig::default(), 1).unwrap();
        assert!(lora_apply(&mut model, &LoraConfig::default(), 1).is_err());
        assert_eq!(lora_merge(&mut model).unwrap(), 24);
        assert_eq!(model.params, base);
        let again = model.clone();
        assert_eq!(lora_merge(&mut model).unwrap(), 0);
        assert_eq!(model, again);
    }

    #[test]
    fn new_module_prefix_needs_dot() {
        assert!(is_new_module("pose_proj.weight"));
        assert!(!is_new_module("pose_projection.weight"));
        assert!(is_new_module("ref_pose_encoder.0.bias"));
    }
}
