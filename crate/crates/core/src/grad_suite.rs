//! Finite-difference checks of every differentiable op and of the full
//! model composition on small random shapes.
//!
//! Each case reduces its output to a scalar through a fixed random
//! projection `Σ r⊙y` with `|r| ∈ [0.5, 1.5]`.

use std::time::Instant;

use serde::Serialize;

use crate::conditioning::{
    assemble_input, pose_encoder_forward, ref_pose_encoder_forward, PoseEncoderConfig, RefPoseEncoderConfig,
};
use crate::dit::{dit_forward, lora_apply, LoraConfig, Model, ModelConfig};
use crate::error::Result;
use crate::numerics::{finite_diff_check, Rng, Tape, Tensor, Var};
use crate::params::Binding;

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GRAD_EPS: f64 = 1e-2;
pub const DEFAULT_SEEDS: u64 = 20;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCase {
    pub name: String,
    pub seed: u64,
    pub max_relative_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub cases: Vec<GradCase>,
    pub worst: f64,
    pub passed: bool,
    pub seconds: f64,
}

pub type ScalarFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor>,
    f: ScalarFn,
}

fn project(tape: &mut Tape, y: Var, r: &Tensor) -> Result<Var> {
    let rv = tape.constant(r.clone());
    let p = tape.mul(y, rv)?;
    tape.sum(p)
}

/// Wraps `body` so its output is reduced by a projection seeded by `seed`.
fn projected(
    seed: u64,
    inputs: Vec<Tensor>,
    body: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
) -> Result<Case> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let y = body(&mut tape, &vars)?;
    let mut rng = Rng::new(seed);
    let r = Tensor::from_fn(tape.shape(y).to_vec(), |_| {
        let m = rng.uniform_range(0.5, 1.5);
        if rng.uniform() < 0.5 {
            -m
        } else {
            m
        }
    });
    Ok(Case {
        inputs,
        f: Box::new(move |tape, v| {
            let y = body(tape, v)?;
            project(tape, y, &r)
        }),
    })
}

fn normal(rng: &mut Rng, shape: &[usize]) -> Tensor {
    rng.normal_tensor(shape.to_vec())
}

fn tiny_pose_config() -> PoseEncoderConfig {
    PoseEncoderConfig {
        channels: vec![2, 2, 2, 2, 2, 2, 3],
        ..PoseEncoderConfig::default()
    }
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        token_dim: 12,
        depth: 1,
        heads: 2,
        pose_channels: 3,
        mlp_ratio: 2,
        pose_encoder: tiny_pose_config(),
        ref_pose_encoder: RefPoseEncoderConfig {
            channels: vec![2, 3],
            kernel: 3,
            strides: vec![4, 2],
        },
        ..ModelConfig::default()
    }
}

fn named_inputs(names: &[String], vars: &[Var]) -> Binding {
    Binding::from_pairs(names.iter().cloned().zip(vars.iter().copied()))
}

/// Case names in execution order.
pub const CASES: [&str; 22] = [
    "add", "sub", "mul", "scale_shift", "linear", "gelu", "layer_norm", "attention", "reshape_permute",
    "concat_narrow", "expand", "sum_mean", "mean_pool", "nearest_upsample", "conv3d", "conv2d", "conv3d_gelu",
    "pose_encoder", "ref_pose_encoder", "assemble_input", "dit_forward", "dit_forward_lora",
];

fn build(name: &str, rng: &mut Rng) -> Result<Case> {
    let case = match name {
        "add" => projected(rng.next_u64(), vec![normal(rng, &[3, 4]), normal(rng, &[3, 4])], |t, v| t.add(v[0], v[1]))?,
        "sub" => projected(rng.next_u64(), vec![normal(rng, &[3, 4]), normal(rng, &[3, 4])], |t, v| t.sub(v[0], v[1]))?,
        "mul" => projected(rng.next_u64(), vec![normal(rng, &[3, 4]), normal(rng, &[3, 4])], |t, v| t.mul(v[0], v[1]))?,
        "scale_shift" => projected(rng.next_u64(), vec![normal(rng, &[5])], |t, v| {
            let y = t.scale(v[0], -1.7)?;
            t.add_scalar(y, 0.3)
        })?,
        "linear" => projected(
            rng.next_u64(),
            vec![normal(rng, &[3, 5]), normal(rng, &[4, 5]), normal(rng, &[4])],
            |t, v| t.linear(v[0], v[1], Some(v[2])),
        )?,
        "gelu" => projected(rng.next_u64(), vec![normal(rng, &[4, 5]).map(|x| 2.0 * x)], |t, v| t.gelu(v[0]))?,
        "layer_norm" => projected(
            rng.next_u64(),
            vec![normal(rng, &[3, 6]), normal(rng, &[6]), normal(rng, &[6])],
            |t, v| t.layer_norm(v[0], Some(v[1]), Some(v[2])),
        )?,
        "attention" => projected(
            rng.next_u64(),
            vec![normal(rng, &[3, 8]), normal(rng, &[4, 8]), normal(rng, &[4, 8])],
            |t, v| t.attention(v[0], v[1], v[2], 2),
        )?,
        "reshape_permute" => projected(rng.next_u64(), vec![normal(rng, &[2, 3, 4])], |t, v| {
            let y = t.reshape(v[0], vec![6, 4])?;
            let y = t.reshape(y, vec![2, 3, 4])?;
            t.permute(y, &[2, 0, 1])
        })?,
        "concat_narrow" => projected(rng.next_u64(), vec![normal(rng, &[2, 3]), normal(rng, &[2, 2])], |t, v| {
            let y = t.concat(&[v[0], v[1]], 1)?;
            let y = t.narrow(y, 1, 1, 4)?;
            let z = t.concat_channels(&[y, y])?;
            t.mul(z, z)
        })?,
        "expand" => projected(rng.next_u64(), vec![normal(rng, &[2, 1, 3])], |t, v| t.expand(v[0], 1, 4))?,
        "sum_mean" => Case {
            inputs: vec![normal(rng, &[3, 4])],
            f: Box::new(|t, v| {
                let sq = t.mul(v[0], v[0])?;
                let m = t.mean(sq)?;
                let s = t.sum(v[0])?;
                let s = t.scale(s, 0.25)?;
                t.add(m, s)
            }),
        },
        "mean_pool" => projected(rng.next_u64(), vec![normal(rng, &[2, 4, 4, 4])], |t, v| t.mean_pool(v[0], [2, 2, 2]))?,
        "nearest_upsample" => projected(rng.next_u64(), vec![normal(rng, &[2, 2, 2, 2])], |t, v| {
            t.nearest_upsample(v[0], [2, 2, 2])
        })?,
        "conv3d" => projected(
            rng.next_u64(),
            vec![normal(rng, &[2, 4, 5, 5]), normal(rng, &[3, 2, 3, 3, 3]), normal(rng, &[3])],
            |t, v| t.conv3d(v[0], v[1], v[2], [1, 2, 1], [1, 1, 0]),
        )?,
        "conv2d" => projected(
            rng.next_u64(),
            vec![normal(rng, &[2, 6, 6]), normal(rng, &[3, 2, 3, 3]), normal(rng, &[3])],
            |t, v| t.conv2d(v[0], v[1], v[2], [2, 2], [1, 1]),
        )?,
        "conv3d_gelu" => projected(
            rng.next_u64(),
            vec![normal(rng, &[1, 4, 4, 4]), normal(rng, &[2, 1, 3, 3, 3]), normal(rng, &[2])],
            |t, v| {
                let y = t.conv3d(v[0], v[1], v[2], [1, 1, 1], [1, 1, 1])?;
                t.gelu(y)
            },
        )?,
        "pose_encoder" => {
            let cfg = tiny_pose_config();
            let mut names = Vec::new();
            let mut inputs = vec![rng.uniform_tensor(vec![1, 5, 8, 8], 0.0, 1.0)];
            let mut c_in = 1;
            for (i, &c) in cfg.channels.iter().enumerate() {
                names.push(format!("pose_encoder.{i}.weight"));
                let std = (2.0 / (27 * c_in) as f64).sqrt();
                inputs.push(normal(rng, &[c, c_in, 3, 3, 3]).map(|x| std * x));
                names.push(format!("pose_encoder.{i}.bias"));
                inputs.push(normal(rng, &[c]).map(|x| 0.1 * x));
                c_in = c;
            }
            projected(rng.next_u64(), inputs, move |t, v| {
                let p = named_inputs(&names, &v[1..]);
                pose_encoder_forward(t, &p, &cfg, v[0])
            })?
        }
        "ref_pose_encoder" => {
            let cfg = RefPoseEncoderConfig {
                channels: vec![2, 3],
                kernel: 3,
                strides: vec![4, 2],
            };
            let names: Vec<String> = ["0.weight", "0.bias", "1.weight", "1.bias"]
                .iter()
                .map(|s| format!("ref_pose_encoder.{s}"))
                .collect();
            let inputs = vec![
                rng.uniform_tensor(vec![1, 16, 16], 0.0, 1.0),
                normal(rng, &[2, 1, 3, 3]),
                normal(rng, &[2]),
                normal(rng, &[3, 2, 3, 3]),
                normal(rng, &[3]),
            ];
            projected(rng.next_u64(), inputs, move |t, v| {
                let p = named_inputs(&names, &v[1..]);
                ref_pose_encoder_forward(t, &p, &cfg, v[0])
            })?
        }
        "assemble_input" => projected(
            rng.next_u64(),
            vec![
                normal(rng, &[3, 4, 2, 2]),
                normal(rng, &[3, 2, 2]),
                normal(rng, &[3, 2, 2]),
                normal(rng, &[3, 2, 2, 2]),
            ],
            |t, v| assemble_input(t, v[0], v[1], Some(v[2]), Some(v[3])),
        )?,
        "dit_forward" | "dit_forward_lora" => {
            let cfg = tiny_model_config();
            let mut model = Model::new(cfg.clone(), rng.next_u64())?;
            if name == "dit_forward_lora" {
                let lc = LoraConfig {
                    rank: 2,
                    alpha: 2.0,
                    ..LoraConfig::default()
                };
                lora_apply(&mut model, &lc, rng.next_u64())?;
            }
            let scale = model.lora_scale();
            let mut names = Vec::new();
            let mut inputs = vec![normal(rng, &[7, 2, 4, 4]), normal(rng, &[3, 2, 4, 4])];
            for (n, t) in model.params.iter() {
                if n.starts_with("pose_encoder") || n.starts_with("ref_pose_encoder") {
                    continue;
                }
                names.push(n.to_string());
                inputs.push(normal(rng, t.shape()).map(|x| 0.3 * x));
            }
            let time = rng.uniform();
            projected(rng.next_u64(), inputs, move |t, v| {
                let p = named_inputs(&names, &v[2..]);
                dit_forward(t, &p, &cfg, scale, v[0], time, Some(v[1]), [0; 3])
            })?
        }
        other => unreachable!("unknown gradient case {other}"),
    };
    Ok(case)
}

/// Runs every case for each seed in `seeds`.
pub fn run_suite(seeds: impl IntoIterator<Item = u64>, mut on_case: impl FnMut(&GradCase)) -> Result<GradReport> {
    let start = Instant::now();
    let mut cases = Vec::new();
    for seed in seeds {
        for (i, name) in CASES.iter().enumerate() {
            let mut rng = Rng::new(seed).split(i as u64);
            let case = build(name, &mut rng)?;
            let err = finite_diff_check(case.f, &case.inputs, GRAD_EPS)?;
            let c = GradCase {
                name: name.to_string(),
                seed,
                max_relative_error: err,
                passed: err < GRAD_TOLERANCE,
            };
            on_case(&c);
            cases.push(c);
        }
    }
    let worst = cases.iter().map(|c| c.max_relative_error).fold(0.0, f64::max);
    Ok(GradReport {
        passed: cases.iter().all(|c| c.passed),
        worst,
        cases,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_seed_passes() {
        let r = run_suite([0], |_| {}).unwrap();
        assert_eq!(r.cases.len(), CASES.len());
        for c in &r.cases {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn tiny_configs_validate() {
        tiny_model_config().validate().unwrap();
    }
}
