//! Named finite-difference gradient checks for every differentiable
//! operation, plus the end-to-end model check. Used by the test suite and
//! the `gradcheck` CLI subcommand.
//!
//! Each check compares [`crate::autodiff::Tape::backward`] against central
//! differences element-by-element via
//! [`crate::autodiff::check::finite_diff_check`], over every argument of the
//! operation in turn, and reports the worst relative error.

use crate::autodiff::check::{finite_diff_check, rel_error};
use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::nn::fusion::{fusion_init, FusionSettings};
use crate::nn::model::{ForwardOpts, Model, ModelConfig};
use crate::nn::{init, Graph, Mode, Params};
use crate::scalar::Scalar;
use crate::tensor::{ConvSpec, Tensor};

/// Maximum relative error accepted by every check.
pub const GRAD_TOLERANCE: f64 = 1e-3;

fn randn<S: Scalar>(seed: u64, name: &str, shape: &[usize], scale: f64) -> Tensor<S> {
    let mut rng = init::param_rng(seed, name);
    let data = (0..shape.iter().product::<usize>())
        .map(|_| S::from_f64(init::normal(&mut rng) * scale))
        .collect();
    Tensor::from_vec(shape, data).expect("shape")
}

/// Random +-1 projection so the scalar loss has well-scaled gradients.
fn sign_proj<S: Scalar>(seed: u64, shape: &[usize]) -> Tensor<S> {
    let mut rng = init::param_rng(seed, "proj");
    let data = (0..shape.iter().product::<usize>())
        .map(|_| {
            if init::normal(&mut rng) >= 0.0 {
                S::ONE
            } else {
                -S::ONE
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape")
}

fn project<S: Scalar>(tape: &mut Tape<S>, out: NodeId, seed: u64) -> Result<NodeId> {
    let proj = tape.leaf(sign_proj(seed, tape.value(out).shape()));
    let h = tape.hadamard(out, proj)?;
    Ok(tape.sum(h))
}

/// Result of one named check.
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub max_rel: f64,
    pub threshold: f64,
    pub scalar: &'static str,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel < self.threshold
    }
}

/// Per-check plan: scalar type, step size, and pass threshold.
///
/// Operations that are linear in each argument (convolutions, linear maps,
/// pooling, upsampling) use a large step at f32 where central differences
/// are exact and the storage noise floor is negligible; the bounded-gate
/// recurrence checks run at f64 with the tighter threshold because their
/// smallest per-element gradients sit below what f32 loss rounding can
/// resolve at any step size.
struct CheckPlan {
    name: &'static str,
    f64_path: bool,
    eps: f64,
    threshold: f64,
}

const PLANS: [CheckPlan; 10] = [
    CheckPlan { name: "conv2d", f64_path: false, eps: 0.5, threshold: 1e-3 },
    CheckPlan { name: "conv3d", f64_path: false, eps: 0.5, threshold: 1e-3 },
    CheckPlan { name: "maxpool", f64_path: false, eps: 1e-3, threshold: 1e-3 },
    CheckPlan { name: "upsample", f64_path: false, eps: 0.25, threshold: 1e-3 },
    CheckPlan { name: "batchnorm", f64_path: false, eps: 1e-2, threshold: 1e-3 },
    CheckPlan { name: "linear", f64_path: false, eps: 0.5, threshold: 1e-3 },
    CheckPlan { name: "fuse", f64_path: false, eps: 1e-2, threshold: 1e-3 },
    CheckPlan { name: "attend_input", f64_path: true, eps: 1e-4, threshold: 1e-6 },
    CheckPlan { name: "cell_step", f64_path: true, eps: 2e-5, threshold: 1e-6 },
    CheckPlan { name: "classify_head", f64_path: false, eps: 1e-2, threshold: 1e-3 },
];

/// All per-operation check names, in the order they are reported.
pub const CHECK_NAMES: [&str; 10] = [
    "conv2d",
    "conv3d",
    "maxpool",
    "upsample",
    "batchnorm",
    "linear",
    "fuse",
    "attend_input",
    "cell_step",
    "classify_head",
];

fn dispatch<S: Scalar>(name: &str, eps: f64) -> Result<f64> {
    match name {
        "conv2d" => conv2d_check::<S>(eps),
        "conv3d" => conv3d_check::<S>(eps),
        "maxpool" => maxpool_check::<S>(eps),
        "upsample" => upsample_check::<S>(eps),
        "batchnorm" => batchnorm_check::<S>(eps),
        "linear" => linear_check::<S>(eps),
        "fuse" => fuse_check::<S>(eps),
        "attend_input" => attend_check::<S>(eps),
        "cell_step" => cell_check::<S>(eps),
        "classify_head" => head_check::<S>(eps),
        other => Err(Error::InvalidArgument(format!("unknown gradient check `{other}`"))),
    }
}

/// Runs one named check under its plan.
pub fn run_check(name: &str) -> Result<CheckOutcome> {
    let plan = PLANS
        .iter()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown gradient check `{name}`")))?;
    let (max_rel, scalar) = if plan.f64_path {
        (dispatch::<f64>(name, plan.eps)?, "f64")
    } else {
        (dispatch::<f32>(name, plan.eps)?, "f32")
    };
    Ok(CheckOutcome {
        name: plan.name,
        max_rel,
        threshold: plan.threshold,
        scalar,
    })
}

/// Runs every check in order.
pub fn run_all() -> Result<Vec<CheckOutcome>> {
    CHECK_NAMES.iter().map(|n| run_check(n)).collect()
}

fn conv2d_check<S: Scalar>(eps: f64) -> Result<f64> {
    let spec = ConvSpec::spatial(3, 3).with_stride(1, 2, 2).with_pad(0, 1, 1);
    let x = randn::<S>(10, "x", &[2, 5, 5], 1.0);
    let w = randn::<S>(11, "w", &[3, 2, 3, 3], 0.5);
    let b = randn::<S>(12, "b", &[3], 0.3);
    let mut worst: f64 = 0.0;
    // w.r.t. weights
    worst = worst.max(finite_diff_check(
        |tape, wp| {
            let xn = tape.leaf(x.clone());
            let bn = tape.leaf(b.clone());
            let y = tape.conv2d(xn, wp, Some(bn), &spec)?;
            project(tape, y, 1)
        },
        &w,
        eps,
    )?);
    // w.r.t. input
    worst = worst.max(finite_diff_check(
        |tape, xp| {
            let wn = tape.leaf(w.clone());
            let bn = tape.leaf(b.clone());
            let y = tape.conv2d(xp, wn, Some(bn), &spec)?;
            project(tape, y, 1)
        },
        &x,
        eps,
    )?);
    // w.r.t. bias
    worst = worst.max(finite_diff_check(
        |tape, bp| {
            let xn = tape.leaf(x.clone());
            let wn = tape.leaf(w.clone());
            let y = tape.conv2d(xn, wn, Some(bp), &spec)?;
            project(tape, y, 1)
        },
        &b,
        eps,
    )?);
    Ok(worst)
}

fn conv3d_check<S: Scalar>(eps: f64) -> Result<f64> {
    let spec = ConvSpec::cube(3, 3, 3).with_pad(1, 1, 1);
    let x = randn::<S>(20, "x", &[2, 3, 4, 4], 1.0);
    let w = randn::<S>(21, "w", &[2, 2, 3, 3, 3], 0.3);
    let b = randn::<S>(22, "b", &[2], 0.3);
    let mut worst: f64 = 0.0;
    worst = worst.max(finite_diff_check(
        |tape, wp| {
            let xn = tape.leaf(x.clone());
            let bn = tape.leaf(b.clone());
            let y = tape.conv3d(xn, wp, Some(bn), &spec)?;
            project(tape, y, 2)
        },
        &w,
        eps,
    )?);
    worst = worst.max(finite_diff_check(
        |tape, xp| {
            let wn = tape.leaf(w.clone());
            let bn = tape.leaf(b.clone());
            let y = tape.conv3d(xp, wn, Some(bn), &spec)?;
            project(tape, y, 2)
        },
        &x,
        eps,
    )?);
    Ok(worst)
}

fn maxpool_check<S: Scalar>(eps: f64) -> Result<f64> {
    // piecewise linear: small eps, gradients route to window maxima
    let spec = ConvSpec::spatial(2, 2).with_stride(1, 2, 2);
    let x = randn::<S>(30, "x", &[2, 6, 6], 1.0);
    finite_diff_check(
        |tape, xp| {
            let y = tape.maxpool(xp, &spec)?;
            project(tape, y, 3)
        },
        &x,
        eps,
    )
}

fn upsample_check<S: Scalar>(eps: f64) -> Result<f64> {
    let x = randn::<S>(40, "x", &[2, 3, 3], 1.0);
    finite_diff_check(
        |tape, xp| {
            let y = tape.upsample_nearest(xp, 5, 7)?;
            project(tape, y, 4)
        },
        &x,
        eps,
    )
}

fn batchnorm_check<S: Scalar>(eps: f64) -> Result<f64> {
    let x = randn::<S>(50, "x", &[3, 4, 4], 1.0);
    let gamma = randn::<S>(51, "g", &[3], 0.5).map(|v| v + S::ONE);
    let beta = randn::<S>(52, "b", &[3], 0.3);
    let run_mean = randn::<S>(53, "m", &[3], 0.4);
    let run_var = randn::<S>(54, "v", &[3], 0.2).map(|v| v.abs() + S::from_f64(0.5));
    let mut worst: f64 = 0.0;
    // eval mode: w.r.t. x, gamma, beta
    worst = worst.max(finite_diff_check(
        |tape, xp| {
            let g = tape.leaf(gamma.clone());
            let b = tape.leaf(beta.clone());
            let y = tape.batchnorm_eval(xp, g, b, &run_mean, &run_var, 1e-5)?;
            project(tape, y, 5)
        },
        &x,
        eps,
    )?);
    worst = worst.max(finite_diff_check(
        |tape, gp| {
            let xn = tape.leaf(x.clone());
            let b = tape.leaf(beta.clone());
            let y = tape.batchnorm_eval(xn, gp, b, &run_mean, &run_var, 1e-5)?;
            project(tape, y, 5)
        },
        &gamma,
        eps,
    )?);
    // train mode: statistics depend on x
    worst = worst.max(finite_diff_check(
        |tape, xp| {
            let g = tape.leaf(gamma.clone());
            let b = tape.leaf(beta.clone());
            let (y, _, _) = tape.batchnorm_train(xp, g, b, 1e-5)?;
            project(tape, y, 6)
        },
        &x,
        eps,
    )?);
    Ok(worst)
}

fn linear_check<S: Scalar>(eps: f64) -> Result<f64> {
    let x = randn::<S>(60, "x", &[6], 1.0);
    let w = randn::<S>(61, "w", &[4, 6], 0.5);
    let b = randn::<S>(62, "b", &[4], 0.3);
    let mut worst: f64 = 0.0;
    worst = worst.max(finite_diff_check(
        |tape, wp| {
            let xn = tape.leaf(x.clone());
            let bn = tape.leaf(b.clone());
            let y = tape.linear(xn, wp, bn)?;
            project(tape, y, 7)
        },
        &w,
        eps,
    )?);
    worst = worst.max(finite_diff_check(
        |tape, xp| {
            let wn = tape.leaf(w.clone());
            let bn = tape.leaf(b.clone());
            let y = tape.linear(xp, wn, bn)?;
            project(tape, y, 7)
        },
        &x,
        eps,
    )?);
    Ok(worst)
}

fn fuse_check<S: Scalar>(eps: f64) -> Result<f64> {
    let cfg = FusionSettings::default();
    let channels = 3;
    let mut params = Params::<S>::new();
    fusion_init(&mut params, &cfg, channels, 70);
    let s_val = randn::<S>(71, "s", &[3, 2, 2, 2], 1.0);
    let t_val = randn::<S>(72, "t", &[3, 2, 2, 2], 1.0);
    let w_val = params.get("fusion.w")?.clone();

    let run = |which: usize, leaf_val: &Tensor<S>| -> Result<f64> {
        finite_diff_check(
            |tape, leaf| {
                // compose on the raw tape so the perturbed argument is a leaf
                let s = if which == 0 { leaf } else { tape.leaf(s_val.clone()) };
                let t = if which == 1 { leaf } else { tape.leaf(t_val.clone()) };
                let w = if which == 2 { leaf } else { tape.leaf(w_val.clone()) };
                let logits = tape.conv3d(t, w, None, &ConvSpec::cube(1, 1, 1))?;
                let mask = tape.sigmoid(logits);
                let diff = tape.sub(t, s)?;
                let gated = tape.hadamard(mask, diff)?;
                let fused = tape.add(s, gated)?;
                project(tape, fused, 8)
            },
            leaf_val,
            eps,
        )
    };
    let mut worst: f64 = 0.0;
    worst = worst.max(run(0, &s_val)?);
    worst = worst.max(run(1, &t_val)?);
    worst = worst.max(run(2, &w_val)?);
    Ok(worst)
}

fn attend_check<S: Scalar>(eps: f64) -> Result<f64> {
    let mut params = Params::<S>::new();
    crate::nn::convlstm::attention_init(&mut params, "att", 2, 3, 3, 80);
    let x_val = randn::<S>(81, "x", &[2, 3, 3], 1.0);
    let h_val = randn::<S>(82, "h", &[3, 3, 3], 1.0);
    let wxa = params.get("att.w_xa")?.clone();
    let wha = params.get("att.w_ha")?.clone();
    let spec = ConvSpec::spatial(3, 3).same_padded();

    let run = |which: usize, leaf_val: &Tensor<S>| -> Result<f64> {
        finite_diff_check(
            |tape, leaf| {
                let x = if which == 0 { leaf } else { tape.leaf(x_val.clone()) };
                let h = if which == 1 { leaf } else { tape.leaf(h_val.clone()) };
                let wx = if which == 2 { leaf } else { tape.leaf(wxa.clone()) };
                let wh = if which == 3 { leaf } else { tape.leaf(wha.clone()) };
                let xa = tape.conv2d(x, wx, None, &spec)?;
                let ha = tape.conv2d(h, wh, None, &spec)?;
                let sum = tape.add(xa, ha)?;
                let a = tape.sigmoid(sum);
                let attended = tape.hadamard(a, x)?;
                project(tape, attended, 9)
            },
            leaf_val,
            eps,
        )
    };
    let mut worst: f64 = 0.0;
    worst = worst.max(run(0, &x_val)?);
    worst = worst.max(run(1, &h_val)?);
    worst = worst.max(run(2, &wxa)?);
    worst = worst.max(run(3, &wha)?);
    Ok(worst)
}

fn cell_check<S: Scalar>(eps: f64) -> Result<f64> {
    // attention -> cell recurrence over T=3 steps at 2 channels, 3x3 grid;
    // perturb a representative set of cell and attention parameters
    let hidden = 2;
    let in_ch = 2;
    let kernel = 3;
    let mut params = Params::<S>::new();
    crate::nn::convlstm::cell_init(&mut params, "cell", in_ch, hidden, kernel, (3, 3), 90);
    crate::nn::convlstm::attention_init(&mut params, "att", in_ch, hidden, kernel, 91);
    // non-trivial peepholes so their gradients are exercised
    for peep in ["i", "f", "o"] {
        *params.get_mut(&format!("cell.w_c{peep}"))? = randn::<S>(92, peep, &[hidden, 3, 3], 0.4);
    }
    let frames: Vec<Tensor<S>> = (0..3).map(|t| randn::<S>(93 + t, "f", &[in_ch, 3, 3], 1.0)).collect();

    let names = [
        "cell.w_xi", "cell.w_hi", "cell.w_ci", "cell.b_i", "cell.w_xf", "cell.w_hf",
        "cell.w_cf", "cell.b_f", "cell.w_xc", "cell.w_hc", "cell.b_c", "cell.w_xo",
        "cell.w_ho", "cell.w_co", "cell.b_o", "att.w_xa", "att.w_ha",
    ];
    let mut worst: f64 = 0.0;
    for name in names {
        let val = params.get(name)?.clone();
        let err = finite_diff_check(
            |tape, leaf| {
                // run the recurrence with `name` replaced by the tape leaf
                let bind = |tape: &mut Tape<S>, n: &str| -> Result<NodeId> {
                    if n == name {
                        Ok(leaf)
                    } else {
                        Ok(tape.leaf(params.get(n)?.clone()))
                    }
                };
                let spec = ConvSpec::spatial(kernel, kernel).same_padded();
                let mut state_c = tape.leaf(Tensor::zeros(&[hidden, 3, 3]));
                let mut state_h = tape.leaf(Tensor::zeros(&[hidden, 3, 3]));
                let mut outs = Vec::new();
                for f in &frames {
                    let x = tape.leaf(f.clone());
                    let wxa = bind(tape, "att.w_xa")?;
                    let wha = bind(tape, "att.w_ha")?;
                    let xa = tape.conv2d(x, wxa, None, &spec)?;
                    let ha = tape.conv2d(state_h, wha, None, &spec)?;
                    let sum = tape.add(xa, ha)?;
                    let a = tape.sigmoid(sum);
                    let xt = tape.hadamard(a, x)?;

                    let gate = |tape: &mut Tape<S>, wx: &str, wh: &str, b: &str, peep: Option<(&str, NodeId)>| -> Result<NodeId> {
                        let wxn = bind(tape, wx)?;
                        let bn = bind(tape, b)?;
                        let xc = tape.conv2d(xt, wxn, Some(bn), &spec)?;
                        let whn = bind(tape, wh)?;
                        let hc = tape.conv2d(state_h, whn, None, &spec)?;
                        let mut s = tape.add(xc, hc)?;
                        if let Some((wc, c)) = peep {
                            let wcn = bind(tape, wc)?;
                            let pc = tape.hadamard(wcn, c)?;
                            s = tape.add(s, pc)?;
                        }
                        Ok(s)
                    };
                    let i_pre = gate(tape, "cell.w_xi", "cell.w_hi", "cell.b_i", Some(("cell.w_ci", state_c)))?;
                    let i_gate = tape.sigmoid(i_pre);
                    let f_pre = gate(tape, "cell.w_xf", "cell.w_hf", "cell.b_f", Some(("cell.w_cf", state_c)))?;
                    let f_gate = tape.sigmoid(f_pre);
                    let c_pre = gate(tape, "cell.w_xc", "cell.w_hc", "cell.b_c", None)?;
                    let cand = tape.tanh(c_pre);
                    let keep = tape.hadamard(f_gate, state_c)?;
                    let write = tape.hadamard(i_gate, cand)?;
                    let c_new = tape.add(keep, write)?;
                    let o_pre = gate(tape, "cell.w_xo", "cell.w_ho", "cell.b_o", Some(("cell.w_co", c_new)))?;
                    let o_gate = tape.sigmoid(o_pre);
                    let tc = tape.tanh(c_new);
                    let h_new = tape.hadamard(o_gate, tc)?;
                    state_c = c_new;
                    state_h = h_new;
                    outs.push(h_new);
                }
                let stacked = tape.stack_time(&outs)?;
                project(tape, stacked, 10)
            },
            &val,
            eps,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn head_check<S: Scalar>(eps: f64) -> Result<f64> {
    let seq = randn::<S>(100, "seq", &[2, 3, 2, 2], 1.0);
    let w = randn::<S>(101, "w", &[3, 8], 0.5);
    let b = randn::<S>(102, "b", &[3], 0.3);
    let target = 1usize;
    let run = |which: usize, leaf_val: &Tensor<S>| -> Result<f64> {
        finite_diff_check(
            |tape, leaf| {
                let seq_node = if which == 2 { leaf } else { tape.leaf(seq.clone()) };
                let wn = if which == 0 { leaf } else { tape.leaf(w.clone()) };
                let bn = if which == 1 { leaf } else { tape.leaf(b.clone()) };
                // inline head: flatten frames, shared linear, average
                let t_n = tape.value(seq_node).extent(1);
                let mut acc: Option<NodeId> = None;
                for t in 0..t_n {
                    let frame = tape.slice_time(seq_node, t)?;
                    let flatn = tape.value(frame).len();
                    let x = tape.reshape(frame, &[flatn])?;
                    let scores = tape.linear(x, wn, bn)?;
                    acc = Some(match acc {
                        None => scores,
                        Some(a) => tape.add(a, scores)?,
                    });
                }
                let mean = tape.scale(acc.unwrap(), S::from_f64(1.0 / t_n as f64));
                tape.cross_entropy(mean, target)
            },
            leaf_val,
            eps,
        )
    };
    let mut worst: f64 = 0.0;
    worst = worst.max(run(0, &w)?);
    worst = worst.max(run(1, &b)?);
    worst = worst.max(run(2, &seq)?);
    Ok(worst)
}

/// End-to-end check over every trainable parameter of a built model: the
/// analytic gradient of the cross-entropy loss against central differences.
/// Returns the max relative error across all parameter elements.
pub fn end_to_end_check<S: Scalar>(config: ModelConfig, seed: u64, eps: f64) -> Result<f64> {
    let model = Model::<S>::build(config, seed)?;
    let d = model.config.input;
    let video = randn::<S>(777, "video", &[1, d.t, d.h, d.w], 0.25).map(|v| {
        (v + S::from_f64(0.5)).maximum(S::ZERO).minimum(S::ONE)
    });
    let target = 1usize;

    let eval = |m: &Model<S>| -> Result<f64> {
        let mut g = Graph::new(&m.params, Mode::Train);
        let scores = m.forward_on(&mut g, &video, ForwardOpts::default())?;
        let loss = g.tape.cross_entropy(scores, target)?;
        Ok(g.tape.value(loss).item()?.to_f64())
    };

    // determinism probe
    let l0 = eval(&model)?;
    let l1 = eval(&model)?;
    if l0.to_bits() != l1.to_bits() {
        return Err(Error::NonDeterministic { a: l0, b: l1 });
    }

    // analytic gradients for all parameters
    let mut g = Graph::new(&model.params, Mode::Train);
    let scores = model.forward_on(&mut g, &video, ForwardOpts::default())?;
    let loss = g.tape.cross_entropy(scores, target)?;
    let grads = g.gradient_map(loss)?;
    drop(g);

    let names: Vec<String> = model.params.names().cloned().collect();
    let mut worst: f64 = 0.0;
    let mut scratch = model.clone();
    for name in names {
        let n = model.params.get(&name)?.len();
        for i in 0..n {
            let base = model.params.get(&name)?.data()[i];
            let e = S::from_f64(eps);
            scratch.params.get_mut(&name)?.data_mut()[i] = base + e;
            let plus_v = scratch.params.get(&name)?.data()[i];
            let lp = eval(&scratch)?;
            scratch.params.get_mut(&name)?.data_mut()[i] = base - e;
            let minus_v = scratch.params.get(&name)?.data()[i];
            let lm = eval(&scratch)?;
            scratch.params.get_mut(&name)?.data_mut()[i] = base;
            let h = plus_v.to_f64() - minus_v.to_f64();
            let fd = (lp - lm) / h;
            let rel = rel_error(fd, grads[&name].data()[i].to_f64());
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_op_gradients_match_finite_differences() {
        for outcome in run_all().unwrap() {
            assert!(
                outcome.passed(),
                "{} ({}): max rel error {} over threshold {}",
                outcome.name,
                outcome.scalar,
                outcome.max_rel,
                outcome.threshold
            );
        }
    }
}
