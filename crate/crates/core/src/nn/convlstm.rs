//! Convolutional LSTM with peephole connections, forward input attention,
//! the two-layer bidirectional stack, and the framewise classification head.
//!
//! One cell step computes
//!
//! ```text
//! i_t = sigma(W_xi * X_t + W_hi * H_{t-1} + W_ci o C_{t-1} + b_i)
//! f_t = sigma(W_xf * X_t + W_hf * H_{t-1} + W_cf o C_{t-1} + b_f)
//! C_t = f_t o C_{t-1} + i_t o tanh(W_xc * X_t + W_hc * H_{t-1} + b_c)
//! o_t = sigma(W_xo * X_t + W_ho * H_{t-1} + W_co o C_t + b_o)
//! H_t = o_t o tanh(C_t)
//! ```
//!
//! where `*` is a same-padded 2D convolution and `o` the Hadamard product;
//! the peephole tensors act element-wise over the full `[C,h,w]` state. The
//! forward direction of each layer rescales its input by the attention gate
//! `a_t = sigma(W_xa * X_t + W_ha * H_{t-1})` before stepping; the backward
//! direction is a plain ConvLSTM over the reversed sequence.

use serde::{Deserialize, Serialize};

use crate::autodiff::NodeId;
use crate::error::{Error, Result};
use crate::nn::{init, Graph, Params};
use crate::scalar::Scalar;
use crate::tensor::{ConvSpec, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecurrentSettings {
    /// Hidden channels per direction.
    pub hidden: usize,
    /// Spatial kernel extent of all recurrent convolutions (odd).
    pub kernel: usize,
    /// Number of stacked bidirectional layers.
    #[serde(default = "default_layers")]
    pub layers: usize,
}

fn default_layers() -> usize {
    2
}

impl RecurrentSettings {
    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 {
            return Err(Error::InvalidConfig("recurrent kernel must be odd".into()));
        }
        if self.hidden == 0 || self.layers == 0 {
            return Err(Error::InvalidConfig("recurrent hidden/layers must be >= 1".into()));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        2 * self.hidden
    }
}

/// Initializes one direction of one layer under `prefix` (e.g. `lstm.l0.f`).
/// `grid` is the spatial extent of the state (peepholes are per-position).
pub fn cell_init<S: Scalar>(
    params: &mut Params<S>,
    prefix: &str,
    in_ch: usize,
    hidden: usize,
    kernel: usize,
    grid: (usize, usize),
    seed: u64,
) {
    let k = kernel;
    for gate in ["i", "f", "c", "o"] {
        let name = format!("{prefix}.w_x{gate}");
        params.insert(&name, init::orthogonal_kernel::<S>(seed, &name, &[hidden, in_ch, k, k]));
        let name = format!("{prefix}.w_h{gate}");
        params.insert(&name, init::orthogonal_kernel::<S>(seed, &name, &[hidden, hidden, k, k]));
        let bias = if gate == "f" { 1.0 } else { 0.0 };
        params.insert(format!("{prefix}.b_{gate}"), init::constant::<S>(&[hidden], bias));
    }
    for peep in ["i", "f", "o"] {
        params.insert(
            format!("{prefix}.w_c{peep}"),
            init::zeros::<S>(&[hidden, grid.0, grid.1]),
        );
    }
}

pub fn attention_init<S: Scalar>(
    params: &mut Params<S>,
    prefix: &str,
    in_ch: usize,
    hidden: usize,
    kernel: usize,
    seed: u64,
) {
    let k = kernel;
    let name = format!("{prefix}.w_xa");
    params.insert(&name, init::orthogonal_kernel::<S>(seed, &name, &[in_ch, in_ch, k, k]));
    let name = format!("{prefix}.w_ha");
    params.insert(&name, init::orthogonal_kernel::<S>(seed, &name, &[in_ch, hidden, k, k]));
}

pub struct CellState {
    pub c: NodeId,
    pub h: NodeId,
}

/// One ConvLSTM step. `x: [Cin,h,w]`, state tensors `[Chid,h,w]`.
pub fn cell_step<S: Scalar>(
    g: &mut Graph<S>,
    prefix: &str,
    x: NodeId,
    prev: &CellState,
    kernel: usize,
) -> Result<CellState> {
    let spec = ConvSpec::spatial(kernel, kernel).same_padded();
    let conv = |g: &mut Graph<S>, x: NodeId, w: &str, b: Option<&str>| -> Result<NodeId> {
        let w = g.param(w)?;
        match b {
            Some(b) => {
                let b = g.param(b)?;
                g.tape.conv2d(x, w, Some(b), &spec)
            }
            None => g.tape.conv2d(x, w, None, &spec),
        }
    };

    // input gate
    let xi = conv(g, x, &format!("{prefix}.w_xi"), Some(&format!("{prefix}.b_i")))?;
    let hi = conv(g, prev.h, &format!("{prefix}.w_hi"), None)?;
    let wci = g.param(&format!("{prefix}.w_ci"))?;
    let ci = g.tape.hadamard(wci, prev.c)?;
    let s = g.tape.add(xi, hi)?;
    let s = g.tape.add(s, ci)?;
    let i_gate = g.tape.sigmoid(s);

    // forget gate
    let xf = conv(g, x, &format!("{prefix}.w_xf"), Some(&format!("{prefix}.b_f")))?;
    let hf = conv(g, prev.h, &format!("{prefix}.w_hf"), None)?;
    let wcf = g.param(&format!("{prefix}.w_cf"))?;
    let cf = g.tape.hadamard(wcf, prev.c)?;
    let s = g.tape.add(xf, hf)?;
    let s = g.tape.add(s, cf)?;
    let f_gate = g.tape.sigmoid(s);

    // cell candidate
    let xc = conv(g, x, &format!("{prefix}.w_xc"), Some(&format!("{prefix}.b_c")))?;
    let hc = conv(g, prev.h, &format!("{prefix}.w_hc"), None)?;
    let s = g.tape.add(xc, hc)?;
    let cand = g.tape.tanh(s);

    // new cell state
    let keep = g.tape.hadamard(f_gate, prev.c)?;
    let write = g.tape.hadamard(i_gate, cand)?;
    let c_new = g.tape.add(keep, write)?;

    // output gate peeks at the new cell state
    let xo = conv(g, x, &format!("{prefix}.w_xo"), Some(&format!("{prefix}.b_o")))?;
    let ho = conv(g, prev.h, &format!("{prefix}.w_ho"), None)?;
    let wco = g.param(&format!("{prefix}.w_co"))?;
    let co = g.tape.hadamard(wco, c_new)?;
    let s = g.tape.add(xo, ho)?;
    let s = g.tape.add(s, co)?;
    let o_gate = g.tape.sigmoid(s);

    let tc = g.tape.tanh(c_new);
    let h_new = g.tape.hadamard(o_gate, tc)?;
    Ok(CellState { c: c_new, h: h_new })
}

/// Forward input attention: `a = sigma(W_xa * x + W_ha * prev_h)`, returns
/// `a (.) x`. With the diagnostic override active, `a` is all ones.
pub fn attend_input<S: Scalar>(
    g: &mut Graph<S>,
    prefix: &str,
    x: NodeId,
    prev_h: NodeId,
    kernel: usize,
) -> Result<NodeId> {
    if g.force_attention_one {
        let ones = g.input(Tensor::filled(g.tape.value(x).shape(), S::ONE));
        return g.tape.hadamard(ones, x);
    }
    let spec = ConvSpec::spatial(kernel, kernel).same_padded();
    let wxa = g.param(&format!("{prefix}.w_xa"))?;
    let xa = g.tape.conv2d(x, wxa, None, &spec)?;
    let wha = g.param(&format!("{prefix}.w_ha"))?;
    let ha = g.tape.conv2d(prev_h, wha, None, &spec)?;
    let s = g.tape.add(xa, ha)?;
    let a = g.tape.sigmoid(s);
    g.tape.hadamard(a, x)
}

/// Initializes all layers of the bidirectional stack. `in_ch` is the channel
/// count of the fused branch feature; layer `l > 0` consumes `2*hidden`.
pub fn bilayer_init<S: Scalar>(
    params: &mut Params<S>,
    cfg: &RecurrentSettings,
    in_ch: usize,
    grid: (usize, usize),
    attention: bool,
    seed: u64,
) {
    for l in 0..cfg.layers {
        let layer_in = if l == 0 { in_ch } else { cfg.out_channels() };
        cell_init(params, &format!("lstm.l{l}.f"), layer_in, cfg.hidden, cfg.kernel, grid, seed);
        cell_init(params, &format!("lstm.l{l}.b"), layer_in, cfg.hidden, cfg.kernel, grid, seed);
        if attention {
            attention_init(params, &format!("lstm.l{l}.att"), layer_in, cfg.hidden, cfg.kernel, seed);
        }
    }
}

/// Runs the stacked bidirectional ConvLSTM over `seq: [C,T,h,w]`, producing
/// `[2*hidden, T, h, w]`. The forward direction applies input attention
/// before each step when `attention` is set; the backward direction consumes
/// the reversed sequence and its outputs are re-reversed. Initial states are
/// zero.
pub fn bilayer_forward<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &RecurrentSettings,
    seq: NodeId,
    attention: bool,
) -> Result<NodeId> {
    let [_, t_n, h, w] = *g.tape.value(seq).shape() else {
        return Err(Error::ShapeMismatch {
            axis: "rank".to_string(),
            detail: format!("recurrent input must be [C,T,h,w], got {:?}", g.tape.value(seq).shape()),
        });
    };
    if t_n == 0 {
        return Err(Error::ShapeMismatch {
            axis: "t".to_string(),
            detail: "recurrent module needs at least one frame".to_string(),
        });
    }

    let mut layer_in = seq;
    for l in 0..cfg.layers {
        let frames: Vec<NodeId> = (0..t_n)
            .map(|t| g.tape.slice_time(layer_in, t))
            .collect::<Result<_>>()?;

        let zero_state = |g: &mut Graph<S>| CellState {
            c: g.input(Tensor::zeros(&[cfg.hidden, h, w])),
            h: g.input(Tensor::zeros(&[cfg.hidden, h, w])),
        };

        // forward direction, attentive
        let fwd_prefix = format!("lstm.l{l}.f");
        let att_prefix = format!("lstm.l{l}.att");
        let mut state = zero_state(g);
        let mut fwd_h = Vec::with_capacity(t_n);
        for &xt in &frames {
            let stepped_in = if attention {
                attend_input(g, &att_prefix, xt, state.h, cfg.kernel)?
            } else {
                xt
            };
            state = cell_step(g, &fwd_prefix, stepped_in, &state, cfg.kernel)?;
            fwd_h.push(state.h);
        }

        // backward direction, plain, over the reversed sequence
        let bwd_prefix = format!("lstm.l{l}.b");
        let mut state = zero_state(g);
        let mut bwd_h = vec![None; t_n];
        for t in (0..t_n).rev() {
            state = cell_step(g, &bwd_prefix, frames[t], &state, cfg.kernel)?;
            bwd_h[t] = Some(state.h);
        }

        let mut outs = Vec::with_capacity(t_n);
        for t in 0..t_n {
            outs.push(g.tape.concat_ch(fwd_h[t], bwd_h[t].unwrap())?);
        }
        layer_in = g.tape.stack_time(&outs)?;
    }
    Ok(layer_in)
}

/// Framewise classification head: flatten each frame, apply the shared linear
/// map, then average over frames. With `mean_probs` the per-frame scores pass
/// through softmax before averaging (the output is then a probability
/// vector); otherwise raw logits are averaged.
pub fn classify_head<S: Scalar>(
    g: &mut Graph<S>,
    hidden_seq: NodeId,
    classes: usize,
    mean_probs: bool,
) -> Result<NodeId> {
    let [c, t_n, h, w] = *g.tape.value(hidden_seq).shape() else {
        return Err(Error::ShapeMismatch {
            axis: "rank".to_string(),
            detail: format!("head input must be [C,T,h,w], got {:?}", g.tape.value(hidden_seq).shape()),
        });
    };
    if t_n == 0 {
        return Err(Error::ShapeMismatch {
            axis: "t".to_string(),
            detail: "head needs at least one frame".to_string(),
        });
    }
    let flat = c * h * w;
    let w_fc = g.param("head.w")?;
    let b_fc = g.param("head.b")?;
    let mut acc: Option<NodeId> = None;
    for t in 0..t_n {
        let frame = g.tape.slice_time(hidden_seq, t)?;
        let x = g.tape.reshape(frame, &[flat])?;
        let mut scores = g.tape.linear(x, w_fc, b_fc)?;
        if mean_probs {
            scores = g.tape.softmax(scores)?;
        }
        acc = Some(match acc {
            None => scores,
            Some(a) => g.tape.add(a, scores)?,
        });
    }
    let total = acc.unwrap();
    let _ = classes;
    Ok(g.tape.scale(total, S::from_f64(1.0 / t_n as f64)))
}

pub fn head_init<S: Scalar>(params: &mut Params<S>, in_features: usize, classes: usize) {
    // zero head: initial scores are exactly uniform, loss starts at ln K
    params.insert("head.w", init::zeros::<S>(&[classes, in_features]));
    params.insert("head.b", init::zeros::<S>(&[classes]));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;

    fn zero_cell_params(in_ch: usize, hidden: usize, grid: (usize, usize)) -> Params<f32> {
        let mut params = Params::new();
        cell_init(&mut params, "cell", in_ch, hidden, 1, grid, 0);
        for gate in ["i", "f", "c", "o"] {
            *params.get_mut(&format!("cell.w_x{gate}")).unwrap() =
                Tensor::zeros(&[hidden, in_ch, 1, 1]);
            *params.get_mut(&format!("cell.w_h{gate}")).unwrap() =
                Tensor::zeros(&[hidden, hidden, 1, 1]);
            *params.get_mut(&format!("cell.b_{gate}")).unwrap() = Tensor::zeros(&[hidden]);
        }
        params
    }

    #[test]
    fn zero_cell_fixed_point() {
        // all params zero, zero state: gates are 0.5, C and H stay 0
        let params = zero_cell_params(2, 3, (2, 2));
        let mut g = Graph::new(&params, Mode::Eval);
        let x = g.input(Tensor::filled(&[2, 2, 2], 1.0));
        let prev = CellState {
            c: g.input(Tensor::zeros(&[3, 2, 2])),
            h: g.input(Tensor::zeros(&[3, 2, 2])),
        };
        let next = cell_step(&mut g, "cell", x, &prev, 1).unwrap();
        assert!(g.tape.value(next.c).data().iter().all(|&v| v == 0.0));
        assert!(g.tape.value(next.h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_params_constant_cell_state() {
        // all params zero, prev C = const c: C' = 0.5c, H' = 0.5*tanh(0.5c)
        let params = zero_cell_params(1, 1, (1, 1));
        let c0 = 0.8f32;
        let mut g = Graph::new(&params, Mode::Eval);
        let x = g.input(Tensor::filled(&[1, 1, 1], 0.3));
        let prev = CellState {
            c: g.input(Tensor::filled(&[1, 1, 1], c0)),
            h: g.input(Tensor::zeros(&[1, 1, 1])),
        };
        let next = cell_step(&mut g, "cell", x, &prev, 1).unwrap();
        let c1 = g.tape.value(next.c).data()[0];
        let h1 = g.tape.value(next.h).data()[0];
        assert!((c1 - 0.5 * c0).abs() < 1e-6);
        assert!((h1 - 0.5 * (0.5 * c0).tanh()).abs() < 1e-6);
    }

    #[test]
    fn gates_bounded_hidden_below_one() {
        // |H| <= 1 elementwise over random steps
        let mut params = Params::new();
        cell_init(&mut params, "cell", 3, 4, 3, (3, 3), 77);
        let mut rng = crate::nn::init::param_rng(5, "x");
        for step in 0..100 {
            let x = Tensor::from_vec(
                &[3, 3, 3],
                (0..27).map(|_| crate::nn::init::normal(&mut rng) as f32 * 2.0).collect(),
            )
            .unwrap();
            let c = Tensor::from_vec(
                &[4, 3, 3],
                (0..36).map(|_| crate::nn::init::normal(&mut rng) as f32 * 3.0).collect(),
            )
            .unwrap();
            let h = Tensor::from_vec(
                &[4, 3, 3],
                (0..36).map(|_| crate::nn::init::normal(&mut rng) as f32).collect(),
            )
            .unwrap();
            let mut g = Graph::new(&params, Mode::Eval);
            let xn = g.input(x);
            let prev = CellState {
                c: g.input(c),
                h: g.input(h),
            };
            let next = cell_step(&mut g, "cell", xn, &prev, 3).unwrap();
            for &v in g.tape.value(next.h).data() {
                assert!(v.abs() <= 1.0, "step {step}: |H| = {}", v.abs());
            }
        }
    }

    #[test]
    fn attention_zero_params_halves_input() {
        let mut params = Params::new();
        attention_init(&mut params, "att", 2, 3, 1, 0);
        *params.get_mut("att.w_xa").unwrap() = Tensor::zeros(&[2, 2, 1, 1]);
        *params.get_mut("att.w_ha").unwrap() = Tensor::zeros(&[2, 3, 1, 1]);
        let mut g = Graph::new(&params, Mode::Eval);
        let x = g.input(Tensor::filled(&[2, 2, 2], 0.6));
        let h = g.input(Tensor::zeros(&[3, 2, 2]));
        let out = attend_input(&mut g, "att", x, h, 1).unwrap();
        for &v in g.tape.value(out).data() {
            assert!((v - 0.3).abs() < 1e-7);
        }
    }

    #[test]
    fn attention_scalar_closed_form() {
        // x = 1, prevH = 0, W_xa x = ln 3 -> a = 0.75, attended input 0.75
        let mut params = Params::new();
        params.insert("att.w_xa", Tensor::from_vec(&[1, 1, 1, 1], vec![3f32.ln()]).unwrap());
        params.insert("att.w_ha", Tensor::zeros(&[1, 1, 1, 1]));
        let mut g = Graph::new(&params, Mode::Eval);
        let x = g.input(Tensor::filled(&[1, 1, 1], 1.0));
        let h = g.input(Tensor::zeros(&[1, 1, 1]));
        let out = attend_input(&mut g, "att", x, h, 1).unwrap();
        assert!((g.tape.value(out).data()[0] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn attention_never_amplifies() {
        let mut params = Params::new();
        attention_init(&mut params, "att", 2, 2, 3, 3);
        let mut rng = crate::nn::init::param_rng(9, "x");
        for _ in 0..20 {
            let xv = Tensor::from_vec(
                &[2, 3, 3],
                (0..18).map(|_| crate::nn::init::normal(&mut rng) as f32).collect(),
            )
            .unwrap();
            let hv = Tensor::from_vec(
                &[2, 3, 3],
                (0..18).map(|_| crate::nn::init::normal(&mut rng) as f32).collect(),
            )
            .unwrap();
            let mut g = Graph::new(&params, Mode::Eval);
            let x = g.input(xv.clone());
            let h = g.input(hv);
            let out = attend_input(&mut g, "att", x, h, 3).unwrap();
            for (&o, &i) in g.tape.value(out).data().iter().zip(xv.data()) {
                assert!(o.abs() <= i.abs());
            }
        }
    }

    #[test]
    fn bilayer_shapes_and_degenerate_t() {
        let cfg = RecurrentSettings {
            hidden: 2,
            kernel: 3,
            layers: 2,
        };
        let mut params = Params::new();
        bilayer_init(&mut params, &cfg, 3, (2, 2), true, 21);
        let mut g = Graph::new(&params, Mode::Eval);
        let seq = g.input(Tensor::filled(&[3, 4, 2, 2], 0.2));
        let out = bilayer_forward(&mut g, &cfg, seq, true).unwrap();
        assert_eq!(g.tape.value(out).shape(), &[4, 4, 2, 2]);

        // T = 1 still works: both directions see the single frame
        let mut g = Graph::new(&params, Mode::Eval);
        let seq = g.input(Tensor::filled(&[3, 1, 2, 2], 0.2));
        let out = bilayer_forward(&mut g, &cfg, seq, true).unwrap();
        assert_eq!(g.tape.value(out).shape(), &[4, 1, 2, 2]);
    }

    #[test]
    fn all_zero_weights_all_zero_output() {
        let cfg = RecurrentSettings {
            hidden: 2,
            kernel: 1,
            layers: 2,
        };
        let mut params = Params::new();
        bilayer_init(&mut params, &cfg, 2, (2, 2), false, 1);
        let names: Vec<String> = params.names().cloned().collect();
        for n in names {
            let shape = params.get(&n).unwrap().shape().to_vec();
            *params.get_mut(&n).unwrap() = Tensor::zeros(&shape);
        }
        let mut g = Graph::new(&params, Mode::Eval);
        let seq = g.input(Tensor::filled(&[2, 5, 2, 2], 0.9));
        let out = bilayer_forward(&mut g, &cfg, seq, false).unwrap();
        assert!(g.tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn palindrome_with_tied_directions_swaps_halves() {
        // weight-tie both directions, disable attention: a palindromic input
        // gives outputs whose forward/backward halves swap under time reversal
        let cfg = RecurrentSettings {
            hidden: 2,
            kernel: 3,
            layers: 1,
        };
        let mut params = Params::new();
        cell_init(&mut params, "lstm.l0.f", 2, 2, 3, (3, 3), 13);
        let mut tied = Params::new();
        for (name, t) in params.iter() {
            tied.insert(name.clone(), t.clone());
            tied.insert(name.replace(".f.", ".b."), t.clone());
        }
        for (name, t) in params.iter_buffers() {
            tied.insert_buffer(name.clone(), t.clone());
        }

        let mut rng = crate::nn::init::param_rng(31, "frames");
        let a = Tensor::from_vec(
            &[2, 3, 3],
            (0..18).map(|_| crate::nn::init::normal(&mut rng) as f32).collect(),
        )
        .unwrap();
        let b = Tensor::from_vec(
            &[2, 3, 3],
            (0..18).map(|_| crate::nn::init::normal(&mut rng) as f32).collect(),
        )
        .unwrap();
        // palindrome a b b a
        let video = crate::tensor::ops::stack_time(&[&a, &b, &b, &a]).unwrap();
        let mut g = Graph::new(&tied, Mode::Eval);
        let seq = g.input(video);
        let out = bilayer_forward(&mut g, &cfg, seq, false).unwrap();
        let out = g.tape.value(out).clone();
        let t_n = 4;
        for t in 0..t_n {
            let here = crate::tensor::ops::slice_time(&out, t).unwrap();
            let mirror = crate::tensor::ops::slice_time(&out, t_n - 1 - t).unwrap();
            let half = here.len() / 2;
            // forward half at t == backward half at T-1-t, bitwise
            assert_eq!(here.data()[..half], mirror.data()[half..]);
        }
    }

    #[test]
    fn forced_attention_matches_plain_path_bitwise() {
        let cfg = RecurrentSettings {
            hidden: 2,
            kernel: 3,
            layers: 2,
        };
        let mut params = Params::new();
        bilayer_init(&mut params, &cfg, 3, (2, 2), true, 55);
        let video = Tensor::filled(&[3, 4, 2, 2], 0.4);

        let mut g1 = Graph::new(&params, Mode::Eval);
        g1.force_attention_one = true;
        let seq = g1.input(video.clone());
        let with_override = bilayer_forward(&mut g1, &cfg, seq, true).unwrap();

        let mut g2 = Graph::new(&params, Mode::Eval);
        let seq = g2.input(video);
        let plain = bilayer_forward(&mut g2, &cfg, seq, false).unwrap();

        assert_eq!(
            g1.tape.value(with_override).data(),
            g2.tape.value(plain).data()
        );
    }

    #[test]
    fn head_averages_framewise_scores() {
        let mut params = Params::new();
        head_init::<f32>(&mut params, 4, 2);
        let mut w = Tensor::zeros(&[2, 4]);
        w.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        *params.get_mut("head.w").unwrap() = w;

        // two frames engineered to produce logits [1,3] and [3,1]
        let f0 = Tensor::from_vec(&[1, 2, 2], vec![1.0, 3.0, 0.0, 0.0]).unwrap();
        let f1 = Tensor::from_vec(&[1, 2, 2], vec![3.0, 1.0, 0.0, 0.0]).unwrap();
        let seq = crate::tensor::ops::stack_time(&[&f0, &f1]).unwrap();
        let mut g = Graph::new(&params, Mode::Eval);
        let x = g.input(seq);
        let out = classify_head(&mut g, x, 2, false).unwrap();
        assert_eq!(g.tape.value(out).data(), &[2.0, 2.0]);

        // single frame: its own logits
        let mut g = Graph::new(&params, Mode::Eval);
        let x = g.input(crate::tensor::ops::stack_time(&[&f0]).unwrap());
        let out = classify_head(&mut g, x, 2, false).unwrap();
        assert_eq!(g.tape.value(out).data(), &[1.0, 3.0]);
    }

    #[test]
    fn head_mean_commutes_with_frame_permutation() {
        let mut params = Params::new();
        head_init::<f32>(&mut params, 4, 3);
        let mut rng = crate::nn::init::param_rng(3, "headw");
        let w = Tensor::from_vec(
            &[3, 4],
            (0..12).map(|_| crate::nn::init::normal(&mut rng) as f32).collect(),
        )
        .unwrap();
        *params.get_mut("head.w").unwrap() = w;
        let frames: Vec<Tensor<f32>> = (0..3)
            .map(|i| {
                Tensor::from_vec(
                    &[1, 2, 2],
                    (0..4).map(|v| ((v * 7 + i * 3) as f32).cos()).collect(),
                )
                .unwrap()
            })
            .collect();
        let run = |order: &[usize]| {
            let refs: Vec<&Tensor<f32>> = order.iter().map(|&i| &frames[i]).collect();
            let seq = crate::tensor::ops::stack_time(&refs).unwrap();
            let mut g = Graph::new(&params, Mode::Eval);
            let x = g.input(seq);
            let out = classify_head(&mut g, x, 3, false).unwrap();
            g.tape.value(out).clone()
        };
        let a = run(&[0, 1, 2]);
        let b = run(&[2, 0, 1]);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}
