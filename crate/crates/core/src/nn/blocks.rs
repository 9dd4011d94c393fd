//! Front-end building blocks: the shared 3D stem, the per-frame residual
//! branch, and the densely connected 3D branch.
//!
//! Both branches preserve the temporal extent end-to-end; only spatial
//! resolution is reduced. The residual branch mixes nothing across time
//! (2D convolutions treat frames as a batch), while the dense branch's
//! `kt x 3 x 3` kernels mix adjacent frames.

use serde::{Deserialize, Serialize};

use crate::autodiff::NodeId;
use crate::error::{Error, Result};
use crate::nn::{init, Graph, Params};
use crate::scalar::Scalar;
use crate::tensor::ConvSpec;

pub fn bn_init<S: Scalar>(params: &mut Params<S>, prefix: &str, channels: usize) {
    params.insert(format!("{prefix}.gamma"), init::constant(&[channels], 1.0));
    params.insert(format!("{prefix}.beta"), init::zeros(&[channels]));
    params.insert_buffer(format!("{prefix}.mean"), init::zeros(&[channels]));
    params.insert_buffer(format!("{prefix}.var"), init::constant(&[channels], 1.0));
}

// ---------------------------------------------------------------------------
// stem
// ---------------------------------------------------------------------------

/// Shared spatio-temporal stem: conv3d (temporal padding preserves T) ->
/// batch norm -> ReLU -> spatial max pool -> nearest upsample to the branch
/// input resolution.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSettings {
    pub channels: usize,
    /// Conv kernel as (t, h, w).
    pub kernel: [usize; 3],
    /// Spatial stride of the stem convolution.
    pub stride: usize,
    /// Spatial max-pool kernel.
    pub pool: [usize; 2],
    pub pool_stride: usize,
    pub pool_pad: usize,
    /// Branch input resolution (h, w) produced by nearest upsampling.
    pub upsample: [usize; 2],
}

impl StemSettings {
    pub fn conv_spec(&self) -> ConvSpec {
        let [kt, kh, kw] = self.kernel;
        ConvSpec::cube(kt, kh, kw)
            .with_stride(1, self.stride, self.stride)
            .with_pad(kt / 2, kh / 2, kw / 2)
    }

    pub fn pool_spec(&self) -> ConvSpec {
        ConvSpec::spatial(self.pool[0], self.pool[1])
            .with_stride(1, self.pool_stride, self.pool_stride)
            .with_pad(0, self.pool_pad, self.pool_pad)
    }

    /// Spatial extent after conv and pool, before upsampling.
    pub fn pooled_extent(&self, n: usize) -> Result<usize> {
        let c = self.conv_spec().out_extent(1, n)?;
        self.pool_spec().out_extent(1, c)
    }
}

pub fn stem_init<S: Scalar>(params: &mut Params<S>, cfg: &StemSettings, seed: u64) {
    let [kt, kh, kw] = cfg.kernel;
    let fan_in = kt * kh * kw;
    params.insert(
        "stem.conv.w",
        init::he_normal(seed, "stem.conv.w", &[cfg.channels, 1, kt, kh, kw], fan_in),
    );
    params.insert("stem.conv.b", init::zeros::<S>(&[cfg.channels]));
    bn_init(params, "stem.bn", cfg.channels);
}

pub fn stem_forward<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &StemSettings,
    video: NodeId,
) -> Result<NodeId> {
    let shape = g.tape.value(video).shape().to_vec();
    let [c, t, _h, _w] = shape[..] else {
        return Err(Error::ShapeMismatch {
            axis: "rank".to_string(),
            detail: format!("stem expects [1,T,H,W], got {shape:?}"),
        });
    };
    if c != 1 {
        return Err(Error::ShapeMismatch {
            axis: "channel".to_string(),
            detail: format!("stem expects a single input channel, got {c}"),
        });
    }
    if t < 1 {
        return Err(Error::ShapeMismatch {
            axis: "t".to_string(),
            detail: "stem needs at least one frame".to_string(),
        });
    }
    let w = g.param("stem.conv.w")?;
    let b = g.param("stem.conv.b")?;
    let x = g.tape.conv3d(video, w, Some(b), &cfg.conv_spec())?;
    g.mark("stem.conv", x);
    let x = g.batchnorm(x, "stem.bn")?;
    let x = g.tape.relu(x);
    let x = g.tape.maxpool(x, &cfg.pool_spec())?;
    g.mark("stem.pool", x);
    let x = g.tape.upsample_nearest(x, cfg.upsample[0], cfg.upsample[1])?;
    g.mark("stem.up", x);
    Ok(x)
}

// ---------------------------------------------------------------------------
// residual (fine-grained, per-frame) branch
// ---------------------------------------------------------------------------

/// Per-frame residual branch: basic two-conv blocks grouped into stages.
/// `stages[i]` blocks at `widths[i]` channels, first block of each stage
/// striding spatially by `strides[i]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualSettings {
    pub stages: Vec<usize>,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
}

impl ResidualSettings {
    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != self.widths.len() || self.stages.len() != self.strides.len() {
            return Err(Error::InvalidConfig(format!(
                "residual stages/widths/strides lengths disagree: {}/{}/{}",
                self.stages.len(),
                self.widths.len(),
                self.strides.len()
            )));
        }
        if self.stages.is_empty() {
            return Err(Error::InvalidConfig("residual branch needs at least one stage".into()));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn out_extent(&self, mut n: usize) -> usize {
        for &s in &self.strides {
            n = (n + 2 - 3) / s + 1; // 3x3 conv, pad 1
        }
        n
    }

    /// Number of convolutions inside blocks (projection shortcuts excluded,
    /// as in the usual depth naming).
    pub fn block_conv_count(&self) -> usize {
        2 * self.stages.iter().sum::<usize>()
    }

    pub fn projection_count(&self, mut in_ch: usize) -> usize {
        let mut n = 0;
        for (i, &w) in self.widths.iter().enumerate() {
            if self.strides[i] != 1 || in_ch != w {
                n += 1;
            }
            in_ch = w;
        }
        n
    }
}

pub fn residual_init<S: Scalar>(
    params: &mut Params<S>,
    cfg: &ResidualSettings,
    in_ch: usize,
    seed: u64,
) {
    let mut cin = in_ch;
    for (si, (&blocks, (&width, &stride))) in cfg
        .stages
        .iter()
        .zip(cfg.widths.iter().zip(&cfg.strides))
        .enumerate()
    {
        for bi in 0..blocks {
            let p = format!("res.s{si}.b{bi}");
            let block_in = if bi == 0 { cin } else { width };
            let block_stride = if bi == 0 { stride } else { 1 };
            params.insert(
                format!("{p}.conv1.w"),
                init::he_normal(seed, &format!("{p}.conv1.w"), &[width, block_in, 3, 3], block_in * 9),
            );
            params.insert(format!("{p}.conv1.b"), init::zeros::<S>(&[width]));
            bn_init(params, &format!("{p}.bn1"), width);
            params.insert(
                format!("{p}.conv2.w"),
                init::he_normal(seed, &format!("{p}.conv2.w"), &[width, width, 3, 3], width * 9),
            );
            params.insert(format!("{p}.conv2.b"), init::zeros::<S>(&[width]));
            bn_init(params, &format!("{p}.bn2"), width);
            if bi == 0 && (block_stride != 1 || block_in != width) {
                params.insert(
                    format!("{p}.proj.w"),
                    init::he_normal(seed, &format!("{p}.proj.w"), &[width, block_in, 1, 1], block_in),
                );
                params.insert(format!("{p}.proj.b"), init::zeros::<S>(&[width]));
                bn_init(params, &format!("{p}.proj_bn"), width);
            }
        }
        cin = width;
    }
}

pub fn residual_forward<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &ResidualSettings,
    mut x: NodeId,
) -> Result<NodeId> {
    let mut cin = g.tape.value(x).extent(0);
    for (si, (&blocks, (&width, &stride))) in cfg
        .stages
        .iter()
        .zip(cfg.widths.iter().zip(&cfg.strides))
        .enumerate()
    {
        for bi in 0..blocks {
            let p = format!("res.s{si}.b{bi}");
            let block_in = if bi == 0 { cin } else { width };
            let block_stride = if bi == 0 { stride } else { 1 };
            let spec1 = ConvSpec::spatial(3, 3)
                .with_stride(1, block_stride, block_stride)
                .with_pad(0, 1, 1);
            let w1 = g.param(&format!("{p}.conv1.w"))?;
            let b1 = g.param(&format!("{p}.conv1.b"))?;
            let mut y = g.tape.conv2d(x, w1, Some(b1), &spec1)?;
            y = g.batchnorm(y, &format!("{p}.bn1"))?;
            y = g.tape.relu(y);
            let spec2 = ConvSpec::spatial(3, 3).with_pad(0, 1, 1);
            let w2 = g.param(&format!("{p}.conv2.w"))?;
            let b2 = g.param(&format!("{p}.conv2.b"))?;
            y = g.tape.conv2d(y, w2, Some(b2), &spec2)?;
            y = g.batchnorm(y, &format!("{p}.bn2"))?;

            let shortcut = if bi == 0 && (block_stride != 1 || block_in != width) {
                let spec = ConvSpec::spatial(1, 1).with_stride(1, block_stride, block_stride);
                let pw = g.param(&format!("{p}.proj.w"))?;
                let pb = g.param(&format!("{p}.proj.b"))?;
                let s = g.tape.conv2d(x, pw, Some(pb), &spec)?;
                g.batchnorm(s, &format!("{p}.proj_bn"))?
            } else {
                x
            };
            let sum = g.tape.add(y, shortcut)?;
            x = g.tape.relu(sum);
        }
        g.mark(&format!("res.s{si}"), x);
        cin = width;
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// dense (medium-grained, spatio-temporal) branch
// ---------------------------------------------------------------------------

/// Densely connected 3D branch. Each dense layer is BN -> ReLU -> conv3d
/// `kt x 3 x 3` producing `growth` channels concatenated onto the running
/// feature. Transitions between blocks halve channels (1x1x1 conv) and halve
/// the spatial extent (1x2x2 max pool); time is never downsampled. A final
/// 1x1x1 convolution projects to the shared feature width.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseSettings {
    /// Dense layers per block.
    pub blocks: Vec<usize>,
    pub growth: usize,
    /// Temporal kernel extent of dense-layer convolutions.
    pub temporal_kernel: usize,
}

impl DenseSettings {
    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::InvalidConfig("dense branch needs at least one block".into()));
        }
        if self.growth == 0 {
            return Err(Error::InvalidConfig("dense growth must be >= 1".into()));
        }
        if self.temporal_kernel % 2 == 0 {
            return Err(Error::InvalidConfig(
                "dense temporal kernel must be odd to preserve T".into(),
            ));
        }
        Ok(())
    }

    /// Channels entering each block and after the final block, given input
    /// channels. Transition compression is 1/2.
    pub fn channel_plan(&self, in_ch: usize) -> Vec<usize> {
        let mut plan = vec![in_ch];
        let mut c = in_ch;
        for (i, &layers) in self.blocks.iter().enumerate() {
            c += layers * self.growth;
            if i + 1 < self.blocks.len() {
                c /= 2;
            }
            plan.push(c);
        }
        plan
    }

    pub fn out_extent(&self, mut n: usize) -> usize {
        for _ in 0..self.blocks.len().saturating_sub(1) {
            n = (n - 2) / 2 + 1; // 1x2x2 pool, stride 2
        }
        n
    }

    /// Weighted layers: dense convs + transition convs + final projection.
    pub fn weighted_layers(&self) -> usize {
        self.blocks.iter().sum::<usize>() + (self.blocks.len() - 1) + 1
    }
}

pub fn dense_init<S: Scalar>(
    params: &mut Params<S>,
    cfg: &DenseSettings,
    in_ch: usize,
    out_ch: usize,
    seed: u64,
) {
    let kt = cfg.temporal_kernel;
    let mut c = in_ch;
    for (bi, &layers) in cfg.blocks.iter().enumerate() {
        for li in 0..layers {
            let p = format!("dense.b{bi}.l{li}");
            bn_init(params, &format!("{p}.bn"), c);
            params.insert(
                format!("{p}.conv.w"),
                init::he_normal(
                    seed,
                    &format!("{p}.conv.w"),
                    &[cfg.growth, c, kt, 3, 3],
                    c * kt * 9,
                ),
            );
            params.insert(format!("{p}.conv.b"), init::zeros::<S>(&[cfg.growth]));
            c += cfg.growth;
        }
        if bi + 1 < cfg.blocks.len() {
            let p = format!("dense.t{bi}");
            bn_init(params, &format!("{p}.bn"), c);
            let half = c / 2;
            params.insert(
                format!("{p}.conv.w"),
                init::he_normal(seed, &format!("{p}.conv.w"), &[half, c, 1, 1, 1], c),
            );
            params.insert(format!("{p}.conv.b"), init::zeros::<S>(&[half]));
            c = half;
        }
    }
    bn_init(params, "dense.final.bn1", c);
    params.insert(
        "dense.final.conv.w",
        init::he_normal(seed, "dense.final.conv.w", &[out_ch, c, 1, 1, 1], c),
    );
    params.insert("dense.final.conv.b", init::zeros::<S>(&[out_ch]));
    bn_init(params, "dense.final.bn2", out_ch);
}

pub fn dense_forward<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &DenseSettings,
    x: NodeId,
) -> Result<NodeId> {
    let kt = cfg.temporal_kernel;
    let layer_spec = ConvSpec::cube(kt, 3, 3).with_pad(kt / 2, 1, 1);
    let point_spec = ConvSpec::cube(1, 1, 1);
    let pool_spec = ConvSpec::spatial(2, 2).with_stride(1, 2, 2);

    let mut feat = x;
    for (bi, &layers) in cfg.blocks.iter().enumerate() {
        for li in 0..layers {
            let p = format!("dense.b{bi}.l{li}");
            let y = g.batchnorm(feat, &format!("{p}.bn"))?;
            let y = g.tape.relu(y);
            let w = g.param(&format!("{p}.conv.w"))?;
            let b = g.param(&format!("{p}.conv.b"))?;
            let y = g.tape.conv3d(y, w, Some(b), &layer_spec)?;
            feat = g.tape.concat_ch(feat, y)?;
        }
        if bi + 1 < cfg.blocks.len() {
            let p = format!("dense.t{bi}");
            let y = g.batchnorm(feat, &format!("{p}.bn"))?;
            let y = g.tape.relu(y);
            let w = g.param(&format!("{p}.conv.w"))?;
            let b = g.param(&format!("{p}.conv.b"))?;
            let y = g.tape.conv3d(y, w, Some(b), &point_spec)?;
            feat = g.tape.maxpool(y, &pool_spec)?;
            g.mark(&format!("dense.t{bi}"), feat);
        }
    }
    let y = g.batchnorm(feat, "dense.final.bn1")?;
    let y = g.tape.relu(y);
    let w = g.param("dense.final.conv.w")?;
    let b = g.param("dense.final.conv.b")?;
    let y = g.tape.conv3d(y, w, Some(b), &point_spec)?;
    let y = g.batchnorm(y, "dense.final.bn2")?;
    Ok(g.tape.relu(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::tensor::Tensor;

    fn tiny_stem() -> StemSettings {
        StemSettings {
            channels: 4,
            kernel: [1, 5, 5],
            stride: 2,
            pool: [3, 3],
            pool_stride: 2,
            pool_pad: 1,
            upsample: [8, 8],
        }
    }

    #[test]
    fn stem_shape_contract() {
        let cfg = tiny_stem();
        let mut params = Params::<f32>::new();
        stem_init(&mut params, &cfg, 1);
        let mut g = Graph::new(&params, Mode::Eval);
        let video = g.input(Tensor::filled(&[1, 3, 32, 32], 0.5));
        let out = stem_forward(&mut g, &cfg, video).unwrap();
        assert_eq!(g.tape.value(out).shape(), &[4, 3, 8, 8]);
    }

    #[test]
    fn stem_zero_input_zero_output() {
        // zero input, eval BN with zero running mean / unit var, beta 0 -> ReLU(0) = 0
        let cfg = tiny_stem();
        let mut params = Params::<f32>::new();
        stem_init(&mut params, &cfg, 1);
        let mut g = Graph::new(&params, Mode::Eval);
        let video = g.input(Tensor::zeros(&[1, 2, 32, 32]));
        let out = stem_forward(&mut g, &cfg, video).unwrap();
        assert!(g.tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_branch_shapes_and_census() {
        let cfg = ResidualSettings {
            stages: vec![1, 1, 1],
            widths: vec![8, 16, 16],
            strides: vec![1, 2, 2],
        };
        cfg.validate().unwrap();
        assert_eq!(cfg.out_extent(8), 2);
        assert_eq!(cfg.block_conv_count(), 6);
        assert_eq!(cfg.projection_count(4), 3);

        let mut params = Params::<f32>::new();
        residual_init(&mut params, &cfg, 4, 9);
        let mut g = Graph::new(&params, Mode::Eval);
        let x = g.input(Tensor::filled(&[4, 2, 8, 8], 0.1));
        let out = residual_forward(&mut g, &cfg, x).unwrap();
        assert_eq!(g.tape.value(out).shape(), &[16, 2, 2, 2]);
    }

    #[test]
    fn residual_branch_commutes_with_frame_permutation() {
        // per-frame operator: permuting input frames permutes outputs identically
        let cfg = ResidualSettings {
            stages: vec![1],
            widths: vec![6],
            strides: vec![1],
        };
        let mut params = Params::<f32>::new();
        residual_init(&mut params, &cfg, 3, 5);

        let frames: Vec<Tensor<f32>> = (0..3)
            .map(|i| {
                Tensor::from_vec(
                    &[3, 4, 4],
                    (0..48).map(|v| ((v + i * 13) as f32 * 0.37).sin()).collect(),
                )
                .unwrap()
            })
            .collect();
        let run = |order: &[usize]| {
            let refs: Vec<&Tensor<f32>> = order.iter().map(|&i| &frames[i]).collect();
            let video = crate::tensor::ops::stack_time(&refs).unwrap();
            let mut g = Graph::new(&params, Mode::Eval);
            let x = g.input(video);
            let out = residual_forward(&mut g, &cfg, x).unwrap();
            g.tape.value(out).clone()
        };
        let fwd = run(&[0, 1, 2]);
        let perm = run(&[2, 0, 1]);
        // frame t of the permuted output equals frame perm[t] of the original, bitwise
        for (t, &src) in [2usize, 0, 1].iter().enumerate() {
            let a = crate::tensor::ops::slice_time(&perm, t).unwrap();
            let b = crate::tensor::ops::slice_time(&fwd, src).unwrap();
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn dense_branch_shapes_and_plan() {
        let cfg = DenseSettings {
            blocks: vec![2, 2],
            growth: 4,
            temporal_kernel: 3,
        };
        cfg.validate().unwrap();
        assert_eq!(cfg.channel_plan(4), vec![4, 6, 14]);
        assert_eq!(cfg.out_extent(8), 4);
        assert_eq!(cfg.weighted_layers(), 6);

        let mut params = Params::<f32>::new();
        dense_init(&mut params, &cfg, 4, 16, 9);
        let mut g = Graph::new(&params, Mode::Eval);
        let x = g.input(Tensor::filled(&[4, 3, 8, 8], 0.2));
        let out = dense_forward(&mut g, &cfg, x).unwrap();
        assert_eq!(g.tape.value(out).shape(), &[16, 3, 4, 4]);
    }

    #[test]
    fn dense_branch_mixes_time() {
        // With a temporal kernel > 1, frame permutation does not commute:
        // find a crafted input where permuted frames give different features.
        let cfg = DenseSettings {
            blocks: vec![1],
            growth: 4,
            temporal_kernel: 3,
        };
        let mut params = Params::<f32>::new();
        dense_init(&mut params, &cfg, 2, 4, 11);

        let frames: Vec<Tensor<f32>> = (0..4)
            .map(|i| Tensor::filled(&[2, 3, 3], i as f32))
            .collect();
        let run = |order: &[usize]| {
            let refs: Vec<&Tensor<f32>> = order.iter().map(|&i| &frames[i]).collect();
            let video = crate::tensor::ops::stack_time(&refs).unwrap();
            let mut g = Graph::new(&params, Mode::Eval);
            let x = g.input(video);
            let out = dense_forward(&mut g, &cfg, x).unwrap();
            g.tape.value(out).clone()
        };
        let a = run(&[0, 1, 2, 3]);
        let b = run(&[3, 1, 2, 0]);
        // the permuted-input output is not a frame permutation of the original
        let b0 = crate::tensor::ops::slice_time(&b, 1).unwrap();
        let a1 = crate::tensor::ops::slice_time(&a, 1).unwrap();
        assert_ne!(a1.data(), b0.data());

        // zero input: output constant across frames regardless of ordering
        let zeros = Tensor::zeros(&[2, 4, 3, 3]);
        let mut g = Graph::new(&params, Mode::Eval);
        let x = g.input(zeros);
        let out = dense_forward(&mut g, &cfg, x).unwrap();
        let f0 = crate::tensor::ops::slice_time(g.tape.value(out), 0).unwrap();
        let f3 = crate::tensor::ops::slice_time(g.tape.value(out), 3).unwrap();
        assert_eq!(f0.data(), f3.data());
    }
}
