//! Full network assembly: stem -> {residual, dense} branches -> attention
//! fusion -> bidirectional ConvLSTM -> framewise head, under named presets
//! and ablation modes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::NodeId;
use crate::error::{Error, Result};
use crate::nn::blocks::{
    dense_forward, dense_init, residual_forward, residual_init, stem_forward, stem_init,
    DenseSettings, ResidualSettings, StemSettings,
};
use crate::nn::convlstm::{bilayer_forward, bilayer_init, classify_head, head_init, RecurrentSettings};
use crate::nn::fusion::{fuse, fusion_init, fusion_mask, FusionSettings};
use crate::nn::{init, Graph, Mode, Params};
use crate::scalar::Scalar;
use crate::tensor::{ConvSpec, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSettings {
    pub residual: ResidualSettings,
    pub dense: DenseSettings,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMean {
    /// Average raw per-frame logits (default).
    Logits,
    /// Average per-frame softmax probabilities.
    Probs,
}

impl Default for HeadMean {
    fn default() -> Self {
        HeadMean::Logits
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSettings {
    pub k: usize,
    #[serde(default)]
    pub mean: HeadMean,
}

/// Which parts of the network the forward pass wires together. All modes
/// share one parameter set, so two models built from the same seed agree on
/// every parameter they both use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    #[serde(rename = "full")]
    Full,
    /// Fine-grained branch only, straight into the recurrent module.
    #[serde(rename = "2d-only")]
    TwoDOnly,
    /// Medium-grained branch only, straight into the recurrent module.
    #[serde(rename = "3d-only")]
    ThreeDOnly,
    /// Channel concatenation plus 1x1x1 reduction instead of the mask.
    #[serde(rename = "concat-fusion")]
    ConcatFusion,
    /// Attention parameters present but the gate forced to one.
    #[serde(rename = "no-input-attention")]
    NoInputAttention,
    /// Attention unit absent from the forward wiring.
    #[serde(rename = "plain-convlstm")]
    PlainConvLstm,
}

impl Ablation {
    pub fn all() -> [Ablation; 6] {
        [
            Ablation::Full,
            Ablation::TwoDOnly,
            Ablation::ThreeDOnly,
            Ablation::ConcatFusion,
            Ablation::NoInputAttention,
            Ablation::PlainConvLstm,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::TwoDOnly => "2d-only",
            Ablation::ThreeDOnly => "3d-only",
            Ablation::ConcatFusion => "concat-fusion",
            Ablation::NoInputAttention => "no-input-attention",
            Ablation::PlainConvLstm => "plain-convlstm",
        }
    }

    pub fn parse(s: &str) -> Result<Ablation> {
        Ablation::all()
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown ablation mode `{s}`")))
    }
}

/// Complete architectural description of one model instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: String,
    pub ablation: Ablation,
    pub input: InputDims,
    pub stem: StemSettings,
    pub branches: BranchSettings,
    #[serde(default)]
    pub fusion: FusionSettings,
    pub recurrent: RecurrentSettings,
    pub head: HeadSettings,
}

impl ModelConfig {
    /// The configuration matching the reference shape chain:
    /// 88 -> 22 -> (upsample) 24 -> 12 -> 6 -> 3 over 29 frames, with a
    /// 512-channel fused feature.
    pub fn full() -> Self {
        ModelConfig {
            preset: "full".to_string(),
            ablation: Ablation::Full,
            input: InputDims { t: 29, h: 88, w: 88 },
            stem: StemSettings {
                channels: 64,
                kernel: [5, 7, 7],
                stride: 2,
                pool: [3, 3],
                pool_stride: 2,
                pool_pad: 1,
                upsample: [24, 24],
            },
            branches: BranchSettings {
                residual: ResidualSettings {
                    stages: vec![3, 4, 6, 3],
                    widths: vec![64, 128, 256, 512],
                    strides: vec![1, 2, 2, 2],
                },
                dense: DenseSettings {
                    blocks: vec![12, 12, 12, 12],
                    growth: 32,
                    temporal_kernel: 3,
                },
            },
            fusion: FusionSettings::default(),
            recurrent: RecurrentSettings {
                hidden: 256,
                kernel: 3,
                layers: 2,
            },
            head: HeadSettings {
                k: 500,
                mean: HeadMean::Logits,
            },
        }
    }

    /// Desk-scale preset used for training on the synthetic corpus.
    pub fn tiny() -> Self {
        ModelConfig {
            preset: "tiny".to_string(),
            ablation: Ablation::Full,
            input: InputDims { t: 8, h: 32, w: 32 },
            stem: StemSettings {
                channels: 8,
                kernel: [1, 5, 5],
                stride: 2,
                pool: [3, 3],
                pool_stride: 2,
                pool_pad: 1,
                upsample: [8, 8],
            },
            branches: BranchSettings {
                residual: ResidualSettings {
                    stages: vec![1, 1, 1],
                    widths: vec![16, 32, 32],
                    strides: vec![1, 2, 2],
                },
                dense: DenseSettings {
                    blocks: vec![2, 2, 2],
                    growth: 8,
                    temporal_kernel: 3,
                },
            },
            fusion: FusionSettings::default(),
            recurrent: RecurrentSettings {
                hidden: 8,
                kernel: 3,
                layers: 2,
            },
            head: HeadSettings {
                k: 8,
                mean: HeadMean::Logits,
            },
        }
    }

    /// Sub-5k-parameter preset sized so end-to-end finite-difference checks
    /// over every parameter stay fast and well conditioned.
    pub fn micro() -> Self {
        ModelConfig {
            preset: "micro".to_string(),
            ablation: Ablation::Full,
            input: InputDims { t: 3, h: 12, w: 12 },
            stem: StemSettings {
                channels: 3,
                kernel: [1, 3, 3],
                stride: 2,
                pool: [3, 3],
                pool_stride: 2,
                pool_pad: 1,
                upsample: [3, 3],
            },
            branches: BranchSettings {
                residual: ResidualSettings {
                    stages: vec![1],
                    widths: vec![6],
                    strides: vec![1],
                },
                dense: DenseSettings {
                    blocks: vec![1],
                    growth: 3,
                    temporal_kernel: 3,
                },
            },
            fusion: FusionSettings::default(),
            recurrent: RecurrentSettings {
                hidden: 2,
                kernel: 3,
                layers: 2,
            },
            head: HeadSettings {
                k: 3,
                mean: HeadMean::Logits,
            },
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "tiny" => Ok(Self::tiny()),
            "micro" => Ok(Self::micro()),
            other => Err(Error::InvalidConfig(format!("unknown preset `{other}`"))),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::InvalidConfig(format!("config parse error: {e}")))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Shared feature width of both branches (the fused feature channels).
    pub fn feature_channels(&self) -> usize {
        self.branches.residual.out_channels()
    }

    /// Spatial extent of the branch outputs / recurrent grid.
    pub fn feature_grid(&self) -> Result<(usize, usize)> {
        let rh = self.branches.residual.out_extent(self.stem.upsample[0]);
        let rw = self.branches.residual.out_extent(self.stem.upsample[1]);
        Ok((rh, rw))
    }

    pub fn validate(&self) -> Result<()> {
        self.branches.residual.validate()?;
        self.branches.dense.validate()?;
        self.recurrent.validate()?;
        if self.head.k < 2 {
            return Err(Error::InvalidConfig("head needs at least two classes".into()));
        }
        let pooled_h = self.stem.pooled_extent(self.input.h)?;
        let pooled_w = self.stem.pooled_extent(self.input.w)?;
        if self.stem.upsample[0] < pooled_h || self.stem.upsample[1] < pooled_w {
            return Err(Error::InvalidConfig(format!(
                "stem upsample {:?} below pooled extent {}x{}",
                self.stem.upsample, pooled_h, pooled_w
            )));
        }
        // branch shape agreement
        let rh = self.branches.residual.out_extent(self.stem.upsample[0]);
        let rw = self.branches.residual.out_extent(self.stem.upsample[1]);
        let dh = self.branches.dense.out_extent(self.stem.upsample[0]);
        let dw = self.branches.dense.out_extent(self.stem.upsample[1]);
        if (rh, rw) != (dh, dw) {
            return Err(Error::InvalidConfig(format!(
                "branch output extents disagree: residual {rh}x{rw} vs dense {dh}x{dw}"
            )));
        }
        if rh == 0 || rw == 0 {
            return Err(Error::InvalidConfig("branch output collapsed to zero extent".into()));
        }
        Ok(())
    }
}

/// Expected trainable scalar count for the named presets, asserted at build.
fn expected_census(preset: &str) -> Option<usize> {
    match preset {
        "full" => Some(FULL_CENSUS),
        "tiny" => Some(TINY_CENSUS),
        "micro" => Some(MICRO_CENSUS),
        _ => None,
    }
}

pub const FULL_CENSUS: usize = 77_758_444;
pub const TINY_CENSUS: usize = 116_326;
pub const MICRO_CENSUS: usize = 4_049;

/// Extra forward-pass switches used by diagnostics and tests.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOpts {
    /// Replace the attention gate by an all-ones map.
    pub force_attention_one: bool,
    /// Skip the recurrent module and feed branch features straight to the
    /// head (requires `2*hidden == feature_channels`).
    pub bypass_recurrence: bool,
}

/// Input standardization constants (computed over the training pixels).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization { mean: 0.0, std: 1.0 }
    }
}

/// A built model: configuration, parameters, and run metadata.
#[derive(Clone)]
pub struct Model<S: Scalar> {
    pub config: ModelConfig,
    pub params: Params<S>,
    pub norm: Normalization,
    pub seed: u64,
}

impl<S: Scalar> Model<S> {
    /// Deterministically initializes all parameters (every ablation mode's
    /// parameters exist regardless of the configured mode) and checks the
    /// preset census. Identical seeds yield bit-identical parameters.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Params::new();
        let cfeat = config.feature_channels();
        let grid = config.feature_grid()?;

        stem_init(&mut params, &config.stem, seed);
        residual_init(&mut params, &config.branches.residual, config.stem.channels, seed);
        dense_init(&mut params, &config.branches.dense, config.stem.channels, cfeat, seed);
        fusion_init(&mut params, &config.fusion, cfeat, seed);
        // concat-fusion reduction back to the shared width
        params.insert(
            "fusion.cat.w",
            init::he_normal::<S>(seed, "fusion.cat.w", &[cfeat, 2 * cfeat, 1, 1, 1], 2 * cfeat),
        );
        params.insert("fusion.cat.b", init::zeros::<S>(&[cfeat]));
        bilayer_init(&mut params, &config.recurrent, cfeat, grid, true, seed);
        head_init::<S>(
            &mut params,
            config.recurrent.out_channels() * grid.0 * grid.1,
            config.head.k,
        );

        if let Some(expect) = expected_census(&config.preset) {
            let got = params.total_scalars();
            if got != expect {
                return Err(Error::InvalidConfig(format!(
                    "parameter census for preset `{}`: expected {expect}, built {got}",
                    config.preset
                )));
            }
        }
        Ok(Model {
            config,
            params,
            norm: Normalization::default(),
            seed,
        })
    }

    fn check_video(&self, video: &Tensor<S>) -> Result<()> {
        let d = self.config.input;
        if video.shape() != [1, d.t, d.h, d.w] {
            return Err(Error::ShapeMismatch {
                axis: "all".to_string(),
                detail: format!(
                    "video shape {:?} does not match preset input [1,{},{},{}]",
                    video.shape(),
                    d.t,
                    d.h,
                    d.w
                ),
            });
        }
        Ok(())
    }

    fn standardize(&self, video: &Tensor<S>) -> Tensor<S> {
        let m = S::from_f64(self.norm.mean);
        let inv = S::from_f64(1.0 / self.norm.std);
        video.map(|v| (v - m) * inv)
    }

    /// Composes the network on an existing graph; returns the score node
    /// (averaged logits, or averaged probabilities under `HeadMean::Probs`).
    pub fn forward_on(&self, g: &mut Graph<S>, video: &Tensor<S>, opts: ForwardOpts) -> Result<NodeId> {
        self.check_video(video)?;
        let cfg = &self.config;
        let x = g.input(self.standardize(video));
        g.mark("input", x);

        let stem = stem_forward(g, &cfg.stem, x)?;

        let ab = cfg.ablation;
        let need_s = !matches!(ab, Ablation::ThreeDOnly);
        let need_t = !matches!(ab, Ablation::TwoDOnly);
        let s_feat = if need_s {
            let s = residual_forward(g, &cfg.branches.residual, stem)?;
            g.mark("branch.s", s);
            Some(s)
        } else {
            None
        };
        let t_feat = if need_t {
            let t = dense_forward(g, &cfg.branches.dense, stem)?;
            g.mark("branch.t", t);
            Some(t)
        } else {
            None
        };

        let fused = match ab {
            Ablation::Full | Ablation::NoInputAttention | Ablation::PlainConvLstm => {
                fuse(g, &cfg.fusion, s_feat.unwrap(), t_feat.unwrap())?
            }
            Ablation::ConcatFusion => {
                let cat = g.tape.concat_ch(t_feat.unwrap(), s_feat.unwrap())?;
                let w = g.param("fusion.cat.w")?;
                let b = g.param("fusion.cat.b")?;
                g.tape.conv3d(cat, w, Some(b), &ConvSpec::cube(1, 1, 1))?
            }
            Ablation::TwoDOnly => s_feat.unwrap(),
            Ablation::ThreeDOnly => t_feat.unwrap(),
        };
        g.mark("fused", fused);

        let rec_out = if opts.bypass_recurrence {
            let cfeat = cfg.feature_channels();
            if cfg.recurrent.out_channels() != cfeat {
                return Err(Error::InvalidConfig(format!(
                    "bypass_recurrence needs 2*hidden == feature channels ({} vs {cfeat})",
                    cfg.recurrent.out_channels()
                )));
            }
            fused
        } else {
            let attention = !matches!(ab, Ablation::PlainConvLstm);
            let prev_force = g.force_attention_one;
            g.force_attention_one =
                prev_force || opts.force_attention_one || matches!(ab, Ablation::NoInputAttention);
            let out = bilayer_forward(g, &cfg.recurrent, fused, attention)?;
            g.force_attention_one = prev_force;
            out
        };
        g.mark("recurrent", rec_out);

        let scores = classify_head(
            g,
            rec_out,
            cfg.head.k,
            matches!(cfg.head.mean, HeadMean::Probs),
        )?;
        g.mark("scores", scores);
        Ok(scores)
    }

    /// Single forward pass; returns the final class scores.
    pub fn forward(&self, video: &Tensor<S>, mode: Mode, opts: ForwardOpts) -> Result<Tensor<S>> {
        let mut g = Graph::new(&self.params, mode);
        let scores = self.forward_on(&mut g, video, opts)?;
        Ok(g.tape.value(scores).clone())
    }

    /// Eval forward that also reports the shapes of named intermediates.
    pub fn forward_trace(&self, video: &Tensor<S>) -> Result<(Tensor<S>, Vec<(String, Vec<usize>)>)> {
        let mut g = Graph::new(&self.params, Mode::Eval).with_trace();
        let scores = self.forward_on(&mut g, video, ForwardOpts::default())?;
        let out = g.tape.value(scores).clone();
        Ok((out, g.trace.take().unwrap_or_default()))
    }

    /// The raw attention mask for a given video, for offline inspection.
    pub fn export_mask(&self, video: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_video(video)?;
        let mut g = Graph::new(&self.params, Mode::Eval);
        let x = g.input(self.standardize(video));
        let stem = stem_forward(&mut g, &self.config.stem, x)?;
        let t_feat = dense_forward(&mut g, &self.config.branches.dense, stem)?;
        let s_feat = if self.config.fusion.condition_both {
            Some(residual_forward(&mut g, &self.config.branches.residual, stem)?)
        } else {
            None
        };
        let mask = fusion_mask(&mut g, &self.config.fusion, t_feat, s_feat)?;
        Ok(g.tape.value(mask).clone())
    }
}

/// Writes every parameter (and buffer) as one MGT1 file plus a manifest
/// mapping `name kind file` per line.
pub fn export_params<S: Scalar>(params: &Params<S>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (name, t) in params.iter() {
        let file = format!("{name}.mgt");
        crate::tensor::io::write_tensor(&dir.join(&file), t)?;
        manifest.push_str(&format!("{name} param {file}\n"));
    }
    for (name, t) in params.iter_buffers() {
        let file = format!("{name}.buf.mgt");
        crate::tensor::io::write_tensor(&dir.join(&file), t)?;
        manifest.push_str(&format!("{name} buffer {file}\n"));
    }
    std::fs::write(dir.join("params.manifest"), manifest)?;
    Ok(())
}

/// Reads a parameter set written by [`export_params`].
pub fn import_params<S: Scalar>(dir: &Path) -> Result<Params<S>> {
    let manifest = std::fs::read_to_string(dir.join("params.manifest"))?;
    let mut params = Params::new();
    for (lineno, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(Error::ExtentMismatch {
                path: dir.join("params.manifest").display().to_string(),
                detail: format!("line {} is not `name kind file`", lineno + 1),
            });
        }
        let t = crate::tensor::io::read_tensor(&dir.join(parts[2]))?;
        match parts[1] {
            "param" => params.insert(parts[0], t),
            "buffer" => params.insert_buffer(parts[0], t),
            other => {
                return Err(Error::ExtentMismatch {
                    path: dir.join("params.manifest").display().to_string(),
                    detail: format!("unknown kind `{other}` on line {}", lineno + 1),
                })
            }
        }
    }
    Ok(params)
}
