//! Attention-mask fusion of the fine-grained (per-frame) and medium-grained
//! (spatio-temporal) branch features.
//!
//! The mask is a sigmoid of a 1x1x1 convolution of the medium-grained
//! feature, and the fused output is the position-wise convex combination
//! `F = T (.) mask + S (.) (1 - mask)`, computed as `S + mask (.) (T - S)` so
//! equal inputs fuse to themselves exactly.

use serde::{Deserialize, Serialize};

use crate::autodiff::NodeId;
use crate::error::{Error, Result};
use crate::nn::{init, Graph, Params};
use crate::scalar::Scalar;
use crate::tensor::ConvSpec;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionSettings {
    /// Mask has a single broadcast channel instead of one per feature channel.
    #[serde(default)]
    pub single_channel_mask: bool,
    /// Condition the mask on both branch outputs instead of the
    /// medium-grained one only.
    #[serde(default)]
    pub condition_both: bool,
    /// Include a bias term in the mask convolution.
    #[serde(default)]
    pub bias: bool,
}

impl Default for FusionSettings {
    fn default() -> Self {
        FusionSettings {
            single_channel_mask: false,
            condition_both: false,
            bias: false,
        }
    }
}

impl FusionSettings {
    pub fn mask_channels(&self, channels: usize) -> usize {
        if self.single_channel_mask {
            1
        } else {
            channels
        }
    }

    pub fn cond_channels(&self, channels: usize) -> usize {
        if self.condition_both {
            2 * channels
        } else {
            channels
        }
    }
}

pub fn fusion_init<S: Scalar>(params: &mut Params<S>, cfg: &FusionSettings, channels: usize, seed: u64) {
    let out = cfg.mask_channels(channels);
    let cond = cfg.cond_channels(channels);
    params.insert(
        "fusion.w",
        init::he_normal(seed, "fusion.w", &[out, cond, 1, 1, 1], cond),
    );
    if cfg.bias {
        params.insert("fusion.b", init::zeros::<S>(&[out]));
    }
}

/// The sigmoid attention mask over the conditioning feature(s), shaped like
/// the branch outputs.
pub fn fusion_mask<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &FusionSettings,
    t_feat: NodeId,
    s_feat: Option<NodeId>,
) -> Result<NodeId> {
    let channels = g.tape.value(t_feat).extent(0);
    let cond = if cfg.condition_both {
        let s = s_feat.ok_or_else(|| {
            Error::InvalidArgument("fusion conditioned on both branches needs S".to_string())
        })?;
        g.tape.concat_ch(t_feat, s)?
    } else {
        t_feat
    };
    let w = g.param("fusion.w")?;
    let b = if cfg.bias { Some(g.param("fusion.b")?) } else { None };
    let logits = g.tape.conv3d(cond, w, b, &ConvSpec::cube(1, 1, 1))?;
    let mask = g.tape.sigmoid(logits);
    if cfg.single_channel_mask {
        g.tape.repeat_ch(mask, channels)
    } else {
        Ok(mask)
    }
}

/// Convex combination with an explicit mask: `S + mask (.) (T - S)`.
pub fn fuse_with_mask<S: Scalar>(
    g: &mut Graph<S>,
    s_feat: NodeId,
    t_feat: NodeId,
    mask: NodeId,
) -> Result<NodeId> {
    let diff = g.tape.sub(t_feat, s_feat)?;
    let gated = g.tape.hadamard(mask, diff)?;
    g.tape.add(s_feat, gated)
}

/// Full fusion: mask from the medium-grained feature (and optionally the
/// fine-grained one), then the convex combination.
pub fn fuse<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &FusionSettings,
    s_feat: NodeId,
    t_feat: NodeId,
) -> Result<NodeId> {
    if g.tape.value(s_feat).shape() != g.tape.value(t_feat).shape() {
        return Err(Error::ShapeMismatch {
            axis: "all".to_string(),
            detail: format!(
                "fusion inputs must agree: {:?} vs {:?}",
                g.tape.value(s_feat).shape(),
                g.tape.value(t_feat).shape()
            ),
        });
    }
    let mask = fusion_mask(g, cfg, t_feat, Some(s_feat))?;
    fuse_with_mask(g, s_feat, t_feat, mask)
}
