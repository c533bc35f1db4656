//! Stackable decoder-encoder module.
//!
//! The top-down pathway decodes from the coarsest level `n` down to the
//! target level `t`:
//!
//! ```text
//! D_n = L_n,   D_i = d_i(D_{i+1}) + L_i        (i = n-1 … t)
//! ```
//!
//! and the bottom-up pathway re-encodes back to level `n`:
//!
//! ```text
//! E_t = D_t,   E_i = e_i(E_{i-1}) + L'_i       (i = t+1 … n)
//! ```
//!
//! `L_i` are lateral conv→BN→ReLU layers over the previous phase's
//! features, `L'_i` the same over `D_i`. In the fused mode `d_i` is a single
//! 4×4 fractionally strided convolution and `e_i` a single 3×3 stride-2
//! convolution; the two-step mode replaces each with a bilinear resize
//! followed by a 3×3 stride-1 convolution.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::backbone::FeaturePyramid;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResampleMode {
    Fused,
    TwoStep,
}

impl std::str::FromStr for ResampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(ResampleMode::Fused),
            "two_step" => Ok(ResampleMode::TwoStep),
            _ => Err(Error::Config(format!("resample.mode must be fused or two_step, got `{s}`"))),
        }
    }
}

impl std::fmt::Display for ResampleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ResampleMode::Fused => "fused",
            ResampleMode::TwoStep => "two_step",
        })
    }
}

pub const UP_KERNEL: usize = 4;
pub const UP_PADDING: usize = 1;
pub const DOWN_KERNEL: usize = 3;
pub const LATERAL_KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct DeEncoderConfig {
    pub phase: usize,
    pub target_level: usize,
    pub top_level: usize,
    /// Channel width `c_i` per level; must cover `target_level..=top_level`.
    pub widths: BTreeMap<usize, usize>,
    pub resample: ResampleMode,
}

impl DeEncoderConfig {
    pub fn levels(&self) -> std::ops::RangeInclusive<usize> {
        self.target_level..=self.top_level
    }

    pub fn width(&self, level: usize) -> Result<usize> {
        self.widths
            .get(&level)
            .copied()
            .ok_or_else(|| Error::Config(format!("phase {} has no width for level {level}", self.phase)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.phase < 2 {
            return Err(Error::Config("de-encoder phases start at 2".into()));
        }
        if !(3..=self.top_level).contains(&self.target_level) {
            return Err(Error::Config(format!(
                "phase {} target level {} outside [3, {}]",
                self.phase, self.target_level, self.top_level
            )));
        }
        for i in self.levels() {
            if self.width(i)? == 0 {
                return Err(Error::Config(format!("phase {} width at level {i} is zero", self.phase)));
            }
        }
        Ok(())
    }

    fn name(&self, part: &str) -> String {
        format!("p{}.{part}", self.phase)
    }
}

/// Intermediate maps of one de-encoder pass.
#[derive(Clone, Debug, Default)]
pub struct DeEncoderState {
    pub lateral: BTreeMap<usize, Var>,
    pub decoded: BTreeMap<usize, Var>,
    pub lateral_up: BTreeMap<usize, Var>,
    pub encoded: BTreeMap<usize, Var>,
}

/// Register the parameters of one de-encoder. `in_widths` are the channel
/// widths of the previous phase's pyramid.
pub fn init_de_encoder(
    store: &mut ParamStore,
    cfg: &DeEncoderConfig,
    in_widths: &BTreeMap<usize, usize>,
    batchnorm: bool,
    rng: &mut impl Rng,
) -> Result<()> {
    cfg.validate()?;
    let k = cfg.phase as u32;
    for i in cfg.levels() {
        let c_in = *in_widths.get(&i).ok_or(Error::MissingLevel(i))?;
        let lat = cfg.name(&format!("td.lat{i}"));
        store.add_conv(&lat, k, cfg.width(i)?, c_in, LATERAL_KERNEL, rng)?;
        if batchnorm {
            store.add_bn(&format!("{lat}.bn"), k, cfg.width(i)?)?;
        }
    }
    for i in cfg.target_level..cfg.top_level {
        let up = cfg.name(&format!("td.up{i}"));
        match cfg.resample {
            ResampleMode::Fused => store.add_tconv(&up, k, cfg.width(i + 1)?, cfg.width(i)?, UP_KERNEL, rng)?,
            ResampleMode::TwoStep => store.add_conv(&up, k, cfg.width(i)?, cfg.width(i + 1)?, 3, rng)?,
        }
    }
    for i in cfg.target_level + 1..=cfg.top_level {
        let lat = cfg.name(&format!("bu.lat{i}"));
        store.add_conv(&lat, k, cfg.width(i)?, cfg.width(i)?, LATERAL_KERNEL, rng)?;
        if batchnorm {
            store.add_bn(&format!("{lat}.bn"), k, cfg.width(i)?)?;
        }
        let down = cfg.name(&format!("bu.down{i}"));
        store.add_conv(&down, k, cfg.width(i)?, cfg.width(i - 1)?, DOWN_KERNEL, rng)?;
    }
    Ok(())
}

fn lateral(g: &mut Graph<'_>, x: Var, name: &str) -> Result<Var> {
    let y = g.conv(x, name, 1, LATERAL_KERNEL / 2)?;
    let y = g.bn(y, &format!("{name}.bn"))?;
    Ok(g.tape.relu(y))
}

/// `d_i`: 2× up-sampling into width `c_i`.
pub fn decode_step(g: &mut Graph<'_>, x: Var, cfg: &DeEncoderConfig, level: usize) -> Result<Var> {
    let name = cfg.name(&format!("td.up{level}"));
    match cfg.resample {
        ResampleMode::Fused => g.tconv(x, &name, UP_PADDING),
        ResampleMode::TwoStep => {
            let (_, _, h, w) = g.tape.value(x).dims4()?;
            let up = g.tape.resize_bilinear(x, 2 * h, 2 * w)?;
            g.conv(up, &name, 1, 1)
        }
    }
}

/// `e_i`: 2× down-sampling into width `c_i`.
pub fn encode_step(g: &mut Graph<'_>, x: Var, cfg: &DeEncoderConfig, level: usize) -> Result<Var> {
    let name = cfg.name(&format!("bu.down{level}"));
    match cfg.resample {
        ResampleMode::Fused => g.conv(x, &name, 2, DOWN_KERNEL / 2),
        ResampleMode::TwoStep => {
            let (_, _, h, w) = g.tape.value(x).dims4()?;
            let down = g.tape.resize_bilinear(x, h.div_ceil(2), w.div_ceil(2))?;
            g.conv(down, &name, 1, 1)
        }
    }
}

/// Top-down pathway. Returns `(L_i, D_i)` for `i ∈ [t, n]`.
pub fn top_down(
    g: &mut Graph<'_>,
    prev: &FeaturePyramid,
    cfg: &DeEncoderConfig,
) -> Result<(BTreeMap<usize, Var>, BTreeMap<usize, Var>)> {
    let mut laterals = BTreeMap::new();
    for i in cfg.levels() {
        let c = prev.level(i)?;
        laterals.insert(i, lateral(g, c, &cfg.name(&format!("td.lat{i}")))?);
    }
    let mut decoded = BTreeMap::new();
    let mut d = laterals[&cfg.top_level];
    decoded.insert(cfg.top_level, d);
    for i in (cfg.target_level..cfg.top_level).rev() {
        let up = decode_step(g, d, cfg, i)?;
        d = g.tape.add(up, laterals[&i])?;
        decoded.insert(i, d);
    }
    Ok((laterals, decoded))
}

/// Bottom-up pathway over the decoded maps. Returns `(L'_i, E_i)`.
pub fn bottom_up(
    g: &mut Graph<'_>,
    decoded: &BTreeMap<usize, Var>,
    cfg: &DeEncoderConfig,
) -> Result<(BTreeMap<usize, Var>, BTreeMap<usize, Var>)> {
    let mut laterals = BTreeMap::new();
    let mut encoded = BTreeMap::new();
    let mut e = *decoded.get(&cfg.target_level).ok_or(Error::MissingLevel(cfg.target_level))?;
    encoded.insert(cfg.target_level, e);
    for i in cfg.target_level + 1..=cfg.top_level {
        let d = *decoded.get(&i).ok_or(Error::MissingLevel(i))?;
        let lat = lateral(g, d, &cfg.name(&format!("bu.lat{i}")))?;
        laterals.insert(i, lat);
        let down = encode_step(g, e, cfg, i)?;
        e = g.tape.add(down, lat)?;
        encoded.insert(i, e);
    }
    Ok((laterals, encoded))
}

/// One phase of feature generation: `C^k = g_k(C^{k-1})`, i.e. the bottom-up
/// pathway applied to the top-down pathway's output.
pub fn de_encode(
    g: &mut Graph<'_>,
    prev: &FeaturePyramid,
    cfg: &DeEncoderConfig,
) -> Result<(FeaturePyramid, DeEncoderState)> {
    let (lateral, decoded) = top_down(g, prev, cfg)?;
    let (lateral_up, encoded) = bottom_up(g, &decoded, cfg)?;
    let pyramid = FeaturePyramid { phase: cfg.phase, levels: encoded.clone() };
    Ok((pyramid, DeEncoderState { lateral, decoded, lateral_up, encoded }))
}

/// [`de_encode`] with every re-sampling layer split into bilinear resize
/// plus stride-1 convolution. `cfg.resample` must be `TwoStep` so the
/// parameter shapes match.
pub fn two_step_resample_variant(
    g: &mut Graph<'_>,
    prev: &FeaturePyramid,
    cfg: &DeEncoderConfig,
) -> Result<(FeaturePyramid, DeEncoderState)> {
    if cfg.resample != ResampleMode::TwoStep {
        return Err(Error::Config("two-step variant requires resample.mode = two_step".into()));
    }
    de_encode(g, prev, cfg)
}

/// Parameter and activation footprint of one re-sampling step, in scalars.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResampleFootprint {
    pub params: usize,
    /// Intermediate activations stored for the backward pass.
    pub activations: usize,
}

/// Footprint of an up-sampling step from `c_in × h × w` to `c_out × 2h × 2w`.
pub fn up_step_footprint(mode: ResampleMode, c_in: usize, c_out: usize, h: usize, w: usize) -> ResampleFootprint {
    let out = c_out * 4 * h * w;
    match mode {
        ResampleMode::Fused => ResampleFootprint { params: c_in * c_out * UP_KERNEL * UP_KERNEL + c_out, activations: out },
        ResampleMode::TwoStep => ResampleFootprint {
            params: c_in * c_out * 9 + c_out,
            // The resized map is materialized before the convolution.
            activations: c_in * 4 * h * w + out,
        },
    }
}
