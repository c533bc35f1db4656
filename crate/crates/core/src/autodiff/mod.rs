//! Minimal reverse-mode automatic differentiation over dense `f64` tensors,
//! covering exactly the layers the detector needs.

mod graph;
mod kernels;
mod params;
mod tape;

pub use graph::{apply_bn_stats, Graph, BN_MOMENTUM};
pub use params::{
    group_prefix, he_uniform, Gradients, Param, ParamKind, ParamStore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
    SECOND_STAGE_GROUP,
};
pub use tape::{smooth_l1, BatchStats, BnMode, Tape, Var, BN_EPS, IGNORE};

/// Half-pixel bilinear resize of a `planes×h×w` buffer (no tape).
pub fn resize_bilinear(x: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    kernels::resize_bilinear(x, planes, h, w, oh, ow)
}

#[cfg(test)]
mod tests;
