//! Second-stage crop classifier: hard score suppression, RGB crops of the
//! surviving proposals, a small convolutional classifier with a weak
//! segmentation head, and fusion of its scores with the proposal scores.

use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Graph, ParamStore, Var, IGNORE, SECOND_STAGE_GROUP};
use crate::error::{Error, Result};
use crate::targets::{iou, BBox};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    /// Final-phase foreground probability.
    pub score: f64,
    pub image_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuppressionPolicy {
    pub z: f64,
}

impl Default for SuppressionPolicy {
    fn default() -> Self {
        SuppressionPolicy { z: 0.005 }
    }
}

/// Keep proposals with `score ≥ z`, preserving order.
pub fn hard_suppress(proposals: &[Proposal], policy: SuppressionPolicy) -> Vec<Proposal> {
    proposals.iter().filter(|p| p.score >= policy.z).cloned().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    Geometric,
    Product,
    Mean,
}

impl FromStr for Fusion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "geo" => Ok(Fusion::Geometric),
            "prod" => Ok(Fusion::Product),
            "mean" => Ok(Fusion::Mean),
            _ => Err(Error::Config(format!("unknown fusion `{s}` (expected geo, prod or mean)"))),
        }
    }
}

impl std::fmt::Display for Fusion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Fusion::Geometric => "geo",
            Fusion::Product => "prod",
            Fusion::Mean => "mean",
        })
    }
}

pub fn fuse_scores(rpn: f64, rcnn: f64, fusion: Fusion) -> f64 {
    match fusion {
        Fusion::Geometric => (rpn * rcnn).sqrt(),
        Fusion::Product => rpn * rcnn,
        Fusion::Mean => 0.5 * (rpn + rcnn),
    }
}

/// Resample the region `b` of a `3×H×W` image to `3×size×size`, bilinear
/// with half-pixel centers and edge clamping.
pub fn crop_bilinear(image: &Tensor, b: &BBox, size: usize) -> Tensor {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = vec![0.0; 3 * size * size];
    let tap = |v: f64, n: usize| {
        let v = (v - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = v.floor() as usize;
        (i0, (i0 + 1).min(n - 1), v - i0 as f64)
    };
    for oy in 0..size {
        let (y0, y1, fy) = tap(b.y1 + (oy as f64 + 0.5) / size as f64 * b.height(), h);
        for ox in 0..size {
            let (x0, x1, fx) = tap(b.x1 + (ox as f64 + 0.5) / size as f64 * b.width(), w);
            for c in 0..3 {
                let at = |y: usize, x: usize| image.data()[(c * h + y) * w + x];
                out[(c * size + oy) * size + ox] = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
                    + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
            }
        }
    }
    Tensor::new(vec![3, size, size], out).unwrap()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RcnnConfig {
    pub crop: usize,
    /// Widths of the three conv+pool blocks.
    pub widths: [usize; 3],
    pub hidden: usize,
    pub fg_iou: f64,
    pub height_weighting: bool,
    pub seg_weight: f64,
}

impl Default for RcnnConfig {
    fn default() -> Self {
        RcnnConfig { crop: 32, widths: [16, 32, 64], hidden: 64, fg_iou: 0.7, height_weighting: false, seg_weight: 1.0 }
    }
}

impl RcnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop < 8 || self.crop % 8 != 0 {
            return Err(Error::Config(format!("rcnn.crop must be a positive multiple of 8, got {}", self.crop)));
        }
        Ok(())
    }

    fn seg_extent(&self) -> usize {
        self.crop / 2
    }
}

pub fn init_rcnn(cfg: &RcnnConfig, rng: &mut impl Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let g = SECOND_STAGE_GROUP;
    let mut store = ParamStore::new();
    let mut c = 3;
    for (i, &w) in cfg.widths.iter().enumerate() {
        store.add_conv(&format!("rcnn.c{}", i + 1), g, w, c, 3, rng)?;
        c = w;
    }
    store.add_conv("rcnn.seg", g, 2, cfg.widths[0], 1, rng)?;
    let flat = c * (cfg.crop / 8) * (cfg.crop / 8);
    store.add_linear("rcnn.fc1", g, cfg.hidden, flat, rng)?;
    store.add_linear("rcnn.fc2", g, 2, cfg.hidden, rng)?;
    Ok(store)
}

pub struct RcnnOutputs {
    /// `B×2` background/foreground logits.
    pub logits: Var,
    /// `B×2×(S/2)×(S/2)` segmentation logits over the crop.
    pub seg: Var,
}

/// Classifier over a `B×3×S×S` crop batch.
pub fn rcnn_forward(g: &mut Graph<'_>, crops: Var, cfg: &RcnnConfig) -> Result<RcnnOutputs> {
    let (bs, c, h, w) = g.tape.value(crops).dims4()?;
    if c != 3 || h != cfg.crop || w != cfg.crop {
        return Err(Error::Shape(format!("expected B×3×{0}×{0} crops, got {c}×{h}×{w}", cfg.crop)));
    }
    let mut x = crops;
    let mut seg = None;
    for i in 1..=3 {
        x = g.conv(x, &format!("rcnn.c{i}"), 1, 1)?;
        x = g.tape.relu(x);
        x = g.tape.max_pool2(x)?;
        if i == 1 {
            seg = Some(g.conv(x, "rcnn.seg", 1, 0)?);
        }
    }
    let flat = g.tape.value(x).numel() / bs.max(1);
    let x = g.tape.reshape(x, &[bs, flat])?;
    let x = g.linear(x, "rcnn.fc1")?;
    let x = g.tape.relu(x);
    let logits = g.linear(x, "rcnn.fc2")?;
    Ok(RcnnOutputs { logits, seg: seg.unwrap() })
}

/// Foreground probability per crop; an empty batch gives an empty output.
pub fn rcnn_predict(params: &ParamStore, cfg: &RcnnConfig, crops: &[Tensor]) -> Result<Vec<f64>> {
    if crops.is_empty() {
        return Ok(Vec::new());
    }
    let mut g = Graph::new(params, false);
    let x = g.tape.constant(Tensor::stack(crops)?);
    let out = rcnn_forward(&mut g, x, cfg)?;
    let z = g.tape.value(out.logits).data();
    Ok(z.chunks(2).map(|p| 1.0 / (1.0 + (p[0] - p[1]).exp())).collect())
}

/// Crops of proposals from one image with their training targets.
#[derive(Clone, Debug, PartialEq)]
pub struct CropBatch {
    pub crops: Vec<Tensor>,
    /// `ĉ_j`: 1 foreground, 0 background, [`IGNORE`] for suppressed proposals.
    pub labels: Vec<i8>,
    pub weights: Vec<f64>,
    /// Per crop, `(S/2)²` box-interior labels.
    pub seg: Vec<Vec<i8>>,
}

impl CropBatch {
    pub fn len(&self) -> usize {
        self.crops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.crops.is_empty()
    }
}

/// `w_j = 1 + min(h_j / H, 1)`.
pub fn height_weight(b: &BBox, image_h: f64) -> f64 {
    1.0 + (b.height() / image_h).min(1.0)
}

/// Build the crop batch for proposals of one image. Proposals scoring below
/// `z` keep their crop but are labelled [`IGNORE`] throughout.
pub fn build_crop_batch(
    image: &Tensor,
    proposals: &[Proposal],
    gts: &[BBox],
    cfg: &RcnnConfig,
    policy: SuppressionPolicy,
) -> CropBatch {
    let image_h = image.shape()[1] as f64;
    let s = cfg.seg_extent();
    let mut batch = CropBatch { crops: Vec::new(), labels: Vec::new(), weights: Vec::new(), seg: Vec::new() };
    for p in proposals {
        batch.crops.push(crop_bilinear(image, &p.bbox, cfg.crop));
        let live = p.score >= policy.z;
        let best = gts.iter().map(|g| iou(g, &p.bbox)).fold(0.0, f64::max);
        batch.labels.push(if !live {
            IGNORE
        } else if best >= cfg.fg_iou {
            1
        } else {
            0
        });
        batch.weights.push(if cfg.height_weighting { height_weight(&p.bbox, image_h) } else { 1.0 });
        let mut mask = vec![if live { 0 } else { IGNORE }; s * s];
        if live {
            for (r, row) in mask.chunks_mut(s).enumerate() {
                for (c, m) in row.iter_mut().enumerate() {
                    let x = p.bbox.x1 + (c as f64 + 0.5) / s as f64 * p.bbox.width();
                    let y = p.bbox.y1 + (r as f64 + 0.5) / s as f64 * p.bbox.height();
                    if gts.iter().any(|g| g.contains_point(x, y)) {
                        *m = 1;
                    }
                }
            }
        }
        batch.seg.push(mask);
    }
    batch
}

pub struct RcnnLoss {
    pub total: Var,
    pub cls: Var,
    pub seg: Var,
}

/// `Σ_j w_j·L_cls(c_j, ĉ_j) + L_seg` over surviving proposals; ignored
/// entries contribute neither loss nor gradient.
pub fn rcnn_loss(g: &mut Graph<'_>, out: &RcnnOutputs, batch: &CropBatch, seg_weight: f64) -> Result<RcnnLoss> {
    let bs = batch.len();
    let logits = g.tape.reshape(out.logits, &[bs, 2, 1, 1])?;
    let cls = g.tape.softmax_ce(logits, &batch.labels, &batch.weights)?;
    let seg_labels: Vec<i8> = batch.seg.concat();
    let ones = vec![1.0; seg_labels.len()];
    let seg = g.tape.softmax_ce(out.seg, &seg_labels, &ones)?;
    let seg_scaled = g.tape.scale(seg, seg_weight);
    let total = g.tape.add(cls, seg_scaled)?;
    Ok(RcnnLoss { total, cls, seg })
}
