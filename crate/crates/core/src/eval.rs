//! Detection decoding, NMS, miss-rate/FPPI evaluation and the analysis
//! products: foreground-max maps, phase disagreement, center-line score
//! profiles and analytic MAC counts.

use std::cmp::Ordering;

use crate::deencoder::{ResampleMode, DOWN_KERNEL, LATERAL_KERNEL, UP_KERNEL};
use crate::error::{Error, Result};
use crate::ppm::Rgb8;
use crate::rpn::{ModelConfig, SEG_LEVELS};
use crate::targets::{apply_transform, iou, AnchorGrid, BBox, BoxTransform};
use crate::tensor::Tensor;

pub const MATCH_IOU: f64 = 0.5;
pub const LOG_AVG_POINTS: usize = 9;
pub const PROFILE_POINTS: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub image_id: usize,
    pub phase: usize,
}

/// Decode one phase's foreground probabilities `A×h×w` with the final
/// regression map `4A×h×w`. Output follows anchor order; boxes are clipped
/// and those with a side under `min_size` dropped.
pub fn decode_detections(
    fg_probs: &Tensor,
    deltas: &Tensor,
    anchors: &AnchorGrid,
    image_w: usize,
    image_h: usize,
    min_size: f64,
    image_id: usize,
    phase: usize,
) -> Result<Vec<Detection>> {
    let (a, gh, gw) = (anchors.num_anchors(), anchors.grid_h, anchors.grid_w);
    if fg_probs.shape() != [a, gh, gw] || deltas.shape() != [4 * a, gh, gw] {
        return Err(Error::Shape(format!(
            "scores {:?} / regression {:?} do not match a {a}-anchor {gh}×{gw} grid",
            fg_probs.shape(),
            deltas.shape()
        )));
    }
    let plane = gh * gw;
    let mut out = Vec::with_capacity(anchors.len());
    for (i, anchor) in anchors.boxes.iter().enumerate() {
        let (ai, row, col) = anchors.position(i);
        let cell = row * gw + col;
        let d = |c: usize| deltas.data()[(4 * ai + c) * plane + cell];
        let t = BoxTransform { tx: d(0), ty: d(1), tw: d(2), th: d(3) };
        let bbox = apply_transform(anchor, &t).clip(image_w as f64, image_h as f64);
        if bbox.width() < min_size || bbox.height() < min_size {
            continue;
        }
        out.push(Detection { bbox, score: fg_probs.data()[ai * plane + cell], image_id, phase });
    }
    Ok(out)
}

fn by_score_desc(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // Stable sort keeps earlier indices first among equal scores.
    order.sort_by(|&i, &j| dets[j].score.partial_cmp(&dets[i].score).unwrap_or(Ordering::Equal));
    order
}

/// Greedy non-maximum suppression: a detection is dropped when its IoU with
/// an already kept one exceeds `threshold`. Output is in descending score.
pub fn nms(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in by_score_desc(dets) {
        if kept.iter().all(|k| iou(&k.bbox, &dets[i].bbox) <= threshold) {
            kept.push(dets[i].clone());
        }
    }
    kept
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalCurve {
    /// `(fppi, miss_rate)` with FPPI non-decreasing.
    pub points: Vec<(f64, f64)>,
    pub fppi_lo: f64,
    pub fppi_hi: f64,
    pub log_avg: f64,
}

impl EvalCurve {
    /// Miss rate at the largest achieved FPPI not above `fppi`, with flat
    /// extrapolation below the lowest achieved FPPI.
    pub fn miss_rate_at(&self, fppi: f64) -> f64 {
        match self.points.iter().rev().find(|p| p.0 <= fppi) {
            Some(p) => p.1,
            None => self.points.first().map_or(1.0, |p| p.1),
        }
    }

    pub fn recall_at(&self, fppi: f64) -> f64 {
        1.0 - self.miss_rate_at(fppi)
    }

    pub fn to_text(&self) -> String {
        let mut s: String = self.points.iter().map(|(f, m)| format!("{} {}\n", sig6(*f), sig6(*m))).collect();
        s.push_str(&format!("log_avg {}\n", sig6(self.log_avg)));
        s
    }
}

/// Decimal rendering with 6 significant digits.
pub fn sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let digits = 5 - v.abs().log10().floor() as i32;
    if (0..=17).contains(&digits) {
        let s = format!("{:.*}", digits as usize, v);
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{v:.5e}")
    }
}

/// Mark each detection of one image as true or false positive: greedy in
/// descending score, each matches the best-overlapping unmatched ground
/// truth with IoU ≥ 0.5.
fn match_image(dets: &[Detection], gts: &[BBox]) -> Vec<(f64, bool)> {
    let mut taken = vec![false; gts.len()];
    by_score_desc(dets)
        .into_iter()
        .map(|i| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                let o = iou(&dets[i].bbox, gt);
                if !taken[g] && o >= MATCH_IOU && best.is_none_or(|(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            (dets[i].score, best.is_some())
        })
        .collect()
}

/// Miss rate against FPPI swept over all score thresholds, with the
/// log-average miss rate over 9 points evenly spaced in `log10` FPPI.
pub fn evaluate(dets: &[Vec<Detection>], gts: &[Vec<BBox>], fppi_lo: f64, fppi_hi: f64) -> Result<EvalCurve> {
    if dets.len() != gts.len() {
        return Err(Error::Shape(format!("{} detection lists for {} images", dets.len(), gts.len())));
    }
    if !(fppi_lo > 0.0 && fppi_lo < fppi_hi) {
        return Err(Error::InvalidArgument(format!("bad FPPI range [{fppi_lo}, {fppi_hi}]")));
    }
    let num_gt: usize = gts.iter().map(Vec::len).sum();
    if num_gt == 0 {
        return Err(Error::NoGroundTruth);
    }
    let mut marks: Vec<(f64, bool)> = dets.iter().zip(gts).flat_map(|(d, g)| match_image(d, g)).collect();
    marks.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
    let n_img = dets.len() as f64;
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, &(score, hit)) in marks.iter().enumerate() {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        // Ties are admitted together by a single threshold.
        if marks.get(i + 1).is_none_or(|n| n.0 != score) {
            points.push((fp as f64 / n_img, 1.0 - tp as f64 / num_gt as f64));
        }
    }
    let mut curve = EvalCurve { points, fppi_lo, fppi_hi, log_avg: 0.0 };
    let (l0, l1) = (fppi_lo.log10(), fppi_hi.log10());
    let mean_log = (0..LOG_AVG_POINTS)
        .map(|i| {
            let r = 10f64.powf(l0 + (l1 - l0) * i as f64 / (LOG_AVG_POINTS - 1) as f64);
            curve.miss_rate_at(r).max(1e-10).ln()
        })
        .sum::<f64>()
        / LOG_AVG_POINTS as f64;
    curve.log_avg = mean_log.exp();
    Ok(curve)
}

/// Fraction of ground truths covered at IoU ≥ 0.5 by any detection.
pub fn recall(dets: &[Vec<Detection>], gts: &[Vec<BBox>]) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for (d, g) in dets.iter().zip(gts) {
        total += g.len();
        hit += g.iter().filter(|gt| d.iter().any(|x| iou(&x.bbox, gt) >= MATCH_IOU)).count();
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// `P̃(x, y) = max_a P(a, x, y)` over an `A×h×w` probability map.
pub fn foreground_max_map(fg_probs: &Tensor) -> Result<Tensor> {
    let s = fg_probs.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("expected A×h×w probabilities, got {s:?}")));
    }
    let (a, plane) = (s[0], s[1] * s[2]);
    let data = (0..plane)
        .map(|c| (0..a).map(|ai| fg_probs.data()[ai * plane + c]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    Tensor::new(vec![s[1], s[2]], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Disagreement {
    AgreeForeground,
    /// Foreground in the earlier phase, background in the later one.
    Suppressed,
    AgreeBackground,
    /// Background in the earlier phase, foreground in the later one.
    Emerged,
}

impl Disagreement {
    /// Palette: suppressed magenta, emerged green, agreement in greys.
    pub fn color(self) -> [u8; 3] {
        match self {
            Disagreement::AgreeForeground => [200, 200, 200],
            Disagreement::Suppressed => [255, 0, 255],
            Disagreement::AgreeBackground => [30, 30, 30],
            Disagreement::Emerged => [0, 230, 0],
        }
    }
}

pub fn phase_disagreement(a: &Tensor, b: &Tensor, threshold: f64) -> Result<Vec<Disagreement>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("map extents differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| match (x >= threshold, y >= threshold) {
            (true, true) => Disagreement::AgreeForeground,
            (true, false) => Disagreement::Suppressed,
            (false, false) => Disagreement::AgreeBackground,
            (false, true) => Disagreement::Emerged,
        })
        .collect())
}

/// Bilinear sample of an `h×w` map whose cell `(r, c)` is centered at
/// pixel `((c + 0.5)·stride, (r + 0.5)·stride)`. Coordinates clamp to the grid.
pub fn sample_bilinear(map: &Tensor, stride: f64, x: f64, y: f64) -> f64 {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let u = (x / stride - 0.5).clamp(0.0, (w - 1) as f64);
    let v = (y / stride - 0.5).clamp(0.0, (h - 1) as f64);
    let (c0, r0) = (u.floor() as usize, v.floor() as usize);
    let (c1, r1) = ((c0 + 1).min(w - 1), (r0 + 1).min(h - 1));
    let (fu, fv) = (u - c0 as f64, v - r0 as f64);
    let at = |r: usize, c: usize| map.data()[r * w + c];
    (1.0 - fv) * ((1.0 - fu) * at(r0, c0) + fu * at(r0, c1)) + fv * ((1.0 - fu) * at(r1, c0) + fu * at(r1, c1))
}

/// Mean `P̃_k` at 20 evenly spaced points along each ground truth's
/// horizontal and vertical center lines, endpoints included.
#[derive(Clone, Debug, PartialEq)]
pub struct PeakProfile {
    pub x: Vec<[f64; PROFILE_POINTS]>,
    pub y: Vec<[f64; PROFILE_POINTS]>,
    pub num_gts: usize,
}

impl PeakProfile {
    /// Mean of the two central samples minus mean of the two end samples,
    /// averaged over both axes.
    pub fn peakedness(&self, phase: usize) -> f64 {
        let m = PROFILE_POINTS / 2;
        let p = |s: &[f64; PROFILE_POINTS]| 0.5 * (s[m - 1] + s[m]) - 0.5 * (s[0] + s[PROFILE_POINTS - 1]);
        0.5 * (p(&self.x[phase - 1]) + p(&self.y[phase - 1]))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, (x, y)) in self.x.iter().zip(&self.y).enumerate() {
            let row = |v: &[f64]| v.iter().map(|&a| sig6(a)).collect::<Vec<_>>().join(" ");
            s.push_str(&format!("phase {} x {}\n", k + 1, row(x)));
            s.push_str(&format!("phase {} y {}\n", k + 1, row(y)));
        }
        s
    }
}

/// Accumulate profiles over images; `maps[i][k]` is `P̃_{k+1}` of image `i`.
pub fn peak_profile(maps: &[Vec<Tensor>], gts: &[Vec<BBox>], stride: f64) -> Result<PeakProfile> {
    let phases = maps.first().map_or(0, Vec::len);
    let mut x = vec![[0.0; PROFILE_POINTS]; phases];
    let mut y = vec![[0.0; PROFILE_POINTS]; phases];
    let mut n = 0usize;
    for (img_maps, img_gts) in maps.iter().zip(gts) {
        for gt in img_gts {
            let (cx, cy) = gt.center();
            for j in 0..PROFILE_POINTS {
                let f = j as f64 / (PROFILE_POINTS - 1) as f64;
                let (px, py) = (gt.x1 + f * gt.width(), gt.y1 + f * gt.height());
                for (k, m) in img_maps.iter().enumerate() {
                    x[k][j] += sample_bilinear(m, stride, px, cy);
                    y[k][j] += sample_bilinear(m, stride, cx, py);
                }
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("peak profile needs at least one ground truth".into()));
    }
    for row in x.iter_mut().chain(y.iter_mut()) {
        row.iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok(PeakProfile { x, y, num_gts: n })
}

/// Blue (0) to yellow (1) heatmap, each cell drawn as a `scale×scale` block.
pub fn heatmap(map: &Tensor, scale: usize) -> Rgb8 {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut img = Rgb8::new(w * scale, h * scale);
    for r in 0..h * scale {
        for c in 0..w * scale {
            let v = map.data()[(r / scale) * w + c / scale].clamp(0.0, 1.0);
            let b = |x: f64| (x * 255.0).round() as u8;
            img.set(c, r, [b(v), b(v), b(1.0 - v)]);
        }
    }
    img
}

pub fn disagreement_image(cats: &[Disagreement], w: usize, h: usize, scale: usize) -> Rgb8 {
    let mut img = Rgb8::new(w * scale, h * scale);
    for r in 0..h * scale {
        for c in 0..w * scale {
            img.set(c, r, cats[(r / scale) * w + c / scale].color());
        }
    }
    img
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv { stride: usize },
    /// Stride-2 fractionally strided convolution.
    TConv,
    /// Bilinear resize; 4 multiply-accumulates per output element.
    Resize,
}

/// Geometry of one layer, enough to count its work.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerShape {
    pub name: String,
    pub kind: LayerKind,
    pub in_c: usize,
    pub out_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub k: usize,
}

impl LayerShape {
    /// Multiply-accumulates, counting taps that land on zero padding.
    pub fn macs(&self) -> u64 {
        let out = (self.out_c * self.out_h * self.out_w) as u64;
        match self.kind {
            LayerKind::Conv { .. } => out * (self.in_c * self.k * self.k) as u64,
            LayerKind::TConv => out * (self.in_c * (self.k / 2) * (self.k / 2)) as u64,
            LayerKind::Resize => out * 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MacReport {
    pub layers: Vec<(String, u64)>,
    pub total: u64,
}

impl MacReport {
    pub fn giga(&self) -> f64 {
        self.total as f64 / 1e9
    }
}

fn conv_shape(name: String, in_c: usize, out_c: usize, h: usize, w: usize, k: usize, stride: usize) -> LayerShape {
    let pad = k / 2;
    let (oh, ow) = ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1);
    LayerShape { name, kind: LayerKind::Conv { stride }, in_c, out_c, in_h: h, in_w: w, out_h: oh, out_w: ow, k }
}

/// Every convolution-like layer of the proposal network on a `w×h` input.
/// Segmentation heads are included only when `training`.
pub fn layer_shapes(cfg: &ModelConfig, image_w: usize, image_h: usize, training: bool) -> Result<Vec<LayerShape>> {
    cfg.validate()?;
    let levels = cfg.backbone.widths.len();
    let d = 1 << (levels - 1);
    if image_w % d != 0 || image_h % d != 0 {
        return Err(Error::Indivisible {
            extent: if image_w % d != 0 { image_w } else { image_h },
            divisor: d,
            padded: image_w.max(image_h).div_ceil(d) * d,
        });
    }
    let ext = |i: usize| (image_h >> (i - 1), image_w >> (i - 1));
    let mut out = Vec::new();
    let mut in_c = 3;
    for (i, &w) in cfg.backbone.widths.iter().enumerate() {
        let (h, wd) = ext(i + 1);
        out.push(conv_shape(format!("p1.b{}.c1", i + 1), in_c, w, h, wd, 3, 1));
        out.push(conv_shape(format!("p1.b{}.c2", i + 1), w, w, h, wd, 3, 1));
        in_c = w;
    }
    let mut widths = cfg.backbone.exposed_widths();
    for p in &cfg.phases {
        let k = p.phase;
        for i in p.levels() {
            let (h, w) = ext(i);
            out.push(conv_shape(format!("p{k}.td.lat{i}"), widths[&i], p.widths[&i], h, w, LATERAL_KERNEL, 1));
        }
        for i in (p.target_level..p.top_level).rev() {
            let ((h, w), (oh, ow)) = (ext(i + 1), ext(i));
            let (ci, co) = (p.widths[&(i + 1)], p.widths[&i]);
            let name = format!("p{k}.td.up{i}");
            match p.resample {
                ResampleMode::Fused => out.push(LayerShape {
                    name,
                    kind: LayerKind::TConv,
                    in_c: ci,
                    out_c: co,
                    in_h: h,
                    in_w: w,
                    out_h: oh,
                    out_w: ow,
                    k: UP_KERNEL,
                }),
                ResampleMode::TwoStep => {
                    out.push(resize_shape(format!("{name}.resize"), ci, (h, w), (oh, ow)));
                    out.push(conv_shape(name, ci, co, oh, ow, 3, 1));
                }
            }
        }
        for i in p.target_level + 1..=p.top_level {
            let ((h, w), (oh, ow)) = (ext(i - 1), ext(i));
            out.push(conv_shape(format!("p{k}.bu.lat{i}"), p.widths[&i], p.widths[&i], oh, ow, LATERAL_KERNEL, 1));
            let (ci, co) = (p.widths[&(i - 1)], p.widths[&i]);
            let name = format!("p{k}.bu.down{i}");
            match p.resample {
                ResampleMode::Fused => out.push(conv_shape(name, ci, co, h, w, DOWN_KERNEL, 2)),
                ResampleMode::TwoStep => {
                    out.push(resize_shape(format!("{name}.resize"), ci, (h, w), (oh, ow)));
                    out.push(conv_shape(name, ci, co, oh, ow, 3, 1));
                }
            }
        }
        if k == 2 && training {
            for i in SEG_LEVELS {
                let (h, w) = ext(i);
                out.push(conv_shape(format!("p2.seg{i}"), p.widths[&i], 2, h, w, 1, 1));
            }
        }
        widths = p.widths.clone();
    }
    let (h, w) = ext(levels);
    let a = cfg.num_anchors();
    for k in 1..=cfg.num_phases() {
        if cfg.predicts(k) {
            out.push(conv_shape(format!("p{k}.pfe"), cfg.pfe_in_channels(k)?, cfg.pfe_width, h, w, 3, 1));
            out.push(conv_shape(format!("p{k}.cls"), cfg.pfe_width, 2 * a, h, w, 1, 1));
        }
    }
    let n = cfg.num_phases();
    out.push(conv_shape(format!("p{n}.bbox"), cfg.pfe_width, 4 * a, h, w, 1, 1));
    Ok(out)
}

fn resize_shape(name: String, c: usize, (h, w): (usize, usize), (oh, ow): (usize, usize)) -> LayerShape {
    LayerShape { name, kind: LayerKind::Resize, in_c: c, out_c: c, in_h: h, in_w: w, out_h: oh, out_w: ow, k: 1 }
}

/// Analytic inference-time MAC count of the proposal network.
pub fn count_macs(cfg: &ModelConfig, image_w: usize, image_h: usize) -> Result<MacReport> {
    let layers: Vec<(String, u64)> =
        layer_shapes(cfg, image_w, image_h, false)?.into_iter().map(|l| (l.name.clone(), l.macs())).collect();
    let total = layers.iter().map(|l| l.1).sum();
    Ok(MacReport { layers, total })
}
