//! Anchor lattice, IoU, per-phase labeling policies, box transforms and
//! segmentation masks.

use crate::error::{Error, Result};

/// Axis-aligned box in image pixels with `x2 > x1`, `y2 > y1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x2 > self.x1
            && self.y2 > self.y1
    }

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }
}

/// Intersection over union; 0 for disjoint or degenerate boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Anchor shape parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorConfig {
    /// Anchor heights in pixels.
    pub heights: Vec<f64>,
    /// Width / height ratio shared by all anchors.
    pub aspect: f64,
    pub stride: usize,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig { heights: vec![32.0, 56.0, 96.0], aspect: 0.41, stride: 16 }
    }
}

impl AnchorConfig {
    pub fn count(&self) -> usize {
        self.heights.len()
    }

    pub fn shapes(&self) -> Vec<(f64, f64)> {
        self.heights.iter().map(|&h| (h * self.aspect, h)).collect()
    }
}

/// Dense anchor lattice over the stride-16 feature grid. Boxes are ordered
/// row-major by location, then by anchor index.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    pub shapes: Vec<(f64, f64)>,
    pub stride: usize,
    pub grid_w: usize,
    pub grid_h: usize,
    pub boxes: Vec<BBox>,
}

impl AnchorGrid {
    pub fn new(cfg: &AnchorConfig, grid_w: usize, grid_h: usize) -> Self {
        let shapes = cfg.shapes();
        let s = cfg.stride as f64;
        let mut boxes = Vec::with_capacity(grid_w * grid_h * shapes.len());
        for row in 0..grid_h {
            for col in 0..grid_w {
                let (cx, cy) = ((col as f64 + 0.5) * s, (row as f64 + 0.5) * s);
                for &(w, h) in &shapes {
                    boxes.push(BBox::from_center(cx, cy, w, h));
                }
            }
        }
        AnchorGrid { shapes, stride: cfg.stride, grid_w, grid_h, boxes }
    }

    /// Anchor grid matching an image of the given extent.
    pub fn for_image(cfg: &AnchorConfig, image_w: usize, image_h: usize) -> Self {
        Self::new(cfg, image_w / cfg.stride, image_h / cfg.stride)
    }

    pub fn num_anchors(&self) -> usize {
        self.shapes.len()
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn index(&self, anchor: usize, row: usize, col: usize) -> usize {
        (row * self.grid_w + col) * self.num_anchors() + anchor
    }

    /// `(anchor, row, col)` of a flat box index.
    pub fn position(&self, i: usize) -> (usize, usize, usize) {
        let a = self.num_anchors();
        let loc = i / a;
        (i % a, loc / self.grid_w, loc % self.grid_w)
    }

    /// Little-endian dump of all box coordinates; stable across runs.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.boxes
            .iter()
            .flat_map(|b| [b.x1, b.y1, b.x2, b.y2])
            .flat_map(f64::to_le_bytes)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Background,
    Foreground,
    Ignore,
}

/// Thresholds that turn IoU with ground truth into anchor labels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelPolicy {
    /// Foreground threshold `h`.
    pub fg_threshold: f64,
    /// Anchors whose best IoU is below this are background; between this and
    /// `fg_threshold` they are ignored.
    pub bg_ceiling: f64,
    /// Label the best anchor of every ground truth as foreground.
    pub force_best_match: bool,
}

impl LabelPolicy {
    pub fn new(fg_threshold: f64) -> Self {
        LabelPolicy { fg_threshold, bg_ceiling: 0.3, force_best_match: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelAssignment {
    pub labels: Vec<Label>,
    /// Matched ground-truth index for foreground anchors.
    pub matches: Vec<Option<usize>>,
    /// Best IoU of each anchor over all ground truths.
    pub max_iou: Vec<f64>,
}

impl LabelAssignment {
    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == Label::Foreground).count()
    }

    pub fn foreground(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().enumerate().filter(|(_, &l)| l == Label::Foreground).map(|(i, _)| i)
    }
}

/// Label every anchor against `gts` under `policy`.
pub fn assign_labels(anchors: &[BBox], gts: &[BBox], policy: &LabelPolicy) -> Result<LabelAssignment> {
    if !(policy.fg_threshold > 0.0 && policy.fg_threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "foreground threshold {} outside (0, 1]",
            policy.fg_threshold
        )));
    }
    let n = anchors.len();
    let mut labels = vec![Label::Background; n];
    let mut matches = vec![None; n];
    let mut max_iou = vec![0.0; n];
    if gts.is_empty() {
        return Ok(LabelAssignment { labels, matches, max_iou });
    }
    let mut best_for_gt = vec![(0.0f64, usize::MAX); gts.len()];
    for (i, a) in anchors.iter().enumerate() {
        let mut best = (0.0, 0usize);
        for (j, g) in gts.iter().enumerate() {
            let v = iou(a, g);
            // Strict comparison keeps the lower gt index on ties.
            if v > best.0 {
                best = (v, j);
            }
            if v > best_for_gt[j].0 {
                best_for_gt[j] = (v, i);
            }
        }
        max_iou[i] = best.0;
        if best.0 >= policy.fg_threshold {
            labels[i] = Label::Foreground;
            matches[i] = Some(best.1);
        } else if best.0 >= policy.bg_ceiling {
            labels[i] = Label::Ignore;
        }
    }
    if policy.force_best_match {
        for (j, &(v, i)) in best_for_gt.iter().enumerate() {
            if v > 0.0 && labels[i] != Label::Foreground {
                labels[i] = Label::Foreground;
                matches[i] = Some(j);
            }
        }
    }
    Ok(LabelAssignment { labels, matches, max_iou })
}

/// Center translation normalized by anchor extent and log scale ratios.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxTransform {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxTransform {
    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_array(t: [f64; 4]) -> Self {
        BoxTransform { tx: t[0], ty: t[1], tw: t[2], th: t[3] }
    }
}

pub fn compute_transform(anchor: &BBox, gt: &BBox) -> Result<BoxTransform> {
    if !(gt.width() > 0.0 && gt.height() > 0.0) || !(anchor.width() > 0.0 && anchor.height() > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "box transform needs positive extents: anchor {anchor:?}, target {gt:?}"
        )));
    }
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    Ok(BoxTransform {
        tx: (gcx - acx) / anchor.width(),
        ty: (gcy - acy) / anchor.height(),
        tw: (gt.width() / anchor.width()).ln(),
        th: (gt.height() / anchor.height()).ln(),
    })
}

/// Largest log-scale accepted by [`apply_transform`]; keeps decoded extents finite.
pub const MAX_LOG_SCALE: f64 = 4.0;

pub fn apply_transform(anchor: &BBox, t: &BoxTransform) -> BBox {
    let (aw, ah) = (anchor.width(), anchor.height());
    let (dx, dy) = (t.tx * aw, t.ty * ah);
    let w = aw * t.tw.min(MAX_LOG_SCALE).exp();
    let h = ah * t.th.min(MAX_LOG_SCALE).exp();
    // Offsets from the anchor's own corners keep the zero transform exact.
    let (gx, gy) = (0.5 * (aw - w), 0.5 * (ah - h));
    BBox::new(anchor.x1 + dx + gx, anchor.y1 + dy + gy, anchor.x2 + dx - gx, anchor.y2 + dy - gy)
}

/// Binary box-interior mask on the grid of pyramid level `level` (stride
/// `2^(level-1)`): a cell is 1 iff its center lies inside any ground truth.
pub fn seg_targets(gts: &[BBox], level: usize, grid_w: usize, grid_h: usize) -> Result<Vec<u8>> {
    if !(1..=8).contains(&level) {
        return Err(Error::InvalidArgument(format!("pyramid level {level} out of range")));
    }
    let s = (1usize << (level - 1)) as f64;
    let mut mask = vec![0u8; grid_w * grid_h];
    for row in 0..grid_h {
        for col in 0..grid_w {
            let (cx, cy) = ((col as f64 + 0.5) * s, (row as f64 + 0.5) * s);
            if gts.iter().any(|g| g.contains_point(cx, cy)) {
                mask[row * grid_w + col] = 1;
            }
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Count unit lattice cells covered by integer-aligned boxes.
    fn pixel_iou(a: (i32, i32, i32, i32), b: (i32, i32, i32, i32)) -> f64 {
        let inside = |r: (i32, i32, i32, i32), x: i32, y: i32| x >= r.0 && x < r.2 && y >= r.1 && y < r.3;
        let (mut inter, mut uni) = (0, 0);
        for y in -50..100 {
            for x in -50..100 {
                let (ia, ib) = (inside(a, x, y), inside(b, x, y));
                inter += (ia && ib) as i32;
                uni += (ia || ib) as i32;
            }
        }
        inter as f64 / uni as f64
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(20.0, 20.0, 30.0, 30.0)), 0.0);
        let b = BBox::new(5.0, 5.0, 15.0, 15.0);
        let want = pixel_iou((0, 0, 10, 10), (5, 5, 15, 15));
        assert!((want - 25.0 / 175.0).abs() < 1e-12);
        assert!((iou(&a, &b) - want).abs() < 1e-12);
    }

    #[test]
    fn anchor_grid_order_and_centers() {
        let cfg = AnchorConfig { heights: vec![32.0, 64.0], aspect: 0.5, stride: 16 };
        let g = AnchorGrid::new(&cfg, 3, 2);
        assert_eq!(g.len(), 12);
        let i = g.index(1, 1, 2);
        assert_eq!(g.position(i), (1, 1, 2));
        let (cx, cy) = g.boxes[i].center();
        assert_eq!((cx, cy), (40.0, 24.0));
        assert_eq!(g.boxes[i].height(), 64.0);
        assert_eq!(g.to_bytes(), AnchorGrid::new(&cfg, 3, 2).to_bytes());
    }

    #[test]
    fn gt_equal_to_anchor_is_foreground() {
        let g = AnchorGrid::new(&AnchorConfig::default(), 4, 4);
        let gt = g.boxes[17];
        let la = assign_labels(&g.boxes, &[gt], &LabelPolicy::new(0.5)).unwrap();
        assert_eq!(la.labels[17], Label::Foreground);
        assert_eq!(la.matches[17], Some(0));
    }

    #[test]
    fn empty_gts_all_background() {
        let g = AnchorGrid::new(&AnchorConfig::default(), 4, 4);
        let la = assign_labels(&g.boxes, &[], &LabelPolicy::new(0.4)).unwrap();
        assert_eq!(la.foreground_count(), 0);
        assert!(la.labels.iter().all(|&l| l == Label::Background));
    }

    #[test]
    fn policy_threshold_validated() {
        assert!(assign_labels(&[], &[], &LabelPolicy::new(0.0)).is_err());
        assert!(assign_labels(&[], &[], &LabelPolicy::new(1.2)).is_err());
        assert!(assign_labels(&[], &[], &LabelPolicy::new(1.0)).is_ok());
    }

    #[test]
    fn forced_best_match_and_switch() {
        // A tiny gt overlaps its best anchor below every threshold.
        let g = AnchorGrid::new(&AnchorConfig::default(), 4, 4);
        let gt = BBox::new(20.0, 20.0, 26.0, 34.0);
        let mut p = LabelPolicy::new(0.6);
        let forced = assign_labels(&g.boxes, &[gt], &p).unwrap();
        assert_eq!(forced.foreground_count(), 1);
        p.force_best_match = false;
        assert_eq!(assign_labels(&g.boxes, &[gt], &p).unwrap().foreground_count(), 0);
    }

    #[test]
    fn transform_examples() {
        let a = BBox::new(10.0, 10.0, 30.0, 50.0);
        let t = compute_transform(&a, &a).unwrap();
        assert_eq!(t.to_array(), [0.0, 0.0, 0.0, 0.0]);
        let wide = BBox::from_center(20.0, 30.0, 40.0, 40.0);
        let t = compute_transform(&a, &wide).unwrap();
        assert!((t.tw - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(t.tx.abs() < 1e-15 && t.th.abs() < 1e-15);
        assert!(compute_transform(&a, &BBox::new(0.0, 0.0, 0.0, 5.0)).is_err());
    }

    #[test]
    fn seg_target_examples() {
        assert!(seg_targets(&[], 3, 8, 8).unwrap().iter().all(|&v| v == 0));
        let full = BBox::new(0.0, 0.0, 32.0, 32.0);
        assert!(seg_targets(&[full], 3, 8, 8).unwrap().iter().all(|&v| v == 1));
        // Stride 4 centers at 2, 6, 10, …; box [10, 22] covers centers 10, 14, 18, 22 on each axis.
        let b = BBox::new(10.0, 10.0, 22.0, 22.0);
        let m = seg_targets(&[b], 3, 8, 8).unwrap();
        let mut oracle = 0;
        for r in 0..8 {
            for c in 0..8 {
                let (x, y) = (4.0 * c as f64 + 2.0, 4.0 * r as f64 + 2.0);
                oracle += (x >= 10.0 && x <= 22.0 && y >= 10.0 && y <= 22.0) as usize;
            }
        }
        assert_eq!(oracle, 16);
        assert_eq!(m.iter().map(|&v| v as usize).sum::<usize>(), oracle);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..140.0f64, 0.0..140.0f64, 2.0..60.0f64, 2.0..90.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn transform_round_trip(a in arb_box(), g in arb_box()) {
            let t = compute_transform(&a, &g).unwrap();
            let back = apply_transform(&a, &t);
            prop_assert!((back.x1 - g.x1).abs() < 1e-9);
            prop_assert!((back.y1 - g.y1).abs() < 1e-9);
            prop_assert!((back.x2 - g.x2).abs() < 1e-9);
            prop_assert!((back.y2 - g.y2).abs() < 1e-9);
        }

        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&b, &a));
        }

        #[test]
        fn stricter_policy_foreground_is_subset(gts in prop::collection::vec(arb_box(), 0..6)) {
            let g = AnchorGrid::new(&AnchorConfig::default(), 10, 10);
            let sets: Vec<Vec<usize>> = [0.4, 0.5, 0.6]
                .iter()
                .map(|&h| assign_labels(&g.boxes, &gts, &LabelPolicy::new(h)).unwrap().foreground().collect())
                .collect();
            for w in sets.windows(2) {
                prop_assert!(w[1].iter().all(|i| w[0].contains(i)));
            }
        }
    }
}
