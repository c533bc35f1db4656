//! Multi-phase autoregressive proposal head and its joint loss.
//!
//! Phase 1 predicts from the backbone's coarsest feature. Every later phase
//! runs one de-encoder over the previous phase's pyramid and predicts from
//! its coarsest encoded feature concatenated with the previous phase's
//! classification logits. The final phase's proposal features also feed the
//! box-regression layer.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Graph, ParamStore, Var, IGNORE};
use crate::backbone::{backbone_forward, init_backbone, BackboneConfig, FeaturePyramid};
use crate::deencoder::{de_encode, init_de_encoder, DeEncoderConfig, DeEncoderState, ResampleMode};
use crate::error::{Error, Result};
use crate::targets::{assign_labels, compute_transform, seg_targets, AnchorConfig, AnchorGrid, BBox, Label, LabelPolicy};
use crate::tensor::Tensor;

/// Levels carrying auxiliary segmentation heads on the first top-down pathway.
pub const SEG_LEVELS: [usize; 3] = [3, 4, 5];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// De-encoder of phases `2..=N`, in order.
    pub phases: Vec<DeEncoderConfig>,
    pub pfe_width: usize,
    pub anchors: AnchorConfig,
    /// Feed each phase's logits into the next phase's proposal features.
    pub autoregressive: bool,
    pub batchnorm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk(3, [16, 32, 64], ResampleMode::Fused)
    }
}

impl ModelConfig {
    /// Desk-scale model with `num_phases` phases and widths `c_3, c_4, c_5`.
    pub fn desk(num_phases: usize, widths: [usize; 3], resample: ResampleMode) -> Self {
        let phases = (2..=num_phases)
            .map(|k| DeEncoderConfig {
                phase: k,
                target_level: if k == 2 { 3 } else { 4 },
                top_level: 5,
                widths: (3..=5).zip(widths).collect(),
                resample,
            })
            .collect();
        ModelConfig {
            backbone: BackboneConfig::default(),
            phases,
            pfe_width: 64,
            anchors: AnchorConfig::default(),
            autoregressive: true,
            batchnorm: true,
        }
    }

    pub fn num_phases(&self) -> usize {
        self.phases.len() + 1
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.count()
    }

    /// Whether phase `k` carries its own classification layer.
    pub fn predicts(&self, k: usize) -> bool {
        self.autoregressive || k == self.num_phases()
    }

    pub fn top_level(&self) -> usize {
        self.backbone.widths.len()
    }

    /// Channel width of the coarsest feature of phase `k`.
    pub fn top_width(&self, k: usize) -> Result<usize> {
        if k == 1 {
            Ok(*self.backbone.widths.last().unwrap())
        } else {
            self.phases[k - 2].width(self.top_level())
        }
    }

    /// Input channels of phase `k`'s proposal feature layer.
    pub fn pfe_in_channels(&self, k: usize) -> Result<usize> {
        let extra = if k > 1 && self.autoregressive { 2 * self.num_anchors() } else { 0 };
        Ok(self.top_width(k)? + extra)
    }

    pub fn validate(&self) -> Result<()> {
        if self.anchors.count() == 0 {
            return Err(Error::Config("at least one anchor shape is required".into()));
        }
        if self.backbone.widths.len() < 3 {
            return Err(Error::Config("backbone needs at least three stride levels".into()));
        }
        for (idx, p) in self.phases.iter().enumerate() {
            if p.phase != idx + 2 || p.top_level != self.top_level() {
                return Err(Error::Config(format!("phase config {} is out of order", p.phase)));
            }
            p.validate()?;
        }
        Ok(())
    }

    /// Fresh parameters (deterministic in `rng`).
    pub fn init_params(&self, rng: &mut impl Rng) -> Result<ParamStore> {
        self.validate()?;
        let mut store = ParamStore::new();
        init_backbone(&mut store, &self.backbone, rng)?;
        let mut widths = self.backbone.exposed_widths();
        for p in &self.phases {
            init_de_encoder(&mut store, p, &widths, self.batchnorm, rng)?;
            if p.phase == 2 {
                for i in SEG_LEVELS {
                    store.add_conv(&format!("p2.seg{i}"), 2, 2, p.width(i)?, 1, rng)?;
                }
            }
            widths = p.levels().map(|i| (i, p.widths[&i])).collect();
        }
        let a = self.num_anchors();
        let n = self.num_phases();
        for k in 1..=n {
            if !self.predicts(k) {
                continue;
            }
            let g = k as u32;
            store.add_conv(&format!("p{k}.pfe"), g, self.pfe_width, self.pfe_in_channels(k)?, 3, rng)?;
            store.add_conv(&format!("p{k}.cls"), g, 2 * a, self.pfe_width, 1, rng)?;
        }
        store.add_conv(&format!("p{n}.bbox"), n as u32, 4 * a, self.pfe_width, 1, rng)?;
        // Small regression init keeps early decoded boxes near their anchors.
        let w = store.get_mut(&format!("p{n}.bbox.w")).unwrap();
        w.data_mut().iter_mut().for_each(|v| *v *= 0.1);
        Ok(store)
    }
}

/// Classification logits `B×2A×h×w` of one phase; channels `2a`/`2a+1`
/// are background/foreground of anchor `a`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictionMap {
    pub phase: usize,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct PhaseOutputs {
    /// Prediction of each phase `1..=N`; `None` for phases without a
    /// classification layer (non-autoregressive variant).
    pub predictions: Vec<Option<PredictionMap>>,
    pub pfe: Vec<Option<Var>>,
    /// Box regression `B×4A×h×w`, channels `4a..4a+4` hold `(tx, ty, tw, th)`.
    pub bbox: Var,
    /// Segmentation logits `B×2×h_i×w_i` per level; training only.
    pub seg: BTreeMap<usize, Var>,
    pub pyramids: Vec<FeaturePyramid>,
    pub de_encoder_states: Vec<DeEncoderState>,
}

impl PhaseOutputs {
    pub fn final_prediction(&self) -> PredictionMap {
        self.predictions.last().unwrap().expect("final phase always predicts")
    }
}

/// `P_k = p_k(f_k(P_{k-1} ‖ C^k_n))`; `prev` is `None` for phase 1 or when
/// the autoregressive link is disabled. Returns the prediction and the PFE
/// activations.
pub fn phase_predict(
    g: &mut Graph<'_>,
    prev: Option<PredictionMap>,
    top_feature: Var,
    k: usize,
) -> Result<(PredictionMap, Var)> {
    let input = match prev {
        Some(p) => {
            let (ps, fs) = (g.tape.value(p.logits).shape(), g.tape.value(top_feature).shape());
            if ps[0] != fs[0] || ps[2..] != fs[2..] {
                return Err(Error::Shape(format!(
                    "phase {k}: previous prediction {ps:?} and feature {fs:?} disagree spatially"
                )));
            }
            g.tape.concat(&[p.logits, top_feature])?
        }
        None => top_feature,
    };
    let pfe = g.conv(input, &format!("p{k}.pfe"), 1, 1)?;
    let pfe = g.tape.relu(pfe);
    let logits = g.conv(pfe, &format!("p{k}.cls"), 1, 0)?;
    Ok((PredictionMap { phase: k, logits }, pfe))
}

/// Full forward pass. Segmentation heads run only when the graph is in
/// training mode.
pub fn rpn_forward(g: &mut Graph<'_>, image: Var, cfg: &ModelConfig) -> Result<PhaseOutputs> {
    let n = cfg.num_phases();
    let top = cfg.top_level();
    let mut pyramids = vec![backbone_forward(g, image, &cfg.backbone)?];
    let mut states = Vec::new();
    let mut predictions = Vec::with_capacity(n);
    let mut pfes = Vec::with_capacity(n);
    let mut seg = BTreeMap::new();
    let mut prev: Option<PredictionMap> = None;
    for k in 1..=n {
        if k > 1 {
            let pc = &cfg.phases[k - 2];
            let (pyr, st) = de_encode(g, pyramids.last().unwrap(), pc)?;
            if k == 2 && g.is_train() {
                for i in SEG_LEVELS {
                    if let Some(&d) = st.decoded.get(&i) {
                        seg.insert(i, g.conv(d, &format!("p2.seg{i}"), 1, 0)?);
                    }
                }
            }
            pyramids.push(pyr);
            states.push(st);
        }
        if cfg.predicts(k) {
            let feature = pyramids.last().unwrap().level(top)?;
            let link = if cfg.autoregressive { prev } else { None };
            let (p, f) = phase_predict(g, link, feature, k)?;
            prev = Some(p);
            predictions.push(Some(p));
            pfes.push(Some(f));
        } else {
            predictions.push(None);
            pfes.push(None);
        }
    }
    let final_pfe = pfes.last().unwrap().unwrap();
    let bbox = g.conv(final_pfe, &format!("p{n}.bbox"), 1, 0)?;
    Ok(PhaseOutputs { predictions, pfe: pfes, bbox, seg, pyramids, de_encoder_states: states })
}

/// Which policy decides box-regression eligibility.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BboxPolicy {
    /// Foreground anchors of the final phase's labeling policy.
    FinalPhase,
    /// A fixed IoU threshold.
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetConfig {
    /// Foreground threshold `h_k` per phase.
    pub policies: Vec<f64>,
    pub bg_ceiling: f64,
    pub force_best_match: bool,
    pub bbox_policy: BboxPolicy,
    /// Target ratio of total foreground to total background loss weight per
    /// image; foreground anchors are up-weighted (never down) to reach it.
    /// Zero leaves every anchor at weight 1.
    pub fg_ratio: f64,
}

impl TargetConfig {
    pub fn new(policies: Vec<f64>) -> Self {
        TargetConfig { policies, bg_ceiling: 0.3, force_best_match: true, bbox_policy: BboxPolicy::FinalPhase, fg_ratio: 0.0 }
    }

    pub fn policy(&self, k: usize) -> LabelPolicy {
        self.policy_at(self.policies[k - 1])
    }

    fn policy_at(&self, h: f64) -> LabelPolicy {
        LabelPolicy { fg_threshold: h, bg_ceiling: self.bg_ceiling, force_best_match: self.force_best_match }
    }
}

/// Default lenient→strict schedule: `h_k = 0.4 + 0.1·(k−1)`.
pub fn default_policies(num_phases: usize) -> Vec<f64> {
    (0..num_phases).map(|k| ((4 + k) as f64) / 10.0).collect()
}

/// The regression head predicts `(tx, ty, tw, th)` divided by these, so
/// typical targets sit near unit scale.
pub const BBOX_SCALE: [f64; 4] = [0.1, 0.1, 0.2, 0.2];

/// Training targets for a batch, laid out to match the head outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct RpnTargets {
    /// Per phase, labels indexed `(b, a, y, x)`.
    pub cls: Vec<Vec<i8>>,
    /// Per phase, loss weights aligned with `cls`.
    pub cls_weights: Vec<Vec<f64>>,
    /// Regression targets `B×4A×h×w`, divided by [`BBOX_SCALE`].
    pub bbox: Tensor,
    /// Per-element smooth-L1 weights (1 on foreground anchors).
    pub bbox_weights: Vec<f64>,
    pub num_bbox_fg: usize,
    /// Segmentation labels per level, indexed `(b, y, x)`.
    pub seg: BTreeMap<usize, Vec<i8>>,
}

/// Build targets for a batch of images with ground truths `gts[b]`.
pub fn build_targets(
    gts: &[Vec<BBox>],
    anchors: &AnchorGrid,
    cfg: &TargetConfig,
    image_w: usize,
    image_h: usize,
) -> Result<RpnTargets> {
    let (a, gh, gw) = (anchors.num_anchors(), anchors.grid_h, anchors.grid_w);
    let plane = gh * gw;
    let bs = gts.len();
    let mut cls = vec![vec![IGNORE; bs * a * plane]; cfg.policies.len()];
    let mut cls_weights = vec![vec![1.0; bs * a * plane]; cfg.policies.len()];
    let mut bbox = Tensor::zeros(&[bs, 4 * a, gh, gw]);
    let mut bbox_weights = vec![0.0; bs * 4 * a * plane];
    let mut num_bbox_fg = 0;
    for (b, boxes) in gts.iter().enumerate() {
        for (k, (labels, weights)) in cls.iter_mut().zip(&mut cls_weights).enumerate() {
            let la = assign_labels(&anchors.boxes, boxes, &cfg.policy(k + 1))?;
            let n_fg = la.foreground_count();
            let n_bg = la.labels.iter().filter(|&&l| l == Label::Background).count();
            let w_fg = if cfg.fg_ratio > 0.0 && n_fg > 0 { (cfg.fg_ratio * n_bg as f64 / n_fg as f64).max(1.0) } else { 1.0 };
            for (i, l) in la.labels.iter().enumerate() {
                let (ai, row, col) = anchors.position(i);
                let j = (b * a + ai) * plane + row * gw + col;
                labels[j] = match l {
                    Label::Background => 0,
                    Label::Foreground => {
                        weights[j] = w_fg;
                        1
                    }
                    Label::Ignore => IGNORE,
                };
            }
        }
        let reg_policy = match cfg.bbox_policy {
            BboxPolicy::FinalPhase => cfg.policy(cfg.policies.len()),
            BboxPolicy::Fixed(h) => cfg.policy_at(h),
        };
        let la = assign_labels(&anchors.boxes, boxes, &reg_policy)?;
        for i in la.foreground() {
            let (ai, row, col) = anchors.position(i);
            let gt = &boxes[la.matches[i].unwrap()];
            let t = compute_transform(&anchors.boxes[i], gt)?.to_array();
            for (c, v) in t.into_iter().enumerate() {
                let idx = ((b * 4 * a + 4 * ai + c) * gh + row) * gw + col;
                bbox.data_mut()[idx] = v / BBOX_SCALE[c];
                bbox_weights[idx] = 1.0;
            }
            num_bbox_fg += 1;
        }
    }
    let mut seg = BTreeMap::new();
    for i in SEG_LEVELS {
        let f = 1usize << (i - 1);
        let (w, h) = (image_w / f, image_h / f);
        let mut labels = Vec::with_capacity(bs * w * h);
        for boxes in gts {
            labels.extend(seg_targets(boxes, i, w, h)?.into_iter().map(|v| v as i8));
        }
        seg.insert(i, labels);
    }
    Ok(RpnTargets { cls, cls_weights, bbox, bbox_weights, num_bbox_fg, seg })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    /// `λ_k` per phase.
    pub phase: Vec<f64>,
    pub bbox: f64,
    pub seg: f64,
}

impl LossWeights {
    /// `λ_N = 1` for the final phase, `0.1` for the others; `λ_b = 1`, `λ_s = 1`.
    pub fn default_for(num_phases: usize) -> Self {
        let mut phase = vec![0.1; num_phases];
        phase[num_phases - 1] = 1.0;
        LossWeights { phase, bbox: 1.0, seg: 1.0 }
    }
}

/// Individual loss terms plus their weighted total.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub cls: Vec<Option<Var>>,
    pub bbox: Var,
    pub seg: BTreeMap<usize, Var>,
}

impl LossTerms {
    /// Scalar values `(total, cls per phase, bbox, seg sum)`.
    pub fn values(&self, g: &Graph<'_>) -> (f64, Vec<Option<f64>>, f64, f64) {
        let v = |x: Var| g.tape.value(x).item();
        (
            v(self.total),
            self.cls.iter().map(|c| c.map(v)).collect(),
            v(self.bbox),
            self.seg.values().map(|&s| v(s)).sum(),
        )
    }
}

/// `L = Σ_k λ_k·L_cls,k + λ_b·L_bbox + λ_s·Σ_i L_seg,i`.
pub fn rpn_loss(g: &mut Graph<'_>, out: &PhaseOutputs, targets: &RpnTargets, weights: &LossWeights) -> Result<LossTerms> {
    let n = out.predictions.len();
    if targets.cls.len() != n || weights.phase.len() != n {
        return Err(Error::Shape(format!(
            "{n} phases but {} label sets and {} phase weights",
            targets.cls.len(),
            weights.phase.len()
        )));
    }
    let mut terms: Vec<Var> = Vec::new();
    let mut cls = Vec::with_capacity(n);
    for (k, p) in out.predictions.iter().enumerate() {
        match p {
            Some(p) => {
                let l = g.tape.softmax_ce(p.logits, &targets.cls[k], &targets.cls_weights[k])?;
                terms.push(g.tape.scale(l, weights.phase[k]));
                cls.push(Some(l));
            }
            None => cls.push(None),
        }
    }
    let norm = targets.num_bbox_fg.max(1) as f64;
    let bbox = g.tape.smooth_l1(out.bbox, &targets.bbox, &targets.bbox_weights, norm)?;
    terms.push(g.tape.scale(bbox, weights.bbox));
    let mut seg = BTreeMap::new();
    for (&i, &logits) in &out.seg {
        let labels = targets.seg.get(&i).ok_or(Error::MissingLevel(i))?;
        let ones = vec![1.0; labels.len()];
        let l = g.tape.softmax_ce(logits, labels, &ones)?;
        terms.push(g.tape.scale(l, weights.seg));
        seg.insert(i, l);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.tape.add(total, t)?;
    }
    Ok(LossTerms { total, cls, bbox, seg })
}

/// Foreground probabilities `A×h×w` from logits of batch item `b`.
pub fn foreground_probs(logits: &Tensor, b: usize) -> Tensor {
    let (_, c2, h, w) = logits.dims4().unwrap();
    let a = c2 / 2;
    let mut out = Tensor::zeros(&[a, h, w]);
    for ai in 0..a {
        for y in 0..h {
            for x in 0..w {
                let z0 = logits.at4(b, 2 * ai, y, x);
                let z1 = logits.at4(b, 2 * ai + 1, y, x);
                out.data_mut()[(ai * h + y) * w + x] = 1.0 / (1.0 + (z0 - z1).exp());
            }
        }
    }
    out
}

/// Inference-time outputs for one image.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// Foreground probabilities `A×h×w` per phase.
    pub fg_probs: Vec<Option<Tensor>>,
    /// Final-phase regression `4A×h×w` in transform units.
    pub deltas: Tensor,
}

/// Evaluation-mode forward pass over a `B×3×H×W` batch.
pub fn predict(params: &ParamStore, cfg: &ModelConfig, images: &Tensor) -> Result<Vec<Prediction>> {
    let mut g = Graph::new(params, false);
    let img = g.tape.constant(images.clone());
    let out = rpn_forward(&mut g, img, cfg)?;
    let bs = images.shape()[0];
    let bbox = g.tape.value(out.bbox);
    Ok((0..bs)
        .map(|b| Prediction {
            fg_probs: out
                .predictions
                .iter()
                .map(|p| p.map(|p| foreground_probs(g.tape.value(p.logits), b)))
                .collect(),
            deltas: {
                let mut t = bbox.batch_item(b);
                let s = t.shape()[1..].to_vec();
                let plane = s[1] * s[2];
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    *v *= BBOX_SCALE[(i / plane) % 4];
                }
                t.reshape(s).unwrap()
            },
        })
        .collect())
}
