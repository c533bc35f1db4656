//! End-to-end stages shared by the command line and the test suites:
//! data loading, proposal-network and crop-classifier training, inference,
//! evaluation and analysis.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{apply_bn_stats, Graph, ParamStore, SECOND_STAGE_GROUP};
use crate::config::{EvalSettings, RcnnSettings, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{
    decode_detections, evaluate, foreground_max_map, nms, recall, sig6, Detection, EvalCurve,
};
use crate::rpn::{build_targets, predict, rpn_forward, rpn_loss, ModelConfig, Prediction};
use crate::second_stage::{
    build_crop_batch, crop_bilinear, fuse_scores, hard_suppress, init_rcnn, rcnn_forward, rcnn_loss, rcnn_predict,
    CropBatch, Proposal,
};
use crate::synth::{generate_scene, read_dataset, AnnotatedScene};
use crate::targets::{iou, AnchorGrid, BBox};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<AnnotatedScene>,
    pub test: Vec<AnnotatedScene>,
}

/// Read `data.dir/{train,test}` when `data.dir` is set, otherwise render the
/// splits in memory: train indices `0..n_train`, test indices after them.
pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let dir = cfg.str("data.dir");
    if !dir.is_empty() {
        let dir = Path::new(dir);
        return Ok(Dataset { train: read_dataset(&dir.join("train"))?, test: read_dataset(&dir.join("test"))? });
    }
    let scene = cfg.scene_config()?;
    let (n_train, n_test) = (cfg.usize("data.train")?, cfg.usize("data.test")?);
    let gen = |r: std::ops::Range<usize>| r.map(|i| generate_scene(&scene, i)).collect::<Result<Vec<_>>>();
    Ok(Dataset { train: gen(0..n_train)?, test: gen(n_train..n_train + n_test)? })
}

/// Only the test split of [`load_data`].
pub fn load_test(cfg: &RunConfig) -> Result<Vec<AnnotatedScene>> {
    let dir = cfg.str("data.dir");
    if !dir.is_empty() {
        return read_dataset(&Path::new(dir).join("test"));
    }
    let scene = cfg.scene_config()?;
    let (n_train, n_test) = (cfg.usize("data.train")?, cfg.usize("data.test")?);
    (n_train..n_train + n_test).map(|i| generate_scene(&scene, i)).collect()
}

/// Trained parameters: the proposal network and the optional crop classifier.
#[derive(Clone, Debug)]
pub struct Detector {
    pub model: ModelConfig,
    pub rpn: ParamStore,
    pub rcnn: Option<ParamStore>,
}

impl Detector {
    pub fn to_store(&self) -> Result<ParamStore> {
        let mut all = self.rpn.clone();
        if let Some(r) = &self.rcnn {
            all.merge(r.clone())?;
        }
        Ok(all)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_store()?.save(path)
    }

    pub fn load(cfg: &RunConfig, path: &Path) -> Result<Self> {
        let mut rpn = ParamStore::load(path)?;
        let rcnn = rpn.split_group(SECOND_STAGE_GROUP);
        let model = cfg.model_config()?;
        let expected = model.init_params(&mut ChaCha8Rng::seed_from_u64(0))?;
        for (name, p) in expected.iter() {
            match rpn.get(name) {
                Some(t) if t.shape() == p.value.shape() => {}
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "{}: parameter `{name}` missing or mis-shaped for this config",
                        path.display()
                    )))
                }
            }
        }
        Ok(Detector { model, rpn, rcnn: (!rcnn.is_empty()).then_some(rcnn) })
    }
}

fn flip_scene(image: &Tensor, gts: &[BBox]) -> (Tensor, Vec<BBox>) {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut out = image.clone();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out.data_mut()[(ch * h + y) * w + x] = image.data()[(ch * h + y) * w + (w - 1 - x)];
            }
        }
    }
    let wf = w as f64;
    (out, gts.iter().map(|b| BBox::new(wf - b.x2, b.y1, wf - b.x1, b.y2)).collect())
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub iter: usize,
    pub lr: f64,
    pub total: f64,
    pub cls: Vec<Option<f64>>,
    pub bbox: f64,
    pub seg: f64,
}

impl LossRecord {
    pub fn to_line(&self) -> String {
        let cls: Vec<String> = self.cls.iter().map(|c| c.map_or("-".into(), sig6)).collect();
        format!(
            "{} {} {} {} {} {}",
            self.iter,
            sig6(self.lr),
            sig6(self.total),
            cls.join(" "),
            sig6(self.bbox),
            sig6(self.seg)
        )
    }
}

/// Train the proposal network. Each iteration's loss terms go to `log`.
/// A non-finite loss writes the last good parameters to `last_good` (when
/// given) and aborts.
pub fn train_rpn(
    cfg: &RunConfig,
    train: &[AnnotatedScene],
    log: &mut dyn Write,
    last_good: Option<&Path>,
) -> Result<ParamStore> {
    let model = cfg.model_config()?;
    let tc = cfg.target_config()?;
    let weights = cfg.loss_weights()?;
    let ts = cfg.train_settings()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed());
    let mut store = model.init_params(&mut rng)?;
    let (iw, ih) = (train[0].image.shape()[2], train[0].image.shape()[1]);
    let anchors = AnchorGrid::for_image(&model.anchors, iw, ih);
    let n = model.num_phases();
    let header: Vec<String> = (1..=n).map(|k| format!("cls{k}")).collect();
    writeln!(log, "# iter lr total {} bbox seg", header.join(" ")).map_err(|e| Error::io("<log>", e))?;

    let mut order: Vec<usize> = Vec::new();
    for iter in 0..ts.iters {
        let mut images = Vec::with_capacity(ts.batch);
        let mut gts = Vec::with_capacity(ts.batch);
        for _ in 0..ts.batch {
            if order.is_empty() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
            }
            let s = &train[order.pop().unwrap()];
            if ts.flip && rng.gen_bool(0.5) {
                let (im, g) = flip_scene(&s.image, &s.gts);
                images.push(im);
                gts.push(g);
            } else {
                images.push(s.image.clone());
                gts.push(s.gts.clone());
            }
        }
        let targets = build_targets(&gts, &anchors, &tc, iw, ih)?;
        let lr = ts.lr_at(iter);
        let mut g = Graph::new(&store, true);
        let x = g.tape.constant(Tensor::stack(&images)?);
        let out = rpn_forward(&mut g, x, &model)?;
        let loss = rpn_loss(&mut g, &out, &targets, &weights)?;
        let (total, cls, bbox, seg) = loss.values(&g);
        if !total.is_finite() {
            drop(g);
            if let Some(p) = last_good {
                store.save(p)?;
            }
            return Err(Error::Diverged { iter });
        }
        g.tape.backward(loss.total)?;
        let mut grads = g.param_grads();
        let stats = g.take_bn_stats();
        drop(g);
        let norm = grads.global_norm();
        if ts.clip > 0.0 && norm > ts.clip {
            grads.scale(ts.clip / norm);
        }
        store.sgd_step(&grads, lr, ts.momentum)?;
        apply_bn_stats(&mut store, &stats);
        let rec = LossRecord { iter, lr, total, cls, bbox, seg };
        writeln!(log, "{}", rec.to_line()).map_err(|e| Error::io("<log>", e))?;
    }
    Ok(store)
}

/// Evaluation-mode outputs for every scene, in order.
pub fn predict_all(model: &ModelConfig, rpn: &ParamStore, scenes: &[AnnotatedScene]) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(scenes.len());
    for s in scenes {
        let s4 = s.image.clone().reshape(vec![1, 3, s.image.shape()[1], s.image.shape()[2]])?;
        out.extend(predict(rpn, model, &s4)?);
    }
    Ok(out)
}

/// Decoded, NMS-filtered detections of phase `k` (1-based) for one image,
/// at most `max_dets`.
pub fn phase_detections(
    pred: &Prediction,
    k: usize,
    anchors: &AnchorGrid,
    image_w: usize,
    image_h: usize,
    es: &EvalSettings,
    image_id: usize,
) -> Result<Vec<Detection>> {
    let probs = pred
        .fg_probs
        .get(k.wrapping_sub(1))
        .ok_or_else(|| Error::InvalidArgument(format!("phase {k} out of range 1..={}", pred.fg_probs.len())))?
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("phase {k} has no classification output")))?;
    let dets = decode_detections(probs, &pred.deltas, anchors, image_w, image_h, es.min_size, image_id, k)?;
    let mut kept = nms(&dets, es.nms);
    kept.truncate(es.max_dets);
    Ok(kept)
}

fn proposals_of(dets: &[Detection]) -> Vec<Proposal> {
    dets.iter().map(|d| Proposal { bbox: d.bbox, score: d.score, image_id: d.image_id }).collect()
}

/// Train the crop classifier on proposals of the frozen proposal network.
/// Ground truths join the proposal pool as extra positives.
pub fn train_rcnn(
    cfg: &RunConfig,
    model: &ModelConfig,
    rpn: &ParamStore,
    train: &[AnnotatedScene],
    log: &mut dyn Write,
) -> Result<ParamStore> {
    let rs = cfg.rcnn_settings()?;
    let es = cfg.eval_settings()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed());
    rng.set_stream(2);
    let mut store = init_rcnn(&rs.model, &mut rng)?;
    let n = model.num_phases();
    let preds = predict_all(model, rpn, train)?;
    let mut pools = Vec::with_capacity(train.len());
    for (i, (s, p)) in train.iter().zip(&preds).enumerate() {
        let (w, h) = (s.image.shape()[2], s.image.shape()[1]);
        let anchors = AnchorGrid::for_image(&model.anchors, w, h);
        let mut props = proposals_of(&phase_detections(p, n, &anchors, w, h, &es, i)?);
        props.extend(s.gts.iter().map(|g| Proposal { bbox: *g, score: 1.0, image_id: i }));
        pools.push(props);
    }
    writeln!(log, "# iter lr total cls seg").map_err(|e| Error::io("<log>", e))?;
    let mut order: Vec<usize> = Vec::new();
    for iter in 0..rs.iters {
        if order.is_empty() {
            order = (0..train.len()).collect();
            order.shuffle(&mut rng);
        }
        let i = order.pop().unwrap();
        let s = &train[i];
        let batch = sample_crops(s, &pools[i], &rs, &mut rng);
        if batch.is_empty() {
            continue;
        }
        let lr = rs.lr * if (iter as f64) >= 0.75 * rs.iters as f64 { 0.1 } else { 1.0 };
        let mut g = Graph::new(&store, true);
        let x = g.tape.constant(Tensor::stack(&batch.crops)?);
        let out = rcnn_forward(&mut g, x, &rs.model)?;
        let loss = rcnn_loss(&mut g, &out, &batch, rs.model.seg_weight)?;
        let v = |x| g.tape.value(x).item();
        let (total, cls, seg) = (v(loss.total), v(loss.cls), v(loss.seg));
        if !total.is_finite() {
            return Err(Error::Diverged { iter });
        }
        g.tape.backward(loss.total)?;
        let grads = g.param_grads();
        drop(g);
        store.sgd_step(&grads, lr, 0.9)?;
        writeln!(log, "{iter} {} {} {} {}", sig6(lr), sig6(total), sig6(cls), sig6(seg))
            .map_err(|e| Error::io("<log>", e))?;
    }
    Ok(store)
}

/// Up to `per_image` proposals, a quarter reserved for positives.
fn sample_crops(s: &AnnotatedScene, pool: &[Proposal], rs: &RcnnSettings, rng: &mut impl Rng) -> CropBatch {
    let is_fg = |p: &Proposal| s.gts.iter().any(|g| iou(g, &p.bbox) >= rs.model.fg_iou);
    let (mut fg, mut bg): (Vec<&Proposal>, Vec<&Proposal>) = pool.iter().partition(|p| is_fg(p));
    fg.shuffle(rng);
    bg.shuffle(rng);
    let n_fg = fg.len().min(rs.per_image / 4);
    let n_bg = bg.len().min(rs.per_image - n_fg);
    let chosen: Vec<Proposal> = fg[..n_fg].iter().chain(&bg[..n_bg]).map(|p| (*p).clone()).collect();
    build_crop_batch(&s.image, &chosen, &s.gts, &rs.model, rs.policy)
}

/// Train everything the config enables.
pub fn train_detector(
    cfg: &RunConfig,
    data: &Dataset,
    rpn_log: &mut dyn Write,
    rcnn_log: &mut dyn Write,
    last_good: Option<&Path>,
) -> Result<Detector> {
    let model = cfg.model_config()?;
    let rpn = train_rpn(cfg, &data.train, rpn_log, last_good)?;
    let rcnn = if cfg.rcnn_settings()?.enabled {
        Some(train_rcnn(cfg, &model, &rpn, &data.train, rcnn_log)?)
    } else {
        None
    };
    Ok(Detector { model, rpn, rcnn })
}

/// Detections of every phase plus the second-stage output for a scene set.
#[derive(Clone, Debug)]
pub struct DetectionSet {
    /// `per_phase[k-1][image]`; `None` for phases without a classifier.
    pub per_phase: Vec<Option<Vec<Vec<Detection>>>>,
    /// Final-phase detections re-scored by the crop classifier.
    pub fused: Option<Vec<Vec<Detection>>>,
    pub predictions: Vec<Prediction>,
}

impl DetectionSet {
    pub fn final_phase(&self) -> &Vec<Vec<Detection>> {
        self.per_phase.last().unwrap().as_ref().unwrap()
    }

    /// The system's output: fused when a second stage exists.
    pub fn output(&self) -> &Vec<Vec<Detection>> {
        self.fused.as_ref().unwrap_or_else(|| self.final_phase())
    }
}

pub fn detect(cfg: &RunConfig, det: &Detector, scenes: &[AnnotatedScene]) -> Result<DetectionSet> {
    let es = cfg.eval_settings()?;
    let rs = cfg.rcnn_settings()?;
    let predictions = predict_all(&det.model, &det.rpn, scenes)?;
    let n = det.model.num_phases();
    let mut per_phase = Vec::with_capacity(n);
    for k in 1..=n {
        if !det.model.predicts(k) {
            per_phase.push(None);
            continue;
        }
        let mut all = Vec::with_capacity(scenes.len());
        for (i, (s, p)) in scenes.iter().zip(&predictions).enumerate() {
            let (w, h) = (s.image.shape()[2], s.image.shape()[1]);
            let anchors = AnchorGrid::for_image(&det.model.anchors, w, h);
            all.push(phase_detections(p, k, &anchors, w, h, &es, i)?);
        }
        per_phase.push(Some(all));
    }
    let fused = match (&det.rcnn, rs.enabled) {
        (Some(rcnn), true) => {
            let finals = per_phase.last().unwrap().as_ref().unwrap();
            let mut out = Vec::with_capacity(scenes.len());
            for (s, dets) in scenes.iter().zip(finals) {
                let kept: Vec<Detection> = hard_suppress(&proposals_of(dets), rs.policy)
                    .iter()
                    .map(|p| Detection { bbox: p.bbox, score: p.score, image_id: p.image_id, phase: n })
                    .collect();
                let crops: Vec<Tensor> = kept.iter().map(|d| crop_bilinear(&s.image, &d.bbox, rs.model.crop)).collect();
                let scores = rcnn_predict(rcnn, &rs.model, &crops)?;
                let mut fused: Vec<Detection> = kept
                    .into_iter()
                    .zip(scores)
                    .map(|(mut d, c)| {
                        d.score = fuse_scores(d.score, c, rs.fusion);
                        d
                    })
                    .collect();
                fused.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
                out.push(fused);
            }
            Some(out)
        }
        _ => None,
    };
    Ok(DetectionSet { per_phase, fused, predictions })
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub per_phase: Vec<Option<EvalCurve>>,
    pub fused: Option<EvalCurve>,
}

impl EvalReport {
    pub fn final_phase(&self) -> &EvalCurve {
        self.per_phase.last().unwrap().as_ref().unwrap()
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for (k, c) in self.per_phase.iter().enumerate() {
            if let Some(c) = c {
                s.push_str(&format!("phase{} log_avg_mr {} recall@1fppi {}\n", k + 1, sig6(c.log_avg), sig6(c.recall_at(1.0))));
            }
        }
        if let Some(c) = &self.fused {
            s.push_str(&format!("fused log_avg_mr {} recall@1fppi {}\n", sig6(c.log_avg), sig6(c.recall_at(1.0))));
        }
        s
    }
}

pub fn evaluate_set(cfg: &RunConfig, set: &DetectionSet, scenes: &[AnnotatedScene]) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let es = cfg.eval_settings()?;
    let gts: Vec<Vec<BBox>> = scenes.iter().map(|s| s.gts.clone()).collect();
    let curve = |d: &Vec<Vec<Detection>>| evaluate(d, &gts, es.fppi_lo, es.fppi_hi);
    Ok(EvalReport {
        per_phase: set.per_phase.iter().map(|p| p.as_ref().map(curve).transpose()).collect::<Result<_>>()?,
        fused: set.fused.as_ref().map(curve).transpose()?,
    })
}

/// Fraction of final-phase proposals removed by hard suppression and the
/// recall at IoU 0.5 before and after.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuppressionStats {
    pub total: usize,
    pub suppressed: usize,
    pub recall_before: f64,
    pub recall_after: f64,
}

pub fn suppression_stats(cfg: &RunConfig, set: &DetectionSet, scenes: &[AnnotatedScene]) -> Result<SuppressionStats> {
    let rs = cfg.rcnn_settings()?;
    let before = set.final_phase();
    let after: Vec<Vec<Detection>> =
        before.iter().map(|d| d.iter().filter(|x| x.score >= rs.policy.z).cloned().collect()).collect();
    let gts: Vec<Vec<BBox>> = scenes.iter().map(|s| s.gts.clone()).collect();
    let total = before.iter().map(Vec::len).sum::<usize>();
    let kept = after.iter().map(Vec::len).sum::<usize>();
    Ok(SuppressionStats {
        total,
        suppressed: total - kept,
        recall_before: recall(before, &gts),
        recall_after: recall(&after, &gts),
    })
}

/// `P̃_k` per phase (predicting phases only) for each prediction.
pub fn fg_max_maps(preds: &[Prediction]) -> Result<Vec<Vec<Tensor>>> {
    preds
        .iter()
        .map(|p| p.fg_probs.iter().flatten().map(foreground_max_map).collect::<Result<Vec<_>>>())
        .collect()
}

pub fn write_detections(path: &Path, dets: &[Vec<Detection>]) -> Result<()> {
    let mut s = String::new();
    for d in dets.iter().flatten() {
        let b = &d.bbox;
        s.push_str(&format!(
            "{} {} {} {} {} {}\n",
            d.image_id,
            sig6(d.score),
            sig6(b.x1),
            sig6(b.y1),
            sig6(b.x2),
            sig6(b.y2)
        ));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
