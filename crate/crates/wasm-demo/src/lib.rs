//! Browser bindings for three small operations: render a synthetic scene and
//! label its anchors under an IoU policy, run NMS over user boxes, and count
//! MACs for a proposal network configuration.
//!
//! Boxes cross the boundary as flat `[x1, y1, x2, y2, ...]` arrays.

use wasm_bindgen::prelude::*;

use phasedet::cli::{full_scale_model, FULL_INPUT, FULL_WIDTHS};
use phasedet::eval::{count_macs, nms, Detection};
use phasedet::synth::{generate_scene, SceneConfig};
use phasedet::targets::{assign_labels, AnchorConfig, AnchorGrid, BBox, Label, LabelPolicy};

fn boxes_from(flat: &[f64]) -> Result<Vec<BBox>, String> {
    if flat.len() % 4 != 0 {
        return Err(format!("box array length {} is not a multiple of 4", flat.len()));
    }
    Ok(flat.chunks(4).map(|c| BBox::new(c[0], c[1], c[2], c[3])).collect())
}

fn flatten(boxes: &[BBox]) -> Vec<f64> {
    boxes.iter().flat_map(|b| [b.x1, b.y1, b.x2, b.y2]).collect()
}

#[wasm_bindgen]
pub fn scene_width() -> usize {
    SceneConfig::default().width
}

#[wasm_bindgen]
pub fn scene_height() -> usize {
    SceneConfig::default().height
}

/// RGBA pixels of scene `index` under the default generator.
#[wasm_bindgen]
pub fn scene_rgba(index: usize) -> Result<Vec<u8>, String> {
    let s = generate_scene(&SceneConfig::default(), index).map_err(|e| e.to_string())?;
    let rgb = s.to_rgb();
    Ok(rgb.pixels.chunks(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect())
}

/// Ground-truth boxes of scene `index`.
#[wasm_bindgen]
pub fn scene_boxes(index: usize) -> Result<Vec<f64>, String> {
    let s = generate_scene(&SceneConfig::default(), index).map_err(|e| e.to_string())?;
    Ok(flatten(&s.gts))
}

/// Foreground anchors of the default grid against `gts` at threshold `h`,
/// as flat boxes.
#[wasm_bindgen]
pub fn foreground_anchors(gts: &[f64], h: f64) -> Result<Vec<f64>, String> {
    let cfg = SceneConfig::default();
    let grid = AnchorGrid::for_image(&AnchorConfig::default(), cfg.width, cfg.height);
    let la = assign_labels(&grid.boxes, &boxes_from(gts)?, &LabelPolicy::new(h)).map_err(|e| e.to_string())?;
    let fg: Vec<BBox> = la.foreground().map(|i| grid.boxes[i]).collect();
    Ok(flatten(&fg))
}

/// `[foreground, ignored, background]` anchor counts at threshold `h`.
#[wasm_bindgen]
pub fn label_counts(gts: &[f64], h: f64) -> Result<Vec<u32>, String> {
    let cfg = SceneConfig::default();
    let grid = AnchorGrid::for_image(&AnchorConfig::default(), cfg.width, cfg.height);
    let la = assign_labels(&grid.boxes, &boxes_from(gts)?, &LabelPolicy::new(h)).map_err(|e| e.to_string())?;
    let count = |l: Label| la.labels.iter().filter(|&&x| x == l).count() as u32;
    Ok(vec![count(Label::Foreground), count(Label::Ignore), count(Label::Background)])
}

/// Indices of the boxes kept by greedy NMS, in descending score.
#[wasm_bindgen]
pub fn nms_keep(boxes: &[f64], scores: &[f64], threshold: f64) -> Result<Vec<u32>, String> {
    let boxes = boxes_from(boxes)?;
    if boxes.len() != scores.len() {
        return Err(format!("{} boxes but {} scores", boxes.len(), scores.len()));
    }
    // The image id carries the input index through NMS.
    let dets: Vec<Detection> = boxes
        .into_iter()
        .zip(scores)
        .enumerate()
        .map(|(i, (bbox, &score))| Detection { bbox, score, image_id: i, phase: 1 })
        .collect();
    Ok(nms(&dets, threshold).into_iter().map(|d| d.image_id as u32).collect())
}

/// GMACs of an `num_phases`-phase network at full-scale widths `"S"`,
/// `"M"` or `"L"` on a 768×576 input.
#[wasm_bindgen]
pub fn gmacs(num_phases: usize, widths: &str) -> Result<f64, String> {
    let w = FULL_WIDTHS
        .iter()
        .find(|(n, _)| *n == widths)
        .ok_or_else(|| format!("unknown width set `{widths}`"))?
        .1;
    if !(1..=6).contains(&num_phases) {
        return Err(format!("phase count {num_phases} outside 1..=6"));
    }
    let m = full_scale_model(num_phases, w);
    Ok(count_macs(&m, FULL_INPUT.0, FULL_INPUT.1).map_err(|e| e.to_string())?.giga())
}
