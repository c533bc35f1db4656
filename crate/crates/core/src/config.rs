//! Flat `key = value` run configuration with typed views for each stage.

use std::collections::BTreeMap;
use std::path::Path;

use crate::backbone::BackboneConfig;
use crate::deencoder::{DeEncoderConfig, ResampleMode};
use crate::error::{Error, Result};
use crate::rpn::{default_policies, BboxPolicy, LossWeights, ModelConfig, TargetConfig};
use crate::second_stage::{Fusion, RcnnConfig, SuppressionPolicy};
use crate::synth::SceneConfig;
use crate::targets::AnchorConfig;

/// Marker for values derived from other keys when the config is resolved.
const AUTO: &str = "auto";

const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "1"),
    ("data.dir", ""),
    ("data.train", "300"),
    ("data.test", "100"),
    ("data.width", "160"),
    ("data.height", "160"),
    ("data.count_min", "1"),
    ("data.count_max", "4"),
    ("data.height_min", "24"),
    ("data.height_max", "96"),
    ("data.aspect", "0.41"),
    ("data.aspect_jitter", "0.05"),
    ("data.occlusion", "0.2"),
    ("data.clutter", "6"),
    ("data.seed", "7"),
    ("backbone.widths", "8,16,32,64,128"),
    ("resample.mode", "fused"),
    ("rpn.num_phases", "3"),
    ("rpn.pfe_width", "64"),
    ("rpn.autoregressive", "true"),
    ("rpn.batchnorm", "true"),
    ("rpn.policies", AUTO),
    ("rpn.lambda", AUTO),
    ("rpn.lambda_bbox", "1"),
    ("rpn.lambda_seg", "1"),
    ("rpn.bbox_policy", "0.3"),
    ("anchors.heights", "32,56,96"),
    ("anchors.aspect", "0.41"),
    ("labels.bg_ceiling", "0.3"),
    ("labels.force_best_match", "true"),
    ("labels.fg_ratio", "0.33"),
    ("train.iters", "3600"),
    ("train.batch", "1"),
    ("train.lr", "0.01"),
    ("train.momentum", "0.9"),
    ("train.warmup", "100"),
    ("train.decay_at", "0.75"),
    ("train.clip", "2"),
    ("train.flip", "true"),
    ("rcnn.enabled", "true"),
    ("rcnn.z", "0.005"),
    ("rcnn.h", "0.7"),
    ("rcnn.fusion", "geo"),
    ("rcnn.crop", "32"),
    ("rcnn.height_weighting", "false"),
    ("rcnn.lambda_seg", "1"),
    ("rcnn.iters", "300"),
    ("rcnn.lr", "0.01"),
    ("rcnn.per_image", "16"),
    ("eval.nms", "0.5"),
    ("eval.fppi_lo", "0.01"),
    ("eval.fppi_hi", "1"),
    ("eval.max_dets", "100"),
    ("eval.min_size", "2"),
    ("analyze.threshold", "0.5"),
    ("analyze.images", "4"),
];

#[derive(Clone, Debug)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    /// Keys set by a file or override rather than defaulted or derived.
    explicit: BTreeMap<String, String>,
}

impl PartialEq for RunConfig {
    fn eq(&self, other: &Self) -> bool {
        self.values == other.values
    }
}

/// Per-phase keys `phase{k}.target_stride` / `phase{k}.widths`.
fn phase_key(key: &str) -> Option<(usize, &str)> {
    let rest = key.strip_prefix("phase")?;
    let (k, field) = rest.split_once('.')?;
    let k = k.parse().ok()?;
    matches!(field, "target_stride" | "widths").then_some((k, field))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.trim_matches(|c| c == '[' || c == ']')
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Config(format!("{key}: `{s}` is not a valid list element"))))
        .collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = RunConfig::unresolved();
        c.resolve().expect("defaults are valid");
        c
    }
}

impl RunConfig {
    fn unresolved() -> Self {
        RunConfig {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            explicit: BTreeMap::new(),
        }
    }

    fn known(key: &str) -> bool {
        DEFAULTS.iter().any(|(k, _)| *k == key) || phase_key(key).is_some()
    }

    fn set_raw(&mut self, key: &str, value: &str) -> Result<()> {
        if !Self::known(key) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        self.explicit.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    /// Parse config text on top of the defaults, then apply `overrides`
    /// (`key=value`) in order.
    pub fn parse(text: &str, path: &Path, overrides: &[String]) -> Result<Self> {
        let mut c = RunConfig::unresolved();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { path: path.into(), line: n + 1, msg };
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected `key = value`".into()))?;
            c.set_raw(k.trim(), v).map_err(|e| err(e.to_string()))?;
        }
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            c.set_raw(k.trim(), v)?;
        }
        c.resolve()?;
        Ok(c)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path, overrides)
    }

    pub fn with_overrides(overrides: &[String]) -> Result<Self> {
        Self::parse("", Path::new("<defaults>"), overrides)
    }

    /// Apply further overrides to an already resolved config. Derived values
    /// are recomputed unless set explicitly.
    pub fn with(&self, overrides: &[String]) -> Result<Self> {
        let mut text = String::new();
        for (k, v) in &self.explicit {
            text.push_str(&format!("{k} = {v}\n"));
        }
        Self::parse(&text, Path::new("<derived>"), overrides)
    }

    /// Fill derived values and check every typed view.
    fn resolve(&mut self) -> Result<()> {
        let n = self.usize("rpn.num_phases")?;
        if n == 0 {
            return Err(Error::Config("rpn.num_phases must be at least 1".into()));
        }
        if self.str("rpn.policies") == AUTO {
            self.values.insert("rpn.policies".into(), join(&default_policies(n)));
        }
        if self.str("rpn.lambda") == AUTO {
            self.values.insert("rpn.lambda".into(), join(&LossWeights::default_for(n).phase));
        }
        let stale: Vec<String> =
            self.values.keys().filter(|k| phase_key(k).is_some_and(|(k, _)| k < 2 || k > n)).cloned().collect();
        if let Some(k) = stale.first() {
            return Err(Error::Config(format!("`{k}` does not name a phase in 2..={n}")));
        }
        for k in 2..=n {
            self.values.entry(format!("phase{k}.target_stride")).or_insert_with(|| (if k == 2 { "3" } else { "4" }).into());
            self.values.entry(format!("phase{k}.widths")).or_insert_with(|| "16,32,64".into());
        }
        self.model_config()?;
        self.target_config()?;
        self.loss_weights()?;
        self.scene_config()?.validate()?;
        self.train_settings()?;
        self.rcnn_settings()?;
        self.eval_settings()?;
        Ok(())
    }

    /// Effective configuration, one sorted `key = value` line per key.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn str(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    fn typed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.str(key);
        v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.typed(key)
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.typed(key)
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        self.typed(key)
    }

    pub fn seed(&self) -> u64 {
        self.typed("seed").unwrap_or(0)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let n = self.usize("rpn.num_phases")?;
        let resample: ResampleMode = self.str("resample.mode").parse()?;
        let backbone = BackboneConfig { widths: parse_list("backbone.widths", self.str("backbone.widths"))?, first_exposed: 3 };
        let top = backbone.widths.len();
        let mut phases = Vec::new();
        for k in 2..=n {
            let key = format!("phase{k}.widths");
            let ws: Vec<usize> = parse_list(&key, self.str(&key))?;
            if ws.len() != top - 2 {
                return Err(Error::Config(format!("{key} needs {} widths for levels 3..={top}", top - 2)));
            }
            phases.push(DeEncoderConfig {
                phase: k,
                target_level: self.usize(&format!("phase{k}.target_stride"))?,
                top_level: top,
                widths: (3..=top).zip(ws).collect(),
                resample,
            });
        }
        let cfg = ModelConfig {
            backbone,
            phases,
            pfe_width: self.usize("rpn.pfe_width")?,
            anchors: AnchorConfig {
                heights: parse_list("anchors.heights", self.str("anchors.heights"))?,
                aspect: self.f64("anchors.aspect")?,
                stride: 1 << (top - 1),
            },
            autoregressive: self.bool("rpn.autoregressive")?,
            batchnorm: self.bool("rpn.batchnorm")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn target_config(&self) -> Result<TargetConfig> {
        let n = self.usize("rpn.num_phases")?;
        let policies: Vec<f64> = parse_list("rpn.policies", self.str("rpn.policies"))?;
        if policies.len() != n || policies.iter().any(|&h| !(h > 0.0 && h <= 1.0)) {
            return Err(Error::Config(format!("rpn.policies needs {n} thresholds in (0, 1]")));
        }
        let bbox_policy = match self.str("rpn.bbox_policy") {
            "final" => BboxPolicy::FinalPhase,
            v => BboxPolicy::Fixed(v.parse().map_err(|_| Error::Config(format!("rpn.bbox_policy: `{v}`")))?),
        };
        Ok(TargetConfig {
            policies,
            bg_ceiling: self.f64("labels.bg_ceiling")?,
            force_best_match: self.bool("labels.force_best_match")?,
            bbox_policy,
            fg_ratio: self.f64("labels.fg_ratio")?,
        })
    }

    pub fn loss_weights(&self) -> Result<LossWeights> {
        let n = self.usize("rpn.num_phases")?;
        let phase: Vec<f64> = parse_list("rpn.lambda", self.str("rpn.lambda"))?;
        if phase.len() != n {
            return Err(Error::Config(format!("rpn.lambda needs {n} weights")));
        }
        Ok(LossWeights { phase, bbox: self.f64("rpn.lambda_bbox")?, seg: self.f64("rpn.lambda_seg")? })
    }

    pub fn scene_config(&self) -> Result<SceneConfig> {
        Ok(SceneConfig {
            width: self.usize("data.width")?,
            height: self.usize("data.height")?,
            count_min: self.usize("data.count_min")?,
            count_max: self.usize("data.count_max")?,
            height_min: self.f64("data.height_min")?,
            height_max: self.f64("data.height_max")?,
            aspect_mean: self.f64("data.aspect")?,
            aspect_jitter: self.f64("data.aspect_jitter")?,
            occlusion_prob: self.f64("data.occlusion")?,
            clutter_density: self.f64("data.clutter")?,
            seed: self.typed("data.seed")?,
        })
    }

    pub fn train_settings(&self) -> Result<TrainSettings> {
        let s = TrainSettings {
            iters: self.usize("train.iters")?,
            batch: self.usize("train.batch")?,
            lr: self.f64("train.lr")?,
            momentum: self.f64("train.momentum")?,
            warmup: self.usize("train.warmup")?,
            decay_at: self.f64("train.decay_at")?,
            clip: self.f64("train.clip")?,
            flip: self.bool("train.flip")?,
        };
        if s.batch == 0 {
            return Err(Error::Config("train.batch must be positive".into()));
        }
        Ok(s)
    }

    pub fn rcnn_settings(&self) -> Result<RcnnSettings> {
        let model = RcnnConfig {
            crop: self.usize("rcnn.crop")?,
            fg_iou: self.f64("rcnn.h")?,
            height_weighting: self.bool("rcnn.height_weighting")?,
            seg_weight: self.f64("rcnn.lambda_seg")?,
            ..RcnnConfig::default()
        };
        model.validate()?;
        let z = self.f64("rcnn.z")?;
        if !(0.0..1.0).contains(&z) {
            return Err(Error::Config(format!("rcnn.z must lie in [0, 1), got {z}")));
        }
        Ok(RcnnSettings {
            enabled: self.bool("rcnn.enabled")?,
            policy: SuppressionPolicy { z },
            fusion: self.str("rcnn.fusion").parse()?,
            model,
            iters: self.usize("rcnn.iters")?,
            lr: self.f64("rcnn.lr")?,
            per_image: self.usize("rcnn.per_image")?,
        })
    }

    pub fn eval_settings(&self) -> Result<EvalSettings> {
        let s = EvalSettings {
            nms: self.f64("eval.nms")?,
            fppi_lo: self.f64("eval.fppi_lo")?,
            fppi_hi: self.f64("eval.fppi_hi")?,
            max_dets: self.usize("eval.max_dets")?,
            min_size: self.f64("eval.min_size")?,
            threshold: self.f64("analyze.threshold")?,
            analyze_images: self.usize("analyze.images")?,
        };
        if !(s.nms > 0.0 && s.nms < 1.0) {
            return Err(Error::Config("eval.nms must lie in (0, 1)".into()));
        }
        if !(s.fppi_lo > 0.0 && s.fppi_lo < s.fppi_hi) {
            return Err(Error::Config("eval FPPI range is empty".into()));
        }
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Linear warm-up iterations.
    pub warmup: usize,
    /// Fraction of `iters` after which the rate drops tenfold.
    pub decay_at: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
    pub flip: bool,
}

impl TrainSettings {
    pub fn lr_at(&self, iter: usize) -> f64 {
        let warm = if iter < self.warmup { (iter + 1) as f64 / self.warmup as f64 } else { 1.0 };
        let decay = if (iter as f64) >= self.decay_at * self.iters as f64 { 0.1 } else { 1.0 };
        self.lr * warm * decay
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RcnnSettings {
    pub enabled: bool,
    pub policy: SuppressionPolicy,
    pub fusion: Fusion,
    pub model: RcnnConfig,
    pub iters: usize,
    pub lr: f64,
    pub per_image: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub nms: f64,
    pub fppi_lo: f64,
    pub fppi_hi: f64,
    pub max_dets: usize,
    pub min_size: f64,
    pub threshold: f64,
    pub analyze_images: usize,
}
