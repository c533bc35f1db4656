//! Command-line surface: `train`, `eval`, `infer`, `analyze`, `ablate`,
//! `macs` and `gen-data`.

use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::deencoder::ResampleMode;
use crate::error::{Error, Result};
use crate::eval::{count_macs, disagreement_image, heatmap, peak_profile, phase_disagreement, sig6, Disagreement};
use crate::pipeline::{
    detect, evaluate_set, fg_max_maps, load_data, load_test, suppression_stats, train_detector, write_detections, Dataset, Detector,
};
use crate::ppm::Rgb8;
use crate::rpn::ModelConfig;
use crate::synth::{rgb_to_tensor, write_dataset, AnnotatedScene};
use crate::tensor::Tensor;

#[derive(Debug, Parser)]
#[command(name = "phasedet", about = "Multi-phase autoregressive pedestrian proposal network")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct CheckpointArg {
    /// Defaults to `<out>/checkpoint.bin`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the proposal network, then the crop classifier when enabled.
    Train(Common),
    /// Per-phase and fused miss-rate curves on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: CheckpointArg,
        /// Evaluate only this phase.
        #[arg(long)]
        phase: Option<usize>,
    },
    /// Detect pedestrians in a PPM image or a directory of them.
    Infer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: CheckpointArg,
        #[arg(long)]
        input: PathBuf,
    },
    /// Heatmaps, disagreement maps, center-line profiles and MAC table.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: CheckpointArg,
    },
    /// Train and evaluate config variants under a shared seed.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Lines of `name key=value ...`; defaults to the labeling-policy sweep.
        #[arg(long)]
        sweep: Option<PathBuf>,
    },
    /// Analytic multiply-accumulate counts across widths and phase counts.
    Macs(Common),
    /// Write the train and test splits to `<out>/train` and `<out>/test`.
    GenData(Common),
}

impl Common {
    pub fn config(&self) -> Result<RunConfig> {
        let mut sets = self.set.clone();
        if let Some(s) = self.seed {
            sets.push(format!("seed={s}"));
        }
        match &self.config {
            Some(p) => RunConfig::load(p, &sets),
            None => RunConfig::with_overrides(&sets),
        }
    }

    /// Resolve the config, create the output directory and echo `run.cfg`.
    fn prepare(&self) -> Result<RunConfig> {
        let cfg = self.config()?;
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        write(&self.out.join("run.cfg"), &cfg.to_text())?;
        Ok(cfg)
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn checkpoint_path(common: &Common, ckpt: &CheckpointArg) -> PathBuf {
    ckpt.checkpoint.clone().unwrap_or_else(|| common.out.join("checkpoint.bin"))
}

/// Run a parsed command; returns the text printed to stdout.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Train(c) => cmd_train(&c),
        Command::Eval { common, ckpt, phase } => cmd_eval(&common, &checkpoint_path(&common, &ckpt), phase),
        Command::Infer { common, ckpt, input } => cmd_infer(&common, &checkpoint_path(&common, &ckpt), &input),
        Command::Analyze { common, ckpt } => cmd_analyze(&common, &checkpoint_path(&common, &ckpt)),
        Command::Ablate { common, sweep } => cmd_ablate(&common, sweep.as_deref()),
        Command::Macs(c) => cmd_macs(&c),
        Command::GenData(c) => cmd_gen_data(&c),
    }
}

pub fn cmd_train(c: &Common) -> Result<String> {
    let cfg = c.prepare()?;
    let data = load_data(&cfg)?;
    let ckpt = c.out.join("checkpoint.bin");
    let mut rpn_log = create(&c.out.join("train_log.txt"))?;
    let mut rcnn_log = create(&c.out.join("rcnn_log.txt"))?;
    let det = train_detector(&cfg, &data, &mut rpn_log, &mut rcnn_log, Some(&ckpt))?;
    det.save(&ckpt)?;
    Ok(format!("checkpoint written to {}\n", ckpt.display()))
}

fn test_split(cfg: &RunConfig) -> Result<Vec<AnnotatedScene>> {
    let test = load_test(cfg)?;
    if test.is_empty() {
        return Err(Error::InvalidArgument("test split is empty".into()));
    }
    Ok(test)
}

pub fn cmd_eval(c: &Common, ckpt: &Path, phase: Option<usize>) -> Result<String> {
    let cfg = c.prepare()?;
    let det = Detector::load(&cfg, ckpt)?;
    let n = det.model.num_phases();
    if let Some(k) = phase {
        if k == 0 || k > n || !det.model.predicts(k) {
            return Err(Error::InvalidArgument(format!("phase {k} has no prediction in this {n}-phase model")));
        }
    }
    let test = test_split(&cfg)?;
    let mut set = detect(&cfg, &det, &test)?;
    if let Some(k) = phase {
        for (i, p) in set.per_phase.iter_mut().enumerate() {
            if i + 1 != k {
                *p = None;
            }
        }
        if k != n {
            set.fused = None;
        }
    }
    let report = evaluate_set(&cfg, &set, &test)?;
    for (k, curve) in report.per_phase.iter().enumerate() {
        if let Some(curve) = curve {
            write(&c.out.join(format!("curve_phase{}.txt", k + 1)), &curve.to_text())?;
        }
    }
    if let Some(curve) = &report.fused {
        write(&c.out.join("curve_fused.txt"), &curve.to_text())?;
    }
    if phase.is_none() {
        write_detections(&c.out.join("detections.txt"), set.output())?;
    }
    let summary = report.summary();
    write(&c.out.join("eval_summary.txt"), &summary)?;
    Ok(summary)
}

fn load_images(input: &Path) -> Result<Vec<Tensor>> {
    let paths: Vec<PathBuf> = if input.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(input)
            .map_err(|e| Error::io(input, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
            .collect();
        v.sort();
        v
    } else {
        vec![input.to_path_buf()]
    };
    paths.iter().map(|p| Rgb8::load(p).map(|img| rgb_to_tensor(&img))).collect()
}

pub fn cmd_infer(c: &Common, ckpt: &Path, input: &Path) -> Result<String> {
    let cfg = c.prepare()?;
    let det = Detector::load(&cfg, ckpt)?;
    let scenes: Vec<AnnotatedScene> = load_images(input)?
        .into_iter()
        .enumerate()
        .map(|(index, image)| AnnotatedScene { index, image, gts: Vec::new(), occlusion: Vec::new(), shortfall: false })
        .collect();
    let set = detect(&cfg, &det, &scenes)?;
    let path = c.out.join("detections.txt");
    write_detections(&path, set.output())?;
    let n: usize = set.output().iter().map(Vec::len).sum();
    Ok(format!("{n} detections over {} images written to {}\n", scenes.len(), path.display()))
}

pub fn cmd_analyze(c: &Common, ckpt: &Path) -> Result<String> {
    let cfg = c.prepare()?;
    let es = cfg.eval_settings()?;
    let det = Detector::load(&cfg, ckpt)?;
    let test = test_split(&cfg)?;
    let set = detect(&cfg, &det, &test)?;
    let maps = fg_max_maps(&set.predictions)?;
    let phases: Vec<usize> = (1..=det.model.num_phases()).filter(|&k| det.model.predicts(k)).collect();
    let stride = det.model.anchors.stride;
    let mut manifest = String::new();
    for (i, img_maps) in maps.iter().enumerate().take(es.analyze_images) {
        for (m, &k) in img_maps.iter().zip(&phases) {
            let name = format!("heatmap_p{k}_{i:04}.ppm");
            heatmap(m, stride).save(&c.out.join(&name))?;
            let _ = writeln!(manifest, "{name}");
        }
        let mut pairs: Vec<(usize, usize)> = (1..img_maps.len()).map(|j| (j - 1, j)).collect();
        if img_maps.len() > 2 {
            pairs.push((0, img_maps.len() - 1));
        }
        for (a, b) in pairs {
            let cats = phase_disagreement(&img_maps[a], &img_maps[b], es.threshold)?;
            let (h, w) = (img_maps[a].shape()[0], img_maps[a].shape()[1]);
            let name = format!("delta_p{}_p{}_{i:04}.ppm", phases[a], phases[b]);
            disagreement_image(&cats, w, h, stride).save(&c.out.join(&name))?;
            let _ = writeln!(manifest, "{name}");
        }
    }
    let gts: Vec<_> = test.iter().map(|s| s.gts.clone()).collect();
    let profile = peak_profile(&maps, &gts, stride as f64)?;
    let mut ptext = profile.to_text();
    for (j, &k) in phases.iter().enumerate() {
        let _ = writeln!(ptext, "phase {k} peakedness {}", sig6(profile.peakedness(j + 1)));
    }
    write(&c.out.join("profile.txt"), &ptext)?;
    let mut counts = String::new();
    if maps.first().is_some_and(|m| m.len() > 1) {
        let last = maps[0].len() - 1;
        let mut tally = [0usize; 4];
        for m in &maps {
            for cat in phase_disagreement(&m[0], &m[last], es.threshold)? {
                tally[cat as usize] += 1;
            }
        }
        let names = ["agree_fg", "suppressed", "agree_bg", "emerged"];
        debug_assert_eq!(Disagreement::Emerged as usize, 3);
        for (n, t) in names.iter().zip(tally) {
            let _ = writeln!(counts, "{n} {t}");
        }
        write(&c.out.join("disagreement.txt"), &counts)?;
    }
    let supp = suppression_stats(&cfg, &set, &test)?;
    let stext = format!(
        "proposals {}\nsuppressed {}\nrecall_before {}\nrecall_after {}\n",
        supp.total,
        supp.suppressed,
        sig6(supp.recall_before),
        sig6(supp.recall_after)
    );
    write(&c.out.join("suppression.txt"), &stext)?;
    write(&c.out.join("macs.txt"), &mac_table()?)?;
    for f in ["profile.txt", "disagreement.txt", "suppression.txt", "macs.txt"] {
        if c.out.join(f).exists() {
            let _ = writeln!(manifest, "{f}");
        }
    }
    write(&c.out.join("manifest.txt"), &manifest)?;
    Ok(ptext)
}

/// Full-scale widths `c_S`, `c_M`, `c_L` for levels 3..5.
pub const FULL_WIDTHS: [(&str, [usize; 3]); 3] =
    [("S", [64, 128, 256]), ("M", [128, 256, 512]), ("L", [256, 512, 512])];

/// Proposal network at full-scale widths on a 768×576 input.
pub fn full_scale_model(num_phases: usize, widths: [usize; 3]) -> ModelConfig {
    let mut m = ModelConfig::desk(num_phases, widths, ResampleMode::Fused);
    m.backbone.widths = vec![64, 128, 256, 512, 512];
    m.pfe_width = 512;
    m
}

pub const FULL_INPUT: (usize, usize) = (768, 576);

/// `(label, N_k, width name, GMACs)` rows: every width at `N_k = 3`, then
/// `N_k = 1..4` at `c_M`.
pub fn mac_rows() -> Result<Vec<(usize, &'static str, f64)>> {
    let mut rows = Vec::new();
    for (name, w) in FULL_WIDTHS {
        rows.push((3, name, count_macs(&full_scale_model(3, w), FULL_INPUT.0, FULL_INPUT.1)?.giga()));
    }
    for n in [1, 2, 4] {
        rows.push((n, "M", count_macs(&full_scale_model(n, FULL_WIDTHS[1].1), FULL_INPUT.0, FULL_INPUT.1)?.giga()));
    }
    rows.sort_by_key(|r| (r.0, r.1));
    Ok(rows)
}

pub fn mac_table() -> Result<String> {
    let mut s = format!("# N_k widths GMAC (input {}x{})\n", FULL_INPUT.0, FULL_INPUT.1);
    for (n, w, g) in mac_rows()? {
        let _ = writeln!(s, "{n} {w} {}", sig6(g));
    }
    Ok(s)
}

pub fn cmd_macs(c: &Common) -> Result<String> {
    c.prepare()?;
    let table = mac_table()?;
    write(&c.out.join("macs.txt"), &table)?;
    Ok(table)
}

/// Labeling-policy schedules and the no-autoregressive variant.
pub const DEFAULT_SWEEP: &str = "\
lenient_to_strict rpn.policies=0.4,0.5,0.6
strict_to_lenient rpn.policies=0.6,0.5,0.4
moderate_to_moderate rpn.policies=0.5,0.5,0.5
strict_to_strict rpn.policies=0.6,0.6,0.6
no_autoregressive rpn.autoregressive=false
";

pub fn parse_sweep(path: &Path, text: &str) -> Result<Vec<(String, Vec<String>)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let name = parts.next().unwrap().to_string();
        let deltas: Vec<String> = parts.map(str::to_string).collect();
        if let Some(bad) = deltas.iter().find(|d| !d.contains('=')) {
            return Err(Error::Parse { path: path.into(), line: n + 1, msg: format!("`{bad}` is not key=value") });
        }
        out.push((name, deltas));
    }
    Ok(out)
}

/// Train and evaluate one variant: `(final-phase MR, recall at 1 FPPI)`.
pub fn run_variant(cfg: &RunConfig, data: &Dataset) -> Result<(f64, f64)> {
    let mut sink = std::io::sink();
    let mut sink2 = std::io::sink();
    let det = train_detector(cfg, data, &mut sink, &mut sink2, None)?;
    let set = detect(cfg, &det, &data.test)?;
    let report = evaluate_set(cfg, &set, &data.test)?;
    let c = report.fused.as_ref().unwrap_or_else(|| report.final_phase());
    Ok((c.log_avg, c.recall_at(1.0)))
}

pub fn cmd_ablate(c: &Common, sweep: Option<&Path>) -> Result<String> {
    let cfg = c.prepare()?;
    let variants = match sweep {
        Some(p) => parse_sweep(p, &std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => parse_sweep(Path::new("<default sweep>"), DEFAULT_SWEEP)?,
    };
    let data = load_data(&cfg)?;
    let mut table = String::from("# variant log_avg_mr recall@1fppi status\n");
    for (name, deltas) in variants {
        let row = cfg.with(&deltas).and_then(|v| run_variant(&v, &data));
        let _ = match row {
            Ok((mr, rec)) => writeln!(table, "{name} {} {} ok", sig6(mr), sig6(rec)),
            Err(e) => writeln!(table, "{name} - - failed: {e}"),
        };
        write(&c.out.join("ablation.txt"), &table)?;
    }
    Ok(table)
}

pub fn cmd_gen_data(c: &Common) -> Result<String> {
    let cfg = c.prepare()?;
    let scene = cfg.scene_config()?;
    let (n_train, n_test) = (cfg.usize("data.train")?, cfg.usize("data.test")?);
    write_dataset(&c.out.join("train"), &scene, 0..n_train)?;
    write_dataset(&c.out.join("test"), &scene, n_train..n_train + n_test)?;
    Ok(format!("wrote {n_train} train and {n_test} test scenes under {}\n", c.out.display()))
}
