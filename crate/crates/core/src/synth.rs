//! Synthetic pedestrian scenes: textured backgrounds with clutter, upright
//! figures with a head, torso and split legs, and optional occluders.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ppm::Rgb8;
use crate::targets::{iou, BBox};
use crate::tensor::Tensor;

const PLACEMENT_RETRIES: usize = 40;
const MAX_PAIR_IOU: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    /// Inclusive pedestrian count range.
    pub count_min: usize,
    pub count_max: usize,
    pub height_min: f64,
    pub height_max: f64,
    pub aspect_mean: f64,
    /// Half-width of the uniform aspect jitter.
    pub aspect_jitter: f64,
    pub occlusion_prob: f64,
    /// Mean number of clutter shapes per scene.
    pub clutter_density: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 160,
            height: 160,
            count_min: 1,
            count_max: 4,
            height_min: 24.0,
            height_max: 96.0,
            aspect_mean: 0.41,
            aspect_jitter: 0.05,
            occlusion_prob: 0.2,
            clutter_density: 6.0,
            seed: 7,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scene config: {m}")));
        if self.width == 0 || self.height == 0 {
            return bad("empty image extent");
        }
        if self.count_min > self.count_max {
            return bad("count range is empty");
        }
        if !(self.height_min > 0.0 && self.height_min <= self.height_max) {
            return bad("height range is empty");
        }
        if self.height_max > self.height as f64 {
            return bad("maximum pedestrian height exceeds the image");
        }
        if !(self.aspect_jitter >= 0.0 && self.aspect_mean - self.aspect_jitter > 0.0) {
            return bad("aspect range must stay positive");
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) || self.clutter_density < 0.0 {
            return bad("occlusion probability or clutter density out of range");
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "width = {}", self.width);
        let _ = writeln!(s, "height = {}", self.height);
        let _ = writeln!(s, "count_min = {}", self.count_min);
        let _ = writeln!(s, "count_max = {}", self.count_max);
        let _ = writeln!(s, "height_min = {}", self.height_min);
        let _ = writeln!(s, "height_max = {}", self.height_max);
        let _ = writeln!(s, "aspect_mean = {}", self.aspect_mean);
        let _ = writeln!(s, "aspect_jitter = {}", self.aspect_jitter);
        let _ = writeln!(s, "occlusion_prob = {}", self.occlusion_prob);
        let _ = writeln!(s, "clutter_density = {}", self.clutter_density);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedScene {
    pub index: usize,
    /// `3×H×W` with values `k/255`.
    pub image: Tensor,
    pub gts: Vec<BBox>,
    /// Fraction of each box covered by its occluder.
    pub occlusion: Vec<f64>,
    /// Fewer pedestrians than requested could be placed.
    pub shortfall: bool,
}

impl AnnotatedScene {
    pub fn to_rgb(&self) -> Rgb8 {
        let (h, w) = (self.image.shape()[1], self.image.shape()[2]);
        let mut img = Rgb8::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let px = |c: usize| (self.image.data()[(c * h + y) * w + x] * 255.0).round() as u8;
                img.set(x, y, [px(0), px(1), px(2)]);
            }
        }
        img
    }
}

pub fn rgb_to_tensor(img: &Rgb8) -> Tensor {
    let (h, w) = (img.height, img.width);
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let p = img.get(x, y);
            for c in 0..3 {
                data[(c * h + y) * w + x] = p[c] as f64 / 255.0;
            }
        }
    }
    Tensor::new(vec![3, h, w], data).unwrap()
}

/// Floating-point canvas painted before quantization.
struct Canvas {
    w: usize,
    h: usize,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn fill(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, mut paint: impl FnMut(f64, f64) -> Option<[f64; 3]>) {
        let xs = x0.max(0.0).floor() as usize..(x1.min(self.w as f64).ceil().max(0.0) as usize);
        let ys = y0.max(0.0).floor() as usize..(y1.min(self.h as f64).ceil().max(0.0) as usize);
        for y in ys {
            for x in xs.clone() {
                let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                if cx < x0 || cx >= x1 || cy < y0 || cy >= y1 {
                    continue;
                }
                if let Some(c) = paint(cx, cy) {
                    self.px[y * self.w + x] = c;
                }
            }
        }
    }
}

fn random_color(rng: &mut impl Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

fn jitter(c: [f64; 3], amount: f64, rng: &mut impl Rng) -> [f64; 3] {
    let d = rng.gen_range(-amount..=amount);
    c.map(|v| v + d)
}

fn paint_background(cv: &mut Canvas, cfg: &SceneConfig, rng: &mut impl Rng) {
    let base = random_color(rng, 0.25, 0.75);
    let grad = [rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)];
    let (w, h) = (cv.w as f64, cv.h as f64);
    cv.fill(0.0, 0.0, w, h, |x, y| {
        let g = grad[0] * (x / w - 0.5) + grad[1] * (y / h - 0.5);
        Some(base.map(|v| v + g))
    });
    let n = rng.gen_range(0.0..=2.0 * cfg.clutter_density).round() as usize;
    for _ in 0..n {
        let color = random_color(rng, 0.05, 0.95);
        let (rw, rh) = (rng.gen_range(4.0..40.0), rng.gen_range(4.0..40.0));
        let (x0, y0) = (rng.gen_range(-rw..w), rng.gen_range(-rh..h));
        let round = rng.gen_bool(0.5);
        cv.fill(x0, y0, x0 + rw, y0 + rh, |x, y| {
            if round {
                let (dx, dy) = ((x - x0) / rw - 0.5, (y - y0) / rh - 0.5);
                (dx * dx + dy * dy <= 0.25).then_some(color)
            } else {
                Some(color)
            }
        });
    }
}

/// Head, torso with rounded corners, and two legs separated by a gap.
fn paint_pedestrian(cv: &mut Canvas, b: &BBox, rng: &mut impl Rng) {
    let (w, h) = (b.width(), b.height());
    let skin = jitter([0.85, 0.65, 0.5], 0.15, rng);
    let torso = random_color(rng, 0.0, 1.0);
    let legs = random_color(rng, 0.0, 0.45);
    let tex = rng.gen_range(0.02..0.08);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let stripe = move |y: f64| tex * ((y - b.y1) * 0.9 + phase).sin();

    let head_r = (0.11 * h).min(0.32 * w);
    let (hx, hy) = (b.x1 + 0.5 * w, b.y1 + head_r);
    cv.fill(hx - head_r, b.y1, hx + head_r, b.y1 + 2.0 * head_r, |x, y| {
        ((x - hx).powi(2) + (y - hy).powi(2) <= head_r * head_r).then_some(skin)
    });

    let (t0, t1) = (b.y1 + 2.0 * head_r, b.y1 + 0.6 * h);
    let r = 0.25 * w;
    cv.fill(b.x1, t0, b.x2, t1, |x, y| {
        let dx = (x - b.x1).min(b.x2 - x);
        let dy = y - t0;
        let inside = dx >= r || dy >= r || (r - dx).powi(2) + (r - dy).powi(2) <= r * r;
        inside.then(|| torso.map(|v| v + stripe(y)))
    });

    let gap = 0.18 * w;
    let leg_w = 0.5 * (w - gap) * 0.9;
    let mid = b.x1 + 0.5 * w;
    for (lx0, lx1) in [(mid - 0.5 * gap - leg_w, mid - 0.5 * gap), (mid + 0.5 * gap, mid + 0.5 * gap + leg_w)] {
        cv.fill(lx0, t1, lx1, b.y2, |_, y| Some(legs.map(|v| v + 0.5 * stripe(y))));
    }
}

/// Render scene `index`; deterministic in `(cfg.seed, index)`.
pub fn generate_scene(cfg: &SceneConfig, index: usize) -> Result<AnnotatedScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let (w, h) = (cfg.width, cfg.height);
    let mut cv = Canvas { w, h, px: vec![[0.0; 3]; w * h] };
    paint_background(&mut cv, cfg, &mut rng);

    let want = rng.gen_range(cfg.count_min..=cfg.count_max);
    let mut gts: Vec<BBox> = Vec::with_capacity(want);
    let mut occlusion = Vec::with_capacity(want);
    for _ in 0..want {
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let bh = rng.gen_range(cfg.height_min..=cfg.height_max);
            let aspect = cfg.aspect_mean + rng.gen_range(-cfg.aspect_jitter..=cfg.aspect_jitter);
            let bw = (aspect * bh).min(w as f64);
            let x1 = rng.gen_range(0.0..=w as f64 - bw);
            let y1 = rng.gen_range(0.0..=h as f64 - bh);
            let b = BBox::new(x1, y1, x1 + bw, y1 + bh);
            if gts.iter().all(|g| iou(g, &b) <= MAX_PAIR_IOU) {
                placed = Some(b);
                break;
            }
        }
        let Some(b) = placed else { break };
        paint_pedestrian(&mut cv, &b, &mut rng);
        let mut occ = 0.0;
        if rng.gen_bool(cfg.occlusion_prob) {
            let frac = rng.gen_range(0.2..0.6);
            let color = random_color(&mut rng, 0.1, 0.9);
            let oy0 = b.y2 - frac * b.height();
            let (ox0, ox1) = (b.x1 - rng.gen_range(0.0..0.5) * b.width(), b.x2 + rng.gen_range(0.0..0.5) * b.width());
            cv.fill(ox0, oy0, ox1, b.y2, |_, _| Some(color));
            occ = frac;
        }
        gts.push(b);
        occlusion.push(occ);
    }

    let mut data = vec![0.0; 3 * w * h];
    for (i, p) in cv.px.iter().enumerate() {
        let noise = rng.gen_range(-0.03..0.03);
        for c in 0..3 {
            data[c * w * h + i] = ((p[c] + noise).clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
    let shortfall = gts.len() < want;
    Ok(AnnotatedScene { index, image: Tensor::new(vec![3, h, w], data)?, gts, occlusion, shortfall })
}

/// Dataset directory: `images/NNNN.ppm`, `labels/NNNN.txt`, `meta.cfg`.
pub fn write_dataset(dir: &Path, cfg: &SceneConfig, indices: Range<usize>) -> Result<()> {
    cfg.validate()?;
    for sub in ["images", "labels"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let meta = format!("{}first_index = {}\ncount = {}\n", cfg.to_text(), indices.start, indices.len());
    let mp = dir.join("meta.cfg");
    std::fs::write(&mp, meta).map_err(|e| Error::io(&mp, e))?;
    for i in indices {
        let scene = generate_scene(cfg, i)?;
        scene.to_rgb().save(&dir.join("images").join(format!("{i:04}.ppm")))?;
        let mut text = String::new();
        for (b, o) in scene.gts.iter().zip(&scene.occlusion) {
            let _ = writeln!(text, "{} {} {} {} {}", b.x1, b.y1, b.x2, b.y2, o);
        }
        let lp = dir.join("labels").join(format!("{i:04}.txt"));
        std::fs::write(&lp, text).map_err(|e| Error::io(&lp, e))?;
    }
    Ok(())
}

/// Parse an annotation file of `x1 y1 x2 y2 occlusion` lines.
pub fn parse_labels(path: &Path, text: &str) -> Result<(Vec<BBox>, Vec<f64>)> {
    let mut gts = Vec::new();
    let mut occ = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { path: path.into(), line: n + 1, msg };
        let vals = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| err(format!("`{t}` is not a number"))))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", vals.len())));
        }
        let b = BBox::new(vals[0], vals[1], vals[2], vals[3]);
        if !b.is_valid() {
            return Err(err("box must have x2 > x1 and y2 > y1".into()));
        }
        if !(0.0..=1.0).contains(&vals[4]) {
            return Err(err("occlusion fraction outside [0, 1]".into()));
        }
        gts.push(b);
        occ.push(vals[4]);
    }
    Ok((gts, occ))
}

/// Load every labelled image in `dir`, ordered by file name. A missing or
/// empty directory yields no scenes.
pub fn read_dataset(dir: &Path) -> Result<Vec<AnnotatedScene>> {
    let labels = dir.join("labels");
    if !labels.exists() {
        return Ok(Vec::new());
    }
    let mut names: Vec<_> = std::fs::read_dir(&labels)
        .map_err(|e| Error::io(&labels, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|lp| {
            let stem = lp.file_stem().unwrap().to_string_lossy().into_owned();
            let text = std::fs::read_to_string(&lp).map_err(|e| Error::io(&lp, e))?;
            let (gts, occlusion) = parse_labels(&lp, &text)?;
            let img = Rgb8::load(&dir.join("images").join(format!("{stem}.ppm")))?;
            let index = stem.parse().unwrap_or(0);
            Ok(AnnotatedScene { index, image: rgb_to_tensor(&img), gts, occlusion, shortfall: false })
        })
        .collect()
}
