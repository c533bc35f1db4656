//! Phase-1 feature extractor: a small VGG-style stack whose stride levels
//! follow `2^(i-1)` for `i = 1..=5`.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stride levels `i = 1..=n` with down-sampling factor `2^(i-1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StrideSet {
    pub levels: usize,
}

impl Default for StrideSet {
    fn default() -> Self {
        StrideSet { levels: 5 }
    }
}

impl StrideSet {
    pub fn factor(&self, level: usize) -> usize {
        1 << (level - 1)
    }

    pub fn extent(&self, level: usize, input: usize) -> usize {
        input.div_ceil(self.factor(level))
    }

    /// The coarsest stride; inputs must be divisible by it.
    pub fn max_factor(&self) -> usize {
        self.factor(self.levels)
    }
}

/// Features of one phase keyed by stride level, covering a contiguous range.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub phase: usize,
    pub levels: BTreeMap<usize, Var>,
}

impl FeaturePyramid {
    pub fn level(&self, i: usize) -> Result<Var> {
        self.levels.get(&i).copied().ok_or(Error::MissingLevel(i))
    }

    pub fn top_level(&self) -> usize {
        *self.levels.keys().next_back().expect("empty pyramid")
    }

    pub fn bottom_level(&self) -> usize {
        *self.levels.keys().next().expect("empty pyramid")
    }

    /// Channel width of each level as recorded on the tape.
    pub fn widths(&self, g: &Graph<'_>) -> BTreeMap<usize, usize> {
        self.levels.iter().map(|(&i, &v)| (i, g.tape.value(v).shape()[1])).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Channel width of each stride block, levels 1..=5.
    pub widths: Vec<usize>,
    /// Lowest level exposed in the phase-1 pyramid.
    pub first_exposed: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { widths: vec![8, 16, 32, 64, 128], first_exposed: 3 }
    }
}

impl BackboneConfig {
    pub fn strides(&self) -> StrideSet {
        StrideSet { levels: self.widths.len() }
    }

    pub fn exposed_widths(&self) -> BTreeMap<usize, usize> {
        (self.first_exposed..=self.widths.len()).map(|i| (i, self.widths[i - 1])).collect()
    }
}

pub fn init_backbone(store: &mut ParamStore, cfg: &BackboneConfig, rng: &mut impl Rng) -> Result<()> {
    let mut in_c = 3;
    for (i, &w) in cfg.widths.iter().enumerate() {
        let level = i + 1;
        store.add_conv(&format!("p1.b{level}.c1"), 1, w, in_c, 3, rng)?;
        store.add_conv(&format!("p1.b{level}.c2"), 1, w, w, 3, rng)?;
        in_c = w;
    }
    Ok(())
}

/// Check that a `B×3×H×W` image fits the stride set.
pub fn check_image_extent(shape: &[usize], strides: &StrideSet) -> Result<()> {
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::Shape(format!("expected a B×3×H×W image, got {shape:?}")));
    }
    let d = strides.max_factor();
    for &e in &shape[2..] {
        if e == 0 || e % d != 0 {
            return Err(Error::Indivisible { extent: e, divisor: d, padded: e.div_ceil(d).max(1) * d });
        }
    }
    Ok(())
}

/// Subtracted from `[0, 1]` pixel values before the first convolution.
pub const INPUT_MEAN: f64 = 0.5;

/// Run the backbone; the returned pyramid exposes levels
/// `first_exposed..=n`, each the last activation of its stride block.
pub fn backbone_forward(g: &mut Graph<'_>, image: Var, cfg: &BackboneConfig) -> Result<FeaturePyramid> {
    check_image_extent(g.tape.value(image).shape(), &cfg.strides())?;
    let mut levels = BTreeMap::new();
    let mean = g.tape.constant(Tensor::full(g.tape.value(image).shape(), -INPUT_MEAN));
    let mut x = g.tape.add(image, mean)?;
    for level in 1..=cfg.widths.len() {
        if level > 1 {
            x = g.tape.max_pool2(x)?;
        }
        x = g.conv(x, &format!("p1.b{level}.c1"), 1, 1)?;
        x = g.tape.relu(x);
        x = g.conv(x, &format!("p1.b{level}.c2"), 1, 1)?;
        x = g.tape.relu(x);
        if level >= cfg.first_exposed {
            levels.insert(level, x);
        }
    }
    Ok(FeaturePyramid { phase: 1, levels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(cfg: &BackboneConfig, h: usize, w: usize) -> Result<Vec<Vec<usize>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        init_backbone(&mut store, cfg, &mut rng)?;
        let mut g = Graph::new(&store, false);
        let img = g.tape.constant(Tensor::full(&[1, 3, h, w], 0.5));
        let pyr = backbone_forward(&mut g, img, cfg)?;
        Ok(pyr.levels.values().map(|&v| g.tape.value(v).shape().to_vec()).collect())
    }

    #[test]
    fn level_five_of_160_is_10() {
        let shapes = run(&BackboneConfig::default(), 160, 160).unwrap();
        assert_eq!(shapes.last().unwrap(), &vec![1, 128, 10, 10]);
    }

    #[test]
    fn toy_widths_shapes() {
        let cfg = BackboneConfig { widths: vec![4, 8, 16, 32, 64], first_exposed: 3 };
        let shapes = run(&cfg, 64, 64).unwrap();
        assert_eq!(shapes, vec![vec![1, 16, 16, 16], vec![1, 32, 8, 8], vec![1, 64, 4, 4]]);
    }

    #[test]
    fn indivisible_extent_names_padding() {
        let err = run(&BackboneConfig::default(), 100, 160).unwrap_err();
        assert!(matches!(err, Error::Indivisible { extent: 100, padded: 112, .. }));
        assert!(err.to_string().contains("pad to 112"));
    }

    #[test]
    fn all_parameters_in_phase_one() {
        let mut store = ParamStore::new();
        init_backbone(&mut store, &BackboneConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(store.groups(), vec![1]);
    }

    #[test]
    fn stride_extents() {
        let s = StrideSet::default();
        assert_eq!((1..=5).map(|i| s.extent(i, 160)).collect::<Vec<_>>(), vec![160, 80, 40, 20, 10]);
        assert_eq!(s.extent(5, 100), 7);
    }
}
