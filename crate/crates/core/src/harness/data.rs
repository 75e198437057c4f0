//! Synthetic multi-modal scenes whose labels need information from several modalities.
//!
//! Segmentation scenes hold axis-aligned rectangles of foreground classes.
//! Each modality paints every class with its own colour, but the image is cut
//! into four bands and in three of them two modalities are blanked out, each
//! time a different pair, so every pair of modalities misses one band.
//!
//! Saliency scenes hold one elliptical object. Visible, depth and thermal
//! renderings each receive a different corruption: low contrast, heavy
//! noise, or an occluding patch.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{PipelineConfig, Task, INPUT_CHANNELS, MODALITY_POOL};
use crate::error::{config_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
    pub class: usize,
}

impl Rect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y0 + self.h && x >= self.x0 && x < self.x0 + self.w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    /// Contrast squeezed towards mid-grey.
    LowContrast,
    /// Strong additive noise.
    Noise,
    /// A patch overlapping the object is painted with background.
    Occlusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SceneRecipe {
    Smm {
        index: usize,
        size: usize,
        classes: usize,
        /// Painted in order; later rectangles cover earlier ones.
        rects: Vec<Rect>,
        /// Bands run along columns when true, along rows otherwise.
        vertical_bands: bool,
        /// Per band, bit `n` set when modality `n` is blanked.
        band_masks: [u8; 4],
        noise_seed: u64,
    },
    Vdt {
        index: usize,
        size: usize,
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
        /// Corruption applied to each modality.
        corruption: [Corruption; MODALITY_POOL],
        occluder: Rect,
        noise_seed: u64,
    },
}

/// One generated scene with every modality of the pool.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    /// `MODALITY_POOL` images of shape `[S, S, 3]`.
    pub modalities: Vec<Tensor>,
    /// Segmentation: `[S, S]` class ids. Saliency: `[S, S, 1]` in {0, 1}.
    pub labels: Tensor,
    pub recipe: SceneRecipe,
}

impl SyntheticScene {
    /// The images of the selected modalities, in selection order.
    pub fn inputs(&self, modalities: &[usize]) -> Vec<Tensor> {
        modalities.iter().map(|&m| self.modalities[m].clone()).collect()
    }

    pub fn label_ids(&self) -> Vec<usize> {
        self.labels.data().iter().map(|&v| v as usize).collect()
    }
}

const NOISE_STD: f64 = 0.03;
const SMM_PALETTE_STREAM: u64 = u64::MAX;

/// Per modality and class, an RGB colour. Deterministic in the dataset seed.
pub fn smm_palette(seed: u64, classes: usize) -> Vec<Vec<[f64; 3]>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SMM_PALETTE_STREAM);
    (0..MODALITY_POOL)
        .map(|_| {
            (0..classes)
                .map(|_| [rng.gen_range(0.15..1.0), rng.gen_range(0.15..1.0), rng.gen_range(0.15..1.0)])
                .collect()
        })
        .collect()
}

fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Class map painted from a segmentation recipe's rectangles.
pub fn smm_labels(size: usize, rects: &[Rect]) -> Vec<usize> {
    let mut labels = vec![0; size * size];
    for r in rects {
        for y in r.y0..r.y0 + r.h {
            for x in r.x0..r.x0 + r.w {
                labels[y * size + x] = r.class;
            }
        }
    }
    labels
}

/// Band index (0..4) of a pixel.
pub fn band_of(size: usize, vertical: bool, y: usize, x: usize) -> usize {
    let pos = if vertical { x } else { y };
    (pos * 4 / size).min(3)
}

fn smm_recipe(rng: &mut ChaCha8Rng, index: usize, size: usize, classes: usize) -> SceneRecipe {
    let even = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| 2 * rng.gen_range(lo / 2..=hi / 2);
    let count = rng.gen_range(2..=3);
    let rects = (0..count)
        .map(|_| {
            let h = even(rng, 4.min(size), (size / 2).max(4).min(size));
            let w = even(rng, 4.min(size), (size / 2).max(4).min(size));
            let y0 = even(rng, 0, size - h);
            let x0 = even(rng, 0, size - w);
            Rect { y0, x0, h, w, class: rng.gen_range(1..classes) }
        })
        .collect();
    let vertical_bands = rng.gen_bool(0.5);
    let mut band_masks: [u8; 4] = [0b101, 0b011, 0b110, 0b000];
    band_masks.shuffle(rng);
    SceneRecipe::Smm { index, size, classes, rects, vertical_bands, band_masks, noise_seed: rng.gen() }
}

fn vdt_recipe(rng: &mut ChaCha8Rng, index: usize, size: usize) -> SceneRecipe {
    let s = size as f64;
    let ry = rng.gen_range(0.16 * s..0.3 * s);
    let rx = rng.gen_range(0.16 * s..0.3 * s);
    let cy = rng.gen_range(ry + 1.0..s - ry - 1.0);
    let cx = rng.gen_range(rx + 1.0..s - rx - 1.0);
    let mut corruption = [Corruption::LowContrast, Corruption::Noise, Corruption::Occlusion];
    corruption.shuffle(rng);
    let oh = (size / 4).max(2);
    let ow = (size / 4).max(2);
    let oy = (cy as usize).saturating_sub(rng.gen_range(0..oh)).min(size - oh);
    let ox = (cx as usize).saturating_sub(rng.gen_range(0..ow)).min(size - ow);
    let occluder = Rect { y0: oy, x0: ox, h: oh, w: ow, class: 0 };
    SceneRecipe::Vdt { index, size, cy, cx, ry, rx, corruption, occluder, noise_seed: rng.gen() }
}

/// Saliency mask of an ellipse recipe.
pub fn vdt_labels(size: usize, cy: f64, cx: f64, ry: f64, rx: f64) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let dy = (y as f64 + 0.5 - cy) / ry;
            let dx = (x as f64 + 0.5 - cx) / rx;
            if dy * dy + dx * dx <= 1.0 {
                out[y * size + x] = 1.0;
            }
        }
    }
    out
}

/// Renders a scene from its recipe; `seed` is the dataset seed (for the palette).
pub fn render(recipe: &SceneRecipe, seed: u64) -> Result<SyntheticScene> {
    match recipe {
        SceneRecipe::Smm { size, classes, rects, vertical_bands, band_masks, noise_seed, .. } => {
            let size = *size;
            let palette = smm_palette(seed, *classes);
            let labels = smm_labels(size, rects);
            let mut rng = ChaCha8Rng::seed_from_u64(*noise_seed);
            let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
            let mut modalities = Vec::with_capacity(MODALITY_POOL);
            for (n, colours) in palette.iter().enumerate() {
                let mut data = Vec::with_capacity(size * size * INPUT_CHANNELS);
                for y in 0..size {
                    for x in 0..size {
                        let blank = band_masks[band_of(size, *vertical_bands, y, x)] & (1 << n) != 0;
                        let colour = colours[labels[y * size + x]];
                        for ch in colour {
                            let v = ch + noise.sample(&mut rng);
                            data.push(if blank { 0.0 } else { v });
                        }
                    }
                }
                modalities.push(Tensor::new(vec![size, size, INPUT_CHANNELS], data)?);
            }
            let labels = Tensor::new(vec![size, size], labels.iter().map(|&c| c as f64).collect())?;
            Ok(SyntheticScene { modalities, labels, recipe: recipe.clone() })
        }
        SceneRecipe::Vdt { size, cy, cx, ry, rx, corruption, occluder, noise_seed, .. } => {
            let size = *size;
            let mask = vdt_labels(size, *cy, *cx, *ry, *rx);
            let mut rng = ChaCha8Rng::seed_from_u64(*noise_seed);
            let mut modalities = Vec::with_capacity(MODALITY_POOL);
            for (n, c) in corruption.iter().enumerate() {
                let noise_std = if *c == Corruption::Noise { 0.3 } else { NOISE_STD };
                let noise = Normal::new(0.0, noise_std).expect("valid std");
                let mut data = Vec::with_capacity(size * size * INPUT_CHANNELS);
                for y in 0..size {
                    for x in 0..size {
                        let mut fg = mask[y * size + x];
                        if *c == Corruption::Occlusion && occluder.contains(y, x) {
                            fg = 0.0;
                        }
                        let t = (x + y) as f64 / (2 * size) as f64;
                        for ch in 0..INPUT_CHANNELS {
                            let (bg_v, fg_v) = modality_levels(n, ch, t);
                            let mut v = bg_v + fg * (fg_v - bg_v);
                            if *c == Corruption::LowContrast {
                                v = 0.5 + 0.15 * (v - 0.5);
                            }
                            data.push(v + noise.sample(&mut rng));
                        }
                    }
                }
                modalities.push(Tensor::new(vec![size, size, INPUT_CHANNELS], data)?);
            }
            let labels = Tensor::new(vec![size, size, 1], mask)?;
            Ok(SyntheticScene { modalities, labels, recipe: recipe.clone() })
        }
    }
}

/// Background and object intensity of modality `n`, channel `ch`, at
/// diagonal coordinate `t` in `[0, 1)`.
fn modality_levels(n: usize, ch: usize, t: f64) -> (f64, f64) {
    match n {
        // visible: coloured object on a tinted gradient
        0 => {
            let bg = [0.3 + 0.2 * t, 0.35, 0.45 - 0.2 * t][ch];
            let fg = [0.9, 0.55, 0.15][ch];
            (bg, fg)
        }
        // depth: near object, receding background ramp
        1 => (0.2 + 0.3 * t, 0.85),
        // thermal: warm object, cool background
        _ => {
            let bg = [0.15, 0.1, 0.3][ch];
            let fg = [0.95, 0.7, 0.2][ch];
            (bg, fg)
        }
    }
}

/// Generates `n` scenes of side `size` for `task`.
pub fn generate_dataset(task: Task, n: usize, size: usize, classes: usize, seed: u64) -> Result<Vec<SyntheticScene>> {
    if n == 0 || size == 0 {
        return Err(config_err!("scene count and size must be positive"));
    }
    if task == Task::Smm && (size < 4 || size % 2 != 0) {
        return Err(config_err!("segmentation scenes need an even size of at least 4, got {size}"));
    }
    if task == Task::Smm && classes < 2 {
        return Err(config_err!("segmentation scenes need at least 2 classes"));
    }
    if task == Task::Vdt && size < 8 {
        return Err(config_err!("saliency scenes need size >= 8, got {size}"));
    }
    (0..n)
        .map(|i| {
            let mut rng = scene_rng(seed, i);
            let recipe = match task {
                Task::Smm => smm_recipe(&mut rng, i, size, classes),
                Task::Vdt => vdt_recipe(&mut rng, i, size),
            };
            render(&recipe, seed)
        })
        .collect()
}

/// Dataset described by a pipeline configuration.
pub fn dataset_for(cfg: &PipelineConfig) -> Result<Vec<SyntheticScene>> {
    generate_dataset(cfg.task, cfg.scenes, cfg.size(), cfg.classes, cfg.seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_reproducible() {
        for task in [Task::Smm, Task::Vdt] {
            let a = generate_dataset(task, 3, 16, 4, 5).unwrap();
            let b = generate_dataset(task, 3, 16, 4, 5).unwrap();
            assert_eq!(a, b);
            let c = generate_dataset(task, 3, 16, 4, 6).unwrap();
            assert_ne!(a, c);
            for s in &a {
                assert_eq!(render(&s.recipe, 5).unwrap(), *s);
            }
        }
    }

    #[test]
    fn every_pair_of_modalities_misses_one_band() {
        let scenes = generate_dataset(Task::Smm, 4, 16, 4, 1).unwrap();
        for s in &scenes {
            let SceneRecipe::Smm { band_masks, .. } = &s.recipe else { panic!() };
            for pair in [(0, 1), (0, 2), (1, 2)] {
                let missing = band_masks.iter().filter(|&&m| m & (1 << pair.0) != 0 && m & (1 << pair.1) != 0).count();
                assert_eq!(missing, 1);
            }
            assert!(band_masks.iter().all(|&m| m.count_ones() < 3));
        }
    }

    #[test]
    fn rectangles_are_even_aligned() {
        for s in generate_dataset(Task::Smm, 8, 16, 4, 2).unwrap() {
            let SceneRecipe::Smm { rects, .. } = &s.recipe else { panic!() };
            for r in rects {
                assert!(r.y0 % 2 == 0 && r.x0 % 2 == 0 && r.h % 2 == 0 && r.w % 2 == 0);
                assert!(r.y0 + r.h <= 16 && r.x0 + r.w <= 16);
                assert!((1..4).contains(&r.class));
            }
        }
    }

    #[test]
    fn bad_sizes_are_config_errors() {
        assert!(matches!(generate_dataset(Task::Smm, 0, 16, 4, 0), Err(crate::Error::Config(_))));
        assert!(matches!(generate_dataset(Task::Vdt, 2, 0, 4, 0), Err(crate::Error::Config(_))));
    }
}
