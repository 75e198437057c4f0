//! Replays scene labels from the stored recipes with independent code.

use pwrf_core::harness::data::{generate_dataset, Corruption, Rect, SceneRecipe};
use pwrf_core::Task;

fn covering_class(rects: &[Rect], y: usize, x: usize) -> usize {
    // the last rectangle drawn wins
    rects.iter().rev().find(|r| y >= r.y0 && y < r.y0 + r.h && x >= r.x0 && x < r.x0 + r.w).map_or(0, |r| r.class)
}

#[test]
fn segmentation_labels_and_bands_replay() {
    let scenes = generate_dataset(Task::Smm, 24, 16, 4, 9).unwrap();
    for scene in &scenes {
        let SceneRecipe::Smm { size, rects, vertical_bands, band_masks, classes, .. } = &scene.recipe else {
            panic!("wrong recipe kind");
        };
        assert_eq!((*size, *classes), (16, 4));
        let mut sorted = *band_masks;
        sorted.sort_unstable();
        assert_eq!(sorted, [0b000, 0b011, 0b101, 0b110]);
        let labels = scene.label_ids();
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(labels[y * 16 + x], covering_class(rects, y, x));
                let band = if *vertical_bands { x / 4 } else { y / 4 };
                for (n, m) in scene.modalities.iter().enumerate() {
                    let blank = band_masks[band] >> n & 1 == 1;
                    let px: Vec<f64> = (0..3).map(|c| m.get(&[y, x, c])).collect();
                    assert_eq!(px.iter().all(|&v| v == 0.0), blank, "scene pixel ({y},{x}) modality {n}");
                }
            }
        }
        // every pair of modalities is blank together in exactly one band
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            let both = band_masks.iter().filter(|&&m| m >> a & 1 == 1 && m >> b & 1 == 1).count();
            assert_eq!(both, 1);
        }
    }
}

#[test]
fn saliency_labels_replay() {
    let scenes = generate_dataset(Task::Vdt, 12, 32, 2, 4).unwrap();
    for scene in &scenes {
        let SceneRecipe::Vdt { size, cy, cx, ry, rx, corruption, .. } = &scene.recipe else {
            panic!("wrong recipe kind");
        };
        let mut kinds: Vec<_> = corruption.iter().map(|c| *c as u8).collect();
        kinds.sort_unstable();
        assert_eq!(kinds, [Corruption::LowContrast as u8, Corruption::Noise as u8, Corruption::Occlusion as u8]);
        let mut positives = 0;
        for y in 0..*size {
            for x in 0..*size {
                let (u, v) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
                let inside = u.hypot(v) <= 1.0 + 1e-12;
                let near_edge = (u.hypot(v) - 1.0).abs() < 1e-9;
                let got = scene.labels.get(&[y, x, 0]);
                if !near_edge {
                    assert_eq!(got, f64::from(u8::from(inside)));
                }
                positives += got as usize;
            }
        }
        assert!(positives > 0 && positives < size * size);
    }
}

#[test]
fn generation_is_deterministic_and_seed_dependent() {
    let a = generate_dataset(Task::Smm, 4, 8, 3, 1).unwrap();
    let b = generate_dataset(Task::Smm, 4, 8, 3, 1).unwrap();
    let c = generate_dataset(Task::Smm, 4, 8, 3, 2).unwrap();
    for i in 0..4 {
        assert_eq!(a[i].modalities, b[i].modalities);
        assert_eq!(a[i].labels, b[i].labels);
    }
    assert!(a.iter().zip(&c).any(|(x, y)| x.modalities != y.modalities));
}
