#![allow(dead_code)]

use std::fs;
use std::path::Path;

use rand::Rng as _;
use receptive_graph::data::{encode_idx_images, encode_idx_labels, Dataset};
use receptive_graph::seed::rng_from;

/// Noisy class prototypes: every class lights two Gaussian blobs at its own
/// positions. Returns raw bytes and labels, balanced over classes.
pub fn synthetic_pixels(h: usize, w: usize, classes: usize, count: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut proto_rng = rng_from(1000 + classes as u64);
    let centers: Vec<[(f64, f64); 2]> = (0..classes)
        .map(|_| {
            let mut c = || (proto_rng.random_range(0.0..h as f64), proto_rng.random_range(0.0..w as f64));
            [c(), c()]
        })
        .collect();
    let mut rng = rng_from(seed);
    let mut pixels = Vec::with_capacity(count * h * w);
    let mut labels = Vec::with_capacity(count);
    for s in 0..count {
        let k = s % classes;
        let jitter = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        for r in 0..h {
            for c in 0..w {
                let mut v: f64 = centers[k]
                    .iter()
                    .map(|&(cr, cc)| {
                        let (dr, dc) = (r as f64 - cr - jitter.0, c as f64 - cc - jitter.1);
                        (-(dr * dr + dc * dc) / 4.0).exp()
                    })
                    .sum();
                v += rng.random_range(-0.15..0.15);
                pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        labels.push(k as u8);
    }
    (pixels, labels)
}

pub fn synthetic_dataset(h: usize, w: usize, classes: usize, count: usize, seed: u64) -> Dataset {
    let (pixels, labels) = synthetic_pixels(h, w, classes, count, seed);
    Dataset::new(
        pixels.iter().map(|&p| p as f32 / 255.0).collect(),
        labels.iter().map(|&l| l as usize).collect(),
        h,
        w,
        1,
        classes,
    )
    .unwrap()
}

/// Writes train and test splits under the default MNIST file names.
pub fn write_idx_splits(dir: &Path, h: usize, w: usize, classes: usize, train: usize, test: usize) {
    fs::create_dir_all(dir).unwrap();
    for (name_i, name_l, count, seed) in [
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", train, 11),
        ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", test, 12),
    ] {
        let (pixels, labels) = synthetic_pixels(h, w, classes, count, seed);
        fs::write(dir.join(name_i), encode_idx_images(h, w, &pixels)).unwrap();
        fs::write(dir.join(name_l), encode_idx_labels(&labels)).unwrap();
    }
}
