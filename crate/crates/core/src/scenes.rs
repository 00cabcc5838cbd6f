//! Procedural clean reference scenes: smooth gradients with random
//! rectangles and disks, colored with plausible RGBG ratios. A stand-in for
//! well-exposed captures when training and testing at desk scale.

use crate::error::{Error, Result};
use crate::rawproc::{BayerPattern, PackedRaw, RawMeta};
use crate::tensor::Tensor;
use rand::Rng;

fn synthetic_meta() -> RawMeta {
    RawMeta {
        pattern: BayerPattern::Rggb,
        black_level: 64,
        white_level: 1023,
        exposure_ratio: 1.0,
        camera_id: "synthetic".into(),
    }
}

/// A random 4-channel color around a given brightness. Red and blue swing
/// independently; the two greens stay nearly identical, as on a real sensor.
fn random_color<R: Rng>(brightness: f32, rng: &mut R) -> [f32; 4] {
    let g = (brightness * rng.random_range(0.7..1.3)).clamp(0.02, 1.0);
    let r = (g * rng.random_range(0.4..1.1)).clamp(0.01, 1.0);
    let b = (g * rng.random_range(0.4..1.1)).clamp(0.01, 1.0);
    let g2 = (g * rng.random_range(0.98..1.02)).clamp(0.01, 1.0);
    [r, g, b, g2]
}

/// One clean packed scene of `size` x `size` (multiple of 4).
pub fn gen_scene<R: Rng>(size: usize, rng: &mut R) -> Result<PackedRaw> {
    if size < 4 || size % 4 != 0 {
        return Err(Error::invalid("gen_scene", format!("size must be a multiple of 4 and >= 4, got {size}")));
    }
    // scene-wide brightness varies a lot between scenes so the corpus covers
    // the whole exposure range
    let brightness = rng.random_range(0.1..0.9f32);
    let c00 = random_color(brightness, rng);
    let c11 = random_color(brightness, rng);
    let mut data = vec![0.0f32; 4 * size * size];
    for c in 0..4 {
        for y in 0..size {
            let fy = y as f32 / (size - 1) as f32;
            for x in 0..size {
                let fx = x as f32 / (size - 1) as f32;
                let w = 0.5 * (fx + fy);
                data[c * size * size + y * size + x] = c00[c] * (1.0 - w) + c11[c] * w;
            }
        }
    }
    let n_shapes = rng.random_range(3..9);
    for _ in 0..n_shapes {
        let color = random_color(rng.random_range(0.05..0.95), rng);
        let cy = rng.random_range(0..size) as i64;
        let cx = rng.random_range(0..size) as i64;
        let half = rng.random_range(size / 16..size / 3).max(1) as i64;
        let disk = rng.random_range(0..2) == 0;
        for y in (cy - half).max(0)..(cy + half).min(size as i64) {
            for x in (cx - half).max(0)..(cx + half).min(size as i64) {
                if disk && (y - cy).pow(2) + (x - cx).pow(2) > half * half {
                    continue;
                }
                for c in 0..4 {
                    data[c * size * size + y as usize * size + x as usize] = color[c];
                }
            }
        }
    }
    let t = Tensor::new(vec![4, size, size], data)?.clip(0.0, 1.0);
    PackedRaw::new(t, synthetic_meta())
}

/// A corpus of scenes from one RNG stream.
pub fn gen_corpus<R: Rng>(count: usize, size: usize, rng: &mut R) -> Result<Vec<PackedRaw>> {
    (0..count).map(|_| gen_scene(size, rng)).collect()
}
