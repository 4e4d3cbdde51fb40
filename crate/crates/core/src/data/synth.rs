//! Seeded synthetic four-class image sets: filled disk, ring, cross and
//! gradient, one pattern per class.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::image::{normalize, resize_bilinear, PixelGrid};
use super::{Dataset, Example, LabelMap, Result};
use crate::rng::{stream_rng, Stream};

/// Side length patterns are drawn at before resizing.
pub const RENDER_SIZE: usize = 200;
pub const NOISE_SIGMA: f64 = 0.05;

const BACKGROUND: f64 = 0.15;
const FOREGROUND: f64 = 0.85;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    Disk,
    Ring,
    Cross,
    Gradient,
}

impl Pattern {
    pub const ALL: [Pattern; 4] = [Pattern::Disk, Pattern::Ring, Pattern::Cross, Pattern::Gradient];

    fn intensity(self, u: f64, v: f64, scale: f64) -> f64 {
        let r = (u * u + v * v).sqrt();
        let on = match self {
            Pattern::Disk => r <= 0.55 * scale,
            Pattern::Ring => (0.4 * scale..=0.6 * scale).contains(&r),
            Pattern::Cross => u.abs() <= 0.12 * scale || v.abs() <= 0.12 * scale,
            Pattern::Gradient => return BACKGROUND + (FOREGROUND - BACKGROUND) * (u + 1.0) / 2.0,
        };
        if on {
            FOREGROUND
        } else {
            BACKGROUND
        }
    }
}

/// Draws one pattern at `size`×`size` with a small random shift and scale,
/// then adds Gaussian noise of standard deviation `sigma` (in [0, 1] units).
pub fn render<R: Rng + ?Sized>(pattern: Pattern, size: usize, sigma: f64, rng: &mut R) -> PixelGrid {
    let shift_x = rng.gen_range(-0.1..0.1);
    let shift_y = rng.gen_range(-0.1..0.1);
    let scale = rng.gen_range(0.9..1.1);
    let noise = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        let v = 2.0 * (y as f64 + 0.5) / size as f64 - 1.0 - shift_y;
        for x in 0..size {
            let u = 2.0 * (x as f64 + 0.5) / size as f64 - 1.0 - shift_x;
            let base = pattern.intensity(u, v, scale);
            let value = (base + noise.sample(rng)).clamp(0.0, 1.0);
            let byte = (value * 255.0).round() as u8;
            data.extend([byte; 3]);
        }
    }
    PixelGrid::new(size, size, data).expect("square grid with three channels")
}

/// `per_class` examples of each pattern, rendered at [`RENDER_SIZE`] and
/// resized to `image_size`. Examples are in class-major order; label `i`
/// is `Pattern::ALL[i]`.
pub fn synthetic_dataset(per_class: usize, image_size: usize, seed: u64) -> Result<Dataset> {
    let mut rng = stream_rng(seed, Stream::Synthetic);
    let label_map = LabelMap::default();
    let mut examples = Vec::with_capacity(4 * per_class);
    for (label, pattern) in Pattern::ALL.into_iter().enumerate() {
        for i in 0..per_class {
            let grid = render(pattern, RENDER_SIZE, NOISE_SIGMA, &mut rng);
            let grid = resize_bilinear(&grid, image_size, image_size)?;
            examples.push(Example {
                image: normalize(&grid),
                label,
                source_id: format!("{}/synthetic_{i:04}", label_map.name(label).unwrap_or_default()),
            });
        }
    }
    Ok(Dataset {
        label_map,
        image_size: (image_size, image_size),
        examples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_valid() {
        let a = synthetic_dataset(2, 16, 7).unwrap();
        let b = synthetic_dataset(2, 16, 7).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        assert_eq!(a.class_counts(), vec![2, 2, 2, 2]);
        assert_ne!(a, synthetic_dataset(2, 16, 8).unwrap());
    }

    #[test]
    fn patterns_are_distinct_without_noise() {
        let mut rng = stream_rng(0, Stream::Synthetic);
        let grids: Vec<_> = Pattern::ALL.iter().map(|&p| render(p, 32, 0.0, &mut rng)).collect();
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(grids[i], grids[j]);
            }
        }
        // disk centre is bright, ring centre is dark
        assert!(grids[0].pixel(16, 16)[0] > 200);
        assert!(grids[1].pixel(16, 16)[0] < 60);
    }

    #[test]
    fn noise_level_matches_sigma() {
        let mut rng = stream_rng(1, Stream::Synthetic);
        let clean = render(Pattern::Disk, RENDER_SIZE, 0.0, &mut stream_rng(1, Stream::Synthetic));
        let noisy = render(Pattern::Disk, RENDER_SIZE, NOISE_SIGMA, &mut rng);
        let n = clean.data().len() as f64;
        let var = clean
            .data()
            .iter()
            .zip(noisy.data())
            .map(|(&a, &b)| ((a as f64 - b as f64) / 255.0).powi(2))
            .sum::<f64>()
            / n;
        assert!((var.sqrt() - NOISE_SIGMA).abs() < 0.01, "{}", var.sqrt());
    }
}
