//! Synthetic desk-scale stand-ins: the axis-aligned staircase task, Gaussian
//! blob toys, a 1D kink-regression toy, and procedurally generated digit-like
//! images (written and read through the IDX path).

use super::{Dataset, Targets};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Binary classification whose label flips at axis-aligned thresholds:
/// each dimension of [-1,1] is cut into `bands` equal bands and the label is
/// the parity of the band-index sum. Needs sharp, axis-aligned boundaries.
pub fn gen_staircase(dims: usize, bands: usize, n_rows: usize, seed: u64) -> Result<Dataset> {
    if dims == 0 || bands < 2 {
        return Err(Error::Config(format!("staircase needs dims>=1 and bands>=2, got {dims}/{bands}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Tensor::zeros(n_rows, dims);
    let mut classes = Vec::with_capacity(n_rows);
    for r in 0..n_rows {
        let mut band_sum = 0usize;
        for c in 0..dims {
            let v: f64 = rng.gen_range(-1.0..1.0);
            x.data[r * dims + c] = v;
            let band = (((v + 1.0) / 2.0 * bands as f64).floor() as usize).min(bands - 1);
            band_sum += band;
        }
        classes.push(band_sum % 2);
    }
    Ok(Dataset {
        x,
        targets: Targets::Classes(classes),
        class_count: 2,
        provenance: format!("staircase(dims={dims}, bands={bands})"),
    })
}

/// Two linearly separable Gaussian blobs centered at x = ±(1 + margin/2).
pub fn gen_two_blobs(n_per_class: usize, margin: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = 2 * n_per_class;
    let mut x = Tensor::zeros(rows, 2);
    let mut classes = Vec::with_capacity(rows);
    let center = 1.0 + margin / 2.0;
    for r in 0..rows {
        let class = r % 2;
        let cx = if class == 0 { -center } else { center };
        x.data[r * 2] = cx + gauss(&mut rng) * 0.3;
        x.data[r * 2 + 1] = gauss(&mut rng) * 0.3;
        classes.push(class);
    }
    Dataset {
        x,
        targets: Targets::Classes(classes),
        class_count: 2,
        provenance: format!("two-blobs(margin={margin})"),
    }
}

/// y = |x| on a uniform grid over [-2, 2]: the data-generating function has a
/// single kink an input activation function must discover.
pub fn gen_abs_regression(n_rows: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Tensor::zeros(n_rows, 1);
    let mut y = Vec::with_capacity(n_rows);
    for r in 0..n_rows {
        let v: f64 = rng.gen_range(-2.0..2.0);
        x.data[r] = v;
        y.push(v.abs());
    }
    Dataset { x, targets: Targets::Values(y), class_count: 0, provenance: "abs-regression".into() }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn box_blur(img: &mut [f64], side: usize, passes: usize) {
    let mut tmp = vec![0.0; img.len()];
    for _ in 0..passes {
        for r in 0..side {
            for c in 0..side {
                let mut sum = 0.0;
                let mut count = 0.0;
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                        if nr >= 0 && nr < side as i64 && nc >= 0 && nc < side as i64 {
                            sum += img[nr as usize * side + nc as usize];
                            count += 1.0;
                        }
                    }
                }
                tmp[r * side + c] = sum / count;
            }
        }
        img.copy_from_slice(&tmp);
    }
}

/// Procedural 10-class image set: each class has a fixed smooth random
/// prototype; samples are shifted copies with pixel noise. Class IDs carry no
/// relation to visual similarity, like digit identities.
pub fn gen_synth_digit_images(n_rows: usize, seed: u64) -> (Vec<Vec<u8>>, Vec<u8>) {
    const SIDE: usize = 28;
    const CLASSES: usize = 10;
    let mut prototypes = Vec::with_capacity(CLASSES);
    for class in 0..CLASSES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e3779b97f4a7c15u64.wrapping_mul(class as u64 + 1)));
        let mut img = vec![0.0f64; SIDE * SIDE];
        for v in &mut img {
            *v = rng.gen_range(0.0..1.0);
        }
        box_blur(&mut img, SIDE, 3);
        // contrast-stretch so prototypes occupy the full intensity range
        let (lo, hi) = img.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
            (l.min(v), h.max(v))
        });
        for v in &mut img {
            *v = (*v - lo) / (hi - lo);
        }
        prototypes.push(img);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut images = Vec::with_capacity(n_rows);
    let mut labels = Vec::with_capacity(n_rows);
    for r in 0..n_rows {
        let class = r % CLASSES;
        let proto = &prototypes[class];
        let (dr, dc): (i64, i64) = (rng.gen_range(-2..=2), rng.gen_range(-2..=2));
        let mut img = vec![0u8; SIDE * SIDE];
        for rr in 0..SIDE {
            for cc in 0..SIDE {
                let (sr, sc) = (rr as i64 - dr, cc as i64 - dc);
                let base = if sr >= 0 && sr < SIDE as i64 && sc >= 0 && sc < SIDE as i64 {
                    proto[sr as usize * SIDE + sc as usize]
                } else {
                    0.0
                };
                let noisy = base + gauss(&mut rng) * 0.12;
                img[rr * SIDE + cc] = (noisy.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        images.push(img);
        labels.push(class as u8);
    }
    (images, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn staircase_labels_follow_band_parity() {
        let ds = gen_staircase(2, 4, 200, 3).unwrap();
        let classes = match &ds.targets {
            Targets::Classes(c) => c,
            _ => panic!(),
        };
        for r in 0..ds.rows() {
            let mut sum = 0usize;
            for c in 0..2 {
                let v = ds.x.at(r, c);
                sum += (((v + 1.0) / 2.0 * 4.0).floor() as usize).min(3);
            }
            assert_eq!(classes[r], sum % 2);
        }
    }

    #[test]
    fn synth_digits_are_balanced_and_deterministic() {
        let (imgs, labels) = gen_synth_digit_images(50, 5);
        assert_eq!(imgs.len(), 50);
        for c in 0..10u8 {
            assert_eq!(labels.iter().filter(|&&l| l == c).count(), 5);
        }
        let (imgs2, labels2) = gen_synth_digit_images(50, 5);
        assert_eq!(imgs, imgs2);
        assert_eq!(labels, labels2);
    }

    #[test]
    fn blobs_are_separable_by_sign() {
        let ds = gen_two_blobs(100, 2.0, 1);
        let classes = match &ds.targets {
            Targets::Classes(c) => c.clone(),
            _ => panic!(),
        };
        for r in 0..ds.rows() {
            let predicted = usize::from(ds.x.at(r, 0) > 0.0);
            assert_eq!(predicted, classes[r]);
        }
    }
}
