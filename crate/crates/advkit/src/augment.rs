use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

/// Stochastic input transformation used for labeled and unlabeled expansion.
///
/// Outputs always stay inside the valid input box `[0,1]` (clipped after
/// the transform). Draw order per call is fixed: crop row offset, crop col
/// offset, flip coin, then one noise draw per element.
#[derive(Debug, Clone, PartialEq)]
pub enum Augmenter {
    /// `[C,H,W]` images: zero-pad, random crop back to `HxW`, horizontal
    /// flip with probability `flip_prob`, then additive Gaussian noise.
    Image { pad: usize, flip_prob: f64, noise_scale: f64 },
    /// Flat vectors: additive Gaussian jitter.
    Vector { noise_scale: f64 },
    /// Pass-through.
    Identity,
}

impl Augmenter {
    /// Default augmenter for a per-sample input shape.
    pub fn for_shape(shape: &[usize]) -> Self {
        if shape.len() == 3 {
            Augmenter::Image { pad: 2, flip_prob: 0.5, noise_scale: 0.05 }
        } else {
            Augmenter::Vector { noise_scale: 0.05 }
        }
    }

    pub fn apply(&self, x: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
        let mut out = match self {
            Augmenter::Identity => return x.clone(),
            Augmenter::Vector { noise_scale } => {
                jitter(x.data(), *noise_scale, rng)
            }
            Augmenter::Image { pad, flip_prob, noise_scale } => {
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let mut data = x.data().to_vec();
                if *pad > 0 {
                    let dy = rng.random_range(0..=2 * pad);
                    let dx = rng.random_range(0..=2 * pad);
                    data = crop_from_padded(&data, c, h, w, *pad, dy, dx);
                }
                if rng.random::<f64>() < *flip_prob {
                    for ci in 0..c {
                        for i in 0..h {
                            let row = &mut data[(ci * h + i) * w..(ci * h + i + 1) * w];
                            row.reverse();
                        }
                    }
                }
                jitter(&data, *noise_scale, rng)
            }
        };
        for v in &mut out {
            *v = v.clamp(0.0, 1.0);
        }
        Tensor::new(x.shape().to_vec(), out).expect("augment preserves shape")
    }
}

fn jitter(data: &[f64], scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    data.iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(rng);
            v + scale * z
        })
        .collect()
}

/// View of a zero-padded image cropped back to `h x w` at offset `(dy, dx)`.
fn crop_from_padded(
    data: &[f64],
    c: usize,
    h: usize,
    w: usize,
    pad: usize,
    dy: usize,
    dx: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                // Source coordinates in the original image after shifting the
                // crop window over the padded canvas.
                let si = (i + dy) as isize - pad as isize;
                let sj = (j + dx) as isize - pad as isize;
                if si >= 0 && (si as usize) < h && sj >= 0 && (sj as usize) < w {
                    out[(ci * h + i) * w + j] = data[(ci * h + si as usize) * w + sj as usize];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn outputs_stay_in_unit_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vec_aug = Augmenter::Vector { noise_scale: 0.5 };
        let x = Tensor::new(vec![6], vec![0.0, 0.02, 0.5, 0.98, 1.0, 0.7]).unwrap();
        for _ in 0..200 {
            let y = vec_aug.apply(&x, &mut rng);
            assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let img_aug = Augmenter::Image { pad: 2, flip_prob: 0.5, noise_scale: 0.3 };
        let img = Tensor::filled(vec![1, 6, 6], 0.9);
        for _ in 0..100 {
            let y = img_aug.apply(&img, &mut rng);
            assert_eq!(y.shape(), img.shape());
            assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn identity_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        assert_eq!(Augmenter::Identity.apply(&x, &mut rng).data(), x.data());
    }

    #[test]
    fn centered_crop_without_noise_or_flip_recovers_input() {
        // pad = 0 disables cropping; flip_prob = 0 and noise 0 leave data alone.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let aug = Augmenter::Image { pad: 0, flip_prob: 0.0, noise_scale: 0.0 };
        let img = Tensor::new(vec![1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(aug.apply(&img, &mut rng).data(), img.data());
    }
}
