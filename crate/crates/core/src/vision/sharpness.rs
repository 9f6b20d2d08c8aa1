use super::{ImageBuffer, VisionError};

/// Mean population standard deviation over all complete, non-overlapping
/// `patch x patch` tiles. Partial tiles at the right and bottom are ignored.
pub fn local_std_sharpness(img: &ImageBuffer, patch: usize) -> Result<f64, VisionError> {
    if patch < 2 {
        return Err(VisionError::InvalidParameter(format!("patch size {patch} < 2")));
    }
    let (tx, ty) = (img.width() / patch, img.height() / patch);
    if tx == 0 || ty == 0 {
        return Err(VisionError::ImageTooSmall {
            width: img.width(),
            height: img.height(),
            required: patch,
        });
    }
    let n = (patch * patch) as f64;
    let mut total = 0.0;
    for by in 0..ty {
        for bx in 0..tx {
            // Two passes keep the variance exact for large offsets.
            let mut mean = 0.0f64;
            for y in by * patch..(by + 1) * patch {
                for x in bx * patch..(bx + 1) * patch {
                    mean += img.get(x, y) as f64;
                }
            }
            mean /= n;
            let mut var = 0.0f64;
            for y in by * patch..(by + 1) * patch {
                for x in bx * patch..(bx + 1) * patch {
                    let d = img.get(x, y) as f64 - mean;
                    var += d * d;
                }
            }
            total += (var / n).sqrt();
        }
    }
    Ok(total / (tx * ty) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_is_zero() {
        let img = ImageBuffer::from_fn(40, 33, |_, _| 17.0);
        assert_eq!(local_std_sharpness(&img, 16).unwrap(), 0.0);
    }

    #[test]
    fn alternating_columns() {
        let img = ImageBuffer::from_fn(64, 48, |x, _| if x % 2 == 0 { 0.0 } else { 255.0 });
        assert!((local_std_sharpness(&img, 16).unwrap() - 127.5).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = ImageBuffer::from_fn(53, 41, |_, _| rng.random_range(0.0..255.0));
        let patch = 8;
        let mut stds = Vec::new();
        for ty in 0..41 / patch {
            for tx in 0..53 / patch {
                let vals: Vec<f64> = (0..patch * patch)
                    .map(|i| img.get(tx * patch + i % patch, ty * patch + i / patch) as f64)
                    .collect();
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
                stds.push(v.sqrt());
            }
        }
        let oracle = stds.iter().sum::<f64>() / stds.len() as f64;
        assert!((local_std_sharpness(&img, patch).unwrap() - oracle).abs() < 1e-6);
    }

    #[test]
    fn rejects_tiny_images() {
        assert!(local_std_sharpness(&ImageBuffer::zeros(10, 30), 16).is_err());
        assert!(local_std_sharpness(&ImageBuffer::zeros(30, 30), 1).is_err());
    }

    proptest! {
        #[test]
        fn offset_invariant_and_gain_linear(seed in 0u64..1000, offset in -100.0f32..100.0, gain in 0.1f32..5.0, patch in 2usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = ImageBuffer::from_fn(37, 29, |_, _| rng.random_range(0.0..50.0));
            let base = local_std_sharpness(&img, patch).unwrap();
            let shifted = ImageBuffer::from_fn(37, 29, |x, y| img.get(x, y) + offset);
            let scaled = ImageBuffer::from_fn(37, 29, |x, y| img.get(x, y) * gain);
            prop_assert!((local_std_sharpness(&shifted, patch).unwrap() - base).abs() < 1e-3);
            prop_assert!((local_std_sharpness(&scaled, patch).unwrap() - gain as f64 * base).abs() < 1e-3 * gain as f64 * base.max(1.0));
        }
    }
}
