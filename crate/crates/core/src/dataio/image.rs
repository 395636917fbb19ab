//! Pixel-subsampled image instances with coordinate descriptors.

use crate::concrete::Rng;
use crate::error::{CoreError, Result};

use super::{Dataset, ImageSet, Instance};

/// Uniform sample of `count` pixel positions without replacement. The value
/// of a feature is its channel tuple scaled to [0,1]; the descriptor is the
/// normalized (row, col) with endpoints mapping exactly to 0 and 1; the id is
/// the flat pixel index. `image` is channel-interleaved [h*w*channels].
pub fn subsample_pixels(
    image: &[u8],
    height: usize,
    width: usize,
    channels: usize,
    label: usize,
    count: usize,
    rng: &mut Rng,
) -> Result<Instance> {
    let total = height * width;
    if image.len() != total * channels {
        return Err(CoreError::ShapeMismatch {
            op: "subsample_pixels",
            lhs: vec![height, width, channels],
            rhs: vec![image.len()],
        });
    }
    if count > total {
        return Err(CoreError::Config(format!(
            "cannot sample {count} pixels from a {height}x{width} image"
        )));
    }
    // partial Fisher-Yates: the first `count` entries are a uniform sample
    let mut positions: Vec<usize> = (0..total).collect();
    for i in 0..count {
        let j = i + rng.below(total - i);
        positions.swap(i, j);
    }
    positions.truncate(count);

    let rdiv = if height > 1 { (height - 1) as f64 } else { 1.0 };
    let cdiv = if width > 1 { (width - 1) as f64 } else { 1.0 };
    let mut feature_ids = Vec::with_capacity(count);
    let mut values = Vec::with_capacity(count * channels);
    let mut descriptors = Vec::with_capacity(count * 2);
    for &pos in &positions {
        let (r, c) = (pos / width, pos % width);
        feature_ids.push(pos as u64);
        for ch in 0..channels {
            values.push(image[pos * channels + ch] as f64 / 255.0);
        }
        descriptors.push(r as f64 / rdiv);
        descriptors.push(c as f64 / cdiv);
    }
    Ok(Instance { feature_ids, values, descriptors, label })
}

/// Fixed per-image pixel sample: image `i` always draws from the substream
/// `seed ⊕ i`, so the dataset is a pure function of (files, seed).
pub fn build_image_dataset(
    set: &ImageSet,
    sample_count: usize,
    seed: u64,
    limit: Option<usize>,
) -> Result<Dataset> {
    build_image_dataset_for_epoch(set, sample_count, seed, 0, limit)
}

/// Same, but the substream also mixes an epoch index so callers can resample
/// the available pixels each epoch.
pub fn build_image_dataset_for_epoch(
    set: &ImageSet,
    sample_count: usize,
    seed: u64,
    epoch: u64,
    limit: Option<usize>,
) -> Result<Dataset> {
    let n = limit.map_or(set.count, |l| l.min(set.count));
    if n == 0 {
        return Err(CoreError::Config("no images to build instances from".into()));
    }
    let master = Rng::new(seed);
    let mut instances = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = master.derive(epoch.wrapping_mul(0x1000_0000) ^ i as u64);
        instances.push(subsample_pixels(
            set.image(i),
            set.height,
            set.width,
            1,
            set.labels[i] as usize,
            sample_count,
            &mut rng,
        )?);
    }
    Ok(Dataset {
        instances,
        n_classes: 10,
        value_dim: 1,
        descriptor_dim: 2,
        image_shape: Some((set.height, set.width)),
        label_names: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn exhaustive_sample_covers_all_pixels() {
        let mut rng = Rng::new(1);
        let img: Vec<u8> = (0..16).map(|i| (i * 16) as u8).collect();
        let inst = subsample_pixels(&img, 4, 4, 1, 3, 16, &mut rng).unwrap();
        let ids: HashSet<u64> = inst.feature_ids.iter().copied().collect();
        assert_eq!(ids.len(), 16);
        assert_eq!(inst.label, 3);
        inst.validate(1, 2).unwrap();
    }

    #[test]
    fn corner_descriptors_hit_exact_endpoints() {
        let mut rng = Rng::new(2);
        let img = vec![255u8; 28 * 28];
        let inst = subsample_pixels(&img, 28, 28, 1, 0, 784, &mut rng).unwrap();
        let find = |id: u64| inst.feature_ids.iter().position(|&x| x == id).unwrap();
        let top_left = find(0);
        assert_eq!(inst.descriptor_row(top_left, 2), &[0.0, 0.0]);
        let bottom_right = find(27 * 28 + 27);
        assert_eq!(inst.descriptor_row(bottom_right, 2), &[1.0, 1.0]);
        // byte 255 → value exactly 1.0
        assert_eq!(inst.values[0], 1.0);
    }

    #[test]
    fn different_seeds_give_different_pixel_sets() {
        let img = vec![0u8; 28 * 28];
        let mut a = Rng::new(10);
        let mut b = Rng::new(11);
        let ia = subsample_pixels(&img, 28, 28, 1, 0, 100, &mut a).unwrap();
        let ib = subsample_pixels(&img, 28, 28, 1, 0, 100, &mut b).unwrap();
        assert_ne!(ia.feature_ids, ib.feature_ids);
    }

    #[test]
    fn rgb_tuple_is_one_feature() {
        let mut rng = Rng::new(3);
        // 2x2 rgb image, interleaved
        let img: Vec<u8> = (0..12).map(|i| (i * 20) as u8).collect();
        let inst = subsample_pixels(&img, 2, 2, 3, 1, 4, &mut rng).unwrap();
        assert_eq!(inst.n_features(), 4);
        assert_eq!(inst.values.len(), 12);
        inst.validate(3, 2).unwrap();
    }

    #[test]
    fn oversample_is_config_error() {
        let mut rng = Rng::new(4);
        let img = vec![0u8; 4];
        assert!(matches!(
            subsample_pixels(&img, 2, 2, 1, 0, 5, &mut rng),
            Err(CoreError::Config(_))
        ));
    }

    #[test]
    fn dataset_build_is_deterministic_per_seed() {
        let set = ImageSet {
            images: (0..4 * 9).map(|i| i as u8).collect(),
            count: 4,
            height: 3,
            width: 3,
            labels: vec![0, 1, 2, 3],
        };
        let a = build_image_dataset(&set, 5, 42, None).unwrap();
        let b = build_image_dataset(&set, 5, 42, None).unwrap();
        assert_eq!(a, b);
        let c = build_image_dataset_for_epoch(&set, 5, 42, 1, None).unwrap();
        assert_ne!(a, c, "epoch resampling must change the pixel sets");
    }
}
