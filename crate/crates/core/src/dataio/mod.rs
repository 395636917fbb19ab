//! Instance construction from images, bag-of-words corpora, and synthetic
//! naive-Bayes specs, plus batching/padding and a binary dataset cache.

mod bow;
mod embeddings;
mod idx;
mod image;
mod synthetic;

pub use bow::{build_bow_instances, load_corpus};
pub use embeddings::{load_embeddings, EmbeddingFormat, EmbeddingTable};
pub use idx::{load_idx_images, ImageSet};
pub use image::{build_image_dataset, build_image_dataset_for_epoch, subsample_pixels};
pub use synthetic::{build_synthetic_dataset, dataset_from_spec, SyntheticConfig};

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{CoreError, Result};

/// One example with its own feature index set: ids, raw values (value_dim per
/// id), descriptor vectors (descriptor_dim per id), and the class label.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub feature_ids: Vec<u64>,
    pub values: Vec<f64>,
    pub descriptors: Vec<f64>,
    pub label: usize,
}

impl Instance {
    pub fn n_features(&self) -> usize {
        self.feature_ids.len()
    }

    pub fn validate(&self, value_dim: usize, descriptor_dim: usize) -> Result<()> {
        let n = self.feature_ids.len();
        if self.values.len() != n * value_dim || self.descriptors.len() != n * descriptor_dim {
            return Err(CoreError::Data(format!(
                "instance arrays misaligned: {n} ids, {} values, {} descriptors",
                self.values.len(),
                self.descriptors.len()
            )));
        }
        let mut seen = HashSet::with_capacity(n);
        if !self.feature_ids.iter().all(|id| seen.insert(id)) {
            return Err(CoreError::Data("duplicate feature id in instance".into()));
        }
        Ok(())
    }

    pub fn value_row(&self, i: usize, value_dim: usize) -> &[f64] {
        &self.values[i * value_dim..(i + 1) * value_dim]
    }

    pub fn descriptor_row(&self, i: usize, descriptor_dim: usize) -> &[f64] {
        &self.descriptors[i * descriptor_dim..(i + 1) * descriptor_dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub instances: Vec<Instance>,
    pub n_classes: usize,
    pub value_dim: usize,
    pub descriptor_dim: usize,
    /// Present for pixel datasets; enables heatmaps.
    pub image_shape: Option<(usize, usize)>,
    /// Class-index → original label string, when labels were textual.
    pub label_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.instances.is_empty() {
            return Err(CoreError::Config("dataset is empty".into()));
        }
        for (i, inst) in self.instances.iter().enumerate() {
            inst.validate(self.value_dim, self.descriptor_dim)
                .map_err(|e| CoreError::Data(format!("instance {i}: {e}")))?;
            if inst.label >= self.n_classes {
                return Err(CoreError::Data(format!(
                    "instance {i}: label {} out of {} classes",
                    inst.label, self.n_classes
                )));
            }
        }
        Ok(())
    }

    pub fn min_feature_count(&self) -> usize {
        self.instances.iter().map(Instance::n_features).min().unwrap_or(0)
    }

    pub fn max_feature_count(&self) -> usize {
        self.instances.iter().map(Instance::n_features).max().unwrap_or(0)
    }
}

/// Right-padded batch. Padded positions carry zeroed values/descriptors and
/// false availability; real content round-trips untouched.
#[derive(Debug, Clone)]
pub struct Batch {
    /// [b, n_max, value_dim]
    pub values: Tensor,
    /// [b, n_max, descriptor_dim]
    pub descriptors: Tensor,
    /// Row-major [b * n_max].
    pub availability: Vec<bool>,
    pub labels: Vec<usize>,
    pub ids: Vec<Vec<u64>>,
    pub n_max: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn avail_row(&self, b: usize) -> &[bool] {
        &self.availability[b * self.n_max..(b + 1) * self.n_max]
    }
}

/// Pad instances to a common width.
pub fn batch_pad(
    instances: &[&Instance],
    n_max: usize,
    value_dim: usize,
    descriptor_dim: usize,
) -> Result<Batch> {
    if instances.is_empty() {
        return Err(CoreError::Config("cannot batch zero instances".into()));
    }
    let b = instances.len();
    let mut values = vec![0.0; b * n_max * value_dim];
    let mut descriptors = vec![0.0; b * n_max * descriptor_dim];
    let mut availability = vec![false; b * n_max];
    let mut labels = Vec::with_capacity(b);
    let mut ids = Vec::with_capacity(b);
    for (bi, inst) in instances.iter().enumerate() {
        let n = inst.n_features();
        if n > n_max {
            return Err(CoreError::Config(format!(
                "instance of {n} features exceeds batch width {n_max}"
            )));
        }
        values[(bi * n_max) * value_dim..(bi * n_max + n) * value_dim]
            .copy_from_slice(&inst.values);
        descriptors[(bi * n_max) * descriptor_dim..(bi * n_max + n) * descriptor_dim]
            .copy_from_slice(&inst.descriptors);
        availability[bi * n_max..bi * n_max + n].fill(true);
        labels.push(inst.label);
        ids.push(inst.feature_ids.clone());
    }
    Ok(Batch {
        values: Tensor::new(vec![b, n_max, value_dim], values)?,
        descriptors: Tensor::new(vec![b, n_max, descriptor_dim], descriptors)?,
        availability,
        labels,
        ids,
        n_max,
    })
}

// ── binary dataset cache ────────────────────────────────────────────

const CACHE_MAGIC: &[u8; 8] = b"VDFSDATA";
const CACHE_VERSION: u32 = 1;

pub fn save_cache(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&CACHE_VERSION.to_le_bytes())?;
    w.write_all(&(dataset.n_classes as u32).to_le_bytes())?;
    w.write_all(&(dataset.value_dim as u32).to_le_bytes())?;
    w.write_all(&(dataset.descriptor_dim as u32).to_le_bytes())?;
    match dataset.image_shape {
        Some((h, wd)) => {
            w.write_all(&[1])?;
            w.write_all(&(h as u32).to_le_bytes())?;
            w.write_all(&(wd as u32).to_le_bytes())?;
        }
        None => w.write_all(&[0])?,
    }
    match &dataset.label_names {
        Some(names) => {
            w.write_all(&[1])?;
            w.write_all(&(names.len() as u32).to_le_bytes())?;
            for name in names {
                let nb = name.as_bytes();
                w.write_all(&(nb.len() as u32).to_le_bytes())?;
                w.write_all(nb)?;
            }
        }
        None => w.write_all(&[0])?,
    }
    w.write_all(&(dataset.instances.len() as u32).to_le_bytes())?;
    for inst in &dataset.instances {
        w.write_all(&(inst.label as u32).to_le_bytes())?;
        w.write_all(&(inst.n_features() as u32).to_le_bytes())?;
        for &id in &inst.feature_ids {
            w.write_all(&id.to_le_bytes())?;
        }
        for &v in &inst.values {
            w.write_all(&v.to_le_bytes())?;
        }
        for &z in &inst.descriptors {
            w.write_all(&z.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_cache(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(CoreError::Format("not a dataset cache (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CACHE_VERSION {
        return Err(CoreError::Format(format!("unsupported cache version {version}")));
    }
    let n_classes = read_u32(&mut r)? as usize;
    let value_dim = read_u32(&mut r)? as usize;
    let descriptor_dim = read_u32(&mut r)? as usize;
    let image_shape = if read_u8(&mut r)? == 1 {
        Some((read_u32(&mut r)? as usize, read_u32(&mut r)? as usize))
    } else {
        None
    };
    let label_names = if read_u8(&mut r)? == 1 {
        let count = read_u32(&mut r)? as usize;
        let mut names = Vec::with_capacity(count);
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut nb = vec![0u8; len];
            r.read_exact(&mut nb)?;
            names.push(
                String::from_utf8(nb)
                    .map_err(|_| CoreError::Format("label name not utf-8".into()))?,
            );
        }
        Some(names)
    } else {
        None
    };
    let count = read_u32(&mut r)? as usize;
    let mut instances = Vec::with_capacity(count);
    for _ in 0..count {
        let label = read_u32(&mut r)? as usize;
        let n = read_u32(&mut r)? as usize;
        let mut feature_ids = Vec::with_capacity(n);
        for _ in 0..n {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)?;
            feature_ids.push(u64::from_le_bytes(buf));
        }
        let mut values = Vec::with_capacity(n * value_dim);
        let mut buf = [0u8; 8];
        for _ in 0..n * value_dim {
            r.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        let mut descriptors = Vec::with_capacity(n * descriptor_dim);
        for _ in 0..n * descriptor_dim {
            r.read_exact(&mut buf)?;
            descriptors.push(f64::from_le_bytes(buf));
        }
        instances.push(Instance { feature_ids, values, descriptors, label });
    }
    let dataset = Dataset {
        instances,
        n_classes,
        value_dim,
        descriptor_dim,
        image_shape,
        label_names,
    };
    dataset.validate()?;
    Ok(dataset)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut buf = [0u8; 1];
    r.read_exact(&mut buf)?;
    Ok(buf[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset() -> Dataset {
        Dataset {
            instances: vec![
                Instance {
                    feature_ids: vec![3, 5, 9],
                    values: vec![0.1, 0.2, 0.3],
                    descriptors: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
                    label: 0,
                },
                Instance {
                    feature_ids: vec![1, 2, 4, 8, 16],
                    values: vec![0.5, 0.4, 0.3, 0.2, 0.1],
                    descriptors: vec![0.9; 10],
                    label: 1,
                },
            ],
            n_classes: 2,
            value_dim: 1,
            descriptor_dim: 2,
            image_shape: None,
            label_names: None,
        }
    }

    #[test]
    fn equal_sizes_mean_no_padding() {
        let ds = tiny_dataset();
        let refs: Vec<&Instance> = vec![&ds.instances[0]];
        let batch = batch_pad(&refs, 3, 1, 2).unwrap();
        assert!(batch.availability.iter().all(|&a| a));
        assert_eq!(batch.values.data(), &ds.instances[0].values[..]);
    }

    #[test]
    fn mixed_sizes_pad_to_max() {
        let ds = tiny_dataset();
        let refs: Vec<&Instance> = ds.instances.iter().collect();
        let batch = batch_pad(&refs, 5, 1, 2).unwrap();
        assert_eq!(batch.n_max, 5);
        assert_eq!(batch.avail_row(0), &[true, true, true, false, false]);
        assert_eq!(batch.avail_row(1), &[true; 5]);
        // padded positions zeroed
        assert_eq!(&batch.values.data()[3..5], &[0.0, 0.0]);
        // real content preserved
        assert_eq!(&batch.values.data()[0..3], &ds.instances[0].values[..]);
    }

    #[test]
    fn oversize_instance_is_config_error() {
        let ds = tiny_dataset();
        let refs: Vec<&Instance> = ds.instances.iter().collect();
        assert!(matches!(batch_pad(&refs, 4, 1, 2), Err(CoreError::Config(_))));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let inst = Instance {
            feature_ids: vec![1, 1],
            values: vec![0.0, 0.0],
            descriptors: vec![0.0, 0.0, 0.0, 0.0],
            label: 0,
        };
        assert!(inst.validate(1, 2).is_err());
    }

    #[test]
    fn cache_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        let mut ds = tiny_dataset();
        ds.image_shape = Some((4, 7));
        ds.label_names = Some(vec!["cat".into(), "dog".into()]);
        save_cache(&ds, &path).unwrap();
        let back = load_cache(&path).unwrap();
        assert_eq!(ds, back);

        std::fs::write(&path, b"garbagegarbage").unwrap();
        assert!(matches!(load_cache(&path), Err(CoreError::Format(_))));
    }
}
