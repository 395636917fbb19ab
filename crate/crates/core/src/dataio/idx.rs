//! IDX image/label container parsing (big-endian, the de facto MNIST layout).

use std::path::Path;

use crate::error::{CoreError, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Raw byte images with aligned labels; pixel bytes scale to [0,1] as v/255
/// at instance-construction time.
#[derive(Debug, Clone)]
pub struct ImageSet {
    pub images: Vec<u8>,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl ImageSet {
    pub fn image(&self, i: usize) -> &[u8] {
        let sz = self.height * self.width;
        &self.images[i * sz..(i + 1) * sz]
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(CoreError::Format(format!(
            "truncated {what} at byte {offset}: need {end} bytes, have {}",
            bytes.len()
        )));
    }
    Ok(u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
}

pub fn load_idx_images(images_path: &Path, labels_path: &Path) -> Result<ImageSet> {
    let img_bytes = std::fs::read(images_path)?;
    let lbl_bytes = std::fs::read(labels_path)?;

    let magic = be_u32(&img_bytes, 0, "image header")?;
    if magic != IMAGE_MAGIC {
        return Err(CoreError::Format(format!(
            "bad image magic {magic:#010x} at byte 0, expected {IMAGE_MAGIC:#010x}"
        )));
    }
    let count = be_u32(&img_bytes, 4, "image count")? as usize;
    let height = be_u32(&img_bytes, 8, "image height")? as usize;
    let width = be_u32(&img_bytes, 12, "image width")? as usize;
    let expected = 16 + count * height * width;
    if img_bytes.len() < expected {
        return Err(CoreError::Format(format!(
            "truncated image data at byte {}: expected {expected} bytes",
            img_bytes.len()
        )));
    }

    let magic = be_u32(&lbl_bytes, 0, "label header")?;
    if magic != LABEL_MAGIC {
        return Err(CoreError::Format(format!(
            "bad label magic {magic:#010x} at byte 0, expected {LABEL_MAGIC:#010x}"
        )));
    }
    let label_count = be_u32(&lbl_bytes, 4, "label count")? as usize;
    if label_count != count {
        return Err(CoreError::Format(format!(
            "count mismatch: {count} images vs {label_count} labels"
        )));
    }
    if lbl_bytes.len() < 8 + count {
        return Err(CoreError::Format(format!(
            "truncated label data at byte {}: expected {} bytes",
            lbl_bytes.len(),
            8 + count
        )));
    }

    Ok(ImageSet {
        images: img_bytes[16..expected].to_vec(),
        count,
        height,
        width,
        labels: lbl_bytes[8..8 + count].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_idx(dir: &Path, imgs: &[u8], count: u32, h: u32, w: u32, labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.join("imgs.idx");
        let lp = dir.join("lbls.idx");
        let mut f = std::fs::File::create(&ip).unwrap();
        f.write_all(&IMAGE_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&count.to_be_bytes()).unwrap();
        f.write_all(&h.to_be_bytes()).unwrap();
        f.write_all(&w.to_be_bytes()).unwrap();
        f.write_all(imgs).unwrap();
        let mut f = std::fs::File::create(&lp).unwrap();
        f.write_all(&LABEL_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(labels.len() as u32).to_be_bytes()).unwrap();
        f.write_all(labels).unwrap();
        (ip, lp)
    }

    #[test]
    fn roundtrip_and_scaling_contract() {
        let dir = tempfile::tempdir().unwrap();
        let imgs: Vec<u8> = vec![0, 128, 255, 64, 0, 0, 0, 255];
        let (ip, lp) = write_idx(dir.path(), &imgs, 2, 2, 2, &[7, 3]);
        let set = load_idx_images(&ip, &lp).unwrap();
        assert_eq!((set.count, set.height, set.width), (2, 2, 2));
        assert_eq!(set.image(0), &[0, 128, 255, 64]);
        assert_eq!(set.labels, vec![7, 3]);
        // byte 255 scales to exactly 1.0
        assert_eq!(set.image(0)[2] as f64 / 255.0, 1.0);
    }

    #[test]
    fn mismatched_counts_error() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx(dir.path(), &[0; 8], 2, 2, 2, &[1]);
        let err = load_idx_images(&ip, &lp).unwrap_err();
        assert!(err.to_string().contains("count mismatch"));
    }

    #[test]
    fn bad_magic_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("bad.idx");
        std::fs::write(&ip, [0u8; 20]).unwrap();
        let lp = dir.path().join("lbl.idx");
        std::fs::write(&lp, [0u8; 9]).unwrap();
        let err = load_idx_images(&ip, &lp).unwrap_err();
        assert!(err.to_string().contains("byte 0"), "{err}");
    }

    #[test]
    fn truncation_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("short.idx");
        std::fs::write(&ip, IMAGE_MAGIC.to_be_bytes()).unwrap();
        let lp = dir.path().join("lbl.idx");
        std::fs::write(&lp, [0u8; 9]).unwrap();
        let err = load_idx_images(&ip, &lp).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }
}
