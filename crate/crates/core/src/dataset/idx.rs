//! MNIST IDX files: big-endian magic, dimensions, then raw `u8` payload.

use std::path::{Path, PathBuf};

use crate::error::{PanError, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const GLYPH_SIDE: usize = 28;
pub const GLYPH_LEN: usize = GLYPH_SIDE * GLYPH_SIDE;

/// One 28×28 grayscale digit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Glyph {
    pub pixels: Box<[u8; GLYPH_LEN]>,
    pub label: u8,
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| PanError::format(offset as u64, "file ends inside the header"))
}

pub fn parse_images(bytes: &[u8]) -> Result<Vec<Box<[u8; GLYPH_LEN]>>> {
    let magic = read_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(PanError::format(0, format!("image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}")));
    }
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    if rows != GLYPH_SIDE || cols != GLYPH_SIDE {
        return Err(PanError::format(8, format!("glyphs are {rows}×{cols}, expected 28×28")));
    }
    let need = 16 + count * GLYPH_LEN;
    if bytes.len() != need {
        return Err(PanError::format(
            bytes.len().min(need) as u64,
            format!("image file holds {} bytes, header implies {need}", bytes.len()),
        ));
    }
    Ok(bytes[16..]
        .chunks_exact(GLYPH_LEN)
        .map(|c| Box::new(<[u8; GLYPH_LEN]>::try_from(c).expect("exact chunk")))
        .collect())
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(PanError::format(0, format!("label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}")));
    }
    let count = read_u32(bytes, 4)? as usize;
    let need = 8 + count;
    if bytes.len() != need {
        return Err(PanError::format(
            bytes.len().min(need) as u64,
            format!("label file holds {} bytes, header implies {need}", bytes.len()),
        ));
    }
    if let Some(pos) = bytes[8..].iter().position(|&l| l > 9) {
        return Err(PanError::format((8 + pos) as u64, format!("label {} outside 0..=9", bytes[8 + pos])));
    }
    Ok(bytes[8..].to_vec())
}

/// Reads an image/label file pair. Either both parse completely or an error
/// is returned.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Vec<Glyph>> {
    let images = std::fs::read(images_path).map_err(|e| PanError::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| PanError::io(labels_path, e))?;
    let images = parse_images(&images)?;
    let labels = parse_labels(&labels)?;
    if images.len() != labels.len() {
        return Err(PanError::format(
            4,
            format!("{} images but {} labels", images.len(), labels.len()),
        ));
    }
    Ok(images
        .into_iter()
        .zip(labels)
        .map(|(pixels, label)| Glyph { pixels, label })
        .collect())
}

/// Locates the training image/label pair in an MNIST directory, accepting the
/// `train-images-idx3-ubyte` and `train-images.idx3-ubyte` spellings.
pub fn find_mnist_files(dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let pick = |names: &[&str]| {
        names
            .iter()
            .map(|n| dir.join(n))
            .find(|p| p.is_file())
            .ok_or_else(|| {
                PanError::io(
                    dir.join(names[0]),
                    std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found"),
                )
            })
    };
    Ok((
        pick(&["train-images-idx3-ubyte", "train-images.idx3-ubyte"])?,
        pick(&["train-labels-idx1-ubyte", "train-labels.idx1-ubyte"])?,
    ))
}

pub fn load_mnist_dir(dir: &Path) -> Result<Vec<Glyph>> {
    let (images, labels) = find_mnist_files(dir)?;
    load_mnist_idx(&images, &labels)
}

/// Serialises glyphs back into an IDX pair (used to build fixtures).
pub fn encode_idx(glyphs: &[Glyph]) -> (Vec<u8>, Vec<u8>) {
    let mut images = Vec::with_capacity(16 + glyphs.len() * GLYPH_LEN);
    images.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    images.extend_from_slice(&(glyphs.len() as u32).to_be_bytes());
    images.extend_from_slice(&(GLYPH_SIDE as u32).to_be_bytes());
    images.extend_from_slice(&(GLYPH_SIDE as u32).to_be_bytes());
    let mut labels = Vec::with_capacity(8 + glyphs.len());
    labels.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(glyphs.len() as u32).to_be_bytes());
    for g in glyphs {
        images.extend_from_slice(&g.pixels[..]);
        labels.push(g.label);
    }
    (images, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(n: usize) -> Vec<Glyph> {
        (0..n)
            .map(|i| Glyph {
                pixels: Box::new([(i * 17 % 256) as u8; GLYPH_LEN]),
                label: (i % 10) as u8,
            })
            .collect()
    }

    #[test]
    fn roundtrip_and_sizes() {
        let glyphs = fixture(12);
        let (img, lab) = encode_idx(&glyphs);
        assert_eq!(img.len(), 16 + 12 * 784);
        assert_eq!(lab.len(), 8 + 12);
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("train-images-idx3-ubyte"), &img).unwrap();
        std::fs::write(dir.path().join("train-labels-idx1-ubyte"), &lab).unwrap();
        let loaded = load_mnist_dir(dir.path()).unwrap();
        assert_eq!(loaded, glyphs);
        assert!(loaded.iter().all(|g| g.label <= 9));
    }

    #[test]
    fn official_file_sizes_follow_from_the_header() {
        // 60000 training glyphs: 47,040,016 image bytes and 60,008 label bytes.
        assert_eq!(16 + 60_000 * GLYPH_LEN, 47_040_016);
        assert_eq!(8 + 60_000, 60_008);
    }

    #[test]
    fn truncated_and_corrupt_files_are_rejected() {
        let (img, lab) = encode_idx(&fixture(3));
        assert!(matches!(parse_images(&img[..img.len() - 1]), Err(PanError::Format { .. })));
        assert!(matches!(parse_images(&img[..10]), Err(PanError::Format { offset: 8, .. })));
        let mut bad = img.clone();
        bad[3] = 0x01;
        assert!(matches!(parse_images(&bad), Err(PanError::Format { offset: 0, .. })));
        let mut bad_label = lab.clone();
        bad_label[9] = 12;
        assert!(matches!(parse_labels(&bad_label), Err(PanError::Format { offset: 9, .. })));
        assert!(parse_labels(&img).is_err());
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let (img, _) = encode_idx(&fixture(3));
        let (_, lab) = encode_idx(&fixture(4));
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        std::fs::write(&ip, img).unwrap();
        std::fs::write(&lp, lab).unwrap();
        assert!(matches!(load_mnist_idx(&ip, &lp), Err(PanError::Format { .. })));
    }
}
