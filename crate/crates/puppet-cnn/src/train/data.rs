//! Dataset container and the binary image/label file formats.
//!
//! images.bin: magic "PNIM", u8 version 1, u32 count, u32 height,
//! u32 width, u32 channels, then count*h*w*c raw pixels row-major and
//! channel-interleaved. labels.bin: magic "PNLB", u8 version 1, u32 count,
//! then count u8 labels. All integers little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use crate::complexity::ImageU8;
use crate::error::{Error, Result};

/// In-memory dataset: images with one small-integer label each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub images: Vec<ImageU8>,
    pub labels: Vec<u8>,
    pub tag: String,
}

impl Dataset {
    pub fn new(images: Vec<ImageU8>, labels: Vec<u8>, tag: impl Into<String>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::contract(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        Ok(Dataset {
            images,
            labels,
            tag: tag.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Highest label plus one, or 0 for an empty set.
    pub fn label_span(&self) -> usize {
        self.labels.iter().map(|l| *l as usize + 1).max().unwrap_or(0)
    }
}

/// Byte cursor that reports failures with the exact offset.
struct Reader {
    path: PathBuf,
    bytes: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn open(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Reader {
            path: path.to_path_buf(),
            bytes,
            pos: 0,
        })
    }

    fn fail(&self, message: impl Into<String>) -> Error {
        Error::format(&self.path, self.pos, message)
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.fail(format!(
                "need {n} more bytes but only {} remain",
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn read_u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn read_u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        let got = self.take(magic.len())?.to_vec();
        if got != magic {
            self.pos -= magic.len();
            return Err(self.fail(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&got),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    fn expect_version(&mut self, version: u8) -> Result<()> {
        let got = self.read_u8()?;
        if got != version {
            self.pos -= 1;
            return Err(self.fail(format!("unsupported version {got}, expected {version}")));
        }
        Ok(())
    }

    fn expect_end(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.fail(format!(
                "{} trailing bytes after the declared payload",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Read images.bin and labels.bin from `dir` and pair them up.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let images = load_images(&dir.join("images.bin"))?;
    let labels = load_labels(&dir.join("labels.bin"))?;
    if images.len() != labels.len() {
        return Err(Error::format(
            dir.join("labels.bin"),
            0,
            format!("{} labels for {} images", labels.len(), images.len()),
        ));
    }
    let tag = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    Dataset::new(images, labels, tag)
}

pub fn load_images(path: &Path) -> Result<Vec<ImageU8>> {
    let mut r = Reader::open(path)?;
    r.expect_magic(b"PNIM")?;
    r.expect_version(1)?;
    let count = r.read_u32()? as usize;
    let h = r.read_u32()? as usize;
    let w = r.read_u32()? as usize;
    let c = r.read_u32()? as usize;
    if count > 0 && (h == 0 || w == 0 || (c != 1 && c != 3)) {
        return Err(r.fail(format!("invalid image geometry {h}x{w}x{c}")));
    }
    let mut images = Vec::with_capacity(count);
    for _ in 0..count {
        let pixels = r.take(h * w * c)?.to_vec();
        images.push(ImageU8::new(h, w, c, pixels)?);
    }
    r.expect_end()?;
    Ok(images)
}

pub fn load_labels(path: &Path) -> Result<Vec<u8>> {
    let mut r = Reader::open(path)?;
    r.expect_magic(b"PNLB")?;
    r.expect_version(1)?;
    let count = r.read_u32()? as usize;
    let labels = r.take(count)?.to_vec();
    r.expect_end()?;
    Ok(labels)
}

/// Write both files; every image must share one geometry.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w, c) = match ds.images.first() {
        Some(img) => (img.height(), img.width(), img.channels()),
        None => (0, 0, 0),
    };
    for img in &ds.images {
        if (img.height(), img.width(), img.channels()) != (h, w, c) {
            return Err(Error::contract(
                "all images in one dataset file must share a geometry",
            ));
        }
    }
    let mut img_bytes = Vec::new();
    img_bytes.extend_from_slice(b"PNIM");
    img_bytes.push(1);
    img_bytes.extend_from_slice(&(ds.len() as u32).to_le_bytes());
    img_bytes.extend_from_slice(&(h as u32).to_le_bytes());
    img_bytes.extend_from_slice(&(w as u32).to_le_bytes());
    img_bytes.extend_from_slice(&(c as u32).to_le_bytes());
    for img in &ds.images {
        img_bytes.extend_from_slice(img.data());
    }
    let img_path = dir.join("images.bin");
    fs::write(&img_path, img_bytes).map_err(|e| Error::io(&img_path, e))?;

    let mut lbl_bytes = Vec::new();
    lbl_bytes.extend_from_slice(b"PNLB");
    lbl_bytes.push(1);
    lbl_bytes.extend_from_slice(&(ds.len() as u32).to_le_bytes());
    lbl_bytes.extend_from_slice(&ds.labels);
    let lbl_path = dir.join("labels.bin");
    fs::write(&lbl_path, lbl_bytes).map_err(|e| Error::io(&lbl_path, e))?;
    Ok(())
}
