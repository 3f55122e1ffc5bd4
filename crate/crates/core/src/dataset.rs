//! Fashion-MNIST ingestion (IDX, optionally gzipped) and class-wise decoy injection.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::perturb::GridSpec;

pub const IMAGE_SIDE: usize = 28;
pub const NUM_CLASSES: usize = 10;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "T-shirt/top",
    "Trouser",
    "Pullover",
    "Dress",
    "Coat",
    "Sandal",
    "Shirt",
    "Sneaker",
    "Bag",
    "Ankle boot",
];

pub const SHIRT: usize = 6;
pub const SNEAKER: usize = 7;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: byte offset {offset}: {reason}")]
    Parse {
        path: PathBuf,
        offset: usize,
        reason: String,
    },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("class {class} has only {available} examples, {requested} requested")]
    Insufficient {
        class: usize,
        available: usize,
        requested: usize,
    },
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid decoy spec: {0}")]
    InvalidDecoy(String),
}

/// Square grayscale image with intensities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    side: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(side: usize, pixels: Vec<f64>) -> Result<Self, DatasetError> {
        if side == 0 || pixels.len() != side * side {
            return Err(DatasetError::InvalidImage(format!(
                "{} pixels for side {side}",
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DatasetError::InvalidImage(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { side, pixels })
    }

    pub fn zeros(side: usize) -> Self {
        Self {
            side,
            pixels: vec![0.0; side * side],
        }
    }

    pub fn from_bytes(side: usize, bytes: &[u8]) -> Result<Self, DatasetError> {
        Self::new(side, bytes.iter().map(|&b| f64::from(b) / 255.0).collect())
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.side + col]
    }

    /// Pixels quantized back to 8 bits.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| (v * 255.0).round() as u8).collect()
    }

    pub(crate) fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }
}

/// Binary ground-truth mask of the spurious region of one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationMask {
    side: usize,
    bits: Vec<u8>,
}

impl AnnotationMask {
    pub fn empty(side: usize) -> Self {
        Self {
            side,
            bits: vec![0; side * side],
        }
    }

    pub fn from_bits(side: usize, bits: Vec<u8>) -> Result<Self, DatasetError> {
        if bits.len() != side * side || bits.iter().any(|&b| b > 1) {
            return Err(DatasetError::InvalidImage(
                "mask must hold side*side entries of 0 or 1".into(),
            ));
        }
        Ok(Self { side, bits })
    }

    /// Mask covering the `patch x patch` square whose top-left corner is `(row0, col0)`.
    pub fn square(side: usize, row0: usize, col0: usize, patch: usize) -> Self {
        let mut mask = Self::empty(side);
        for r in row0..row0 + patch {
            for c in col0..col0 + patch {
                mask.bits[r * side + c] = 1;
            }
        }
        mask
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn is_set(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.side + col] == 1
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub image: GrayImage,
    pub label: usize,
}

/// Placement of the class-wise decoy patches.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoySpec {
    pub patch_size: usize,
    pub intensity: f64,
    /// Grid cell (1-based, row-major) for every class.
    pub cell_of_class: [usize; NUM_CLASSES],
}

impl Default for DecoySpec {
    fn default() -> Self {
        Self {
            patch_size: 4,
            intensity: 1.0,
            cell_of_class: [1, 7, 49, 4, 46, 25, 22, 43, 28, 13],
        }
    }
}

impl DecoySpec {
    pub fn grid(&self) -> Result<GridSpec, DatasetError> {
        GridSpec::new(IMAGE_SIDE, self.patch_size).map_err(|e| DatasetError::InvalidDecoy(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let grid = self.grid()?;
        if !(0.0..=1.0).contains(&self.intensity) {
            return Err(DatasetError::InvalidDecoy(format!(
                "intensity {} outside [0, 1]",
                self.intensity
            )));
        }
        for (class, &cell) in self.cell_of_class.iter().enumerate() {
            if cell == 0 || cell > grid.cells() {
                return Err(DatasetError::InvalidDecoy(format!(
                    "class {class} mapped to cell {cell}, valid cells are 1..={}",
                    grid.cells()
                )));
            }
        }
        Ok(())
    }

    pub fn mask_for(&self, class: usize) -> AnnotationMask {
        let grid = self.grid().expect("validated decoy spec");
        let (r0, c0) = grid
            .cell_bounds(self.cell_of_class[class])
            .expect("validated decoy spec");
        AnnotationMask::square(IMAGE_SIDE, r0, c0, self.patch_size)
    }
}

/// Ordered examples plus, for decoyed splits, their parallel annotation masks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplit {
    pub examples: Vec<LabeledExample>,
    pub masks: Option<Vec<AnnotationMask>>,
}

impl DatasetSplit {
    pub fn new(examples: Vec<LabeledExample>) -> Self {
        Self { examples, masks: None }
    }

    pub fn with_masks(examples: Vec<LabeledExample>, masks: Vec<AnnotationMask>) -> Result<Self, DatasetError> {
        if masks.len() != examples.len() {
            return Err(DatasetError::CountMismatch {
                images: examples.len(),
                labels: masks.len(),
            });
        }
        Ok(Self {
            examples,
            masks: Some(masks),
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn mask(&self, i: usize) -> Option<&AnnotationMask> {
        self.masks.as_ref().map(|m| &m[i])
    }

    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        self.examples
            .iter()
            .enumerate()
            .filter(|(_, e)| e.label == class)
            .map(|(i, _)| i)
            .collect()
    }

    /// Sub-split at the given indices, masks carried along.
    pub fn select(&self, indices: &[usize]) -> DatasetSplit {
        DatasetSplit {
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            masks: self
                .masks
                .as_ref()
                .map(|m| indices.iter().map(|&i| m[i].clone()).collect()),
        }
    }

    pub fn head(&self, n: usize) -> DatasetSplit {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let raw = fs::read(path).map_err(io_err)?;
    if raw.starts_with(&[0x1F, 0x8B]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(io_err)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct IdxReader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
}

impl IdxReader<'_> {
    fn err(&self, offset: usize, reason: impl Into<String>) -> DatasetError {
        DatasetError::Parse {
            path: self.path.to_path_buf(),
            offset,
            reason: reason.into(),
        }
    }

    fn u32_at(&self, offset: usize) -> Result<u32, DatasetError> {
        self.bytes
            .get(offset..offset + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| self.err(offset, format!("truncated header, file has {} bytes", self.bytes.len())))
    }

    /// Validates magic and returns (dims, payload).
    fn parse(&self, magic: u32, ndims: usize) -> Result<(Vec<usize>, &[u8]), DatasetError> {
        let found = self.u32_at(0)?;
        if found != magic {
            return Err(self.err(0, format!("bad magic 0x{found:08X}, expected 0x{magic:08X}")));
        }
        let dims = (0..ndims)
            .map(|i| self.u32_at(4 + 4 * i).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let start = 4 + 4 * ndims;
        let need: usize = dims.iter().product();
        let have = self.bytes.len() - start;
        if have < need {
            return Err(self.err(
                self.bytes.len(),
                format!("truncated payload: dims {dims:?} need {need} bytes after offset {start}, found {have}"),
            ));
        }
        if have > need {
            return Err(self.err(start + need, format!("{} trailing bytes after payload", have - need)));
        }
        Ok((dims, &self.bytes[start..]))
    }
}

/// Raw 8-bit image payload of an IDX3 file: (count, rows, cols, bytes).
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>), DatasetError> {
    let bytes = read_maybe_gz(path)?;
    let reader = IdxReader { path, bytes: &bytes };
    let (dims, payload) = reader.parse(IMAGES_MAGIC, 3)?;
    Ok((dims[0], dims[1], dims[2], payload.to_vec()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>, DatasetError> {
    let bytes = read_maybe_gz(path)?;
    let reader = IdxReader { path, bytes: &bytes };
    let (_, payload) = reader.parse(LABELS_MAGIC, 1)?;
    if let Some(pos) = payload.iter().position(|&l| l as usize >= NUM_CLASSES) {
        return Err(reader.err(8 + pos, format!("label {} out of range", payload[pos])));
    }
    Ok(payload.to_vec())
}

/// Loads a split from an IDX image file and an IDX label file.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<DatasetSplit, DatasetError> {
    let (count, rows, cols, pixels) = read_idx_images(images_path)?;
    if rows != IMAGE_SIDE || cols != IMAGE_SIDE {
        return Err(DatasetError::Parse {
            path: images_path.to_path_buf(),
            offset: 8,
            reason: format!("image dims {rows}x{cols}, expected {IMAGE_SIDE}x{IMAGE_SIDE}"),
        });
    }
    let labels = read_idx_labels(labels_path)?;
    if labels.len() != count {
        return Err(DatasetError::CountMismatch {
            images: count,
            labels: labels.len(),
        });
    }
    let px = IMAGE_SIDE * IMAGE_SIDE;
    let examples = pixels
        .chunks_exact(px)
        .zip(&labels)
        .map(|(chunk, &label)| {
            Ok(LabeledExample {
                image: GrayImage::from_bytes(IMAGE_SIDE, chunk)?,
                label: label as usize,
            })
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;
    Ok(DatasetSplit::new(examples))
}

/// Loads annotation masks stored as an IDX3 file of 0/1 bytes.
pub fn load_idx_masks(path: &Path) -> Result<Vec<AnnotationMask>, DatasetError> {
    let (_, rows, cols, bytes) = read_idx_images(path)?;
    if rows != cols {
        return Err(DatasetError::Parse {
            path: path.to_path_buf(),
            offset: 8,
            reason: format!("mask dims {rows}x{cols} are not square"),
        });
    }
    bytes
        .chunks_exact(rows * cols)
        .map(|chunk| AnnotationMask::from_bits(rows, chunk.to_vec()))
        .collect()
}

pub fn encode_idx(magic: u32, dims: &[usize], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + payload.len());
    out.extend_from_slice(&magic.to_be_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(bytes).map_err(io_err)
}

/// Writes the split back out as uncompressed IDX image and label files.
pub fn write_idx(split: &DatasetSplit, images_path: &Path, labels_path: &Path) -> Result<(), DatasetError> {
    let side = split.examples.first().map_or(IMAGE_SIDE, |e| e.image.side());
    let pixels: Vec<u8> = split.examples.iter().flat_map(|e| e.image.to_bytes()).collect();
    let labels: Vec<u8> = split.examples.iter().map(|e| e.label as u8).collect();
    write_file(
        images_path,
        &encode_idx(IMAGES_MAGIC, &[split.len(), side, side], &pixels),
    )?;
    write_file(labels_path, &encode_idx(LABELS_MAGIC, &[split.len()], &labels))
}

pub fn write_idx_masks(masks: &[AnnotationMask], path: &Path) -> Result<(), DatasetError> {
    let side = masks.first().map_or(IMAGE_SIDE, |m| m.side());
    let bits: Vec<u8> = masks.iter().flat_map(|m| m.bits().iter().copied()).collect();
    write_file(path, &encode_idx(IMAGES_MAGIC, &[masks.len(), side, side], &bits))
}

/// Path of `<dir>/<prefix>-<kind>`, preferring an existing `.gz` variant
/// when the plain file is absent.
pub fn split_file(dir: &Path, prefix: &str, kind: &str) -> PathBuf {
    let plain = dir.join(format!("{prefix}-{kind}"));
    let gz = dir.join(format!("{prefix}-{kind}.gz"));
    if !plain.exists() && gz.exists() {
        gz
    } else {
        plain
    }
}

/// Loads `<prefix>-images-idx3-ubyte` and `<prefix>-labels-idx1-ubyte` from
/// `dir`, plus `<prefix>-masks-idx3-ubyte` when it exists. `prefix` is
/// `train` or `t10k` in the standard layout.
pub fn load_split_dir(dir: &Path, prefix: &str) -> Result<DatasetSplit, DatasetError> {
    let split = load_idx(
        &split_file(dir, prefix, "images-idx3-ubyte"),
        &split_file(dir, prefix, "labels-idx1-ubyte"),
    )?;
    let masks_path = split_file(dir, prefix, "masks-idx3-ubyte");
    if !masks_path.exists() {
        return Ok(split);
    }
    DatasetSplit::with_masks(split.examples, load_idx_masks(&masks_path)?)
}

/// Writes a split (and its masks, if any) in the layout read by [`load_split_dir`].
pub fn write_split_dir(split: &DatasetSplit, dir: &Path, prefix: &str) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(|source| DatasetError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    write_idx(
        split,
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )?;
    if let Some(masks) = &split.masks {
        write_idx_masks(masks, &dir.join(format!("{prefix}-masks-idx3-ubyte")))?;
    }
    Ok(())
}

/// Stamps each example's class patch with the decoy intensity and attaches
/// the matching annotation masks. Existing masks are replaced.
pub fn inject_decoys(split: &DatasetSplit, spec: &DecoySpec) -> Result<DatasetSplit, DatasetError> {
    spec.validate()?;
    let class_masks: Vec<AnnotationMask> = (0..NUM_CLASSES).map(|c| spec.mask_for(c)).collect();
    let mut examples = split.examples.clone();
    let mut masks = Vec::with_capacity(examples.len());
    for ex in &mut examples {
        if ex.image.side() != IMAGE_SIDE || ex.label >= NUM_CLASSES {
            return Err(DatasetError::InvalidImage(format!(
                "decoys need {IMAGE_SIDE}x{IMAGE_SIDE} images with labels < {NUM_CLASSES}"
            )));
        }
        let mask = &class_masks[ex.label];
        for (p, &bit) in ex.image.pixels_mut().iter_mut().zip(mask.bits()) {
            if bit == 1 {
                *p = spec.intensity;
            }
        }
        masks.push(mask.clone());
    }
    DatasetSplit::with_masks(examples, masks)
}

/// Seeded uniform sample without replacement of `n` examples of `class`,
/// returned in dataset order.
pub fn class_subset_indices(
    split: &DatasetSplit,
    class: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<usize>, DatasetError> {
    let pool = split.class_indices(class);
    if pool.len() < n {
        return Err(DatasetError::Insufficient {
            class,
            available: pool.len(),
            requested: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = index::sample(&mut rng, pool.len(), n)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

pub fn class_subset(split: &DatasetSplit, class: usize, n: usize, seed: u64) -> Result<DatasetSplit, DatasetError> {
    Ok(split.select(&class_subset_indices(split, class, n, seed)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn image_with(seed: u8) -> GrayImage {
        let bytes: Vec<u8> = (0..IMAGE_SIDE * IMAGE_SIDE)
            .map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed) % 200)
            .collect();
        GrayImage::from_bytes(IMAGE_SIDE, &bytes).unwrap()
    }

    fn toy_split(labels: &[usize]) -> DatasetSplit {
        DatasetSplit::new(
            labels
                .iter()
                .enumerate()
                .map(|(i, &label)| LabeledExample {
                    image: image_with(i as u8),
                    label,
                })
                .collect(),
        )
    }

    #[test]
    fn default_spec_is_valid_and_sneaker_is_43() {
        let spec = DecoySpec::default();
        spec.validate().unwrap();
        assert_eq!(spec.cell_of_class[SNEAKER], 43);
        let mut cells = spec.cell_of_class.to_vec();
        cells.sort_unstable();
        cells.dedup();
        assert_eq!(cells.len(), NUM_CLASSES);
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut spec = DecoySpec::default();
        spec.cell_of_class[3] = 50;
        assert!(spec.validate().is_err());
        let spec = DecoySpec {
            intensity: 1.5,
            ..DecoySpec::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn decoys_touch_exactly_the_class_patch() {
        let split = toy_split(&[0, 7, 7, 3]);
        let spec = DecoySpec::default();
        let out = inject_decoys(&split, &spec).unwrap();
        assert!(split.masks.is_none(), "input untouched");
        let masks = out.masks.as_ref().unwrap();
        for (i, (before, after)) in split.examples.iter().zip(&out.examples).enumerate() {
            let diff = before
                .image
                .pixels()
                .iter()
                .zip(after.image.pixels())
                .filter(|(a, b)| a != b)
                .count();
            assert!(diff <= 16);
            assert_eq!(masks[i].count(), 16);
            for (p, (&a, &b)) in before.image.pixels().iter().zip(after.image.pixels()).enumerate() {
                if masks[i].bits()[p] == 1 {
                    assert_eq!(b, spec.intensity);
                } else {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
        assert_eq!(masks[1], masks[2]);
        for r in 0..IMAGE_SIDE {
            for c in 0..IMAGE_SIDE {
                assert_eq!(masks[1].is_set(r, c), (24..28).contains(&r) && c < 4, "({r},{c})");
            }
        }
    }

    #[test]
    fn injection_is_idempotent() {
        let split = toy_split(&[0, 1, 2, 3, 4, 5, 6, 7, 8, 9]);
        let spec = DecoySpec::default();
        let once = inject_decoys(&split, &spec).unwrap();
        let twice = inject_decoys(&once, &spec).unwrap();
        assert_eq!(once.examples, twice.examples);
        assert_eq!(once.masks, twice.masks);
    }

    #[test]
    fn subset_is_seeded_and_complete() {
        let labels: Vec<usize> = (0..200).map(|i| i % 10).collect();
        let split = toy_split(&labels);
        let a = class_subset_indices(&split, SHIRT, 12, 5).unwrap();
        let b = class_subset_indices(&split, SHIRT, 12, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 12);
        assert!(a.iter().all(|&i| split.examples[i].label == SHIRT));
        let full = class_subset_indices(&split, SHIRT, 20, 99).unwrap();
        assert_eq!(full, split.class_indices(SHIRT));
        match class_subset(&split, SHIRT, 21, 0) {
            Err(DatasetError::Insufficient { available, .. }) => assert_eq!(available, 20),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn subset_carries_masks() {
        let split = inject_decoys(&toy_split(&[6, 6, 1, 6]), &DecoySpec::default()).unwrap();
        let sub = class_subset(&split, 6, 2, 1).unwrap();
        assert_eq!(sub.masks.as_ref().unwrap().len(), 2);
    }

    fn write_tmp(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn labels_with_image_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img = write_tmp(dir.path(), "i", &encode_idx(IMAGES_MAGIC, &[1, 28, 28], &[0; 784]));
        let lbl = write_tmp(dir.path(), "l", &encode_idx(IMAGES_MAGIC, &[1], &[0]));
        let err = load_idx(&img, &lbl).unwrap_err().to_string();
        assert!(err.contains("0x00000801"), "{err}");
        assert!(err.contains("byte offset 0"), "{err}");
    }

    #[test]
    fn truncation_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = encode_idx(IMAGES_MAGIC, &[2, 28, 28], &[0; 2 * 784]);
        bytes.truncate(bytes.len() - 10);
        let img = write_tmp(dir.path(), "i", &bytes);
        let lbl = write_tmp(dir.path(), "l", &encode_idx(LABELS_MAGIC, &[2], &[0, 1]));
        match load_idx(&img, &lbl).unwrap_err() {
            DatasetError::Parse { offset, .. } => assert_eq!(offset, 16 + 2 * 784 - 10),
            other => panic!("unexpected {other}"),
        }
        let img = write_tmp(dir.path(), "i2", &encode_idx(IMAGES_MAGIC, &[2, 28, 28], &[0; 2 * 784]));
        let lbl = write_tmp(dir.path(), "l2", &encode_idx(LABELS_MAGIC, &[3], &[0, 1, 2]));
        assert!(matches!(
            load_idx(&img, &lbl),
            Err(DatasetError::CountMismatch { images: 2, labels: 3 })
        ));
        let short = write_tmp(dir.path(), "s", &[0, 0, 8]);
        assert!(matches!(
            load_idx(&short, &lbl),
            Err(DatasetError::Parse { offset: 0, .. })
        ));
    }

    #[test]
    fn gzip_container_detected() {
        use flate2::write::GzEncoder;
        let dir = tempfile::tempdir().unwrap();
        let payload: Vec<u8> = (0..784u32).map(|i| (i % 256) as u8).collect();
        let gz = |bytes: &[u8]| {
            let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
            enc.write_all(bytes).unwrap();
            enc.finish().unwrap()
        };
        let img = write_tmp(
            dir.path(),
            "i.gz",
            &gz(&encode_idx(IMAGES_MAGIC, &[1, 28, 28], &payload)),
        );
        let lbl = write_tmp(dir.path(), "l.gz", &gz(&encode_idx(LABELS_MAGIC, &[1], &[9])));
        let split = load_idx(&img, &lbl).unwrap();
        assert_eq!(split.len(), 1);
        assert_eq!(split.examples[0].label, 9);
        assert_eq!(split.examples[0].image.get(0, 1), 1.0 / 255.0);
        assert_eq!(split.examples[0].image.to_bytes(), payload);
    }

    #[test]
    fn masks_roundtrip_through_idx() {
        let dir = tempfile::tempdir().unwrap();
        let split = inject_decoys(&toy_split(&[7, 2]), &DecoySpec::default()).unwrap();
        let path = dir.path().join("m");
        write_idx_masks(split.masks.as_ref().unwrap(), &path).unwrap();
        assert_eq!(&load_idx_masks(&path).unwrap(), split.masks.as_ref().unwrap());
    }

    proptest! {
        #[test]
        fn idx_roundtrip_is_byte_exact(
            pixels in prop::collection::vec(any::<u8>(), 784 * 3),
            labels in prop::collection::vec(0u8..10, 3),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let img_bytes = encode_idx(IMAGES_MAGIC, &[3, 28, 28], &pixels);
            let lbl_bytes = encode_idx(LABELS_MAGIC, &[3], &labels);
            let img = write_tmp(dir.path(), "i", &img_bytes);
            let lbl = write_tmp(dir.path(), "l", &lbl_bytes);
            let split = load_idx(&img, &lbl).unwrap();
            let (img2, lbl2) = (dir.path().join("i2"), dir.path().join("l2"));
            write_idx(&split, &img2, &lbl2).unwrap();
            prop_assert_eq!(fs::read(&img2).unwrap(), img_bytes);
            prop_assert_eq!(fs::read(&lbl2).unwrap(), lbl_bytes);
        }
    }
}
