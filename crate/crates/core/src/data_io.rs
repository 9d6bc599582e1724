//! MNIST-format datasets and the on-disk artifact formats.
//!
//! IDX files are big-endian: a magic number (`0x00000803` for images,
//! `0x00000801` for labels), one `u32` per dimension, then the row-major
//! `u8` payload. Pixels are scaled to `[0, 1]` by dividing by 255.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{SparseBlock, SparseGradient};
use crate::seed::{self, Rng};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Grayscale images, stored contiguously, intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl ImageSet {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        let size = height * width;
        if size == 0 {
            return Err(Error::validation(
                "images must have positive height and width",
            ));
        }
        if !pixels.len().is_multiple_of(size) {
            return Err(Error::validation(format!(
                "{} pixels do not form whole {height}x{width} images",
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::validation(format!("intensity {p} outside [0, 1]")));
        }
        Ok(ImageSet {
            height,
            width,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width
    }

    pub fn count(&self) -> usize {
        self.pixels.len() / self.image_len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f32]> {
        self.pixels.chunks_exact(self.image_len())
    }

    /// Copies the images at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> ImageSet {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        ImageSet {
            height: self.height,
            width: self.width,
            pixels,
        }
    }
}

/// Class indices, one byte each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    labels: Vec<u8>,
}

impl LabelSet {
    pub fn new(labels: Vec<u8>) -> Self {
        LabelSet { labels }
    }

    pub fn count(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    /// Checks every label is a valid class index for `n_classes` classes.
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        match self.labels.iter().position(|&l| l as usize >= n_classes) {
            Some(i) => Err(Error::validation(format!(
                "label {} at position {i} is not below {n_classes}",
                self.labels[i]
            ))),
            None => Ok(()),
        }
    }

    pub fn select(&self, indices: &[usize]) -> LabelSet {
        LabelSet {
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Images paired with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: ImageSet,
    pub labels: LabelSet,
}

impl Dataset {
    pub fn new(images: ImageSet, labels: LabelSet) -> Result<Self> {
        if images.count() != labels.count() {
            return Err(Error::validation(format!(
                "{} images but {} labels",
                images.count(),
                labels.count()
            )));
        }
        Ok(Dataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.count()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select(indices),
            labels: self.labels.select(indices),
        }
    }

    /// The first `n` items (or all of them if there are fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// Loads an image file and a label file and pairs them.
    pub fn load(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Self> {
        Dataset::new(load_idx_images(images)?, load_idx_labels(labels)?)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(bytes)
}

fn header_u32(cur: &mut Cursor<&[u8]>, total: usize) -> Result<u32> {
    cur.read_u32::<BigEndian>().map_err(|_| Error::Length {
        expected: cur.position() as usize + 4,
        found: total,
    })
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<ImageSet> {
    parse_idx_images(&read_file(path.as_ref())?)
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<ImageSet> {
    let mut cur = Cursor::new(bytes);
    let magic = header_u32(&mut cur, bytes.len())?;
    if magic != IMAGE_MAGIC {
        return Err(Error::format(format!(
            "expected IDX image magic {IMAGE_MAGIC:#010x}, found {magic:#010x}"
        )));
    }
    let count = header_u32(&mut cur, bytes.len())? as usize;
    let height = header_u32(&mut cur, bytes.len())? as usize;
    let width = header_u32(&mut cur, bytes.len())? as usize;
    let payload = &bytes[16..];
    let expected = count * height * width;
    if payload.len() < expected {
        return Err(Error::Length {
            expected: 16 + expected,
            found: bytes.len(),
        });
    }
    if height * width == 0 {
        return Err(Error::format("IDX image dimensions must be positive"));
    }
    let pixels = payload[..expected]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    Ok(ImageSet {
        height,
        width,
        pixels,
    })
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<LabelSet> {
    parse_idx_labels(&read_file(path.as_ref())?)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<LabelSet> {
    let mut cur = Cursor::new(bytes);
    let magic = header_u32(&mut cur, bytes.len())?;
    if magic != LABEL_MAGIC {
        return Err(Error::format(format!(
            "expected IDX label magic {LABEL_MAGIC:#010x}, found {magic:#010x}"
        )));
    }
    let count = header_u32(&mut cur, bytes.len())? as usize;
    if bytes.len() < 8 + count {
        return Err(Error::Length {
            expected: 8 + count,
            found: bytes.len(),
        });
    }
    Ok(LabelSet::new(bytes[8..8 + count].to_vec()))
}

/// Serializes images back to IDX. Intensities are mapped to the nearest byte.
pub fn encode_idx_images(images: &ImageSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    out.write_u32::<BigEndian>(IMAGE_MAGIC).unwrap();
    out.write_u32::<BigEndian>(images.count() as u32).unwrap();
    out.write_u32::<BigEndian>(images.height as u32).unwrap();
    out.write_u32::<BigEndian>(images.width as u32).unwrap();
    out.extend(images.pixels.iter().map(|&p| (p * 255.0).round() as u8));
    out
}

pub fn encode_idx_labels(labels: &LabelSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.count());
    out.write_u32::<BigEndian>(LABEL_MAGIC).unwrap();
    out.write_u32::<BigEndian>(labels.count() as u32).unwrap();
    out.extend_from_slice(&labels.labels);
    out
}

pub fn save_idx_images(images: &ImageSet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_idx_images(images))?;
    Ok(())
}

pub fn save_idx_labels(labels: &LabelSet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_idx_labels(labels))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    #[default]
    Contiguous,
    Shuffled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub fraction: f64,
    pub seed: u64,
    pub mode: SplitMode,
}

impl SplitSpec {
    /// First half / second half, in file order.
    pub fn halves() -> Self {
        SplitSpec {
            fraction: 0.5,
            seed: 0,
            mode: SplitMode::Contiguous,
        }
    }
}

/// Splits into `(A, B)` with `|A| = floor(fraction * T)`.
///
/// Contiguous mode keeps file order and ignores the seed; shuffled mode
/// draws a seeded permutation first.
pub fn split_dataset(
    images: &ImageSet,
    labels: &LabelSet,
    spec: &SplitSpec,
) -> Result<(Dataset, Dataset)> {
    if images.count() != labels.count() {
        return Err(Error::validation(format!(
            "cannot split {} images with {} labels",
            images.count(),
            labels.count()
        )));
    }
    if !(spec.fraction > 0.0 && spec.fraction < 1.0) {
        return Err(Error::validation(format!(
            "split fraction {} outside (0, 1)",
            spec.fraction
        )));
    }
    let total = images.count();
    let first = (spec.fraction * total as f64).floor() as usize;
    let mut order: Vec<usize> = (0..total).collect();
    if spec.mode == SplitMode::Shuffled {
        order.shuffle(&mut seed::stream_rng(spec.seed, seed::stream::SPLIT));
    }
    let (a, b) = order.split_at(first);
    let take = |idx: &[usize]| Dataset {
        images: images.select(idx),
        labels: labels.select(idx),
    };
    Ok((take(a), take(b)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Augmentation {
    /// Identity.
    #[default]
    None,
    /// Random integer translation in `[-2, 2]` pixels per axis, zero padded.
    Shift2,
}

impl Augmentation {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(Augmentation::None),
            "shift2" => Ok(Augmentation::Shift2),
            other => Err(Error::validation(format!("unknown augmentation `{other}`"))),
        }
    }
}

/// Translates an image by `dx` columns (positive = right) and `dy` rows
/// (positive = down), filling uncovered pixels with zero.
pub fn shift_image(image: &[f32], height: usize, width: usize, dx: i32, dy: i32) -> Vec<f32> {
    let mut out = vec![0.0; image.len()];
    for r in 0..height as i32 {
        let src_r = r - dy;
        if src_r < 0 || src_r >= height as i32 {
            continue;
        }
        for c in 0..width as i32 {
            let src_c = c - dx;
            if src_c < 0 || src_c >= width as i32 {
                continue;
            }
            out[(r as usize) * width + c as usize] =
                image[(src_r as usize) * width + src_c as usize];
        }
    }
    out
}

/// Augments one image. `Shift2` draws `(dx, dy)` from `rng`; `None` draws nothing.
pub fn augment_image(
    image: &[f32],
    height: usize,
    width: usize,
    spec: Augmentation,
    rng: &mut Rng,
) -> Vec<f32> {
    match spec {
        Augmentation::None => image.to_vec(),
        Augmentation::Shift2 => {
            let dx = rng.random_range(-2..=2);
            let dy = rng.random_range(-2..=2);
            shift_image(image, height, width, dx, dy)
        }
    }
}

pub fn augment(
    batch: &[&[f32]],
    height: usize,
    width: usize,
    spec: Augmentation,
    rng: &mut Rng,
) -> Vec<Vec<f32>> {
    batch
        .iter()
        .map(|img| augment_image(img, height, width, spec, rng))
        .collect()
}

/// One record of a sparse feature file.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub label: u8,
    pub candidate_label: u8,
    pub features: SparseGradient,
}

/// Writes records as: label byte, candidate-label byte, then per block a
/// little-endian `u32` count followed by `(u32 index, f32 value)` pairs.
/// The file has no header; readers must know the block layout.
pub fn write_feature_records<W: Write>(mut out: W, records: &[FeatureRecord]) -> Result<()> {
    for rec in records {
        out.write_u8(rec.label)?;
        out.write_u8(rec.candidate_label)?;
        for block in &rec.features.blocks {
            out.write_u32::<LittleEndian>(block.indices.len() as u32)?;
            for (&i, &v) in block.indices.iter().zip(&block.values) {
                out.write_u32::<LittleEndian>(i)?;
                out.write_f32::<LittleEndian>(v as f32)?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads records written by [`write_feature_records`] for a base model whose
/// gradient blocks have the lengths in `layout`.
pub fn read_feature_records(bytes: &[u8], layout: &[usize]) -> Result<Vec<FeatureRecord>> {
    let mut cur = Cursor::new(bytes);
    let truncated = |cur: &Cursor<&[u8]>| Error::Length {
        expected: cur.position() as usize + 1,
        found: bytes.len(),
    };
    let mut records = Vec::new();
    while (cur.position() as usize) < bytes.len() {
        let label = cur.read_u8().map_err(|_| truncated(&cur))?;
        let candidate_label = cur.read_u8().map_err(|_| truncated(&cur))?;
        let mut blocks = Vec::with_capacity(layout.len());
        for &len in layout {
            let count = cur
                .read_u32::<LittleEndian>()
                .map_err(|_| truncated(&cur))? as usize;
            if count > len {
                return Err(Error::format(format!(
                    "block claims {count} entries but has length {len}"
                )));
            }
            let mut indices = Vec::with_capacity(count);
            let mut values = Vec::with_capacity(count);
            for _ in 0..count {
                let i = cur
                    .read_u32::<LittleEndian>()
                    .map_err(|_| truncated(&cur))?;
                let v = cur
                    .read_f32::<LittleEndian>()
                    .map_err(|_| truncated(&cur))?;
                if i as usize >= len || indices.last().is_some_and(|&p| p >= i) {
                    return Err(Error::format(format!(
                        "index {i} out of order or out of range for block length {len}"
                    )));
                }
                indices.push(i);
                values.push(v as f64);
            }
            blocks.push(SparseBlock {
                len,
                indices,
                values,
            });
        }
        records.push(FeatureRecord {
            label,
            candidate_label,
            features: SparseGradient { blocks },
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn idx_images(count: u32, h: u32, w: u32, payload: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IMAGE_MAGIC, count, h, w] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(payload);
        b
    }

    #[test]
    fn single_zero_image() {
        let set = parse_idx_images(&idx_images(1, 28, 28, &[0; 784])).unwrap();
        assert_eq!((set.count(), set.height(), set.width()), (1, 28, 28));
        assert!(set.image(0).iter().all(|&p| p == 0.0));
    }

    #[test]
    fn pixels_are_scaled() {
        let set = parse_idx_images(&idx_images(1, 1, 3, &[0, 51, 255])).unwrap();
        assert_eq!(set.image(0), &[0.0, 0.2, 1.0]);
    }

    #[test]
    fn label_magic_rejected_for_images() {
        let mut b = idx_images(1, 1, 1, &[0]);
        b[..4].copy_from_slice(&LABEL_MAGIC.to_be_bytes());
        assert!(matches!(parse_idx_images(&b), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_images() {
        let b = idx_images(2, 2, 2, &[1, 2, 3, 4, 5]);
        assert!(matches!(
            parse_idx_images(&b),
            Err(Error::Length {
                expected: 24,
                found: 21
            })
        ));
        assert!(matches!(
            parse_idx_images(&b[..6]),
            Err(Error::Length { .. })
        ));
    }

    #[test]
    fn labels_parse_and_truncate() {
        let mut b = Vec::new();
        b.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        b.extend_from_slice(&3u32.to_be_bytes());
        b.extend_from_slice(&[0, 1, 2]);
        assert_eq!(parse_idx_labels(&b).unwrap().as_slice(), &[0, 1, 2]);
        assert!(matches!(
            parse_idx_labels(&b[..10]),
            Err(Error::Length { .. })
        ));
        b[3] = 0x03;
        assert!(matches!(parse_idx_labels(&b), Err(Error::Format(_))));
    }

    #[test]
    fn label_validation() {
        let l = LabelSet::new(vec![0, 9, 10]);
        assert!(l.validate(11).is_ok());
        assert!(matches!(l.validate(10), Err(Error::Validation(_))));
    }

    fn toy(n: usize) -> (ImageSet, LabelSet) {
        let pixels = (0..n).map(|i| (i % 256) as f32 / 255.0).collect();
        let labels = (0..n).map(|i| (i % 10) as u8).collect();
        (ImageSet::new(1, 1, pixels).unwrap(), LabelSet::new(labels))
    }

    #[test]
    fn contiguous_halves() {
        let (im, lb) = toy(60000);
        let (a, b) = split_dataset(&im, &lb, &SplitSpec::halves()).unwrap();
        assert_eq!((a.len(), b.len()), (30000, 30000));
        assert_eq!(a.labels.get(0), 0);
        assert_eq!(b.images.image(0), im.image(30000));
    }

    #[test]
    fn floor_case() {
        let (im, lb) = toy(1);
        let (a, b) = split_dataset(&im, &lb, &SplitSpec::halves()).unwrap();
        assert_eq!((a.len(), b.len()), (0, 1));
    }

    #[test]
    fn shuffled_split_is_deterministic() {
        let (im, lb) = toy(500);
        let spec = SplitSpec {
            fraction: 0.3,
            seed: 42,
            mode: SplitMode::Shuffled,
        };
        let first = split_dataset(&im, &lb, &spec).unwrap();
        let second = split_dataset(&im, &lb, &spec).unwrap();
        assert_eq!(first, second);
        assert_eq!(first.0.len(), 150);
    }

    #[test]
    fn split_rejects_bad_input() {
        let (im, _) = toy(4);
        let lb = LabelSet::new(vec![0; 3]);
        assert!(split_dataset(&im, &lb, &SplitSpec::halves()).is_err());
        let (im, lb) = toy(4);
        let spec = SplitSpec {
            fraction: 1.0,
            ..SplitSpec::halves()
        };
        assert!(split_dataset(&im, &lb, &spec).is_err());
    }

    #[test]
    fn augment_none_is_identity() {
        let img: Vec<f32> = (0..784).map(|i| (i % 7) as f32 / 7.0).collect();
        let mut rng = seed::rng_from_seed(3);
        let out = augment(&[&img, &img], 28, 28, Augmentation::None, &mut rng);
        assert!(out.iter().all(|o| o == &img));
    }

    #[test]
    fn shift_moves_a_single_pixel() {
        let (r, c) = (10usize, 5usize);
        let mut img = vec![0.0f32; 28 * 28];
        img[r * 28 + c] = 1.0;
        let out = shift_image(&img, 28, 28, 2, 0);
        let lit: Vec<usize> = (0..out.len()).filter(|&i| out[i] != 0.0).collect();
        assert_eq!(lit, vec![r * 28 + c + 2]);
        assert_eq!(shift_image(&img, 28, 28, 0, 0), img);
        // Off the right edge: everything disappears.
        let mut edge = vec![0.0f32; 28 * 28];
        edge[27] = 1.0;
        assert!(shift_image(&edge, 28, 28, 1, 0).iter().all(|&p| p == 0.0));
    }

    #[test]
    fn shift2_stays_within_two_pixels() {
        let mut img = vec![0.0f32; 28 * 28];
        img[14 * 28 + 14] = 1.0;
        let mut rng = seed::rng_from_seed(9);
        for _ in 0..50 {
            let out = augment_image(&img, 28, 28, Augmentation::Shift2, &mut rng);
            let pos = out.iter().position(|&p| p == 1.0).unwrap();
            let (r, c) = (pos / 28, pos % 28);
            assert!(r.abs_diff(14) <= 2 && c.abs_diff(14) <= 2);
        }
    }

    #[test]
    fn feature_records_round_trip() {
        let features = SparseGradient {
            blocks: vec![
                SparseBlock {
                    len: 5,
                    indices: vec![0, 3],
                    values: vec![0.5, -1.0],
                },
                SparseBlock {
                    len: 2,
                    indices: vec![],
                    values: vec![],
                },
            ],
        };
        let recs = vec![
            FeatureRecord {
                label: 3,
                candidate_label: 7,
                features: features.clone(),
            },
            FeatureRecord {
                label: 0,
                candidate_label: 0,
                features,
            },
        ];
        let mut buf = Vec::new();
        write_feature_records(&mut buf, &recs).unwrap();
        // 2 records x (2 label bytes + 4 + 2*8 + 4)
        assert_eq!(buf.len(), 2 * 26);
        assert_eq!(read_feature_records(&buf, &[5, 2]).unwrap(), recs);
        assert!(read_feature_records(&buf[..buf.len() - 1], &[5, 2]).is_err());
        assert!(read_feature_records(&buf, &[2, 2]).is_err());
    }

    proptest! {
        #[test]
        fn idx_round_trip(bytes in proptest::collection::vec(any::<u8>(), 12), labels in proptest::collection::vec(0u8..10, 3)) {
            let images = parse_idx_images(&idx_images(3, 2, 2, &bytes)).unwrap();
            let reloaded = parse_idx_images(&encode_idx_images(&images)).unwrap();
            prop_assert_eq!(&images, &reloaded);
            prop_assert_eq!(encode_idx_images(&reloaded), idx_images(3, 2, 2, &bytes));
            let l = LabelSet::new(labels);
            prop_assert_eq!(parse_idx_labels(&encode_idx_labels(&l)).unwrap(), l);
        }

        #[test]
        fn split_conserves_items(n in 0usize..300, frac in 0.01f64..0.99, seed in any::<u64>(), shuffled in any::<bool>()) {
            let pixels = (0..n).map(|i| (i % 256) as f32 / 255.0).collect();
            let im = ImageSet::new(1, 1, pixels).unwrap();
            let lb = LabelSet::new((0..n).map(|i| (i % 256) as u8).collect());
            let mode = if shuffled { SplitMode::Shuffled } else { SplitMode::Contiguous };
            let (a, b) = split_dataset(&im, &lb, &SplitSpec { fraction: frac, seed, mode }).unwrap();
            prop_assert_eq!(a.len() + b.len(), n);
            prop_assert_eq!(a.len(), (frac * n as f64).floor() as usize);
            let mut all: Vec<u8> = a.labels.as_slice().iter().chain(b.labels.as_slice()).copied().collect();
            all.sort();
            let mut expected: Vec<u8> = lb.as_slice().to_vec();
            expected.sort();
            prop_assert_eq!(all, expected);
        }
    }
}
