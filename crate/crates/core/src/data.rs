//! Dataset loading (IDX and CSV), normalization, subsampling, and the
//! built-in synthetic digit fixture used for desk-scale runs.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::Shape;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// An image-classification dataset with pixels normalized to [0, 1].
/// Samples are stored row-major as N x H x W x C.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Shape of one sample as the assembly pipeline sees it.
    pub fn sample_shape(&self) -> Shape {
        Shape::Spatial(self.height, self.width, self.channels)
    }

    /// Pixel values of sample `i`.
    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.samples[i * n..(i + 1) * n]
    }

    /// Fraction of samples per class.
    pub fn class_distribution(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
            .into_iter()
            .map(|c| c as f64 / self.labels.len().max(1) as f64)
            .collect()
    }

    fn select(&self, indices: &[usize]) -> Dataset {
        let n = self.sample_len();
        let mut samples = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            samples.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            samples,
            height: self.height,
            width: self.width,
            channels: self.channels,
            labels,
            class_count: self.class_count,
        }
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic in {path}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { path: String, expected: u32, found: u32 },
    #[error("{path} is truncated: wanted {wanted} bytes, found {found}")]
    Truncated { path: String, wanted: usize, found: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("row {row} has {found} values, expected {expected}")]
    RaggedRow { row: usize, found: usize, expected: usize },
    #[error("row {row}: {detail}")]
    BadValue { row: usize, detail: String },
    #[error("split of {requested} samples exceeds dataset size {available}")]
    SplitTooLarge { requested: usize, available: usize },
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    Ok(buf)
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32, DataError> {
    let slice = bytes.get(offset..offset + 4).ok_or_else(|| DataError::Truncated {
        path: path.display().to_string(),
        wanted: offset + 4,
        found: bytes.len(),
    })?;
    Ok(u32::from_be_bytes(slice.try_into().unwrap()))
}

/// Parses a big-endian IDX image/label file pair (the MNIST container).
/// Pixels are scaled to [0, 1] by dividing by 255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let images = read_file(images_path)?;
    let magic = be_u32(&images, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            path: images_path.display().to_string(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(&images, 4, images_path)? as usize;
    let height = be_u32(&images, 8, images_path)? as usize;
    let width = be_u32(&images, 12, images_path)? as usize;
    let wanted = 16 + n * height * width;
    if images.len() < wanted {
        return Err(DataError::Truncated {
            path: images_path.display().to_string(),
            wanted,
            found: images.len(),
        });
    }

    let label_bytes = read_file(labels_path)?;
    let magic = be_u32(&label_bytes, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            path: labels_path.display().to_string(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let label_n = be_u32(&label_bytes, 4, labels_path)? as usize;
    if label_n != n {
        return Err(DataError::CountMismatch { images: n, labels: label_n });
    }
    if label_bytes.len() < 8 + n {
        return Err(DataError::Truncated {
            path: labels_path.display().to_string(),
            wanted: 8 + n,
            found: label_bytes.len(),
        });
    }

    let samples = images[16..wanted].iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<usize> = label_bytes[8..8 + n].iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    Ok(Dataset { samples, height, width, channels: 1, labels, class_count })
}

/// Loads a CSV where each row is `label, v1, v2, ...` with
/// width x height x channels raw values in [0, 255]; normalized like
/// [`load_idx`].
pub fn load_csv(
    path: &Path,
    width: usize,
    height: usize,
    channels: usize,
) -> Result<Dataset, DataError> {
    let file = File::open(path)
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    let expected = width * height * channels;
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    for (row, line) in BufReader::new(file).lines().enumerate() {
        let line = line
            .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != expected + 1 {
            return Err(DataError::RaggedRow {
                row,
                found: fields.len().saturating_sub(1),
                expected,
            });
        }
        let label: usize = fields[0]
            .parse()
            .map_err(|e| DataError::BadValue { row, detail: format!("label: {e}") })?;
        labels.push(label);
        for f in &fields[1..] {
            let v: f32 = f
                .parse()
                .map_err(|e| DataError::BadValue { row, detail: format!("{f:?}: {e}") })?;
            samples.push(v / 255.0);
        }
    }
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    Ok(Dataset { samples, height, width, channels, labels, class_count })
}

/// How to carve an evaluation subset out of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_count: usize,
    pub validation_count: usize,
    pub seed: u64,
}

/// Draws `train_count + validation_count` distinct samples uniformly
/// without replacement and splits them. Plain uniform sampling: class
/// balance drifts slightly and is reported, not corrected.
pub fn subsample_split(
    dataset: &Dataset,
    spec: SplitSpec,
) -> Result<(Dataset, Dataset), DataError> {
    let total = spec.train_count + spec.validation_count;
    if total > dataset.len() {
        return Err(DataError::SplitTooLarge { requested: total, available: dataset.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let picked: Vec<usize> = index_sample(&mut rng, dataset.len(), total).into_vec();
    let train = dataset.select(&picked[..spec.train_count]);
    let validation = dataset.select(&picked[spec.train_count..]);
    Ok((train, validation))
}

/// 8x8 glyphs for the ten digit classes of the synthetic fixture.
const GLYPHS: [[&str; 8]; 10] = [
    [
        "..####..", ".##..##.", ".#....#.", ".#....#.", ".#....#.", ".#....#.", ".##..##.",
        "..####..",
    ],
    [
        "...##...", "..###...", ".#.##...", "...##...", "...##...", "...##...", "...##...",
        ".######.",
    ],
    [
        "..####..", ".#....#.", "......#.", ".....##.", "...##...", "..#.....", ".#......",
        ".######.",
    ],
    [
        ".#####..", "......#.", "......#.", "..####..", "......#.", "......#.", ".#....#.",
        "..####..",
    ],
    [
        "....##..", "...#.#..", "..#..#..", ".#...#..", ".######.", ".....#..", ".....#..",
        ".....#..",
    ],
    [
        ".######.", ".#......", ".#......", ".#####..", "......#.", "......#.", ".#....#.",
        "..####..",
    ],
    [
        "..####..", ".#......", ".#......", ".#####..", ".#....#.", ".#....#.", ".#....#.",
        "..####..",
    ],
    [
        ".######.", "......#.", ".....#..", "....#...", "...#....", "...#....", "...#....",
        "...#....",
    ],
    [
        "..####..", ".#....#.", ".#....#.", "..####..", ".#....#.", ".#....#.", ".#....#.",
        "..####..",
    ],
    [
        "..####..", ".#....#.", ".#....#.", "..#####.", "......#.", "......#.", "......#.",
        "..####..",
    ],
];

/// Generates the desk-scale fixture: `count` 8x8 grayscale digit glyphs,
/// class-balanced, each jittered by up to one pixel, scaled in intensity,
/// thinned by random stroke dropout and perturbed with uniform pixel
/// noise. Deterministic per seed.
pub fn synthetic_digits(count: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(count * 64);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % 10;
        labels.push(class);
        let dy = rng.random_range(-1i32..=1);
        let dx = rng.random_range(-1i32..=1);
        let intensity: f32 = rng.random_range(0.5..1.0);
        for y in 0..8i32 {
            for x in 0..8i32 {
                let sy = y - dy;
                let sx = x - dx;
                let on = sy >= 0
                    && sy < 8
                    && sx >= 0
                    && sx < 8
                    && GLYPHS[class][sy as usize].as_bytes()[sx as usize] == b'#'
                    // Stroke pixels drop out independently, so no single
                    // pixel is a reliable class give-away.
                    && rng.random_range(0.0..1.0) >= 0.15f32;
                let base = if on { intensity } else { 0.0 };
                let noise: f32 = rng.random_range(-0.25..0.25);
                samples.push((base + noise).clamp(0.0, 1.0));
            }
        }
    }
    Dataset { samples, height: 8, width: 8, channels: 1, labels, class_count: 10 }
}

/// Renders a sample as ASCII art; handy when eyeballing fixtures.
pub fn render_sample(dataset: &Dataset, i: usize) -> String {
    let mut out = String::new();
    let px = dataset.sample(i);
    for y in 0..dataset.height {
        for x in 0..dataset.width {
            let v = px[(y * dataset.width + x) * dataset.channels];
            out.push(match v {
                v if v > 0.66 => '#',
                v if v > 0.33 => '+',
                v if v > 0.1 => '.',
                _ => ' ',
            });
        }
        out.push('\n');
    }
    out
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} samples of {}x{}x{}, {} classes",
            self.len(),
            self.height,
            self.width,
            self.channels,
            self.class_count
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_idx_pair(dir: &Path, pixels: &[u8], labels: &[u8], h: usize, w: usize) -> (std::path::PathBuf, std::path::PathBuf) {
        let n = labels.len();
        assert_eq!(pixels.len(), n * h * w);
        let images_path = dir.join("images.idx");
        let labels_path = dir.join("labels.idx");
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&(n as u32).to_be_bytes());
        img.extend_from_slice(&(h as u32).to_be_bytes());
        img.extend_from_slice(&(w as u32).to_be_bytes());
        img.extend_from_slice(pixels);
        std::fs::write(&images_path, img).unwrap();
        let mut lab = Vec::new();
        lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&(n as u32).to_be_bytes());
        lab.extend_from_slice(labels);
        std::fs::write(&labels_path, lab).unwrap();
        (images_path, labels_path)
    }

    #[test]
    fn idx_fixture_parses_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = vec![0, 51, 102, 153, 204, 255, 10, 20];
        let (ip, lp) = write_idx_pair(dir.path(), &pixels, &[3, 7], 2, 2);
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!((ds.height, ds.width, ds.channels), (2, 2, 1));
        assert_eq!(ds.labels, vec![3, 7]);
        assert_eq!(ds.class_count, 8);
        for (got, want) in ds.samples.iter().zip(&pixels) {
            assert_eq!(*got, *want as f32 / 255.0);
        }
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), &[0; 4], &[0], 2, 2);
        let mut bytes = std::fs::read(&ip).unwrap();
        bytes[3] = 0x99;
        std::fs::write(&ip, bytes).unwrap();
        let err = load_idx(&ip, &lp).unwrap_err();
        assert!(matches!(err, DataError::BadMagic { .. }), "{err}");
    }

    #[test]
    fn truncated_image_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), &[5; 8], &[1, 2], 2, 2);
        let bytes = std::fs::read(&ip).unwrap();
        std::fs::write(&ip, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_idx(&ip, &lp).unwrap_err();
        assert!(matches!(err, DataError::Truncated { .. }), "{err}");
    }

    #[test]
    fn label_count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), &[5; 8], &[1, 2], 2, 2);
        let mut lab = std::fs::read(&lp).unwrap();
        lab[7] = 3;
        lab.push(0);
        std::fs::write(&lp, lab).unwrap();
        let err = load_idx(&ip, &lp).unwrap_err();
        assert!(matches!(err, DataError::CountMismatch { images: 2, labels: 3 }), "{err}");
    }

    #[test]
    fn csv_toy_file_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.csv");
        let mut f = File::create(&path).unwrap();
        for row in ["0, 0, 255, 0, 255", "1, 255, 0, 255, 0", "0, 10, 20, 30, 40", "1, 5, 5, 5, 5"] {
            writeln!(f, "{row}").unwrap();
        }
        drop(f);
        let ds = load_csv(&path, 2, 2, 1).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.class_count, 2);
        assert_eq!(ds.sample(0), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn ragged_csv_row_names_its_index() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "0, 1, 2, 3, 4\n1, 9, 9\n").unwrap();
        let err = load_csv(&path, 2, 2, 1).unwrap_err();
        assert!(matches!(err, DataError::RaggedRow { row: 1, found: 2, expected: 4 }), "{err}");
    }

    #[test]
    fn csv_round_trips_through_write_and_read() {
        let ds = synthetic_digits(20, 9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.csv");
        let mut f = File::create(&path).unwrap();
        for i in 0..ds.len() {
            let vals: Vec<String> =
                ds.sample(i).iter().map(|v| format!("{}", v * 255.0)).collect();
            writeln!(f, "{},{}", ds.labels[i], vals.join(",")).unwrap();
        }
        drop(f);
        let back = load_csv(&path, 8, 8, 1).unwrap();
        assert_eq!(back.labels, ds.labels);
        for (a, b) in back.samples.iter().zip(&ds.samples) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let ds = synthetic_digits(100, 1);
        let spec = SplitSpec { train_count: 80, validation_count: 20, seed: 7 };
        let (train, val) = subsample_split(&ds, spec).unwrap();
        assert_eq!(train.len(), 80);
        assert_eq!(val.len(), 20);
        // Samples carry enough noise to be unique, so pixel identity
        // detects index overlap.
        let key = |d: &Dataset, i: usize| -> Vec<u32> {
            d.sample(i).iter().map(|v| v.to_bits()).collect()
        };
        let train_keys: std::collections::BTreeSet<Vec<u32>> =
            (0..train.len()).map(|i| key(&train, i)).collect();
        assert_eq!(train_keys.len(), 80, "duplicate train samples");
        for i in 0..val.len() {
            assert!(!train_keys.contains(&key(&val, i)), "sample {i} in both splits");
        }
    }

    #[test]
    fn full_split_is_a_permutation() {
        let ds = synthetic_digits(30, 2);
        let spec = SplitSpec { train_count: 30, validation_count: 0, seed: 3 };
        let (train, val) = subsample_split(&ds, spec).unwrap();
        assert_eq!(val.len(), 0);
        let mut got: Vec<usize> = train.labels.clone();
        let mut want: Vec<usize> = ds.labels.clone();
        got.sort();
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn oversized_split_errors() {
        let ds = synthetic_digits(10, 2);
        let spec = SplitSpec { train_count: 9, validation_count: 2, seed: 0 };
        assert!(matches!(
            subsample_split(&ds, spec),
            Err(DataError::SplitTooLarge { requested: 11, available: 10 })
        ));
    }

    #[test]
    fn split_is_deterministic_per_seed() {
        let ds = synthetic_digits(200, 4);
        let spec = SplitSpec { train_count: 150, validation_count: 50, seed: 42 };
        let (t1, v1) = subsample_split(&ds, spec).unwrap();
        let (t2, v2) = subsample_split(&ds, spec).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(v1, v2);
        let other = SplitSpec { seed: 43, ..spec };
        let (t3, _) = subsample_split(&ds, other).unwrap();
        assert_ne!(t1, t3);
    }

    #[test]
    fn synthetic_fixture_is_balanced_and_normalized() {
        let ds = synthetic_digits(3000, 11);
        assert_eq!(ds.len(), 3000);
        assert_eq!(ds.sample_shape(), Shape::Spatial(8, 8, 1));
        assert_eq!(ds.class_count, 10);
        for v in &ds.samples {
            assert!((0.0..=1.0).contains(v));
        }
        let dist = ds.class_distribution();
        for p in dist {
            assert!((p - 0.1).abs() < 1e-9);
        }
        assert_eq!(synthetic_digits(3000, 11), ds);
        assert_ne!(synthetic_digits(3000, 12), ds);
    }

    #[test]
    fn glyphs_are_distinct() {
        for a in 0..10 {
            for b in (a + 1)..10 {
                assert_ne!(GLYPHS[a], GLYPHS[b], "classes {a} and {b} share a glyph");
            }
        }
    }
}
