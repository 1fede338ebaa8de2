//! Synthetic herbage-like images labelled with per-category area fractions.
//!
//! Each image is a 3-channel square painted with grass-, clover- and
//! soil-coloured regions. Region layout comes from smooth random fields so
//! categories form blobs; the target is the painted area fraction of each
//! category in percent. The hard stratum draws clover-heavier compositions
//! and is degraded by a box blur, an optional grey occluder and additive
//! noise, none of which change the target.
//!
//! On disk a dataset is a directory of `<id>.bin` tensors plus a
//! `labels.csv` with columns `id, frac_grass, frac_clover, frac_soil,
//! stratum`.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const CATEGORIES: [&str; 3] = ["grass", "clover", "soil"];
pub const CATEGORY_COUNT: usize = CATEGORIES.len();
const CLOVER: usize = 1;

/// Base RGB colour of each category.
pub const CATEGORY_COLORS: [[f64; 3]; CATEGORY_COUNT] =
    [[0.20, 0.52, 0.14], [0.62, 0.85, 0.48], [0.46, 0.30, 0.16]];

// Clover is painted as many small patches with strong per-pixel shading,
// grass and soil as a few broad patches with mild shading. Fine, speckled
// texture is what makes clover-heavy images hard.
const CLOVER_BLOBS: usize = 12;
const CLOVER_BLOB_WIDTH: (f64, f64) = (0.03, 0.08);
const CLOVER_SHADE: f64 = 0.25;
const BLOBS: usize = 5;
const BLOB_WIDTH: (f64, f64) = (0.08, 0.22);
const SHADE: f64 = 0.08;
/// Grey level of the occluder patch.
const OCCLUDER_GREY: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stratum {
    Easy,
    Hard,
}

impl Stratum {
    pub const ALL: [Stratum; 2] = [Stratum::Easy, Stratum::Hard];

    pub fn as_str(self) -> &'static str {
        match self {
            Stratum::Easy => "easy",
            Stratum::Hard => "hard",
        }
    }
}

impl fmt::Display for Stratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stratum {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "easy" | "camera" => Ok(Stratum::Easy),
            "hard" | "phone" => Ok(Stratum::Hard),
            other => Err(format!("unknown stratum `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    /// Category fractions in percent, summing to 100.
    pub target: Vec<f64>,
    pub stratum: Stratum,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn count(&self, stratum: Stratum) -> usize {
        self.samples.iter().filter(|s| s.stratum == stratum).count()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Sample> {
        self.samples.iter()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_samples: usize,
    /// Side length of the square images.
    pub image_size: usize,
    pub hard_fraction: f64,
    pub blur_radius: usize,
    pub occluder_probability: f64,
    /// Extra Dirichlet concentration on clover for hard samples.
    pub clover_bias: f64,
    /// Standard deviation of the additive noise on hard samples.
    pub noise_sigma: f64,
    /// Easy samples get additive noise with a per-image standard deviation
    /// drawn uniformly from `[0, easy_noise_max]`.
    pub easy_noise_max: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_samples: 2000,
            image_size: 32,
            hard_fraction: 0.2,
            blur_radius: 1,
            occluder_probability: 0.5,
            clover_bias: 3.0,
            noise_sigma: 0.08,
            easy_noise_max: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.hard_fraction) || !unit(self.occluder_probability) {
            return Err(Error::Config(
                "hard_fraction and occluder_probability must lie in [0, 1]".into(),
            ));
        }
        if self.image_size < 8 {
            return Err(Error::Config(format!(
                "image_size must be >= 8, got {}",
                self.image_size
            )));
        }
        if !(self.clover_bias >= 0.0 && self.noise_sigma >= 0.0 && self.easy_noise_max >= 0.0) {
            return Err(Error::Config(
                "clover_bias, noise_sigma and easy_noise_max must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Generate `config.n_samples` samples. Sample `i` depends only on
/// `(config, i)`.
pub fn generate(config: &SyntheticConfig) -> Result<Dataset> {
    config.validate()?;
    let samples = (0..config.n_samples)
        .map(|i| generate_one(config, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { samples })
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Pixel-level category map of the kind painted into an image.
pub fn paint_categories(
    size: usize,
    fractions: &[f64; CATEGORY_COUNT],
    rng: &mut impl Rng,
) -> Vec<usize> {
    let n = size * size;
    let counts = apportion(fractions, n);
    // Clover claims the peaks of its field, grass the peaks of its own field
    // among what is left, soil fills the rest.
    let mut labels = vec![2usize; n];
    let mut free: Vec<usize> = (0..n).collect();
    for (category, &count) in counts.iter().enumerate().take(2).rev() {
        let field = if category == CLOVER {
            blob_field(size, CLOVER_BLOBS, CLOVER_BLOB_WIDTH, rng)
        } else {
            blob_field(size, BLOBS, BLOB_WIDTH, rng)
        };
        free.sort_by(|&a, &b| field[b].total_cmp(&field[a]).then(a.cmp(&b)));
        for &px in &free[..count] {
            labels[px] = category;
        }
        free.drain(..count);
    }
    labels
}

/// Largest-remainder split of `n` items by `fractions`.
fn apportion(fractions: &[f64; CATEGORY_COUNT], n: usize) -> [usize; CATEGORY_COUNT] {
    let total: f64 = fractions.iter().sum();
    let exact: Vec<f64> = fractions.iter().map(|f| f / total * n as f64).collect();
    let mut counts = [0usize; CATEGORY_COUNT];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let mut order: Vec<usize> = (0..CATEGORY_COUNT).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut short = n - counts.iter().sum::<usize>();
    for &c in order.iter().cycle() {
        if short == 0 {
            break;
        }
        counts[c] += 1;
        short -= 1;
    }
    counts
}

/// Sum of a few Gaussian bumps plus a small jitter that breaks ties.
fn blob_field(size: usize, count: usize, width: (f64, f64), rng: &mut impl Rng) -> Vec<f64> {
    let s = size as f64;
    let bumps: Vec<(f64, f64, f64, f64)> = (0..count)
        .map(|_| {
            (
                rng.random_range(0.0..s),
                rng.random_range(0.0..s),
                rng.random_range(width.0 * s..width.1 * s),
                rng.random_range(0.5..1.0),
            )
        })
        .collect();
    let mut field = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let v: f64 = bumps
                .iter()
                .map(|&(cx, cy, width, amp)| {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    amp * (-d2 / (2.0 * width * width)).exp()
                })
                .sum();
            field.push(v + rng.random_range(0.0..1e-3));
        }
    }
    field
}

fn generate_one(config: &SyntheticConfig, id: usize) -> Result<Sample> {
    let mut rng = sample_rng(config.seed, id);
    let size = config.image_size;
    let stratum = if rng.random::<f64>() < config.hard_fraction {
        Stratum::Hard
    } else {
        Stratum::Easy
    };
    let mut alpha = [2.0, 1.0, 1.5];
    if stratum == Stratum::Hard {
        alpha[CLOVER] += config.clover_bias;
    }
    let dirichlet = Dirichlet::new(alpha).map_err(|e| Error::Config(e.to_string()))?;
    let fractions: [f64; CATEGORY_COUNT] = dirichlet.sample(&mut rng);

    let labels = paint_categories(size, &fractions, &mut rng);
    let n = (size * size) as f64;
    let mut target = vec![0.0; CATEGORY_COUNT];
    for &l in &labels {
        target[l] += 1.0;
    }
    for t in &mut target {
        *t = *t / n * 100.0;
    }

    let mut image = render(size, &labels, &mut rng);
    let noise_sigma = match stratum {
        Stratum::Hard => {
            box_blur(&mut image, size, config.blur_radius);
            if rng.random::<f64>() < config.occluder_probability {
                occlude(&mut image, size, &mut rng);
            }
            config.noise_sigma
        }
        Stratum::Easy if config.easy_noise_max > 0.0 => {
            rng.random_range(0.0..config.easy_noise_max)
        }
        Stratum::Easy => 0.0,
    };
    if noise_sigma > 0.0 {
        let noise = Normal::new(0.0, noise_sigma).expect("positive sigma");
        for v in image.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    for v in image.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }

    Ok(Sample {
        id,
        image: Tensor::new(vec![3, size, size], image)?,
        target,
        stratum,
    })
}

/// Colour a category map with a multiplicative per-pixel texture.
fn render(size: usize, labels: &[usize], rng: &mut impl Rng) -> Vec<f64> {
    let plane = size * size;
    let mut image = vec![0.0; 3 * plane];
    for (px, &l) in labels.iter().enumerate() {
        let a = if l == CLOVER { CLOVER_SHADE } else { SHADE };
        let shade = 1.0 + rng.random_range(-a..a);
        for ch in 0..3 {
            image[ch * plane + px] = CATEGORY_COLORS[l][ch] * shade;
        }
    }
    image
}

fn box_blur(image: &mut [f64], size: usize, radius: usize) {
    if radius == 0 {
        return;
    }
    let plane = size * size;
    let r = radius as isize;
    for ch in image.chunks_mut(plane) {
        let src = ch.to_vec();
        for y in 0..size as isize {
            for x in 0..size as isize {
                let (mut acc, mut cnt) = (0.0, 0.0);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (y + dy, x + dx);
                        if yy >= 0 && xx >= 0 && yy < size as isize && xx < size as isize {
                            acc += src[yy as usize * size + xx as usize];
                            cnt += 1.0;
                        }
                    }
                }
                ch[y as usize * size + x as usize] = acc / cnt;
            }
        }
    }
}

/// Grey rectangle covering roughly 10–25% of the image.
fn occlude(image: &mut [f64], size: usize, rng: &mut impl Rng) {
    let plane = size * size;
    let h = rng.random_range(size * 3 / 10..=size / 2);
    let w = rng.random_range(size * 3 / 10..=size / 2);
    let y0 = rng.random_range(0..=size - h);
    let x0 = rng.random_range(0..=size - w);
    for ch in 0..3 {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                image[ch * plane + y * size + x] = OCCLUDER_GREY;
            }
        }
    }
}

/// Nearest-base-colour category of every pixel of a `[3, H, W]` image.
pub fn classify_pixels(image: &Tensor) -> Vec<usize> {
    let plane = image.shape()[1] * image.shape()[2];
    let d = image.data();
    (0..plane)
        .map(|px| {
            let rgb = [d[px], d[plane + px], d[2 * plane + px]];
            (0..CATEGORY_COUNT)
                .min_by(|&a, &b| {
                    color_dist(&rgb, &CATEGORY_COLORS[a])
                        .total_cmp(&color_dist(&rgb, &CATEGORY_COLORS[b]))
                })
                .expect("categories")
        })
        .collect()
}

fn color_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Hold out part of the easy stratum; every hard sample goes to the test set.
/// Both returned sets are sorted by id.
pub fn split(dataset: &Dataset, train_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::Config(format!(
            "train_frac must lie in (0, 1), got {train_frac}"
        )));
    }
    let mut easy: Vec<&Sample> = dataset
        .iter()
        .filter(|s| s.stratum == Stratum::Easy)
        .collect();
    let hard_count = dataset.count(Stratum::Hard);
    let n_train = (train_frac * easy.len() as f64).round() as usize;
    if n_train == 0 || n_train == easy.len() {
        return Err(Error::Dataset(format!(
            "{} easy samples cannot fill both a train and a test split at train_frac={train_frac}",
            easy.len()
        )));
    }
    if hard_count == 0 {
        return Err(Error::Dataset(
            "no hard samples available for the test split".into(),
        ));
    }
    easy.sort_by_key(|s| s.id);
    easy.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train: Vec<Sample> = easy[..n_train].iter().map(|&s| s.clone()).collect();
    let mut test: Vec<Sample> = easy[n_train..].iter().map(|&s| s.clone()).collect();
    test.extend(
        dataset
            .iter()
            .filter(|s| s.stratum == Stratum::Hard)
            .cloned(),
    );
    train.sort_by_key(|s| s.id);
    test.sort_by_key(|s| s.id);
    Ok((Dataset { samples: train }, Dataset { samples: test }))
}

const TENSOR_MAGIC: &[u8; 8] = b"GPTENS01";

/// Binary tensor file: magic, `u32` rank, `u32` dims, then `f64` values, all
/// little-endian.
pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(TENSOR_MAGIC).map_err(io)?;
    w.write_all(&(tensor.shape().len() as u32).to_le_bytes())
        .map_err(io)?;
    for &d in tensor.shape() {
        w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
    }
    for v in tensor.data() {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let io = |e| Error::io(path, e);
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Dataset(format!(
            "{}: not a tensor file",
            path.display()
        )));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(io)?;
    let rank = u32::from_le_bytes(u32buf) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut u32buf).map_err(io)?;
        shape.push(u32::from_le_bytes(u32buf) as usize);
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes).map_err(io)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(shape, data)
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    id: usize,
    frac_grass: f64,
    frac_clover: f64,
    frac_soil: f64,
    stratum: String,
}

/// Write `labels.csv` and one tensor file per sample into `dir`.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let labels = dir.join("labels.csv");
    let mut w = csv::Writer::from_path(&labels)?;
    for s in dataset.iter() {
        w.serialize(LabelRow {
            id: s.id,
            frac_grass: s.target[0],
            frac_clover: s.target[1],
            frac_soil: s.target[2],
            stratum: s.stratum.to_string(),
        })?;
        write_tensor(&dir.join(format!("{}.bin", s.id)), &s.image)?;
    }
    w.flush().map_err(|e| Error::io(&labels, e))
}

/// Tolerance on the fraction sum for externally labelled data.
pub const LABEL_SUM_TOLERANCE: f64 = 0.5;

/// Load a dataset from `labels_csv` with images `<id>.bin` in `image_dir`.
pub fn load_external(image_dir: &Path, labels_csv: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(labels_csv).map_err(|e| Error::io(labels_csv, e))?;
    if text.trim().is_empty() {
        log::warn!(
            "{}: empty label file, dataset is empty",
            labels_csv.display()
        );
        return Ok(Dataset::default());
    }
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut samples = Vec::new();
    for (i, row) in reader.deserialize::<LabelRow>().enumerate() {
        // Header is line 1.
        let line = i + 2;
        let row_err = |message: String| Error::Row {
            path: labels_csv.to_path_buf(),
            row: line,
            message,
        };
        let row = row.map_err(|e| row_err(e.to_string()))?;
        let target = vec![row.frac_grass, row.frac_clover, row.frac_soil];
        if target.iter().any(|&v| !(0.0..=100.0).contains(&v)) {
            return Err(row_err(format!("fractions {target:?} outside [0, 100]")));
        }
        let sum: f64 = target.iter().sum();
        if (sum - 100.0).abs() > LABEL_SUM_TOLERANCE {
            return Err(row_err(format!("fractions sum to {sum}, expected 100")));
        }
        let stratum: Stratum = row.stratum.parse().map_err(row_err)?;
        let image_path = image_dir.join(format!("{}.bin", row.id));
        if !image_path.exists() {
            return Err(row_err(format!("missing image {}", image_path.display())));
        }
        let image = read_tensor(&image_path)?;
        if image.shape().len() != 3 || image.shape()[0] != 3 {
            return Err(row_err(format!(
                "image {} has shape {:?}, expected [3, H, W]",
                image_path.display(),
                image.shape()
            )));
        }
        samples.push(Sample {
            id: row.id,
            image,
            target,
            stratum,
        });
    }
    if samples.is_empty() {
        log::warn!("{}: no label rows, dataset is empty", labels_csv.display());
    }
    Ok(Dataset { samples })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    load_external(dir, &dir.join("labels.csv"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, hard: f64) -> SyntheticConfig {
        SyntheticConfig {
            n_samples: n,
            hard_fraction: hard,
            seed: 9,
            ..Default::default()
        }
    }

    #[test]
    fn all_easy_when_hard_fraction_zero() {
        let ds = generate(&small(50, 0.0)).unwrap();
        assert!(ds.iter().all(|s| s.stratum == Stratum::Easy));
    }

    #[test]
    fn targets_sum_to_100() {
        for s in generate(&small(100, 0.5)).unwrap().iter() {
            let sum: f64 = s.target.iter().sum();
            assert!((sum - 100.0).abs() < 1e-6);
            assert!(s.target.iter().all(|&v| v >= 0.0));
            assert_eq!(s.image.shape(), &[3, 32, 32]);
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(
            generate(&small(20, 0.3)).unwrap(),
            generate(&small(20, 0.3)).unwrap()
        );
        let mut other = small(20, 0.3);
        other.seed = 10;
        assert_ne!(
            generate(&small(20, 0.3)).unwrap(),
            generate(&other).unwrap()
        );
    }

    #[test]
    fn easy_images_are_unblurred_renderings() {
        let ds = generate(&small(40, 0.0)).unwrap();
        for s in ds.iter() {
            let labels = classify_pixels(&s.image);
            let n = labels.len() as f64;
            for c in 0..CATEGORY_COUNT {
                let frac = labels.iter().filter(|&&l| l == c).count() as f64 / n * 100.0;
                assert!((frac - s.target[c]).abs() <= 1.0, "sample {} cat {c}", s.id);
            }
        }
    }

    #[test]
    fn apportion_is_exact() {
        assert_eq!(apportion(&[0.5, 0.25, 0.25], 8), [4, 2, 2]);
        assert_eq!(apportion(&[1.0, 1.0, 1.0], 10).iter().sum::<usize>(), 10);
    }

    #[test]
    fn split_contract() {
        let ds = generate(&small(200, 0.3)).unwrap();
        let (train, test) = split(&ds, 0.7, 1).unwrap();
        assert!(train.iter().all(|s| s.stratum == Stratum::Easy));
        assert!(test.count(Stratum::Easy) > 0 && test.count(Stratum::Hard) > 0);
        let ids: std::collections::BTreeSet<_> = train.iter().map(|s| s.id).collect();
        assert!(test.iter().all(|s| !ids.contains(&s.id)));
        assert_eq!(train.len() + test.len(), ds.len());
        assert_eq!(split(&ds, 0.7, 1).unwrap(), (train, test));
    }

    #[test]
    fn split_errors() {
        let ds = generate(&small(30, 0.0)).unwrap();
        assert!(matches!(split(&ds, 0.5, 0), Err(Error::Dataset(_))));
        let ds = generate(&small(30, 0.3)).unwrap();
        assert!(matches!(split(&ds, 1.0, 0), Err(Error::Config(_))));
        assert!(matches!(split(&ds, 0.001, 0), Err(Error::Dataset(_))));
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&small(6, 0.5)).unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn external_label_checks() {
        let dir = tempfile::tempdir().unwrap();
        let labels = dir.path().join("labels.csv");
        std::fs::write(&labels, "").unwrap();
        assert!(load_external(dir.path(), &labels).unwrap().is_empty());

        let ds = generate(&small(2, 0.0)).unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        std::fs::write(
            &labels,
            "id,frac_grass,frac_clover,frac_soil,stratum\n0,50,25,25,easy\n1,50,25,22,easy\n",
        )
        .unwrap();
        match load_external(dir.path(), &labels) {
            Err(Error::Row { row, .. }) => assert_eq!(row, 3),
            other => panic!("unexpected {other:?}"),
        }
        std::fs::write(
            &labels,
            "id,frac_grass,frac_clover,frac_soil,stratum\n7,50,25,25,easy\n",
        )
        .unwrap();
        assert!(matches!(
            load_external(dir.path(), &labels),
            Err(Error::Row { row: 2, .. })
        ));
    }
}
