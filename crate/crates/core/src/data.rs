//! Synthetic connected-shape datasets, labeled/unlabeled/validation splits
//! and the plain-text dataset directory format.
//!
//! # Directory format
//!
//! ```text
//! <dir>/manifest.toml        dataset header, optional split and generator info
//! <dir>/images/00000.txt     one grid per sample
//! <dir>/masks/00000.txt
//! ```
//!
//! A grid file is a header line `H W C` followed by `H` rows of `W`
//! space-separated values. For images `C` is the channel count (always 1)
//! and values are decimal reals; for masks `C` is the number of classes and
//! values are integer labels in `[0, C)`. Reals are written in shortest
//! round-trip form, so write-then-read is bitwise lossless.
//!
//! `manifest.toml` keys: `format = "cavat-dataset/1"`, `count`, `height`,
//! `width`, `classes`, an optional `[split]` table with `labeled`,
//! `unlabeled` and `validation` index arrays, and an optional `[generator]`
//! table recording the seed and shape parameters.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{is_connected, Adjacency, BinaryMask, DiscreteMask, Grid, GridError, Image, RngState};

pub const FORMAT_TAG: &str = "cavat-dataset/1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: invalid manifest: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("shape generation failed: {0}")]
    Generation(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Parameters of the synthetic blob renderer. Lengths are fractions of
/// `min(height, width)`; intensities are raw units before standardization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapeParams {
    pub min_area_fraction: f64,
    pub max_area_fraction: f64,
    pub max_discs: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Foreground intensity offset.
    pub contrast: f64,
    pub noise_sigma: f64,
    /// Peak-to-peak amplitude of the linear background ramp.
    pub gradient_amplitude: f64,
    /// Up to this many small bright background discs that are not foreground.
    pub max_distractors: usize,
    pub distractor_radius: f64,
    /// Distractor intensity as a fraction of `contrast`.
    pub distractor_intensity: f64,
    pub max_retries: usize,
}

impl Default for ShapeParams {
    fn default() -> Self {
        ShapeParams {
            min_area_fraction: 0.05,
            max_area_fraction: 0.4,
            max_discs: 4,
            min_radius: 0.1,
            max_radius: 0.25,
            contrast: 1.0,
            noise_sigma: 0.5,
            gradient_amplitude: 0.5,
            max_distractors: 0,
            distractor_radius: 0.05,
            distractor_intensity: 0.8,
            max_retries: 200,
        }
    }
}

impl ShapeParams {
    fn validate(&self) -> Result<(), DataError> {
        let ok = self.min_area_fraction >= 0.0
            && self.max_area_fraction > self.min_area_fraction
            && self.max_area_fraction <= 1.0
            && self.max_discs >= 1
            && self.min_radius > 0.0
            && self.max_radius >= self.min_radius
            && self.noise_sigma >= 0.0
            && self.max_retries >= 1;
        if !ok {
            return Err(DataError::Generation(format!("degenerate shape parameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorInfo {
    pub seed: u64,
    pub params: ShapeParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub validation: Vec<usize>,
}

impl SplitManifest {
    /// True when the three lists partition `0..n` exactly.
    pub fn is_partition_of(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for &i in self.labeled.iter().chain(&self.unlabeled).chain(&self.validation) {
            if i >= n || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        seen.into_iter().all(|s| s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub mask: DiscreteMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub samples: Vec<Sample>,
    pub split: Option<SplitManifest>,
    pub generator: Option<GeneratorInfo>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Copy with every image standardized to zero mean and unit variance.
    pub fn standardized(&self) -> Dataset {
        Dataset {
            samples: self
                .samples
                .iter()
                .map(|s| Sample {
                    image: s.image.standardized(),
                    mask: s.mask.clone(),
                })
                .collect(),
            ..self.clone()
        }
    }
}

fn raster_disc(mask: &mut BinaryMask, cy: f64, cx: f64, radius: f64) {
    let (h, w) = mask.shape();
    let r2 = radius * radius;
    for r in 0..h {
        for c in 0..w {
            let (dy, dx) = (r as f64 - cy, c as f64 - cx);
            if dy * dy + dx * dx <= r2 {
                mask[(r, c)] = true;
            }
        }
    }
}

fn gen_blob(h: usize, w: usize, params: &ShapeParams, rng: &mut RngState) -> Option<BinaryMask> {
    let size = h.min(w) as f64;
    let n_discs = 1 + rng.below(params.max_discs);
    let mut mask = Grid::filled(h, w, false);
    for i in 0..n_discs {
        let radius = size * rng.gen_range(params.min_radius, params.max_radius);
        let (cy, cx) = if i == 0 {
            let margin = radius.min(size / 2.0 - 1.0).max(0.0);
            (
                rng.gen_range(margin, h as f64 - 1.0 - margin),
                rng.gen_range(margin, w as f64 - 1.0 - margin),
            )
        } else {
            // Centre on an existing pixel so the union stays connected.
            let fg: Vec<_> = mask.foreground().collect();
            let (r, c) = fg[rng.below(fg.len())];
            (r as f64, c as f64)
        };
        raster_disc(&mut mask, cy, cx, radius);
    }
    let frac = mask.count() as f64 / (h * w) as f64;
    let in_band = (params.min_area_fraction..=params.max_area_fraction).contains(&frac);
    (in_band && is_connected(&mask, Adjacency::Four)).then_some(mask)
}

fn render(mask: &BinaryMask, params: &ShapeParams, rng: &mut RngState) -> Image {
    let (h, w) = mask.shape();
    let size = h.min(w) as f64;
    let angle = rng.gen_range(0.0, std::f64::consts::TAU);
    let (sin, cos) = angle.sin_cos();
    let mut clutter = Grid::filled(h, w, false);
    let n_distractors = if params.max_distractors > 0 {
        rng.below(params.max_distractors + 1)
    } else {
        0
    };
    for _ in 0..n_distractors {
        let cy = rng.gen_range(0.0, h as f64 - 1.0);
        let cx = rng.gen_range(0.0, w as f64 - 1.0);
        raster_disc(&mut clutter, cy, cx, params.distractor_radius * size);
    }
    Grid::from_fn(h, w, |r, c| {
        let ramp = params.gradient_amplitude * ((r as f64 / h as f64 - 0.5) * cos + (c as f64 / w as f64 - 0.5) * sin);
        let signal = if mask[(r, c)] {
            params.contrast
        } else if clutter[(r, c)] {
            params.contrast * params.distractor_intensity
        } else {
            0.0
        };
        ramp + signal + params.noise_sigma * rng.normal()
    })
}

/// `n` noisy renderings of single connected blobs. Image `i` draws from a
/// stream derived from `seed` and `i`, so any prefix is reproducible alone.
pub fn gen_shapes(n: usize, h: usize, w: usize, params: &ShapeParams, seed: u64) -> Result<Dataset, DataError> {
    if n == 0 || h < 16 || w < 16 {
        return Err(DataError::InvalidArgument(format!(
            "need n >= 1 and h, w >= 16, got n={n} h={h} w={w}"
        )));
    }
    params.validate()?;
    let root = RngState::new(seed);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = root.derive(i as u64);
        let mask = (0..params.max_retries)
            .find_map(|_| gen_blob(h, w, params, &mut rng))
            .ok_or_else(|| {
                DataError::Generation(format!(
                    "image {i}: no connected blob within the area band after {} tries",
                    params.max_retries
                ))
            })?;
        let image = render(&mask, params, &mut rng);
        samples.push(Sample {
            image,
            mask: DiscreteMask::from_binary(&mask),
        });
    }
    Ok(Dataset {
        height: h,
        width: w,
        classes: 2,
        samples,
        split: None,
        generator: Some(GeneratorInfo {
            seed,
            params: params.clone(),
        }),
    })
}

/// Seeded partition into validation, labeled and unlabeled sets.
///
/// `round(val_fraction·n)` images go to validation; of the rest,
/// `round(labeled_ratio·train)` are labeled, clamped to at least one.
pub fn split(n: usize, labeled_ratio: f64, val_fraction: f64, seed: u64) -> Result<SplitManifest, DataError> {
    if !(labeled_ratio > 0.0 && labeled_ratio <= 1.0) {
        return Err(DataError::InvalidArgument(format!(
            "labeled ratio must be in (0, 1], got {labeled_ratio}"
        )));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(DataError::InvalidArgument(format!(
            "validation fraction must be in [0, 1), got {val_fraction}"
        )));
    }
    let n_val = (val_fraction * n as f64).round() as usize;
    let train = n.saturating_sub(n_val);
    if train == 0 {
        return Err(DataError::InvalidArgument(format!("no training images left out of {n}")));
    }
    let mut n_labeled = (labeled_ratio * train as f64).round() as usize;
    if n_labeled == 0 {
        warn!("labeled ratio {labeled_ratio} of {train} training images rounds to 0; using 1");
        n_labeled = 1;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut RngState::new(seed));
    let mut validation = order[..n_val].to_vec();
    let mut labeled = order[n_val..n_val + n_labeled].to_vec();
    let mut unlabeled = order[n_val + n_labeled..].to_vec();
    validation.sort_unstable();
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    Ok(SplitManifest {
        labeled,
        unlabeled,
        validation,
    })
}

/// Attaches a fresh split to `ds`.
pub fn split_dataset(ds: &mut Dataset, labeled_ratio: f64, val_fraction: f64, seed: u64) -> Result<(), DataError> {
    ds.split = Some(split(ds.len(), labeled_ratio, val_fraction, seed)?);
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    format: String,
    count: usize,
    height: usize,
    width: usize,
    classes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    split: Option<SplitManifest>,
    #[serde(skip_serializing_if = "Option::is_none")]
    generator: Option<GeneratorInfo>,
}

fn sample_name(i: usize) -> String {
    format!("{i:05}.txt")
}

pub fn format_image(image: &Image) -> String {
    let mut out = format!("{} {} 1\n", image.height(), image.width());
    for row in image.as_slice().chunks(image.width()) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

pub fn format_mask(mask: &DiscreteMask) -> String {
    let mut out = format!("{} {} {}\n", mask.height(), mask.width(), mask.classes());
    for row in mask.labels().as_slice().chunks(mask.width()) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

/// Writes `ds` in the directory format, creating `dir` if needed.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<(), DataError> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    fs::create_dir_all(&masks).map_err(io_err(&masks))?;
    for (i, s) in ds.samples.iter().enumerate() {
        let p = images.join(sample_name(i));
        fs::write(&p, format_image(&s.image)).map_err(io_err(&p))?;
        let p = masks.join(sample_name(i));
        fs::write(&p, format_mask(&s.mask)).map_err(io_err(&p))?;
    }
    let manifest = ManifestFile {
        format: FORMAT_TAG.to_string(),
        count: ds.len(),
        height: ds.height,
        width: ds.width,
        classes: ds.classes,
        split: ds.split.clone(),
        generator: ds.generator.clone(),
    };
    let p = dir.join("manifest.toml");
    let text = toml::to_string(&manifest).map_err(|e| DataError::Manifest {
        path: p.clone(),
        message: e.to_string(),
    })?;
    fs::write(&p, text).map_err(io_err(&p))
}

struct GridText<T> {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<T>,
}

fn parse_grid<T: std::str::FromStr>(path: &Path, text: &str) -> Result<GridText<T>, DataError> {
    let err = |line: usize, column: usize, message: String| DataError::Parse {
        path: path.to_path_buf(),
        line,
        column,
        message,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| err(1, 1, "empty file".into()))?;
    let dims: Vec<&str> = header.split_whitespace().collect();
    if dims.len() != 3 {
        return Err(err(1, 1, format!("expected header `H W C`, got {header:?}")));
    }
    let mut parsed = [0usize; 3];
    for (slot, tok) in parsed.iter_mut().zip(&dims) {
        *slot = tok
            .parse()
            .map_err(|_| err(1, 1, format!("bad header value {tok:?}")))?;
    }
    let [height, width, channels] = parsed;
    if height == 0 || width == 0 || channels == 0 {
        return Err(err(1, 1, format!("non-positive header {header:?}")));
    }
    let mut values = Vec::with_capacity(height * width);
    for row in 0..height {
        let (idx, line) = lines
            .next()
            .ok_or_else(|| err(row + 2, 1, format!("truncated: expected {height} rows, found {row}")))?;
        let mut count = 0;
        let mut offset = 0;
        for tok in line.split(' ').filter(|t| !t.is_empty()) {
            let column = line[offset..].find(tok).map(|p| offset + p).unwrap_or(offset);
            offset = column + tok.len();
            let v = tok
                .parse::<T>()
                .map_err(|_| err(idx + 1, column + 1, format!("cannot parse {tok:?}")))?;
            values.push(v);
            count += 1;
        }
        if count != width {
            return Err(err(idx + 1, 1, format!("expected {width} values, found {count}")));
        }
    }
    if let Some((idx, line)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(err(idx + 1, 1, format!("unexpected trailing content {line:?}")));
    }
    Ok(GridText {
        height,
        width,
        channels,
        values,
    })
}

pub fn read_image(path: &Path) -> Result<Image, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let g = parse_grid::<f64>(path, &text)?;
    if g.channels != 1 {
        return Err(DataError::Parse {
            path: path.to_path_buf(),
            line: 1,
            column: 1,
            message: format!("images must have 1 channel, got {}", g.channels),
        });
    }
    if let Some(pos) = g.values.iter().position(|v| !v.is_finite()) {
        return Err(DataError::Parse {
            path: path.to_path_buf(),
            line: pos / g.width + 2,
            column: 1,
            message: "non-finite intensity".into(),
        });
    }
    Ok(Grid::from_vec(g.height, g.width, g.values)?)
}

pub fn read_mask(path: &Path) -> Result<DiscreteMask, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let g = parse_grid::<u32>(path, &text)?;
    DiscreteMask::new(Grid::from_vec(g.height, g.width, g.values)?, g.channels).map_err(|e| DataError::Parse {
        path: path.to_path_buf(),
        line: 1,
        column: 1,
        message: e.to_string(),
    })
}

/// Reads a dataset directory. Any malformed file aborts the whole read.
pub fn read_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let mpath = dir.join("manifest.toml");
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let manifest: ManifestFile = toml::from_str(&text).map_err(|e| {
        let (line, column) = e
            .span()
            .map(|s| {
                let before = &text[..s.start];
                let line = before.matches('\n').count() + 1;
                let column = s.start - before.rfind('\n').map(|p| p + 1).unwrap_or(0) + 1;
                (line, column)
            })
            .unwrap_or((1, 1));
        DataError::Parse {
            path: mpath.clone(),
            line,
            column,
            message: e.message().to_string(),
        }
    })?;
    let bad = |message: String| DataError::Manifest {
        path: mpath.clone(),
        message,
    };
    if manifest.format != FORMAT_TAG {
        return Err(bad(format!("unsupported format {:?}", manifest.format)));
    }
    if let Some(split) = &manifest.split {
        if !split.is_partition_of(manifest.count) {
            return Err(bad("split lists do not partition the sample indices".into()));
        }
    }
    let mut samples = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        let ipath = dir.join("images").join(sample_name(i));
        let image = read_image(&ipath)?;
        let kpath = dir.join("masks").join(sample_name(i));
        let mask = read_mask(&kpath)?;
        if image.shape() != (manifest.height, manifest.width) || mask.shape() != image.shape() {
            return Err(bad(format!(
                "sample {i} has image {:?} / mask {:?}, manifest says {}x{}",
                image.shape(),
                mask.shape(),
                manifest.height,
                manifest.width
            )));
        }
        if mask.classes() != manifest.classes {
            return Err(bad(format!(
                "sample {i} mask declares {} classes, manifest says {}",
                mask.classes(),
                manifest.classes
            )));
        }
        samples.push(Sample { image, mask });
    }
    Ok(Dataset {
        height: manifest.height,
        width: manifest.width,
        classes: manifest.classes,
        samples,
        split: manifest.split,
        generator: manifest.generator,
    })
}

fn sorted_txt_files(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();
    Ok(files)
}

/// Builds an unsplit dataset from externally prepared grid files: images and
/// masks in the grid text format, paired by sorted file name.
pub fn import_pairs(image_dir: &Path, mask_dir: &Path) -> Result<Dataset, DataError> {
    let images = sorted_txt_files(image_dir)?;
    let masks = sorted_txt_files(mask_dir)?;
    if images.is_empty() || images.len() != masks.len() {
        return Err(DataError::InvalidArgument(format!(
            "found {} images and {} masks",
            images.len(),
            masks.len()
        )));
    }
    let mut samples = Vec::with_capacity(images.len());
    for (ip, mp) in images.iter().zip(&masks) {
        samples.push(Sample {
            image: read_image(ip)?,
            mask: read_mask(mp)?,
        });
    }
    let (height, width) = samples[0].image.shape();
    let classes = samples[0].mask.classes();
    if samples
        .iter()
        .any(|s| s.image.shape() != (height, width) || s.mask.shape() != (height, width) || s.mask.classes() != classes)
    {
        return Err(DataError::InvalidArgument("imported grids disagree in shape or classes".into()));
    }
    Ok(Dataset {
        height,
        width,
        classes,
        samples,
        split: None,
        generator: None,
    })
}
