//! Deterministic 2D grid primitives: dense grids, box-sum convolution,
//! flood fill, multinomial mask sampling and the seedable random stream
//! every stochastic operation in the crate draws from.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance on per-pixel class sums of a [`ProbMap`].
pub const PROB_SUM_TOLERANCE: f64 = 1e-6;

/// `(row, col)` pixel coordinate.
pub type Coord = (usize, usize);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid seed pixel {seed:?}: {reason}")]
    InvalidSeed { seed: Coord, reason: &'static str },
    #[error("invalid distribution at pixel {pixel}: {reason}")]
    InvalidDistribution { pixel: usize, reason: String },
}

/// Dense row-major `height × width` grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Grid {
            height,
            width,
            data: vec![value; height * width],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self, GridError> {
        if height == 0 || width == 0 {
            return Err(GridError::InvalidArgument(format!(
                "grid dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(GridError::InvalidArgument(format!(
                "expected {} values for a {height}x{width} grid, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Grid {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Grid {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, (r, c): Coord) -> Option<&T> {
        if r < self.height && c < self.width {
            Some(&self.data[r * self.width + c])
        } else {
            None
        }
    }

    pub fn index_of(&self, (r, c): Coord) -> usize {
        r * self.width + c
    }

    pub fn coord_of(&self, index: usize) -> Coord {
        (index / self.width, index % self.width)
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.shape() == other.shape()
    }
}

impl<T> Index<Coord> for Grid<T> {
    type Output = T;

    fn index(&self, (r, c): Coord) -> &T {
        assert!(r < self.height && c < self.width, "({r}, {c}) out of bounds");
        &self.data[r * self.width + c]
    }
}

impl<T> IndexMut<Coord> for Grid<T> {
    fn index_mut(&mut self, (r, c): Coord) -> &mut T {
        assert!(r < self.height && c < self.width, "({r}, {c}) out of bounds");
        &mut self.data[r * self.width + c]
    }
}

/// Real-valued intensity grid, the network input.
pub type Image = Grid<f64>;

/// Foreground/background view of a mask.
pub type BinaryMask = Grid<bool>;

impl Grid<f64> {
    pub fn zeros(height: usize, width: usize) -> Self {
        Grid::filled(height, width, 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Elementwise `self + scale * other`.
    pub fn add_scaled(&self, other: &Grid<f64>, scale: f64) -> Result<Grid<f64>, GridError> {
        if !self.same_shape(other) {
            return Err(GridError::InvalidArgument(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Grid {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + scale * b)
                .collect(),
        })
    }

    /// Zero mean, unit variance copy. Constant images are only centred.
    pub fn standardized(&self) -> Grid<f64> {
        let n = self.data.len() as f64;
        let mean = self.data.iter().sum::<f64>() / n;
        let var = self.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        let scale = if std > 0.0 { 1.0 / std } else { 1.0 };
        self.map(|v| (v - mean) * scale)
    }
}

impl Grid<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn foreground(&self) -> impl Iterator<Item = Coord> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| (i / self.width, i % self.width))
    }

    /// Pixels set in `self` but not in `other` (set difference, never negative).
    pub fn difference(&self, other: &BinaryMask) -> BinaryMask {
        debug_assert!(self.same_shape(other));
        Grid {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a && !b)
                .collect(),
        }
    }
}

/// Integer class labels, one per pixel, each below `classes`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMask {
    labels: Grid<u32>,
    classes: usize,
}

impl DiscreteMask {
    pub fn new(labels: Grid<u32>, classes: usize) -> Result<Self, GridError> {
        if classes < 2 {
            return Err(GridError::InvalidArgument(format!(
                "a mask needs at least 2 classes, got {classes}"
            )));
        }
        if let Some(bad) = labels.as_slice().iter().find(|&&l| l as usize >= classes) {
            return Err(GridError::InvalidArgument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(DiscreteMask { labels, classes })
    }

    /// Two-class mask from a foreground view (foreground = label 1).
    pub fn from_binary(mask: &BinaryMask) -> Self {
        DiscreteMask {
            labels: mask.map(|&b| b as u32),
            classes: 2,
        }
    }

    pub fn labels(&self) -> &Grid<u32> {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn shape(&self) -> (usize, usize) {
        self.labels.shape()
    }

    pub fn height(&self) -> usize {
        self.labels.height()
    }

    pub fn width(&self) -> usize {
        self.labels.width()
    }

    /// Designated class against the rest.
    pub fn binary(&self, foreground: u32) -> BinaryMask {
        self.labels.map(|&l| l == foreground)
    }
}

/// Per-pixel categorical distributions, stored pixel-major (`C` values per pixel).
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    classes: usize,
    data: Vec<f64>,
}

impl ProbMap {
    /// Validates shape, range and per-pixel normalization.
    pub fn new(height: usize, width: usize, classes: usize, data: Vec<f64>) -> Result<Self, GridError> {
        let map = Self::new_unchecked(height, width, classes, data)?;
        map.validate()?;
        Ok(map)
    }

    pub(crate) fn new_unchecked(
        height: usize,
        width: usize,
        classes: usize,
        data: Vec<f64>,
    ) -> Result<Self, GridError> {
        if height == 0 || width == 0 || classes < 2 {
            return Err(GridError::InvalidArgument(format!(
                "invalid probability map shape {height}x{width}x{classes}"
            )));
        }
        if data.len() != height * width * classes {
            return Err(GridError::InvalidArgument(format!(
                "expected {} values, got {}",
                height * width * classes,
                data.len()
            )));
        }
        Ok(ProbMap {
            height,
            width,
            classes,
            data,
        })
    }

    /// Same distribution at every pixel.
    pub fn uniform(height: usize, width: usize, classes: usize) -> Self {
        ProbMap {
            height,
            width,
            classes,
            data: vec![1.0 / classes as f64; height * width * classes],
        }
    }

    /// Probability 1 on each pixel's label.
    pub fn one_hot(mask: &DiscreteMask) -> Self {
        let c = mask.classes();
        let mut data = vec![0.0; mask.labels().len() * c];
        for (i, &l) in mask.labels().as_slice().iter().enumerate() {
            data[i * c + l as usize] = 1.0;
        }
        ProbMap {
            height: mask.height(),
            width: mask.width(),
            classes: c,
            data,
        }
    }

    pub fn validate(&self) -> Result<(), GridError> {
        for (i, row) in self.data.chunks_exact(self.classes).enumerate() {
            if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(GridError::InvalidDistribution {
                    pixel: i,
                    reason: format!("value {v} outside [0, 1]"),
                });
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
                return Err(GridError::InvalidDistribution {
                    pixel: i,
                    reason: format!("class values sum to {sum}"),
                });
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Class distribution at a flat pixel index.
    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * self.classes..(index + 1) * self.classes]
    }

    pub fn prob(&self, index: usize, class: usize) -> f64 {
        self.data[index * self.classes + class]
    }

    /// Most probable class per pixel; ties resolve to the lowest class id.
    pub fn argmax(&self) -> DiscreteMask {
        let labels = self
            .data
            .chunks_exact(self.classes)
            .map(|row| {
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best as u32
            })
            .collect();
        DiscreteMask {
            labels: Grid {
                height: self.height,
                width: self.width,
                data: labels,
            },
            classes: self.classes,
        }
    }
}

/// Pixel adjacency used by every connectivity computation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Adjacency {
    #[default]
    #[serde(rename = "4")]
    Four,
    #[serde(rename = "8")]
    Eight,
}

impl Adjacency {
    pub fn offsets(self) -> &'static [(isize, isize)] {
        const FOUR: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
        const EIGHT: [(isize, isize); 8] = [
            (-1, -1),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1),
        ];
        match self {
            Adjacency::Four => &FOUR,
            Adjacency::Eight => &EIGHT,
        }
    }

    /// In-bounds neighbours of `p` in a `height × width` grid.
    pub fn neighbors(
        self,
        (r, c): Coord,
        height: usize,
        width: usize,
    ) -> impl Iterator<Item = Coord> {
        self.offsets().iter().filter_map(move |&(dr, dc)| {
            let nr = r.checked_add_signed(dr)?;
            let nc = c.checked_add_signed(dc)?;
            (nr < height && nc < width).then_some((nr, nc))
        })
    }
}

impl fmt::Display for Adjacency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Adjacency::Four => write!(f, "4"),
            Adjacency::Eight => write!(f, "8"),
        }
    }
}

impl std::str::FromStr for Adjacency {
    type Err = GridError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "4" => Ok(Adjacency::Four),
            "8" => Ok(Adjacency::Eight),
            other => Err(GridError::InvalidArgument(format!(
                "adjacency must be 4 or 8, got {other:?}"
            ))),
        }
    }
}

fn check_window(height: usize, width: usize, window: usize) -> Result<(), GridError> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(GridError::InvalidArgument(format!(
            "box window must be odd and positive, got {window}"
        )));
    }
    if window > height.min(width) {
        return Err(GridError::InvalidArgument(format!(
            "box window {window} exceeds grid {height}x{width}"
        )));
    }
    Ok(())
}

/// Separable zero-padded sliding-window sum. `T` is the accumulator type.
fn box_sum_separable<T>(values: &[T], height: usize, width: usize, window: usize) -> Vec<T>
where
    T: Copy + Default + std::ops::AddAssign + std::ops::SubAssign,
{
    let half = window / 2;
    let mut rows = vec![T::default(); values.len()];
    for r in 0..height {
        let line = &values[r * width..(r + 1) * width];
        let out = &mut rows[r * width..(r + 1) * width];
        let mut acc = T::default();
        for &v in &line[..half.min(width)] {
            acc += v;
        }
        for c in 0..width {
            if c + half < width {
                acc += line[c + half];
            }
            out[c] = acc;
            if c >= half {
                acc -= line[c - half];
            }
        }
    }
    let mut out = vec![T::default(); values.len()];
    for c in 0..width {
        let mut acc = T::default();
        for r in 0..half.min(height) {
            acc += rows[r * width + c];
        }
        for r in 0..height {
            if r + half < height {
                acc += rows[(r + half) * width + c];
            }
            out[r * width + c] = acc;
            if r >= half {
                acc -= rows[(r - half) * width + c];
            }
        }
    }
    out
}

/// Sum over the `window × window` neighbourhood centred on each pixel,
/// zero-padded at the borders. Integer-valued inputs give exact integer
/// outputs (below 2^53).
pub fn box_sum(input: &Grid<f64>, window: usize) -> Result<Grid<f64>, GridError> {
    check_window(input.height, input.width, window)?;
    let data = box_sum_separable(&input.data, input.height, input.width, window);
    Ok(Grid {
        height: input.height,
        width: input.width,
        data,
    })
}

/// Foreground count in each `window × window` neighbourhood.
pub fn box_count(mask: &BinaryMask, window: usize) -> Result<Grid<u32>, GridError> {
    check_window(mask.height, mask.width, window)?;
    let ones: Vec<i64> = mask.data.iter().map(|&b| b as i64).collect();
    let data = box_sum_separable(&ones, mask.height, mask.width, window)
        .into_iter()
        .map(|v| v as u32)
        .collect();
    Ok(Grid {
        height: mask.height,
        width: mask.width,
        data,
    })
}

/// Membership grid of the connected foreground component containing `seed`.
pub fn flood_fill_mask(
    mask: &BinaryMask,
    seed: Coord,
    adjacency: Adjacency,
) -> Result<BinaryMask, GridError> {
    match mask.get(seed) {
        None => {
            return Err(GridError::InvalidSeed {
                seed,
                reason: "outside the grid",
            })
        }
        Some(false) => {
            return Err(GridError::InvalidSeed {
                seed,
                reason: "on background",
            })
        }
        Some(true) => {}
    }
    let (h, w) = mask.shape();
    let mut component = Grid::filled(h, w, false);
    let mut stack = vec![seed];
    component[seed] = true;
    while let Some(p) = stack.pop() {
        for q in adjacency.neighbors(p, h, w) {
            if mask[q] && !component[q] {
                component[q] = true;
                stack.push(q);
            }
        }
    }
    Ok(component)
}

/// Pixels of the connected foreground component containing `seed`, in
/// row-major order.
pub fn flood_fill(mask: &BinaryMask, seed: Coord, adjacency: Adjacency) -> Result<Vec<Coord>, GridError> {
    Ok(flood_fill_mask(mask, seed, adjacency)?.foreground().collect())
}

/// True when the foreground forms a single component (or is empty).
pub fn is_connected(mask: &BinaryMask, adjacency: Adjacency) -> bool {
    match mask.foreground().next() {
        None => true,
        Some(seed) => {
            let component = flood_fill_mask(mask, seed, adjacency).expect("seed is foreground");
            component.count() == mask.count()
        }
    }
}

/// Draws every pixel's label independently from its categorical distribution.
pub fn sample_mask(p: &ProbMap, rng: &mut RngState) -> Result<DiscreteMask, GridError> {
    p.validate()?;
    Ok(sample_mask_unchecked(p, rng))
}

pub(crate) fn sample_mask_unchecked(p: &ProbMap, rng: &mut RngState) -> DiscreteMask {
    let labels = p
        .data
        .chunks_exact(p.classes)
        .map(|row| {
            let u = rng.uniform();
            let mut acc = 0.0;
            for (c, &v) in row.iter().enumerate() {
                acc += v;
                if u < acc {
                    return c as u32;
                }
            }
            // u landed in the rounding gap above the cumulative sum.
            row.iter().rposition(|&v| v > 0.0).unwrap_or(row.len() - 1) as u32
        })
        .collect();
    DiscreteMask {
        labels: Grid {
            height: p.height,
            width: p.width,
            data: labels,
        },
        classes: p.classes,
    }
}

/// Seedable, platform-independent random stream (ChaCha8).
///
/// Independent streams are obtained with [`RngState::derive`], which mixes
/// the parent seed with a tag; it never advances the parent.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 32-bit words consumed so far.
    pub fn position(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// Fresh stream keyed on this stream's seed and `tag`.
    pub fn derive(&self, tag: u64) -> RngState {
        RngState::new(splitmix64(self.seed ^ splitmix64(tag)))
    }

    /// Stream keyed on a path of tags, e.g. `[step, example, purpose]`.
    pub fn derive_path(&self, tags: &[u64]) -> RngState {
        tags.iter().fold(self.clone(), |acc, &t| acc.derive(t))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn gen_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }
}

impl RngCore for RngState {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeSet, VecDeque};

    fn naive_box_sum(values: &Grid<f64>, window: usize) -> Grid<f64> {
        let half = (window / 2) as isize;
        let (h, w) = values.shape();
        Grid::from_fn(h, w, |r, c| {
            let mut s = 0.0;
            for dr in -half..=half {
                for dc in -half..=half {
                    let (rr, cc) = (r as isize + dr, c as isize + dc);
                    if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                        s += values[(rr as usize, cc as usize)];
                    }
                }
            }
            s
        })
    }

    fn bfs_component(mask: &BinaryMask, seed: Coord, adjacency: Adjacency) -> BTreeSet<Coord> {
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([seed]);
        seen.insert(seed);
        let deltas: Vec<(isize, isize)> = match adjacency {
            Adjacency::Four => vec![(0, 1), (1, 0), (0, -1), (-1, 0)],
            Adjacency::Eight => (-1..=1)
                .flat_map(|a| (-1..=1).map(move |b| (a, b)))
                .filter(|&d| d != (0, 0))
                .collect(),
        };
        while let Some((r, c)) = queue.pop_front() {
            for &(dr, dc) in &deltas {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if rr < 0 || cc < 0 || rr as usize >= mask.height() || cc as usize >= mask.width() {
                    continue;
                }
                let q = (rr as usize, cc as usize);
                if mask[q] && seen.insert(q) {
                    queue.push_back(q);
                }
            }
        }
        seen
    }

    fn random_mask(rng: &mut RngState, h: usize, w: usize, density: f64) -> BinaryMask {
        Grid::from_fn(h, w, |_, _| rng.uniform() < density)
    }

    #[test]
    fn box_sum_of_ones() {
        let out = box_sum(&Grid::filled(5, 5, 1.0), 3).unwrap();
        assert_eq!(out[(2, 2)], 9.0);
        assert_eq!(out[(0, 0)], 4.0);
        assert_eq!(out[(4, 4)], 4.0);
        assert_eq!(out[(0, 2)], 6.0);
    }

    #[test]
    fn box_sum_kernel_support() {
        let mut g = Grid::zeros(5, 5);
        g[(2, 2)] = 1.0;
        let out = box_sum(&g, 3).unwrap();
        for r in 0..5 {
            for c in 0..5 {
                let inside = (1..=3).contains(&r) && (1..=3).contains(&c);
                assert_eq!(out[(r, c)], if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn box_sum_matches_naive_oracle() {
        let mut rng = RngState::new(7);
        for _ in 0..200 {
            let g = Grid::from_fn(4, 4, |_, _| (rng.uniform() < 0.5) as u8 as f64);
            assert_eq!(box_sum(&g, 3).unwrap(), naive_box_sum(&g, 3));
            let b = g.map(|&v| v == 1.0);
            let counts = box_count(&b, 3).unwrap();
            assert_eq!(counts.map(|&v| v as f64), naive_box_sum(&g, 3));
        }
        for window in [1, 3, 5, 7] {
            let g = Grid::from_fn(9, 12, |_, _| (rng.below(7) as f64) - 3.0);
            assert_eq!(box_sum(&g, window).unwrap(), naive_box_sum(&g, window));
        }
    }

    #[test]
    fn box_sum_rejects_bad_windows() {
        let g = Grid::zeros(4, 4);
        assert!(matches!(box_sum(&g, 2), Err(GridError::InvalidArgument(_))));
        assert!(matches!(box_sum(&g, 0), Err(GridError::InvalidArgument(_))));
        assert!(matches!(box_sum(&g, 5), Err(GridError::InvalidArgument(_))));
    }

    #[test]
    fn flood_fill_singleton_and_diagonal() {
        let mut m = Grid::filled(3, 3, false);
        m[(1, 1)] = true;
        assert_eq!(flood_fill(&m, (1, 1), Adjacency::Four).unwrap(), vec![(1, 1)]);

        let mut m = Grid::filled(3, 3, false);
        m[(0, 0)] = true;
        m[(1, 1)] = true;
        assert_eq!(flood_fill(&m, (0, 0), Adjacency::Four).unwrap(), vec![(0, 0)]);
        assert_eq!(
            flood_fill(&m, (0, 0), Adjacency::Eight).unwrap(),
            vec![(0, 0), (1, 1)]
        );
    }

    #[test]
    fn flood_fill_rejects_bad_seeds() {
        let m = Grid::filled(3, 3, false);
        assert!(matches!(
            flood_fill(&m, (1, 1), Adjacency::Four),
            Err(GridError::InvalidSeed { .. })
        ));
        assert!(matches!(
            flood_fill(&m, (3, 0), Adjacency::Four),
            Err(GridError::InvalidSeed { .. })
        ));
    }

    #[test]
    fn flood_fill_matches_bfs_oracle() {
        let mut rng = RngState::new(11);
        for i in 0..1000 {
            let density = 0.3 + 0.4 * rng.uniform();
            let m = random_mask(&mut rng, 16, 16, density);
            let fg: Vec<Coord> = m.foreground().collect();
            if fg.is_empty() {
                continue;
            }
            let seed = fg[rng.below(fg.len())];
            let adjacency = if i % 2 == 0 { Adjacency::Four } else { Adjacency::Eight };
            let got: BTreeSet<Coord> = flood_fill(&m, seed, adjacency).unwrap().into_iter().collect();
            assert_eq!(got, bfs_component(&m, seed, adjacency));
        }
    }

    #[test]
    fn sample_mask_degenerate_and_frequency() {
        let mut labels = Grid::filled(4, 5, 1u32);
        labels[(0, 0)] = 1;
        let one_hot = ProbMap::one_hot(&DiscreteMask::new(labels.clone(), 3).unwrap());
        let mut rng = RngState::new(3);
        let s = sample_mask(&one_hot, &mut rng).unwrap();
        assert_eq!(s.labels(), &labels);

        let p = ProbMap::uniform(1, 1, 2);
        let mut rng = RngState::new(5);
        let n = 10_000;
        let fg = (0..n)
            .filter(|_| sample_mask(&p, &mut rng).unwrap().labels()[(0, 0)] == 1)
            .count();
        let freq = fg as f64 / n as f64;
        assert!((0.48..=0.52).contains(&freq), "frequency {freq}");
    }

    #[test]
    fn sample_mask_is_deterministic() {
        let p = ProbMap::new(1, 3, 2, vec![0.2, 0.8, 0.5, 0.5, 0.9, 0.1]).unwrap();
        let a = sample_mask(&p, &mut RngState::new(42)).unwrap();
        let b = sample_mask(&p, &mut RngState::new(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_mask_rejects_unnormalized() {
        let p = ProbMap::new_unchecked(1, 1, 2, vec![0.5, 0.6]).unwrap();
        assert!(matches!(
            sample_mask(&p, &mut RngState::new(0)),
            Err(GridError::InvalidDistribution { .. })
        ));
        assert!(ProbMap::new(1, 1, 2, vec![0.5, 0.5 + 5e-7]).is_ok());
    }

    #[test]
    fn sample_mask_marginals_converge() {
        let probs = [0.05, 0.3, 0.5, 0.77, 0.99, 0.0];
        let data: Vec<f64> = probs.iter().flat_map(|&q| [1.0 - q, q]).collect();
        let p = ProbMap::new(2, 3, 2, data).unwrap();
        let mut rng = RngState::new(9);
        let n = 20_000;
        let mut counts = [0usize; 6];
        for _ in 0..n {
            let s = sample_mask(&p, &mut rng).unwrap();
            for (i, &l) in s.labels().as_slice().iter().enumerate() {
                counts[i] += l as usize;
            }
        }
        for (i, &q) in probs.iter().enumerate() {
            let freq = counts[i] as f64 / n as f64;
            let bound = 3.0 * (q * (1.0 - q) / n as f64).sqrt();
            assert!((freq - q).abs() <= bound.max(1e-12), "pixel {i}: {freq} vs {q}");
        }
    }

    #[test]
    fn derived_streams_are_independent_of_parent_position() {
        let mut a = RngState::new(1);
        let child = a.derive(5);
        a.uniform();
        let child2 = a.derive(5);
        let (mut c1, mut c2) = (child, child2);
        assert_eq!(c1.uniform(), c2.uniform());
        assert_ne!(RngState::new(1).derive(5).uniform(), RngState::new(1).derive(6).uniform());
    }

    #[test]
    fn standardized_has_unit_moments() {
        let mut rng = RngState::new(2);
        let img = Grid::from_fn(8, 8, |_, _| 3.0 + 2.0 * rng.normal());
        let z = img.standardized();
        let n = z.len() as f64;
        let mean = z.as_slice().iter().sum::<f64>() / n;
        let var = z.as_slice().iter().map(|v| v * v).sum::<f64>() / n;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }
}
