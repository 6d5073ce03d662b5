//! Reference implementations used as test oracles. Deliberately naive.
#![allow(dead_code)]

use std::collections::VecDeque;

use cavat::grid::Coord;
use cavat::{BinaryMask, Grid, RngState};

pub fn random_mask(h: usize, w: usize, density: f64, rng: &mut RngState) -> BinaryMask {
    Grid::from_fn(h, w, |_, _| rng.uniform() < density)
}

fn neighbors4(h: usize, w: usize, (r, c): Coord) -> Vec<Coord> {
    let mut out = Vec::with_capacity(4);
    if r > 0 {
        out.push((r - 1, c));
    }
    if r + 1 < h {
        out.push((r + 1, c));
    }
    if c > 0 {
        out.push((r, c - 1));
    }
    if c + 1 < w {
        out.push((r, c + 1));
    }
    out
}

/// Grows a 4-connected blob of `size` pixels by attaching random neighbours.
pub fn connected_mask(h: usize, w: usize, size: usize, rng: &mut RngState) -> BinaryMask {
    let mut mask = Grid::filled(h, w, false);
    let start = (rng.below(h), rng.below(w));
    mask.as_mut_slice()[start.0 * w + start.1] = true;
    let mut members = vec![start];
    while members.len() < size.min(h * w) {
        let p = members[rng.below(members.len())];
        let nb = neighbors4(h, w, p);
        let q = nb[rng.below(nb.len())];
        let idx = q.0 * w + q.1;
        if !mask.as_slice()[idx] {
            mask.as_mut_slice()[idx] = true;
            members.push(q);
        }
    }
    mask
}

/// Breadth-first component of `seed` under 4-adjacency.
pub fn bfs_component(mask: &BinaryMask, seed: Coord) -> BinaryMask {
    let (h, w) = mask.shape();
    let mut seen = Grid::filled(h, w, false);
    let mut queue = VecDeque::from([seed]);
    seen.as_mut_slice()[seed.0 * w + seed.1] = true;
    while let Some(p) = queue.pop_front() {
        for q in neighbors4(h, w, p) {
            let idx = q.0 * w + q.1;
            if mask.as_slice()[idx] && !seen.as_slice()[idx] {
                seen.as_mut_slice()[idx] = true;
                queue.push_back(q);
            }
        }
    }
    seen
}

/// Number of set pixels in the centred `k × k` window, zero padded.
pub fn naive_box_count(mask: &BinaryMask, k: usize) -> Grid<u32> {
    let (h, w) = mask.shape();
    let half = (k / 2) as isize;
    Grid::from_fn(h, w, |r, c| {
        let mut n = 0;
        for dr in -half..=half {
            for dc in -half..=half {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w && mask[(rr as usize, cc as usize)] {
                    n += 1;
                }
            }
        }
        n
    })
}

/// Foreground pixels attaining the maximum `l × l` count.
pub fn seed_candidates(mask: &BinaryMask, l: usize) -> Vec<Coord> {
    let counts = naive_box_count(mask, l);
    let (h, w) = mask.shape();
    let fg: Vec<Coord> = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).filter(|&p| mask[p]).collect();
    let best = fg.iter().map(|&p| counts[p]).max().unwrap_or(0);
    fg.into_iter().filter(|&p| counts[p] == best).collect()
}

/// Reward map by composing BFS and naive window counts.
pub fn reward_oracle(mask: &BinaryMask, seed: Coord, k: usize) -> Grid<bool> {
    let component = bfs_component(mask, seed);
    let (h, w) = mask.shape();
    let stray = Grid::from_fn(h, w, |r, c| mask[(r, c)] && !component[(r, c)]);
    naive_box_count(&stray, k).map(|&n| n == 0)
}

/// Symmetric Hausdorff distance by exhaustive pairwise search.
pub fn brute_hausdorff(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let pts = |m: &BinaryMask| -> Vec<(f64, f64)> {
        let (h, w) = m.shape();
        (0..h)
            .flat_map(|r| (0..w).map(move |c| (r, c)))
            .filter(|&p| m[p])
            .map(|(r, c)| (r as f64, c as f64))
            .collect()
    };
    let (pa, pb) = (pts(a), pts(b));
    let directed = |x: &[(f64, f64)], y: &[(f64, f64)]| {
        x.iter()
            .map(|p| {
                y.iter()
                    .map(|q| (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2))
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0f64, f64::max)
    };
    directed(&pa, &pb).max(directed(&pb, &pa)).sqrt()
}

/// Relative error `‖a − b‖ / max(‖a‖, ‖b‖, tiny)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-300)
}
