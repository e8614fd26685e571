//! Gaussian-optimized vector codebooks built by seeded Lloyd iterations.
//!
//! Construction samples the standard `d`-dimensional normal and runs Lloyd's
//! algorithm over antipodal pairs `{c, −c}`: a sample assigned to `−c`
//! contributes `−x` to the update of `c`. Centroids are seeded with k-means++
//! on a prefix of the samples, assignment uses Hamerly distance bounds, and a
//! final pass pairs each codeword with its nearest negated partner so the
//! grid is closed under negation to the last bit.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::rng::{derive_seed, Stream};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Codebook {
    pub d: usize,
    pub n: usize,
    pub seed: u64,
    /// `n × d`, row-major.
    pub points: Vec<f32>,
    #[serde(skip)]
    search: OnceLock<SortedSearch>,
}

impl PartialEq for Codebook {
    fn eq(&self, other: &Self) -> bool {
        self.d == other.d
            && self.n == other.n
            && self.seed == other.seed
            && self.points == other.points
    }
}

impl Codebook {
    pub fn new(d: usize, n: usize, seed: u64, points: Vec<f32>) -> Self {
        assert_eq!(points.len(), n * d);
        Self {
            d,
            n,
            seed,
            points,
            search: OnceLock::new(),
        }
    }

    pub fn point(&self, i: usize) -> &[f32] {
        &self.points[i * self.d..(i + 1) * self.d]
    }

    /// Index of the closest codeword; ties resolve to the lowest index.
    #[inline]
    pub fn nearest(&self, v: &[f32]) -> usize {
        self.search
            .get_or_init(|| SortedSearch::new(&self.points, self.d))
            .nearest(v)
            .0
    }

    /// Exhaustive scan, kept as the reference for the pruned search.
    pub fn nearest_brute_force(&self, v: &[f32]) -> usize {
        let mut best = 0;
        let mut best_dist = f32::INFINITY;
        for (i, c) in self.points.chunks_exact(self.d).enumerate() {
            let dist = dist2(v, c);
            if dist < best_dist {
                best_dist = dist;
                best = i;
            }
        }
        best
    }

    pub fn code_bits(&self) -> u8 {
        self.n.trailing_zeros() as u8
    }
}

/// Codewords ordered by their first coordinate. A query walks outwards from
/// its own first coordinate and stops once that gap alone exceeds the
/// current bound.
#[derive(Clone, Debug)]
struct SortedSearch {
    d: usize,
    /// Original index of each sorted codeword.
    order: Vec<u32>,
    /// First coordinate of each sorted codeword.
    keys: Vec<f32>,
    /// Sorted codewords, `n × d`.
    points: Vec<f32>,
}

impl SortedSearch {
    fn new(points: &[f32], d: usize) -> Self {
        let n = points.len() / d;
        let mut order: Vec<u32> = (0..n as u32).collect();
        order.sort_by(|&a, &b| {
            points[a as usize * d]
                .total_cmp(&points[b as usize * d])
                .then(a.cmp(&b))
        });
        let mut sorted = Vec::with_capacity(points.len());
        for &i in &order {
            sorted.extend_from_slice(&points[i as usize * d..(i as usize + 1) * d]);
        }
        let keys = sorted.chunks_exact(d).map(|c| c[0]).collect();
        Self {
            d,
            order,
            keys,
            points: sorted,
        }
    }

    /// Returns `(index, best squared distance, second-best squared distance)`.
    /// Among equal distances the lowest original index wins.
    fn nearest(&self, v: &[f32]) -> (usize, f32, f32) {
        let d = self.d;
        let n = self.order.len();
        let key = v[0];
        let start = self.keys.partition_point(|&k| k < key);
        let (mut best, mut d1, mut d2) = (u32::MAX, f32::INFINITY, f32::INFINITY);
        let consider = |pos: usize, best: &mut u32, d1: &mut f32, d2: &mut f32| {
            let dist = dist2(v, &self.points[pos * d..(pos + 1) * d]);
            let idx = self.order[pos];
            if dist < *d1 || (dist == *d1 && idx < *best) {
                if *best != u32::MAX {
                    *d2 = *d1;
                }
                *d1 = dist;
                *best = idx;
            } else if dist < *d2 {
                *d2 = dist;
            }
        };
        let (mut lo, mut hi) = (start, start);
        let (mut lo_open, mut hi_open) = (lo > 0, hi < n);
        while lo_open || hi_open {
            if hi_open {
                let gap = self.keys[hi] - key;
                if gap * gap > d2 {
                    hi_open = false;
                } else {
                    consider(hi, &mut best, &mut d1, &mut d2);
                    hi += 1;
                    hi_open = hi < n;
                }
            }
            if lo_open {
                let gap = key - self.keys[lo - 1];
                if gap * gap > d2 {
                    lo_open = false;
                } else {
                    consider(lo - 1, &mut best, &mut d1, &mut d2);
                    lo -= 1;
                    lo_open = lo > 0;
                }
            }
        }
        (best as usize, d1, d2)
    }
}

/// Knobs for codebook construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LloydParams {
    pub samples: usize,
    pub max_iters: usize,
    /// Stop once no centroid moves farther than this.
    pub tol: f64,
}

impl Default for LloydParams {
    fn default() -> Self {
        Self {
            samples: 1 << 18,
            max_iters: 100,
            tol: 1e-4,
        }
    }
}

pub fn validate_grid(d: usize, n: usize) -> Result<()> {
    if !matches!(d, 1 | 2 | 4) {
        return config_err(format!("codebook dimension must be 1, 2 or 4, got {d}"));
    }
    if n < 2 {
        return config_err(format!("codebook needs at least 2 codewords, got {n}"));
    }
    if !n.is_power_of_two() || n > 256 {
        return config_err(format!(
            "codebook size must be a power of two <= 256, got {n}"
        ));
    }
    Ok(())
}

pub fn build_gaussian_codebook(d: usize, n: usize, seed: u64) -> Result<Codebook> {
    build_gaussian_codebook_with(d, n, seed, LloydParams::default())
}

/// Process-wide memoized [`build_gaussian_codebook`].
pub fn gaussian_codebook(d: usize, n: usize, seed: u64) -> Result<Arc<Codebook>> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize, u64), Arc<Codebook>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(cb) = cache.lock().unwrap().get(&(d, n, seed)) {
        return Ok(cb.clone());
    }
    // Built outside the lock; a concurrent duplicate build yields the same grid.
    let cb = Arc::new(build_gaussian_codebook(d, n, seed)?);
    Ok(cache
        .lock()
        .unwrap()
        .entry((d, n, seed))
        .or_insert(cb)
        .clone())
}

const SAMPLE_STREAM: u64 = 0x4342_5341; // "CBSA"
const INIT_STREAM: u64 = 0x4342_494E; // "CBIN"
const CHUNK: usize = 1 << 15;
const INIT_POOL: usize = 1 << 14;

pub fn build_gaussian_codebook_with(
    d: usize,
    n: usize,
    seed: u64,
    params: LloydParams,
) -> Result<Codebook> {
    validate_grid(d, n)?;
    if params.samples < n {
        return config_err("fewer samples than codewords");
    }
    let mut stream = Stream::new(derive_seed(seed, SAMPLE_STREAM));
    let mut xs = vec![0.0f32; params.samples * d];
    stream.fill_normal(&mut xs, 1.0);

    let half = kmeans_pp_init(&xs[..INIT_POOL.min(params.samples) * d], d, n / 2, seed);
    let half = lloyd_antipodal(&xs, d, half, params);
    let mut full = half.clone();
    full.extend(half.iter().map(|v| -v));
    Ok(Codebook::new(d, n, seed, symmetrize(&full, d, n)))
}

fn dist2(a: &[f32], b: &[f32]) -> f32 {
    let mut s = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        let t = x - y;
        s += t * t;
    }
    s
}

/// Squared distance to the nearer of `c` and `−c`.
fn antipodal_dist2(p: &[f32], c: &[f32]) -> f32 {
    let mut plus = 0.0f32;
    let mut minus = 0.0f32;
    for (x, y) in p.iter().zip(c) {
        plus += (x - y) * (x - y);
        minus += (x + y) * (x + y);
    }
    plus.min(minus)
}

/// k-means++ seeding of `m` antipodal pairs.
fn kmeans_pp_init(pool: &[f32], d: usize, m: usize, seed: u64) -> Vec<f32> {
    let count = pool.len() / d;
    let mut rng = Stream::new(derive_seed(seed, INIT_STREAM));
    let mut centers = Vec::with_capacity(m * d);
    let first = (rng.next_u64() % count as u64) as usize;
    centers.extend_from_slice(&pool[first * d..(first + 1) * d]);
    let mut best: Vec<f64> = pool
        .chunks_exact(d)
        .map(|p| antipodal_dist2(p, &centers[..d]) as f64)
        .collect();
    for _ in 1..m {
        let total: f64 = best.iter().sum();
        let mut target = rng.uniform() * total;
        let mut pick = count - 1;
        for (i, &w) in best.iter().enumerate() {
            if target < w {
                pick = i;
                break;
            }
            target -= w;
        }
        let c = pool[pick * d..(pick + 1) * d].to_vec();
        for (b, p) in best.iter_mut().zip(pool.chunks_exact(d)) {
            *b = b.min(antipodal_dist2(p, &c) as f64);
        }
        centers.extend_from_slice(&c);
    }
    centers
}

/// Lloyd's algorithm over the grid `{c_k} ∪ {−c_k}` with Hamerly bounds.
/// Cluster sums are maintained incrementally: each pass only touches the
/// samples whose assignment changed. Work is split into fixed chunks whose
/// deltas are reduced in chunk order, so the result does not depend on the
/// thread count.
fn lloyd_antipodal(xs: &[f32], d: usize, mut half: Vec<f32>, params: LloydParams) -> Vec<f32> {
    let m = half.len() / d;
    let n = 2 * m;
    let count = xs.len() / d;
    let mut assign = vec![u32::MAX; count];
    let mut upper = vec![0.0f32; count];
    let mut lower = vec![0.0f32; count];
    let mut half_sep = vec![0.0f32; n];
    let mut moves = vec![0.0f32; n];
    let mut max_move = 0.0f32;
    let mut sums = vec![0.0f64; m * d];
    let mut counts = vec![0i64; m];

    // Folds a codeword index onto its pair and the sign of the contribution.
    let fold = |j: usize| if j < m { (j, 1.0f64) } else { (j - m, -1.0f64) };

    for _ in 0..params.max_iters {
        let mut full = half.clone();
        full.extend(half.iter().map(|v| -v));
        for (j, s) in half_sep.iter_mut().enumerate() {
            let cj = &full[j * d..(j + 1) * d];
            *s = (0..n)
                .filter(|&k| k != j)
                .map(|k| dist2(cj, &full[k * d..(k + 1) * d]))
                .fold(f32::INFINITY, f32::min)
                .sqrt()
                * 0.5;
        }
        let search = SortedSearch::new(&full, d);
        let (full_ref, moves_ref, sep_ref) = (&full, &moves, &half_sep);
        let deltas: Vec<(Vec<f64>, Vec<i64>)> = xs
            .par_chunks(CHUNK * d)
            .zip(assign.par_chunks_mut(CHUNK))
            .zip(upper.par_chunks_mut(CHUNK))
            .zip(lower.par_chunks_mut(CHUNK))
            .map(|(((x, a), u), l)| {
                let mut ds = vec![0.0f64; m * d];
                let mut dc = vec![0i64; m];
                for (i, p) in x.chunks_exact(d).enumerate() {
                    let old = a[i];
                    if old != u32::MAX {
                        let cur = old as usize;
                        u[i] += moves_ref[cur];
                        l[i] -= max_move;
                        let bound = sep_ref[cur].max(l[i]);
                        if u[i] <= bound {
                            continue;
                        }
                        u[i] = dist2(p, &full_ref[cur * d..(cur + 1) * d]).sqrt();
                        if u[i] <= bound {
                            continue;
                        }
                    }
                    let (b, d1, d2) = search.nearest(p);
                    u[i] = d1.sqrt();
                    l[i] = d2.sqrt();
                    if b as u32 == old {
                        continue;
                    }
                    a[i] = b as u32;
                    if old != u32::MAX {
                        let (k, sign) = fold(old as usize);
                        dc[k] -= 1;
                        for (s, &v) in ds[k * d..(k + 1) * d].iter_mut().zip(p) {
                            *s -= sign * v as f64;
                        }
                    }
                    let (k, sign) = fold(b);
                    dc[k] += 1;
                    for (s, &v) in ds[k * d..(k + 1) * d].iter_mut().zip(p) {
                        *s += sign * v as f64;
                    }
                }
                (ds, dc)
            })
            .collect();
        for (ds, dc) in &deltas {
            sums.iter_mut().zip(ds).for_each(|(a, b)| *a += b);
            counts.iter_mut().zip(dc).for_each(|(a, b)| *a += b);
        }

        moves.fill(0.0);
        for k in 0..m {
            if counts[k] == 0 {
                continue;
            }
            let mut mv = 0.0f64;
            for t in 0..d {
                let new = sums[k * d + t] / counts[k] as f64;
                mv += (new - half[k * d + t] as f64).powi(2);
                half[k * d + t] = new as f32;
            }
            moves[k] = mv.sqrt() as f32;
            moves[k + m] = moves[k];
        }
        max_move = moves.iter().copied().fold(0.0f32, f32::max);
        if (max_move as f64) < params.tol {
            break;
        }
    }
    half
}

/// Greedily pairs codewords minimizing `||c_i + c_j||` and replaces each pair
/// with `±(c_i − c_j) / 2`.
fn symmetrize(centers: &[f32], d: usize, n: usize) -> Vec<f32> {
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let ci = &centers[i * d..(i + 1) * d];
            let cj = &centers[j * d..(j + 1) * d];
            let cost: f64 = ci
                .iter()
                .zip(cj)
                .map(|(a, b)| ((a + b) as f64).powi(2))
                .sum();
            pairs.push((cost, i, j));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used = vec![false; n];
    let mut out = centers.to_vec();
    for (_, i, j) in pairs {
        if used[i] || used[j] {
            continue;
        }
        used[i] = true;
        used[j] = true;
        for t in 0..d {
            let v = 0.5 * (centers[i * d + t] - centers[j * d + t]);
            out[i * d + t] = v;
            out[j * d + t] = -v;
        }
    }
    out
}
