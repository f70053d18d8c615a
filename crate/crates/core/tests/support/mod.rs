//! Independent oracles shared by the property suites and the acceptance target.
#![allow(dead_code)]

use std::path::Path;

use landmark_reid::config::RunConfig;
use landmark_reid::evalkit::EmbeddingRecord;
use landmark_reid::experiment::{ensure_synthetic, load_train_data};
use landmark_reid::geometry::Point2;
use landmark_reid::nn::Mat;
use landmark_reid::trainer::TrainData;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Dense convolution of the disk indicator with a truncated, normalized Gaussian,
/// evaluated on a padded grid and renormalized to a unit peak.
pub fn convolution_oracle(center: Point2, r: f64, sigma: f64, n: usize) -> Vec<f64> {
    let reach = (3.0 * sigma).floor() as i64;
    let pad = (r + 3.0 * sigma).ceil() as i64 + 2;
    let lo = -pad;
    let hi = n as i64 + pad;
    let mut kernel = Vec::new();
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            let d2 = (dx * dx + dy * dy) as f64;
            if d2 <= 9.0 * sigma * sigma {
                kernel.push((dx, dy, (-d2 / (2.0 * sigma * sigma)).exp()));
            }
        }
    }
    let norm: f64 = kernel.iter().map(|k| k.2).sum();
    let disk = |x: i64, y: i64| ((x as f64 - center.x).powi(2) + (y as f64 - center.y).powi(2) <= r * r) as u8 as f64;
    let w = (hi - lo) as usize;
    let mut full = vec![0.0; w * w];
    for y in lo..hi {
        for x in lo..hi {
            let v: f64 = kernel.iter().map(|&(dx, dy, k)| k * disk(x + dx, y + dy)).sum::<f64>() / norm;
            full[(y - lo) as usize * w + (x - lo) as usize] = v;
        }
    }
    let peak = full.iter().cloned().fold(0.0, f64::max);
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            out[y * n + x] = full[(y as i64 - lo) as usize * w + (x as i64 - lo) as usize] / peak;
        }
    }
    out
}

/// Visible-count distribution of sequential Bernoulli drops with a floor.
pub fn mla_oracle(visible: usize, floor: usize, p: f64) -> Vec<f64> {
    let mut dist = vec![0.0; visible + 1];
    dist[visible] = 1.0;
    for _ in 0..visible {
        let mut next = vec![0.0; visible + 1];
        for (count, &mass) in dist.iter().enumerate() {
            if count > floor {
                next[count - 1] += mass * p;
                next[count] += mass * (1.0 - p);
            } else {
                next[count] += mass;
            }
        }
        dist = next;
    }
    dist
}

pub fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat<f64> {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect())
}

pub fn pk_labels(p: usize, k: usize) -> Vec<usize> {
    (0..p).flat_map(|c| std::iter::repeat_n(c, k)).collect()
}

/// Relative error with an absolute floor for tiny gradients.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error between `grad` and central differences of `loss` at `x`.
pub fn max_fd_error(x: &Mat<f64>, grad: &Mat<f64>, loss: impl Fn(&Mat<f64>) -> f64) -> f64 {
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..x.data.len() {
        let mut xp = x.clone();
        xp.data[i] += h;
        let mut xm = x.clone();
        xm.data[i] -= h;
        let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
        worst = worst.max(rel_err(fd, grad.data[i]));
    }
    worst
}

/// Mean over anchors of the hinge on the hardest (positive, negative) pair, by enumeration.
pub fn brute_force_triplet(x: &Mat<f64>, labels: &[usize], margin: f64) -> f64 {
    let n = x.rows;
    let d = |i: usize, j: usize| -> f64 {
        x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().max(1e-12).sqrt()
    };
    let mut total = 0.0;
    for a in 0..n {
        let mut hardest = f64::NEG_INFINITY;
        for p in 0..n {
            for q in 0..n {
                if p != a && labels[p] == labels[a] && labels[q] != labels[a] {
                    hardest = hardest.max(d(a, p) - d(a, q));
                }
            }
        }
        total += (hardest + margin).max(0.0);
    }
    total / n as f64
}

pub fn matrix_oracle(m: [[f64; 3]; 3], p: Point2) -> Point2 {
    let x = m[0][0] * p.x + m[0][1] * p.y + m[0][2];
    let y = m[1][0] * p.x + m[1][1] * p.y + m[1][2];
    let w = m[2][0] * p.x + m[2][1] * p.y + m[2][2];
    Point2::new(x / w, y / w)
}

pub fn corners(size: f64) -> [Point2; 4] {
    [
        Point2::new(0.0, 0.0),
        Point2::new(size, 0.0),
        Point2::new(size, size),
        Point2::new(0.0, size),
    ]
}

pub fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

pub fn records(rng: &mut ChaCha8Rng, ids: &[usize], dim: usize) -> Vec<EmbeddingRecord> {
    ids.iter()
        .enumerate()
        .map(|(i, &id)| EmbeddingRecord {
            sample_id: i,
            identity: id.to_string(),
            embedding: unit(rng, dim),
        })
        .collect()
}

/// Gallery sample ids by ascending distance, ties to the lower id, via bubble sort.
pub fn sort_oracle(q: &[f32], gallery: &[EmbeddingRecord]) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = gallery
        .iter()
        .map(|g| {
            let d: f64 = q.iter().zip(&g.embedding).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
            (d.sqrt(), g.sample_id)
        })
        .collect();
    for i in 0..all.len() {
        for j in 0..all.len() - 1 - i {
            if all[j + 1].0 < all[j].0 || (all[j + 1].0 == all[j].0 && all[j + 1].1 < all[j].1) {
                all.swap(j, j + 1);
            }
        }
    }
    all.into_iter().map(|p| p.1).collect()
}

/// Top-1/5/10 chance rates for `n_ids` identities with `per_id` gallery images each,
/// estimated by drawing random rankings.
pub fn chance_monte_carlo(rng: &mut ChaCha8Rng, n_ids: usize, per_id: usize, trials: usize) -> [f64; 3] {
    use rand::seq::SliceRandom;
    let gallery_ids: Vec<usize> = (0..n_ids).flat_map(|i| std::iter::repeat_n(i, per_id)).collect();
    let mut hits = [0usize; 3];
    let mut order: Vec<usize> = (0..gallery_ids.len()).collect();
    for t in 0..trials {
        let id = t % n_ids;
        let (head, _) = order.partial_shuffle(rng, 10);
        let first = head.iter().position(|&g| gallery_ids[g] == id).unwrap_or(usize::MAX);
        for (h, k) in hits.iter_mut().zip([1, 5, 10]) {
            *h += (first < k) as usize;
        }
    }
    hits.map(|h| h as f64 / trials as f64)
}

/// Six identities at 64 px, a minimal small-residual network, one or two epochs per stage.
pub const TINY: &str = r#"
[synth]
n_identities = 6
image_size = 64
[model]
backbone = "small-residual"
embed_dim = 16
small_widths = [4, 8, 8, 16]
decoder_seed_channels = 8
decoder_channels = [8, 4, 4]
[trainer]
input_size = 32
p = 3
k = 2
warmup_epochs = 1
lr_milestones = []
eval_every = 1
[trainer.epochs]
s1a = 1
s1b = 2
s2a = 1
s2b = 1
"#;

/// The tiny configuration with its synthetic data generated under `root`.
pub fn tiny_run(root: &Path) -> (RunConfig, TrainData) {
    let mut cfg = RunConfig::from_toml(TINY).unwrap();
    cfg.data_root = root.join("data");
    let m = ensure_synthetic(&cfg, &cfg.data_root).unwrap();
    let data = load_train_data(&m, &cfg.data_root, cfg.trainer.input_size).unwrap();
    (cfg, data)
}
