//! Independent reference implementations shared by the oracle and
//! acceptance tests.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use voxdet_core::boxes::{iou_3d, Box3D};

pub fn random_box(rng: &mut ChaCha8Rng, class_id: usize) -> Box3D {
    Box3D::new(
        [rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0)],
        [rng.gen_range(0.3..1.5), rng.gen_range(0.3..1.5), rng.gen_range(0.3..1.5)],
        class_id,
    )
}

/// Volume fractions by uniform sampling of the joint bounding region.
pub fn monte_carlo_iou(a: &Box3D, b: &Box3D, n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let (amin, amax, bmin, bmax) = (a.min(), a.max(), b.min(), b.max());
    let lo: [f64; 3] = std::array::from_fn(|i| amin[i].min(bmin[i]));
    let hi: [f64; 3] = std::array::from_fn(|i| amax[i].max(bmax[i]));
    let (mut inter, mut union) = (0usize, 0usize);
    for _ in 0..n {
        let p = [rng.gen_range(lo[0]..hi[0]), rng.gen_range(lo[1]..hi[1]), rng.gen_range(lo[2]..hi[2])];
        let (ia, ib) = (a.contains(&p), b.contains(&p));
        inter += (ia && ib) as usize;
        union += (ia || ib) as usize;
    }
    inter as f64 / union as f64
}

/// Checks every pair against a fixed order, no early exit.
pub fn brute_force_nms(boxes: &[Box3D], thresh: f64) -> Vec<usize> {
    let n = boxes.len();
    let mut rank: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in 0..n - 1 - i {
            let (a, b) = (rank[j], rank[j + 1]);
            let (sa, sb) = (boxes[a].score.unwrap(), boxes[b].score.unwrap());
            if sb > sa || (sb == sa && b < a) {
                rank.swap(j, j + 1);
            }
        }
    }
    let mut suppressed = vec![false; n];
    let mut kept = Vec::new();
    for (pos, &i) in rank.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(i);
        for &j in &rank[pos + 1..] {
            if boxes[j].class_id == boxes[i].class_id && iou_3d(&boxes[i], &boxes[j]) > thresh {
                suppressed[j] = true;
            }
        }
    }
    kept
}

/// Mean over true positives of the best precision at that rank or later.
pub fn oracle_ap(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let precision_at = |k: usize| tp[..=k].iter().filter(|&&t| t).count() as f64 / (k + 1) as f64;
    let mut total = 0.0;
    for k in 0..tp.len() {
        if tp[k] {
            total += (k..tp.len()).map(precision_at).fold(0.0, f64::max);
        }
    }
    total / num_gt as f64
}
