//! Segmentation quality metrics: Dice overlap and the 95th-percentile
//! Hausdorff boundary distance.
//!
//! HD95 uses the combined-percentile variant: the two directed
//! nearest-boundary distance multisets (prediction→truth and
//! truth→prediction) are pooled and the 95th percentile is taken by the
//! nearest-rank rule. Distances are Euclidean, in pixels, computed with an
//! exact two-pass distance transform so large masks stay O(H·W).

use crate::data::Mask;
use crate::error::{Error, Result};

/// Dice and HD95 for one mask pair (or an average over classes).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricResult {
    pub dice: f64,
    pub hd95: f64,
}

/// Dice coefficient `2|P∩G| / (|P|+|G|)` for one class.
/// Both sides empty counts as a perfect 1.0.
pub fn dice(pred: &Mask, gt: &Mask, class: u8) -> Result<f64> {
    check_shapes(pred, gt)?;
    let mut p = 0u64;
    let mut g = 0u64;
    let mut both = 0u64;
    for (&a, &b) in pred.labels.iter().zip(&gt.labels) {
        let (ia, ib) = ((a == class) as u64, (b == class) as u64);
        p += ia;
        g += ib;
        both += ia & ib;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

/// 95th-percentile Hausdorff distance between the class boundaries of two
/// masks, in pixels. If exactly one side has no pixels of the class, the
/// image diagonal is returned as a finite worst case; if both are empty,
/// the distance is 0.
pub fn hd95(pred: &Mask, gt: &Mask, class: u8) -> Result<f64> {
    check_shapes(pred, gt)?;
    let bp = boundary(pred, class);
    let bg = boundary(gt, class);
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => {
            let (h, w) = (pred.h as f64, pred.w as f64);
            return Ok(((h - 1.0).powi(2) + (w - 1.0).powi(2)).sqrt());
        }
        _ => {}
    }
    let dist_to_gt = distance_field(pred.h, pred.w, &bg);
    let dist_to_pred = distance_field(pred.h, pred.w, &bp);
    let mut distances: Vec<f64> = bp
        .iter()
        .map(|&i| dist_to_gt[i].sqrt())
        .chain(bg.iter().map(|&i| dist_to_pred[i].sqrt()))
        .collect();
    distances.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((0.95 * distances.len() as f64).ceil() as usize).max(1);
    Ok(distances[rank - 1])
}

/// Macro-average of per-class Dice/HD95 over the foreground classes
/// `1..num_classes`, the form reported per round.
pub fn evaluate(pred: &Mask, gt: &Mask, num_classes: usize) -> Result<MetricResult> {
    if num_classes < 2 {
        return Err(Error::ClassCountMismatch(num_classes, 2));
    }
    let mut d = 0.0;
    let mut h = 0.0;
    for class in 1..num_classes {
        d += dice(pred, gt, class as u8)?;
        h += hd95(pred, gt, class as u8)?;
    }
    let k = (num_classes - 1) as f64;
    Ok(MetricResult { dice: d / k, hd95: h / k })
}

fn check_shapes(pred: &Mask, gt: &Mask) -> Result<()> {
    if pred.h != gt.h || pred.w != gt.w {
        return Err(Error::ShapeMismatch(format!(
            "masks {}x{} vs {}x{}",
            pred.h, pred.w, gt.h, gt.w
        )));
    }
    Ok(())
}

/// Indices of class pixels that touch a different class or the image edge
/// through 4-adjacency.
fn boundary(mask: &Mask, class: u8) -> Vec<usize> {
    let (h, w) = (mask.h, mask.w);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if mask.labels[i] != class {
                continue;
            }
            let edge = y == 0 || y == h - 1 || x == 0 || x == w - 1;
            let interior_break = !edge
                && (mask.labels[i - w] != class
                    || mask.labels[i + w] != class
                    || mask.labels[i - 1] != class
                    || mask.labels[i + 1] != class);
            if edge || interior_break {
                out.push(i);
            }
        }
    }
    out
}

const INF: f64 = 1e20;

/// Exact squared-Euclidean distance to the nearest site, for every grid
/// cell: one lower-envelope pass over rows, one over columns.
fn distance_field(h: usize, w: usize, sites: &[usize]) -> Vec<f64> {
    let mut field = vec![INF; h * w];
    for &i in sites {
        field[i] = 0.0;
    }
    let mut line = vec![0.0; w.max(h)];
    let mut out = vec![0.0; w.max(h)];
    for y in 0..h {
        line[..w].copy_from_slice(&field[y * w..(y + 1) * w]);
        dt_1d(&line[..w], &mut out[..w]);
        field[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    for x in 0..w {
        for y in 0..h {
            line[y] = field[y * w + x];
        }
        dt_1d(&line[..h], &mut out[..h]);
        for y in 0..h {
            field[y * w + x] = out[y];
        }
    }
    field
}

/// 1-D squared distance transform: `out[i] = min_j (i-j)^2 + f[j]`,
/// via the lower envelope of the parabolas rooted at each `j`.
fn dt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n]; // parabola roots in the envelope
    let mut z = vec![0.0f64; n + 1]; // envelope breakpoints
    let mut k = 0;
    z[0] = -INF;
    z[1] = INF;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = INF;
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        out[q] = d * d + f[v[k]];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mask(h: usize, w: usize, labels: Vec<u8>) -> Mask {
        Mask { h, w, labels }
    }

    fn square(h: usize, w: usize, y0: usize, x0: usize, side: usize) -> Mask {
        let mut labels = vec![0u8; h * w];
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                labels[y * w + x] = 1;
            }
        }
        mask(h, w, labels)
    }

    /// All-pairs directed-distance reference for hd95.
    fn hd95_brute(pred: &Mask, gt: &Mask, class: u8) -> f64 {
        let b = |m: &Mask| -> Vec<(f64, f64)> {
            super::boundary(m, class)
                .iter()
                .map(|&i| ((i / m.w) as f64, (i % m.w) as f64))
                .collect()
        };
        let (bp, bg) = (b(pred), b(gt));
        if bp.is_empty() && bg.is_empty() {
            return 0.0;
        }
        if bp.is_empty() || bg.is_empty() {
            return (((pred.h - 1) * (pred.h - 1) + (pred.w - 1) * (pred.w - 1)) as f64).sqrt();
        }
        let nearest = |from: &[(f64, f64)], to: &[(f64, f64)]| -> Vec<f64> {
            from.iter()
                .map(|&(y, x)| {
                    to.iter()
                        .map(|&(gy, gx)| ((y - gy).powi(2) + (x - gx).powi(2)).sqrt())
                        .fold(f64::INFINITY, f64::min)
                })
                .collect()
        };
        let mut all = nearest(&bp, &bg);
        all.extend(nearest(&bg, &bp));
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rank = ((0.95 * all.len() as f64).ceil() as usize).max(1);
        all[rank - 1]
    }

    #[test]
    fn dice_analytic_cases() {
        let a = square(8, 8, 1, 1, 2);
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);

        let b = square(8, 8, 5, 5, 2);
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.0);

        // |P| = |G| = 4 with overlap 2 -> 0.5.
        let p = mask(2, 4, vec![1, 1, 1, 1, 0, 0, 0, 0]);
        let g = mask(2, 4, vec![0, 0, 1, 1, 1, 1, 0, 0]);
        assert_eq!(dice(&p, &g, 1).unwrap(), 0.5);

        let empty = mask(2, 4, vec![0; 8]);
        assert_eq!(dice(&empty, &empty, 1).unwrap(), 1.0);
        assert_eq!(dice(&p, &empty, 1).unwrap(), 0.0);
    }

    #[test]
    fn dice_is_symmetric_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let labels: Vec<u8> = (0..64).map(|_| rng.gen_range(0..2)).collect();
        let p = mask(8, 8, labels.clone());
        let g = mask(8, 8, (0..64).map(|_| rng.gen_range(0..2)).collect());
        assert_eq!(dice(&p, &g, 1).unwrap(), dice(&g, &p, 1).unwrap());

        // Removing an overlap pixel can only reduce the score.
        let before = dice(&p, &p, 1).unwrap();
        let mut worse = labels;
        let hit = worse.iter().position(|&l| l == 1).unwrap();
        worse[hit] = 0;
        assert!(dice(&mask(8, 8, worse), &p, 1).unwrap() < before);
    }

    #[test]
    fn hd95_analytic_cases() {
        let a = square(12, 12, 2, 2, 4);
        assert_eq!(hd95(&a, &a, 1).unwrap(), 0.0);

        // Two single-pixel sets 3-4-5 apart.
        let mut p = mask(12, 12, vec![0; 144]);
        p.labels[2 * 12 + 2] = 1;
        let mut g = mask(12, 12, vec![0; 144]);
        g.labels[5 * 12 + 6] = 1;
        assert_eq!(hd95(&p, &g, 1).unwrap(), 5.0);

        // One side empty: finite image-diagonal sentinel.
        let empty = mask(12, 12, vec![0; 144]);
        let diag = (11.0f64 * 11.0 + 11.0 * 11.0).sqrt();
        assert_eq!(hd95(&p, &empty, 1).unwrap(), diag);
        assert_eq!(hd95(&empty, &empty, 1).unwrap(), 0.0);
    }

    #[test]
    fn hd95_matches_brute_force_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for case in 0..60 {
            // Mix dense random masks and sparse ones (empty sides included).
            let density = [0.5, 0.1, 0.02][case % 3];
            let gen = |rng: &mut ChaCha8Rng| {
                mask(16, 16, (0..256).map(|_| (rng.gen::<f64>() < density) as u8).collect())
            };
            let p = gen(&mut rng);
            let g = gen(&mut rng);
            let fast = hd95(&p, &g, 1).unwrap();
            let brute = hd95_brute(&p, &g, 1);
            assert!((fast - brute).abs() < 1e-9, "case {case}: {fast} vs {brute}");
        }
    }

    #[test]
    fn hd95_is_symmetric_and_translation_invariant() {
        let a = square(16, 16, 3, 3, 4);
        let b = square(16, 16, 6, 5, 5);
        assert_eq!(hd95(&a, &b, 1).unwrap(), hd95(&b, &a, 1).unwrap());

        let a2 = square(16, 16, 5, 6, 4);
        let b2 = square(16, 16, 8, 8, 5);
        assert!((hd95(&a, &b, 1).unwrap() - hd95(&a2, &b2, 1).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn evaluate_averages_foreground_classes() {
        let p = mask(2, 2, vec![0, 1, 2, 2]);
        let g = mask(2, 2, vec![0, 1, 2, 0]);
        let r = evaluate(&p, &g, 3).unwrap();
        let d1 = dice(&p, &g, 1).unwrap();
        let d2 = dice(&p, &g, 2).unwrap();
        assert!((r.dice - (d1 + d2) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let a = mask(2, 2, vec![0; 4]);
        let b = mask(2, 3, vec![0; 6]);
        assert!(matches!(dice(&a, &b, 1), Err(Error::ShapeMismatch(_))));
        assert!(matches!(hd95(&a, &b, 1), Err(Error::ShapeMismatch(_))));
    }
}
