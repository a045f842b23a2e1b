use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn mask(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Mask {
    Mask::new(h, w, (0..h * w).map(|i| f(i / w, i % w)).collect()).unwrap()
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> Mask {
    Mask::new(h, w, (0..h * w).map(|_| rng.random_bool(p)).collect()).unwrap()
}

/// Counts and ratios computed from scratch.
fn overlap_oracle(p: &Mask, g: &Mask) -> (f64, f64) {
    let inter = p.bits.iter().zip(&g.bits).filter(|(a, b)| **a && **b).count();
    let union = p.bits.iter().zip(&g.bits).filter(|(a, b)| **a || **b).count();
    let (np, ng) = (p.count(), g.count());
    if np + ng == 0 {
        return (1.0, 1.0);
    }
    (2.0 * inter as f64 / (np + ng) as f64, inter as f64 / union as f64)
}

/// Boundary by explicit neighbour enumeration and all-pairs distances.
fn boundary_oracle(p: &Mask, g: &Mask) -> (f64, f64) {
    let edge = |m: &Mask| -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for r in 0..m.height as i64 {
            for c in 0..m.width as i64 {
                if !m.bits[(r * m.width as i64 + c) as usize] {
                    continue;
                }
                let mut bg = false;
                for dr in -1..=1i64 {
                    for dc in -1..=1i64 {
                        let (rr, cc) = (r + dr, c + dc);
                        let inside = rr >= 0 && cc >= 0 && rr < m.height as i64 && cc < m.width as i64;
                        if !inside || !m.bits[(rr * m.width as i64 + cc) as usize] {
                            bg = true;
                        }
                    }
                }
                if bg {
                    out.push((r as f64, c as f64));
                }
            }
        }
        out
    };
    let (a, b) = (edge(p), edge(g));
    let nearest = |x: &(f64, f64), set: &[(f64, f64)]| {
        set.iter()
            .map(|y| ((x.0 - y.0).powi(2) + (x.1 - y.1).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    let mut d: Vec<f64> = a.iter().map(|x| nearest(x, &b)).collect();
    d.extend(b.iter().map(|x| nearest(x, &a)));
    let asd = d.iter().sum::<f64>() / d.len() as f64;
    d.sort_by(f64::total_cmp);
    let pos = 0.95 * (d.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    (d[lo] + (d[hi] - d[lo]) * (pos - lo as f64), asd)
}

#[test]
fn identical_and_disjoint() {
    let p = mask(8, 8, |r, c| r < 4 && c > 2);
    let o = overlap_metrics(&p, &p).unwrap();
    assert_eq!(
        (o.dice, o.iou, o.acc, o.pre, o.sen, o.spe),
        (1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    );
    assert_eq!(boundary_metrics(&p, &p, 1.0).unwrap(), (0.0, 0.0));
    let q = mask(8, 8, |r, _| r >= 5);
    let o = overlap_metrics(&p, &q).unwrap();
    assert_eq!((o.dice, o.iou, o.pre, o.sen), (0.0, 0.0, 0.0, 0.0));
}

#[test]
fn hand_counted_half_grid() {
    let p = mask(4, 4, |_, c| c < 2);
    let g = mask(4, 4, |_, _| true);
    let o = overlap_metrics(&p, &g).unwrap();
    assert_eq!(o.dice, 2.0 / 3.0);
    assert_eq!(o.iou, 0.5);
    assert_eq!(o.acc, 0.5);
    assert_eq!(o.pre, 1.0);
    assert_eq!(o.sen, 0.5);
    // No true negatives and no false positives.
    assert_eq!(o.spe, 1.0);
}

#[test]
fn single_pixels_five_apart() {
    let p = mask(7, 12, |r, c| r == 3 && c == 2);
    let g = mask(7, 12, |r, c| r == 3 && c == 7);
    let (hd, asd) = boundary_metrics(&p, &g, 1.0).unwrap();
    assert_eq!((hd, asd), (5.0, 5.0));
    let (hd, asd) = boundary_metrics(&p, &g, 0.5).unwrap();
    assert_eq!((hd, asd), (2.5, 2.5));
}

#[test]
fn shifted_square_matches_exhaustive_pairs() {
    // 3x3 squares: everything but the centre is boundary, 16 points in all.
    let p = mask(10, 10, |r, c| (3..6).contains(&r) && (3..6).contains(&c));
    let g = mask(10, 10, |r, c| (3..6).contains(&r) && (4..7).contains(&c));
    let (hd, asd) = boundary_metrics(&p, &g, 1.0).unwrap();
    let (ohd, oasd) = boundary_oracle(&p, &g);
    assert!((hd - ohd).abs() <= 1e-12 && (asd - oasd).abs() <= 1e-12);
    // Per side, four points lie on the other boundary and four are one pixel off.
    assert_eq!(p.boundary().len() + g.boundary().len(), 16);
    assert!((asd - 0.5).abs() < 1e-12);
}

#[test]
fn empty_mask_conventions() {
    let e = mask(5, 5, |_, _| false);
    let f = mask(5, 5, |r, c| r == c);
    assert_eq!(boundary_metrics(&e, &e, 1.0).unwrap(), (0.0, 0.0));
    assert!(matches!(
        boundary_metrics(&e, &f, 1.0),
        Err(Error::UndefinedBoundary(_))
    ));
    assert!(matches!(
        boundary_metrics(&f, &e, 1.0),
        Err(Error::UndefinedBoundary(_))
    ));
    let o = overlap_metrics(&e, &e).unwrap();
    assert_eq!((o.dice, o.iou), (1.0, 1.0));
    let o = overlap_metrics(&e, &f).unwrap();
    assert_eq!((o.dice, o.iou), (0.0, 0.0));
    let m = class_metrics(&f, &e, 1.0).unwrap();
    assert_eq!((m.hd95, m.asd), (None, None));
}

#[test]
fn shape_mismatch_rejected() {
    let a = mask(4, 4, |_, _| true);
    let b = mask(4, 5, |_, _| true);
    assert!(overlap_metrics(&a, &b).is_err());
    assert!(boundary_metrics(&a, &b, 1.0).is_err());
    assert!(Mask::new(2, 2, vec![true; 3]).is_err());
}

#[test]
fn distance_map_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let h = rng.random_range(1..20);
        let w = rng.random_range(1..20);
        let n = rng.random_range(1..6);
        let seeds: Vec<(usize, usize)> = (0..n)
            .map(|_| (rng.random_range(0..h), rng.random_range(0..w)))
            .collect();
        let d = squared_distance_map(h, w, &seeds);
        for r in 0..h {
            for c in 0..w {
                let best = seeds
                    .iter()
                    .map(|&(a, b)| (r as f64 - a as f64).powi(2) + (c as f64 - b as f64).powi(2))
                    .fold(f64::INFINITY, f64::min);
                assert_eq!(d[r * w + c], best);
            }
        }
    }
    assert!(squared_distance_map(3, 3, &[]).iter().all(|v| v.is_infinite()));
}

#[test]
fn random_pairs_match_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let h = rng.random_range(1..=32);
        let w = rng.random_range(1..=32);
        let (fp, fg) = (rng.random_range(0.05..0.7), rng.random_range(0.05..0.7));
        let p = random_mask(&mut rng, h, w, fp);
        let g = random_mask(&mut rng, h, w, fg);
        let o = overlap_metrics(&p, &g).unwrap();
        assert_eq!((o.dice, o.iou), overlap_oracle(&p, &g));
        if p.is_empty() || g.is_empty() {
            continue;
        }
        let (hd, asd) = boundary_metrics(&p, &g, 1.0).unwrap();
        let (ohd, oasd) = boundary_oracle(&p, &g);
        assert!((hd - ohd).abs() <= 1e-9, "{hd} vs {ohd}");
        assert!((asd - oasd).abs() <= 1e-9, "{asd} vs {oasd}");
    }
}

#[test]
fn percentile_interpolates() {
    assert_eq!(percentile(&[4.0, 1.0, 3.0, 2.0, 0.0], 50.0), 2.0);
    assert_eq!(percentile(&[0.0, 10.0], 95.0), 9.5);
    assert_eq!(percentile(&[7.0], 95.0), 7.0);
}

#[test]
fn label_maps_and_summary() {
    let gt = vec![0, 1, 2, 3, 3, 3, 2, 1, 0];
    let pred = vec![0, 1, 2, 3, 3, 2, 2, 1, 1];
    let m = evaluate_labels(&pred, &gt, 3, 3, 4, 1.0).unwrap();
    assert_eq!(m.len(), 3);
    assert_eq!(m[0].dice, 0.8);
    assert_eq!(m[2].dice, 0.8);
    let fast = foreground_dice(&pred, &gt, 4);
    for (a, b) in fast.iter().zip(&m) {
        assert_eq!(*a, b.dice);
    }
    assert!(evaluate_labels(&pred[..8], &gt, 3, 3, 4, 1.0).is_err());

    let rows: Vec<MetricsRow> = m
        .iter()
        .enumerate()
        .map(|(i, &metrics)| MetricsRow {
            sample: 0,
            class: i as u8 + 1,
            metrics,
        })
        .collect();
    let csv = render_csv(&rows);
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with(CSV_HEADER));
    let s = summarize(&rows);
    assert_eq!(s.classes.len(), 3);
    assert!((s.mean_dice - (0.8 + m[1].dice + 0.8) / 3.0).abs() < 1e-15);
    let dir = tempfile::tempdir().unwrap();
    write_summary(&s, dir.path().join("s.json")).unwrap();
    let text = std::fs::read_to_string(dir.path().join("s.json")).unwrap();
    assert!(text.contains("\"mean_dice\""));
}

#[test]
fn undefined_rows_are_counted_not_averaged() {
    let base = ClassMetrics {
        dice: 0.5,
        iou: 0.3,
        hd95: Some(2.0),
        asd: Some(1.0),
        acc: 1.0,
        pre: 1.0,
        sen: 1.0,
        spe: 1.0,
    };
    let rows = vec![
        MetricsRow {
            sample: 0,
            class: 1,
            metrics: base,
        },
        MetricsRow {
            sample: 1,
            class: 1,
            metrics: ClassMetrics {
                dice: 0.0,
                hd95: None,
                asd: None,
                ..base
            },
        },
    ];
    let s = summarize(&rows);
    assert_eq!(s.classes[0].hd95, Some(2.0));
    assert_eq!(s.classes[0].undefined_boundary, 1);
    assert_eq!(s.classes[0].dice, 0.25);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn symmetric_and_bounded(seed in any::<u64>(), h in 1usize..12, w in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_mask(&mut rng, h, w, 0.4);
        let g = random_mask(&mut rng, h, w, 0.4);
        let a = overlap_metrics(&p, &g).unwrap();
        let b = overlap_metrics(&g, &p).unwrap();
        prop_assert_eq!(a.dice, b.dice);
        prop_assert_eq!(a.iou, b.iou);
        prop_assert!(a.iou <= a.dice);
        for v in [a.dice, a.iou, a.acc, a.pre, a.sen, a.spe] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if !p.is_empty() && !g.is_empty() {
            let x = boundary_metrics(&p, &g, 1.0).unwrap();
            let y = boundary_metrics(&g, &p, 1.0).unwrap();
            prop_assert_eq!(x.0, y.0);
            prop_assert!((x.1 - y.1).abs() <= 1e-12);
            prop_assert!(x.0 >= 0.0 && x.1 >= 0.0);
        }
    }

    #[test]
    fn losing_a_true_positive_never_raises_dice(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_mask(&mut rng, 8, 8, 0.5);
        let mut p = random_mask(&mut rng, 8, 8, 0.5);
        let before = overlap_metrics(&p, &g).unwrap().dice;
        if let Some(i) = (0..64).find(|&i| p.bits[i] && g.bits[i]) {
            p.bits[i] = false;
            prop_assert!(overlap_metrics(&p, &g).unwrap().dice <= before);
        }
    }
}
