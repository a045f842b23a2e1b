use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::testutil::{assert_grads, fd_pair, normwise_err};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_map(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap<f64> {
    FeatureMap::new(Tensor::randn(vec![h, w, c], 1.0, &mut rng(seed))).unwrap()
}

fn mirrored_map(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap<f64> {
    let base = Tensor::<f64>::randn(vec![h, w, c], 1.0, &mut rng(seed));
    let mut t = base.clone();
    for r in 0..h {
        for col in w / 2..w {
            for k in 0..c {
                let v = base.data()[(r * w + (w - 1 - col)) * c + k];
                t.data_mut()[(r * w + col) * c + k] = v;
            }
        }
    }
    FeatureMap::new(t).unwrap()
}

/// Direct evaluation of the aggregation rule, position by position.
fn ppm_oracle(f: &FeatureMap<f64>, theta: f64, radius: usize, eps: f64) -> Vec<f64> {
    let (h, w, c) = (f.height(), f.width(), f.channels());
    let mut out = vec![0.0; h * w * c];
    for r in 0..h {
        for col in 0..w {
            let mut num = vec![0.0; c];
            let mut den = 0.0;
            for rr in 0..h {
                for cc in 0..w {
                    let near = rr.abs_diff(r) <= radius && cc.abs_diff(col) <= radius && (rr, cc) != (r, col);
                    let mirror = rr == r && cc == w - 1 - col;
                    if !(near || mirror) {
                        continue;
                    }
                    let (a, b) = (f.token(r, col), f.token(rr, cc));
                    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let s = if na < 1e-8 || nb < 1e-8 {
                        0.0
                    } else {
                        (dot / (na * nb)).clamp(-1.0, 1.0)
                    };
                    if s < theta {
                        den += 1.0 - s;
                        for k in 0..c {
                            num[k] += (1.0 - s) * b[k];
                        }
                    }
                }
            }
            for k in 0..c {
                out[(r * w + col) * c + k] = num[k] / (den + eps);
            }
        }
    }
    out
}

fn cfg(theta: f64, radius: usize) -> PpmConfig {
    PpmConfig {
        theta,
        neighborhood_radius: radius,
        ..PpmConfig::default()
    }
}

#[test]
fn mirror_index_examples() {
    assert_eq!(symmetric_index((3, 0), 8, 8).unwrap(), (3, 7));
    assert_eq!(symmetric_index((2, 3), 5, 7).unwrap(), (2, 3));
    for c in 0..8 {
        let m = symmetric_index((1, c), 4, 8).unwrap();
        assert_eq!(symmetric_index(m, 4, 8).unwrap(), (1, c));
    }
    assert!(symmetric_index((4, 0), 4, 8).is_err());
    assert!(symmetric_index((0, 8), 4, 8).is_err());
}

#[test]
fn cosine_examples() {
    let a = [0.3f64, -1.2, 2.0];
    let b = [1.0, 0.5, -0.25];
    assert!((cosine_similarity(&a, &a) - 1.0).abs() < 1e-15);
    let neg: Vec<f64> = a.iter().map(|x| -x).collect();
    assert!((cosine_similarity(&a, &neg) + 1.0).abs() < 1e-15);
    let a2: Vec<f64> = a.iter().map(|x| 2.0 * x).collect();
    let b3: Vec<f64> = b.iter().map(|x| 3.0 * x).collect();
    assert!((cosine_similarity(&a2, &b3) - cosine_similarity(&a, &b)).abs() < 1e-15);
    assert_eq!(cosine_similarity(&[0.0, 0.0, 0.0], &b), 0.0);
}

#[test]
fn targets_cover_window_and_mirror() {
    let t = comparison_targets(4, 6, 1);
    // Corner: 3 neighbours plus the mirror in the opposite corner.
    assert_eq!(t[0], vec![1, 6, 7, 5]);
    // Interior token next to the midline: the mirror is already a neighbour.
    assert_eq!(t[6 + 2].len(), 8);
    assert!(t[6 + 2].contains(&(6 + 3)));
    assert_eq!(comparison_targets(3, 5, 0)[7], vec![7]);
}

#[test]
fn symmetric_map_has_no_anomalies() {
    for (w, seed) in [(8, 1), (7, 2)] {
        let f = mirrored_map(6, w, 4, seed);
        for theta in [0.99, 0.5, -0.3, 0.999_999] {
            let z = ppm_forward(&f, &cfg(theta, 0)).unwrap();
            assert!(z.data().iter().all(|&v| v == 0.0), "theta {theta}");
        }
    }
}

#[test]
fn floor_threshold_masks_nothing() {
    let f = random_map(5, 6, 3, 3);
    let z = ppm_forward(&f, &cfg(-1.0, 1)).unwrap();
    assert!(z.data().iter().all(|&v| v == 0.0));
}

#[test]
fn random_maps_match_oracle() {
    for (seed, theta, radius) in [(4, 0.7, 1), (5, 0.2, 1), (6, 0.9, 2), (7, 0.5, 0)] {
        let f = random_map(6, 8, 5, seed);
        let z = ppm_forward(&f, &cfg(theta, radius)).unwrap();
        let oracle = ppm_oracle(&f, theta, radius, 1e-6);
        assert!(normwise_err(z.data(), &oracle) < 1e-12);
    }
}

#[test]
fn planted_pair_is_localised() {
    let mut f = mirrored_map(8, 8, 4, 9);
    // Break the symmetry of (3, 1) against its mirror (3, 6).
    let c = 4;
    let mut t = f.values().clone();
    for k in 0..c {
        t.data_mut()[(3 * 8 + 1) * c + k] = [2.0, -1.0, 0.5, 3.0][k];
    }
    f = FeatureMap::new(t).unwrap();
    let theta = 0.7;

    let z0 = ppm_forward(&f, &cfg(theta, 0)).unwrap();
    let hot: Vec<usize> = (0..64)
        .filter(|&i| z0.data()[i * c..(i + 1) * c].iter().any(|&v| v != 0.0))
        .collect();
    let sim = cosine_similarity(f.token(3, 1), f.token(3, 6));
    assert!(sim < theta);
    assert_eq!(hot, vec![3 * 8 + 1, 3 * 8 + 6]);
    assert!(normwise_err(z0.data(), &ppm_oracle(&f, theta, 0, 1e-6)) < 1e-12);

    // With the window on, anomalies also appear around the planted token;
    // the oracle decides exactly which.
    let z1 = ppm_forward(&f, &cfg(theta, 1)).unwrap();
    assert!(normwise_err(z1.data(), &ppm_oracle(&f, theta, 1, 1e-6)) < 1e-12);
    for i in [3 * 8 + 1, 3 * 8 + 6] {
        assert!(z1.data()[i * c..(i + 1) * c].iter().any(|&v| v != 0.0));
    }
}

#[test]
fn random_mask_is_seeded() {
    let f = random_map(4, 4, 3, 10);
    let rc = |seed| PpmConfig {
        mask: MaskRule::Random { seed },
        ..PpmConfig::default()
    };
    let a = masked_pairs(&f, &rc(1)).unwrap();
    assert_eq!(a, masked_pairs(&f, &rc(1)).unwrap());
    assert_ne!(a, masked_pairs(&f, &rc(2)).unwrap());
    let total: usize = comparison_targets(4, 4, 1).iter().map(Vec::len).sum();
    assert!(a.len() > total / 4 && a.len() < 3 * total / 4);
}

#[test]
fn ppm_gradients_match_differences() {
    let inputs = vec![Tensor::<f64>::randn(vec![4, 4, 3], 1.0, &mut rng(11))];
    let c = cfg(0.7, 1);
    let f = move |t: &mut Tape<'_, f64>, v: &[Var]| -> Result<Var> {
        let z = ppm_on_tape(t, v[0], &c)?;
        let w = t.constant(Tensor::from_fn(vec![4, 4, 3], |i| (i % 5) as f64 - 2.0));
        let p = t.mul(z, w)?;
        t.sum(p)
    };
    assert_grads(&inputs, &f, 1e-6, 1e-6);
}

fn crn_store(c: usize, cfg: &CrnConfig, seed: u64) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    init_crn(&mut s, seed, "crn", c, cfg).unwrap();
    s
}

#[test]
fn crn_weights_lie_on_simplex() {
    let cfg = CrnConfig::default();
    let store = crn_store(4, &cfg, 12);
    let f = random_map(6, 6, 4, 13);
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let x = tape.leaf(f.values());
    let (_, beta) = crn_weights(&mut tape, x, &p, "crn", &cfg).unwrap();
    assert_eq!(tape.shape(beta), &[36, 9]);
    for row in tape.value(beta).chunks(9) {
        assert!(row.iter().all(|&b| b >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn zero_mlp_gives_dilated_mean() {
    let cfg = CrnConfig::default();
    let c = 3;
    let mut store = crn_store(c, &cfg, 14);
    for name in ["crn.mlp1.w", "crn.mlp1.b", "crn.mlp2.w", "crn.mlp2.b", "crn.out.b"] {
        store
            .get_mut(name)
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }
    *store.get_mut("crn.out.w").unwrap() = Tensor::from_fn(vec![c, c], |i| if i / c == i % c { 1.0 } else { 0.0 });
    let f = random_map(7, 7, c, 15);
    let z = crn_forward(&f, &cfg, &store, "crn").unwrap();
    for r in 0..7 {
        for col in 0..7 {
            for k in 0..c {
                let mut acc = 0.0;
                for dy in [-2i32, 0, 2] {
                    for dx in [-2i32, 0, 2] {
                        let (rr, cc) = (r as i32 + dy, col as i32 + dx);
                        if (0..7).contains(&rr) && (0..7).contains(&cc) {
                            acc += f.token(rr as usize, cc as usize)[k];
                        }
                    }
                }
                let got = z.data()[(r * 7 + col) * c + k];
                assert!((got - acc / 9.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn constant_map_gives_constant_interior() {
    let cfg = CrnConfig::default();
    let store = crn_store(3, &cfg, 16);
    let f = FeatureMap::new(Tensor::from_fn(vec![8, 8, 3], |i| [0.5, -1.0, 2.0][i % 3])).unwrap();
    let z = crn_forward(&f, &cfg, &store, "crn").unwrap();
    let reference = &z.data()[(2 * 8 + 2) * 3..(2 * 8 + 3) * 3];
    for r in 2..6 {
        for col in 2..6 {
            let v = &z.data()[(r * 8 + col) * 3..(r * 8 + col + 1) * 3];
            for k in 0..3 {
                assert!((v[k] - reference[k]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn fusion_is_pointwise() {
    let c = 3;
    let mut store = ParamStore::<f64>::new();
    init_fusion(&mut store, 17, "fuse", c).unwrap();
    let run = |m: &Tensor<f64>, d: &Tensor<f64>| -> Tensor<f64> {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let (mv, dv) = (tape.leaf(m), tape.leaf(d));
        let z = fuse_on_tape(&mut tape, mv, dv, &p, "fuse").unwrap();
        tape.to_tensor(z)
    };
    let m = Tensor::randn(vec![4, 5, c], 1.0, &mut rng(18));
    let d = Tensor::randn(vec![4, 5, c], 1.0, &mut rng(19));
    let base = run(&m, &d);
    assert_eq!(base.shape(), &[4, 5, c]);
    for (which, pos) in [(0, 7), (1, 13)] {
        let (mut m2, mut d2) = (m.clone(), d.clone());
        let t = if which == 0 { &mut m2 } else { &mut d2 };
        t.data_mut()[pos * c + 1] += 0.7;
        let out = run(&m2, &d2);
        for i in 0..20 {
            let same = (0..c).all(|k| out.data()[i * c + k] == base.data()[i * c + k]);
            assert_eq!(same, i != pos);
        }
    }
    // Identical inputs at two positions give identical outputs.
    let mut m3 = m.clone();
    let mut d3 = d.clone();
    for k in 0..c {
        m3.data_mut()[5 * c + k] = m3.data()[2 * c + k];
        d3.data_mut()[5 * c + k] = d3.data()[2 * c + k];
    }
    let out = run(&m3, &d3);
    assert_eq!(&out.data()[2 * c..3 * c], &out.data()[5 * c..6 * c]);
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let small = Tensor::zeros(vec![4, 4, c]);
    let (mv, dv) = (tape.leaf(&m), tape.leaf(&small));
    assert!(fuse_on_tape(&mut tape, mv, dv, &p, "fuse").is_err());
}

#[test]
fn fusion_depends_on_both_inputs() {
    let c = 2;
    let mut store = ParamStore::<f64>::new();
    init_fusion(&mut store, 20, "fuse", c).unwrap();
    let inputs = vec![
        Tensor::randn(vec![2, 2, c], 1.0, &mut rng(21)),
        Tensor::randn(vec![2, 2, c], 1.0, &mut rng(22)),
    ];
    let f = move |t: &mut Tape<'_, f64>, v: &[Var]| -> Result<Var> {
        let p = Bound::from_pairs(store.iter().map(|(n, w)| (n.to_string(), t.constant(w.clone()))));
        let z = fuse_on_tape(t, v[0], v[1], &p, "fuse")?;
        t.sum(z)
    };
    for (analytic, numeric) in fd_pair(&inputs, &f, 1e-6) {
        assert!(numeric.iter().any(|&g| g.abs() > 1e-6));
        assert!(normwise_err(&analytic, &numeric) < 1e-7);
    }
}

fn block_store(c: usize, cfg: &BlockConfig, seed: u64) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    init_block(&mut s, seed, "b", c, cfg).unwrap();
    s
}

#[test]
fn block_preserves_shape() {
    let cfg = BlockConfig::default();
    let store = block_store(32, &cfg, 23).cast::<f32>();
    let f = FeatureMap::new(Tensor::<f32>::randn(vec![16, 16, 32], 1.0, &mut rng(24))).unwrap();
    let out = pcmamba_block_forward(&f, &store, "b", &cfg).unwrap();
    assert_eq!(out.values().shape(), &[16, 16, 32]);
}

#[test]
fn unit_modulation_matches_plain_block() {
    let full = BlockConfig::default();
    let plain = BlockConfig {
        modulation: Modulation::Unit,
        ..full
    };
    let store_full = block_store(4, &full, 25);
    let store_plain = block_store(4, &plain, 25);
    assert!(store_plain.len() < store_full.len());
    let f = random_map(4, 6, 4, 26);
    let a = pcmamba_block_forward(&f, &store_full, "b", &plain).unwrap();
    let b = pcmamba_block_forward(&f, &store_plain, "b", &plain).unwrap();
    assert_eq!(a, b);
    // Forcing the fused factor to exactly one reproduces the same numbers.
    let mut ones = store_full.clone();
    for name in ["b.fuse.l2.w", "b.fuse.l1.w", "b.fuse.l1.b"] {
        ones.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let c = pcmamba_block_forward(&f, &ones, "b", &full).unwrap();
    assert_eq!(a, c);
}

#[test]
fn zero_projection_is_identity() {
    let cfg = BlockConfig::default();
    let mut store = block_store(4, &cfg, 27);
    for name in ["b.proj.w", "b.proj.b"] {
        store
            .get_mut(name)
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }
    let f = random_map(4, 4, 4, 28);
    assert_eq!(pcmamba_block_forward(&f, &store, "b", &cfg).unwrap(), f);
}

#[test]
fn block_gradients_match_differences() {
    for (i, modulation) in [
        Modulation::Both,
        Modulation::DensityOnly,
        Modulation::MaskOnly,
        Modulation::ConvDensity,
        Modulation::Unit,
    ]
    .into_iter()
    .enumerate()
    {
        let cfg = BlockConfig {
            state_dim: 3,
            modulation,
            ..BlockConfig::default()
        };
        let store = block_store(2, &cfg, 30 + i as u64);
        let names: Vec<String> = store.names().iter().map(|s| s.to_string()).collect();
        let mut inputs = vec![Tensor::<f64>::randn(vec![4, 4, 2], 1.0, &mut rng(40 + i as u64))];
        inputs.extend(store.iter().map(|(_, t)| t.clone()));
        let f = move |tape: &mut Tape<'_, f64>, v: &[Var]| -> Result<Var> {
            let bound = Bound::from_pairs(names.iter().cloned().zip(v[1..].iter().copied()));
            let y = block_on_tape(tape, v[0], &bound, "b", &cfg)?;
            let w = tape.constant(Tensor::from_fn(vec![4, 4, 2], |k| ((k * 3) % 7) as f64 * 0.25 - 0.6));
            let p = tape.mul(y, w)?;
            tape.sum(p)
        };
        assert_grads(&inputs, &f, 1e-6, 1e-5);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn raising_theta_grows_mask(seed in 0u64..10_000, lo in -1.0f64..1.0, gap in 0.0f64..1.0) {
        let hi = (lo + gap).min(1.0);
        let f = random_map(5, 6, 3, seed);
        let a = masked_pairs(&f, &cfg(lo, 1)).unwrap();
        let b = masked_pairs(&f, &cfg(hi, 1)).unwrap();
        prop_assert!(a.iter().all(|p| b.contains(p)));
    }

    #[test]
    fn symmetric_input_is_null_for_any_theta(seed in 0u64..10_000, theta in -1.0f64..0.999, w in 1usize..5) {
        let f = mirrored_map(4, 2 * w, 3, seed);
        let z = ppm_forward(&f, &cfg(theta, 0)).unwrap();
        prop_assert!(z.data().iter().all(|&v| v == 0.0));
    }
}
