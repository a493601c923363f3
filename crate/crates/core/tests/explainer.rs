use eclf_core::explainer::{
    change_mask, collect_pairs, cross_boundary, fit_linear, fit_surrogate, fit_surrogate_split, holdout_points, importance, interpolate, rank_features,
    surrogate_points, traversal_latents, Crossing, ExplainConfig, LatentClassifier,
};
use eclf_core::imageio::Image;
use eclf_core::vae::GaussianPosterior;
use eclf_core::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `logits = W x + b`, one row of `W` per class.
struct Linear {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl LatentClassifier for Linear {
    fn input_dim(&self) -> usize {
        self.w[0].len()
    }

    fn classes(&self) -> usize {
        self.w.len()
    }

    fn logits(&self, points: &[f64]) -> Result<Vec<f64>> {
        let d = self.input_dim();
        Ok(points
            .chunks(d)
            .flat_map(|x| {
                self.w
                    .iter()
                    .zip(&self.b)
                    .map(move |(r, b)| r.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            })
            .collect())
    }
}

/// Two classes split by the hyperplane `x0 + 0.5 x1 = 0.3`.
fn two_class() -> Linear {
    Linear {
        w: vec![vec![1.0, 0.5, 0.0], vec![-1.0, -0.5, 0.0]],
        b: vec![-0.3, 0.3],
    }
}

fn gap(clf: &Linear, x: &[f64]) -> f64 {
    let l = clf.logits(x).unwrap();
    l[0] - l[1]
}

#[test]
fn crossing_of_a_linear_boundary_lands_on_the_hyperplane() {
    let clf = two_class();
    let (pa, pb) = (vec![2.0, 1.0, -1.0], vec![-1.5, -0.5, 2.0]);
    let Crossing::Pair(p) = cross_boundary(&pa, &pb, &clf, (0, 1), 64, 1e-3).unwrap() else {
        panic!("segment crosses the boundary");
    };
    assert!(p.is_valid(&clf, 1e-3).unwrap());
    // exact crossing parameter of a linear gap
    let (ga, gb) = (gap(&clf, &pa), gap(&clf, &pb));
    let t_star = ga / (ga - gb);
    assert!((p.t - t_star).abs() <= 1e-3, "t {} vs {t_star}", p.t);
    assert!(p.gap_a >= 0.0 && p.gap_b < 0.0);
    assert!(p.distance() <= 1e-3 * 4.0_f64.hypot(1.5).hypot(3.0));
}

#[test]
fn a_third_class_in_between_is_not_a_crossing() {
    // class 2 owns the band |x0| < 0.5
    let clf = Linear {
        w: vec![vec![4.0], vec![-4.0], vec![0.0]],
        b: vec![-2.0, -2.0, 0.0],
    };
    assert_eq!(clf.class_of(&[0.0]).unwrap(), 2);
    let r = cross_boundary(&[1.0], &[-1.0], &clf, (0, 1), 64, 1e-3).unwrap();
    assert_eq!(r, Crossing::NotCrossing);
}

#[test]
fn endpoints_on_the_same_side_do_not_cross() {
    let clf = two_class();
    let r = cross_boundary(&[2.0, 0.0, 0.0], &[3.0, 0.0, 0.0], &clf, (0, 1), 16, 1e-3).unwrap();
    assert_eq!(r, Crossing::NotCrossing);
    assert!(cross_boundary(&[-2.0, 0.0, 0.0], &[-3.0, 0.0, 0.0], &clf, (0, 1), 16, 1e-3).is_err());
}

#[test]
fn least_squares_recovers_an_exact_linear_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (wa, wb) = ([0.5, -2.0, 1.5, 0.25], [-1.0, 0.0, 3.0, 0.75]);
    let points: Vec<Vec<f64>> = (0..60).map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let targets: Vec<[f64; 2]> = points
        .iter()
        .map(|p| {
            let dot = |w: &[f64]| w.iter().zip(p).map(|(a, b)| a * b).sum::<f64>();
            [dot(&wa) + 0.7, dot(&wb) - 1.1]
        })
        .collect();
    let (w, bias, ridge) = fit_linear(&points, &targets).unwrap();
    assert_eq!(ridge, None);
    for k in 0..4 {
        assert!((w[0][k] - wa[k]).abs() < 1e-9 && (w[1][k] - wb[k]).abs() < 1e-9);
    }
    assert!((bias[0] - 0.7).abs() < 1e-9 && (bias[1] + 1.1).abs() < 1e-9);
}

#[test]
fn rank_deficient_design_falls_back_to_ridge() {
    // the second coordinate is a copy of the first
    let points: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 / 10.0, i as f64 / 10.0, ((i * 7) % 5) as f64]).collect();
    let targets: Vec<[f64; 2]> = points.iter().map(|p| [2.0 * p[0] + p[2], -p[2] + 1.0]).collect();
    let (w, bias, ridge) = fit_linear(&points, &targets).unwrap();
    assert!(ridge.is_some());
    for (p, t) in points.iter().zip(&targets) {
        let y = w[0].iter().zip(p).map(|(a, b)| a * b).sum::<f64>() + bias[0];
        assert!((y - t[0]).abs() < 1e-3, "{y} vs {}", t[0]);
    }
    // the duplicated weight is shared evenly
    assert!((w[0][0] - w[0][1]).abs() < 1e-6);
}

#[test]
fn constant_targets_give_zero_weights() {
    let points: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, (i * i) as f64]).collect();
    let (w, bias, _) = fit_linear(&points, &vec![[3.0, -1.0]; 10]).unwrap();
    assert!(w.iter().flatten().all(|v| v.abs() < 1e-9));
    assert!((bias[0] - 3.0).abs() < 1e-9 && (bias[1] + 1.0).abs() < 1e-9);
}

#[test]
fn surrogate_of_a_linear_classifier_is_exact() {
    let clf = two_class();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let points: Vec<Vec<f64>> = (0..200).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let s = fit_surrogate(&points, &clf, (0, 1), 0.2, &mut rng).unwrap();
    assert_eq!((s.fit_points, s.holdout_points), (160, 40));
    assert_eq!(s.sign_agreement, 1.0);
    assert!(s.holdout_mse < 1e-20 && s.fit_mse < 1e-20);
    assert!((s.w_a()[0] - 1.0).abs() < 1e-9 && (s.w_a()[1] - 0.5).abs() < 1e-9 && s.w_a()[2].abs() < 1e-9);
}

fn posterior(mu: Vec<f64>, var: f64) -> GaussianPosterior {
    let lv = vec![var.ln(); mu.len()];
    GaussianPosterior::new(mu, lv).unwrap()
}

fn pair_config(budget: usize) -> ExplainConfig {
    ExplainConfig {
        pair_budget: budget,
        neighbors: 3,
        ..ExplainConfig::default()
    }
}

#[test]
fn collected_pairs_are_valid_and_reproducible() {
    let clf = two_class();
    let query = posterior(vec![1.5, 0.5, 0.0], 0.2);
    let neighbors: Vec<GaussianPosterior> = [-1.0, -1.5, -2.0].iter().map(|&x| posterior(vec![x, -0.5, 0.3], 0.2)).collect();
    let cfg = pair_config(200);
    let (pairs, stats) = collect_pairs(&query, &neighbors, &clf, (0, 1), &cfg, 17).unwrap();
    assert_eq!(pairs.len(), 200);
    assert_eq!(stats.attempts, 200 + stats.off_class_starts + stats.not_crossing);
    for p in &pairs {
        assert!(p.is_valid(&clf, cfg.tolerance).unwrap());
    }
    let again = collect_pairs(&query, &neighbors, &clf, (0, 1), &cfg, 17).unwrap();
    assert_eq!(again.0, pairs);
    let other = collect_pairs(&query, &neighbors, &clf, (0, 1), &cfg, 18).unwrap();
    assert_ne!(other.0, pairs);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pts = surrogate_points(&pairs, 0.25, &mut rng);
    assert_eq!(pts.len(), pairs.len());
    let hold = holdout_points(&pairs, 7, 0.25, &mut rng);
    assert_eq!(hold.len(), 7);
    let s = fit_surrogate_split(&pts, &hold, &clf, (0, 1)).unwrap();
    assert_eq!((s.fit_points, s.holdout_points), (pairs.len(), 7));
}

#[test]
fn unreachable_budget_reports_what_happened() {
    let clf = two_class();
    let query = posterior(vec![1.5, 0.5, 0.0], 0.1);
    // the "contrast" neighbors sit in class A as well
    let neighbors = vec![posterior(vec![2.5, 0.0, 0.0], 0.1)];
    let err = collect_pairs(&query, &neighbors, &clf, (0, 1), &pair_config(5), 0).unwrap_err().to_string();
    assert!(err.contains("found 0 of 5"), "{err}");
    assert!(err.contains("100 attempts"), "{err}");
}

#[test]
fn importance_is_weight_times_difference() {
    let im = importance(&[2.0, -1.0, 0.5], &[1.0, 1.0, 1.0], &[0.0, 3.0, 1.0]).unwrap();
    assert_eq!(im, vec![2.0, 2.0, 0.0]);
    assert_eq!(rank_features(&im), vec![0, 1, 2]);
    assert!(importance(&[1.0], &[1.0, 2.0], &[0.0, 0.0]).is_err());
}

fn frame(size: usize, f: impl Fn(usize) -> f32) -> Image {
    let hw = size * size;
    let mut img = Image::black(size, size);
    for p in 0..hw {
        let v = f(p);
        img.set(p / size, p % size, [v, v, v]);
    }
    img
}

#[test]
fn identical_frames_have_an_empty_mask() {
    let a = frame(8, |p| (p % 7) as f32 / 7.0);
    assert!(change_mask(&a, &a.clone()).unwrap().iter().all(|m| !m));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn interpolation_endpoints_are_bit_exact(from in -1e6f64..1e6, to in -1e6f64..1e6) {
        prop_assert_eq!(interpolate(from, to, 0.0).to_bits(), from.to_bits());
        prop_assert_eq!(interpolate(from, to, 1.0).to_bits(), to.to_bits());
    }

    #[test]
    fn traversal_only_moves_selected_entries(origin in prop::collection::vec(-3.0f64..3.0, 6), from in -3.0f64..3.0, to in -3.0f64..3.0, i in 0usize..6) {
        let grid = [0.0, 0.5, 1.0, 1.5];
        let lat = traversal_latents(&origin, &[i], &[from], &[to], &grid).unwrap();
        prop_assert_eq!(lat.len(), grid.len());
        for z in &lat {
            for j in (0..6).filter(|&j| j != i) {
                prop_assert_eq!(z[j].to_bits(), origin[j].to_bits());
            }
        }
        prop_assert_eq!(lat[0][i].to_bits(), from.to_bits());
        prop_assert_eq!(lat[2][i].to_bits(), to.to_bits());
    }

    #[test]
    fn ranking_sorts_by_magnitude(im in prop::collection::vec(-5.0f64..5.0, 1..20)) {
        let r = rank_features(&im);
        let mut seen = r.clone();
        seen.sort();
        prop_assert_eq!(seen, (0..im.len()).collect::<Vec<_>>());
        for w in r.windows(2) {
            prop_assert!(im[w[0]].abs() > im[w[1]].abs() || (im[w[0]].abs() == im[w[1]].abs() && w[0] < w[1]));
        }
    }

    /// Distinct per-pixel changes: the mask keeps the top fifth, to within a pixel.
    #[test]
    fn mask_keeps_a_fifth_of_distinct_changes(size in 2usize..40, seed in 0u64..1000) {
        let hw = size * size;
        let mut order: Vec<usize> = (0..hw).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..hw).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let a = frame(size, |_| 0.0);
        let b = frame(size, |p| (order[p] + 1) as f32 / hw as f32);
        let count = change_mask(&a, &b).unwrap().iter().filter(|m| **m).count() as f64;
        prop_assert!((count - 0.2 * hw as f64).abs() <= 1.0, "{} of {}", count, hw);
    }
}
