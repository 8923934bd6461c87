use hitlab::diffcore::Tensor;
use hitlab::distributions::{DiagGaussian, NoiseSource};
use hitlab::hvae::{BetaVector, Draw, HvaeConfig, HvaeModel, InferenceStyle};
use hitlab::metrics::{accuracy_bound_f, accuracy_bound_inverse, inception_score, LabelPrior};
use hitlab::selection::{best_per_interval, hull_value_at, upper_convex_hull, FrontierPoint};
use hitlab::sweep::{fmt_f64, parse_f64, GridAxis};
use hitlab::training::Checkpoint;
use proptest::prelude::*;

/// Hull vertices by exhaustive search: a point survives unless another point
/// shares its x with a larger y (or equal y and earlier index), or it lies on
/// or below a segment between two points strictly on either side of it.
fn brute_force_hull(pts: &[FrontierPoint]) -> Vec<usize> {
    let mut keep = Vec::new();
    'outer: for (i, p) in pts.iter().enumerate() {
        for (j, q) in pts.iter().enumerate() {
            if q.x == p.x && (q.y > p.y || (q.y == p.y && j < i)) {
                continue 'outer;
            }
        }
        for a in pts.iter().filter(|a| a.x < p.x) {
            for b in pts.iter().filter(|b| b.x > p.x) {
                if (p.y - a.y) * (b.x - a.x) <= (b.y - a.y) * (p.x - a.x) {
                    continue 'outer;
                }
            }
        }
        keep.push(p.id);
    }
    keep.sort_by(|&i, &j| pts[i].x.total_cmp(&pts[j].x));
    keep
}

fn points(coords: &[(f64, f64)]) -> Vec<FrontierPoint> {
    coords.iter().enumerate().map(|(i, &(x, y))| FrontierPoint::new(i, x, y)).collect()
}

fn int_points() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0i32..40, 0i32..40), 1..120)
        .prop_map(|v| v.into_iter().map(|(x, y)| (x as f64, y as f64)).collect())
}

fn real_points() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0.0..10.0f64, -5.0..5.0f64), 1..200)
}

fn small_model() -> impl Strategy<Value = (HvaeConfig, u64)> {
    (1usize..4, 1usize..4, 1usize..5, prop::bool::ANY, any::<u64>()).prop_map(|(z2, z1, d, ladder, seed)| {
        let mut cfg = HvaeConfig::new(d, vec![z2, z1]);
        cfg.hidden = vec![6];
        if ladder {
            cfg.inference = InferenceStyle::Ladder;
        }
        (cfg, seed)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hull_matches_brute_force_on_lattice(c in int_points()) {
        let pts = points(&c);
        let hull: Vec<usize> = upper_convex_hull(&pts).unwrap().iter().map(|p| p.id).collect();
        prop_assert_eq!(hull, brute_force_hull(&pts));
    }

    #[test]
    fn hull_matches_brute_force_on_reals(c in real_points()) {
        let pts = points(&c);
        let hull: Vec<usize> = upper_convex_hull(&pts).unwrap().iter().map(|p| p.id).collect();
        prop_assert_eq!(hull, brute_force_hull(&pts));
    }

    #[test]
    fn every_point_lies_under_the_hull(c in real_points()) {
        let pts = points(&c);
        let hull = upper_convex_hull(&pts).unwrap();
        for p in &pts {
            let h = hull_value_at(&hull, p.x).unwrap();
            prop_assert!(p.y <= h + 1e-12, "{:?} above hull value {}", p, h);
        }
        let again = upper_convex_hull(&hull).unwrap();
        prop_assert_eq!(&again, &hull);
        let intervals = best_per_interval(&hull).unwrap();
        let expected = if hull.len() == 1 { 1 } else { hull.len() + 1 };
        prop_assert_eq!(intervals.len(), expected);
        for iv in &intervals {
            prop_assert!(hull.iter().any(|h| h.id == iv.id));
        }
    }

    #[test]
    fn kl_is_nonnegative(
        mq in prop::collection::vec(-3.0..3.0f64, 3),
        sq in prop::collection::vec(0.05..4.0f64, 3),
        mp in prop::collection::vec(-3.0..3.0f64, 3),
        sp in prop::collection::vec(0.05..4.0f64, 3),
    ) {
        let g = |m: &Vec<f64>, s: &Vec<f64>| {
            DiagGaussian::new(Tensor::matrix(1, 3, m.clone()).unwrap(), Tensor::matrix(1, 3, s.clone()).unwrap()).unwrap()
        };
        let (q, p) = (g(&mq, &sq), g(&mp, &sp));
        prop_assert!(q.kl(&p).unwrap()[0] >= 0.0);
        prop_assert!(q.kl(&q).unwrap()[0].abs() < 1e-12);
    }

    #[test]
    fn inception_identity(rows in prop::collection::vec(prop::collection::vec(0.01..1.0f64, 4), 2..30)) {
        let pred: Vec<Vec<f64>> = rows
            .into_iter()
            .map(|r| {
                let s: f64 = r.iter().sum();
                r.into_iter().map(|v| v / s).collect()
            })
            .collect();
        let s = inception_score(&pred).unwrap();
        prop_assert!((s.is - s.diversity * s.sharpness).abs() <= 1e-9 * s.is);
        prop_assert!(s.is >= 1.0 - 1e-12 && s.is <= 4.0 + 1e-9);
    }

    #[test]
    fn bound_inverse_round_trip(m in 2usize..12, t in 0.0..1.0f64) {
        let prior = LabelPrior::uniform(m).unwrap();
        let lo = 1.0 / m as f64 + 1e-3;
        let alpha = lo + t * (1.0 - lo);
        let info = accuracy_bound_f(alpha, &prior).unwrap();
        let back = accuracy_bound_inverse(info, &prior).unwrap();
        prop_assert!((back - alpha).abs() < 1e-9, "{} -> {} -> {}", alpha, info, back);
    }

    #[test]
    fn log_grid_is_geometric(min in 0.01..1.0f64, ratio in 1.5..200.0f64, count in 2usize..25) {
        let axis = GridAxis::log(min, min * ratio, count);
        let v = axis.values();
        prop_assert_eq!(v.len(), count);
        prop_assert_eq!(v[0], min);
        prop_assert_eq!(v[count - 1], min * ratio);
        for (i, &b) in v.iter().enumerate() {
            let exact = min * ratio.powf(i as f64 / (count - 1) as f64);
            prop_assert!((b - exact).abs() <= 1e-12 * exact);
        }
    }

    #[test]
    fn float_text_round_trip(v in any::<f64>()) {
        let back = parse_f64(&fmt_f64(v)).unwrap();
        prop_assert!(back == v || (back.is_nan() && v.is_nan()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn telescoping_and_rate_identities((cfg, seed) in small_model(), batch in 1usize..6) {
        let model = HvaeModel::new(cfg.clone(), seed).unwrap();
        let mut rng = NoiseSource::new(seed ^ 1);
        let x = rng.normal_tensor(&[batch, cfg.data_dim]);
        let trace = model.infer(&x, &mut rng.clone(), Draw::Sample).unwrap();
        for i in 0..batch {
            let sum: f64 = trace.layers.iter().map(|l| l.log_ratio[i]).sum();
            prop_assert!((trace.total_log_ratio[i] - sum).abs() < 1e-9);
        }
        for l in &trace.layers {
            prop_assert!(l.kl.iter().all(|&k| k >= -1e-9));
        }
        let unit = BetaVector::uniform(2, 1.0).unwrap();
        let b = model.loss(&x, &unit, &mut rng.clone()).unwrap();
        prop_assert!((b.loss - (b.distortion + b.total_rate())).abs() < 1e-9);
        prop_assert!(b.rates.iter().all(|&r| r >= -1e-9));
        // same noise, same trace
        let again = model.infer(&x, &mut rng.clone(), Draw::Sample).unwrap();
        prop_assert_eq!(&trace.total_log_ratio, &again.total_log_ratio);
    }

    #[test]
    fn checkpoint_round_trip_is_exact((cfg, seed) in small_model(), b2 in 0.1..10.0f64, b1 in 0.1..10.0f64) {
        let model = HvaeModel::new(cfg, seed).unwrap();
        let betas = BetaVector::new(vec![b2, b1]).unwrap();
        let text = Checkpoint::new(&model, seed, &betas).to_json().unwrap();
        let back = Checkpoint::from_json(&text).unwrap();
        prop_assert_eq!(back.model().unwrap(), model);
        prop_assert_eq!(back.betas().unwrap(), betas);
        prop_assert_eq!(back.seed, seed);
    }
}

#[test]
fn bound_f_is_strictly_increasing() {
    for m in [2usize, 4, 10] {
        let prior = LabelPrior::uniform(m).unwrap();
        let lo = 1.0 / m as f64;
        let n = 10_000;
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=n {
            let alpha = lo + (1.0 - lo) * i as f64 / n as f64;
            let f = accuracy_bound_f(alpha, &prior).unwrap();
            assert!(f > prev, "M={m}: f not increasing at {alpha}");
            prev = f;
        }
    }
}
