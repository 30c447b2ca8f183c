use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use terngrad::codec::{clip, clip_values, histogram};
use terngrad::numerics::{make_synthetic, random_batch, Architecture, GradTensor, Model, SyntheticTask};

fn finite_difference_check(arch: Architecture, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::init(arch, 5, 3, seed);
    let batch = random_batch(&mut rng, 7, 5, 3);
    let (_, grads) = model.forward_backward(&batch).unwrap();
    let eps = 1e-3f32;
    for (p, g) in grads.iter().enumerate() {
        for k in 0..g.len() {
            let mut plus = model.params().to_vec();
            let mut minus = model.params().to_vec();
            let w = plus[p].values()[k];
            plus[p].values_mut()[k] = w + eps;
            minus[p].values_mut()[k] = w - eps;
            let step = plus[p].values()[k] as f64 - minus[p].values()[k] as f64;
            let lp = model.with_params(plus).unwrap().loss(&batch).unwrap();
            let lm = model.with_params(minus).unwrap().loss(&batch).unwrap();
            let numeric = (lp - lm) / step;
            let analytic = g.values()[k] as f64;
            assert!(
                (numeric - analytic).abs() <= 2e-4 + 1e-2 * analytic.abs(),
                "{} [{k}]: numeric {numeric} analytic {analytic}",
                g.name()
            );
        }
    }
}

#[test]
fn linear_gradients_match_finite_differences() {
    finite_difference_check(Architecture::LinearSoftmax, 1);
}

#[test]
fn mlp_gradients_match_finite_differences() {
    finite_difference_check(Architecture::MlpOneHidden { hidden: 6 }, 2);
}

/// Classic perceptron with one weight row per class.
fn perceptron_errors(inputs: &[f32], labels: &[usize], dim: usize, classes: usize, epochs: usize) -> usize {
    let mut w = vec![0.0f64; classes * (dim + 1)];
    let score = |w: &[f64], x: &[f32], c: usize| {
        let row = &w[c * (dim + 1)..(c + 1) * (dim + 1)];
        row[dim] + row[..dim].iter().zip(x).map(|(a, &b)| a * b as f64).sum::<f64>()
    };
    let predict = |w: &[f64], x: &[f32]| {
        (0..classes)
            .max_by(|&a, &b| score(w, x, a).total_cmp(&score(w, x, b)))
            .unwrap()
    };
    for _ in 0..epochs {
        let mut mistakes = 0;
        for (x, &y) in inputs.chunks_exact(dim).zip(labels) {
            let guess = predict(&w, x);
            if guess != y {
                mistakes += 1;
                for (sign, c) in [(1.0, y), (-1.0, guess)] {
                    let row = &mut w[c * (dim + 1)..(c + 1) * (dim + 1)];
                    for (a, &b) in row[..dim].iter_mut().zip(x) {
                        *a += sign * b as f64;
                    }
                    row[dim] += sign;
                }
            }
        }
        if mistakes == 0 {
            break;
        }
    }
    inputs
        .chunks_exact(dim)
        .zip(labels)
        .filter(|(x, &y)| predict(&w, x) != y)
        .count()
}

#[test]
fn separable_data_is_separable() {
    let d = make_synthetic(SyntheticTask::LinearSeparable, 1000, 8, 2, 5).unwrap();
    assert_eq!(perceptron_errors(d.inputs(), d.labels(), 8, 2, 1000), 0);
    let d = make_synthetic(SyntheticTask::LinearSeparable, 600, 6, 3, 6).unwrap();
    assert_eq!(perceptron_errors(d.inputs(), d.labels(), 6, 3, 2000), 0);
}

fn normals(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

#[test]
fn clipping_matches_gaussian_expectations() {
    let c = 2.5f64;
    let normal = Normal::standard();
    let tail = 1.0 - normal.cdf(c);
    let pdf = normal.pdf(c);
    // Second moment of the clamped variable and its correlation with the input.
    let clipped_sq = 1.0 - 2.0 * (c * pdf + tail) + 2.0 * c * c * tail;
    let cross = 1.0 - 2.0 * tail;
    let length_change = 1.0 - clipped_sq.sqrt();
    let angle = (cross / clipped_sq.sqrt()).acos().to_degrees();

    let n = 1_000_000;
    let mut values = normals(n, 11);
    let g = GradTensor::flat("g", values.clone()).unwrap();
    let clamped = clip_values(&mut values, c as f32);
    let frac = clamped as f64 / n as f64;
    let se = (2.0 * tail * (1.0 - 2.0 * tail) / n as f64).sqrt();
    assert!((frac - 2.0 * tail).abs() < 5.0 * se, "{frac} vs {}", 2.0 * tail);

    let h = clip(&g, c as f32);
    let (na, nb) = (g.l2_norm(), h.l2_norm());
    let dot: f64 = g.values().iter().zip(h.values()).map(|(&a, &b)| a as f64 * b as f64).sum();
    let measured_angle = (dot / (na * nb)).acos().to_degrees();
    assert!(((na - nb) / na - length_change).abs() < 5e-4, "{} vs {length_change}", (na - nb) / na);
    assert!((measured_angle - angle).abs() < 0.1, "{measured_angle} vs {angle}");
}

#[test]
fn histogram_follows_the_normal_density() {
    let n = 500_000;
    let values = normals(n, 12);
    let bins = histogram(&values, 40).unwrap();
    assert_eq!(bins.iter().map(|b| b.count).sum::<u64>(), n as u64);
    let normal = Normal::standard();
    for b in &bins {
        let p = normal.cdf(b.upper) - normal.cdf(b.lower);
        let mid = 0.5 * (b.lower + b.upper);
        let width = b.upper - b.lower;
        assert!((p - normal.pdf(mid) * width).abs() < 0.01 * width, "midpoint rule far off in [{}, {}]", b.lower, b.upper);
        let se = (p * (1.0 - p) / n as f64).sqrt();
        let got = b.count as f64 / n as f64;
        assert!((got - p).abs() < 5.0 * se + 2.0 / n as f64, "bin [{}, {}]: {got} vs {p}", b.lower, b.upper);
    }
}

#[test]
fn single_bin_histogram_holds_everything() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v: Vec<f32> = (0..100).map(|_| rng.random_range(-1.0..1.0)).collect();
    let h = histogram(&v, 1).unwrap();
    assert_eq!(h.len(), 1);
    assert_eq!(h[0].count, 100);
}
