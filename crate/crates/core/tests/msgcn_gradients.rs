use ndarray::Array2;
use puzzleseg::msgcn::train::{gradient_check, TrainSample};
use puzzleseg::msgcn::{AdjacencyScale, CombinationLabelMap, ModelConfig, MsgcnModel, PairLabel, Variant};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sample(n: usize, d: usize, seed: u64) -> TrainSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let appearance = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
    let geometry = Array2::from_shape_fn((n, 5), |(_, k)| {
        if k == 4 {
            rng.random_range(-1.5..1.5)
        } else {
            rng.random_range(0.0..1.0)
        }
    });
    let mut labels = CombinationLabelMap::separate(n);
    for p in 0..n {
        for q in 0..n {
            if p != q && (p % 2 == q % 2) && rng.random_range(0.0..1.0) < 0.7 {
                labels.set(p, q, PairLabel::Combined);
            }
        }
    }
    TrainSample {
        appearance,
        geometry,
        labels,
    }
}

fn check(variant: Variant, adjacency: AdjacencyScale, seed: u64) {
    let cfg = ModelConfig {
        d: 8,
        head_hidden: 8,
        variant,
        adjacency,
        seed,
        ..ModelConfig::default()
    };
    let model = MsgcnModel::new(cfg).unwrap();
    let s = sample(6, 8, seed + 100);
    let report = gradient_check(&model, &s, 1e-5).unwrap();
    let mut worst = 0.0f64;
    for e in &report {
        println!(
            "{:<28} n={:<4} rel={:.3e} entry={:.3e} abs={:.3e}",
            e.name, e.count, e.rel_err, e.max_rel_err, e.max_abs_err
        );
        worst = worst.max(e.rel_err);
    }
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn every_parameter_matches_finite_differences() {
    check(Variant::Full, AdjacencyScale::Raw, 1);
}

#[test]
fn gradients_with_mean_scaled_adjacency() {
    check(Variant::Full, AdjacencyScale::MeanByN, 2);
}

#[test]
fn gradients_of_single_cosine_variant() {
    check(Variant::SingleCosine, AdjacencyScale::Raw, 3);
}
