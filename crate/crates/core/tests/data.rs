use std::collections::HashSet;

use mpl_core::data_synth::{
    color_name, fewshot_size, generate_corpus, generate_with_factors, split, split_sizes,
    subsample_fewshot, CorpusSpec, Domain, ProductRecord,
};
use proptest::prelude::*;

fn spec(n: usize, noise: f64) -> CorpusSpec {
    CorpusSpec {
        n_products: n,
        noise,
        domain: Domain::Novel,
        seed: 31,
        ..CorpusSpec::default()
    }
}

/// Multinomial logistic regression by full-batch gradient descent.
fn fit_softmax(x: &[Vec<f64>], y: &[usize], classes: usize, epochs: usize) -> Vec<Vec<f64>> {
    let dim = x[0].len() + 1;
    let mut w = vec![vec![0.0; dim]; classes];
    for _ in 0..epochs {
        let mut grad = vec![vec![0.0; dim]; classes];
        for (xi, &yi) in x.iter().zip(y) {
            let p = probs(&w, xi);
            for c in 0..classes {
                let g = p[c] - f64::from(c == yi);
                for (j, v) in xi.iter().chain([&1.0]).enumerate() {
                    grad[c][j] += g * v;
                }
            }
        }
        for (wc, gc) in w.iter_mut().zip(&grad) {
            for (a, g) in wc.iter_mut().zip(gc) {
                *a -= 0.5 * g / x.len() as f64;
            }
        }
    }
    w
}

fn probs(w: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    let z: Vec<f64> = w
        .iter()
        .map(|wc| x.iter().chain([&1.0]).zip(wc).map(|(a, b)| a * b).sum())
        .collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |a, (i, &x)| if x > a.1 { (i, x) } else { a },
        )
        .0
}

#[test]
fn color_is_recoverable_from_image_features_alone() {
    let s = spec(800, 0.1);
    let data = generate_with_factors(&s).unwrap();
    let features = |r: &ProductRecord| r.image_features.data().iter().map(|&v| v as f64).collect();
    let hidden: Vec<_> = data
        .iter()
        .filter(|(r, _)| !r.attributes.iter().any(|a| a.starts_with("color:")))
        .collect();
    assert!(hidden.len() > 200);
    for (r, f) in &hidden {
        let listed = r.attributes.join(" ");
        assert!(!listed.contains(color_name(f.color)));
    }
    let (train, test) = data.split_at(600);
    let x: Vec<Vec<f64>> = train.iter().map(|(r, _)| features(r)).collect();
    let y: Vec<usize> = train.iter().map(|(_, f)| f.color).collect();
    let w = fit_softmax(&x, &y, s.n_colors, 200);
    let probe = |set: &[&(ProductRecord, _)]| {
        let hits = set
            .iter()
            .filter(
                |(r, f): &&&(ProductRecord, mpl_core::data_synth::LatentFactors)| {
                    argmax(&probs(&w, &features(r))) == f.color
                },
            )
            .count();
        hits as f64 / set.len() as f64
    };
    let held_out: Vec<_> = test.iter().collect();
    let acc = probe(&held_out);
    assert!(acc > 0.9, "held-out color accuracy {acc}");
    let hidden_test: Vec<_> = hidden
        .into_iter()
        .filter(|(r, _)| test.iter().any(|(t, _)| t.id == r.id))
        .collect();
    assert!(probe(&hidden_test) > 0.9);
}

#[test]
fn noiseless_images_are_functions_of_the_factors() {
    let s = CorpusSpec {
        n_colors: 2,
        n_materials: 2,
        n_sizes: 2,
        n_categories: 2,
        ..spec(120, 0.0)
    };
    let data = generate_with_factors(&s).unwrap();
    for (a, fa) in &data {
        for (b, fb) in &data {
            let same = (fa.category, fa.color, fa.material, fa.size)
                == (fb.category, fb.color, fb.material, fb.size);
            assert_eq!(same, a.image_features == b.image_features);
        }
    }
}

#[test]
fn every_record_lists_its_brand_and_a_visual_factor() {
    for r in generate_corpus(&spec(200, 0.3)).unwrap() {
        assert!(r.attributes[0].starts_with("brand:"));
        assert!(r.attributes.len() >= 2);
        assert_eq!(r.image_features.shape(), &[4, 16]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn splits_partition_the_corpus(n in 3usize..120, seed in 0u64..1000, a in 0.1f64..0.8) {
        let b = (1.0 - a) * 0.6;
        let ratios = [a, b, 1.0 - a - b];
        let records = generate_corpus(&CorpusSpec { n_products: n, ..spec(n, 0.3) }).unwrap();
        let s = split(&records, ratios, seed).unwrap();
        prop_assert_eq!([s.train.len(), s.validation.len(), s.test.len()], split_sizes(n, &ratios));
        let ids: Vec<&str> = s.train.iter().chain(&s.validation).chain(&s.test).map(|r| r.id.as_str()).collect();
        let unique: HashSet<&str> = ids.iter().copied().collect();
        prop_assert_eq!(unique.len(), n);
        prop_assert_eq!(ids.len(), n);
        for (size, r) in split_sizes(n, &ratios).iter().zip(ratios) {
            prop_assert!((*size as f64 - r * n as f64).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn fewshot_subsets_have_the_rounded_up_size(n in 1usize..300, fraction in 0.001f64..1.0, seed in 0u64..100) {
        let records = generate_corpus(&CorpusSpec { n_products: n, ..spec(n, 0.3) }).unwrap();
        let few = subsample_fewshot(&records, fraction, seed).unwrap();
        let k = fewshot_size(n, fraction);
        prop_assert_eq!(few.len(), k);
        prop_assert!(k >= 1 && k as f64 >= fraction * n as f64 - 1e-9);
        prop_assert!((k as f64) < fraction * n as f64 + 1.0);
        let all: HashSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
        prop_assert!(few.iter().all(|r| all.contains(r.id.as_str())));
        prop_assert_eq!(few, subsample_fewshot(&records, fraction, seed).unwrap());
    }
}

#[test]
fn one_percent_of_the_desk_training_split() {
    assert_eq!(fewshot_size(2100, 0.01), 21);
    assert_eq!(fewshot_size(70, 0.01), 1);
    assert_eq!(fewshot_size(5, 1.0), 5);
}
