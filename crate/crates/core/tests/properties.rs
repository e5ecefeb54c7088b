use proptest::prelude::*;

use retopo::model::Model;
use retopo::softadapt::weights_from_rates;
use retopo::synth::{generate_scan_with, AnnotationMode, SceneConfig};
use retopo::tensor::{Graph, Tensor};
use retopo::topology::{
    admissible_region, binarized_layers, correct_lesions, rectify_boundaries, rectify_values, surfaces_to_masks,
    BoundarySet, LesionMasks, TopologySchema,
};
use retopo::train::{batch_gradients, gated_components, Component, ExperimentConfig, LossSwitches};

fn table(s: usize, w: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(lo..hi, s * w).prop_map(move |d| Tensor::new(vec![s, w], d).unwrap())
}

fn is_ordered(t: &Tensor) -> bool {
    let w = t.shape()[1];
    t.data().chunks(w).collect::<Vec<_>>().windows(2).all(|p| p[0].iter().zip(p[1]).all(|(a, b)| a <= b))
}

fn graph_rectify(raw: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let v = g.constant(raw.clone());
    let r = rectify_boundaries(&mut g, BoundarySet(v)).unwrap();
    g.value(r.0).clone()
}

/// Ordered surfaces at least `gap` rows apart whose positions keep `margin`
/// away from every integer row.
fn spaced_boundaries(s: usize, w: usize, gap: f64, margin: f64) -> impl Strategy<Value = Tensor> {
    (prop::collection::vec(0.0..3.0f64, s * w), prop::collection::vec(margin..1.0 - margin, s * w)).prop_map(
        move |(steps, fracs)| {
            let mut d = vec![0.0; s * w];
            for c in 0..w {
                let mut prev = f64::NEG_INFINITY;
                for b in 0..s {
                    let y = if b == 0 { 1.0 + steps[c] } else { prev + gap + steps[b * w + c] };
                    let mut v = y.floor() + fracs[b * w + c];
                    if v < prev + gap {
                        v += 1.0;
                    }
                    d[b * w + c] = v;
                    prev = v;
                }
            }
            Tensor::new(vec![s, w], d).unwrap()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn rectify_is_monotone(raw in table(5, 16, 0.0, 63.0)) {
        prop_assert!(is_ordered(&rectify_values(&raw)));
        prop_assert!(is_ordered(&graph_rectify(&raw)));
    }

    #[test]
    fn rectify_is_idempotent(raw in table(5, 16, 0.0, 63.0)) {
        let once = rectify_values(&raw);
        prop_assert_eq!(rectify_values(&once), once.clone());
        prop_assert_eq!(graph_rectify(&once), once);
    }

    #[test]
    fn rectify_keeps_ordered_input(raw in table(5, 16, 0.0, 63.0)) {
        let w = 16;
        let mut sorted = raw.clone();
        for c in 0..w {
            let mut col: Vec<f64> = (0..5).map(|b| raw.data()[b * w + c]).collect();
            col.sort_by(f64::total_cmp);
            for (b, v) in col.into_iter().enumerate() {
                sorted.data_mut()[b * w + c] = v;
            }
        }
        prop_assert_eq!(rectify_values(&sorted), sorted.clone());
        prop_assert_eq!(graph_rectify(&sorted), sorted);
    }

    #[test]
    fn corrected_lesions_are_confined(
        raw in table(5, 12, -2.0, 18.0),
        masks in prop::collection::vec(0.0..1.0f64, 4 * 16 * 12),
    ) {
        let schema = TopologySchema::retina_default();
        let (h, w) = (16, 12);
        let mut g = Graph::new();
        let b = g.constant(raw);
        let rect = rectify_boundaries(&mut g, BoundarySet(b)).unwrap();
        let layers = surfaces_to_masks(&mut g, rect, h, true).unwrap();
        let lv = g.constant(Tensor::new(vec![4, h, w], masks).unwrap());
        let lesions = LesionMasks { values: lv, channels: schema.lesion_channels(), corrected: false };
        let fixed = correct_lesions(&mut g, &lesions, &layers, &schema).unwrap();
        let out = g.value(fixed.values);
        let bin = binarized_layers(g.value(rect.0), h);
        prop_assert_eq!(g.value(layers.layers).data(), bin.data());
        for k in 0..schema.lesions() {
            let region = admissible_region(&bin, &schema, k);
            for (j, inside) in region.into_iter().enumerate() {
                if !inside {
                    prop_assert_eq!(out.data()[k * h * w + j].round(), 0.0);
                }
            }
        }
    }

    #[test]
    fn regions_partition_columns(p in spaced_boundaries(5, 10, 4.0, 0.1)) {
        let (s, w) = (5, 10);
        let h = (p.data().iter().cloned().fold(0.0, f64::max) + 6.0) as usize;
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let layers = binarized_layers(&p, h);
        for r in 0..h {
            for c in 0..w {
                let above = (1.0 - sig(r as f64 - p.data()[c])).round();
                let below = sig(r as f64 - p.data()[(s - 1) * w + c]).round();
                let inside: f64 = (0..s - 1).map(|l| layers.data()[(l * h + r) * w + c]).sum();
                prop_assert_eq!(above + inside + below, 1.0, "row {} column {}", r, c);
            }
        }
    }

    #[test]
    fn softadapt_weights(
        rates in prop::collection::vec(-1.0..1.0f64, 2..8),
        mags in prop::collection::vec(0.0..10.0f64, 8),
        beta in 0.01..5.0f64,
    ) {
        let n = rates.len();
        for m in [None, Some(&mags[..n])] {
            let w = weights_from_rates(&rates, m, beta);
            prop_assert!(w.iter().all(|&x| x > 0.0));
            prop_assert!((w.iter().sum::<f64>() - n as f64).abs() < 1e-9);
        }
        let w = weights_from_rates(&rates, None, beta);
        let slowest = (0..n).max_by(|&a, &b| rates[a].total_cmp(&rates[b])).unwrap();
        let heaviest = (0..n).max_by(|&a, &b| w[a].total_cmp(&w[b])).unwrap();
        prop_assert!(rates[heaviest] == rates[slowest]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn gated_out_losses_have_zero_gradient(seed in 0u64..1000, lesion in any::<bool>(), mode_ix in 0usize..3) {
        let schema = TopologySchema::retina_default();
        let mut scan = generate_scan_with(seed, &SceneConfig::default(), &schema, Some(lesion)).unwrap();
        scan.mode = [AnnotationMode::LayersOnly, AnnotationMode::LesionsOnly, AnnotationMode::Unlabeled][mode_ix];
        let base = ExperimentConfig {
            widths: vec![4, 8],
            style_widths: vec![4, 4],
            style_dim: 4,
            spatial_augment: false,
            ..ExperimentConfig::default()
        };
        let model = Model::new(base.model_config(&schema), seed).unwrap();
        let active = gated_components(&base.losses, &scan);
        for c in [Component::Kl, Component::L1, Component::Dice] {
            if active.contains(&c) {
                continue;
            }
            let mut losses = LossSwitches::default();
            for other in Component::ALL {
                losses.set(other, other == c);
            }
            let cfg = ExperimentConfig { losses, ..base.clone() };
            let res = batch_gradients(&model, &cfg, &schema, std::slice::from_ref(&scan), seed).unwrap();
            prop_assert!(res.grads.iter().all(|t| t.data().iter().all(|&v| v == 0.0)), "{:?}", c);
        }
    }
}
