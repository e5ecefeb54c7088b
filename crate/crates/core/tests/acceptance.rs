//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use retopo::gradsuite;
use retopo::losses::{
    dice_loss_pair, estimate_kappa, loss_bc, loss_kl_boundary, loss_l1_boundary, loss_lp, loss_rec,
    loss_triplet_anatomy, loss_triplet_style, loss_zkl, loss_to, CurvatureBounds,
};
use retopo::model::OptimizerConfig;
use retopo::softadapt::weights_from_rates;
use retopo::synth::{
    apply_spatial_transform, apply_style_transform, derive_seed, generate_scan_with, SceneConfig, StyleAugConfig,
};
use retopo::tensor::{sigmoid, GradCheck, Graph, Tensor, Var};
use retopo::topology::{
    correct_lesions, expected_boundary, rectify_boundaries, surfaces_to_masks, AuditReport, BoundaryProbMap,
    BoundarySet, LayerMasks, LesionMasks, TopologySchema, BACKGROUND,
};
use retopo::train::{
    overfit_direct, run_ablation_suite, style_code, Arm, ArmResult, DiceAccumulator, ExperimentConfig,
    ExperimentData, MadAccumulator, MetricsReport, OverfitConfig,
};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn ordered(t: &Tensor) -> bool {
    let w = t.shape()[1];
    let d = t.data();
    (0..t.shape()[0] - 1).all(|b| (0..w).all(|i| d[b * w + i] <= d[(b + 1) * w + i]))
}

fn rectify(raw: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let v = g.constant(raw.clone());
    let r = rectify_boundaries(&mut g, BoundarySet(v)).expect("rectify");
    g.value(r.0).clone()
}

fn random_boundaries(rng: &mut ChaCha8Rng, s: usize, w: usize, h: usize) -> Tensor {
    Tensor::from_fn(vec![s, w], |_| rng.random_range(0.0..(h - 1) as f64))
}

fn c1_rectify() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut mono, mut idem, mut ident) = (0, 0, 0);
    for _ in 0..10_000 {
        let raw = random_boundaries(&mut rng, 5, 64, 64);
        let once = rectify(&raw);
        mono += usize::from(!ordered(&once));
        idem += usize::from(rectify(&once).data() != once.data());
        let mut sorted = raw.clone();
        for c in 0..64 {
            let mut col: Vec<f64> = (0..5).map(|b| raw.at(&[b, c])).collect();
            col.sort_by(f64::total_cmp);
            for (b, v) in col.into_iter().enumerate() {
                sorted.data_mut()[b * 64 + c] = v;
            }
        }
        ident += usize::from(rectify(&sorted).data() != sorted.data());
    }
    let el = t.elapsed();
    verdict(
        mono + idem + ident == 0 && el < Duration::from_secs(10),
        format!("10000 sets: {mono} non-monotone, {idem} non-idempotent, {ident} changed valid inputs; {}", secs(el)),
    )
}

fn c2_confinement() -> Verdict {
    let schema = TopologySchema::retina_default();
    let (h, w, k) = (64, 64, schema.lesions());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut leaked = 0usize;
    let mut kept = 0usize;
    for _ in 0..1000 {
        let raw = random_boundaries(&mut rng, 5, w, h);
        let masks = Tensor::from_fn(vec![k + 1, h, w], |_| rng.random::<f64>());
        let mut g = Graph::new();
        let b = g.constant(raw);
        let rect = rectify_boundaries(&mut g, BoundarySet(b)).unwrap();
        let layers = surfaces_to_masks(&mut g, rect, h, true).unwrap();
        let lm = LesionMasks { values: g.constant(masks), channels: schema.lesion_channels(), corrected: false };
        let fixed = correct_lesions(&mut g, &lm, &layers, &schema).unwrap();
        let out = g.value(fixed.values);
        let p = g.value(rect.0);
        for (kk, allowed) in schema.admissible.iter().enumerate() {
            for r in 0..h {
                for c in 0..w {
                    let inside = allowed.iter().any(|&l| {
                        (sigmoid(r as f64 - p.at(&[l, c])) - sigmoid(r as f64 - p.at(&[l + 1, c]))).round() == 1.0
                    });
                    let on = out.at(&[kk, r, c]).round() == 1.0;
                    if on && !inside {
                        leaked += 1;
                    }
                    kept += usize::from(on);
                }
            }
        }
    }
    verdict(leaked == 0, format!("1000 instances: {leaked} lesion pixels outside admissible layers ({kept} inside)"))
}

fn c3_gradients() -> Verdict {
    let t = Instant::now();
    let outcomes = gradsuite::run(None, 3, &GradCheck::default());
    let ste = gradsuite::round_ste_is_identity(3);
    let el = t.elapsed();
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed()).map(|o| o.name).collect();
    let worst = outcomes.iter().map(|o| o.worst()).fold(0.0, f64::max);
    verdict(
        failed.is_empty() && ste && el < Duration::from_secs(60),
        format!(
            "{} checks, worst rel. error {worst:.2e}, failures {failed:?}, round_ste identity {ste}; {}",
            outcomes.len(),
            secs(el)
        ),
    )
}

fn one_lesion_schema() -> TopologySchema {
    TopologySchema::from_json(r#"{"name":"t","surfaces":["A","B"],"lesions":[{"name":"L","layers":["A-B"]}]}"#)
        .unwrap()
}

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).item()
}

fn lp_pixel(lesion: f64) -> f64 {
    let schema = one_lesion_schema();
    let mut g = Graph::new();
    let layers = g.constant(Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 1.0, 1.0]).unwrap());
    let masks = LayerMasks { surfaces: layers, layers, binarized: true };
    let les = Tensor::new(vec![2, 2, 2], vec![lesion, 0.0, 0.0, 0.0, 1.0 - lesion, 1.0, 1.0, 1.0]).unwrap();
    let lm = LesionMasks { values: g.constant(les), channels: vec!["L".into(), BACKGROUND.into()], corrected: false };
    let l = loss_lp(&mut g, &lm, &masks, &schema).unwrap();
    scalar(&g, l)
}

/// Soft mask over 20 pixels with total mass `x`, packed from the left.
fn packed(x: f64) -> Tensor {
    Tensor::from_fn(vec![1, 1, 20], move |i| (x - i[2] as f64).clamp(0.0, 1.0))
}

fn unit(cos: f64) -> Tensor {
    Tensor::vector(&[cos, (1.0 - cos * cos).sqrt()])
}

fn derived_values() -> Vec<(&'static str, f64, f64)> {
    let mut out = Vec::new();
    let t = |s: Vec<usize>, d: &[f64]| Tensor::new(s, d.to_vec()).unwrap();

    let mut g = Graph::new();
    let x = g.constant(t(vec![2], &[0.0, 3f64.ln()]));
    let sm = g.softmax(x, 0).unwrap();
    out.push(("softmax [0, ln3] -> 0.25", g.value(sm).data()[0], 0.25));
    out.push(("softmax [0, ln3] -> 0.75", g.value(sm).data()[1], 0.75));
    let h = g.constant(Tensor::scalar(0.5));
    let r = g.round_ste(h).unwrap();
    out.push(("round_ste 0.5 -> 1", scalar(&g, r), 1.0));

    let p = g.constant(Tensor::full(vec![1, 4, 1], 0.25));
    let e = expected_boundary(&mut g, BoundaryProbMap(p)).unwrap();
    out.push(("expected boundary uniform over 4 rows", scalar(&g, e.0), 1.5));
    let p = g.constant(t(vec![1, 5, 1], &[0.25, 0.0, 0.0, 0.0, 0.75]));
    let e = expected_boundary(&mut g, BoundaryProbMap(p)).unwrap();
    out.push(("expected boundary 0.25@0 + 0.75@4", scalar(&g, e.0), 3.0));

    let b = g.constant(t(vec![2, 1], &[7.0, 5.0]));
    let rb = rectify_boundaries(&mut g, BoundarySet(b)).unwrap();
    out.push(("rectify [7,5] surface 0", g.value(rb.0).data()[0], 5.0));
    out.push(("rectify [7,5] surface 1", g.value(rb.0).data()[1], 5.0));
    let b = g.constant(t(vec![3, 1], &[3.0, 5.0, 1.0]));
    let rb = rectify_boundaries(&mut g, BoundarySet(b)).unwrap();
    for i in 0..3 {
        out.push(("rectify [3,5,1] -> 1", g.value(rb.0).data()[i], 1.0));
    }

    let b = g.constant(t(vec![2, 1], &[1.5, 3.0]));
    let m = surfaces_to_masks(&mut g, BoundarySet(b), 4, false).unwrap();
    for (r, want) in [0.1824, 0.3775, 0.6225, 0.8176].into_iter().enumerate() {
        out.push(("sigmoid surface column at 1.5", g.value(m.surfaces).data()[r], want));
    }
    let b = g.constant(t(vec![2, 1], &[0.5, 2.5]));
    let m = surfaces_to_masks(&mut g, BoundarySet(b), 4, false).unwrap();
    out.push(("layer map row 1 between 0.5 and 2.5", g.value(m.layers).data()[1], 0.4401));

    let schema = one_lesion_schema();
    let soft = g.constant(t(vec![1, 1, 1], &[0.5]));
    let masks = LayerMasks { surfaces: soft, layers: soft, binarized: false };
    let les = LesionMasks { values: g.constant(t(vec![2, 1, 1], &[0.8, 0.2])), channels: vec!["L".into(), BACKGROUND.into()], corrected: false };
    let c = correct_lesions(&mut g, &les, &masks, &schema).unwrap();
    out.push(("soft correction 0.8 * 0.5", g.value(c.values).data()[0], 0.4));
    for (region, want) in [(0.0, 0.0), (1.0, 1.0)] {
        let reg = g.constant(t(vec![1, 1, 1], &[region]));
        let masks = LayerMasks { surfaces: reg, layers: reg, binarized: true };
        let les = LesionMasks { values: g.constant(t(vec![2, 1, 1], &[1.0, 0.0])), channels: vec!["L".into(), BACKGROUND.into()], corrected: false };
        let c = correct_lesions(&mut g, &les, &masks, &schema).unwrap();
        out.push(("hard correction L=1", g.value(c.values).data()[0], want));
    }

    let b = g.constant(t(vec![2, 1], &[5.0, 3.0]));
    let l = loss_to(&mut g, BoundarySet(b)).unwrap();
    out.push(("loss_to [5,3]", scalar(&g, l), 2.0));
    let b = g.constant(t(vec![2, 2], &[5.0, 4.0, 3.0, 4.0]));
    let l = loss_to(&mut g, BoundarySet(b)).unwrap();
    out.push(("loss_to [[5,4],[3,4]]", scalar(&g, l), 1.0));

    let (delta, half) = (15usize, 7usize);
    let a = 0.3 * delta as f64 / (2.0 * (half * half) as f64);
    let parabola = Tensor::from_fn(vec![1, 40], |i| -a * (i[1] as f64).powi(2));
    let k = estimate_kappa(&[parabola], &["A".to_string()], delta).unwrap();
    out.push(("kappa of constant second difference 0.3", k.kappa[0].1, 0.3));
    let v = Tensor::from_fn(vec![1, 15], |i| if i[1] == 7 { 7.0 } else { 0.0 });
    for (kappa, want) in [(0.9334, 0.0), (0.4333, 0.5)] {
        let b = g.constant(v.clone());
        let bounds = CurvatureBounds { delta, kappa: vec![("A".into(), kappa)] };
        let l = loss_bc(&mut g, BoundarySet(b), &bounds).unwrap();
        out.push(("loss_bc V-shape (unnormalized)", scalar(&g, l) * 15.0, want));
    }

    out.push(("loss_lp single pixel 0.5 outside", lp_pixel(0.5), 0.1733));
    out.push(("loss_lp hard violation", lp_pixel(1.0), 4.0295));

    let p = g.constant(Tensor::full(vec![1, 4, 1], 0.25));
    let l = loss_kl_boundary(&mut g, BoundaryProbMap(p), &t(vec![1, 4, 1], &[0.0, 0.0, 1.0, 0.0])).unwrap();
    out.push(("KL point mass vs uniform", scalar(&g, l), 1.3863));

    let p = g.constant(t(vec![2, 3], &[3.0, 4.0, 5.0, 8.0, 9.0, 10.0]));
    let l = loss_l1_boundary(&mut g, BoundarySet(p), &t(vec![2, 3], &[1.0, 2.0, 3.0, 6.0, 7.0, 8.0]), false).unwrap();
    out.push(("L1 uniform 2 px offset", scalar(&g, l), 2.0));
    let p = g.constant(t(vec![1, 2], &[1.0, 5.0]));
    let l = loss_l1_boundary(&mut g, BoundarySet(p), &t(vec![1, 2], &[1.0, 1.0]), false).unwrap();
    out.push(("L1 offsets {0, 4}", scalar(&g, l), 2.0));

    let a = g.constant(t(vec![4], &[1.0, 1.0, 0.0, 0.0]));
    let bb = g.constant(t(vec![4], &[0.0, 1.0, 1.0, 0.0]));
    let l = dice_loss_pair(&mut g, a, bb, 0.0).unwrap();
    out.push(("Dice loss overlap 1 of 2+2", scalar(&g, l), 0.5));

    let img = Tensor::from_fn(vec![3, 3], |i| 0.1 * (i[0] + i[1]) as f64);
    let rec = g.constant(img.map(|v| v + 0.1));
    let region = Tensor::from_fn(vec![3, 3], |i| if i[0] > 0 { 1.0 } else { 0.0 });
    let (l, _) = loss_rec(&mut g, &img, rec, &region).unwrap();
    out.push(("loss_rec constant offset 0.1", scalar(&g, l), 0.1));

    for (mu, lv, want) in [(1.0, 0.0, 0.5), (0.0, 1.0, 0.3591)] {
        let m = g.constant(Tensor::vector(&[mu]));
        let v = g.constant(Tensor::vector(&[lv]));
        let l = loss_zkl(&mut g, m, v).unwrap();
        out.push(("loss_zKL", scalar(&g, l), want));
    }

    let anchor = g.constant(Tensor::vector(&[1.0, 0.0]));
    let sa = g.constant(unit(0.2));
    let ss = g.constant(unit(0.9));
    let l = loss_triplet_style(&mut g, anchor, sa, ss, false).unwrap();
    out.push(("style triplet sim_a 0.2, sim_s 0.9", scalar(&g, l), 0.7));

    // Reference of 10 pixels; with smoothing 1 a packed mass x gives DL = 1 - (2x+1)/(x+11).
    let p0 = g.constant(Tensor::vector(&[0.0, 0.0]));
    let pa = g.constant(Tensor::vector(&[1.0, 1.0]));
    let ps = g.constant(Tensor::vector(&[2f64.sqrt(), 2f64.sqrt()]));
    let lref = g.constant(packed(10.0));
    let ls = g.constant(packed(6.7 / 1.3));
    let la = g.constant(packed(8.9 / 1.1));
    let l = loss_triplet_anatomy(&mut g, [p0, pa, ps], [lref, la, ls], 1).unwrap();
    out.push(("anatomy triplet MSE 2/1, DL 0.3/0.1", scalar(&g, l), 1.2));

    let w = weights_from_rates(&[1.0, -1.0], None, 0.1);
    out.push(("SoftAdapt weight 0", w[0], 1.0997));
    out.push(("SoftAdapt weight 1", w[1], 0.9003));

    let r = t(vec![2, 3], &[1.0, 2.0, 3.0, 5.0, 6.0, 7.0]);
    let mut mad = MadAccumulator::new(2);
    mad.add(&r.map(|v| v + 2.0), &r);
    out.push(("MAD 2 px at 3.9 um/px", mad.finish(3.9).1, 7.8));

    // Reference channel 0 holds 4 pixels; the prediction empties it.
    let reference = Tensor::from_fn(vec![2, 2, 2], |i| if i[0] == 0 || i[1] == 0 { 1.0 } else { 0.0 });
    let mut pred = reference.clone();
    pred.data_mut()[..4].fill(0.0);
    let mut d = DiceAccumulator::new(2);
    d.add(&pred, &reference);
    out.push(("Dice of emptied channel, raw", d.finish(0.0)[0], 0.0));
    out.push(("Dice of emptied channel, smoothed s=1", d.finish(1.0)[0], 1.0 / 5.0));
    out
}

fn c4_derived() -> Verdict {
    let vals = derived_values();
    let bad: Vec<String> = vals
        .iter()
        .filter(|(_, got, want)| !((got - want).abs() <= 1e-3))
        .map(|(n, got, want)| format!("{n}: {got} vs {want}"))
        .collect();
    let gc = GradCheck::default();
    let sig = gc
        .check(|g, v| g.sigmoid(v[0]), &[Tensor::scalar(1.0)])
        .map(|r| r.worst())
        .unwrap_or(f64::INFINITY);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let comp = gc
        .check_sampled(
            |g, v| {
                let a = g.constant(Tensor::from_fn(vec![4, 1], |i| i[0] as f64));
                let d = g.sub(a, v[0])?;
                let s = g.sigmoid(d)?;
                g.sum(s)
            },
            || vec![Tensor::from_fn(vec![1, 3], |_| rng.random_range(0.0..3.0))],
        )
        .map(|r| r.worst())
        .unwrap_or(f64::INFINITY);
    verdict(
        bad.is_empty() && sig < 1e-6 && comp < 1e-4,
        format!(
            "{} values within 1e-3{}; sigmoid grad rel. error {sig:.1e}; sigma(A-P) 4x3 rel. error {comp:.1e}",
            vals.len() - bad.len(),
            if bad.is_empty() { String::new() } else { format!(", mismatches {bad:?}") }
        ),
    )
}

fn c5_overfit() -> Verdict {
    let schema = TopologySchema::retina_default();
    let scan = generate_scan_with(5, &SceneConfig::default(), &schema, Some(true)).unwrap();
    let t = Instant::now();
    match overfit_direct(&scan, &schema, &OverfitConfig::default()) {
        Ok(r) => verdict(
            r.loss_to == 0.0 && r.loss_lp < 1e-6 && r.steps <= 500,
            format!("{} steps: loss_to {:e}, loss_lp {:.2e}; {}", r.steps, r.loss_to, r.loss_lp, secs(t.elapsed())),
        ),
        Err(e) => verdict(false, format!("overfit failed: {e}")),
    }
}

/// Desk protocol shared by the ablation criteria: partial labels with half
/// of each batch drawn from the unlabeled pool.
fn desk_config() -> ExperimentConfig {
    ExperimentConfig {
        widths: vec![8, 16, 32],
        batch_labeled: 4,
        batch_unlabeled: 4,
        optimizer: OptimizerConfig::adam(3e-3),
        spatial_augment: false,
        style_augment: StyleAugConfig::none(),
        max_steps: Some(100),
        epochs: 100,
        ..ExperimentConfig::default()
    }
}

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn by(results: &[ArmResult], arm: Arm) -> Vec<&ArmResult> {
    SEEDS.iter().map(|&s| results.iter().find(|r| r.arm == arm && r.seed == s).expect("arm ran")).collect()
}

fn c6_bidirectional(results: &[ArmResult], per_arm: Duration) -> Verdict {
    let full = by(results, Arm::Full);
    let nolp = by(results, Arm::NoLp);
    let wins = full.iter().zip(&nolp).filter(|(f, n)| f.lesioned.mad_total_um < n.lesioned.mad_total_um).count();
    let viol: usize = full.iter().chain(&nolp).map(|r| r.test.violations()).sum();
    let pairs: Vec<String> = full
        .iter()
        .zip(&nolp)
        .map(|(f, n)| format!("{:.2}/{:.2}", f.lesioned.mad_total_um, n.lesioned.mad_total_um))
        .collect();
    let same_order = full.iter().zip(&nolp).all(|(f, n)| f.order_digest == n.order_digest);
    verdict(
        wins >= 4 && viol == 0 && same_order && per_arm < Duration::from_secs(30 * 60),
        format!(
            "lesioned MAD um full/-lp per seed [{}]: full lower in {wins}/5; violations {viol}; shared data order {same_order}; {} per arm",
            pairs.join(", "),
            secs(per_arm)
        ),
    )
}

fn c7_reconstruction(results: &[ArmResult]) -> Verdict {
    let full = by(results, Arm::Full);
    let norec = by(results, Arm::NoRec);
    let wins = full.iter().zip(&norec).filter(|(f, n)| f.test.mad_total_um <= n.test.mad_total_um).count();
    let pairs: Vec<String> =
        full.iter().zip(&norec).map(|(f, n)| format!("{:.2}/{:.2}", f.test.mad_total_um, n.test.mad_total_um)).collect();
    verdict(wins >= 4, format!("held-out MAD um full/-rec per seed [{}]: full not worse in {wins}/5", pairs.join(", ")))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (n(a) * n(b))
}

fn c8_triplet(cfg: &ExperimentConfig, data: &ExperimentData) -> Verdict {
    let schema = TopologySchema::retina_default();
    let res = match run_ablation_suite(cfg, &schema, data, &[Arm::PlusTriplet], &[1]) {
        Ok(r) => r,
        Err(e) => return verdict(false, format!("training failed: {e}")),
    };
    let model = &res[0].model;
    let (mut wins, mut pairs) = (0, 0);
    'outer: for (i, scan) in data.test.iter().enumerate() {
        for j in 0..4u64 {
            if pairs == 200 {
                break 'outer;
            }
            let seed = derive_seed(0x7E57, i as u64 * 4 + j);
            let anchor = style_code(model, &scan.image, &schema).unwrap();
            let spatial = apply_spatial_transform(scan, derive_seed(seed, 0), &schema).0;
            let styled = apply_style_transform(scan, derive_seed(seed, 1), &cfg.triplet_style).0;
            let c_sp = cosine(&anchor, &style_code(model, &spatial.image, &schema).unwrap());
            let c_st = cosine(&anchor, &style_code(model, &styled.image, &schema).unwrap());
            wins += usize::from(c_st < c_sp);
            pairs += 1;
        }
    }
    verdict(
        pairs == 200 && wins * 10 >= pairs * 9,
        format!("style copy less similar than spatial copy in {wins}/{pairs} pairs"),
    )
}

fn c9_metrics() -> Verdict {
    let t = |s: Vec<usize>, d: &[f64]| Tensor::new(s, d.to_vec()).unwrap();
    let reference = t(vec![2, 3], &[1.0, 2.0, 3.0, 5.0, 6.0, 7.0]);
    let pred = t(vec![2, 3], &[1.5, 2.0, 2.0, 5.0, 8.0, 7.0]);
    let mut mad = MadAccumulator::new(2);
    mad.add(&pred, &reference);

    // Two 3x3 scans with two lesion channels each.
    let ref_a = t(vec![2, 3, 3], &[1., 1., 0., 1., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0.]);
    let pred_a = t(vec![2, 3, 3], &[1., 0., 0., 1., 1., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0.]);
    let ref_b = t(vec![2, 3, 3], &[0., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0., 1., 0.]);
    let pred_b = t(vec![2, 3, 3], &[0., 0., 0., 0., 0., 0., 0., 0., 1., 0., 0., 0., 0., 0., 0., 0., 1., 0.]);
    let mut dice = DiceAccumulator::new(2);
    dice.add(&pred_a, &ref_a);
    let single = dice.finish(0.0);
    let mut db = DiceAccumulator::new(2);
    db.add(&pred_b, &ref_b);
    dice.merge(&db);

    let names = |p: &str| vec![format!("{p}0"), format!("{p}1")];
    let rep = MetricsReport::from_parts(names("s"), names("l"), 2, &mad, &dice, &AuditReport::default(), 3.9, 1.0);
    let checks = [
        ("MAD surface 0", rep.mad_um[0], 0.5 * 3.9),
        ("MAD surface 1", rep.mad_um[1], 2.0 / 3.0 * 3.9),
        ("MAD total", rep.mad_total_um, 3.5 / 6.0 * 3.9),
        ("Dice scan A channel 0", single[0], 4.0 / 6.0),
        ("Dice scan A empty channel", single[1], 1.0),
        ("Dice channel 0", rep.dice[0], 4.0 / 7.0),
        ("Dice channel 1", rep.dice[1], 1.0),
        ("Dice total", rep.dice_total, 11.0 / 14.0),
        ("smoothed Dice channel 0", rep.dice_smoothed[0], 5.0 / 8.0),
        ("smoothed Dice channel 1", rep.dice_smoothed[1], 1.0),
        ("smoothed Dice total", rep.dice_smoothed_total, 13.0 / 16.0),
    ];
    let bad: Vec<String> = checks
        .iter()
        .filter(|(_, got, want)| !((got - want).abs() <= 1e-9))
        .map(|(n, got, want)| format!("{n}: {got} vs {want}"))
        .collect();
    verdict(bad.is_empty(), format!("{} oracle values within 1e-9 {bad:?}", checks.len() - bad.len()))
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut all = true;
    let mut report = |n: usize, name: &str, v: Verdict| {
        all &= v.pass;
        println!("criterion {n} {} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    };
    report(1, "topology guarantees", c1_rectify());
    report(2, "confinement guarantee", c2_confinement());
    report(3, "gradient suite", c3_gradients());
    report(4, "formula spot checks", c4_derived());
    report(5, "overfit harness", c5_overfit());

    let schema = TopologySchema::retina_default();
    let cfg = desk_config();
    let data = ExperimentData::generate(&cfg, &schema).expect("experiment data");
    let arms = [Arm::Full, Arm::NoLp, Arm::NoRec];
    let t = Instant::now();
    match run_ablation_suite(&cfg, &schema, &data, &arms, &SEEDS) {
        Ok(results) => {
            let per_arm = t.elapsed() / (arms.len() * SEEDS.len()) as u32;
            report(6, "bidirectional influence", c6_bidirectional(&results, per_arm));
            report(7, "reconstruction ablation", c7_reconstruction(&results));
        }
        Err(e) => {
            report(6, "bidirectional influence", verdict(false, format!("training failed: {e}")));
            report(7, "reconstruction ablation", verdict(false, format!("training failed: {e}")));
        }
    }
    report(8, "triplet disentanglement", c8_triplet(&cfg, &data));
    report(9, "metric correctness", c9_metrics());
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
