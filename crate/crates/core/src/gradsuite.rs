//! Named finite-difference checks for every differentiable op, engine
//! stage and loss, on small random inputs away from kinks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, TensorError};
use crate::losses;
use crate::tensor::{GradCheck, GradCheckReport, Graph, Tensor, Var};
use crate::topology::{
    admissible_sum, correct_lesions, expected_boundary, rectify_boundaries, surfaces_to_masks, BoundaryProbMap,
    BoundarySet, LesionMasks, TopologySchema, BACKGROUND,
};

type Body = fn(&mut Graph, &[Var]) -> Result<Var, TensorError>;
type Sampler = fn(&mut ChaCha8Rng) -> Vec<Tensor>;

/// One named check: a function of its inputs and a sampler for them.
pub struct GradCase {
    pub name: &'static str,
    pub kind: &'static str,
    body: Body,
    sample: Sampler,
}

#[derive(Clone, Debug)]
pub struct CaseOutcome {
    pub name: &'static str,
    pub kind: &'static str,
    pub report: Result<GradCheckReport, String>,
}

impl CaseOutcome {
    pub fn passed(&self) -> bool {
        self.report.as_ref().is_ok_and(|r| r.passed())
    }

    pub fn worst(&self) -> f64 {
        self.report.as_ref().map_or(f64::INFINITY, |r| r.worst())
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

fn lift<T>(r: crate::Result<T>) -> Result<T, TensorError> {
    r.map_err(|e| match e {
        Error::Tensor(t) => t,
        other => TensorError::Invalid { op: "loss", reason: other.to_string() },
    })
}

/// Ordered positions `[s, w]` with gaps of at least 1.5 rows.
fn ordered(rng: &mut ChaCha8Rng, s: usize, w: usize, top: f64) -> Tensor {
    let mut t = Tensor::zeros(vec![s, w]);
    for c in 0..w {
        let mut y = top + rng.random_range(0.0..1.0);
        for b in 0..s {
            t.set(&[b, c], y);
            y += rng.random_range(1.5..3.0);
        }
    }
    t
}

/// Three surfaces, two layers, lesion `a` in the upper layer and `b` in both.
pub fn small_schema() -> TopologySchema {
    TopologySchema::from_json(
        r#"{"name":"small","surfaces":["s0","s1","s2"],
            "lesions":[{"name":"a","layers":["s0-s1"]},{"name":"b","layers":["s0-s1","s1-s2"]}]}"#,
    )
    .expect("valid schema")
}

fn lesion_masks(v: Var, schema: &TopologySchema) -> LesionMasks {
    LesionMasks { values: v, channels: schema.lesion_channels(), corrected: false }
}

macro_rules! case {
    ($name:expr, $kind:expr, |$g:ident, $v:ident| $body:expr, |$rng:ident| $sample:expr) => {
        GradCase {
            name: $name,
            kind: $kind,
            body: |$g: &mut Graph, $v: &[Var]| -> Result<Var, TensorError> { $body },
            sample: |$rng: &mut ChaCha8Rng| -> Vec<Tensor> { $sample },
        }
    };
}

pub fn cases() -> Vec<GradCase> {
    vec![
        case!("add", "op", |g, v| g.add(v[0], v[1]), |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)]),
        case!("sub", "op", |g, v| g.sub(v[0], v[1]), |r| vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 1], -1.0, 1.0)]),
        case!("mul", "op", |g, v| g.mul(v[0], v[1]), |r| vec![uniform(r, &[2, 3, 4], -1.0, 1.0), uniform(r, &[3, 1], -1.0, 1.0)]),
        case!("div", "op", |g, v| g.div(v[0], v[1]), |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], 0.5, 2.0)]),
        case!("neg", "op", |g, v| g.neg(v[0]), |r| vec![uniform(r, &[5], -1.0, 1.0)]),
        case!("scale", "op", |g, v| g.scale(v[0], 1.7), |r| vec![uniform(r, &[5], -1.0, 1.0)]),
        case!("add_scalar", "op", |g, v| g.add_scalar(v[0], -0.3), |r| vec![uniform(r, &[5], -1.0, 1.0)]),
        case!("relu", "op", |g, v| g.relu(v[0]), |r| vec![uniform(r, &[8], -1.0, 1.0)]),
        case!("minimum", "op", |g, v| g.minimum(v[0], v[1]), |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)]),
        case!("abs", "op", |g, v| g.abs(v[0]), |r| vec![uniform(r, &[8], -1.0, 1.0)]),
        case!("sigmoid", "op", |g, v| g.sigmoid(v[0]), |r| vec![uniform(r, &[8], -4.0, 4.0)]),
        case!("exp", "op", |g, v| g.exp(v[0]), |r| vec![uniform(r, &[6], -2.0, 2.0)]),
        case!("log", "op", |g, v| g.log(v[0]), |r| vec![uniform(r, &[6], 0.2, 3.0)]),
        case!("sqrt", "op", |g, v| g.sqrt(v[0]), |r| vec![uniform(r, &[6], 0.2, 3.0)]),
        case!("square", "op", |g, v| g.square(v[0]), |r| vec![uniform(r, &[6], -2.0, 2.0)]),
        case!("clamp", "op", |g, v| g.clamp(v[0], -0.5, 0.5), |r| vec![uniform(r, &[8], -1.0, 1.0)]),
        case!("matmul", "op", |g, v| g.matmul(v[0], v[1]), |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0)]),
        case!(
            "conv2d_3x3",
            "op",
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1),
            |r| vec![uniform(r, &[2, 5, 6], -1.0, 1.0), uniform(r, &[3, 2, 3, 3], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)]
        ),
        case!(
            "conv2d_valid",
            "op",
            |g, v| g.conv2d(v[0], v[1], None, 0),
            |r| vec![uniform(r, &[2, 5, 5], -1.0, 1.0), uniform(r, &[2, 2, 3, 3], -1.0, 1.0)]
        ),
        case!(
            "conv2d_1x1",
            "op",
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 0),
            |r| vec![uniform(r, &[3, 4, 4], -1.0, 1.0), uniform(r, &[2, 3, 1, 1], -1.0, 1.0), uniform(r, &[2], -1.0, 1.0)]
        ),
        case!("softmax_axis0", "op", |g, v| g.softmax(v[0], 0), |r| vec![uniform(r, &[3, 4, 2], -2.0, 2.0)]),
        case!("softmax_axis1", "op", |g, v| g.softmax(v[0], 1), |r| vec![uniform(r, &[3, 4, 2], -2.0, 2.0)]),
        case!("sum", "op", |g, v| g.sum(v[0]), |r| vec![uniform(r, &[3, 4], -1.0, 1.0)]),
        case!("mean", "op", |g, v| g.mean(v[0]), |r| vec![uniform(r, &[3, 4], -1.0, 1.0)]),
        case!("sum_axis", "op", |g, v| g.sum_axis(v[0], 1), |r| vec![uniform(r, &[2, 3, 4], -1.0, 1.0)]),
        case!("mean_axis", "op", |g, v| g.mean_axis(v[0], 0), |r| vec![uniform(r, &[2, 3, 4], -1.0, 1.0)]),
        case!("mse", "op", |g, v| g.mse(v[0], v[1]), |r| vec![uniform(r, &[2, 5], -1.0, 1.0), uniform(r, &[2, 5], -1.0, 1.0)]),
        case!(
            "cosine_similarity",
            "op",
            |g, v| g.cosine_similarity(v[0], v[1]),
            |r| vec![uniform(r, &[6], -1.0, 1.0), uniform(r, &[6], -1.0, 1.0)]
        ),
        case!(
            "concat",
            "op",
            |g, v| g.concat(&[v[0], v[1]], 1),
            |r| vec![uniform(r, &[2, 3, 2], -1.0, 1.0), uniform(r, &[2, 1, 2], -1.0, 1.0)]
        ),
        case!("slice", "op", |g, v| g.slice(v[0], 1, 1, 3), |r| vec![uniform(r, &[2, 4, 3], -1.0, 1.0)]),
        case!("pad", "op", |g, v| g.pad(v[0], 0, 1, 2), |r| vec![uniform(r, &[2, 3], -1.0, 1.0)]),
        case!("reshape", "op", |g, v| g.reshape(v[0], &[4, 3]), |r| vec![uniform(r, &[2, 6], -1.0, 1.0)]),
        case!("avg_pool2", "op", |g, v| g.avg_pool2(v[0]), |r| vec![uniform(r, &[2, 4, 6], -1.0, 1.0)]),
        case!("upsample2", "op", |g, v| g.upsample2(v[0]), |r| vec![uniform(r, &[2, 3, 2], -1.0, 1.0)]),
        case!(
            "expected_boundary",
            "engine",
            |g, v| {
                let p = g.softmax(v[0], 1)?;
                lift(expected_boundary(g, BoundaryProbMap(p)).map(|b| b.0))
            },
            |r| vec![uniform(r, &[3, 8, 4], -2.0, 2.0)]
        ),
        case!(
            "rectify_boundaries",
            "engine",
            |g, v| lift(rectify_boundaries(g, BoundarySet(v[0])).map(|b| b.0)),
            |r| vec![uniform(r, &[4, 5], 0.0, 10.0)]
        ),
        case!(
            "surfaces_to_masks",
            "engine",
            |g, v| lift(surfaces_to_masks(g, BoundarySet(v[0]), 10, false).map(|m| m.layers)),
            |r| vec![ordered(r, 3, 4, 1.5)]
        ),
        case!(
            "admissible_sum",
            "engine",
            |g, v| {
                let schema = small_schema();
                let m = lift(surfaces_to_masks(g, BoundarySet(v[0]), 10, false))?;
                lift(admissible_sum(g, &m, &schema, 1))
            },
            |r| vec![ordered(r, 3, 4, 1.5)]
        ),
        case!(
            "correct_lesions",
            "engine",
            |g, v| {
                let schema = small_schema();
                let m = lift(surfaces_to_masks(g, BoundarySet(v[0]), 10, false))?;
                let l = g.softmax(v[1], 0)?;
                lift(correct_lesions(g, &lesion_masks(l, &schema), &m, &schema).map(|c| c.values))
            },
            |r| vec![ordered(r, 3, 4, 1.5), uniform(r, &[3, 10, 4], -2.0, 2.0)]
        ),
        case!("loss_to", "loss", |g, v| lift(losses::loss_to(g, BoundarySet(v[0]))), |r| vec![uniform(r, &[4, 6], 0.0, 8.0)]),
        case!(
            "loss_bc",
            "loss",
            |g, v| {
                let bounds = losses::CurvatureBounds {
                    delta: 5,
                    kappa: vec![("a".into(), 0.2), ("b".into(), 0.05), ("c".into(), 0.4)],
                };
                lift(losses::loss_bc(g, BoundarySet(v[0]), &bounds))
            },
            |r| vec![uniform(r, &[3, 12], 0.0, 8.0)]
        ),
        case!(
            "loss_lp",
            "loss",
            |g, v| {
                let schema = small_schema();
                let m = lift(surfaces_to_masks(g, BoundarySet(v[0]), 10, false))?;
                let l = g.softmax(v[1], 0)?;
                lift(losses::loss_lp(g, &lesion_masks(l, &schema), &m, &schema))
            },
            |r| vec![ordered(r, 3, 4, 1.5), uniform(r, &[3, 10, 4], -2.0, 2.0)]
        ),
        case!(
            "loss_kl_boundary",
            "loss",
            |g, v| {
                let target = losses::gaussian_target(&Tensor::new(vec![2, 3], vec![2.3, 4.0, 5.6, 6.1, 7.5, 8.2]).unwrap(), 10, 0.8);
                let p = g.softmax(v[0], 1)?;
                lift(losses::loss_kl_boundary(g, BoundaryProbMap(p), &target))
            },
            |r| vec![uniform(r, &[2, 10, 3], -2.0, 2.0)]
        ),
        case!(
            "loss_l1_boundary",
            "loss",
            |g, v| {
                let reference = Tensor::from_fn(vec![3, 4], |i| (i[0] * 3 + i[1]) as f64 * 0.7);
                lift(losses::loss_l1_boundary(g, BoundarySet(v[0]), &reference, false))
            },
            |r| vec![uniform(r, &[3, 4], 0.0, 8.0)]
        ),
        case!(
            "loss_l1_boundary_squared",
            "loss",
            |g, v| {
                let reference = Tensor::from_fn(vec![3, 4], |i| (i[0] * 3 + i[1]) as f64 * 0.7);
                lift(losses::loss_l1_boundary(g, BoundarySet(v[0]), &reference, true))
            },
            |r| vec![uniform(r, &[3, 4], 0.0, 8.0)]
        ),
        case!(
            "dice_loss_pair",
            "loss",
            |g, v| lift(losses::dice_loss_pair(g, v[0], v[1], losses::DICE_SMOOTH)),
            |r| vec![uniform(r, &[4, 4], 0.0, 1.0), uniform(r, &[4, 4], 0.0, 1.0)]
        ),
        case!(
            "loss_dice",
            "loss",
            |g, v| {
                let l = g.softmax(v[0], 0)?;
                let pred = LesionMasks { values: l, channels: vec!["a".into(), "b".into(), BACKGROUND.into()], corrected: true };
                let reference = g.constant(Tensor::from_fn(vec![3, 5, 5], |i| ((i[0] + i[1] * 2 + i[2]) % 3 == 0) as u8 as f64));
                lift(losses::loss_dice(g, &pred, reference, 2, losses::DICE_SMOOTH))
            },
            |r| vec![uniform(r, &[3, 5, 5], -2.0, 2.0)]
        ),
        case!(
            "loss_rec",
            "loss",
            |g, v| {
                let original = Tensor::from_fn(vec![6, 5], |i| ((i[0] * 5 + i[1]) as f64 * 0.37).sin() * 0.5 + 0.5);
                let region = Tensor::from_fn(vec![6, 5], |i| (i[0] >= 2 && i[0] < 5) as u8 as f64);
                lift(losses::loss_rec(g, &original, v[0], &region).map(|(l, _)| l))
            },
            |r| vec![uniform(r, &[6, 5], 0.0, 1.0)]
        ),
        case!(
            "loss_zkl",
            "loss",
            |g, v| lift(losses::loss_zkl(g, v[0], v[1])),
            |r| vec![uniform(r, &[6], -1.0, 1.0), uniform(r, &[6], -1.0, 1.0)]
        ),
        case!(
            "loss_triplet_style",
            "loss",
            |g, v| lift(losses::loss_triplet_style(g, v[0], v[1], v[2], false)),
            |r| {
                let a = uniform(r, &[5], -1.0, 1.0);
                let far = uniform(r, &[5], -1.0, 1.0);
                let near = Tensor::from_fn(vec![5], |i| a.data()[i[0]] + 0.3 * far.data()[i[0]]);
                vec![a, far, near]
            }
        ),
        case!(
            "loss_triplet_anatomy",
            "loss",
            |g, v| {
                let la = g.softmax(v[3], 0)?;
                let lb = g.softmax(v[4], 0)?;
                let lc = g.softmax(v[5], 0)?;
                lift(losses::loss_triplet_anatomy(g, [v[0], v[1], v[2]], [la, lb, lc], 2))
            },
            |r| {
                let p = uniform(r, &[2, 4], 0.0, 6.0);
                let pa = uniform(r, &[2, 4], 0.0, 6.0);
                let ps = Tensor::from_fn(vec![2, 4], |i| p.at(&[i[0], i[1]]) + 0.7 * pa.at(&[i[0], i[1]]) - 2.0);
                let la = uniform(r, &[3, 4, 4], -2.0, 2.0);
                let lb = uniform(r, &[3, 4, 4], -2.0, 2.0);
                let lc = Tensor::from_fn(vec![3, 4, 4], |i| 2.0 * lb.at(&[i[0], i[1], i[2]]) - la.at(&[i[0], i[1], i[2]]));
                vec![p, pa, ps, la, lb, lc]
            }
        ),
    ]
}

/// Runs every case whose name contains `filter` (all when `None`).
pub fn run(filter: Option<&str>, seed: u64, checker: &GradCheck) -> Vec<CaseOutcome> {
    let selected: Vec<GradCase> = cases().into_iter().filter(|c| filter.is_none_or(|f| c.name.contains(f))).collect();
    crate::par::map_indexed(selected.len(), |i| {
        let c = &selected[i];
        let mut rng = ChaCha8Rng::seed_from_u64(crate::synth::derive_seed(seed, i as u64));
        let report = checker.check_sampled(c.body, || (c.sample)(&mut rng)).map_err(|e| e.to_string());
        CaseOutcome { name: c.name, kind: c.kind, report }
    })
}

/// Backward of the straight-through rounding reproduces the upstream
/// gradient bit for bit.
pub fn round_ste_is_identity(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, &[4, 5], -3.0, 3.0);
    let w = uniform(&mut rng, &[4, 5], -1.0, 1.0);
    let mut g = Graph::new();
    let xv = g.param(x);
    let r = match g.round_ste(xv) {
        Ok(r) => r,
        Err(_) => return false,
    };
    let wv = g.constant(w.clone());
    let Ok(p) = g.mul(r, wv) else { return false };
    let Ok(s) = g.sum(p) else { return false };
    if g.backward(s).is_err() {
        return false;
    }
    g.grad(xv).is_some_and(|gr| gr.data() == w.data())
}
