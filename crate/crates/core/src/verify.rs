//! Randomized finite-difference suites for every differentiable layer and
//! loss, grouped by module. Used by `sckan gradcheck` and the test suite.

use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use crate::backbone::{SegNetParams, SegNetVars, TapLevel};
use crate::ckaf::{fuse, predict_rows, ClassProtos, FusionParams, FusionStrategy};
use crate::error::{contract, Error, Result};
use crate::kan::{kan_init, KanVars};
use crate::numerics::{grad_check, GradCheckOptions, GradCheckReport, Graph, Rng, Tensor, Var};
use crate::pcc::{contrastive_loss, decorrelation_loss, spcl_loss, PcclConfig, ProtoTag, Region};
use crate::ssd::Source;
use crate::trainer::hybrid_loss;
use crate::volume::Mask;

pub const TOLERANCE: f64 = 1e-4;
pub const EPS: f64 = 1e-5;
pub const DEFAULT_SEEDS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Kan,
    Backbone,
    Pcc,
    Ckaf,
    Trainer,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Kan, Suite::Backbone, Suite::Pcc, Suite::Ckaf, Suite::Trainer];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Kan => "kan",
            Suite::Backbone => "backbone",
            Suite::Pcc => "pcc",
            Suite::Ckaf => "ckaf",
            Suite::Trainer => "trainer",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| contract(format!("unknown gradcheck module `{s}`")))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OpCheck {
    pub suite: Suite,
    pub op: &'static str,
    pub seed: u64,
    pub max_rel_error: f64,
    pub passed: bool,
    /// `(parameter, relative error)` of every failing parameter.
    pub failures: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub checks: Vec<OpCheck>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &OpCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng).with_grad()
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.range(lo, hi)).collect()).expect("shape").with_grad()
}

/// `Σ x ⊙ r` with a fixed random `r`, so every output entry matters.
fn project<'g>(x: Var<'g>, seed: u64) -> Var<'g> {
    let mut rng = Rng::with_stream(seed, 99);
    let r = (0..x.numel()).map(|_| rng.normal()).collect();
    x.mul(x.graph().constant(&x.shape(), r)).sum()
}

fn random_mask(dims: [usize; 3], classes: u8, rng: &mut Rng) -> Mask {
    let n = dims.iter().product();
    let mut data: Vec<u8> = (0..n).map(|_| rng.below(classes as usize) as u8).collect();
    data[0] = 1;
    Mask::new(dims, data).expect("dims")
}

fn record(suite: Suite, op: &'static str, seed: u64, report: Result<GradCheckReport>) -> OpCheck {
    match report {
        Ok(r) => OpCheck {
            suite,
            op,
            seed,
            max_rel_error: r.max_rel_error(),
            passed: r.passed(TOLERANCE),
            failures: r.failures(TOLERANCE).map(|p| (p.name.clone(), p.max_rel_error)).collect(),
        },
        Err(e) => {
            OpCheck { suite, op, seed, max_rel_error: f64::INFINITY, passed: false, failures: vec![(format!("error: {e}"), f64::INFINITY)] }
        }
    }
}

fn opts(seed: u64, max_entries: Option<usize>) -> GradCheckOptions {
    GradCheckOptions { eps: EPS, max_entries, seed }
}

fn kan_checks(seed: u64, out: &mut Vec<OpCheck>) -> Result<()> {
    let mut rng = Rng::with_stream(seed, 10);
    let (i, o, n) = (1 + rng.below(4), 1 + rng.below(4), 2 + rng.below(5));
    let degree = 2 + rng.below(2);
    let mut layer = kan_init(i, o, 3 + rng.below(4), degree, &mut rng)?;
    layer.use_base = rng.below(4) != 0;
    layer.spline_coeffs = randn(layer.spline_coeffs.shape(), &mut rng);
    let x = uniform(&[n, i], -1.2, 1.2, &mut rng);
    let r = grad_check(
        |_, v| {
            let vars = KanVars { spline_coeffs: v[0], base_weight: v[1], spline_scale: v[2] };
            project(layer.forward(v[3], &vars).expect("kan forward"), seed)
        },
        &[("spline_coeffs", &layer.spline_coeffs), ("base_weight", &layer.base_weight), ("spline_scale", &layer.spline_scale), ("x", &x)],
        &opts(seed, None),
    );
    out.push(record(Suite::Kan, "kan_linear", seed, r));
    Ok(())
}

fn backbone_checks(seed: u64, out: &mut Vec<OpCheck>) -> Result<()> {
    let mut rng = Rng::with_stream(seed, 20);
    let (cin, cout) = (1 + rng.below(3), 1 + rng.below(3));
    let ks = if rng.below(2) == 0 { 3 } else { 1 };
    let dims = [2 + rng.below(4), 2 + rng.below(4), 2 + rng.below(4)];
    let x = randn(&[cin, dims[0], dims[1], dims[2]], &mut rng);
    let w = randn(&[cout, cin, ks, ks, ks], &mut rng);
    let b = randn(&[cout], &mut rng);
    let r = grad_check(|_, v| project(v[0].conv3d(v[1], v[2]), seed), &[("x", &x), ("weight", &w), ("bias", &b)], &opts(seed, None));
    out.push(record(Suite::Backbone, "conv3d", seed, r));

    let even = [2 * (1 + rng.below(3)), 2 * (1 + rng.below(3)), 2 * (1 + rng.below(3))];
    let xp = randn(&[cin, even[0], even[1], even[2]], &mut rng);
    let r = grad_check(|_, v| project(v[0].avg_pool2(), seed), &[("x", &xp)], &opts(seed, None));
    out.push(record(Suite::Backbone, "avg_pool2", seed, r));
    let r = grad_check(|_, v| project(v[0].upsample2(), seed), &[("x", &x)], &opts(seed, None));
    out.push(record(Suite::Backbone, "upsample2", seed, r));

    let tap = if rng.below(2) == 0 { TapLevel::Half } else { TapLevel::Full };
    let net = SegNetParams::init(tap, &mut rng);
    let input = Tensor::new(&[1, 8, 8, 4], (0..256).map(|_| rng.uniform()).collect())?;
    let named = net.named_tensors();
    let params: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    let r = grad_check(
        |g, v| {
            let x = g.constant(input.shape(), input.data().to_vec());
            let o = net.forward(x, &SegNetVars::from_vars(v.to_vec())).expect("segnet forward");
            project(o.logits, seed).add(project(o.features, seed + 1))
        },
        &params,
        &opts(seed, Some(6)),
    );
    out.push(record(Suite::Backbone, "segnet", seed, r));
    Ok(())
}

/// Prototypes of two samples per source, `|C| = 2`, `K = 3`, plus means.
fn tagged_set(k: usize) -> Vec<ProtoTag> {
    let mut tags = Vec::new();
    for source in [Source::Labeled, Source::Unlabeled] {
        for sample in 0..2 {
            for class in 0..2u8 {
                for r in 0..k {
                    tags.push(ProtoTag { class, region: Region::Rank(r), source, sample });
                }
                tags.push(ProtoTag { class, region: Region::Mean, source, sample });
            }
        }
    }
    tags
}

fn pcc_checks(seed: u64, out: &mut Vec<OpCheck>) -> Result<()> {
    let mut rng = Rng::with_stream(seed, 30);
    let k = 3;
    let d = 2 + rng.below(6);
    let cfg = PcclConfig { tau: rng.range(0.1, 1.0), alpha: rng.range(-0.2, 0.6), lambda_div: rng.uniform(), ..Default::default() };
    let tags = tagged_set(k);
    let p = randn(&[tags.len(), d], &mut rng);
    let r = grad_check(|_, v| contrastive_loss(v[0], &tags, &cfg).expect("valid pairs"), &[("prototypes", &p)], &opts(seed, None));
    out.push(record(Suite::Pcc, "contrastive", seed, r));

    let groups: Vec<Tensor> = (0..4).map(|_| randn(&[k, d], &mut rng)).collect();
    let named: Vec<(String, &Tensor)> = groups.iter().enumerate().map(|(i, t)| (format!("group{i}"), t)).collect();
    let params: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    let r = grad_check(|g, v| decorrelation_loss(g, v, &cfg).0, &params, &opts(seed, None));
    out.push(record(Suite::Pcc, "decorrelation", seed, r));

    let r = grad_check(
        |g, v| {
            let opt = contrastive_loss(v[0], &tags, &cfg).expect("valid pairs");
            let div = decorrelation_loss(g, &v[1..], &cfg).0;
            spcl_loss(opt, div, &cfg)
        },
        &[("prototypes", &p), ("group0", &groups[0]), ("group1", &groups[1])],
        &opts(seed, None),
    );
    out.push(record(Suite::Pcc, "spcl", seed, r));
    Ok(())
}

fn ckaf_checks(seed: u64, out: &mut Vec<OpCheck>) -> Result<()> {
    let mut rng = Rng::with_stream(seed, 40);
    let (k, classes) = (3, 2);
    let d = 2 + rng.below(5);
    let labeled: Vec<Tensor> = (0..4).map(|_| randn(&[k, d], &mut rng)).collect();
    let unlabeled: Vec<Tensor> = (0..4).map(|_| randn(&[k, d], &mut rng)).collect();
    for (strategy, op) in [(FusionStrategy::Kan, "fuse_kan"), (FusionStrategy::Mlp, "fuse_mlp"), (FusionStrategy::Average, "fuse_average")]
    {
        let mut params = FusionParams::init(strategy, d, d, &mut rng)?;
        for t in params.tensors_mut() {
            let s = t.shape().to_vec();
            *t = Tensor::randn(&s, 0.5, &mut rng).with_grad();
        }
        let named = params.named_tensors();
        let mut list: Vec<(String, &Tensor)> = named.into_iter().collect();
        for (i, t) in labeled.iter().enumerate() {
            list.push((format!("labeled{i}"), t));
        }
        let refs: Vec<(&str, &Tensor)> = list.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        let nf = params.named_tensors().len();
        let r = grad_check(
            |g, v| {
                let vars = params.vars_from(&v[..nf]);
                let l: Vec<ClassProtos> =
                    v[nf..].iter().enumerate().map(|(i, &p)| ClassProtos { class: (i % 2) as u8, protos: p }).collect();
                let u: Vec<ClassProtos> = unlabeled
                    .iter()
                    .enumerate()
                    .map(|(i, t)| ClassProtos { class: (i % 2) as u8, protos: g.constant(t.shape(), t.data().to_vec()) })
                    .collect();
                project(fuse(&l, &u, &params, &vars, classes, k).expect("fuse"), seed)
            },
            &refs,
            &opts(seed, None),
        );
        out.push(record(Suite::Ckaf, op, seed, r));
    }

    let n = 3 + rng.below(6);
    let feats = randn(&[n, d], &mut rng);
    let cons = randn(&[classes * k, d], &mut rng);
    let tau_p = rng.range(0.1, 1.0);
    let r = grad_check(
        |_, v| project(predict_rows(v[0], v[1], k, tau_p), seed),
        &[("features", &feats), ("consensus", &cons)],
        &opts(seed, None),
    );
    out.push(record(Suite::Ckaf, "prototype_predict", seed, r));
    Ok(())
}

fn trainer_checks(seed: u64, out: &mut Vec<OpCheck>) -> Result<()> {
    let mut rng = Rng::with_stream(seed, 50);
    let dims = [2, 2 + rng.below(3), 2 + rng.below(3)];
    let n: usize = dims.iter().product();
    let target = random_mask(dims, 2, &mut rng);
    let logits = randn(&[2, n], &mut rng);
    let r = grad_check(|_, v| hybrid_loss(v[0].softmax(0), &target).expect("hybrid"), &[("logits", &logits)], &opts(seed, None));
    out.push(record(Suite::Trainer, "hybrid", seed, r));

    // Every term of the total objective from shared parameters.
    let (k, d) = (3, 2 + rng.below(4));
    let target_u = random_mask(dims, 2, &mut rng);
    let logits_u = randn(&[2, n], &mut rng);
    let feats = randn(&[n, d], &mut rng);
    let bank = randn(&[2 * k, d], &mut rng);
    let lambda = rng.uniform();
    let cfg = PcclConfig { tau: rng.range(0.1, 1.0), ..Default::default() };
    let tags: Vec<ProtoTag> = (0..2u8)
        .flat_map(|class| (0..k).map(move |r| ProtoTag { class, region: Region::Rank(r), source: Source::Labeled, sample: 0 }))
        .collect();
    let r = grad_check(
        |g, v| {
            let seg_l = hybrid_loss(v[0].softmax(0), &target).expect("hybrid");
            let seg_u = hybrid_loss(v[1].softmax(0), &target_u).expect("hybrid");
            let probs = predict_rows(v[2], v[3], k, 0.5).t();
            let proto_l = hybrid_loss(probs, &target).expect("hybrid");
            let proto_u = hybrid_loss(probs, &target_u).expect("hybrid");
            let opt = contrastive_loss(v[3], &tags, &cfg).expect("pairs");
            let groups = [v[3].select_rows(&[0, 1, 2]), v[3].select_rows(&[3, 4, 5])];
            let div = decorrelation_loss(g, &groups, &cfg).0;
            let spcl = spcl_loss(opt, div, &cfg);
            seg_l.add(seg_u).add(proto_l).add(proto_u.add(spcl).mul_scalar(lambda))
        },
        &[("logits_l", &logits), ("logits_u", &logits_u), ("features", &feats), ("bank", &bank)],
        &opts(seed, None),
    );
    out.push(record(Suite::Trainer, "total", seed, r));
    Ok(())
}

/// Runs `suite` for seeds `0..seeds`.
pub fn run_suite(suite: Suite, seeds: usize) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut checks = Vec::new();
    for seed in 0..seeds as u64 {
        match suite {
            Suite::Kan => kan_checks(seed, &mut checks)?,
            Suite::Backbone => backbone_checks(seed, &mut checks)?,
            Suite::Pcc => pcc_checks(seed, &mut checks)?,
            Suite::Ckaf => ckaf_checks(seed, &mut checks)?,
            Suite::Trainer => trainer_checks(seed, &mut checks)?,
        }
    }
    Ok(SuiteReport { checks, seconds: start.elapsed().as_secs_f64() })
}

/// Result of fitting `sin(3x)` on `[-1, 1]`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FitReport {
    pub kan_mse: f64,
    pub linear_mse: f64,
    pub steps: usize,
}

pub const FIT_POINTS: usize = 128;

fn mse_loss<'g>(pred: Var<'g>, target: &Tensor) -> Var<'g> {
    let d = pred.sub(pred.graph().constant(target.shape(), target.data().to_vec()));
    d.mul(d).sum().mul_scalar(1.0 / target.numel() as f64)
}

/// Full-batch momentum gradient descent of a 1→1 KANLinear (G=5, p=3) and
/// of an affine map `ax + b` on `sin(3x)`.
pub fn fit_capacity(steps: usize, seed: u64) -> Result<FitReport> {
    let xs: Vec<f64> = (0..FIT_POINTS).map(|i| -1.0 + 2.0 * i as f64 / (FIT_POINTS - 1) as f64).collect();
    let ys: Vec<f64> = xs.iter().map(|x| (3.0 * x).sin()).collect();
    let x = Tensor::new(&[FIT_POINTS, 1], xs)?;
    let y = Tensor::new(&[FIT_POINTS, 1], ys)?;
    let mse =
        |pred: Var<'_>| -> f64 { pred.value_ref().iter().zip(y.data()).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / FIT_POINTS as f64 };
    let (lr, momentum) = (0.2, 0.9);
    let step = |params: Vec<&mut Tensor>, grads: Vec<Option<Vec<f64>>>, vel: &mut [Vec<f64>]| {
        for ((p, gr), v) in params.into_iter().zip(grads).zip(vel.iter_mut()) {
            let Some(gr) = gr else { continue };
            for ((w, v), dw) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(gr) {
                *v = momentum * *v + dw;
                *w -= lr * *v;
            }
        }
    };

    let mut layer = kan_init(1, 1, crate::ckaf::KAN_GRID_INTERVALS, crate::ckaf::KAN_DEGREE, &mut Rng::new(seed))?;
    let mut vel = vec![vec![0.0; layer.grid.num_basis()], vec![0.0], vec![0.0]];
    let mut kan_mse = f64::INFINITY;
    for s in 0..=steps {
        let g = Graph::new();
        let vars = layer.bind(&g);
        let pred = layer.forward(g.constant(&[FIT_POINTS, 1], x.data().to_vec()), &vars)?;
        kan_mse = mse(pred);
        if s == steps {
            break;
        }
        let grads = g.backward(mse_loss(pred, &y));
        let gs = [vars.spline_coeffs, vars.base_weight, vars.spline_scale].map(|v| grads.wrt(v).map(<[f64]>::to_vec));
        step(layer.tensors_mut().into_iter().collect(), gs.into(), &mut vel);
    }

    let mut w = Tensor::new(&[1, 1], vec![Rng::new(seed).range(-1.0, 1.0)])?.with_grad();
    let mut b = Tensor::zeros(&[1, 1]).with_grad();
    let mut vel = vec![vec![0.0], vec![0.0]];
    let mut linear_mse = f64::INFINITY;
    for s in 0..=steps {
        let g = Graph::new();
        let (wv, bv) = (g.leaf(&w), g.leaf(&b));
        let xv = g.constant(&[FIT_POINTS, 1], x.data().to_vec());
        let ones = g.constant(&[FIT_POINTS, 1], vec![1.0; FIT_POINTS]);
        let pred = xv.matmul(wv).add(ones.matmul(bv));
        linear_mse = mse(pred);
        if s == steps {
            break;
        }
        let grads = g.backward(mse_loss(pred, &y));
        let gs = vec![grads.wrt(wv).map(<[f64]>::to_vec), grads.wrt(bv).map(<[f64]>::to_vec)];
        step(vec![&mut w, &mut b], gs, &mut vel);
    }
    Ok(FitReport { kan_mse, linear_mse, steps })
}
