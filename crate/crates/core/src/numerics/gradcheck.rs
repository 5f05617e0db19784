use serde::Serialize;

use super::{Graph, Rng, Tensor, Var};
use crate::error::{contract, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many (randomly chosen) entries per parameter.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-5, max_entries: None, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub index: usize,
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_entry: usize,
    /// A loss evaluation returned NaN/inf; `worst_entry` names the entry.
    pub non_finite: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| if p.non_finite { f64::INFINITY } else { p.max_rel_error }).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.params.iter().all(|p| !p.non_finite && p.max_rel_error < tol)
    }

    pub fn failures(&self, tol: f64) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(move |p| p.non_finite || p.max_rel_error >= tol)
    }
}

fn eval<F>(loss_fn: &F, params: &[Tensor]) -> (f64, Option<Vec<Vec<f64>>>)
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
{
    let g = Graph::new();
    let vars: Vec<Var<'_>> = params.iter().map(|t| g.leaf(t)).collect();
    let loss = loss_fn(&g, &vars);
    let value = loss.item();
    if !params.iter().any(|p| p.requires_grad()) {
        return (value, None);
    }
    let grads = g.backward(loss);
    let per = vars.iter().zip(params).map(|(v, t)| grads.wrt(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()])).collect();
    (value, Some(per))
}

/// Compares reverse-mode gradients of `loss_fn` with central differences
/// `(f(x+eps) − f(x−eps)) / 2eps`, per parameter entry. Relative error is
/// `|a − n| / max(1, |a|, |n|)`.
pub fn grad_check<F>(loss_fn: F, params: &[(&str, &Tensor)], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
{
    if !(1e-7..=1e-2).contains(&opts.eps) {
        return Err(contract(format!("grad_check eps {} outside [1e-7, 1e-2]", opts.eps)));
    }
    let mut work: Vec<Tensor> = params.iter().map(|(_, t)| (*t).clone().with_grad()).collect();
    let (base, analytic) = eval(&loss_fn, &work);
    let analytic = analytic.expect("all parameters are tracked");
    if !base.is_finite() {
        let params = params
            .iter()
            .enumerate()
            .map(|(i, (name, _))| ParamCheck {
                index: i,
                name: name.to_string(),
                checked: 0,
                max_rel_error: f64::INFINITY,
                worst_entry: 0,
                non_finite: true,
            })
            .collect();
        return Ok(GradCheckReport { params });
    }

    let mut rng = Rng::new(opts.seed);
    let mut out = Vec::with_capacity(params.len());
    for (pi, (name, _)) in params.iter().enumerate() {
        let n = work[pi].numel();
        let mut entries: Vec<usize> = (0..n).collect();
        if let Some(limit) = opts.max_entries {
            if limit < n {
                rng.shuffle(&mut entries);
                entries.truncate(limit);
                entries.sort_unstable();
            }
        }
        let mut check = ParamCheck { index: pi, name: name.to_string(), checked: 0, max_rel_error: 0.0, worst_entry: 0, non_finite: false };
        for &e in &entries {
            let orig = work[pi].data()[e];
            work[pi].data_mut()[e] = orig + opts.eps;
            let (fp, _) = eval(&loss_fn, &without_grad(&work));
            work[pi].data_mut()[e] = orig - opts.eps;
            let (fm, _) = eval(&loss_fn, &without_grad(&work));
            work[pi].data_mut()[e] = orig;
            check.checked += 1;
            if !fp.is_finite() || !fm.is_finite() {
                check.non_finite = true;
                check.worst_entry = e;
                check.max_rel_error = f64::INFINITY;
                break;
            }
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let a = analytic[pi][e];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if rel > check.max_rel_error {
                check.max_rel_error = rel;
                check.worst_entry = e;
            }
        }
        out.push(check);
    }
    Ok(GradCheckReport { params: out })
}

fn without_grad(ts: &[Tensor]) -> Vec<Tensor> {
    ts.iter()
        .map(|t| {
            let mut c = t.clone();
            c.set_requires_grad(false);
            c
        })
        .collect()
}
