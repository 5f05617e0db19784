//! Positional consistency calibration: a position-weighted contrastive loss
//! over tagged prototypes and a hinge that discourages the ordered
//! subregion prototypes of one class from collapsing together.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numerics::{cosine_matrix, Graph, Var, EPS_NORM};
use crate::ssd::Source;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcclConfig {
    pub tau: f64,
    pub alpha: f64,
    pub lambda_div: f64,
    pub w_same_region: f64,
    pub w_diff_region: f64,
}

impl Default for PcclConfig {
    fn default() -> Self {
        Self { tau: 0.1, alpha: 0.5, lambda_div: 0.5, w_same_region: 1.0, w_diff_region: 0.1 }
    }
}

impl PcclConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(contract("tau must be > 0"));
        }
        if !(-1.0..=1.0).contains(&self.alpha) {
            return Err(contract("alpha must lie in [-1, 1]"));
        }
        if !(0.0..=1.0).contains(&self.lambda_div) {
            return Err(contract("lambda_div must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Subregion rank, or the class-mean prototype.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    Rank(usize),
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProtoTag {
    pub class: u8,
    pub region: Region,
    pub source: Source,
    /// Index of the sample the prototype came from.
    pub sample: usize,
}

/// Weight of the pair `(i, j)`: `w_same_region` for same class and region,
/// `w_diff_region` for same class and another region. Pairs of different
/// classes are negatives, which carry no weight (1.0 is returned).
pub fn pair_weight(i: &ProtoTag, j: &ProtoTag, cfg: &PcclConfig) -> f64 {
    if i.class != j.class {
        1.0
    } else if i.region == j.region {
        cfg.w_same_region
    } else {
        cfg.w_diff_region
    }
}

/// Contrastive loss over the rows of `protos` `[n, D]`, one tag per row.
/// Anchors without both a positive and a negative are left out of the
/// average; if none remain the result is [`Error::NoValidPairs`].
pub fn contrastive_loss<'g>(protos: Var<'g>, tags: &[ProtoTag], cfg: &PcclConfig) -> Result<Var<'g>> {
    let shape = protos.shape();
    if shape.len() != 2 || shape[0] != tags.len() {
        return Err(contract(format!("{} tags for prototypes {shape:?}", tags.len())));
    }
    contrastive_from_similarity(cosine_matrix(protos, protos, EPS_NORM), tags, cfg)
}

/// The same loss given the `[n, n]` similarity matrix directly.
pub fn contrastive_from_similarity<'g>(sims: Var<'g>, tags: &[ProtoTag], cfg: &PcclConfig) -> Result<Var<'g>> {
    let n = tags.len();
    if sims.shape() != [n, n] {
        return Err(contract(format!("similarity matrix {:?} for {n} tags", sims.shape())));
    }
    let mut wpos = vec![0.0; n * n];
    let mut mneg = vec![0.0; n * n];
    let mut valid = Vec::new();
    for i in 0..n {
        let (mut has_pos, mut has_neg) = (false, false);
        for j in 0..n {
            if i == j {
                continue;
            }
            if tags[i].class == tags[j].class {
                wpos[i * n + j] = pair_weight(&tags[i], &tags[j], cfg);
                has_pos = true;
            } else {
                mneg[i * n + j] = 1.0;
                has_neg = true;
            }
        }
        if has_pos && has_neg {
            valid.push(i);
        }
    }
    if valid.is_empty() {
        return Err(Error::NoValidPairs);
    }
    let g = sims.graph();
    let e = sims.mul_scalar(1.0 / cfg.tau).exp();
    let pos = e.mul(g.constant(&[n, n], wpos)).row_sum().select_rows(&valid);
    let neg = e.mul(g.constant(&[n, n], mneg)).row_sum().select_rows(&valid);
    let log_ratio = pos.ln().sub(pos.add(neg).ln());
    Ok(log_ratio.mean().neg())
}

/// Decorrelation hinge over groups of ordered prototypes `[K, D]`, one
/// group per (sample, class). Groups with `K < 2` are skipped; the flag is
/// false when nothing contributed (the loss is then 0).
pub fn decorrelation_loss<'g>(g: &'g Graph, groups: &[Var<'g>], cfg: &PcclConfig) -> (Var<'g>, bool) {
    let mut terms = Vec::new();
    for &p in groups {
        let k = p.shape()[0];
        if k < 2 {
            continue;
        }
        let mut off = vec![1.0; k * k];
        for d in 0..k {
            off[d * k + d] = 0.0;
        }
        let hinge = cosine_matrix(p, p, EPS_NORM).add_scalar(-cfg.alpha).relu().mul(g.constant(&[k, k], off));
        terms.push(hinge.sum().mul_scalar(1.0 / (k * (k - 1)) as f64));
    }
    if terms.is_empty() {
        return (g.scalar(0.0), false);
    }
    let count = terms.len() as f64;
    let total = terms.into_iter().reduce(|a, b| a.add(b)).expect("non-empty");
    (total.mul_scalar(1.0 / count), true)
}

/// `(1 − λ_div)·opt + λ_div·div`.
pub fn spcl_loss<'g>(opt: Var<'g>, div: Var<'g>, cfg: &PcclConfig) -> Var<'g> {
    opt.mul_scalar(1.0 - cfg.lambda_div).add(div.mul_scalar(cfg.lambda_div))
}

pub fn spcl_value(opt: f64, div: f64, cfg: &PcclConfig) -> f64 {
    (1.0 - cfg.lambda_div) * opt + cfg.lambda_div * div
}

/// [`contrastive_loss`] on plain vectors.
pub fn contrastive_value(protos: &[(ProtoTag, Vec<f64>)], cfg: &PcclConfig) -> Result<f64> {
    let Some(d) = protos.first().map(|p| p.1.len()) else {
        return Err(Error::NoValidPairs);
    };
    if protos.iter().any(|p| p.1.len() != d) {
        return Err(contract("prototype dims differ"));
    }
    let g = Graph::new();
    let rows = g.constant(&[protos.len(), d], protos.iter().flat_map(|p| p.1.clone()).collect());
    let tags: Vec<ProtoTag> = protos.iter().map(|p| p.0).collect();
    Ok(contrastive_loss(rows, &tags, cfg)?.item())
}

/// [`decorrelation_loss`] on plain groups of prototype vectors.
pub fn decorrelation_value(groups: &[Vec<Vec<f64>>], cfg: &PcclConfig) -> (f64, bool) {
    let g = Graph::new();
    let vars: Vec<Var> =
        groups.iter().filter(|grp| !grp.is_empty()).map(|grp| g.constant(&[grp.len(), grp[0].len()], grp.concat())).collect();
    let (v, flag) = decorrelation_loss(&g, &vars, cfg);
    (v.item(), flag)
}
