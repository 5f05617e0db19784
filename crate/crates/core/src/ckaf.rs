//! Consensus fusion: source-specific projections of labeled and unlabeled
//! prototypes, batch-average pooling per (class, rank), concatenation and a
//! two-stage fusion into consensus prototypes; plus prototype-based
//! prediction from those consensus prototypes.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::kan::{kan_init, KanLayerParams, KanVars};
use crate::numerics::{cosine_matrix, Graph, Rng, Tensor, Var, EPS_NORM};
use crate::volume::Mask;

pub const KAN_GRID_INTERVALS: usize = 5;
pub const KAN_DEGREE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    #[default]
    Kan,
    Mlp,
    Average,
}

impl std::fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionStrategy::Kan => "kan",
            FusionStrategy::Mlp => "mlp",
            FusionStrategy::Average => "average",
        })
    }
}

/// `y = silu(x)·Wᵀ + b`, the MLP counterpart of a KAN layer's base branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpLayer {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[1, out]`
    pub bias: Tensor,
}

impl MlpLayer {
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut weight = Tensor::zeros(&[out_dim, in_dim]).with_grad();
        weight.data_mut().iter_mut().for_each(|w| *w = rng.range(-bound, bound));
        Self { weight, bias: Tensor::zeros(&[1, out_dim]).with_grad() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FusionLayer {
    Kan(KanLayerParams),
    Mlp(MlpLayer),
}

#[derive(Debug, Clone, Copy)]
enum LayerVars<'g> {
    Kan(KanVars<'g>),
    Mlp(Var<'g>, Var<'g>),
}

impl FusionLayer {
    fn bind<'g>(&self, g: &'g Graph) -> LayerVars<'g> {
        match self {
            FusionLayer::Kan(p) => LayerVars::Kan(p.bind(g)),
            FusionLayer::Mlp(p) => LayerVars::Mlp(g.leaf(&p.weight), g.leaf(&p.bias)),
        }
    }

    fn forward<'g>(&self, x: Var<'g>, vars: &LayerVars<'g>) -> Result<Var<'g>> {
        match (self, vars) {
            (FusionLayer::Kan(p), LayerVars::Kan(v)) => p.forward(x, v),
            (FusionLayer::Mlp(_), LayerVars::Mlp(w, b)) => {
                let n = x.shape()[0];
                Ok(x.silu().matmul(w.t()).add(b.broadcast_rows(n)))
            }
            _ => unreachable!("vars bound from this layer"),
        }
    }

    fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            FusionLayer::Kan(p) => p.tensors().to_vec(),
            FusionLayer::Mlp(p) => vec![("weight", &p.weight), ("bias", &p.bias)],
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            FusionLayer::Kan(p) => p.tensors_mut().into_iter().collect(),
            FusionLayer::Mlp(p) => vec![&mut p.weight, &mut p.bias],
        }
    }
}

const STAGE_NAMES: [&str; 4] = ["proj_l", "proj_u", "stage1", "stage2"];

/// Fusion network. `layers` is empty for the average strategy and holds
/// `[proj_l, proj_u, stage1, stage2]` otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub strategy: FusionStrategy,
    pub dim: usize,
    pub hidden: usize,
    pub layers: Vec<FusionLayer>,
}

impl FusionParams {
    /// `D → D` projections, then `2D → hidden → D`.
    pub fn init(strategy: FusionStrategy, dim: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(contract("fusion dims must be >= 1"));
        }
        let shapes = [(dim, dim), (dim, dim), (2 * dim, hidden), (hidden, dim)];
        let layers = match strategy {
            FusionStrategy::Average => Vec::new(),
            FusionStrategy::Kan => shapes
                .iter()
                .map(|&(i, o)| kan_init(i, o, KAN_GRID_INTERVALS, KAN_DEGREE, rng).map(FusionLayer::Kan))
                .collect::<Result<_>>()?,
            FusionStrategy::Mlp => shapes.iter().map(|&(i, o)| FusionLayer::Mlp(MlpLayer::init(i, o, rng))).collect(),
        };
        Ok(Self { strategy, dim, hidden, layers })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .zip(STAGE_NAMES)
            .flat_map(|(l, stage)| l.tensors().into_iter().map(move |(n, t)| (format!("fusion.{stage}.{n}"), t)))
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }

    pub fn bind<'g>(&self, g: &'g Graph) -> FusionVars<'g> {
        FusionVars { layers: self.layers.iter().map(|l| l.bind(g)).collect() }
    }

    /// Rebinds `leaves` (in [`Self::named_tensors`] order) as fusion vars.
    pub fn vars_from<'g>(&self, leaves: &[Var<'g>]) -> FusionVars<'g> {
        let mut it = leaves.iter().copied();
        let mut next = || it.next().expect("one leaf per fusion tensor");
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                FusionLayer::Kan(_) => LayerVars::Kan(KanVars { spline_coeffs: next(), base_weight: next(), spline_scale: next() }),
                FusionLayer::Mlp(_) => LayerVars::Mlp(next(), next()),
            })
            .collect();
        FusionVars { layers }
    }

    /// Leaf handles of all bound parameters, in [`Self::named_tensors`] order.
    pub fn leaves<'g>(vars: &FusionVars<'g>) -> Vec<Var<'g>> {
        vars.layers
            .iter()
            .flat_map(|l| match l {
                LayerVars::Kan(v) => vec![v.spline_coeffs, v.base_weight, v.spline_scale],
                LayerVars::Mlp(w, b) => vec![*w, *b],
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct FusionVars<'g> {
    layers: Vec<LayerVars<'g>>,
}

/// One sample's ordered prototypes `[K, D]` for one class.
#[derive(Debug, Clone, Copy)]
pub struct ClassProtos<'g> {
    pub class: u8,
    pub protos: Var<'g>,
}

/// Plain consensus prototypes, row `c·K + k` holding `P̂_k^c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusPrototypes {
    pub classes: usize,
    pub k: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    pub step: usize,
}

impl ConsensusPrototypes {
    pub fn get(&self, class: usize, rank: usize) -> &[f64] {
        let r = class * self.k + rank;
        &self.data[r * self.dim..(r + 1) * self.dim]
    }
}

/// Rows of every set, L2-normalized, with their (class, rank) group.
fn stack<'g>(sets: &[ClassProtos<'g>], k: usize) -> (Var<'g>, Vec<Option<usize>>) {
    let g = sets[0].protos.graph();
    let rows: Vec<Var<'g>> = sets.iter().map(|s| s.protos).collect();
    let stacked = if rows.len() == 1 { rows[0] } else { g.concat(&rows, 0) };
    let seg = sets.iter().flat_map(|s| (0..k).map(move |r| Some(s.class as usize * k + r))).collect();
    (stacked.row_normalize(EPS_NORM), seg)
}

/// Consensus prototypes `[classes·K, D]` on the graph. Unlabeled sets are
/// teacher-derived and detached here, so no gradient reaches them.
pub fn fuse<'g>(
    labeled: &[ClassProtos<'g>],
    unlabeled: &[ClassProtos<'g>],
    params: &FusionParams,
    vars: &FusionVars<'g>,
    classes: usize,
    k: usize,
) -> Result<Var<'g>> {
    for c in 0..classes {
        let has = |sets: &[ClassProtos]| sets.iter().any(|s| s.class as usize == c);
        if !has(labeled) || !has(unlabeled) {
            return Err(Error::ConsensusUnavailable(c));
        }
    }
    for s in labeled.iter().chain(unlabeled) {
        if s.protos.shape() != [k, params.dim] || s.class as usize >= classes {
            return Err(contract(format!(
                "prototype set {:?} (class {}) does not match K={k}, D={}",
                s.protos.shape(),
                s.class,
                params.dim
            )));
        }
    }
    let groups = classes * k;
    let (xl, seg_l) = stack(labeled, k);
    let (xu, seg_u) = stack(unlabeled, k);
    let xu = xu.detach();
    if params.strategy == FusionStrategy::Average {
        let ml = xl.segment_mean(Rc::new(seg_l), groups);
        let mu = xu.segment_mean(Rc::new(seg_u), groups);
        return Ok(ml.add(mu).mul_scalar(0.5));
    }
    let [pl, pu, s1, s2] = &params.layers[..] else {
        return Err(contract("fusion network needs four layers"));
    };
    let [vl, vu, v1, v2] = &vars.layers[..] else {
        return Err(contract("fusion vars not bound from these params"));
    };
    let hl = pl.forward(xl, vl)?.segment_mean(Rc::new(seg_l), groups);
    let hu = pu.forward(xu, vu)?.segment_mean(Rc::new(seg_u), groups);
    let g = xl.graph();
    let h = s1.forward(g.concat(&[hl, hu], 1), v1)?;
    s2.forward(h, v2)
}

/// [`fuse`] on plain `[K, D]` prototype lists, `(class, rows)` per sample.
pub fn fuse_values(
    labeled: &[(u8, Vec<Vec<f64>>)],
    unlabeled: &[(u8, Vec<Vec<f64>>)],
    params: &FusionParams,
    classes: usize,
    k: usize,
    step: usize,
) -> Result<ConsensusPrototypes> {
    let g = Graph::new();
    let to_sets = |sets: &[(u8, Vec<Vec<f64>>)]| -> Vec<ClassProtos> {
        sets.iter()
            .map(|(c, rows)| ClassProtos { class: *c, protos: g.constant(&[rows.len(), rows.first().map_or(0, Vec::len)], rows.concat()) })
            .collect()
    };
    let (l, u) = (to_sets(labeled), to_sets(unlabeled));
    if l.is_empty() || u.is_empty() {
        return Err(Error::ConsensusUnavailable(0));
    }
    let vars = params.bind(&g);
    let out = fuse(&l, &u, params, &vars, classes, k)?;
    Ok(ConsensusPrototypes { classes, k, dim: params.dim, data: out.value(), step })
}

/// Class probabilities `[N, classes]` of feature rows `[N, D]`: softmax
/// over classes of `max_k cos(F, P̂_k^c) / τ_p`.
pub fn predict_rows<'g>(rows: Var<'g>, consensus: Var<'g>, k: usize, tau_p: f64) -> Var<'g> {
    cosine_matrix(rows, consensus, EPS_NORM).group_max(k).mul_scalar(1.0 / tau_p).softmax(1)
}

/// Probabilities `[classes, h, w, z]` and hard labels for a plain feature
/// map `[D, h, w, z]`. Labels follow the max-similarity score, ties going
/// to the lower class.
pub fn prototype_predict(features: &Tensor, consensus: &ConsensusPrototypes, tau_p: f64) -> Result<(Tensor, Mask)> {
    let s = features.shape();
    if s.len() != 4 || s[0] != consensus.dim {
        return Err(contract(format!("features {s:?} do not match D={}", consensus.dim)));
    }
    if !(tau_p > 0.0) {
        return Err(contract("tau_p must be > 0"));
    }
    if consensus.data.len() != consensus.classes * consensus.k * consensus.dim || consensus.k == 0 {
        return Err(Error::ConsensusUnavailable(consensus.classes));
    }
    let dims = [s[1], s[2], s[3]];
    let n = dims.iter().product::<usize>();
    let c = consensus.classes;
    let g = Graph::new();
    let rows = g.constant(&[s[0], n], features.data().to_vec()).t();
    let cons = g.constant(&[c * consensus.k, consensus.dim], consensus.data.clone());
    let scores = cosine_matrix(rows, cons, EPS_NORM).group_max(consensus.k);
    let probs = scores.mul_scalar(1.0 / tau_p).softmax(1).t();
    let sv = scores.value();
    let labels = (0..n)
        .map(|i| {
            let row = &sv[i * c..(i + 1) * c];
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best as u8
        })
        .collect();
    let mut shape = vec![c];
    shape.extend(dims);
    Ok((Tensor::new(&shape, probs.value())?, Mask::new(dims, labels)?))
}
