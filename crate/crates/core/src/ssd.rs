//! Structure-aware spatial decomposition: K-means over the voxel
//! coordinates of one class, a consistent spatial ordering of the clusters
//! and masked-mean prototype extraction.
//!
//! Cluster assignments are geometric constants; gradients reach the
//! features only through the region averages.

use std::rc::Rc;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numerics::{Graph, Rng, Tensor, Var};
use crate::volume::{flat_index, Mask};

pub const KMEANS_MAX_ITERS: usize = 50;

pub type Coord = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Labeled,
    Unlabeled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionDecomposition {
    /// Cluster index per valid voxel, in `voxels` order.
    pub assignments: Vec<usize>,
    pub centers: Vec<Coord>,
    /// `order[rank] = cluster index`; rank 0 is the "head" end.
    pub order: Vec<usize>,
    pub class_id: u8,
    pub valid_count: usize,
    /// Flat voxel indices of the valid voxels.
    pub voxels: Vec<usize>,
    /// False when K-means stopped at the iteration cap.
    pub converged: bool,
}

impl RegionDecomposition {
    /// Anatomical rank of every valid voxel.
    pub fn ranks(&self) -> Vec<usize> {
        let mut rank_of = vec![0; self.order.len()];
        for (r, &c) in self.order.iter().enumerate() {
            rank_of[c] = r;
        }
        self.assignments.iter().map(|&c| rank_of[c]).collect()
    }

    /// Centers listed by rank.
    pub fn ranked_centers(&self) -> Vec<Coord> {
        self.order.iter().map(|&c| self.centers[c]).collect()
    }
}

/// Per-sample, per-class prototypes: `K` ranked subregion prototypes and
/// their average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub class_id: u8,
    pub subregion: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub source: Source,
}

fn dist2(a: &Coord, b: &Coord) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn nearest(p: &Coord, centers: &[Coord]) -> usize {
    let mut best = 0;
    let mut bd = dist2(p, &centers[0]);
    for (j, c) in centers.iter().enumerate().skip(1) {
        let d = dist2(p, c);
        if d < bd {
            bd = d;
            best = j;
        }
    }
    best
}

fn kmeanspp(coords: &[Coord], k: usize, rng: &mut Rng) -> Vec<Coord> {
    let mut centers = vec![coords[rng.below(coords.len())]];
    let mut d2: Vec<f64> = coords.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut idx = coords.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if acc > target {
                    idx = i;
                    break;
                }
            }
            idx
        } else {
            rng.below(coords.len())
        };
        let c = coords[pick];
        for (d, p) in d2.iter_mut().zip(coords) {
            *d = d.min(dist2(p, &c));
        }
        centers.push(c);
    }
    centers
}

/// Means of the assigned points; empty clusters steal the point farthest
/// from its own center.
fn update_centers(coords: &[Coord], assign: &mut [usize], centers: &mut Vec<Coord>) {
    let k = centers.len();
    loop {
        let mut sums = vec![[0.0; 3]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in coords.iter().zip(assign.iter()) {
            counts[a] += 1;
            for ax in 0..3 {
                sums[a][ax] += p[ax];
            }
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            for j in 0..k {
                for ax in 0..3 {
                    centers[j][ax] = sums[j][ax] / counts[j] as f64;
                }
            }
            return;
        };
        let mut far = None;
        let mut far_d = -1.0;
        for (i, (p, &a)) in coords.iter().zip(assign.iter()).enumerate() {
            if counts[a] > 1 {
                let d = dist2(p, &centers[a]);
                if d > far_d {
                    far_d = d;
                    far = Some(i);
                }
            }
        }
        let i = far.expect("N >= K guarantees a donor cluster");
        assign[i] = empty;
        centers[empty] = coords[i];
    }
}

/// Lloyd's algorithm with k-means++ seeding over 3D coordinates. The
/// returned decomposition has `order` set to the identity; see
/// [`order_regions`].
pub fn kmeans_spatial(coords: &[Coord], k: usize, rng: &mut Rng) -> Result<RegionDecomposition> {
    if k == 0 {
        return Err(contract("K must be >= 1"));
    }
    if coords.len() < k {
        return Err(Error::InsufficientVoxels { needed: k, found: coords.len() });
    }
    let mut centers = kmeanspp(coords, k, rng);
    let mut assign: Vec<usize> = coords.iter().map(|p| nearest(p, &centers)).collect();
    let mut converged = false;
    for _ in 0..KMEANS_MAX_ITERS {
        update_centers(coords, &mut assign, &mut centers);
        let next: Vec<usize> = coords.iter().map(|p| nearest(p, &centers)).collect();
        if next == assign {
            converged = true;
            break;
        }
        assign = next;
    }
    if !converged {
        update_centers(coords, &mut assign, &mut centers);
    }
    Ok(RegionDecomposition {
        assignments: assign,
        centers,
        order: (0..k).collect(),
        class_id: 0,
        valid_count: coords.len(),
        voxels: Vec::new(),
        converged,
    })
}

/// Unit principal axis of the point cloud, sign-fixed so that its
/// largest-magnitude component is positive. `None` if the cloud has no
/// spread.
pub fn principal_axis(coords: &[Coord]) -> Option<Vector3<f64>> {
    if coords.is_empty() {
        return None;
    }
    let n = coords.len() as f64;
    let mut mean = Vector3::zeros();
    for p in coords {
        mean += Vector3::new(p[0], p[1], p[2]);
    }
    mean /= n;
    let mut cov = Matrix3::zeros();
    for p in coords {
        let d = Vector3::new(p[0], p[1], p[2]) - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let (imax, lmax) = eig.eigenvalues.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &l)| if l > acc.1 { (i, l) } else { acc });
    if !(lmax > 1e-12) {
        return None;
    }
    let mut v: Vector3<f64> = eig.eigenvectors.column(imax).into_owned();
    let mut big = 0;
    for ax in 1..3 {
        if v[ax].abs() > v[big].abs() + 1e-12 {
            big = ax;
        }
    }
    if v[big] < 0.0 {
        v = -v;
    }
    Some(v)
}

fn lex(a: &Coord, b: &Coord) -> std::cmp::Ordering {
    a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])).then(a[2].total_cmp(&b[2]))
}

/// Ranks cluster centers by their projection on the principal axis of
/// `all_coords` (ascending; ties by lexicographic center). Returns
/// `order[rank] = cluster index`. Without a principal axis the centers are
/// sorted lexicographically by `(z, y, x)`.
pub fn order_regions(centers: &[Coord], all_coords: &[Coord]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..centers.len()).collect();
    match principal_axis(all_coords) {
        Some(axis) => {
            let proj: Vec<f64> = centers.iter().map(|c| c[0] * axis[0] + c[1] * axis[1] + c[2] * axis[2]).collect();
            order.sort_by(|&a, &b| proj[a].total_cmp(&proj[b]).then(lex(&centers[a], &centers[b])));
        }
        None => order.sort_by(|&a, &b| {
            let (ca, cb) = (&centers[a], &centers[b]);
            ca[2].total_cmp(&cb[2]).then(ca[1].total_cmp(&cb[1])).then(ca[0].total_cmp(&cb[0]))
        }),
    }
    order
}

/// K-means decomposition of the voxels labelled `class_id`, ordered.
pub fn decompose(mask: &Mask, class_id: u8, k: usize, rng: &mut Rng) -> Result<RegionDecomposition> {
    let voxels: Vec<usize> = mask.data.iter().enumerate().filter(|(_, &c)| c == class_id).map(|(i, _)| i).collect();
    let coords = mask.coords_of(class_id);
    let mut dec = kmeans_spatial(&coords, k, rng)?;
    dec.order = order_regions(&dec.centers, &coords);
    dec.class_id = class_id;
    dec.voxels = voxels;
    Ok(dec)
}

/// Ranked region prototypes `[K, D]` and their mean `[1, D]` on the graph.
/// `feature_rows` is the feature map laid out as `[voxels, D]`.
pub fn prototypes_on_graph<'g>(feature_rows: Var<'g>, dec: &RegionDecomposition) -> (Var<'g>, Var<'g>) {
    let n = feature_rows.shape()[0];
    let k = dec.order.len();
    let mut seg = vec![None; n];
    for (&v, r) in dec.voxels.iter().zip(dec.ranks()) {
        seg[v] = Some(r);
    }
    let protos = feature_rows.segment_mean(Rc::new(seg), k);
    let mean = protos.col_sum().mul_scalar(1.0 / k as f64);
    (protos, mean)
}

/// `[D, h, w, z]` feature map as `[h·w·z, D]` rows.
pub fn feature_rows<'g>(features: Var<'g>) -> Var<'g> {
    let s = features.shape();
    let n: usize = s[1..].iter().product();
    features.reshape(&[s[0], n]).t()
}

/// Ordered prototypes of `class_id` from a plain feature map. `Ok(None)`
/// means the class has fewer than `K` voxels and the sample is skipped.
pub fn extract_prototypes(
    features: &Tensor,
    mask: &Mask,
    class_id: u8,
    k: usize,
    source: Source,
    rng: &mut Rng,
) -> Result<Option<PrototypeSet>> {
    let s = features.shape();
    if s.len() != 4 || s[1..] != mask.dims {
        return Err(contract(format!("features {s:?} not aligned with mask {:?}", mask.dims)));
    }
    let dec = match decompose(mask, class_id, k, rng) {
        Ok(d) => d,
        Err(Error::InsufficientVoxels { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let g = Graph::new();
    let f = g.constant(s, features.data().to_vec());
    let (protos, mean) = prototypes_on_graph(feature_rows(f), &dec);
    let d = s[0];
    let pv = protos.value();
    Ok(Some(PrototypeSet { class_id, subregion: pv.chunks(d).map(<[f64]>::to_vec).collect(), mean: mean.value(), source }))
}

/// Flat index of voxel `(x, y, z)` for callers building masks by hand.
pub fn voxel(mask: &Mask, x: usize, y: usize, z: usize) -> usize {
    flat_index(mask.dims, x, y, z)
}
