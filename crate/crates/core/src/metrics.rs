//! Overlap (Dice, Jaccard) and surface-distance (HD95, ASD) metrics in
//! voxel units, the labeled/unlabeled Dice gap, and report emission.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Role;
use crate::error::{contract, Error, Result};
use crate::volume::{unflat_index, Mask};

fn check_pair(pred: &Mask, gt: &Mask) -> Result<()> {
    if pred.dims != gt.dims {
        return Err(contract(format!("mask shapes differ: {:?} vs {:?}", pred.dims, gt.dims)));
    }
    if pred.data.iter().chain(&gt.data).any(|&v| v > 1) {
        return Err(contract("metrics expect binary masks"));
    }
    Ok(())
}

/// `(dice, jaccard)`; both are 1 when both masks are empty.
pub fn overlap_metrics(pred: &Mask, gt: &Mask) -> Result<(f64, f64)> {
    check_pair(pred, gt)?;
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        p += a as usize;
        g += b as usize;
        inter += (a & b) as usize;
    }
    if p + g == 0 {
        return Ok((1.0, 1.0));
    }
    let union = p + g - inter;
    Ok((2.0 * inter as f64 / (p + g) as f64, inter as f64 / union as f64))
}

/// Foreground voxels with at least one background 6-neighbour (outside the
/// grid counts as background).
pub fn surface_voxels(m: &Mask) -> Vec<[f64; 3]> {
    let d = m.dims;
    let mut out = Vec::new();
    for (i, &v) in m.data.iter().enumerate() {
        if v == 0 {
            continue;
        }
        let [x, y, z] = unflat_index(d, i);
        let p = [x, y, z];
        let mut border = false;
        for a in 0..3 {
            for step in [-1isize, 1] {
                let q = p[a] as isize + step;
                if q < 0 || q >= d[a] as isize {
                    border = true;
                } else {
                    let mut n = p;
                    n[a] = q as usize;
                    if m.get(n[0], n[1], n[2]) == 0 {
                        border = true;
                    }
                }
            }
        }
        if border {
            out.push([x as f64, y as f64, z as f64]);
        }
    }
    out
}

/// Lower envelope of parabolas: exact 1-D squared distance transform of
/// `f` (Felzenszwalb & Huttenlocher).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], zbuf: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    zbuf[0] = f64::NEG_INFINITY;
    zbuf[1] = f64::INFINITY;
    let mut started = f[0].is_finite();
    for q in 1..n {
        if !f[q].is_finite() {
            continue;
        }
        if !started {
            v[0] = q;
            started = true;
            continue;
        }
        let qf = q as f64;
        loop {
            let p = v[k];
            let pf = p as f64;
            let s = ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf));
            if s <= zbuf[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= zbuf[k] {
                // k == 0 and the new parabola dominates everywhere
                v[0] = q;
                break;
            }
            k += 1;
            v[k] = q;
            zbuf[k] = s;
            zbuf[k + 1] = f64::INFINITY;
            break;
        }
    }
    if !started {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while zbuf[k + 1] < qf {
            k += 1;
        }
        let d = qf - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every voxel to the nearest voxel of
/// `points` (infinite if `points` is empty).
pub fn squared_distance_map(dims: [usize; 3], points: &[[f64; 3]]) -> Vec<f64> {
    let n = dims[0] * dims[1] * dims[2];
    let mut d = vec![f64::INFINITY; n];
    for p in points {
        d[crate::volume::flat_index(dims, p[0] as usize, p[1] as usize, p[2] as usize)] = 0.0;
    }
    let longest = *dims.iter().max().unwrap_or(&0);
    let (mut f, mut out) = (vec![0.0; longest], vec![0.0; longest]);
    let (mut v, mut zbuf) = (vec![0usize; longest], vec![0.0; longest + 1]);
    let strides = [dims[1] * dims[2], dims[2], 1];
    for axis in 0..3 {
        let len = dims[axis];
        let stride = strides[axis];
        for start in 0..n {
            // visit each line once, from its first element
            if (start / stride) % len != 0 {
                continue;
            }
            for i in 0..len {
                f[i] = d[start + i * stride];
            }
            edt_1d(&f[..len], &mut out[..len], &mut v, &mut zbuf);
            for i in 0..len {
                d[start + i * stride] = out[i];
            }
        }
    }
    d
}

fn nearest_distances(dims: [usize; 3], from: &[[f64; 3]], to: &[[f64; 3]]) -> Vec<f64> {
    let map = squared_distance_map(dims, to);
    from.iter().map(|a| map[crate::volume::flat_index(dims, a[0] as usize, a[1] as usize, a[2] as usize)].sqrt()).collect()
}

/// `ceil(q·n)`-th order statistic of `values`.
pub fn nearest_rank(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let rank = ((q * values.len() as f64).ceil() as usize).clamp(1, values.len());
    values[rank - 1]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceMetrics {
    pub hd95: f64,
    pub asd: f64,
    pub defined: bool,
}

/// Symmetric HD95 and ASD over both directed surface distance sets;
/// undefined (and reported as 0) when either surface is empty.
pub fn surface_metrics(pred: &Mask, gt: &Mask) -> Result<SurfaceMetrics> {
    check_pair(pred, gt)?;
    let (sp, sg) = (surface_voxels(pred), surface_voxels(gt));
    if sp.is_empty() || sg.is_empty() {
        return Ok(SurfaceMetrics { hd95: 0.0, asd: 0.0, defined: false });
    }
    let mut all = nearest_distances(pred.dims, &sp, &sg);
    all.extend(nearest_distances(pred.dims, &sg, &sp));
    let asd = all.iter().sum::<f64>() / all.len() as f64;
    let hd95 = nearest_rank(&mut all, 0.95);
    Ok(SurfaceMetrics { hd95, asd, defined: true })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dice: f64,
    pub jaccard: f64,
    /// `None` when a surface is empty.
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

pub fn evaluate(pred: &Mask, gt: &Mask) -> Result<MetricReport> {
    let (dice, jaccard) = overlap_metrics(pred, gt)?;
    let s = surface_metrics(pred, gt)?;
    Ok(MetricReport { dice, jaccard, hd95: s.defined.then_some(s.hd95), asd: s.defined.then_some(s.asd) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub l_dice: f64,
    pub u_dice: f64,
    pub gap: f64,
}

/// Mean Dice of labeled and unlabeled training cases and their difference.
pub fn gap_report(cases: &[(Role, f64)]) -> Result<GapReport> {
    let mean = |role: Role, name: &'static str| {
        let v: Vec<f64> = cases.iter().filter(|c| c.0 == role).map(|c| c.1).collect();
        if v.is_empty() {
            Err(Error::GapUndefined(name))
        } else {
            Ok(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    let l = mean(Role::Labeled, "labeled")?;
    let u = mean(Role::Unlabeled, "unlabeled")?;
    Ok(GapReport { l_dice: l, u_dice: u, gap: l - u })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (0 for a single value).
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        Some(Self { mean, std, n })
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4}±{:.4}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: usize,
    pub role: Role,
    #[serde(flatten)]
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub units: String,
    pub cases: usize,
    pub dice: Option<MeanStd>,
    pub jaccard: Option<MeanStd>,
    pub hd95: Option<MeanStd>,
    pub asd: Option<MeanStd>,
    /// Cases whose surface metrics were undefined.
    pub undefined_surface: usize,
}

pub fn summarize(cases: &[CaseMetrics]) -> MetricSummary {
    let col = |f: &dyn Fn(&MetricReport) -> Option<f64>| -> Vec<f64> { cases.iter().filter_map(|c| f(&c.report)).collect() };
    MetricSummary {
        units: "voxel".into(),
        cases: cases.len(),
        dice: MeanStd::of(&col(&|r| Some(r.dice))),
        jaccard: MeanStd::of(&col(&|r| Some(r.jaccard))),
        hd95: MeanStd::of(&col(&|r| r.hd95)),
        asd: MeanStd::of(&col(&|r| r.asd)),
        undefined_surface: cases.iter().filter(|c| c.report.hd95.is_none()).count(),
    }
}

fn role_name(r: Role) -> &'static str {
    match r {
        Role::Labeled => "labeled",
        Role::Unlabeled => "unlabeled",
        Role::Test => "test",
    }
}

/// `case_id,role,dice,jaccard,hd95,asd`; undefined surface metrics are empty.
pub fn cases_csv(cases: &[CaseMetrics]) -> String {
    let mut out = String::from("case_id,role,dice,jaccard,hd95,asd\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for c in cases {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{},{}",
            c.case_id,
            role_name(c.role),
            c.report.dice,
            c.report.jaccard,
            opt(c.report.hd95),
            opt(c.report.asd)
        );
    }
    out
}
