//! Library results against independent brute-force implementations.

use sckan_core::metrics::{evaluate, overlap_metrics, surface_metrics};
use sckan_core::numerics::{Rng, Tensor};
use sckan_core::pcc::{contrastive_value, decorrelation_value, PcclConfig, ProtoTag, Region};
use sckan_core::ssd::{decompose, extract_prototypes, Source};
use sckan_core::volume::{flat_index, Mask};

const CASES: u64 = 50;

fn random_mask(dims: [usize; 3], density: f64, rng: &mut Rng) -> Mask {
    let data = (0..dims.iter().product()).map(|_| u8::from(rng.uniform() < density)).collect();
    Mask::new(dims, data).unwrap()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
    dot / (na * nb)
}

#[test]
fn prototypes_match_masked_average_loops() {
    for case in 0..CASES {
        let mut rng = Rng::new(case);
        let dims = [4 + rng.below(5), 4 + rng.below(5), 4 + rng.below(5)];
        let mask = random_mask(dims, rng.range(0.1, 0.6), &mut rng);
        let d = 1 + rng.below(6);
        let k = 1 + rng.below(4);
        let feats = Tensor::randn(&[d, dims[0], dims[1], dims[2]], 1.0, &mut rng);
        let class = rng.below(2) as u8;
        let Some(set) = extract_prototypes(&feats, &mask, class, k, Source::Labeled, &mut Rng::new(case + 1000)).unwrap() else {
            assert!(mask.count(class) < k);
            continue;
        };
        let dec = decompose(&mask, class, k, &mut Rng::new(case + 1000)).unwrap();
        let ranks = dec.ranks();
        let n = dims.iter().product::<usize>();
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    if mask.get(x, y, z) != class {
                        continue;
                    }
                    let flat = flat_index(dims, x, y, z);
                    let pos = dec.voxels.iter().position(|&v| v == flat).expect("every valid voxel assigned");
                    let r = ranks[pos];
                    counts[r] += 1;
                    for c in 0..d {
                        sums[r][c] += feats.data()[c * n + flat];
                    }
                }
            }
        }
        for r in 0..k {
            assert!(counts[r] > 0);
            for c in 0..d {
                let want = sums[r][c] / counts[r] as f64;
                assert!((set.subregion[r][c] - want).abs() < 1e-10, "case {case} rank {r}");
            }
        }
        for c in 0..d {
            let avg = set.subregion.iter().map(|p| p[c]).sum::<f64>() / k as f64;
            assert!((set.mean[c] - avg).abs() < 1e-12);
        }
    }
}

fn random_tag(rng: &mut Rng) -> ProtoTag {
    ProtoTag {
        class: rng.below(2) as u8,
        region: if rng.below(4) == 0 { Region::Mean } else { Region::Rank(rng.below(3)) },
        source: if rng.below(2) == 0 { Source::Labeled } else { Source::Unlabeled },
        sample: rng.below(3),
    }
}

/// Direct O(n²) enumeration of anchors, positives and negatives.
fn contrastive_oracle(protos: &[(ProtoTag, Vec<f64>)], cfg: &PcclConfig) -> Option<f64> {
    let mut terms = Vec::new();
    for (i, (ti, vi)) in protos.iter().enumerate() {
        let (mut pos, mut neg) = (0.0, 0.0);
        let (mut has_pos, mut has_neg) = (false, false);
        for (j, (tj, vj)) in protos.iter().enumerate() {
            if i == j {
                continue;
            }
            let e = (cos(vi, vj) / cfg.tau).exp();
            if ti.class == tj.class {
                let w = if ti.region == tj.region { cfg.w_same_region } else { cfg.w_diff_region };
                pos += w * e;
                has_pos = true;
            } else {
                neg += e;
                has_neg = true;
            }
        }
        if has_pos && has_neg {
            terms.push(-(pos / (pos + neg)).ln());
        }
    }
    (!terms.is_empty()).then(|| terms.iter().sum::<f64>() / terms.len() as f64)
}

#[test]
fn contrastive_matches_pair_enumeration() {
    for case in 0..CASES {
        let mut rng = Rng::new(100 + case);
        let n = 2 + rng.below(15);
        let d = 1 + rng.below(6);
        let cfg = PcclConfig { tau: rng.range(0.05, 2.0), ..Default::default() };
        let protos: Vec<(ProtoTag, Vec<f64>)> = (0..n).map(|_| (random_tag(&mut rng), (0..d).map(|_| rng.normal()).collect())).collect();
        match (contrastive_value(&protos, &cfg), contrastive_oracle(&protos, &cfg)) {
            (Ok(a), Some(b)) => assert!((a - b).abs() < 1e-10, "case {case}: {a} vs {b}"),
            (Err(sckan_core::error::Error::NoValidPairs), None) => {}
            (a, b) => panic!("case {case}: {a:?} vs {b:?}"),
        }
    }
}

#[test]
fn decorrelation_matches_direct_sum() {
    for case in 0..CASES {
        let mut rng = Rng::new(200 + case);
        let d = 2 + rng.below(5);
        let cfg = PcclConfig { alpha: rng.range(-0.5, 0.9), ..Default::default() };
        let groups: Vec<Vec<Vec<f64>>> =
            (0..1 + rng.below(4)).map(|_| (0..1 + rng.below(4)).map(|_| (0..d).map(|_| rng.normal()).collect()).collect()).collect();
        let mut per_group = Vec::new();
        for grp in &groups {
            let k = grp.len();
            if k < 2 {
                continue;
            }
            let mut s = 0.0;
            for a in 0..k {
                for b in 0..k {
                    if a != b {
                        s += (cos(&grp[a], &grp[b]) - cfg.alpha).max(0.0);
                    }
                }
            }
            per_group.push(s / (k * (k - 1)) as f64);
        }
        let (v, contributed) = decorrelation_value(&groups, &cfg);
        assert_eq!(contributed, !per_group.is_empty());
        let want = if per_group.is_empty() { 0.0 } else { per_group.iter().sum::<f64>() / per_group.len() as f64 };
        assert!((v - want).abs() < 1e-10, "case {case}");
    }
}

fn surface_brute(m: &Mask) -> Vec<[i64; 3]> {
    let [w, h, d] = m.dims.map(|v| v as i64);
    let at =
        |x: i64, y: i64, z: i64| x >= 0 && y >= 0 && z >= 0 && x < w && y < h && z < d && m.get(x as usize, y as usize, z as usize) == 1;
    let mut out = Vec::new();
    for x in 0..w {
        for y in 0..h {
            for z in 0..d {
                if !at(x, y, z) {
                    continue;
                }
                let n6 = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
                if n6.iter().any(|&(a, b, c)| !at(x + a, y + b, z + c)) {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

fn directed(from: &[[i64; 3]], to: &[[i64; 3]]) -> Vec<f64> {
    from.iter()
        .map(|p| {
            to.iter()
                .map(|q| (((p[0] - q[0]).pow(2) + (p[1] - q[1]).pow(2) + (p[2] - q[2]).pow(2)) as f64).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

#[test]
fn metrics_match_brute_force_on_random_pairs() {
    for case in 0..CASES {
        let mut rng = Rng::new(300 + case);
        let dims = [8, 8, 8];
        let p = random_mask(dims, rng.range(0.0, 0.5), &mut rng);
        let g = random_mask(dims, rng.range(0.0, 0.5), &mut rng);

        let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
        for (a, b) in p.data.iter().zip(&g.data) {
            np += usize::from(*a == 1);
            ng += usize::from(*b == 1);
            inter += usize::from(*a == 1 && *b == 1);
        }
        let union = np + ng - inter;
        let (dice, jac) = if union == 0 { (1.0, 1.0) } else { (2.0 * inter as f64 / (np + ng) as f64, inter as f64 / union as f64) };
        let (d, j) = overlap_metrics(&p, &g).unwrap();
        assert!((d - dice).abs() < 1e-10 && (j - jac).abs() < 1e-10, "case {case}");
        let (d2, j2) = overlap_metrics(&g, &p).unwrap();
        assert_eq!((d, j), (d2, j2));

        let (sp, sg) = (surface_brute(&p), surface_brute(&g));
        let s = surface_metrics(&p, &g).unwrap();
        if sp.is_empty() || sg.is_empty() {
            assert!(!s.defined);
            continue;
        }
        let mut all = directed(&sp, &sg);
        all.extend(directed(&sg, &sp));
        let asd = all.iter().sum::<f64>() / all.len() as f64;
        all.sort_by(f64::total_cmp);
        let rank = ((0.95 * all.len() as f64).ceil() as usize).max(1);
        let hd95 = all[rank - 1];
        assert!(s.defined);
        assert!((s.hd95 - hd95).abs() < 1e-10 && (s.asd - asd).abs() < 1e-10, "case {case}");
        let r = evaluate(&g, &p).unwrap();
        assert!((r.hd95.unwrap() - hd95).abs() < 1e-10 && (r.asd.unwrap() - asd).abs() < 1e-10);
        assert!(r.jaccard <= r.dice);
    }
}
