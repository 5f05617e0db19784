//! Loss assembly, the Mean-Teacher training step with prototype, calibration
//! and fusion terms, SGD with momentum, and the run loop that writes
//! `train_log.jsonl`, `metrics.json` and `model.sckp`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{ema_update, pseudo_label, seg_forward, SegNetParams, TapLevel, TeacherState, NUM_CLASSES};
use crate::checkpoint;
use crate::ckaf::{fuse, predict_rows, ClassProtos, FusionParams, FusionStrategy};
use crate::data::{crop_pair, Corpus, Role};
use crate::error::{contract, Error, Result};
use crate::metrics::{evaluate, gap_report, summarize, CaseMetrics, GapReport, MetricSummary};
use crate::numerics::{Graph, Rng, Tensor, Var, EPS_NORM};
use crate::pcc::{contrastive_loss, decorrelation_loss, spcl_loss, PcclConfig, ProtoTag, Region};
use crate::ssd::{decompose, feature_rows, prototypes_on_graph, Source};
use crate::volume::{Dims, Mask, Volume};

pub const DICE_SMOOTH: f64 = 1e-5;
pub const PROB_FLOOR: f64 = 1e-12;

/// `½·(soft Dice loss on class 1 + mean cross-entropy)` for probabilities
/// `[C, N]` against a label mask with `N` voxels.
pub fn hybrid_loss<'g>(probs: Var<'g>, target: &Mask) -> Result<Var<'g>> {
    let s = probs.shape();
    let n = target.data.len();
    if s.len() != 2 || s[0] < 2 || s[1] != n {
        return Err(contract(format!("probs {s:?} do not match a {n}-voxel target")));
    }
    let c = s[0];
    if target.data.iter().any(|&t| t as usize >= c) {
        return Err(contract("target class out of range"));
    }
    let g = probs.graph();
    let y: Vec<f64> = target.data.iter().map(|&t| f64::from(u8::from(t == 1))).collect();
    let y_sum: f64 = y.iter().sum();
    let p1 = probs.select_rows(&[1]);
    let inter = p1.mul(g.constant(&[1, n], y)).sum();
    let dice = inter.mul_scalar(2.0).add_scalar(DICE_SMOOTH).div(p1.sum().add_scalar(y_sum + DICE_SMOOTH)).neg().add_scalar(1.0);
    let idx = target.data.iter().enumerate().map(|(i, &t)| t as usize * n + i).collect();
    let ce = probs.gather(idx, &[n]).clamp_min(PROB_FLOOR).ln().mean().neg();
    Ok(dice.add(ce).mul_scalar(0.5))
}

/// [`hybrid_loss`] on a plain `[C, …]` probability tensor.
pub fn hybrid_loss_value(probs: &Tensor, target: &Mask) -> Result<f64> {
    let s = probs.shape();
    if s.is_empty() {
        return Err(contract("probs must have a class axis"));
    }
    let n = s[1..].iter().product::<usize>();
    let g = Graph::new();
    let p = g.constant(&[s[0], n], probs.data().to_vec());
    Ok(hybrid_loss(p, target)?.item())
}

/// Gaussian warm-up `e^{−5(1 − s/s_max)²}`.
pub fn warmup(s: usize, s_max: usize) -> f64 {
    let r = 1.0 - s as f64 / s_max.max(1) as f64;
    (-5.0 * r * r).exp()
}

/// Loss terms of one step; skipped terms are 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub seg_l: f64,
    pub seg_u: f64,
    pub proto_l: f64,
    pub proto_u: f64,
    pub spcl: f64,
}

/// `L_seg^l + L_seg^u + L_proto^l + λ_gs·(L_proto^u + L_SPCL)`.
pub fn total_loss(t: &LossTerms, lambda_gs: f64) -> f64 {
    t.seg_l + t.seg_u + t.proto_l + lambda_gs * (t.proto_u + t.spcl)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub labeled_per_batch: usize,
    pub unlabeled_per_batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub ema_decay: f64,
    pub k: usize,
    pub crop_size: Dims,
    /// Prototype prediction losses from a labeled-mean bank.
    pub use_proto: bool,
    pub use_ssd: bool,
    pub use_pcc: bool,
    pub use_ckaf: bool,
    pub fusion_strategy: FusionStrategy,
    pub pccl: PcclConfig,
    pub tau_p: f64,
    pub tap: TapLevel,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            labeled_per_batch: 4,
            unlabeled_per_batch: 4,
            lr: 0.01,
            momentum: 0.9,
            ema_decay: 0.99,
            k: 3,
            crop_size: [32, 32, 32],
            use_proto: true,
            use_ssd: true,
            use_pcc: true,
            use_ckaf: true,
            fusion_strategy: FusionStrategy::Kan,
            pccl: PcclConfig::default(),
            tau_p: 0.1,
            tap: TapLevel::Half,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Plain Mean-Teacher: every prototype component off.
    pub fn mean_teacher() -> Self {
        Self { use_proto: false, use_ssd: false, use_pcc: false, use_ckaf: false, ..Self::default() }
    }

    pub fn prototypes_active(&self) -> bool {
        self.use_proto || self.use_ssd || self.use_pcc || self.use_ckaf
    }

    /// Subregions per class: `K` with spatial decomposition, otherwise one
    /// whole-mask region.
    pub fn effective_k(&self) -> usize {
        if self.use_ssd {
            self.k
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pccl.validate()?;
        let stride = 4;
        if self.steps == 0 || self.labeled_per_batch == 0 || self.unlabeled_per_batch == 0 {
            return Err(contract("steps and batch sizes must be >= 1"));
        }
        if self.k == 0 {
            return Err(contract("K must be >= 1"));
        }
        if self.crop_size.iter().any(|&d| d == 0 || d % stride != 0) {
            return Err(contract("crop_size must be positive multiples of 4"));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(contract("lr > 0, momentum in [0,1), ema_decay in [0,1] required"));
        }
        if !(self.tau_p > 0.0) {
            return Err(contract("tau_p must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SkipFlags {
    pub no_valid_pairs: bool,
    /// Class whose consensus could not be formed.
    pub consensus_unavailable: Option<usize>,
    /// No (sample, class) group with `K >= 2` reached the decorrelation term.
    pub div_empty: bool,
    /// Per-(sample, class) prototype extractions skipped for lack of voxels.
    pub skipped_sets: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub lambda_gs: f64,
    pub seg_l: f64,
    pub seg_u: f64,
    pub proto_l: f64,
    pub proto_u: f64,
    pub opt: f64,
    pub div: f64,
    pub spcl: f64,
    pub total: f64,
    pub skipped: SkipFlags,
}

impl StepReport {
    pub fn terms(&self) -> LossTerms {
        LossTerms { seg_l: self.seg_l, seg_u: self.seg_u, proto_l: self.proto_l, proto_u: self.proto_u, spcl: self.spcl }
    }
}

/// Labeled crops with masks and unlabeled crops.
#[derive(Debug, Clone)]
pub struct Batch {
    pub labeled: Vec<(Volume, Mask)>,
    pub unlabeled: Vec<Volume>,
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub student: SegNetParams,
    pub teacher: TeacherState,
    pub fusion: FusionParams,
    velocity: Vec<Vec<f64>>,
    kmeans_rng: Rng,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::with_stream(cfg.seed, 1);
        let student = SegNetParams::init(cfg.tap, &mut rng);
        let d = student.feature_dim();
        let fusion = FusionParams::init(cfg.fusion_strategy, d, d, &mut rng)?;
        let teacher = TeacherState::new(&student, cfg.ema_decay);
        let velocity = student.named_tensors().iter().chain(fusion.named_tensors().iter()).map(|(_, t)| vec![0.0; t.numel()]).collect();
        Ok(Self { student, teacher, fusion, velocity, kmeans_rng: Rng::with_stream(cfg.seed, 3) })
    }

    pub fn checkpoint_records(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.student.named_tensors();
        out.extend(self.teacher.params.named_tensors().into_iter().map(|(n, t)| (format!("teacher.{n}"), t)));
        out.extend(self.fusion.named_tensors());
        out
    }
}

fn volume_var<'g>(g: &'g Graph, v: &Volume) -> Var<'g> {
    g.constant(&[1, v.dims[0], v.dims[1], v.dims[2]], v.data.clone())
}

fn class_probs(logits: Var<'_>) -> Var<'_> {
    let s = logits.shape();
    let n = s[1..].iter().product();
    logits.reshape(&[s[0], n]).softmax(0)
}

fn mean_of<'g>(g: &'g Graph, terms: &[Var<'g>]) -> Var<'g> {
    match terms.iter().copied().reduce(|a, b| a.add(b)) {
        Some(s) => s.mul_scalar(1.0 / terms.len() as f64),
        None => g.scalar(0.0),
    }
}

/// Per-(class, rank) mean of the L2-normalized labeled prototypes
/// `[classes·K, D]`, the bank used when fusion is off.
fn labeled_bank<'g>(labeled: &[ClassProtos<'g>], classes: usize, k: usize) -> Result<Var<'g>> {
    for c in 0..classes {
        if !labeled.iter().any(|s| s.class as usize == c) {
            return Err(Error::ConsensusUnavailable(c));
        }
    }
    let g = labeled[0].protos.graph();
    let rows: Vec<Var<'g>> = labeled.iter().map(|s| s.protos).collect();
    let stacked = g.concat(&rows, 0).row_normalize(EPS_NORM);
    let seg = labeled.iter().flat_map(|s| (0..k).map(move |r| Some(s.class as usize * k + r))).collect();
    Ok(stacked.segment_mean(std::rc::Rc::new(seg), classes * k))
}

struct SampleProtos<'g> {
    source: Source,
    sample: usize,
    class: u8,
    protos: Var<'g>,
    mean: Var<'g>,
}

/// Ordered prototypes of every class present in `mask` with at least `k`
/// voxels; other classes are counted as skipped.
#[allow(clippy::too_many_arguments)]
fn extract_sets<'g>(
    features: Var<'g>,
    mask: &Mask,
    source: Source,
    sample: usize,
    k: usize,
    rng: &mut Rng,
    sets: &mut Vec<SampleProtos<'g>>,
    skipped: &mut SkipFlags,
) -> Result<()> {
    let rows = feature_rows(features);
    for class in 0..NUM_CLASSES as u8 {
        match decompose(mask, class, k, rng) {
            Ok(dec) => {
                let (protos, mean) = prototypes_on_graph(rows, &dec);
                sets.push(SampleProtos { source, sample, class, protos, mean });
            }
            Err(Error::InsufficientVoxels { .. }) => skipped.skipped_sets += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

/// One optimisation step: forward passes, losses, backward, SGD, EMA.
pub fn train_step(state: &mut TrainState, batch: &Batch, cfg: &TrainConfig, s: usize) -> Result<StepReport> {
    if batch.labeled.is_empty() || batch.unlabeled.is_empty() {
        return Err(contract("a batch needs labeled and unlabeled crops"));
    }
    let g = Graph::new();
    let sv = state.student.bind(&g);
    let fv = state.fusion.bind(&g);
    let stride = cfg.tap.stride();
    let mut skipped = SkipFlags::default();

    let mut seg_l = Vec::new();
    let mut l_feats = Vec::new();
    for (v, m) in &batch.labeled {
        let out = state.student.forward(volume_var(&g, v), &sv)?;
        seg_l.push(hybrid_loss(class_probs(out.logits), m)?);
        l_feats.push((out.features, m.downsample(stride)));
    }
    let mut seg_u = Vec::new();
    let mut u_feats = Vec::new();
    for v in &batch.unlabeled {
        let x = Tensor::new(&[1, v.dims[0], v.dims[1], v.dims[2]], v.data.clone())?;
        let (t_logits, t_feats) = seg_forward(&x, &state.teacher.params)?;
        let pseudo = pseudo_label(&t_logits)?;
        let out = state.student.forward(volume_var(&g, v), &sv)?;
        seg_u.push(hybrid_loss(class_probs(out.logits), &pseudo)?);
        let t_feats = g.constant(&t_feats.shape().to_vec(), t_feats.into_data());
        u_feats.push((out.features, t_feats, pseudo.downsample(stride)));
    }
    let seg_l = mean_of(&g, &seg_l);
    let seg_u = mean_of(&g, &seg_u);

    let zero = g.scalar(0.0);
    let (mut proto_l, mut proto_u, mut opt, mut div, mut spcl) = (zero, zero, zero, zero, zero);
    if cfg.prototypes_active() {
        let k = cfg.effective_k();
        let mut sets: Vec<SampleProtos> = Vec::new();
        for (i, (f, m)) in l_feats.iter().enumerate() {
            extract_sets(*f, m, Source::Labeled, i, k, &mut state.kmeans_rng, &mut sets, &mut skipped)?;
        }
        for (i, (_, tf, m)) in u_feats.iter().enumerate() {
            extract_sets(*tf, m, Source::Unlabeled, i, k, &mut state.kmeans_rng, &mut sets, &mut skipped)?;
        }

        let pick = |src| -> Vec<ClassProtos> {
            sets.iter().filter(|p| p.source == src).map(|p| ClassProtos { class: p.class, protos: p.protos }).collect()
        };
        let (lab, unl) = (pick(Source::Labeled), pick(Source::Unlabeled));
        let bank = if cfg.use_ckaf {
            fuse(&lab, &unl, &state.fusion, &fv, NUM_CLASSES, k)
        } else if lab.is_empty() {
            Err(Error::ConsensusUnavailable(0))
        } else {
            labeled_bank(&lab, NUM_CLASSES, k)
        };
        match bank {
            Ok(bank) => {
                let mut pl = Vec::new();
                for (f, m) in &l_feats {
                    let probs = predict_rows(feature_rows(*f), bank, k, cfg.tau_p).t();
                    pl.push(hybrid_loss(probs, m)?);
                }
                let mut pu = Vec::new();
                for (f, _, m) in &u_feats {
                    let probs = predict_rows(feature_rows(*f), bank, k, cfg.tau_p).t();
                    pu.push(hybrid_loss(probs, m)?);
                }
                proto_l = mean_of(&g, &pl);
                proto_u = mean_of(&g, &pu);
            }
            Err(Error::ConsensusUnavailable(c)) => skipped.consensus_unavailable = Some(c),
            Err(e) => return Err(e),
        }

        if cfg.use_pcc && !sets.is_empty() {
            let mut rows = Vec::new();
            let mut tags = Vec::new();
            for p in &sets {
                rows.push(p.protos);
                rows.push(p.mean);
                for r in 0..k {
                    tags.push(ProtoTag { class: p.class, region: Region::Rank(r), source: p.source, sample: p.sample });
                }
                tags.push(ProtoTag { class: p.class, region: Region::Mean, source: p.source, sample: p.sample });
            }
            match contrastive_loss(g.concat(&rows, 0), &tags, &cfg.pccl) {
                Ok(v) => opt = v,
                Err(Error::NoValidPairs) => skipped.no_valid_pairs = true,
                Err(e) => return Err(e),
            }
            let groups: Vec<Var> = sets.iter().map(|p| p.protos).collect();
            let (d, contributed) = decorrelation_loss(&g, &groups, &cfg.pccl);
            div = d;
            skipped.div_empty = !contributed;
            spcl = spcl_loss(opt, div, &cfg.pccl);
        }
    }

    let lambda_gs = warmup(s, cfg.steps);
    let total = seg_l.add(seg_u).add(proto_l).add(proto_u.add(spcl).mul_scalar(lambda_gs));
    let report = StepReport {
        step: s,
        lambda_gs,
        seg_l: seg_l.item(),
        seg_u: seg_u.item(),
        proto_l: proto_l.item(),
        proto_u: proto_u.item(),
        opt: opt.item(),
        div: div.item(),
        spcl: spcl.item(),
        total: total.item(),
        skipped,
    };
    if !report.total.is_finite() {
        return Err(Error::NonFinite(format!("total loss at step {s}: {}", serde_json::to_string(&report).unwrap_or_default())));
    }

    let grads = g.backward(total);
    let leaves: Vec<Var> = sv.all().iter().copied().chain(FusionParams::leaves(&fv)).collect();
    let TrainState { student, fusion, velocity, .. } = state;
    let params = student.tensors_mut().into_iter().chain(fusion.tensors_mut());
    for ((p, leaf), vel) in params.zip(leaves).zip(velocity.iter_mut()) {
        let Some(gr) = grads.wrt(leaf) else { continue };
        for ((w, v), &dw) in p.data_mut().iter_mut().zip(vel.iter_mut()).zip(gr) {
            *v = cfg.momentum * *v + dw;
            *w -= cfg.lr * *v;
        }
    }
    ema_update(&mut state.teacher, &state.student)?;
    Ok(report)
}

/// Draws a training batch of random crops (labeled ids with replacement).
pub fn sample_batch(corpus: &Corpus, cfg: &TrainConfig, rng: &mut Rng) -> Result<Batch> {
    let lab = corpus.manifest.ids(Role::Labeled);
    let unl = corpus.manifest.ids(Role::Unlabeled);
    if lab.is_empty() || unl.is_empty() {
        return Err(contract("corpus needs labeled and unlabeled phantoms"));
    }
    let mut labeled = Vec::with_capacity(cfg.labeled_per_batch);
    for _ in 0..cfg.labeled_per_batch {
        let id = lab[rng.below(lab.len())];
        let (v, m, _) = crop_pair(&corpus.volumes[id], &corpus.masks[id], cfg.crop_size, rng)?;
        labeled.push((v, m));
    }
    let mut unlabeled = Vec::with_capacity(cfg.unlabeled_per_batch);
    for _ in 0..cfg.unlabeled_per_batch {
        let id = unl[rng.below(unl.len())];
        let (v, _, _) = crop_pair(&corpus.volumes[id], &corpus.masks[id], cfg.crop_size, rng)?;
        unlabeled.push(v);
    }
    Ok(Batch { labeled, unlabeled })
}

/// Argmax segmentation of a whole volume by the given network.
pub fn predict_volume(params: &SegNetParams, v: &Volume) -> Result<Mask> {
    let x = Tensor::new(&[1, v.dims[0], v.dims[1], v.dims[2]], v.data.clone())?;
    let (logits, _) = seg_forward(&x, params)?;
    pseudo_label(&logits)
}

pub fn evaluate_cases(params: &SegNetParams, corpus: &Corpus, roles: &[Role]) -> Result<Vec<CaseMetrics>> {
    let mut out = Vec::new();
    for e in &corpus.manifest.entries {
        if !roles.contains(&e.role) {
            continue;
        }
        let pred = predict_volume(params, &corpus.volumes[e.id])?;
        out.push(CaseMetrics { case_id: e.id, role: e.role, report: evaluate(&pred, &corpus.masks[e.id])? });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub steps: usize,
    pub test: MetricSummary,
    pub gap: GapReport,
    pub final_total_loss: f64,
    pub skipped_steps: SkipCounts,
    pub cases: Vec<CaseMetrics>,
}

/// How many steps hit each skip condition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SkipCounts {
    pub no_valid_pairs: usize,
    pub consensus_unavailable: usize,
    pub div_empty: usize,
    pub skipped_sets: usize,
}

/// Runs `cfg.steps` steps on `corpus`, streaming reports to `on_step`,
/// then evaluates the student on every split.
pub fn train(cfg: &TrainConfig, corpus: &Corpus, mut on_step: impl FnMut(&StepReport) -> Result<()>) -> Result<(TrainState, RunMetrics)> {
    let mut state = TrainState::new(cfg)?;
    let mut data_rng = Rng::with_stream(cfg.seed, 2);
    let mut counts = SkipCounts::default();
    let mut last = 0.0;
    for s in 0..cfg.steps {
        let batch = sample_batch(corpus, cfg, &mut data_rng)?;
        let r = train_step(&mut state, &batch, cfg, s)?;
        counts.no_valid_pairs += usize::from(r.skipped.no_valid_pairs);
        counts.consensus_unavailable += usize::from(r.skipped.consensus_unavailable.is_some());
        counts.div_empty += usize::from(r.skipped.div_empty && cfg.use_pcc);
        counts.skipped_sets += r.skipped.skipped_sets;
        last = r.total;
        on_step(&r)?;
    }
    let cases = evaluate_cases(&state.student, corpus, &[Role::Labeled, Role::Unlabeled, Role::Test])?;
    let test: Vec<CaseMetrics> = cases.iter().filter(|c| c.role == Role::Test).cloned().collect();
    let train_dice: Vec<(Role, f64)> = cases.iter().filter(|c| c.role != Role::Test).map(|c| (c.role, c.report.dice)).collect();
    let metrics = RunMetrics {
        steps: cfg.steps,
        test: summarize(&test),
        gap: gap_report(&train_dice)?,
        final_total_loss: last,
        skipped_steps: counts,
        cases,
    };
    Ok((state, metrics))
}

/// [`train`] writing `train_log.jsonl`, `metrics.json` and `model.sckp`
/// into `run_dir`.
pub fn train_to_dir(cfg: &TrainConfig, corpus: &Corpus, run_dir: &Path) -> Result<RunMetrics> {
    fs::create_dir_all(run_dir)?;
    let mut log = BufWriter::new(File::create(run_dir.join("train_log.jsonl"))?);
    let (state, metrics) = train(cfg, corpus, |r| {
        serde_json::to_writer(&mut log, r)?;
        log.write_all(b"\n")?;
        Ok(())
    })?;
    log.flush()?;
    fs::write(run_dir.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    checkpoint::write(&run_dir.join("model.sckp"), &state.checkpoint_records())?;
    Ok(metrics)
}
