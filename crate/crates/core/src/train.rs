//! Mean-teacher adaptation: pseudo-labels, prompt assembly, the three losses
//! and the supervised / UDA / WDA training loop.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{
    augment_pair, density_from_points, kernel_peak, AugmentedPair, PointPrompt, PromptRole,
    Provenance, Sample,
};
use crate::error::{Error, Result};
use crate::gradcheck::{gradcheck, GradcheckReport};
use crate::grid::{Grid, Point};
use crate::infer::{default_stride, sliding_window_predict};
use crate::metrics::connected_components;
use crate::model::{Bound, ModelConfig, ModelState, PclToken};
use crate::optim::{poly_lr, AdamWConfig, OptimizerState};
use crate::params::ParamSet;
use crate::seed::{self, salt};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Supervised,
    Uda,
    Wda,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Self::Supervised),
            "uda" => Ok(Self::Uda),
            "wda" => Ok(Self::Wda),
            _ => Err(Error::invalid(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub sparse_fraction: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub ema_momentum: f64,
    pub seg_conf_threshold: f64,
    /// In units of one kernel peak.
    pub det_peak_threshold: f64,
    pub nms_radius: usize,
    pub tau: f64,
    pub delta_f: f64,
    pub delta_b: f64,
    pub n_negatives: usize,
    pub queries_per_instance: usize,
    pub lambda_seg: f64,
    pub lambda_det: f64,
    pub lambda_pcl: f64,
    pub sigma: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub use_pseudo_labels: bool,
    pub use_train_prompts: bool,
    pub use_pcl: bool,
    /// Probability that a target sample is shown to the student without
    /// task prompts (and so without PCL).
    pub target_prompt_dropout: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Supervised,
            sparse_fraction: 0.15,
            iterations: 2000,
            batch_size: 2,
            base_lr: 3e-4,
            weight_decay: 0.01,
            ema_momentum: 0.99,
            seg_conf_threshold: 0.9,
            det_peak_threshold: 0.3,
            nms_radius: 4,
            tau: 0.1,
            delta_f: 0.9,
            delta_b: 0.1,
            n_negatives: 64,
            queries_per_instance: 3,
            lambda_seg: 1.0,
            lambda_det: 1.0,
            lambda_pcl: 0.1,
            sigma: crate::data::DEFAULT_SIGMA,
            seed: 0,
            checkpoint_every: 500,
            use_pseudo_labels: true,
            use_train_prompts: true,
            use_pcl: true,
            target_prompt_dropout: 0.5,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !open_unit(self.seg_conf_threshold)
            || !open_unit(self.delta_f)
            || !open_unit(self.delta_b)
        {
            return Err(Error::invalid("thresholds must lie in (0, 1)"));
        }
        if !(self.det_peak_threshold > 0.0) {
            return Err(Error::invalid("det_peak_threshold must be positive"));
        }
        if self.delta_b >= self.delta_f {
            return Err(Error::invalid("delta_b must be below delta_f"));
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return Err(Error::invalid("ema_momentum must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.sparse_fraction)
            || !(0.0..=1.0).contains(&self.target_prompt_dropout)
        {
            return Err(Error::invalid(
                "sparse_fraction and target_prompt_dropout must lie in [0, 1]",
            ));
        }
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::invalid("iterations and batch_size must be positive"));
        }
        if !(self.base_lr >= 0.0)
            || !(self.tau > 0.0)
            || self.nms_radius == 0
            || !(self.sigma > 0.0)
        {
            return Err(Error::invalid(
                "base_lr ≥ 0, tau > 0, nms_radius ≥ 1 and sigma > 0 required",
            ));
        }
        self.model.validate()
    }
}

/// `t ← m·t + (1−m)·s` for every parameter.
pub fn ema_update(teacher: &mut ParamSet, student: &ParamSet, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::invalid("momentum must lie in [0, 1]"));
    }
    if teacher.len() != student.len() {
        return Err(Error::invalid(
            "teacher and student differ in parameter count",
        ));
    }
    for i in 0..teacher.len() {
        let s = student.tensor(i);
        let t = teacher.tensor_mut(i);
        if t.shape() != s.shape() {
            return Err(Error::ShapeMismatch {
                op: "ema_update",
                lhs: t.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = momentum * *tv + (1.0 - momentum) * sv;
        }
    }
    Ok(())
}

/// Strict 8-neighbourhood maxima at or above `threshold`, accepted greedily
/// by (score desc, row asc, col asc) and suppressing candidates within
/// Chebyshev distance `radius` of an accepted peak.
pub fn extract_peaks(density: &Grid<f64>, threshold: f64, radius: usize) -> Vec<(Point, f64)> {
    let (h, w) = density.dims();
    let mut cands = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let v = density.get(r, c);
            if !(v >= threshold) {
                continue;
            }
            let mut strict = true;
            'nb: for rr in r.saturating_sub(1)..(r + 2).min(h) {
                for cc in c.saturating_sub(1)..(c + 2).min(w) {
                    if (rr, cc) != (r, c) && density.get(rr, cc) >= v {
                        strict = false;
                        break 'nb;
                    }
                }
            }
            if strict {
                cands.push((Point::new(r, c), v));
            }
        }
    }
    cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut out: Vec<(Point, f64)> = Vec::new();
    for (p, v) in cands {
        if out.iter().all(|(q, _)| q.chebyshev(p) > radius) {
            out.push((p, v));
        }
    }
    out
}

/// `gt` followed by every detection farther than `radius` from all of them.
pub fn assemble_target_prompts(
    gt: &[PointPrompt],
    detected: &[PointPrompt],
    radius: usize,
) -> Vec<PointPrompt> {
    let mut out = gt.to_vec();
    for d in detected {
        if gt.iter().all(|g| g.position.chebyshev(d.position) > radius) {
            out.push(*d);
        }
    }
    out
}

fn detections(peaks: &[(Point, f64)]) -> Vec<PointPrompt> {
    peaks
        .iter()
        .map(|&(p, _)| PointPrompt::task(p, Provenance::Detected))
        .collect()
}

/// Detection pseudo-label: density (unit-mass kernels) over the ground-truth
/// sparse points plus confident teacher peaks not already covered by them.
/// `teacher_density` is in kernel-peak units.
pub fn gen_det_pseudolabels(
    teacher_density: &Grid<f64>,
    gt_sparse: &[PointPrompt],
    config: &TrainConfig,
) -> Result<(Grid<f64>, Vec<PointPrompt>)> {
    let peaks = extract_peaks(
        teacher_density,
        config.det_peak_threshold,
        config.nms_radius,
    );
    let points = assemble_target_prompts(gt_sparse, &detections(&peaks), config.nms_radius);
    let pos: Vec<Point> = points.iter().map(|p| p.position).collect();
    Ok((
        density_from_points(&pos, config.sigma, teacher_density.dims())?,
        points,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegPseudoLabels {
    /// 0 background, 1 foreground.
    pub class: Grid<u8>,
    /// Max softmax probability.
    pub confidence: Grid<f64>,
    pub fg_prob: Grid<f64>,
    pub ignore: Grid<bool>,
}

impl SegPseudoLabels {
    pub fn warp(&self, pair: &AugmentedPair) -> Self {
        Self {
            class: pair.warp(&self.class),
            confidence: pair.warp(&self.confidence),
            fg_prob: pair.warp(&self.fg_prob),
            ignore: pair.warp(&self.ignore),
        }
    }

    pub fn ignored_fraction(&self) -> f64 {
        self.ignore.data().iter().filter(|&&v| v).count() as f64 / self.ignore.len() as f64
    }
}

/// Argmax classes from `[H·W, 2]` logits, ignoring pixels whose max softmax
/// probability is below `threshold`.
pub fn gen_seg_pseudolabels(
    logits: &[f64],
    (h, w): (usize, usize),
    threshold: f64,
) -> Result<SegPseudoLabels> {
    if logits.len() != h * w * 2 {
        return Err(Error::ShapeMismatch {
            op: "seg pseudo-labels",
            lhs: vec![h * w, 2],
            rhs: vec![logits.len()],
        });
    }
    let fg: Vec<f64> = logits
        .chunks_exact(2)
        .map(|l| 1.0 / (1.0 + (l[0] - l[1]).exp()))
        .collect();
    let fg_prob = Grid::from_vec(h, w, fg)?;
    let class = fg_prob.map(|p| (p > 0.5) as u8);
    let confidence = fg_prob.map(|p| p.max(1.0 - p));
    let ignore = confidence.map(|c| c < threshold);
    Ok(SegPseudoLabels {
        class,
        confidence,
        fg_prob,
        ignore,
    })
}

/// `n ~ U{0..|items|}` items drawn without replacement.
pub fn random_subset<T: Copy>(items: &[T], seed: u64) -> Vec<T> {
    let mut rng = seed::rng(seed, salt::PROMPTS, 0);
    let n = rng.gen_range(0..=items.len());
    sample_indices(&mut rng, items.len(), n)
        .into_iter()
        .map(|i| items[i])
        .collect()
}

/// `n_s ~ U{0..|centers|}` centers drawn without replacement.
pub fn sample_source_prompts(centers: &[Point], seed: u64) -> Vec<Point> {
    random_subset(centers, seed)
}

/// PCL queries (≤ `queries_per_instance` confident pixels per pseudo-label
/// component) and negatives (pixels with foreground probability < δ_b).
pub fn select_pcl_points(
    pseudo: &SegPseudoLabels,
    config: &TrainConfig,
    seed: u64,
) -> (Vec<Point>, Vec<Point>) {
    let mut rng = seed::rng(seed, salt::PCL, 0);
    let comps = connected_components(&pseudo.class.map(|c| c == 1));
    let k = comps.data().iter().copied().max().unwrap_or(0) as usize;
    let (h, w) = comps.dims();
    let mut eligible: Vec<Vec<Point>> = vec![Vec::new(); k];
    let mut background = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let l = comps.get(r, c);
            if l > 0 && pseudo.confidence.get(r, c) > config.delta_f {
                eligible[l as usize - 1].push(Point::new(r, c));
            }
            if pseudo.fg_prob.get(r, c) < config.delta_b {
                background.push(Point::new(r, c));
            }
        }
    }
    let mut queries = Vec::new();
    for pts in &eligible {
        let n = pts.len().min(config.queries_per_instance);
        queries.extend(
            sample_indices(&mut rng, pts.len(), n)
                .into_iter()
                .map(|i| pts[i]),
        );
    }
    if background.len() < config.n_negatives {
        log::debug!(
            "only {} pcl negatives available of {}",
            background.len(),
            config.n_negatives
        );
    }
    let n = background.len().min(config.n_negatives);
    let negatives = sample_indices(&mut rng, background.len(), n)
        .into_iter()
        .map(|i| background[i])
        .collect();
    (queries, negatives)
}

/// InfoNCE over unit-norm rows: each query `z_i` against the renormalized
/// mean sparse-prompt embedding (positive) and every negative.
pub fn loss_pcl(g: &mut Graph, queries: Var, sparse: Var, negatives: Var, tau: f64) -> Result<Var> {
    let ns = g.shape(sparse)[0];
    let avg = g.constant(Tensor::new(vec![1, ns], vec![1.0 / ns as f64; ns])?);
    let mean = g.matmul(avg, sparse)?;
    let mu = g.l2_normalize(mean);
    let keys = g.concat(&[mu, negatives])?;
    let kt = g.transpose(keys)?;
    let sims = g.matmul(queries, kt)?;
    let logits = g.scale(sims, 1.0 / tau);
    let nq = g.shape(queries)[0];
    g.cross_entropy(logits, &vec![0; nq], &vec![1.0; nq])
}

/// One prediction and its per-pixel target.
pub struct DetTerm {
    pub pred: Var,
    pub target: Vec<f64>,
}

/// Per-domain mean of per-sample MSE, domains summed.
pub fn loss_det(g: &mut Graph, source: &[DetTerm], target: &[DetTerm]) -> Result<Option<Var>> {
    let mut total: Option<Var> = None;
    for domain in [source, target] {
        if domain.is_empty() {
            continue;
        }
        let mut acc: Option<Var> = None;
        for t in domain {
            let l = g.mse(t.pred, &t.target)?;
            acc = Some(match acc {
                Some(a) => g.add(a, l)?,
                None => l,
            });
        }
        let term = g.scale(acc.unwrap(), 1.0 / domain.len() as f64);
        total = Some(match total {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(total)
}

pub struct SegTerm {
    pub logits: Var,
    pub classes: Vec<usize>,
    /// Pixels set here contribute nothing.
    pub ignore: Option<Vec<bool>>,
}

/// Per-domain mean of per-sample pixel-mean cross-entropy over non-ignored
/// pixels, domains summed. A fully ignored sample contributes 0.
pub fn loss_seg(g: &mut Graph, source: &[SegTerm], target: &[SegTerm]) -> Result<Option<Var>> {
    let mut total: Option<Var> = None;
    for domain in [source, target] {
        let b = domain.len() as f64;
        for t in domain {
            let n = t.classes.len();
            let valid = t
                .ignore
                .as_ref()
                .map_or(n, |m| m.iter().filter(|&&v| !v).count());
            let w = if valid == 0 {
                0.0
            } else {
                1.0 / (valid as f64 * b)
            };
            let weights: Vec<f64> = match &t.ignore {
                Some(m) => m.iter().map(|&ig| if ig { 0.0 } else { w }).collect(),
                None => vec![w; n],
            };
            let l = g.cross_entropy(t.logits, &t.classes, &weights)?;
            total = Some(match total {
                Some(a) => g.add(a, l)?,
                None => l,
            });
        }
    }
    Ok(total)
}

/// Source-model detections on each target image, at twice the detection
/// threshold, used as pseudo sparse points for UDA.
pub fn uda_bootstrap_points(
    source_model: &ModelState,
    target_images: &[Grid<f64>],
    config: &TrainConfig,
) -> Result<Vec<Vec<Point>>> {
    if source_model.step == 0 {
        return Err(Error::invalid(
            "bootstrap requires a trained source model (step 0 given)",
        ));
    }
    target_images
        .iter()
        .map(|img| {
            let pred =
                sliding_window_predict(source_model, img, default_stride(source_model), &[])?;
            let peaks = extract_peaks(
                &pred.density,
                2.0 * config.det_peak_threshold,
                config.nms_radius,
            );
            Ok(peaks.into_iter().map(|(p, _)| p).collect())
        })
        .collect()
}

pub fn write_bootstrap_cache(path: &Path, points: &[Vec<Point>]) -> Result<()> {
    Ok(std::fs::write(path, serde_json::to_vec(points)?)?)
}

pub fn read_bootstrap_cache(path: &Path) -> Result<Vec<Vec<Point>>> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub lr: f64,
    pub seg: f64,
    pub det: f64,
    pub pcl: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,lr,L_seg,L_det,L_pcl,total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e}",
            self.step, self.lr, self.seg, self.det, self.pcl, self.total
        )
    }
}

pub struct TeacherStudent {
    pub student: ModelState,
    pub teacher: ModelState,
    pub optimizer: OptimizerState,
}

impl TeacherStudent {
    pub fn new(student: ModelState, config: &TrainConfig) -> Self {
        let adam = AdamWConfig {
            lr: config.base_lr,
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        };
        Self {
            optimizer: OptimizerState::new(adam, &student.params),
            teacher: student.clone(),
            student,
        }
    }
}

fn peak_units(density: &Grid<f64>, sigma: f64) -> Vec<f64> {
    let k = kernel_peak(sigma);
    density.data().iter().map(|v| v / k).collect()
}

fn pixel_classes(instances: &Grid<u32>) -> Vec<usize> {
    instances
        .data()
        .iter()
        .map(|&v| (v != 0) as usize)
        .collect()
}

/// Target-domain supervision assembled from teacher outputs on a weak view,
/// expressed in the student's strong view.
struct TargetPlan {
    /// Strong view.
    image: Grid<f64>,
    task: Vec<PointPrompt>,
    /// Leading entries of `task` that are sparse annotations.
    n_sparse: usize,
    det_target: Option<Vec<f64>>,
    seg: Option<SegPseudoLabels>,
    pcl: Vec<PclToken>,
    n_queries: usize,
}

struct SourceView {
    image: Grid<f64>,
    classes: Vec<usize>,
    /// Kernel-peak units.
    density: Vec<f64>,
    prompts: Vec<Point>,
}

impl SourceView {
    fn new(view: Sample, prompts: Vec<Point>) -> Self {
        Self {
            classes: pixel_classes(&view.instances),
            density: peak_units(&view.density, view.sigma),
            image: view.image,
            prompts,
        }
    }
}

struct Losses {
    seg: Var,
    det: Var,
    pcl: Option<Var>,
    total: Var,
}

fn pcl_term(
    b: &Bound,
    g: &mut Graph,
    pcl_tokens: Var,
    task_tokens: Var,
    plan: &TargetPlan,
    tau: f64,
) -> Result<Var> {
    let z = b.project(g, pcl_tokens)?;
    let queries = g.slice_rows(z, 0, plan.n_queries)?;
    let negatives = g.slice_rows(z, plan.n_queries, plan.pcl.len())?;
    let sparse_tokens = g.slice_rows(task_tokens, 0, plan.n_sparse)?;
    let sparse = b.project(g, sparse_tokens)?;
    loss_pcl(g, queries, sparse, negatives, tau)
}

/// Student forward passes and the weighted total
/// `λ_seg·L_seg + λ_det·L_det + λ_pcl·L_pcl`.
fn build_loss(
    b: &Bound,
    g: &mut Graph,
    source: &[SourceView],
    plans: &[TargetPlan],
    cfg: &TrainConfig,
) -> Result<Losses> {
    let (mut seg_src, mut det_src) = (Vec::new(), Vec::new());
    for view in source {
        let f = b.forward(g, &view.image, &view.prompts, &[])?;
        seg_src.push(SegTerm {
            logits: f.seg_logits,
            classes: view.classes.clone(),
            ignore: None,
        });
        det_src.push(DetTerm {
            pred: f.density,
            target: view.density.clone(),
        });
    }
    let (mut seg_tgt, mut det_tgt, mut pcl_terms) = (Vec::new(), Vec::new(), Vec::new());
    for plan in plans {
        let task: Vec<Point> = plan.task.iter().map(|p| p.position).collect();
        let f = b.forward(g, &plan.image, &task, &plan.pcl)?;
        if let Some(seg) = &plan.seg {
            seg_tgt.push(SegTerm {
                logits: f.seg_logits,
                classes: seg.class.data().iter().map(|&c| c as usize).collect(),
                ignore: Some(seg.ignore.data().to_vec()),
            });
        }
        if let Some(t) = &plan.det_target {
            det_tgt.push(DetTerm {
                pred: f.density,
                target: t.clone(),
            });
        }
        if let Some(tokens) = f.pcl_tokens {
            pcl_terms.push(pcl_term(b, g, tokens, f.task_tokens, plan, cfg.tau)?);
        }
    }
    let none = || Error::invalid("loss needs at least one source sample");
    let seg = loss_seg(g, &seg_src, &seg_tgt)?.ok_or_else(none)?;
    let det = loss_det(g, &det_src, &det_tgt)?.ok_or_else(none)?;
    let pcl = match pcl_terms.len() {
        0 => None,
        n => {
            let mut acc = pcl_terms[0];
            for &t in &pcl_terms[1..] {
                acc = g.add(acc, t)?;
            }
            Some(g.scale(acc, 1.0 / n as f64))
        }
    };
    let seg_w = g.scale(seg, cfg.lambda_seg);
    let det_w = g.scale(det, cfg.lambda_det);
    let mut total = g.add(seg_w, det_w)?;
    if let Some(p) = pcl {
        let p = g.scale(p, cfg.lambda_pcl);
        total = g.add(total, p)?;
    }
    Ok(Losses {
        seg,
        det,
        pcl,
        total,
    })
}

/// Finite-difference check of the full training loss (all three terms, both
/// domains, pcl tokens under the mask) with respect to every parameter of a
/// tiny model.
pub fn composed_loss_gradcheck(seed: u64, eps: f64) -> Result<GradcheckReport> {
    let model_cfg = ModelConfig::tiny();
    let crop = model_cfg.image_crop;
    let model = ModelState::new(model_cfg, seed)?;
    let cfg = TrainConfig {
        mode: Mode::Wda,
        lambda_pcl: 1.0,
        model: model.config().clone(),
        ..TrainConfig::default()
    };
    let spec = crate::data::DomainSpec {
        image_size: 32,
        instances_per_image: (3, 4),
        instance_radius: (3.0, 4.0),
        ..crate::data::DomainSpec::source()
    }
    .with_seed(seed);
    let labels = crate::data::LabelOptions::default();
    let centre_crop = |i| {
        crate::data::crop_exact(
            &crate::data::generate_sample(&spec, i, &labels)?,
            8,
            8,
            crop,
        )
    };
    let src = centre_crop(0)?;
    let tgt = centre_crop(1)?;
    let source = vec![SourceView::new(src.clone(), src.centers.clone())];
    let pred = model.predict(&tgt.image, &[])?;
    let mut seg = gen_seg_pseudolabels(&pred.logits, (crop, crop), cfg.seg_conf_threshold)?;
    // Untrained logits are never confident; supervise a deterministic half.
    for (k, v) in seg.ignore.data_mut().iter_mut().enumerate() {
        *v = k % 2 == 0;
    }
    let q = |r, c, role| PclToken {
        position: Point::new(r, c),
        role,
    };
    let plan = TargetPlan {
        task: vec![
            PointPrompt::task(Point::new(crop / 2, crop / 2), Provenance::GroundTruth),
            PointPrompt::task(Point::new(2, crop - 3), Provenance::Detected),
        ],
        n_sparse: 1,
        det_target: Some(peak_units(&tgt.density, tgt.sigma)),
        seg: Some(seg),
        pcl: vec![
            q(crop / 2 + 1, crop / 2, PromptRole::PclQuery),
            q(crop / 2, crop / 2 - 1, PromptRole::PclQuery),
            q(0, 0, PromptRole::PclNegative),
            q(crop - 1, 1, PromptRole::PclNegative),
            q(1, crop - 1, PromptRole::PclNegative),
        ],
        n_queries: 2,
        image: tgt.image,
    };
    let tensors: Vec<Tensor> = model.params.tensors().cloned().collect();
    gradcheck(
        |g, vars| {
            let b = model.bind_vars(vars.to_vec());
            Ok(build_loss(&b, g, &source, std::slice::from_ref(&plan), &cfg)?.total)
        },
        &tensors,
        eps,
    )
}

pub struct Trainer {
    pub config: TrainConfig,
    pub source: Vec<Sample>,
    pub target: Vec<Sample>,
    /// Pseudo sparse points per target image (UDA).
    pub bootstrap: Option<Vec<Vec<Point>>>,
    pub state: TeacherStudent,
}

impl Trainer {
    pub fn new(
        config: TrainConfig,
        init: ModelState,
        source: Vec<Sample>,
        target: Vec<Sample>,
        bootstrap: Option<Vec<Vec<Point>>>,
    ) -> Result<Self> {
        config.validate()?;
        if source.is_empty() {
            return Err(Error::invalid("source domain is empty"));
        }
        let crop = init.config().image_crop;
        if source
            .iter()
            .chain(&target)
            .any(|s| s.size().0 < crop || s.size().1 < crop)
        {
            return Err(Error::invalid(format!(
                "images must be at least the {crop}px crop"
            )));
        }
        match config.mode {
            Mode::Supervised => {}
            Mode::Wda if target.is_empty() => {
                return Err(Error::invalid("adaptation needs target images"))
            }
            Mode::Uda => {
                let b = bootstrap
                    .as_ref()
                    .ok_or_else(|| Error::invalid("uda needs bootstrap points"))?;
                if b.len() != target.len() || target.is_empty() {
                    return Err(Error::invalid(
                        "bootstrap cache does not match the target set",
                    ));
                }
            }
            Mode::Wda => {}
        }
        Ok(Self {
            state: TeacherStudent::new(init, &config),
            config,
            source,
            target,
            bootstrap,
        })
    }

    fn pick(&self, iter: usize, domain: u64, n: usize) -> Vec<usize> {
        let mut rng = seed::rng(self.config.seed, salt::BATCH, (iter as u64) << 1 | domain);
        (0..self.config.batch_size)
            .map(|_| rng.gen_range(0..n))
            .collect()
    }

    fn sub_seed(&self, s: u64, iter: usize, domain: u64, j: usize) -> u64 {
        seed::mix(
            self.config.seed,
            s,
            ((iter * self.config.batch_size + j) as u64) << 1 | domain,
        )
    }

    fn plan_target(&self, iter: usize, j: usize, idx: usize) -> Result<TargetPlan> {
        let cfg = &self.config;
        let crop = self.state.student.config().image_crop;
        let sample = &self.target[idx];
        let pair = augment_pair(sample, crop, self.sub_seed(salt::AUGMENT, iter, 1, j))?;
        let sparse: Vec<PointPrompt> = match cfg.mode {
            Mode::Wda => pair
                .weak
                .sparse
                .iter()
                .map(|&p| PointPrompt::task(p, Provenance::GroundTruth))
                .collect(),
            Mode::Uda => self.bootstrap.as_ref().unwrap()[idx]
                .iter()
                .filter_map(|&p| pair.geometry.map_point(p))
                .map(|p| PointPrompt::task(p, Provenance::Bootstrap))
                .collect(),
            Mode::Supervised => unreachable!("no target plan in supervised mode"),
        };
        let warp_prompts = |v: &[PointPrompt]| -> Vec<PointPrompt> {
            v.iter()
                .map(|p| PointPrompt {
                    position: pair.warp_point(p.position),
                    ..*p
                })
                .collect()
        };
        let dropped = seed::rng(self.sub_seed(salt::DROPOUT, iter, 1, j), salt::DROPOUT, 0)
            .gen::<f64>()
            < cfg.target_prompt_dropout;
        let prompted = cfg.use_train_prompts && !dropped;
        if !cfg.use_pseudo_labels {
            let task = if prompted {
                warp_prompts(&sparse)
            } else {
                Vec::new()
            };
            let n_sparse = task.len();
            return Ok(TargetPlan {
                image: pair.strong.image,
                task,
                n_sparse,
                det_target: None,
                seg: None,
                pcl: Vec::new(),
                n_queries: 0,
            });
        }
        let teacher_prompts: Vec<Point> = if cfg.use_train_prompts {
            sparse.iter().map(|p| p.position).collect()
        } else {
            Vec::new()
        };
        let pred = self
            .state
            .teacher
            .predict(&pair.weak.image, &teacher_prompts)?;
        let t_density = Grid::from_vec(crop, crop, pred.density.clone())?;
        let (d_hat, points) = gen_det_pseudolabels(&t_density, &sparse, cfg)?;
        let seg =
            gen_seg_pseudolabels(&pred.logits, (crop, crop), cfg.seg_conf_threshold)?.warp(&pair);
        // Sparse points always; a random number of the detections.
        let task = if prompted {
            let mut chosen = points[..sparse.len()].to_vec();
            chosen.extend(random_subset(
                &points[sparse.len()..],
                self.sub_seed(salt::PROMPTS, iter, 1, j),
            ));
            warp_prompts(&chosen)
        } else {
            Vec::new()
        };
        let n_sparse = if prompted { sparse.len() } else { 0 };
        let (mut pcl, mut n_queries) = (Vec::new(), 0);
        if cfg.use_pcl && cfg.lambda_pcl > 0.0 && n_sparse > 0 {
            let (q, n) = select_pcl_points(&seg, cfg, self.sub_seed(salt::PCL, iter, 1, j));
            if !q.is_empty() && !n.is_empty() {
                n_queries = q.len();
                let tok = |role| move |p: Point| PclToken { position: p, role };
                pcl.extend(q.into_iter().map(tok(PromptRole::PclQuery)));
                pcl.extend(n.into_iter().map(tok(PromptRole::PclNegative)));
            }
        }
        let det_target = peak_units(&pair.warp(&d_hat), cfg.sigma);
        Ok(TargetPlan {
            image: pair.strong.image,
            task,
            n_sparse,
            det_target: Some(det_target),
            seg: Some(seg),
            pcl,
            n_queries,
        })
    }

    /// One optimization step at iteration `iter`.
    pub fn step(&mut self, iter: usize) -> Result<LossReport> {
        let cfg = self.config.clone();
        let lr = poly_lr(iter, cfg.iterations, cfg.base_lr, 0.9)?;
        let crop = self.state.student.config().image_crop;

        let source_idx = self.pick(iter, 0, self.source.len());
        let mut source_views = Vec::with_capacity(source_idx.len());
        for (j, &i) in source_idx.iter().enumerate() {
            let pair = augment_pair(
                &self.source[i],
                crop,
                self.sub_seed(salt::AUGMENT, iter, 0, j),
            )?;
            let prompts = if cfg.use_train_prompts {
                sample_source_prompts(
                    &pair.strong.centers,
                    self.sub_seed(salt::PROMPTS, iter, 0, j),
                )
            } else {
                Vec::new()
            };
            source_views.push(SourceView::new(pair.strong, prompts));
        }
        let plans: Vec<TargetPlan> = if cfg.mode == Mode::Supervised {
            Vec::new()
        } else {
            let idx = self.pick(iter, 1, self.target.len());
            idx.iter()
                .enumerate()
                .map(|(j, &i)| self.plan_target(iter, j, i))
                .collect::<Result<_>>()?
        };

        let mut g = Graph::new();
        let student = &self.state.student;
        let b = student.bind(&mut g, true);
        let Losses {
            seg,
            det,
            pcl,
            total,
        } = build_loss(&b, &mut g, &source_views, &plans, &cfg)?;
        let report = LossReport {
            step: student.step + 1,
            lr,
            seg: g.value(seg).item(),
            det: g.value(det).item(),
            pcl: pcl.map_or(0.0, |p| g.value(p).item()),
            total: g.value(total).item(),
        };
        if !report.total.is_finite() {
            return Err(Error::NonFinite {
                context: format!(
                    "loss at step {} (seg {}, det {}, pcl {})",
                    report.step, report.seg, report.det, report.pcl
                ),
            });
        }
        g.backward(total)?;
        let zeros: Vec<Vec<f64>> = student
            .params
            .tensors()
            .map(|t| vec![0.0; t.len()])
            .collect();
        let grads: Vec<Option<&[f64]>> = b
            .vars
            .grads(&g)
            .into_iter()
            .zip(&zeros)
            .map(|(gr, z)| Some(gr.unwrap_or(z)))
            .collect();
        self.state.optimizer.config.lr = lr;
        self.state
            .optimizer
            .step(&mut self.state.student.params, &grads)?;
        self.state.student.step += 1;
        if cfg.mode != Mode::Supervised {
            ema_update(
                &mut self.state.teacher.params,
                &self.state.student.params,
                cfg.ema_momentum,
            )?;
            self.state.teacher.step = self.state.student.step;
        }
        Ok(report)
    }

    /// Model to evaluate: the EMA teacher after adaptation, the student after
    /// supervised training.
    pub fn eval_model(&self) -> &ModelState {
        match self.config.mode {
            Mode::Supervised => &self.state.student,
            _ => &self.state.teacher,
        }
    }

    /// Runs every iteration, writing the loss trace and periodic checkpoints
    /// when `out` is given.
    pub fn run(&mut self, out: Option<&Path>) -> Result<Vec<LossReport>> {
        let mut trace_file = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("loss.csv"))?);
                writeln!(f, "{}", LossReport::CSV_HEADER)?;
                Some(f)
            }
            None => None,
        };
        let mut trace = Vec::with_capacity(self.config.iterations);
        for iter in 0..self.config.iterations {
            let r = self.step(iter)?;
            if let Some(f) = trace_file.as_mut() {
                writeln!(f, "{}", r.csv_row())?;
            }
            if iter % 100 == 0 || iter + 1 == self.config.iterations {
                log::info!(
                    "step {} lr {:.2e} seg {:.4} det {:.4} pcl {:.4} total {:.4}",
                    r.step,
                    r.lr,
                    r.seg,
                    r.det,
                    r.pcl,
                    r.total
                );
            }
            if let Some(dir) = out {
                let every = self.config.checkpoint_every;
                if every > 0 && (iter + 1) % every == 0 {
                    self.eval_model().save(&checkpoint_path(dir, iter + 1))?;
                }
            }
            trace.push(r);
        }
        if let Some(dir) = out {
            self.eval_model().save(&dir.join("final.ckpt"))?;
            if self.config.mode != Mode::Supervised {
                self.state.student.save(&dir.join("student.ckpt"))?;
            }
        }
        Ok(trace)
    }
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("step_{step:06}.ckpt"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_domain, DomainSpec, LabelOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(values: &[f64]) -> ParamSet {
        let mut p = ParamSet::default();
        p.push(
            "w",
            Tensor::new(vec![values.len()], values.to_vec()).unwrap(),
        );
        p
    }

    #[test]
    fn ema_examples() {
        let s = set(&[1.0, 2.0]);
        let mut t = set(&[0.0, 0.0]);
        ema_update(&mut t, &s, 0.0).unwrap();
        assert_eq!(t, s);
        let mut t = set(&[0.0, 0.0]);
        ema_update(&mut t, &s, 0.9).unwrap();
        ema_update(&mut t, &s, 0.9).unwrap();
        assert!((t.tensor(0).data()[0] - 0.19).abs() < 1e-12);
        let mut t = set(&[5.0, 5.0]);
        ema_update(&mut t, &s, 1.0).unwrap();
        assert_eq!(t.tensor(0).data(), &[5.0, 5.0]);
        assert!(ema_update(&mut set(&[0.0]), &s, 0.5).is_err());
    }

    fn planted(points: &[(usize, usize, f64)], h: usize, w: usize) -> Grid<f64> {
        let mut g = Grid::new(h, w);
        for &(r, c, v) in points {
            g.set(r, c, v);
        }
        g
    }

    #[test]
    fn peak_examples() {
        assert!(extract_peaks(&Grid::new(8, 8), 0.0, 1).is_empty());
        let d = planted(&[(5, 5, 1.0), (20, 20, 0.8)], 32, 32);
        let p = extract_peaks(&d, 0.5, 3);
        assert_eq!(p, vec![(Point::new(5, 5), 1.0), (Point::new(20, 20), 0.8)]);
        let d = planted(&[(5, 5, 1.0), (6, 6, 0.8)], 32, 32);
        assert_eq!(extract_peaks(&d, 0.5, 3), vec![(Point::new(5, 5), 1.0)]);
    }

    #[test]
    fn det_pseudolabel_dedup() {
        let cfg = TrainConfig::default();
        let gt = [PointPrompt::task(
            Point::new(10, 10),
            Provenance::GroundTruth,
        )];
        let empty = Grid::new(32, 32);
        let (d, pts) = gen_det_pseudolabels(&empty, &gt, &cfg).unwrap();
        assert_eq!(pts, gt.to_vec());
        assert_eq!(
            d,
            density_from_points(&[Point::new(10, 10)], cfg.sigma, (32, 32)).unwrap()
        );
        let teacher = peak_units(
            &density_from_points(&[Point::new(11, 10), Point::new(25, 25)], 2.0, (32, 32)).unwrap(),
            2.0,
        );
        let teacher = Grid::from_vec(32, 32, teacher).unwrap();
        let (_, pts) = gen_det_pseudolabels(&teacher, &gt, &cfg).unwrap();
        assert_eq!(pts.len(), 2);
        assert_eq!(pts[1].position, Point::new(25, 25));
        assert_eq!(pts[1].provenance, Provenance::Detected);
    }

    #[test]
    fn seg_pseudolabel_examples() {
        let l = gen_seg_pseudolabels(&[10.0, -10.0, 0.0, 0.0], (1, 2), 0.9).unwrap();
        assert_eq!(l.class.data(), &[0, 0]);
        assert!(l.confidence.get(0, 0) > 0.999_999);
        assert_eq!(l.ignore.data(), &[false, true]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits: Vec<f64> = (0..200).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut last = 1.0;
        for t in [0.99, 0.9, 0.8, 0.7, 0.6, 0.51] {
            let f = gen_seg_pseudolabels(&logits, (10, 10), t)
                .unwrap()
                .ignored_fraction();
            assert!(f <= last);
            last = f;
        }
    }

    #[test]
    fn source_prompt_counts_are_uniform() {
        assert!(sample_source_prompts(&[], 3).is_empty());
        let centers: Vec<Point> = (0..5).map(|i| Point::new(i, i)).collect();
        assert_eq!(
            sample_source_prompts(&centers, 9),
            sample_source_prompts(&centers, 9)
        );
        let mut counts = [0usize; 6];
        for s in 0..10_000 {
            counts[sample_source_prompts(&centers, s).len()] += 1;
        }
        for c in counts {
            assert!((c as f64 / 10_000.0 - 1.0 / 6.0).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn target_prompt_assembly() {
        assert!(assemble_target_prompts(&[], &[], 4).is_empty());
        let gt = [PointPrompt::task(Point::new(3, 3), Provenance::GroundTruth)];
        assert_eq!(assemble_target_prompts(&gt, &[], 4), gt.to_vec());
        let det = [
            PointPrompt::task(Point::new(4, 5), Provenance::Detected),
            PointPrompt::task(Point::new(20, 5), Provenance::Detected),
        ];
        let u = assemble_target_prompts(&gt, &det, 4);
        assert_eq!(u.len(), 2);
        assert!(u.len() < gt.len() + det.len());
        assert_eq!(u[1].provenance, Provenance::Detected);
    }

    fn sg(logits: Vec<f64>) -> SegPseudoLabels {
        let n = logits.len() / 2;
        let side = (n as f64).sqrt() as usize;
        gen_seg_pseudolabels(&logits, (side, side), 0.9).unwrap()
    }

    #[test]
    fn pcl_selection() {
        let cfg = TrainConfig::default();
        let (q, n) = select_pcl_points(&sg([5.0, -5.0].repeat(64)), &cfg, 0);
        assert!(q.is_empty());
        assert_eq!(n.len(), 64);
        // Four separated confident blobs in an 8×8 map.
        let mut logits = vec![];
        for r in 0..8 {
            for c in 0..8 {
                let fg = (r % 4 < 2) && (c % 4 < 2);
                logits.extend(if fg { [-5.0, 5.0] } else { [5.0, -5.0] });
            }
        }
        let pseudo = sg(logits);
        let (q, n) = select_pcl_points(&pseudo, &cfg, 1);
        assert_eq!(q.len(), 12);
        assert_eq!(n.len(), 48);
        assert!(n.iter().all(|&p| pseudo.fg_prob.at(p) < 0.1));
    }

    #[test]
    fn pcl_loss_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let s = g.constant(Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap());
        let n = g.constant(Tensor::new(vec![1, 2], vec![0.0, -1.0]).unwrap());
        let l = loss_pcl(&mut g, z, s, n, 1.0).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);
        let s = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap());
        let n = g.constant(Tensor::new(vec![3, 2], vec![-1.0, 0.0, -1.0, 0.0, -1.0, 0.0]).unwrap());
        let l = loss_pcl(&mut g, z, s, n, 0.1).unwrap();
        assert!(g.value(l).item() < 1e-8);
    }

    #[test]
    fn det_and_seg_loss_examples() {
        let mut g = Graph::new();
        let t = vec![0.0, 1.0, 1.0, 0.5];
        let p = g.constant(Tensor::new(vec![4, 1], t.clone()).unwrap());
        let term = |pred| DetTerm {
            pred,
            target: t.clone(),
        };
        let l = loss_det(&mut g, &[term(p)], &[term(p)]).unwrap().unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let z = g.constant(Tensor::zeros(&[4, 1]));
        let l = loss_det(&mut g, &[term(z)], &[]).unwrap().unwrap();
        assert!((g.value(l).item() - 2.25 / 4.0).abs() < 1e-12);

        let sharp = g.constant(Tensor::new(vec![2, 2], vec![10.0, -10.0, -10.0, 10.0]).unwrap());
        let seg = |logits, ignore| SegTerm {
            logits,
            classes: vec![0, 1],
            ignore,
        };
        let l = loss_seg(&mut g, &[seg(sharp, None)], &[]).unwrap().unwrap();
        assert!(g.value(l).item() <= 1e-3);
        let flat = g.constant(Tensor::zeros(&[2, 2]));
        let l = loss_seg(&mut g, &[seg(flat, None)], &[]).unwrap().unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);
        let both = loss_seg(&mut g, &[seg(flat, None)], &[seg(flat, None)])
            .unwrap()
            .unwrap();
        let masked = loss_seg(
            &mut g,
            &[seg(flat, None)],
            &[seg(flat, Some(vec![true, true]))],
        )
        .unwrap()
        .unwrap();
        assert!((g.value(masked).item() - g.value(both).item() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn loss_gradchecks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pred = Tensor::randn(&[6, 1], 1.0, &mut rng);
        let target: Vec<f64> = (0..6).map(|i| i as f64 * 0.1).collect();
        let r = gradcheck(
            |g, v| {
                Ok(loss_det(
                    g,
                    &[DetTerm {
                        pred: v[0],
                        target: target.clone(),
                    }],
                    &[DetTerm {
                        pred: v[0],
                        target: vec![0.2; 6],
                    }],
                )?
                .unwrap())
            },
            &[pred],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4);

        let unit = |t: Tensor| {
            let mut g = Graph::new();
            let v = g.constant(t);
            let n = g.l2_normalize(v);
            g.value(n).clone()
        };
        let q = unit(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let s = unit(Tensor::randn(&[2, 4], 1.0, &mut rng));
        let n = unit(Tensor::randn(&[5, 4], 1.0, &mut rng));
        let r = gradcheck(|g, v| loss_pcl(g, v[0], v[1], v[2], 0.1), &[q, s, n], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{}", r.max_rel_error);
    }

    #[test]
    fn composed_loss_passes_gradcheck() {
        let r = composed_loss_gradcheck(3, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }

    fn gradcheck_plan(with_pcl: bool) -> (ModelState, Vec<SourceView>, TargetPlan) {
        let m = ModelState::new(ModelConfig::tiny(), 5).unwrap();
        let crop = m.config().image_crop;
        let spec = DomainSpec {
            image_size: 32,
            instances_per_image: (3, 4),
            instance_radius: (3.0, 4.0),
            ..DomainSpec::source()
        };
        let full = crate::data::generate_sample(&spec, 0, &LabelOptions::default()).unwrap();
        let s = crate::data::crop_exact(&full, 8, 8, crop).unwrap();
        let pred = m.predict(&s.image, &[]).unwrap();
        let seg = gen_seg_pseudolabels(&pred.logits, (crop, crop), 0.55).unwrap();
        let pcl = if with_pcl {
            vec![
                PclToken {
                    position: Point::new(3, 3),
                    role: PromptRole::PclQuery,
                },
                PclToken {
                    position: Point::new(12, 1),
                    role: PromptRole::PclNegative,
                },
            ]
        } else {
            Vec::new()
        };
        let plan = TargetPlan {
            image: s.image.clone(),
            task: vec![PointPrompt::task(Point::new(8, 8), Provenance::GroundTruth)],
            n_sparse: 1,
            det_target: Some(peak_units(&s.density, s.sigma)),
            seg: Some(seg),
            n_queries: pcl.len().min(1),
            pcl,
        };
        let view = SourceView::new(s.clone(), s.centers.iter().copied().take(1).collect());
        (m, vec![view], plan)
    }

    #[test]
    fn pcl_tokens_leave_seg_and_det_losses_unchanged() {
        let cfg = TrainConfig::default();
        let values = |with_pcl| {
            let (m, src, plan) = gradcheck_plan(with_pcl);
            let mut g = Graph::new();
            let b = m.bind(&mut g, true);
            let l = build_loss(&b, &mut g, &src, &[plan], &cfg).unwrap();
            (
                g.value(l.seg).item(),
                g.value(l.det).item(),
                l.pcl.is_some(),
            )
        };
        let (s0, d0, p0) = values(false);
        let (s1, d1, p1) = values(true);
        assert!(!p0 && p1);
        assert_eq!(s0.to_bits(), s1.to_bits());
        assert_eq!(d0.to_bits(), d1.to_bits());
    }

    #[test]
    fn prompt_encoder_receives_gradient_from_both_paths() {
        let (m, src, plan) = gradcheck_plan(true);
        let roles = m.params.index_of("prompt.roles").unwrap();
        let norm = |cfg: &TrainConfig| {
            let mut g = Graph::new();
            let b = m.bind(&mut g, true);
            let l = build_loss(&b, &mut g, &src, std::slice::from_ref(&plan), cfg).unwrap();
            g.backward(l.total).unwrap();
            // Row 0 is the task-prompt role, rows 1-2 the pcl roles.
            let grad = g.grad(b.vars.vars()[roles]).unwrap().to_vec();
            let d = m.config().embed_dim;
            let task: f64 = grad[..d].iter().map(|v| v * v).sum();
            let pcl: f64 = grad[d..].iter().map(|v| v * v).sum();
            (task, pcl)
        };
        let (task, pcl) = norm(&TrainConfig::default());
        assert!(task > 0.0 && pcl > 0.0);
        let (_, pcl_off) = norm(&TrainConfig {
            lambda_pcl: 0.0,
            ..TrainConfig::default()
        });
        assert_eq!(pcl_off, 0.0);
    }

    #[test]
    fn bootstrap_rejects_untrained_model() {
        let m = ModelState::new(ModelConfig::tiny(), 0).unwrap();
        let err = uda_bootstrap_points(&m, &[Grid::filled(16, 16, 0.0)], &TrainConfig::default());
        assert!(err.is_err());
    }

    fn tiny_setup(mode: Mode) -> (TrainConfig, Vec<Sample>, Vec<Sample>) {
        let spec = DomainSpec {
            image_size: 32,
            instances_per_image: (1, 3),
            instance_radius: (3.0, 5.0),
            ..DomainSpec::source()
        };
        let labels = LabelOptions::default();
        let src = generate_domain(&spec, 3, &labels).unwrap();
        let tgt = generate_domain(
            &spec.with_seed(99),
            3,
            &LabelOptions {
                sparse_fraction: 0.5,
                ..labels
            },
        )
        .unwrap();
        let cfg = TrainConfig {
            mode,
            iterations: 4,
            model: ModelConfig::tiny(),
            base_lr: 1e-3,
            ..TrainConfig::default()
        };
        (cfg, src, tgt)
    }

    #[test]
    fn training_is_deterministic_and_finite() {
        for mode in [Mode::Supervised, Mode::Wda] {
            let run = || {
                let (cfg, src, tgt) = tiny_setup(mode);
                let init = ModelState::new(cfg.model.clone(), cfg.seed).unwrap();
                let mut t = Trainer::new(cfg, init, src, tgt, None).unwrap();
                (t.run(None).unwrap(), t.eval_model().to_bytes().unwrap())
            };
            let (a, ma) = run();
            let (b, mb) = run();
            assert_eq!(a, b);
            assert_eq!(ma, mb);
            assert!(a.iter().all(|r| r.total.is_finite()));
            assert_eq!(a.last().unwrap().step, 4);
        }
    }

    #[test]
    fn uda_requires_bootstrap() {
        let (cfg, src, tgt) = tiny_setup(Mode::Uda);
        let init = ModelState::new(cfg.model.clone(), 0).unwrap();
        assert!(Trainer::new(cfg.clone(), init.clone(), src.clone(), tgt.clone(), None).is_err());
        let boot = vec![vec![Point::new(4, 4)]; 3];
        let mut t = Trainer::new(cfg, init, src, tgt, Some(boot)).unwrap();
        assert!(t.run(None).is_ok());
    }

    #[test]
    fn prompt_dropout_removes_task_prompts_and_pcl() {
        let (mut cfg, src, tgt) = tiny_setup(Mode::Wda);
        let init = ModelState::new(cfg.model.clone(), 0).unwrap();
        let plans = |cfg: &TrainConfig| {
            let t = Trainer::new(cfg.clone(), init.clone(), src.clone(), tgt.clone(), None).unwrap();
            (0..8).map(|i| t.plan_target(i, 0, i % 3).unwrap()).collect::<Vec<_>>()
        };
        cfg.target_prompt_dropout = 1.0;
        assert!(plans(&cfg).iter().all(|p| p.task.is_empty() && p.pcl.is_empty() && p.n_sparse == 0));
        cfg.target_prompt_dropout = 0.0;
        assert!(plans(&cfg).iter().any(|p| p.n_sparse > 0));
        cfg.target_prompt_dropout = 1.5;
        assert!(cfg.validate().is_err());
    }
}
