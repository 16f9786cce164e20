//! Mean-teacher training.
//!
//! [`train_baseline`] fits a single student/teacher pair with the MIL and
//! auxiliary losses plus a consistency term against the teacher.
//! [`train_biscc`] runs the original and the augmentation branch side by
//! side and couples them through the bidirectional consistency loss.
//! [`iterate`] chains the two, refreshing the pseudo-label model after
//! every round.

mod metrics;
mod optim;

pub use metrics::{write_metrics, MetricsRow};
pub use optim::{ema_update, AdamW};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{
    alternative_augment, apply_perm, collect_instance_mask, ctg, intra_tca, pair_partners, replace_context,
    Augmentation, BlockPermutation, CtgReduce, InstanceMask,
};
use crate::autodiff::{Tape, Tensor2, Var};
use crate::datamodel::{Dataset, VideoSample};
use crate::error::{Error, Result};
use crate::localize::{dataset_pseudo_precision, evaluate_map, ground_truth_of, localize_videos, LocalizeConfig};
use crate::losses::{bi_scc_loss, branch_loss, scc_loss, total_loss, BranchInput, LossBreakdown, LossToggles};
use crate::network::{tcam_forward, ModelParams, ModelShape};

const BATCH_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;
const AUG_INIT_OFFSET: u64 = 0x5eed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the consistency term.
    pub alpha: f64,
    /// Pseudo-label threshold on the best action probability.
    pub gamma: f64,
    /// Intra-TCA variants fed to each teacher.
    pub variants: usize,
    /// Instance inflation per side, in segments.
    pub inflate: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub ema_momentum: f64,
    pub batch_size: usize,
    pub steps_per_iteration: usize,
    pub iterations: usize,
    pub ctg_mode: CtgReduce,
    pub seed: u64,
    pub losses: LossToggles,
    pub augmentation: Augmentation,
    pub inter_tca: bool,
    pub intra_tca: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 0.6,
            variants: 3,
            inflate: 1,
            lr: 5e-4,
            weight_decay: 1e-3,
            ema_momentum: 0.999,
            batch_size: 10,
            steps_per_iteration: 1500,
            iterations: 3,
            ctg_mode: CtgReduce::Max,
            seed: 0,
            losses: LossToggles::default(),
            augmentation: Augmentation::Tca,
            inter_tca: true,
            intra_tca: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be a finite value >= 0, got {}", self.alpha));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        if self.variants == 0 {
            return bad("variants must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be a finite value >= 0, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return bad(format!("ema_momentum must lie in [0, 1], got {}", self.ema_momentum));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        Ok(())
    }

    /// No Inter-TCA, no Intra-TCA, no alternative augmentation.
    pub fn augmentations_disabled(&self) -> bool {
        !self.inter_tca && !self.intra_tca && self.augmentation == Augmentation::Tca
    }
}

/// A student and its EMA teacher.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchState {
    pub student: ModelParams,
    pub teacher: ModelParams,
}

impl BranchState {
    /// Teacher starts as a copy of the student.
    pub fn new(student: ModelParams) -> Self {
        Self {
            teacher: student.clone(),
            student,
        }
    }

    pub fn init(shape: ModelShape, seed: u64) -> Self {
        Self::new(ModelParams::init(shape, seed))
    }
}

/// Loss record of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub losses: LossBreakdown,
    /// Objective of the original branch alone, consistency excluded.
    pub original: f64,
}

pub struct BaselineRun {
    pub state: BranchState,
    pub history: Vec<StepRecord>,
}

pub struct BiSccRun {
    pub original: BranchState,
    pub augmented: BranchState,
    pub history: Vec<StepRecord>,
}

fn shape_of(dataset: &Dataset) -> ModelShape {
    ModelShape::new(dataset.feature_dim(), dataset.num_classes())
}

fn check_train_split(dataset: &Dataset) -> Result<()> {
    if dataset.train.is_empty() {
        return Err(Error::invalid("dataset has no training videos"));
    }
    for v in &dataset.train {
        if !v.label.iter().any(|&b| b) {
            return Err(Error::invalid(format!("training video {} has no positive label", v.id)));
        }
    }
    Ok(())
}

struct BatchSampler {
    rng: ChaCha8Rng,
    n: usize,
    size: usize,
}

impl BatchSampler {
    fn new(seed: u64, n: usize, size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(BATCH_STREAM);
        Self {
            rng,
            n,
            size: size.min(n),
        }
    }

    fn next(&mut self) -> Vec<usize> {
        index::sample(&mut self.rng, self.n, self.size).into_vec()
    }
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(_) => Error::Diverged { step, loss: f64::NAN },
        other => other,
    }
}

fn check_finite(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { step, loss })
    }
}

fn grads<'t>(tape: &'t Tape, vars: &[Var]) -> Vec<Option<&'t Tensor2>> {
    vars.iter().map(|&v| tape.grad(v)).collect()
}

/// Mean-teacher baseline from a fresh seeded initialization.
pub fn train_baseline(dataset: &Dataset, cfg: &TrainConfig) -> Result<BaselineRun> {
    let state = BranchState::init(shape_of(dataset), cfg.seed);
    train_baseline_from(dataset, cfg, state, cfg.steps_per_iteration, |_| {})
}

/// Continues baseline training of `state` for `steps` steps, reporting
/// every step to `on_step`.
pub fn train_baseline_from(
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut state: BranchState,
    steps: usize,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<BaselineRun> {
    cfg.validate()?;
    check_train_split(dataset)?;
    let mut opt = AdamW::new(&state.student, cfg.lr, cfg.weight_decay);
    let mut sampler = BatchSampler::new(cfg.seed, dataset.train.len(), cfg.batch_size);
    let shape = state.student.shape;
    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch: Vec<&VideoSample> = sampler.next().into_iter().map(|i| &dataset.train[i]).collect();
        let mut tape = Tape::new();
        let bound = state.student.bind(&mut tape, true)?;
        let mut inputs = Vec::with_capacity(batch.len());
        let mut scc_terms = Vec::new();
        for v in &batch {
            let x = tape.constant(v.features.clone())?;
            let out = tcam_forward(&mut tape, x, &bound, &shape).map_err(|e| diverged(step, e))?;
            if cfg.alpha > 0.0 {
                let target = state.teacher.infer(&v.features)?.s_bar;
                let t = tape.constant(target)?;
                scc_terms.push(scc_loss(&mut tape, t, out.s_bar).map_err(|e| diverged(step, e))?);
            }
            inputs.push(BranchInput {
                s: out.s,
                a: out.a,
                s_bar: out.s_bar,
                features: x,
                label: &v.label,
            });
        }
        let (branch, values) = branch_loss(&mut tape, &inputs, cfg.losses).map_err(|e| diverged(step, e))?;
        let mut loss = branch;
        let mut scc_value = 0.0;
        if !scc_terms.is_empty() {
            let scc = tape.mean_vars(&scc_terms)?;
            scc_value = tape.value(scc).item();
            let weighted = tape.scale(scc, cfg.alpha)?;
            loss = tape.add(branch, weighted)?;
        }
        let breakdown = total_loss(&[values], scc_value, cfg.alpha);
        check_finite(step, tape.value(loss).item())?;
        tape.backward(loss)?;
        opt.step(&mut state.student, &grads(&tape, &bound.vars))?;
        if !state.student.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: breakdown.total,
            });
        }
        ema_update(&mut state.teacher, &state.student, cfg.ema_momentum)?;
        let record = StepRecord {
            step,
            losses: breakdown,
            original: tape.value(branch).item(),
        };
        on_step(&record);
        history.push(record);
    }
    Ok(BaselineRun { state, history })
}

/// Pseudo masks of every training video under `model`.
pub fn pseudo_masks(model: &ModelParams, videos: &[VideoSample], gamma: f64) -> Result<Vec<InstanceMask>> {
    videos
        .iter()
        .map(|v| collect_instance_mask(&model.infer(&v.features)?.s_bar, gamma))
        .collect()
}

/// Comprehensive T-CAM of `teacher` over Intra-TCA variants of `x`.
fn comprehensive_tcam(
    teacher: &ModelParams,
    x: &Tensor2,
    perms: &[BlockPermutation],
    mode: CtgReduce,
) -> Result<Tensor2> {
    let tcams = perms
        .iter()
        .map(|p| Ok(teacher.infer(&apply_perm(p, x)?)?.s_bar))
        .collect::<Result<Vec<_>>>()?;
    ctg(&tcams, perms, mode)
}

/// The two branch inputs of one batch.
struct AugmentedBatch {
    x_aug: Vec<Tensor2>,
    perms: Vec<Vec<BlockPermutation>>,
}

fn augment_batch(
    batch: &[&VideoSample],
    masks: &[&InstanceMask],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AugmentedBatch> {
    let x_aug = match cfg.augmentation {
        Augmentation::Tca if cfg.inter_tca => {
            let partners = pair_partners(batch.len(), rng);
            batch
                .iter()
                .zip(&partners)
                .enumerate()
                .map(|(i, (v, p))| match p {
                    Some(j) => replace_context(&v.features, masks[i], &batch[*j].features, masks[*j]),
                    None => Ok(v.features.clone()),
                })
                .collect::<Result<Vec<_>>>()?
        }
        Augmentation::Tca => batch.iter().map(|v| v.features.clone()).collect(),
        kind => batch
            .iter()
            .map(|v| alternative_augment(&v.features, kind, rng))
            .collect::<Result<Vec<_>>>()?,
    };
    let perms = masks
        .iter()
        .map(|m| {
            if cfg.intra_tca {
                (0..cfg.variants).map(|_| intra_tca(m, cfg.inflate, rng)).collect()
            } else {
                vec![BlockPermutation::identity(m.len())]
            }
        })
        .collect();
    Ok(AugmentedBatch { x_aug, perms })
}

/// Dual-branch training against pseudo labels from `pseudo_model`.
///
/// Without `warm`, both branches start from the same seeded initialization
/// as [`train_baseline`].
pub fn train_biscc(
    dataset: &Dataset,
    cfg: &TrainConfig,
    pseudo_model: &ModelParams,
    warm: Option<(BranchState, BranchState)>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<BiSccRun> {
    cfg.validate()?;
    check_train_split(dataset)?;
    let shape = shape_of(dataset);
    if pseudo_model.shape != shape {
        return Err(Error::invalid("pseudo-label model does not match the dataset shape"));
    }
    let (mut ori, mut aug) = warm.unwrap_or_else(|| {
        let s = BranchState::init(shape, cfg.seed);
        (s.clone(), s)
    });
    let masks = pseudo_masks(pseudo_model, &dataset.train, cfg.gamma)?;
    let mut opt_ori = AdamW::new(&ori.student, cfg.lr, cfg.weight_decay);
    let mut opt_aug = AdamW::new(&aug.student, cfg.lr, cfg.weight_decay);
    let mut sampler = BatchSampler::new(cfg.seed, dataset.train.len(), cfg.batch_size);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ AUG_INIT_OFFSET);
    aug_rng.set_stream(AUGMENT_STREAM);
    let consistency = cfg.alpha > 0.0;
    let mut history = Vec::with_capacity(cfg.steps_per_iteration);

    for step in 0..cfg.steps_per_iteration {
        let idx = sampler.next();
        let batch: Vec<&VideoSample> = idx.iter().map(|&i| &dataset.train[i]).collect();
        let batch_masks: Vec<&InstanceMask> = idx.iter().map(|&i| &masks[i]).collect();
        let augmented = augment_batch(&batch, &batch_masks, cfg, &mut aug_rng)?;

        let mut tape = Tape::new();
        let bound_ori = ori.student.bind(&mut tape, true)?;
        let bound_aug = aug.student.bind(&mut tape, true)?;
        let mut in_ori = Vec::with_capacity(batch.len());
        let mut in_aug = Vec::with_capacity(batch.len());
        let mut bi_terms = Vec::new();
        for (i, v) in batch.iter().enumerate() {
            let x = tape.constant(v.features.clone())?;
            let out = tcam_forward(&mut tape, x, &bound_ori, &shape).map_err(|e| diverged(step, e))?;
            let xa = tape.constant(augmented.x_aug[i].clone())?;
            let out_a = tcam_forward(&mut tape, xa, &bound_aug, &shape).map_err(|e| diverged(step, e))?;
            if consistency {
                let perms = &augmented.perms[i];
                let ct = comprehensive_tcam(&ori.teacher, &v.features, perms, cfg.ctg_mode)?;
                let ct_aug = comprehensive_tcam(&aug.teacher, &augmented.x_aug[i], perms, cfg.ctg_mode)?;
                let ct = tape.constant(ct)?;
                let ct_aug = tape.constant(ct_aug)?;
                bi_terms.push(bi_scc_loss(&mut tape, ct, out_a.s_bar, ct_aug, out.s_bar).map_err(|e| diverged(step, e))?);
            }
            in_ori.push(BranchInput {
                s: out.s,
                a: out.a,
                s_bar: out.s_bar,
                features: x,
                label: &v.label,
            });
            in_aug.push(BranchInput {
                s: out_a.s,
                a: out_a.a,
                s_bar: out_a.s_bar,
                features: xa,
                label: &v.label,
            });
        }
        let (l_ori, v_ori) = branch_loss(&mut tape, &in_ori, cfg.losses).map_err(|e| diverged(step, e))?;
        let (l_aug, v_aug) = branch_loss(&mut tape, &in_aug, cfg.losses).map_err(|e| diverged(step, e))?;
        let mut loss = tape.add(l_ori, l_aug)?;
        let mut bi_value = 0.0;
        if !bi_terms.is_empty() {
            let bi = tape.mean_vars(&bi_terms)?;
            bi_value = tape.value(bi).item();
            let weighted = tape.scale(bi, cfg.alpha)?;
            loss = tape.add(loss, weighted)?;
        }
        let breakdown = total_loss(&[v_ori, v_aug], bi_value, cfg.alpha);
        check_finite(step, tape.value(loss).item())?;
        tape.backward(loss)?;
        opt_ori.step(&mut ori.student, &grads(&tape, &bound_ori.vars))?;
        opt_aug.step(&mut aug.student, &grads(&tape, &bound_aug.vars))?;
        if !ori.student.is_finite() || !aug.student.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: breakdown.total,
            });
        }
        ema_update(&mut ori.teacher, &ori.student, cfg.ema_momentum)?;
        ema_update(&mut aug.teacher, &aug.student, cfg.ema_momentum)?;
        let record = StepRecord {
            step,
            losses: breakdown,
            original: tape.value(l_ori).item(),
        };
        on_step(&record);
        history.push(record);
    }
    Ok(BiSccRun {
        original: ori,
        augmented: aug,
        history,
    })
}

/// Quality of one outer iteration's model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationReport {
    pub iteration: usize,
    /// Pseudo-label precision on the training split.
    pub q: f64,
    /// Test mAP at IoU 0.5.
    pub map50: f64,
    /// Test mAP averaged over IoU 0.3, 0.5 and 0.7.
    pub map_avg: f64,
}

pub struct IterateRun {
    pub baseline: BranchState,
    pub original: BranchState,
    pub augmented: Option<BranchState>,
    pub reports: Vec<IterationReport>,
    pub history: Vec<StepRecord>,
}

pub const REPORT_IOUS: [f64; 3] = [0.3, 0.5, 0.7];

/// Test-split mAP of `params` at [`REPORT_IOUS`].
pub fn evaluate_model(params: &ModelParams, dataset: &Dataset, loc: &LocalizeConfig) -> Result<crate::localize::MapReport> {
    let dets = localize_videos(params, &dataset.test, loc)?;
    Ok(evaluate_map(&dets, &ground_truth_of(&dataset.test), dataset.num_classes(), &REPORT_IOUS))
}

fn report(iteration: usize, params: &ModelParams, dataset: &Dataset, cfg: &TrainConfig, loc: &LocalizeConfig) -> Result<IterationReport> {
    let q = dataset_pseudo_precision(params, &dataset.train, cfg.gamma)?;
    let m = evaluate_model(params, dataset, loc)?;
    Ok(IterationReport {
        iteration,
        q,
        map50: m.at(0.5).unwrap_or(0.0),
        map_avg: m.average,
    })
}

/// Baseline first, then `iterations − 1` rounds of dual-branch training,
/// each warm-started from the previous round and using the previous
/// original-branch student for pseudo labels.
pub fn iterate(
    dataset: &Dataset,
    cfg: &TrainConfig,
    loc: &LocalizeConfig,
    mut on_step: impl FnMut(usize, &StepRecord),
) -> Result<IterateRun> {
    cfg.validate()?;
    loc.validate()?;
    let mut history = Vec::new();
    let init = BranchState::init(shape_of(dataset), cfg.seed);
    let base = train_baseline_from(dataset, cfg, init, cfg.steps_per_iteration, |r| on_step(1, r))?;
    history.extend(base.history.iter().copied());
    let mut reports = vec![report(1, &base.state.student, dataset, cfg, loc)?];
    log::info!("iteration 1: q={:.4} mAP@0.5={:.4}", reports[0].q, reports[0].map50);

    let mut ori = base.state.clone();
    let mut aug: Option<BranchState> = None;
    for it in 2..=cfg.iterations {
        let warm = (ori.clone(), aug.clone().unwrap_or_else(|| ori.clone()));
        let pseudo = ori.student.clone();
        let offset = history.len();
        let run = train_biscc(dataset, cfg, &pseudo, Some(warm), |r| {
            on_step(
                it,
                &StepRecord {
                    step: r.step + offset,
                    ..*r
                },
            )
        })?;
        history.extend(run.history.iter().map(|r| StepRecord {
            step: r.step + offset,
            ..*r
        }));
        ori = run.original;
        aug = Some(run.augmented);
        let rep = report(it, &ori.student, dataset, cfg, loc)?;
        log::info!("iteration {it}: q={:.4} mAP@0.5={:.4}", rep.q, rep.map50);
        reports.push(rep);
    }
    Ok(IterateRun {
        baseline: base.state,
        original: ori,
        augmented: aug,
        reports,
        history,
    })
}
