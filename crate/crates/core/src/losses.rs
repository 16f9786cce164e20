//! Training objectives.
//!
//! Every function records its computation on a [`Tape`] and returns the
//! scalar [`Var`], so the trainer can sum terms and differentiate once.
//! Consistency losses compare per-segment class distributions, i.e. row
//! softmaxes of the suppressed T-CAMs, and never propagate into the target.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor2, Var};
use crate::error::{Error, Result};

/// Cosine-distance margin of the co-activity loss.
pub const CAS_MARGIN: f64 = 0.5;

const NORM_EPS: f64 = 1e-12;

/// Top-k pooling width `max(1, ⌊T/8⌋)`.
pub fn topk_k(t_len: usize) -> usize {
    (t_len / 8).max(1)
}

/// Video-level class distribution, softmax of the top-k temporal means.
pub fn video_class_probs(tape: &mut Tape, scores: Var, k: usize) -> Result<Var> {
    let pooled = tape.topk_mean_time(scores, k)?;
    tape.softmax_rows(pooled)
}

/// Off-tape variant of [`video_class_probs`].
pub fn video_class_probs_of(scores: &Tensor2, k: usize) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let s = tape.constant(scores.clone())?;
    let p = video_class_probs(&mut tape, s, k)?;
    Ok(tape.value(p).data().to_vec())
}

/// L1-normalized targets for the plain and the suppressed head. The plain
/// head also targets background, the suppressed head never does.
pub fn mil_targets(label: &[bool]) -> Result<(Tensor2, Tensor2)> {
    let positives = label.iter().filter(|&&b| b).count();
    if positives == 0 {
        return Err(Error::invalid("video label has no positive class"));
    }
    let c = label.len();
    let mut plain = Tensor2::zeros(1, c + 1);
    let mut supp = Tensor2::zeros(1, c + 1);
    for (j, &b) in label.iter().enumerate() {
        if b {
            plain[(0, j)] = 1.0 / (positives + 1) as f64;
            supp[(0, j)] = 1.0 / positives as f64;
        }
    }
    plain[(0, c)] = 1.0 / (positives + 1) as f64;
    Ok((plain, supp))
}

/// Smallest attainable [`mil_loss`], the summed entropies of both targets.
pub fn mil_entropy_floor(label: &[bool]) -> Result<f64> {
    let (plain, supp) = mil_targets(label)?;
    let h = |t: &Tensor2| t.data().iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum::<f64>();
    Ok(h(&plain) + h(&supp))
}

/// Top-k multiple-instance cross-entropy on both T-CAM heads.
pub fn mil_loss(tape: &mut Tape, s: Var, s_bar: Var, label: &[bool], k: usize) -> Result<Var> {
    let (_, cols) = tape.shape(s);
    if cols != label.len() + 1 {
        return Err(Error::ShapeMismatch {
            op: "mil_loss",
            left: tape.shape(s),
            right: (1, label.len() + 1),
        });
    }
    let (plain, supp) = mil_targets(label)?;
    let mut term = |scores: Var, target: &Tensor2| -> Result<Var> {
        let pooled = tape.topk_mean_time(scores, k)?;
        let logp = tape.log_softmax_rows(pooled)?;
        let ce = tape.dot_const(logp, target)?;
        tape.scale(ce, -1.0)
    };
    let a = term(s, &plain)?;
    let b = term(s_bar, &supp)?;
    tape.add(a, b)
}

/// Mean absolute attention.
pub fn norm_loss(tape: &mut Tape, a: Var) -> Result<Var> {
    let abs = tape.abs(a)?;
    tape.mean_all(abs)
}

/// Mean `|A − (1 − p_bg)|` with `p_bg` the background column of `softmax(S)`.
pub fn guide_loss(tape: &mut Tape, a: Var, s: Var) -> Result<Var> {
    let (_, cols) = tape.shape(s);
    let probs = tape.softmax_rows(s)?;
    let bg = tape.column(probs, cols - 1)?;
    let fg = tape.affine(bg, -1.0, 1.0)?;
    let diff = tape.sub(a, fg)?;
    let abs = tape.abs(diff)?;
    tape.mean_all(abs)
}

/// One video taking part in the co-activity loss.
#[derive(Clone, Copy, Debug)]
pub struct CasItem<'a> {
    pub s_bar: Var,
    pub features: Var,
    pub label: &'a [bool],
}

struct Pooled {
    high: Var,
    low: Var,
}

fn pool_for_class(tape: &mut Tape, item: &CasItem<'_>, c: usize) -> Result<Pooled> {
    let t_len = tape.shape(item.s_bar).0;
    let col = tape.column(item.s_bar, c)?;
    let row = tape.transpose(col)?;
    let lambda = tape.softmax_rows(row)?;
    let high = tape.matmul(lambda, item.features)?;
    let low = if t_len > 1 {
        let inv = 1.0 / (t_len - 1) as f64;
        let w = tape.affine(lambda, -inv, inv)?;
        tape.matmul(w, item.features)?
    } else {
        high
    };
    Ok(Pooled { high, low })
}

fn cosine_distance(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let ab = tape.mul(a, b)?;
    let ab = tape.sum_all(ab)?;
    let aa = tape.mul(a, a)?;
    let aa = tape.sum_all(aa)?;
    let bb = tape.mul(b, b)?;
    let bb = tape.sum_all(bb)?;
    let denom = tape.mul(aa, bb)?;
    let denom = tape.affine(denom, 1.0, NORM_EPS)?;
    let denom = tape.sqrt(denom)?;
    let cos = tape.div(ab, denom)?;
    tape.affine(cos, -1.0, 1.0)
}

fn hinge(tape: &mut Tape, pos: Var, neg: Var, margin: f64) -> Result<Var> {
    let d = tape.sub(pos, neg)?;
    let d = tape.affine(d, 1.0, margin)?;
    tape.relu(d)
}

/// Co-activity similarity over every pair of videos sharing a class.
/// `None` when the batch has no such pair.
pub fn cas_loss(tape: &mut Tape, items: &[CasItem<'_>]) -> Result<Option<Var>> {
    let Some(first) = items.first() else {
        return Ok(None);
    };
    let classes = first.label.len();
    let mut terms = Vec::new();
    for c in 0..classes {
        let members: Vec<&CasItem<'_>> = items.iter().filter(|it| it.label.get(c) == Some(&true)).collect();
        if members.len() < 2 {
            continue;
        }
        let pooled = members
            .iter()
            .map(|it| pool_for_class(tape, it, c))
            .collect::<Result<Vec<_>>>()?;
        for i in 0..pooled.len() {
            for j in i + 1..pooled.len() {
                let (p1, p2) = (&pooled[i], &pooled[j]);
                let hh = cosine_distance(tape, p1.high, p2.high)?;
                let hl = cosine_distance(tape, p1.high, p2.low)?;
                let lh = cosine_distance(tape, p1.low, p2.high)?;
                let a = hinge(tape, hh, hl, CAS_MARGIN)?;
                let b = hinge(tape, hh, lh, CAS_MARGIN)?;
                let pair = tape.add(a, b)?;
                terms.push(tape.scale(pair, 0.5)?);
            }
        }
    }
    if terms.is_empty() {
        return Ok(None);
    }
    tape.mean_vars(&terms).map(Some)
}

/// `KL(softmax(teacher) ‖ softmax(student))` averaged over segments. The
/// teacher is detached.
pub fn scc_loss(tape: &mut Tape, teacher: Var, student: Var) -> Result<Var> {
    if tape.shape(teacher) != tape.shape(student) {
        return Err(Error::ShapeMismatch {
            op: "scc_loss",
            left: tape.shape(teacher),
            right: tape.shape(student),
        });
    }
    let t = tape.detach(teacher);
    let p = tape.softmax_rows(t)?;
    let q = tape.softmax_rows(student)?;
    tape.kl_rows(p, q)
}

/// Cross supervision: the comprehensive original T-CAM teaches the
/// augmented student, and the other way round.
pub fn bi_scc_loss(tape: &mut Tape, ct: Var, s_bar_aug: Var, ct_aug: Var, s_bar: Var) -> Result<Var> {
    let a = scc_loss(tape, ct, s_bar_aug)?;
    let b = scc_loss(tape, ct_aug, s_bar)?;
    tape.add(a, b)
}

/// Switches for the auxiliary terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossToggles {
    pub norm: bool,
    pub guide: bool,
    pub cas: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            norm: true,
            guide: true,
            cas: true,
        }
    }
}

/// Scalar values of one branch objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BranchLosses {
    pub cls: f64,
    pub norm: f64,
    pub guide: f64,
    pub cas: f64,
}

impl BranchLosses {
    pub fn total(&self) -> f64 {
        self.cls + self.norm + self.guide + self.cas
    }
}

/// Per-step loss record.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub cls: f64,
    pub norm: f64,
    pub guide: f64,
    pub cas: f64,
    pub bi_scc: f64,
    pub total: f64,
}

/// `L^ori + L^aug + α·bi_scc`, component sums across branches.
pub fn total_loss(branches: &[BranchLosses], bi_scc: f64, alpha: f64) -> LossBreakdown {
    let mut out = LossBreakdown {
        bi_scc,
        ..Default::default()
    };
    for b in branches {
        out.cls += b.cls;
        out.norm += b.norm;
        out.guide += b.guide;
        out.cas += b.cas;
    }
    out.total = out.cls + out.norm + out.guide + out.cas;
    if alpha != 0.0 {
        out.total += alpha * bi_scc;
    }
    out
}

/// One video of a batch as seen by [`branch_loss`].
#[derive(Clone, Copy, Debug)]
pub struct BranchInput<'a> {
    pub s: Var,
    pub a: Var,
    pub s_bar: Var,
    pub features: Var,
    pub label: &'a [bool],
}

/// Batch-mean classification and auxiliary losses of one branch.
pub fn branch_loss(tape: &mut Tape, batch: &[BranchInput<'_>], toggles: LossToggles) -> Result<(Var, BranchLosses)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut cls = Vec::with_capacity(batch.len());
    let mut norm = Vec::new();
    let mut guide = Vec::new();
    for v in batch {
        let k = topk_k(tape.shape(v.s).0);
        cls.push(mil_loss(tape, v.s, v.s_bar, v.label, k)?);
        if toggles.norm {
            norm.push(norm_loss(tape, v.a)?);
        }
        if toggles.guide {
            guide.push(guide_loss(tape, v.a, v.s)?);
        }
    }
    let mut values = BranchLosses::default();
    let cls = tape.mean_vars(&cls)?;
    values.cls = tape.value(cls).item();
    let mut terms = vec![cls];
    if toggles.norm {
        let n = tape.mean_vars(&norm)?;
        values.norm = tape.value(n).item();
        terms.push(n);
    }
    if toggles.guide {
        let g = tape.mean_vars(&guide)?;
        values.guide = tape.value(g).item();
        terms.push(g);
    }
    if toggles.cas {
        let items: Vec<CasItem<'_>> = batch
            .iter()
            .map(|v| CasItem {
                s_bar: v.s_bar,
                features: v.features,
                label: v.label,
            })
            .collect();
        if let Some(c) = cas_loss(tape, &items)? {
            values.cas = tape.value(c).item();
            terms.push(c);
        }
    }
    Ok((tape.sum_vars(&terms)?, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor2 {
        Tensor2::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
    }

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item()
    }

    #[test]
    fn topk_rule() {
        assert_eq!(topk_k(64), 8);
        assert_eq!(topk_k(8), 1);
        assert_eq!(topk_k(7), 1);
        assert_eq!(topk_k(1), 1);
    }

    #[test]
    fn class_probs_with_k_one_is_softmax_of_max() {
        let s = Tensor2::from_rows(&[[1.0, 2.0]; 8]);
        let p = video_class_probs_of(&s, topk_k(8)).unwrap();
        let z = 1f64.exp() + 2f64.exp();
        assert!((p[0] - 1f64.exp() / z).abs() < 1e-15);
        assert!((p[1] - 2f64.exp() / z).abs() < 1e-15);
        let flat = video_class_probs_of(&Tensor2::filled(8, 4, 0.3), 1).unwrap();
        assert!(flat.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn mil_perfect_prediction_hits_entropy_floor() {
        let label = [false, true, true];
        let (plain, supp) = mil_targets(&label).unwrap();
        let logits = |t: &Tensor2| {
            let row: Vec<f64> = t.data().iter().map(|&v| if v > 0.0 { v.ln() } else { -800.0 }).collect();
            Tensor2::from_rows(&vec![row; 8])
        };
        let mut tape = Tape::new();
        let s = tape.constant(logits(&plain)).unwrap();
        let sb = tape.constant(logits(&supp)).unwrap();
        let l = mil_loss(&mut tape, s, sb, &label, 1).unwrap();
        let floor = (3f64).ln() + (2f64).ln();
        assert!((mil_entropy_floor(&label).unwrap() - floor).abs() < 1e-12);
        assert!((scalar(&tape, l) - floor).abs() < 1e-12);
    }

    #[test]
    fn mil_uniform_prediction_is_log_classes_per_head() {
        let label = [false, false, true, false, false];
        let mut tape = Tape::new();
        let s = tape.constant(Tensor2::zeros(16, 6)).unwrap();
        let sb = tape.constant(Tensor2::zeros(16, 6)).unwrap();
        let l = mil_loss(&mut tape, s, sb, &label, 2).unwrap();
        assert!((scalar(&tape, l) - 2.0 * 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mil_rejects_empty_label() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor2::zeros(8, 3)).unwrap();
        assert!(mil_loss(&mut tape, s, s, &[false, false], 1).is_err());
        assert!(mil_loss(&mut tape, s, s, &[true], 1).is_err());
    }

    #[test]
    fn norm_examples() {
        let mut tape = Tape::new();
        for (vals, want) in [(vec![0.0; 4], 0.0), (vec![1.0; 3], 1.0), (vec![0.2, 0.4], 0.3)] {
            let a = tape.constant(Tensor2::column(&vals)).unwrap();
            let l = norm_loss(&mut tape, a).unwrap();
            assert!((scalar(&tape, l) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn guide_examples() {
        let mut tape = Tape::new();
        let s_val = Tensor2::from_rows(&[[0.3, -1.0, 0.5], [2.0, 0.0, -0.4]]);
        let p = s_val.softmax_rows();
        let a_val = Tensor2::column(&[1.0 - p[(0, 2)], 1.0 - p[(1, 2)]]);
        let s = tape.constant(s_val).unwrap();
        let a = tape.constant(a_val).unwrap();
        let l = guide_loss(&mut tape, a, s).unwrap();
        assert!(scalar(&tape, l).abs() < 1e-15);

        let s = tape.constant(Tensor2::from_rows(&[[-800.0, 0.0], [-800.0, 0.0]])).unwrap();
        let a = tape.constant(Tensor2::column(&[1.0, 1.0])).unwrap();
        let l = guide_loss(&mut tape, a, s).unwrap();
        assert!((scalar(&tape, l) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cas_without_shared_class_is_none() {
        let mut tape = Tape::new();
        let sb = tape.constant(Tensor2::zeros(4, 3)).unwrap();
        let x = tape.constant(Tensor2::filled(4, 2, 1.0)).unwrap();
        let items = [
            CasItem {
                s_bar: sb,
                features: x,
                label: &[true, false],
            },
            CasItem {
                s_bar: sb,
                features: x,
                label: &[false, true],
            },
        ];
        assert!(cas_loss(&mut tape, &items).unwrap().is_none());
        assert!(cas_loss(&mut tape, &[]).unwrap().is_none());
    }

    #[test]
    fn cas_hinge_inactive_for_aligned_high_and_orthogonal_low() {
        // Segment 0 is the sharp action peak, feature e1; the rest carry e2.
        let t = 4;
        let mut sb = Tensor2::zeros(t, 2);
        sb[(0, 0)] = 60.0;
        let mut x = Tensor2::zeros(t, 2);
        x[(0, 0)] = 1.0;
        for r in 1..t {
            x[(r, 1)] = 1.0;
        }
        let mut tape = Tape::new();
        let sbv = tape.constant(sb).unwrap();
        let xv = tape.constant(x).unwrap();
        let item = CasItem {
            s_bar: sbv,
            features: xv,
            label: &[true],
        };
        let l = cas_loss(&mut tape, &[item, item]).unwrap().unwrap();
        assert!(scalar(&tape, l).abs() < 1e-12);
    }

    #[test]
    fn scc_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, 5, 4, 2.0);
        let mut tape = Tape::new();
        let a = tape.constant(x.clone()).unwrap();
        let l = scc_loss(&mut tape, a, a).unwrap();
        assert_eq!(scalar(&tape, l), 0.0);

        let mut shifted = x.clone();
        for r in 0..5 {
            let c = r as f64 * 1.7 - 3.0;
            for v in shifted.row_slice_mut(r) {
                *v += c;
            }
        }
        let b = tape.constant(shifted).unwrap();
        let l = scc_loss(&mut tape, a, b).unwrap();
        assert!(scalar(&tape, l).abs() < 1e-12);

        let c = tape.constant(Tensor2::zeros(4, 4)).unwrap();
        assert!(matches!(scc_loss(&mut tape, a, c), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn bi_scc_decomposes_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let v: Vec<Var> = (0..4).map(|_| tape.constant(rand_tensor(&mut rng, 6, 3, 2.0)).unwrap()).collect();
        let (ct, sa, cta, s) = (v[0], v[1], v[2], v[3]);
        let bi = bi_scc_loss(&mut tape, ct, sa, cta, s).unwrap();
        let swapped = bi_scc_loss(&mut tape, cta, s, ct, sa).unwrap();
        let x = scc_loss(&mut tape, ct, sa).unwrap();
        let y = scc_loss(&mut tape, cta, s).unwrap();
        assert_eq!(scalar(&tape, bi), scalar(&tape, x) + scalar(&tape, y));
        assert!((scalar(&tape, bi) - scalar(&tape, swapped)).abs() < 1e-15);
        let same = bi_scc_loss(&mut tape, ct, ct, ct, ct).unwrap();
        assert_eq!(scalar(&tape, same), 0.0);
    }

    #[test]
    fn teacher_gets_no_gradient_from_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let teacher = tape.param(rand_tensor(&mut rng, 4, 3, 1.0)).unwrap();
        let student = tape.param(rand_tensor(&mut rng, 4, 3, 1.0)).unwrap();
        let l = scc_loss(&mut tape, teacher, student).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(teacher).is_none_or(|g| g.data().iter().all(|&v| v == 0.0)));
        assert!(tape.grad(student).is_some_and(|g| g.data().iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn total_examples() {
        let one = BranchLosses {
            cls: 1.0,
            ..Default::default()
        };
        let b = total_loss(&[one, one], 2.0, 0.25);
        assert_eq!(b.total, 2.5);
        let z = total_loss(&[one, one], 123.0, 0.0);
        assert_eq!(z.total, total_loss(&[one, one], 0.0, 0.0).total);
        let parts = BranchLosses {
            cls: 0.7,
            norm: 0.11,
            guide: 0.3,
            cas: 0.05,
        };
        let b = total_loss(&[parts, one], 0.4, 0.25);
        assert!((b.cls + b.norm + b.guide + b.cas + 0.25 * b.bi_scc - b.total).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn losses_are_finite_and_non_negative(seed in any::<u64>(), t in 2usize..20, c in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let label: Vec<bool> = {
                let mut l: Vec<bool> = (0..c).map(|_| rng.random_bool(0.4)).collect();
                l[rng.random_range(0..c)] = true;
                l
            };
            let mut tape = Tape::new();
            let s = tape.constant(rand_tensor(&mut rng, t, c + 1, 4.0)).unwrap();
            let a_raw = tape.constant(rand_tensor(&mut rng, t, 1, 4.0)).unwrap();
            let a = tape.sigmoid(a_raw).unwrap();
            let sb = tape.mul_col(s, a).unwrap();
            let x = tape.constant(rand_tensor(&mut rng, t, 3, 1.0)).unwrap();
            let other = tape.constant(rand_tensor(&mut rng, t, c + 1, 4.0)).unwrap();

            let p = video_class_probs(&mut tape, s, topk_k(t)).unwrap();
            prop_assert!((tape.value(p).sum() - 1.0).abs() < 1e-9);
            let mil = mil_loss(&mut tape, s, sb, &label, topk_k(t)).unwrap();
            prop_assert!(scalar(&tape, mil) - mil_entropy_floor(&label).unwrap() >= -1e-12);
            let n = norm_loss(&mut tape, a).unwrap();
            let g = guide_loss(&mut tape, a, s).unwrap();
            prop_assert!((0.0..=1.0).contains(&scalar(&tape, n)));
            prop_assert!((0.0..=1.0).contains(&scalar(&tape, g)));
            let item = CasItem { s_bar: sb, features: x, label: &label };
            let cas = cas_loss(&mut tape, &[item, item]).unwrap().unwrap();
            prop_assert!(scalar(&tape, cas) >= 0.0);
            let scc = scc_loss(&mut tape, other, sb).unwrap();
            prop_assert!(scalar(&tape, scc) >= 0.0 && scalar(&tape, scc).is_finite());
        }
    }
}
