//! Temporal context augmentation and comprehensive T-CAM generation.
//!
//! Pseudo action instances come from thresholding the per-segment action
//! probabilities of a model. Inter-TCA swaps the non-action context of two
//! videos; Intra-TCA relocates action instances inside one video through an
//! explicit [`BlockPermutation`], which makes the restore step exact.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor2;
use crate::datamodel::resample_time;
use crate::error::{Error, Result};

/// Per-segment pseudo labels: `true` marks a pseudo positive action segment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceMask(pub Vec<bool>);

impl InstanceMask {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count_positive(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn has_context(&self) -> bool {
        self.0.iter().any(|&b| !b)
    }

    /// `true` when every positive of `self` is also positive in `other`.
    pub fn is_subset_of(&self, other: &InstanceMask) -> bool {
        self.0.len() == other.0.len() && self.0.iter().zip(&other.0).all(|(&a, &b)| !a || b)
    }
}

/// Thresholds the best action-class probability of `softmax_rows(s_bar)`.
/// The last column is background and never counts.
pub fn collect_instance_mask(s_bar: &Tensor2, gamma: f64) -> Result<InstanceMask> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::invalid(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    if s_bar.cols() < 2 {
        return Err(Error::invalid("T-CAM needs at least one action column and a background column"));
    }
    let probs = s_bar.softmax_rows();
    let actions = s_bar.cols() - 1;
    let m = (0..probs.rows())
        .map(|t| {
            let best = probs.row_slice(t)[..actions].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            best > gamma
        })
        .collect();
    Ok(InstanceMask(m))
}

/// Maximal runs of positives as half-open `(start, end)` intervals.
pub fn mask_to_instances(m: &InstanceMask) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (t, &b) in m.0.iter().enumerate() {
        match (b, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                out.push((s, t));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, m.len()));
    }
    out
}

fn check_pair(x: &Tensor2, m: &InstanceMask) -> Result<()> {
    if x.rows() != m.len() {
        return Err(Error::ShapeMismatch {
            op: "instance mask",
            left: x.shape(),
            right: (m.len(), x.cols()),
        });
    }
    Ok(())
}

/// Replaces the context rows of `x` with the partner's context, stretched to
/// the full video length. Rows under `m` are copied verbatim. A partner
/// without context leaves `x` unchanged.
pub fn replace_context(x: &Tensor2, m: &InstanceMask, partner: &Tensor2, partner_m: &InstanceMask) -> Result<Tensor2> {
    check_pair(x, m)?;
    check_pair(partner, partner_m)?;
    if x.cols() != partner.cols() {
        return Err(Error::ShapeMismatch {
            op: "inter_tca",
            left: x.shape(),
            right: partner.shape(),
        });
    }
    let ctx_rows: Vec<usize> = (0..partner_m.len()).filter(|&t| !partner_m.0[t]).collect();
    if ctx_rows.is_empty() || !m.has_context() {
        return Ok(x.clone());
    }
    let mut gathered = Tensor2::zeros(ctx_rows.len(), partner.cols());
    for (i, &t) in ctx_rows.iter().enumerate() {
        gathered.row_slice_mut(i).copy_from_slice(partner.row_slice(t));
    }
    let stretched = resample_time(&gathered, x.rows())?;
    let mut out = x.clone();
    for t in 0..x.rows() {
        if !m.0[t] {
            out.row_slice_mut(t).copy_from_slice(stretched.row_slice(t));
        }
    }
    Ok(out)
}

/// Exchanges the temporal context of two videos.
pub fn inter_tca(x1: &Tensor2, m1: &InstanceMask, x2: &Tensor2, m2: &InstanceMask) -> Result<(Tensor2, Tensor2)> {
    Ok((replace_context(x1, m1, x2, m2)?, replace_context(x2, m2, x1, m1)?))
}

/// Inter-TCA partners of a batch of `n` videos: a uniformly random
/// derangement, so no video is paired with itself. A single video has no
/// partner.
pub fn pair_partners<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<Option<usize>> {
    if n < 2 {
        return vec![None; n];
    }
    let mut order: Vec<usize> = (0..n).collect();
    loop {
        order.shuffle(rng);
        if order.iter().enumerate().all(|(i, &j)| i != j) {
            return order.into_iter().map(Some).collect();
        }
    }
}

/// Row reordering with `perm[new] = old`; `inv` undoes it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockPermutation {
    perm: Vec<usize>,
    inv: Vec<usize>,
}

impl BlockPermutation {
    pub fn identity(t_len: usize) -> Self {
        let perm: Vec<usize> = (0..t_len).collect();
        Self { inv: perm.clone(), perm }
    }

    /// Validates that `perm` is a bijection on `[0, T)`.
    pub fn from_perm(perm: Vec<usize>) -> Result<Self> {
        let mut inv = vec![usize::MAX; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            if old >= perm.len() || inv[old] != usize::MAX {
                return Err(Error::invalid("not a permutation"));
            }
            inv[old] = new;
        }
        Ok(Self { perm, inv })
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn inv(&self) -> &[usize] {
        &self.inv
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(i, &p)| i == p)
    }
}

fn reorder(order: &[usize], x: &Tensor2) -> Result<Tensor2> {
    if order.len() != x.rows() {
        return Err(Error::ShapeMismatch {
            op: "permutation",
            left: x.shape(),
            right: (order.len(), x.cols()),
        });
    }
    let mut out = Tensor2::zeros(x.rows(), x.cols());
    for (dst, &src) in order.iter().enumerate() {
        out.row_slice_mut(dst).copy_from_slice(x.row_slice(src));
    }
    Ok(out)
}

pub fn apply_perm(p: &BlockPermutation, x: &Tensor2) -> Result<Tensor2> {
    reorder(&p.perm, x)
}

pub fn invert_perm(p: &BlockPermutation, x: &Tensor2) -> Result<Tensor2> {
    reorder(&p.inv, x)
}

/// Instances widened by up to `delta` per side. Gaps between neighbours are
/// split so widened blocks never overlap.
fn inflate(instances: &[(usize, usize)], delta: usize, t_len: usize) -> Vec<(usize, usize)> {
    let n = instances.len();
    (0..n)
        .map(|k| {
            let (s, e) = instances[k];
            let left_room = if k == 0 { s } else { (s - instances[k - 1].1) - (s - instances[k - 1].1) / 2 };
            let right_room = if k + 1 == n { t_len - e } else { (instances[k + 1].0 - e) / 2 };
            (s - delta.min(left_room), e + delta.min(right_room))
        })
        .collect()
}

/// Intra-video relocation of pseudo action instances.
///
/// Two or more instances: two are chosen at random and their inflated blocks
/// swap places. One instance: its inflated block moves to a random new
/// offset. No instance: identity.
pub fn intra_tca<R: Rng + ?Sized>(m: &InstanceMask, delta: usize, rng: &mut R) -> BlockPermutation {
    let t_len = m.len();
    let instances = mask_to_instances(m);
    let blocks = inflate(&instances, delta, t_len);
    match blocks.len() {
        0 => BlockPermutation::identity(t_len),
        1 => {
            let (s, e) = blocks[0];
            let len = e - s;
            let slots = t_len - len + 1;
            if slots <= 1 {
                return BlockPermutation::identity(t_len);
            }
            let mut offset = rng.random_range(0..slots - 1);
            if offset >= s {
                offset += 1;
            }
            let rest: Vec<usize> = (0..s).chain(e..t_len).collect();
            let perm = rest[..offset]
                .iter()
                .copied()
                .chain(s..e)
                .chain(rest[offset..].iter().copied())
                .collect();
            BlockPermutation::from_perm(perm).expect("block move is a bijection")
        }
        n => {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            swap_blocks(t_len, blocks[i.min(j)], blocks[i.max(j)])
        }
    }
}

/// Exchanges two disjoint blocks `a` (earlier) and `b`, keeping every other
/// segment in relative order.
pub fn swap_blocks(t_len: usize, a: (usize, usize), b: (usize, usize)) -> BlockPermutation {
    assert!(a.0 <= a.1 && a.1 <= b.0 && b.0 <= b.1 && b.1 <= t_len, "blocks must be ordered and disjoint");
    let perm = (0..a.0).chain(b.0..b.1).chain(a.1..b.0).chain(a.0..a.1).chain(b.1..t_len).collect();
    BlockPermutation::from_perm(perm).expect("block swap is a bijection")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CtgReduce {
    #[default]
    Max,
    Avg,
}

/// Restores every T-CAM to the original time order and reduces them
/// elementwise.
pub fn ctg(tcams: &[Tensor2], perms: &[BlockPermutation], mode: CtgReduce) -> Result<Tensor2> {
    let Some(first) = tcams.first() else {
        return Err(Error::invalid("ctg needs at least one T-CAM"));
    };
    if tcams.len() != perms.len() {
        return Err(Error::invalid(format!(
            "ctg got {} T-CAMs but {} permutations",
            tcams.len(),
            perms.len()
        )));
    }
    let mut acc = invert_perm(&perms[0], first)?;
    for (tcam, p) in tcams.iter().zip(perms).skip(1) {
        if tcam.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                op: "ctg",
                left: first.shape(),
                right: tcam.shape(),
            });
        }
        let restored = invert_perm(p, tcam)?;
        for (a, &r) in acc.data_mut().iter_mut().zip(restored.data()) {
            match mode {
                CtgReduce::Max => *a = a.max(r),
                CtgReduce::Avg => *a += r,
            }
        }
    }
    if mode == CtgReduce::Avg {
        let k = tcams.len() as f64;
        for a in acc.data_mut() {
            *a /= k;
        }
    }
    Ok(acc)
}

/// Augmentation producing the second branch input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    /// Inter-video context swap.
    #[default]
    Tca,
    /// Additive N(0, 0.1²) noise.
    GaussianNoise,
    /// Each segment zeroed with probability 0.2.
    RandomMask,
    /// Down to half the length and back.
    ResolutionTransform,
}

pub const NOISE_SIGMA: f64 = 0.1;
pub const MASK_RATE: f64 = 0.2;

/// Applies one of the feature-level alternatives to [`Augmentation::Tca`].
pub fn alternative_augment<R: Rng + ?Sized>(x: &Tensor2, kind: Augmentation, rng: &mut R) -> Result<Tensor2> {
    match kind {
        Augmentation::Tca => Ok(x.clone()),
        Augmentation::GaussianNoise => {
            let normal = Normal::new(0.0, NOISE_SIGMA).expect("positive sigma");
            let mut out = x.clone();
            for v in out.data_mut() {
                *v += normal.sample(rng);
            }
            Ok(out)
        }
        Augmentation::RandomMask => {
            let mut out = x.clone();
            for t in 0..out.rows() {
                if rng.random_bool(MASK_RATE) {
                    out.row_slice_mut(t).fill(0.0);
                }
            }
            Ok(out)
        }
        Augmentation::ResolutionTransform => {
            let half = resample_time(x, (x.rows() / 2).max(1))?;
            resample_time(&half, x.rows())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(bits: &[u8]) -> InstanceMask {
        InstanceMask(bits.iter().map(|&b| b == 1).collect())
    }

    /// Logits whose softmax puts probability `p` on action 0 and spreads the
    /// rest evenly over two other columns.
    fn rows_with_action_prob(probs: &[f64]) -> Tensor2 {
        let rows: Vec<Vec<f64>> = probs
            .iter()
            .map(|&p| {
                let rest = (1.0 - p) / 2.0;
                vec![p.ln(), rest.ln(), rest.ln()]
            })
            .collect();
        Tensor2::from_rows(&rows)
    }

    #[test]
    fn mask_thresholds_action_probability() {
        let s = rows_with_action_prob(&[0.7, 0.2, 0.61, 0.59, 0.9, 0.1]);
        assert_eq!(collect_instance_mask(&s, 0.6).unwrap(), mask(&[1, 0, 1, 0, 1, 0]));
    }

    #[test]
    fn mask_ignores_background_column() {
        let s = Tensor2::from_rows(&[[0.0, 0.0, 10.0]]);
        assert_eq!(collect_instance_mask(&s, 0.6).unwrap(), mask(&[0]));
    }

    #[test]
    fn mask_degenerate_thresholds() {
        let s = rows_with_action_prob(&[0.7, 0.95, 0.5]);
        assert_eq!(collect_instance_mask(&s, 0.999_999).unwrap(), mask(&[0, 0, 0]));
        let uniform = Tensor2::zeros(4, 3);
        assert_eq!(collect_instance_mask(&uniform, 0.6).unwrap(), mask(&[0, 0, 0, 0]));
        assert!(collect_instance_mask(&s, 0.0).is_err());
        assert!(collect_instance_mask(&s, 1.0).is_err());
    }

    #[test]
    fn instances_from_mask() {
        assert_eq!(mask_to_instances(&mask(&[1, 0, 1])), vec![(0, 1), (2, 3)]);
        assert_eq!(mask_to_instances(&mask(&[1, 1, 1, 1])), vec![(0, 4)]);
        assert!(mask_to_instances(&mask(&[0, 0, 0])).is_empty());
        assert_eq!(mask_to_instances(&mask(&[0, 1, 1, 0, 0, 1])), vec![(1, 3), (5, 6)]);
    }

    #[test]
    fn inter_tca_hand_example() {
        let x1 = Tensor2::column(&[1.0, 2.0, 3.0, 4.0]);
        let x2 = Tensor2::column(&[5.0, 6.0, 7.0, 8.0]);
        let (y1, _) = inter_tca(&x1, &mask(&[1, 1, 0, 0]), &x2, &mask(&[0, 1, 1, 0])).unwrap();
        assert_eq!(y1.data(), &[1.0, 2.0, 7.0, 8.0]);
    }

    #[test]
    fn inter_tca_degenerate_masks() {
        let x1 = Tensor2::from_rows(&[[1.0, -1.0], [2.0, 0.5], [3.0, 4.0]]);
        let x2 = Tensor2::from_rows(&[[9.0, 8.0], [7.0, 6.0], [5.0, 4.0]]);
        let (y1, _) = inter_tca(&x1, &mask(&[1, 1, 1]), &x2, &mask(&[0, 0, 1])).unwrap();
        assert_eq!(y1, x1);
        let (y1, _) = inter_tca(&x1, &mask(&[0, 0, 0]), &x2, &mask(&[0, 0, 0])).unwrap();
        assert_eq!(y1, x2);
        let (y1, y2) = inter_tca(&x1, &mask(&[0, 1, 0]), &x2, &mask(&[1, 1, 1])).unwrap();
        assert_eq!(y1, x1);
        assert_eq!(y2, x2);
    }

    #[test]
    fn partners_form_a_derangement() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for n in 2..12 {
            for _ in 0..20 {
                let p: Vec<usize> = pair_partners(n, &mut rng).into_iter().map(Option::unwrap).collect();
                assert!(p.iter().enumerate().all(|(i, &j)| i != j));
                let mut sorted = p.clone();
                sorted.sort_unstable();
                assert_eq!(sorted, (0..n).collect::<Vec<_>>());
            }
        }
        assert_eq!(pair_partners(1, &mut rng), vec![None]);
        assert!(pair_partners(0, &mut rng).is_empty());
    }

    #[test]
    fn swap_example() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = intra_tca(&mask(&[1, 1, 0, 0, 1, 1]), 0, &mut rng);
        assert_eq!(p.perm(), &[4, 5, 2, 3, 0, 1]);
        let x = Tensor2::column(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(apply_perm(&p, &x).unwrap().data(), &[4.0, 5.0, 2.0, 3.0, 0.0, 1.0]);
    }

    #[test]
    fn no_instances_gives_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(intra_tca(&mask(&[0, 0, 0, 0]), 1, &mut rng).is_identity());
        assert!(intra_tca(&mask(&[1, 1, 1]), 1, &mut rng).is_identity());
    }

    #[test]
    fn single_instance_moves() {
        let m = mask(&[0, 0, 1, 1, 0, 0, 0, 0]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let p = intra_tca(&m, 1, &mut rng);
            assert!(!p.is_identity());
            let pos: Vec<usize> = (1..5).map(|old| p.inv()[old]).collect();
            assert!(pos.windows(2).all(|w| w[1] == w[0] + 1), "block stays contiguous: {pos:?}");
        }
    }

    #[test]
    fn inflation_splits_narrow_gaps() {
        assert_eq!(inflate(&[(1, 3), (4, 6)], 1, 8), vec![(0, 3), (3, 7)]);
        assert_eq!(inflate(&[(1, 3), (5, 6)], 1, 6), vec![(0, 4), (4, 6)]);
        assert_eq!(inflate(&[(0, 2)], 3, 4), vec![(0, 4)]);
    }

    #[test]
    fn perm_round_trip_and_validation() {
        let p = BlockPermutation::from_perm(vec![2, 0, 1]).unwrap();
        let x = Tensor2::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        assert_eq!(invert_perm(&p, &apply_perm(&p, &x).unwrap()).unwrap(), x);
        assert_eq!(apply_perm(&BlockPermutation::identity(3), &x).unwrap(), x);
        assert!(BlockPermutation::from_perm(vec![0, 0, 1]).is_err());
        assert!(BlockPermutation::from_perm(vec![0, 3]).is_err());
        assert!(apply_perm(&p, &Tensor2::zeros(2, 2)).is_err());
    }

    #[test]
    fn ctg_reduce_semantics() {
        let id = BlockPermutation::identity(1);
        let a = Tensor2::scalar(0.2);
        let b = Tensor2::scalar(0.7);
        let both = [a.clone(), b];
        let perms = [id.clone(), id.clone()];
        assert_eq!(ctg(&both, &perms, CtgReduce::Max).unwrap().item(), 0.7);
        assert!((ctg(&both, &perms, CtgReduce::Avg).unwrap().item() - 0.45).abs() < 1e-15);
        assert_eq!(ctg(std::slice::from_ref(&a), std::slice::from_ref(&id), CtgReduce::Max).unwrap(), a);
        let same = [a.clone(), a.clone()];
        assert_eq!(ctg(&same, &perms, CtgReduce::Avg).unwrap(), ctg(&same, &perms, CtgReduce::Max).unwrap());
        assert!(ctg(&[], &[], CtgReduce::Max).is_err());
    }

    #[test]
    fn ctg_restores_time_order() {
        let x = Tensor2::column(&[0.0, 1.0, 2.0, 3.0]);
        let p = swap_blocks(4, (0, 1), (2, 4));
        let shuffled = apply_perm(&p, &x).unwrap();
        assert_eq!(ctg(&[shuffled], &[p], CtgReduce::Max).unwrap(), x);
    }

    #[test]
    fn alternatives_keep_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor2::filled(10, 3, 1.0);
        for kind in [
            Augmentation::Tca,
            Augmentation::GaussianNoise,
            Augmentation::RandomMask,
            Augmentation::ResolutionTransform,
        ] {
            assert_eq!(alternative_augment(&x, kind, &mut rng).unwrap().shape(), (10, 3));
        }
        assert_eq!(alternative_augment(&x, Augmentation::ResolutionTransform, &mut rng).unwrap(), x);
    }

    fn arb_mask(max_len: usize) -> impl Strategy<Value = InstanceMask> {
        prop::collection::vec(any::<bool>(), 1..max_len).prop_map(InstanceMask)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn intra_tca_is_invertible(m in arb_mask(40), delta in 0usize..3, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = intra_tca(&m, delta, &mut rng);
            let t = m.len();
            let x = Tensor2::from_vec(t, 2, (0..2 * t).map(|v| v as f64 * 0.37 - 1.0).collect()).unwrap();
            let shuffled = apply_perm(&p, &x).unwrap();
            prop_assert_eq!(invert_perm(&p, &shuffled).unwrap(), x.clone());
            let mut sorted = p.perm().to_vec();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..t).collect::<Vec<_>>());
            prop_assert!((shuffled.sum() - x.sum()).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn inter_tca_keeps_action_rows(
            bits1 in prop::collection::vec(any::<bool>(), 12),
            bits2 in prop::collection::vec(any::<bool>(), 12),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x1 = Tensor2::from_vec(12, 3, (0..36).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let x2 = Tensor2::from_vec(12, 3, (0..36).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let (m1, m2) = (InstanceMask(bits1), InstanceMask(bits2));
            let (y1, y2) = inter_tca(&x1, &m1, &x2, &m2).unwrap();
            for t in 0..12 {
                if m1.0[t] {
                    prop_assert_eq!(y1.row_slice(t), x1.row_slice(t));
                }
                if m2.0[t] {
                    prop_assert_eq!(y2.row_slice(t), x2.row_slice(t));
                }
            }
        }

        #[test]
        fn mask_is_monotone_in_gamma(
            logits in prop::collection::vec(-4.0f64..4.0, 30),
            g1 in 0.01f64..0.99,
            g2 in 0.01f64..0.99,
        ) {
            let s = Tensor2::from_vec(10, 3, logits).unwrap();
            let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
            let loose = collect_instance_mask(&s, lo).unwrap();
            let strict = collect_instance_mask(&s, hi).unwrap();
            prop_assert!(strict.is_subset_of(&loose));
        }

        #[test]
        fn ctg_max_dominates_avg(
            vals in prop::collection::vec(-5.0f64..5.0, 3 * 8 * 2),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tcams: Vec<Tensor2> = vals.chunks(16).map(|c| Tensor2::from_vec(8, 2, c.to_vec()).unwrap()).collect();
            let perms: Vec<BlockPermutation> = (0..3)
                .map(|_| {
                    let bits: Vec<bool> = (0..8).map(|_| rng.random_bool(0.5)).collect();
                    intra_tca(&InstanceMask(bits), 1, &mut rng)
                })
                .collect();
            let mx = ctg(&tcams, &perms, CtgReduce::Max).unwrap();
            let av = ctg(&tcams, &perms, CtgReduce::Avg).unwrap();
            for (a, b) in mx.data().iter().zip(av.data()) {
                prop_assert!(a + 1e-12 >= *b);
            }
        }
    }
}
