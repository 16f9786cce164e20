//! Synthetic videos with a controllable co-scene confound.
//!
//! Every class owns an action signature and a scene signature, orthonormal
//! to each other and to every other class's signatures. A positive action
//! segment of class `c` carries `action(c) + ρ·scene(c)`. Context segments
//! next to an action may carry `scene(c)` alone, the co-scene confound that
//! a classifier leaning on scene evidence will misfire on. Remaining context
//! is an isotropic Gaussian direction unrelated to any class.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Dataset, GtSegment, SyntheticSpec, VideoSample};
use crate::autodiff::Tensor2;
use crate::error::Result;

/// Unit-norm signature directions in the full F-dimensional feature space.
#[derive(Clone, Debug)]
pub struct ClassSignatures {
    pub action: Vec<Vec<f64>>,
    pub scene: Vec<Vec<f64>>,
}

impl ClassSignatures {
    /// Gram–Schmidt over seeded Gaussian draws in one stream's D = F/2
    /// dimensions; each stream receives the same direction, scaled so the
    /// concatenation has unit norm.
    fn draw(num_classes: usize, feature_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let d = feature_dim / 2;
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(2 * num_classes);
        while basis.len() < 2 * num_classes {
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            for b in &basis {
                let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= proj * y;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-6 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
        let widen = |v: &Vec<f64>| -> Vec<f64> {
            let s = std::f64::consts::FRAC_1_SQRT_2;
            v.iter().chain(v.iter()).map(|x| x * s).collect()
        };
        let action = basis[..num_classes].iter().map(widen).collect();
        let scene = basis[num_classes..].iter().map(widen).collect();
        Self { action, scene }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Role {
    Action(usize),
    CoScene(usize),
    Background,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sigs = ClassSignatures::draw(spec.num_classes, spec.feature_dim, &mut rng);
    let train = (0..spec.num_train)
        .map(|i| generate_video(spec, &sigs, format!("train_{i:05}"), &mut rng))
        .collect();
    let test = (0..spec.num_test)
        .map(|i| generate_video(spec, &sigs, format!("test_{i:05}"), &mut rng))
        .collect();
    Ok(Dataset {
        spec: spec.clone(),
        train,
        test,
    })
}

/// Signatures the generator uses for `spec`, for analysis and tests.
pub fn signatures_for(spec: &SyntheticSpec) -> ClassSignatures {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    ClassSignatures::draw(spec.num_classes, spec.feature_dim, &mut rng)
}

fn generate_video(spec: &SyntheticSpec, sigs: &ClassSignatures, id: String, rng: &mut ChaCha8Rng) -> VideoSample {
    let t_len = spec.segments_per_video;
    let f = spec.feature_dim;
    let class = rng.random_range(0..spec.num_classes);

    let n = rng.random_range(spec.actions_per_video.0..=spec.actions_per_video.1);
    let lengths: Vec<usize> = (0..n)
        .map(|_| rng.random_range(spec.action_length.0..=spec.action_length.1))
        .collect();
    // one mandatory gap between consecutive instances, the rest spread by
    // stars and bars
    let free = t_len - lengths.iter().sum::<usize>() - (n - 1);
    let mut cuts: Vec<usize> = (0..n).map(|_| rng.random_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut roles = vec![Role::Background; t_len];
    let mut gt_segments = Vec::with_capacity(n);
    let mut prev_cut = 0;
    let mut cursor = 0;
    for (i, (&len, &cut)) in lengths.iter().zip(&cuts).enumerate() {
        cursor += cut - prev_cut + usize::from(i > 0);
        prev_cut = cut;
        for r in &mut roles[cursor..cursor + len] {
            *r = Role::Action(class);
        }
        gt_segments.push(GtSegment {
            class,
            start: cursor,
            end: cursor + len,
        });
        cursor += len;
    }

    let context = roles.iter().filter(|r| **r == Role::Background).count();
    let target = (spec.co_scene_fraction * context as f64).round() as usize;
    place_co_scene(&mut roles, &gt_segments, target, class, rng);

    let mut features = Tensor2::zeros(t_len, f);
    let iso_scale = 1.0 / (f as f64).sqrt();
    for (t, role) in roles.iter().enumerate() {
        let row = features.row_slice_mut(t);
        match *role {
            Role::Action(c) => {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = sigs.action[c][j] + spec.scene_correlation * sigs.scene[c][j];
                }
            }
            Role::CoScene(c) => row.copy_from_slice(&sigs.scene[c]),
            Role::Background => {
                for v in row.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *v = z * iso_scale;
                }
            }
        }
        if spec.noise_sigma > 0.0 {
            for v in row.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += spec.noise_sigma * z;
            }
        }
        // stored as f32 on disk; keep the in-memory copy exactly representable
        for v in row.iter_mut() {
            *v = *v as f32 as f64;
        }
    }

    let mut label = vec![false; spec.num_classes];
    label[class] = true;
    VideoSample {
        id,
        features,
        label,
        gt_segments,
        co_scene_segments: runs_of(&roles, |r| matches!(r, Role::CoScene(_)), class),
    }
}

/// Grows co-scene blocks outward from the instance boundaries, one side
/// picked at random per instance, spilling to the other side when blocked.
fn place_co_scene(roles: &mut [Role], instances: &[GtSegment], target: usize, class: usize, rng: &mut ChaCha8Rng) {
    if target == 0 || instances.is_empty() {
        return;
    }
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.shuffle(rng);
    let share = target / instances.len();
    let extra = target % instances.len();
    for (rank, &i) in order.iter().enumerate() {
        let mut want = share + usize::from(rank < extra);
        let seg = instances[i];
        let first_left = rng.random_bool(0.5);
        for left in [first_left, !first_left] {
            while want > 0 {
                let next = if left {
                    grow_left(roles, seg.start)
                } else {
                    grow_right(roles, seg.end)
                };
                match next {
                    Some(t) => {
                        roles[t] = Role::CoScene(class);
                        want -= 1;
                    }
                    None => break,
                }
            }
        }
    }
}

fn grow_left(roles: &[Role], start: usize) -> Option<usize> {
    let mut t = start;
    while t > 0 {
        t -= 1;
        match roles[t] {
            Role::CoScene(_) => continue,
            Role::Background => return Some(t),
            Role::Action(_) => return None,
        }
    }
    None
}

fn grow_right(roles: &[Role], end: usize) -> Option<usize> {
    let mut t = end;
    while t < roles.len() {
        match roles[t] {
            Role::CoScene(_) => t += 1,
            Role::Background => return Some(t),
            Role::Action(_) => return None,
        }
    }
    None
}

fn runs_of(roles: &[Role], pred: impl Fn(&Role) -> bool, class: usize) -> Vec<GtSegment> {
    let mut out = Vec::new();
    let mut start = None;
    for (t, r) in roles.iter().enumerate() {
        match (pred(r), start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                out.push(GtSegment { class, start: s, end: t });
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(GtSegment {
            class,
            start: s,
            end: roles.len(),
        });
    }
    out
}
