use crate::autodiff::Tensor2;
use crate::error::{Error, Result};

/// Linear interpolation of a T×F sequence onto `target` evenly spaced time
/// points, first and last samples aligned.
pub fn resample_time(x: &Tensor2, target: usize) -> Result<Tensor2> {
    let (t_len, f) = x.shape();
    if t_len == 0 {
        return Err(Error::invalid("cannot resample an empty sequence"));
    }
    if target == 0 {
        return Err(Error::invalid("resample target must be at least 1"));
    }
    if target == t_len {
        return Ok(x.clone());
    }
    let mut out = Tensor2::zeros(target, f);
    if target == 1 || t_len == 1 {
        for r in 0..target {
            out.row_slice_mut(r).copy_from_slice(x.row_slice(0));
        }
        return Ok(out);
    }
    let span = (t_len - 1) as f64;
    let denom = (target - 1) as f64;
    for r in 0..target {
        let pos = r as f64 * span / denom;
        let lo = (pos.floor() as usize).min(t_len - 1);
        let frac = pos - lo as f64;
        let dst = out.row_slice_mut(r);
        if lo + 1 >= t_len || frac == 0.0 {
            dst.copy_from_slice(x.row_slice(lo));
            continue;
        }
        let a = x.row_slice(lo);
        let b = x.row_slice(lo + 1);
        for ((d, &va), &vb) in dst.iter_mut().zip(a).zip(b) {
            *d = va + (vb - va) * frac;
        }
    }
    Ok(out)
}
