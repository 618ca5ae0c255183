//! im2col unfolding, its adjoint, and spatial resampling between tiers.

use std::sync::Arc;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{relative_gap, Tensor};

/// Marks a zero-padding cell in the index map.
const PAD: usize = usize::MAX;

/// Geometry of an im2col rearrangement with stride 1.
///
/// Row `p` of the unfolded matrix holds the `k_h x k_w` window whose top-left
/// corner sits at output position `p` shifted by the padding; columns follow
/// row-major kernel order.
#[derive(Clone, Debug)]
pub struct UnfoldPlan {
    in_h: usize,
    in_w: usize,
    k_h: usize,
    k_w: usize,
    pad_h: usize,
    pad_w: usize,
    out_h: usize,
    out_w: usize,
    /// Flat input offset for each (position, kernel element), or `PAD`.
    index: Arc<[usize]>,
}

impl PartialEq for UnfoldPlan {
    fn eq(&self, other: &Self) -> bool {
        (self.in_h, self.in_w, self.k_h, self.k_w, self.pad_h, self.pad_w)
            == (other.in_h, other.in_w, other.k_h, other.k_w, other.pad_h, other.pad_w)
    }
}

impl UnfoldPlan {
    pub fn new(
        in_h: usize,
        in_w: usize,
        k_h: usize,
        k_w: usize,
        pad_h: usize,
        pad_w: usize,
    ) -> Result<Self> {
        if k_h == 0 || k_w == 0 || in_h + 2 * pad_h < k_h || in_w + 2 * pad_w < k_w {
            return Err(Error::ShapeMismatch(format!(
                "kernel {k_h}x{k_w} does not fit input {in_h}x{in_w} with padding ({pad_h}, {pad_w})"
            )));
        }
        let out_h = in_h + 2 * pad_h - k_h + 1;
        let out_w = in_w + 2 * pad_w - k_w + 1;
        let mut index = Vec::with_capacity(out_h * out_w * k_h * k_w);
        for i in 0..out_h {
            for j in 0..out_w {
                for u in 0..k_h {
                    for v in 0..k_w {
                        let r = (i + u).wrapping_sub(pad_h);
                        let c = (j + v).wrapping_sub(pad_w);
                        index.push(if r < in_h && c < in_w { r * in_w + c } else { PAD });
                    }
                }
            }
        }
        Ok(Self {
            in_h,
            in_w,
            k_h,
            k_w,
            pad_h,
            pad_w,
            out_h,
            out_w,
            index: index.into(),
        })
    }

    /// "Same" zero padding of `(k - 1) / 2`, so there is one output position
    /// per input pixel. Kernel extents must be odd.
    pub fn same(in_h: usize, in_w: usize, k_h: usize, k_w: usize) -> Result<Self> {
        if k_h.is_multiple_of(2) || k_w.is_multiple_of(2) {
            return Err(Error::EvenKernel(k_h, k_w));
        }
        Self::new(in_h, in_w, k_h, k_w, (k_h - 1) / 2, (k_w - 1) / 2)
    }

    pub fn input_size(&self) -> (usize, usize) {
        (self.in_h, self.in_w)
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.k_h, self.k_w)
    }

    pub fn padding(&self) -> (usize, usize) {
        (self.pad_h, self.pad_w)
    }

    pub fn output_size(&self) -> (usize, usize) {
        (self.out_h, self.out_w)
    }

    /// Number of output positions.
    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn patch_len(&self) -> usize {
        self.k_h * self.k_w
    }

    /// Input coordinate read by patch row `p`, column `q`; `None` for padding.
    pub fn source(&self, p: usize, q: usize) -> Option<(usize, usize)> {
        let flat = self.index[p * self.patch_len() + q];
        (flat != PAD).then(|| (flat / self.in_w, flat % self.in_w))
    }

    fn check_input(&self, shape: &[usize]) -> Result<usize> {
        match shape {
            [c, h, w] if *h == self.in_h && *w == self.in_w => Ok(*c),
            _ => Err(Error::ShapeMismatch(format!(
                "unfold plan expects [C, {}, {}], got {shape:?}",
                self.in_h, self.in_w
            ))),
        }
    }

    fn check_patches(&self, shape: &[usize]) -> Result<usize> {
        match shape {
            [c, p, q] if *p == self.positions() && *q == self.patch_len() => Ok(*c),
            _ => Err(Error::ShapeMismatch(format!(
                "fold plan expects [C, {}, {}], got {shape:?}",
                self.positions(),
                self.patch_len()
            ))),
        }
    }
}

/// `[C, M, N] -> [C, positions, patch_len]`.
pub fn unfold(y: &Tensor, plan: &UnfoldPlan) -> Result<Tensor> {
    let channels = plan.check_input(y.shape())?;
    let plane = plan.in_h * plan.in_w;
    let rows = plan.index.len();
    let mut out = Vec::with_capacity(channels * rows);
    for c in 0..channels {
        let src = &y.data()[c * plane..(c + 1) * plane];
        out.extend(
            plan.index
                .iter()
                .map(|&k| if k == PAD { 0.0 } else { src[k] }),
        );
    }
    Tensor::new(vec![channels, plan.positions(), plan.patch_len()], out)
}

/// Scatter-add adjoint of [`unfold`]: `[C, positions, patch_len] -> [C, M, N]`.
pub fn fold(g: &Tensor, plan: &UnfoldPlan) -> Result<Tensor> {
    let channels = plan.check_patches(g.shape())?;
    let plane = plan.in_h * plan.in_w;
    let rows = plan.index.len();
    let mut out = vec![0.0; channels * plane];
    for c in 0..channels {
        let dst = &mut out[c * plane..(c + 1) * plane];
        let src = &g.data()[c * rows..(c + 1) * rows];
        for (&k, &v) in plan.index.iter().zip(src) {
            if k != PAD {
                dst[k] += v;
            }
        }
    }
    Tensor::new(vec![channels, plan.in_h, plan.in_w], out)
}

pub fn unfold_var<'t>(y: &Var<'t>, plan: &UnfoldPlan) -> Result<Var<'t>> {
    let value = unfold(y.value(), plan)?;
    let plan = plan.clone();
    Ok(y.tape().record(&[y], value, move |g, _| Ok(vec![Some(fold(g, &plan)?)])))
}

pub fn fold_var<'t>(g: &Var<'t>, plan: &UnfoldPlan) -> Result<Var<'t>> {
    let value = fold(g.value(), plan)?;
    let plan = plan.clone();
    Ok(g.tape().record(&[g], value, move |up, _| Ok(vec![Some(unfold(up, &plan)?)])))
}

/// Output spatial size of [`resample`] with factor `s`.
pub fn resampled_size(h: usize, w: usize, s: i32) -> Result<(usize, usize)> {
    match s {
        0 => Err(Error::ZeroFactor),
        1 => Ok((h, w)),
        s if s > 1 => {
            let f = s as usize;
            for extent in [h, w] {
                if extent % f != 0 {
                    return Err(Error::IndivisibleExtent {
                        extent,
                        factor: s,
                        tier: None,
                    });
                }
            }
            Ok((h / f, w / f))
        }
        s => {
            let f = s.unsigned_abs() as usize;
            Ok((h * f, w * f))
        }
    }
}

struct Pooled {
    values: Tensor,
    arg: Vec<usize>,
    margin: f64,
}

fn max_pool(x: &Tensor, f: usize) -> Result<Pooled> {
    let [c, h, w] = *x.shape() else {
        return Err(Error::ShapeMismatch(format!("resample expects [C, M, N], got {:?}", x.shape())));
    };
    let (oh, ow) = resampled_size(h, w, f as i32)?;
    let data = x.data();
    let mut values = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    let mut margin = f64::INFINITY;
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = usize::MAX;
                let mut best_v = f64::NEG_INFINITY;
                let mut second = f64::NEG_INFINITY;
                let mut lowest = f64::INFINITY;
                for u in 0..f {
                    for v in 0..f {
                        let k = ch * h * w + (i * f + u) * w + (j * f + v);
                        let val = data[k];
                        lowest = lowest.min(val);
                        if best == usize::MAX || val > best_v {
                            second = best_v;
                            best_v = val;
                            best = k;
                        } else if val > second {
                            second = val;
                        }
                    }
                }
                if f > 1 {
                    margin = margin.min(relative_gap(best_v - second, best_v - lowest));
                }
                values.push(best_v);
                arg.push(best);
            }
        }
    }
    Ok(Pooled {
        values: Tensor::new(vec![c, oh, ow], values)?,
        arg,
        margin,
    })
}

fn upsample(x: &Tensor, f: usize) -> Result<Tensor> {
    let [c, h, w] = *x.shape() else {
        return Err(Error::ShapeMismatch(format!("resample expects [C, M, N], got {:?}", x.shape())));
    };
    let (oh, ow) = (h * f, w * f);
    let data = x.data();
    Tensor::new(
        vec![c, oh, ow],
        (0..c * oh * ow)
            .map(|k| {
                let (ch, r, col) = (k / (oh * ow), (k / ow) % oh, k % ow);
                data[ch * h * w + (r / f) * w + col / f]
            })
            .collect(),
    )
}

// Adjoint of upsample: sum each f x f block.
fn upsample_adjoint(g: &Tensor, f: usize, shape: &[usize]) -> Result<Tensor> {
    let (h, w) = (shape[1], shape[2]);
    let (oh, ow) = (h * f, w * f);
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    for (k, &v) in g.data().iter().enumerate() {
        let (ch, r, col) = (k / (oh * ow), (k / ow) % oh, k % ow);
        od[ch * h * w + (r / f) * w + col / f] += v;
    }
    Ok(out)
}

/// `s = 1`: identity. `s > 1`: non-overlapping `s x s` max pooling.
/// `s < 0`: nearest-neighbour upsampling by `|s|`.
pub fn resample(x: &Tensor, s: i32) -> Result<Tensor> {
    match s {
        0 => Err(Error::ZeroFactor),
        1 => Ok(x.clone()),
        s if s > 1 => Ok(max_pool(x, s as usize)?.values),
        s => upsample(x, s.unsigned_abs() as usize),
    }
}

/// Differentiable [`resample`]. Max pooling routes the gradient to the
/// window's argmax; upsampling sums over each replicated block.
pub fn resample_var<'t>(x: &Var<'t>, s: i32) -> Result<Var<'t>> {
    let shape = x.shape().to_vec();
    match s {
        0 => Err(Error::ZeroFactor),
        1 => Ok(x.clone()),
        s if s > 1 => {
            let pooled = max_pool(x.value(), s as usize)?;
            x.tape().note_margin(pooled.margin);
            x.tape().note_selection(pooled.arg.iter().copied());
            let arg = pooled.arg;
            Ok(x.tape().record(&[x], pooled.values, move |g, _| {
                let mut out = Tensor::zeros(&shape);
                let od = out.data_mut();
                for (&k, &v) in arg.iter().zip(g.data()) {
                    od[k] += v;
                }
                Ok(vec![Some(out)])
            }))
        }
        s => {
            let f = s.unsigned_abs() as usize;
            let value = upsample(x.value(), f)?;
            Ok(x.tape().record(&[x], value, move |g, _| {
                Ok(vec![Some(upsample_adjoint(g, f, &shape)?)])
            }))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{gradcheck, CheckStatus, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    // Oracle: direct sliding-window extraction with explicit bounds checks.
    fn naive_unfold(y: &Tensor, kh: usize, kw: usize) -> Tensor {
        let [c, h, w] = *y.shape() else { unreachable!() };
        let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
        let mut out = Vec::new();
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    for u in 0..kh {
                        for v in 0..kw {
                            let r = i as isize + u as isize - ph as isize;
                            let col = j as isize + v as isize - pw as isize;
                            let inside = r >= 0 && col >= 0 && (r as usize) < h && (col as usize) < w;
                            out.push(if inside { y.get(&[ch, r as usize, col as usize]) } else { 0.0 });
                        }
                    }
                }
            }
        }
        Tensor::new(vec![c, h * w, kh * kw], out).unwrap()
    }

    #[test]
    fn unit_kernel_unfold() {
        let y = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let plan = UnfoldPlan::same(2, 2, 1, 1).unwrap();
        let u = unfold(&y, &plan).unwrap();
        assert_eq!(u.shape(), &[1, 4, 1]);
        assert_eq!(u.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(fold(&u, &plan).unwrap(), y);
    }

    #[test]
    fn identity_center_row() {
        let y = Tensor::new(
            vec![1, 3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let plan = UnfoldPlan::same(3, 3, 3, 3).unwrap();
        let u = unfold(&y, &plan).unwrap();
        assert_eq!(&u.data()[4 * 9..5 * 9], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn unfold_matches_naive_extraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (c, h, w, kh, kw) in [(1, 4, 5, 3, 3), (2, 6, 3, 5, 1), (3, 7, 7, 7, 5), (1, 1, 1, 3, 3)] {
            let y = random(&[c, h, w], &mut rng);
            let plan = UnfoldPlan::same(h, w, kh, kw).unwrap();
            let u = unfold(&y, &plan).unwrap();
            assert_eq!(u, naive_unfold(&y, kh, kw));
            // each row sums to its padded neighbourhood
            for p in 0..h * w {
                let (i, j) = (p / w, p % w);
                let mut want = 0.0;
                for r in i.saturating_sub(kh / 2)..(i + kh / 2 + 1).min(h) {
                    for col in j.saturating_sub(kw / 2)..(j + kw / 2 + 1).min(w) {
                        want += y.get(&[0, r, col]);
                    }
                }
                let got: f64 = u.data()[p * kh * kw..(p + 1) * kh * kw].iter().sum();
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fold_counts_kernel_placements() {
        let plan = UnfoldPlan::same(3, 3, 3, 3).unwrap();
        let counts = fold(&Tensor::ones(&[1, 9, 9]), &plan).unwrap();
        assert_eq!(counts.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn unfold_fold_adjointness() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let (c, h, w) = (rng.gen_range(1..4), rng.gen_range(1..8), rng.gen_range(1..8));
            let (kh, kw) = (2 * rng.gen_range(0..3) + 1, 2 * rng.gen_range(0..3) + 1);
            let plan = UnfoldPlan::same(h, w, kh, kw).unwrap();
            let y = random(&[c, h, w], &mut rng);
            let g = random(&[c, h * w, kh * kw], &mut rng);
            let lhs = unfold(&y, &plan).unwrap().dot(&g).unwrap();
            let rhs = y.dot(&fold(&g, &plan).unwrap()).unwrap();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn same_plan_geometry() {
        let plan = UnfoldPlan::same(5, 4, 3, 5).unwrap();
        assert_eq!(plan.positions(), 20);
        assert_eq!(plan.patch_len(), 15);
        assert_eq!(plan.padding(), (1, 2));
        assert_eq!(plan.source(0, 0), None);
        assert_eq!(plan.source(0, 7), Some((0, 0)));
        assert!(matches!(UnfoldPlan::same(4, 4, 2, 3), Err(Error::EvenKernel(2, 3))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let plan = UnfoldPlan::same(4, 4, 3, 3).unwrap();
        assert!(matches!(unfold(&Tensor::zeros(&[1, 4, 5]), &plan), Err(Error::ShapeMismatch(_))));
        assert!(matches!(fold(&Tensor::zeros(&[1, 16, 8]), &plan), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn resample_cases() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(resample(&x, 1).unwrap(), x);
        assert_eq!(resample(&x, 2).unwrap().data(), &[4.0]);
        let one = Tensor::new(vec![1, 1, 1], vec![5.0]).unwrap();
        let up = resample(&one, -2).unwrap();
        assert_eq!(up.shape(), &[1, 2, 2]);
        assert_eq!(up.data(), &[5.0; 4]);
        assert!(matches!(resample(&x, 0), Err(Error::ZeroFactor)));
        assert!(matches!(
            resample(&Tensor::zeros(&[1, 3, 4]), 2),
            Err(Error::IndivisibleExtent { extent: 3, factor: 2, .. })
        ));
    }

    #[test]
    fn resample_round_trip_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for s in [2, 3, 4] {
            let x = random(&[2, 12, 12], &mut rng);
            let back = resample(&resample(&x, -s).unwrap(), s).unwrap();
            assert_eq!(back.shape(), x.shape());
            // max of a replicated block is the original value
            assert_eq!(back, x);
        }
    }

    #[test]
    fn gradcheck_through_patch_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let plan = UnfoldPlan::same(4, 4, 3, 3).unwrap();
        let y = random(&[2, 4, 4], &mut rng);
        let weights = random(&[2, 16, 9], &mut rng);
        let r = gradcheck(
            |tape: &Tape, v| {
                let w = tape.constant(weights.clone());
                let u = unfold_var(&v[0], &plan)?.mul(&w)?;
                let back = fold_var(&u, &plan)?;
                let down = resample_var(&back.sin(), 2)?;
                let up = resample_var(&down, -2)?;
                Ok(up.mul(&back)?.sum_all())
            },
            &[y],
            1e-6,
            1e-5,
        )
        .unwrap();
        assert_ne!(r.status, CheckStatus::Fail, "{r:?}");
    }
}
