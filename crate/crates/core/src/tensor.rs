//! Dense row-major `f64` tensors.
//!
//! Tensors are always contiguous. Broadcasting is implemented as an iteration
//! strategy (zero strides on extent-1 axes), so neither operand is ever
//! physically replicated.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

/// Row-major strides for `shape`.
pub fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Shapes of a broadcast binary operation, aligned from the trailing axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BroadcastSpec {
    pub left: Vec<usize>,
    pub right: Vec<usize>,
    pub result: Vec<usize>,
}

impl BroadcastSpec {
    pub fn new(left: &[usize], right: &[usize]) -> Result<Self> {
        let rank = left.len().max(right.len());
        let mut result = vec![0; rank];
        for (i, slot) in result.iter_mut().enumerate() {
            let l = dim_from_end(left, rank - 1 - i);
            let r = dim_from_end(right, rank - 1 - i);
            *slot = match (l, r) {
                (a, b) if a == b => a,
                (1, b) => b,
                (a, 1) => a,
                _ => {
                    return Err(Error::ShapeMismatch(format!(
                        "cannot broadcast {left:?} with {right:?}"
                    )))
                }
            };
        }
        Ok(Self {
            left: left.to_vec(),
            right: right.to_vec(),
            result,
        })
    }

    /// Strides of `operand` laid over the result shape; broadcast axes get stride 0.
    fn aligned_strides(operand: &[usize], result: &[usize]) -> Vec<usize> {
        let own = strides_for(operand);
        let offset = result.len() - operand.len();
        (0..result.len())
            .map(|d| {
                if d < offset || operand[d - offset] == 1 {
                    0
                } else {
                    own[d - offset]
                }
            })
            .collect()
    }
}

// Extent of the axis `k` positions before the last; missing leading axes are 1.
fn dim_from_end(shape: &[usize], k: usize) -> usize {
    if k < shape.len() {
        shape[shape.len() - 1 - k]
    } else {
        1
    }
}

/// Visits every result index of a broadcast, passing (result, left, right) offsets.
fn for_each_broadcast(
    result: &[usize],
    left_strides: &[usize],
    right_strides: &[usize],
    mut visit: impl FnMut(usize, usize, usize),
) {
    let total = numel_of(result);
    if total == 0 {
        return;
    }
    if result.is_empty() {
        visit(0, 0, 0);
        return;
    }
    let rank = result.len();
    let inner = result[rank - 1];
    let (ls, rs) = (left_strides[rank - 1], right_strides[rank - 1]);
    let mut counter = vec![0usize; rank - 1];
    let (mut lo, mut ro) = (0usize, 0usize);
    let mut out = 0;
    loop {
        for k in 0..inner {
            visit(out + k, lo + k * ls, ro + k * rs);
        }
        out += inner;
        // advance the odometer over the leading axes
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            counter[d] += 1;
            lo += left_strides[d];
            ro += right_strides[d];
            if counter[d] < result[d] {
                break;
            }
            lo -= left_strides[d] * result[d];
            ro -= right_strides[d] * result[d];
            counter[d] = 0;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ReduceKind {
    Sum,
    Max,
    Median,
}

/// Output of [`Tensor::reduce`].
#[derive(Clone, Debug)]
pub struct Reduction {
    pub values: Tensor,
    /// Winning index along the reduced axis (max/median only).
    pub arg: Option<Vec<usize>>,
    /// Smallest non-zero gap between a selected element and its nearest
    /// competitor, divided by the spread (max - min) of its slice. Exact ties
    /// are skipped; infinite for sums and single-element slices.
    pub margin: f64,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel_of(&shape) != data.len() {
            return Err(Error::SizeMismatch(format!(
                "shape {shape:?} holds {} elements, got {}",
                numel_of(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel_of(shape)],
        }
    }

    /// A one-element tensor of shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let data = (0..numel_of(shape)).map(&mut f).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_for(&self.shape)
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len());
        let offset = index
            .iter()
            .zip(self.strides())
            .map(|(i, s)| i * s)
            .sum::<usize>();
        self.data[offset]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two equally shaped tensors.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        self.clone().into_shape(shape)
    }

    pub fn into_shape(self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.data.len() {
            return Err(Error::SizeMismatch(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        broadcast_binary(self, other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        broadcast_binary(self, other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        broadcast_binary(self, other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{:?} += {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "dot of {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        Ok(self
            .zip_map(other, |a, b| (a - b).abs())?
            .data
            .into_iter()
            .fold(0.0, f64::max))
    }

    /// Sums this tensor down to `shape`, the adjoint of broadcasting `shape` up
    /// to `self.shape()`.
    pub fn sum_to_shape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape == self.shape.as_slice() {
            return Ok(self.clone());
        }
        let spec = BroadcastSpec::new(shape, &self.shape)?;
        if spec.result != self.shape {
            return Err(Error::ShapeMismatch(format!(
                "{shape:?} does not broadcast to {:?}",
                self.shape
            )));
        }
        let target_strides = BroadcastSpec::aligned_strides(shape, &self.shape);
        let own = strides_for(&self.shape);
        let mut out = vec![0.0; numel_of(shape)];
        for_each_broadcast(&self.shape, &target_strides, &own, |_, t, s| {
            out[t] += self.data[s];
        });
        Tensor::new(shape.to_vec(), out)
    }

    /// Reduces along `axis`. Max keeps the lowest index among equal maxima;
    /// median selects the element at sorted position `n / 2`.
    pub fn reduce(&self, kind: ReduceKind, axis: usize) -> Result<Reduction> {
        if axis >= self.rank() {
            return Err(Error::InvalidAxis {
                axis,
                rank: self.rank(),
            });
        }
        let len = self.shape[axis];
        if len == 0 {
            return Err(Error::EmptyAxis {
                axis,
                shape: self.shape.clone(),
            });
        }
        let outer = numel_of(&self.shape[..axis]);
        let inner = numel_of(&self.shape[axis + 1..]);
        let mut out_shape = self.shape.clone();
        out_shape.remove(axis);

        let mut values = Vec::with_capacity(outer * inner);
        let mut args = Vec::new();
        let mut margin = f64::INFINITY;
        let mut slice = Vec::with_capacity(len);
        let mut order: Vec<usize> = Vec::with_capacity(len);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                match kind {
                    ReduceKind::Sum => {
                        let mut acc = 0.0;
                        for k in 0..len {
                            acc += self.data[base + k * inner];
                        }
                        values.push(acc);
                    }
                    ReduceKind::Max => {
                        let mut best = 0;
                        let mut best_v = self.data[base];
                        let mut second = f64::NEG_INFINITY;
                        let mut lowest = best_v;
                        for k in 1..len {
                            let v = self.data[base + k * inner];
                            lowest = lowest.min(v);
                            if v > best_v {
                                second = best_v;
                                best_v = v;
                                best = k;
                            } else if v > second {
                                second = v;
                            }
                        }
                        margin = margin.min(relative_gap(best_v - second, best_v - lowest));
                        values.push(best_v);
                        args.push(best);
                    }
                    ReduceKind::Median => {
                        slice.clear();
                        slice.extend((0..len).map(|k| self.data[base + k * inner]));
                        order.clear();
                        order.extend(0..len);
                        order.sort_by(|&a, &b| slice[a].total_cmp(&slice[b]).then(a.cmp(&b)));
                        let pos = len / 2;
                        let pick = order[pos];
                        let v = slice[pick];
                        let spread = slice[order[len - 1]] - slice[order[0]];
                        if pos > 0 {
                            margin = margin.min(relative_gap(v - slice[order[pos - 1]], spread));
                        }
                        if pos + 1 < len {
                            margin = margin.min(relative_gap(slice[order[pos + 1]] - v, spread));
                        }
                        values.push(v);
                        args.push(pick);
                    }
                }
            }
        }
        Ok(Reduction {
            values: Tensor::new(out_shape, values)?,
            arg: (kind != ReduceKind::Sum).then_some(args),
            margin,
        })
    }

    /// Sub-tensor at `index` along the leading axis.
    pub fn index_axis0(&self, index: usize) -> Tensor {
        assert!(!self.shape.is_empty() && index < self.shape[0]);
        let sub = numel_of(&self.shape[1..]);
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[index * sub..(index + 1) * sub].to_vec(),
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::ShapeMismatch("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::ShapeMismatch(format!(
                    "stack of {:?} and {:?}",
                    first.shape, p.shape
                )));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }
}

/// `gap / spread`. Exact ties give infinity: they usually come from
/// structurally identical elements (e.g. zero padding) that never separate.
pub(crate) fn relative_gap(gap: f64, spread: f64) -> f64 {
    if gap <= 0.0 {
        f64::INFINITY
    } else {
        gap / spread
    }
}

/// Applies `op` elementwise over the broadcast of `a` and `b`.
pub fn broadcast_binary(a: &Tensor, b: &Tensor, op: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape == b.shape {
        return a.zip_map(b, op);
    }
    let spec = BroadcastSpec::new(&a.shape, &b.shape)?;
    let ls = BroadcastSpec::aligned_strides(&a.shape, &spec.result);
    let rs = BroadcastSpec::aligned_strides(&b.shape, &spec.result);
    let mut out = vec![0.0; numel_of(&spec.result)];
    for_each_broadcast(&spec.result, &ls, &rs, |o, l, r| {
        out[o] = op(a.data[l], b.data[r]);
    });
    Tensor::new(spec.result, out)
}
