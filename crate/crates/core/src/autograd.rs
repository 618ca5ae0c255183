//! Tape-based reverse-mode automatic differentiation.
//!
//! Every differentiable operation appends a node holding its parents and a
//! backward rule to a [`Tape`]. [`Tape::backward`] sweeps the tape in reverse,
//! summing gradients across fan-out. Operations whose inputs are all constants
//! are evaluated without touching the tape.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{broadcast_binary, ReduceKind, Tensor};

pub type NodeId = usize;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Maps the upstream gradient to one gradient per input. `needs[i]` is false
/// for inputs that are constants; the rule may return `None` for those.
pub type BackwardRule = Box<dyn Fn(&Tensor, &[bool]) -> Result<Vec<Option<Tensor>>>>;

struct Node {
    shape: Vec<usize>,
    parents: Vec<Option<NodeId>>,
    backward: Option<BackwardRule>,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    tie_margin: Cell<f64>,
    selections: Cell<u64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

/// A tensor value, tracked on a tape when `node` is set.
#[derive(Clone)]
pub struct Var<'t> {
    tape: &'t Tape,
    value: Rc<Tensor>,
    node: Option<NodeId>,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("node", &self.node)
            .field("shape", &self.value.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            tie_margin: Cell::new(f64::INFINITY),
            selections: Cell::new(FNV_OFFSET),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A tracked leaf (a parameter or an input we want gradients for).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape: value.shape().to_vec(),
            parents: Vec::new(),
            backward: None,
        });
        Var {
            tape: self,
            value: Rc::new(value),
            node: Some(nodes.len() - 1),
        }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        Var {
            tape: self,
            value: Rc::new(value),
            node: None,
        }
    }

    /// Smallest relative selection margin seen by any max/median/clamp on this
    /// tape. Values near zero mean the function is evaluated close to a kink.
    pub fn tie_margin(&self) -> f64 {
        self.tie_margin.get()
    }

    pub(crate) fn note_margin(&self, margin: f64) {
        if margin < self.tie_margin.get() {
            self.tie_margin.set(margin);
        }
    }

    /// Digest of every discrete choice (argmax/argmedian indices, clamp
    /// regions) made while building this tape. Two evaluations with equal
    /// digests lie on the same smooth piece of a piecewise function.
    pub fn selection_digest(&self) -> u64 {
        self.selections.get()
    }

    pub(crate) fn note_selection(&self, choices: impl IntoIterator<Item = usize>) {
        let mut h = self.selections.get();
        for c in choices {
            h = (h ^ c as u64).wrapping_mul(FNV_PRIME);
        }
        self.selections.set(h);
    }

    /// Appends a node for `value` computed from `inputs`. If no input is tracked
    /// the result is a constant and `backward` is dropped.
    pub fn record<'t>(
        &'t self,
        inputs: &[&Var<'t>],
        value: Tensor,
        backward: impl Fn(&Tensor, &[bool]) -> Result<Vec<Option<Tensor>>> + 'static,
    ) -> Var<'t> {
        for v in inputs {
            assert!(std::ptr::eq(v.tape, self), "variable belongs to another tape");
        }
        if inputs.iter().all(|v| v.node.is_none()) {
            return self.constant(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape: value.shape().to_vec(),
            parents: inputs.iter().map(|v| v.node).collect(),
            backward: Some(Box::new(backward)),
        });
        Var {
            tape: self,
            value: Rc::new(value),
            node: Some(nodes.len() - 1),
        }
    }

    /// Gradient of the scalar `root` with respect to every node it depends on.
    pub fn backward(&self, root: &Var<'_>) -> Result<Gradients> {
        let root_id = root.node.ok_or(Error::DetachedRoot)?;
        if !std::ptr::eq(root.tape, self) {
            return Err(Error::DetachedRoot);
        }
        if root.value.numel() != 1 {
            return Err(Error::NonScalarRoot(root.value.shape().to_vec()));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root_id] = Some(Tensor::ones(root.value.shape()));
        for id in (0..=root_id).rev() {
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if let Some(rule) = &node.backward {
                let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
                let parent_grads = rule(&upstream, &needs)?;
                for (parent, g) in node.parents.iter().zip(parent_grads) {
                    let (Some(p), Some(g)) = (parent, g) else {
                        continue;
                    };
                    if g.shape() != nodes[*p].shape.as_slice() {
                        return Err(Error::ShapeMismatch(format!(
                            "backward produced gradient of shape {:?} for input of shape {:?}",
                            g.shape(),
                            nodes[*p].shape
                        )));
                    }
                    match &mut grads[*p] {
                        Some(acc) => acc.add_assign(&g)?,
                        slot => *slot = Some(g),
                    }
                }
            }
            grads[id] = Some(upstream);
        }
        Ok(Gradients { grads })
    }
}

#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        var.node.and_then(|id| self.grads.get(id)?.as_ref())
    }

    /// Gradient of `var`, or zeros when the root does not depend on it.
    pub fn wrt(&self, var: &Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value.shape()))
    }
}

type CustomForward = dyn Fn(&[&Tensor]) -> Result<Tensor> + Send + Sync;
type CustomGrad = dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Result<Vec<Tensor>> + Send + Sync;

/// An operation with a hand-written backward rule that replaces the gradient
/// the tape would derive from composing primitives.
#[derive(Clone)]
pub struct CustomBackward {
    forward: Arc<CustomForward>,
    /// `(inputs, output, upstream) -> gradient per input`.
    backward: Arc<CustomGrad>,
}

impl fmt::Debug for CustomBackward {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("CustomBackward")
    }
}

impl CustomBackward {
    pub fn new(
        forward: impl Fn(&[&Tensor]) -> Result<Tensor> + Send + Sync + 'static,
        backward: impl Fn(&[&Tensor], &Tensor, &Tensor) -> Result<Vec<Tensor>> + Send + Sync + 'static,
    ) -> Self {
        Self {
            forward: Arc::new(forward),
            backward: Arc::new(backward),
        }
    }

    /// A pointwise unary function `f` with derivative `df`.
    pub fn unary(
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        df: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self::new(
            move |xs| Ok(xs[0].map(&f)),
            move |xs, _, g| Ok(vec![xs[0].zip_map(g, |x, g| df(x) * g)?]),
        )
    }

    /// A broadcasting elementwise binary function `f(a, b)` with partials
    /// `dfda` and `dfdb`. Gradients are summed back to each operand's shape.
    pub fn binary(
        f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        dfda: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        dfdb: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self::new(
            move |xs| broadcast_binary(xs[0], xs[1], &f),
            move |xs, _, g| {
                let (a, b) = (xs[0], xs[1]);
                let da = broadcast_binary(a, b, &dfda)?.mul(g)?.sum_to_shape(a.shape())?;
                let db = broadcast_binary(a, b, &dfdb)?.mul(g)?.sum_to_shape(b.shape())?;
                Ok(vec![da, db])
            },
        )
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn unary(
        &self,
        value: Tensor,
        rule: impl Fn(&Tensor) -> Result<Tensor> + 'static,
    ) -> Var<'t> {
        self.tape.record(&[self], value, move |g, _| Ok(vec![Some(rule(g)?)]))
    }

    /// Pointwise `f` with derivative `df` evaluated at the input.
    fn pointwise(
        &self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64 + 'static,
    ) -> Var<'t> {
        let x = Rc::clone(&self.value);
        self.unary(self.value.map(f), move |g| x.zip_map(g, |x, g| df(x) * g))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let value = self.value.add(&other.value)?;
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Ok(self.tape.record(&[self, other], value, move |g, needs| {
            Ok(vec![
                needs[0].then(|| g.sum_to_shape(&sa)).transpose()?,
                needs[1].then(|| g.sum_to_shape(&sb)).transpose()?,
            ])
        }))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let value = self.value.sub(&other.value)?;
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Ok(self.tape.record(&[self, other], value, move |g, needs| {
            Ok(vec![
                needs[0].then(|| g.sum_to_shape(&sa)).transpose()?,
                needs[1].then(|| g.scale(-1.0).sum_to_shape(&sb)).transpose()?,
            ])
        }))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let value = self.value.mul(&other.value)?;
        let (a, b) = (Rc::clone(&self.value), Rc::clone(&other.value));
        Ok(self.tape.record(&[self, other], value, move |g, needs| {
            Ok(vec![
                needs[0]
                    .then(|| g.mul(&b)?.sum_to_shape(a.shape()))
                    .transpose()?,
                needs[1]
                    .then(|| g.mul(&a)?.sum_to_shape(b.shape()))
                    .transpose()?,
            ])
        }))
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let value = broadcast_binary(&self.value, &other.value, |a, b| a / b)?;
        let (a, b) = (Rc::clone(&self.value), Rc::clone(&other.value));
        Ok(self.tape.record(&[self, other], value, move |g, needs| {
            let inv = b.map(|v| 1.0 / v);
            Ok(vec![
                needs[0]
                    .then(|| g.mul(&inv)?.sum_to_shape(a.shape()))
                    .transpose()?,
                needs[1]
                    .then(|| {
                        // d(a/b)/db = -a / b^2
                        let d = broadcast_binary(&a, &b, |a, b| -a / (b * b))?;
                        g.mul(&d)?.sum_to_shape(b.shape())
                    })
                    .transpose()?,
            ])
        }))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(self.value.scale(c), move |g| Ok(g.scale(c)))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(self.value.map(|v| v + c), |g| Ok(g.clone()))
    }

    pub fn powi(&self, n: i32) -> Var<'t> {
        self.pointwise(|x| x.powi(n), move |x| f64::from(n) * x.powi(n - 1))
    }

    pub fn square(&self) -> Var<'t> {
        self.powi(2)
    }

    pub fn sin(&self) -> Var<'t> {
        self.pointwise(f64::sin, f64::cos)
    }

    pub fn cos(&self) -> Var<'t> {
        self.pointwise(f64::cos, |x| -x.sin())
    }

    pub fn exp(&self) -> Var<'t> {
        let value = self.value.map(f64::exp);
        let out = Rc::new(value.clone());
        self.unary(value, move |g| out.zip_map(g, |y, g| y * g))
    }

    pub fn sinh(&self) -> Var<'t> {
        self.pointwise(f64::sinh, f64::cosh)
    }

    pub fn tanh(&self) -> Var<'t> {
        let value = self.value.map(f64::tanh);
        let out = Rc::new(value.clone());
        self.unary(value, move |g| out.zip_map(g, |y, g| (1.0 - y * y) * g))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        let margin = self
            .value
            .data()
            .iter()
            .map(|&x| (x - lo).abs().min((x - hi).abs()) / (hi - lo))
            .fold(f64::INFINITY, f64::min);
        self.tape.note_margin(margin);
        self.tape
            .note_selection(self.value.data().iter().map(|&x| usize::from(x > lo) + usize::from(x >= hi)));
        self.pointwise(
            |x| x.clamp(lo, hi),
            move |x| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    pub fn sum_all(&self) -> Var<'t> {
        let shape = self.shape().to_vec();
        self.unary(Tensor::scalar(self.value.sum()), move |g| {
            Ok(Tensor::full(&shape, g.item()))
        })
    }

    pub fn mean_all(&self) -> Var<'t> {
        let n = self.value.numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Reduction along `axis`. Max and median route the whole upstream
    /// gradient to the selected element.
    pub fn reduce(&self, kind: ReduceKind, axis: usize) -> Result<Var<'t>> {
        let red = self.value.reduce(kind, axis)?;
        self.tape.note_margin(red.margin);
        if let Some(arg) = &red.arg {
            self.tape.note_selection(arg.iter().copied());
        }
        let shape = self.shape().to_vec();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let arg = red.arg;
        Ok(self.unary(red.values, move |g| {
            let gd = g.data();
            let mut out = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let gi = gd[o * inner + i];
                    let base = o * len * inner + i;
                    match &arg {
                        None => {
                            for k in 0..len {
                                out[base + k * inner] = gi;
                            }
                        }
                        Some(arg) => out[base + arg[o * inner + i] * inner] = gi,
                    }
                }
            }
            Tensor::new(shape.clone(), out)
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value.reshape(shape)?;
        let original = self.shape().to_vec();
        Ok(self.unary(value, move |g| g.reshape(&original)))
    }

    /// Stacks equally shaped variables along a new leading axis.
    pub fn stack(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::ShapeMismatch("cannot stack zero variables".into()))?;
        let values: Vec<Tensor> = parts.iter().map(|p| (*p.value).clone()).collect();
        let value = Tensor::stack(&values)?;
        let refs: Vec<&Var<'t>> = parts.iter().collect();
        let count = parts.len();
        Ok(first.tape.record(&refs, value, move |g, needs| {
            Ok((0..count)
                .map(|i| needs[i].then(|| g.index_axis0(i)))
                .collect())
        }))
    }

    /// Applies a [`CustomBackward`] operation; its backward rule replaces
    /// composition-derived gradients.
    pub fn custom(inputs: &[&Var<'t>], op: &CustomBackward) -> Result<Var<'t>> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::ShapeMismatch("custom op needs at least one input".into()))?;
        let values: Vec<Rc<Tensor>> = inputs.iter().map(|v| Rc::clone(&v.value)).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let value = (op.forward)(&refs)?;
        let out = Rc::new(value.clone());
        let backward = Arc::clone(&op.backward);
        Ok(first.tape.record(inputs, value, move |g, _| {
            let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
            let grads = backward(&refs, &out, g)?;
            if grads.len() != refs.len() {
                return Err(Error::ShapeContractViolation(format!(
                    "custom backward returned {} gradients for {} inputs",
                    grads.len(),
                    refs.len()
                )));
            }
            Ok(grads.into_iter().map(Some).collect())
        }))
    }
}

/// Outcome of a single [`gradcheck`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Fail,
    /// A max/median selection (or clamp region) is within the tie margin at
    /// the base point or flips under a perturbation, so the function is not
    /// differentiable there.
    TieDetected,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    /// Maximum relative error per input.
    pub max_rel_err: Vec<f64>,
    pub tol: f64,
    pub tie_margin: f64,
    pub status: CheckStatus,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.status == CheckStatus::Pass
    }

    pub fn worst(&self) -> f64 {
        self.max_rel_err.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Selections closer than this to a tie are reported as `TieDetected`.
    pub tie_margin: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-6,
            tol: 1e-5,
            tie_margin: 1e-4,
        }
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares tape gradients of the scalar function `f` against central finite
/// differences `(f(x+h) - f(x-h)) / 2h`, element by element.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    gradcheck_with(
        f,
        inputs,
        GradcheckOptions {
            h,
            tol,
            ..Default::default()
        },
    )
}

pub fn gradcheck_with<F>(f: F, inputs: &[Tensor], opts: GradcheckOptions) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    for x in inputs {
        if !x.is_finite() {
            return Err(Error::NonFiniteValue("gradcheck input".into()));
        }
    }
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let root = f(&tape, &vars)?;
    if !root.value().is_finite() {
        return Err(Error::NonFiniteValue("gradcheck output".into()));
    }
    let grads = tape.backward(&root)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(v)).collect();
    let margin = tape.tie_margin();
    let digest = tape.selection_digest();
    let flipped = Cell::new(false);

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let y = f(&tape, &vars)?.value().item();
        if !y.is_finite() {
            return Err(Error::NonFiniteValue("perturbed gradcheck output".into()));
        }
        if tape.selection_digest() != digest {
            flipped.set(true);
        }
        Ok(y)
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel_err = Vec::with_capacity(inputs.len());
    for (i, grad) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + opts.h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x0 - opts.h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * opts.h);
            worst = worst.max(relative_error(grad.data()[j], numeric));
        }
        max_rel_err.push(worst);
    }
    let status = if margin < opts.tie_margin || flipped.get() {
        CheckStatus::TieDetected
    } else if max_rel_err.iter().all(|&e| e < opts.tol) {
        CheckStatus::Pass
    } else {
        CheckStatus::Fail
    };
    Ok(GradcheckReport {
        max_rel_err,
        tol: opts.tol,
        tie_margin: margin,
        status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    // Independent oracle: central differences written out directly.
    fn finite_diff(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
        let mut out = Tensor::zeros(x.shape());
        for j in 0..x.numel() {
            let mut up = x.clone();
            up.data_mut()[j] += h;
            let mut down = x.clone();
            down.data_mut()[j] -= h;
            out.data_mut()[j] = (f(&up) - f(&down)) / (2.0 * h);
        }
        out
    }

    #[test]
    fn product_rule() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let w = tape.leaf(Tensor::scalar(5.0));
        let y = x.mul(&w).unwrap();
        let g = tape.backward(&y).unwrap();
        assert_eq!(g.wrt(&x).item(), 5.0);
        assert_eq!(g.wrt(&w).item(), 3.0);
    }

    #[test]
    fn constants_are_not_recorded() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::scalar(2.0));
        let b = tape.constant(Tensor::scalar(4.0));
        let c = a.mul(&b).unwrap();
        assert!(!c.is_tracked());
        assert!(tape.is_empty());
        assert!(matches!(tape.backward(&c), Err(Error::DetachedRoot)));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(&x.sin()), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn bilinear_form() {
        let tape = Tape::new();
        let w = tape.leaf(t(&[2], &[1.0, 2.0]));
        let x = tape.leaf(t(&[2], &[3.0, 4.0]));
        let loss = w.mul(&x).unwrap().sum_all();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.wrt(&w).data(), &[3.0, 4.0]);
        assert_eq!(g.wrt(&x).data(), &[1.0, 2.0]);
    }

    #[test]
    fn broadcast_gradient_matches_finite_differences() {
        let w0 = uniform(&[1, 3], -1.0, 1.0, 1);
        let x = uniform(&[2, 3], -1.0, 1.0, 2);
        let tape = Tape::new();
        let w = tape.leaf(w0.clone());
        let xv = tape.constant(x.clone());
        let loss = w.mul(&xv).unwrap().sum_all();
        let gw = tape.backward(&loss).unwrap().wrt(&w);
        assert_eq!(gw.shape(), &[1, 3]);
        let fd = finite_diff(|w| w.mul(&x).unwrap().sum(), &w0, 1e-6);
        for j in 0..3 {
            let colsum = x.get(&[0, j]) + x.get(&[1, j]);
            assert!((gw.data()[j] - colsum).abs() < 1e-12);
            assert!((gw.data()[j] - fd.data()[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn max_gradient_is_one_hot() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[0.1, 0.9, 0.3, 0.7, 0.2, 0.4]));
        let loss = x.reduce(ReduceKind::Max, 1).unwrap().sum_all();
        let g = tape.backward(&loss).unwrap().wrt(&x);
        assert_eq!(g.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = x.mul(&x).unwrap().add(&x).unwrap();
        let g = tape.backward(&y).unwrap();
        assert_eq!(g.wrt(&x).item(), 5.0);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let tape = Tape::new();
        let x = tape.leaf(uniform(&[4], -1.0, 1.0, 3));
        let y = x.sin().mul(&x).unwrap().sum_all().scale(0.0);
        let g = tape.backward(&y).unwrap().wrt(&x);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_is_repeatable() {
        let tape = Tape::new();
        let x = tape.leaf(uniform(&[5], -1.0, 1.0, 4));
        let y = x.exp().sinh().sum_all();
        let a = tape.backward(&y).unwrap().wrt(&x);
        let b = tape.backward(&y).unwrap().wrt(&x);
        assert_eq!(a, b);
    }

    #[test]
    fn custom_backward_replaces_composition() {
        let x0 = uniform(&[6], -0.5, 0.5, 5);
        let custom_tanh = CustomBackward::unary(f64::tanh, |x| 1.0 - x.tanh().powi(2));
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = Var::custom(&[&x], &custom_tanh).unwrap().sum_all();
        let g_custom = tape.backward(&y).unwrap().wrt(&x);

        // tanh(x) = (e^{2x} - 1) / (e^{2x} + 1) built from primitives
        let tape2 = Tape::new();
        let x2 = tape2.leaf(x0.clone());
        let e = x2.scale(2.0).exp();
        let y2 = e.add_scalar(-1.0).div(&e.add_scalar(1.0)).unwrap().sum_all();
        let g_comp = tape2.backward(&y2).unwrap().wrt(&x2);
        assert!(g_custom.max_abs_diff(&g_comp).unwrap() < 1e-12);

        // a deliberately different rule proves the custom rule is what runs
        let doubled = CustomBackward::unary(f64::tanh, |x| 2.0 * (1.0 - x.tanh().powi(2)));
        let tape3 = Tape::new();
        let x3 = tape3.leaf(x0);
        let y3 = Var::custom(&[&x3], &doubled).unwrap().sum_all();
        let g3 = tape3.backward(&y3).unwrap().wrt(&x3);
        assert!(g3.max_abs_diff(&g_comp.scale(2.0)).unwrap() < 1e-12);
    }

    #[test]
    fn gradcheck_square_sum() {
        let x = uniform(&[8], -1.0, 1.0, 6);
        let report = gradcheck(|_, v| Ok(v[0].square().sum_all()), &[x], 1e-6, 1e-6).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn gradcheck_sine_of_product() {
        let w = uniform(&[2, 3], -1.0, 1.0, 7);
        let x = uniform(&[2, 3], -1.0, 1.0, 8);
        let report = gradcheck(|_, v| Ok(v[0].mul(&v[1])?.sin().sum_all()), &[w, x], 1e-6, 1e-5).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn gradcheck_all_primitives() {
        let a = uniform(&[2, 3, 4], -0.5, 0.5, 9);
        let b = uniform(&[3, 1], 0.5, 1.0, 10);
        let report = gradcheck(
            |_, v| {
                let z = v[0].mul(&v[1])?.sin().add(&v[1])?.div(&v[1].add_scalar(1.0))?;
                let z = z.powi(3).add(&z.cos())?.sub(&z.exp().scale(0.5))?;
                let z = z.sinh().tanh().clamp(-2.0, 2.0);
                let s = z.reduce(ReduceKind::Sum, 0)?;
                let m = z.reduce(ReduceKind::Max, 2)?;
                let d = z.reduce(ReduceKind::Median, 1)?;
                s.sum_all()
                    .add(&m.square().sum_all())?
                    .add(&d.reshape(&[8])?.sum_all())?
                    .add(&Var::stack(&[s.clone(), s])?.mean_all())
            },
            &[a, b],
            1e-6,
            1e-5,
        )
        .unwrap();
        assert_ne!(report.status, CheckStatus::Fail, "{report:?}");
    }

    #[test]
    fn gradcheck_reports_ties() {
        let x = t(&[3], &[0.5, 0.5, 0.1]);
        let report = gradcheck(|_, v| Ok(v[0].reduce(ReduceKind::Max, 0)?.sum_all()), &[x], 1e-6, 1e-5).unwrap();
        assert_eq!(report.status, CheckStatus::TieDetected);
    }

    #[test]
    fn gradcheck_rejects_non_finite() {
        let x = Tensor::scalar(800.0);
        let err = gradcheck(|_, v| Ok(v[0].exp().sum_all()), &[x], 1e-6, 1e-5).unwrap_err();
        assert!(matches!(err, Error::NonFiniteValue(_)));
    }

    #[test]
    fn gradcheck_flags_wrong_custom_rule() {
        let wrong = CustomBackward::unary(f64::sin, |x| x.cos() + 0.5);
        let x = uniform(&[4], -0.5, 0.5, 11);
        let report = gradcheck(|_, v| Ok(Var::custom(&[&v[0]], &wrong)?.sum_all()), &[x], 1e-6, 1e-5).unwrap();
        assert_eq!(report.status, CheckStatus::Fail);
        assert!(report.worst() > 0.1);
    }
}
