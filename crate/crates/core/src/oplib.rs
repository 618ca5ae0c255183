//! Operator set library: nodal, pool and activation operators and their
//! enumeration into indexable operator sets.
//!
//! Sets are enumerated nodal-major, then pool, then activation. Operators added
//! after construction append their new sets after all existing ones, so the
//! indices of previously enumerated sets never change.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use crate::autograd::{CustomBackward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{BroadcastSpec, ReduceKind, Tensor};

/// Fixed shape constants used by some built-in operators.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OpConstants {
    pub k_sin: f64,
    pub k_chirp: f64,
    pub cut: f64,
}

impl Default for OpConstants {
    fn default() -> Self {
        Self {
            k_sin: PI,
            k_chirp: PI,
            cut: 10.0,
        }
    }
}

pub type NodalFn =
    dyn for<'t> Fn(&Var<'t>, &Var<'t>, &OpConstants) -> Result<Var<'t>> + Send + Sync;
pub type PoolFn = dyn for<'t> Fn(&Var<'t>) -> Result<Var<'t>> + Send + Sync;
pub type ActivationFn =
    dyn for<'t> Fn(&Var<'t>, &Var<'t>, &OpConstants) -> Result<Var<'t>> + Send + Sync;

/// Elementwise function of a weight element and an input element.
pub struct NodalOp {
    name: String,
    forward: Arc<NodalFn>,
}

/// Reduction over the trailing (patch) axis.
pub struct PoolOp {
    name: String,
    forward: Arc<PoolFn>,
}

/// Pointwise function of the pre-activation and the neuron bias.
pub struct ActivationOp {
    name: String,
    forward: Arc<ActivationFn>,
}

macro_rules! named_op {
    ($ty:ident) => {
        impl $ty {
            pub fn name(&self) -> &str {
                &self.name
            }
        }

        impl fmt::Debug for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($ty), self.name)
            }
        }
    };
}

named_op!(NodalOp);
named_op!(PoolOp);
named_op!(ActivationOp);

impl NodalOp {
    /// `forward(w, x, constants)` must be elementwise over the broadcast of
    /// `w` and `x`.
    pub fn new<F>(name: impl Into<String>, forward: F) -> Self
    where
        F: for<'t> Fn(&Var<'t>, &Var<'t>, &OpConstants) -> Result<Var<'t>> + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            forward: Arc::new(forward),
        }
    }

    /// A nodal operator whose gradient comes from a hand-written rule.
    /// The op receives `[w, x]`.
    pub fn custom(name: impl Into<String>, op: CustomBackward) -> Self {
        Self::new(name, move |w, x, _| Var::custom(&[w, x], &op))
    }
}

impl PoolOp {
    pub fn new<F>(name: impl Into<String>, forward: F) -> Self
    where
        F: for<'t> Fn(&Var<'t>) -> Result<Var<'t>> + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            forward: Arc::new(forward),
        }
    }

    /// `c * reduce(z, last axis)` with `c = 1` when unscaled and `c` equal to
    /// the patch length otherwise.
    pub fn reduction(name: impl Into<String>, kind: ReduceKind, scaled: bool) -> Self {
        Self::new(name, move |z| {
            let axis = z.shape().len().checked_sub(1).ok_or_else(|| {
                Error::ShapeMismatch("pool input must have a trailing patch axis".into())
            })?;
            let reduced = z.reduce(kind, axis)?;
            Ok(if scaled {
                reduced.scale(z.shape()[axis] as f64)
            } else {
                reduced
            })
        })
    }
}

impl ActivationOp {
    pub fn new<F>(name: impl Into<String>, forward: F) -> Self
    where
        F: for<'t> Fn(&Var<'t>, &Var<'t>, &OpConstants) -> Result<Var<'t>> + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            forward: Arc::new(forward),
        }
    }
}

/// A `(nodal, pool, activation)` triple and its position in the library.
#[derive(Clone, Debug)]
pub struct OperatorSet {
    pub nodal: Arc<NodalOp>,
    pub pool: Arc<PoolOp>,
    pub activation: Arc<ActivationOp>,
    pub index: usize,
}

impl OperatorSet {
    pub fn label(&self) -> String {
        format!(
            "({},{},{})",
            self.nodal.name, self.pool.name, self.activation.name
        )
    }
}

/// An operator of any kind, for [`OperatorSetLibrary::add_custom_operator`].
#[derive(Debug)]
pub enum CustomOperator {
    Nodal(NodalOp),
    Pool(PoolOp),
    Activation(ActivationOp),
}

#[derive(Clone, Debug, Default)]
pub struct OperatorSetLibrary {
    nodal: Vec<Arc<NodalOp>>,
    pool: Vec<Arc<PoolOp>>,
    activation: Vec<Arc<ActivationOp>>,
    sets: Vec<[usize; 3]>,
}

fn last_axis<'t>(z: &Var<'t>) -> usize {
    z.shape().len().saturating_sub(1)
}

/// The built-in library. Nodal: mul, cubic, sine, exp, sinh, chirp. Pool: sum,
/// median, max. Activation: tanh, lincut, then identity, whose sets are
/// appended after the 36 tanh/lincut sets.
pub fn register_builtin_library() -> OperatorSetLibrary {
    let nodal = vec![
        NodalOp::new("mul", |w, x, _| w.mul(x)),
        NodalOp::new("cubic", |w, x, _| w.mul(&x.powi(3))),
        NodalOp::new("sine", |w, x, k| Ok(w.mul(x)?.scale(k.k_sin).sin())),
        NodalOp::new("exp", |w, x, _| Ok(w.mul(x)?.exp().add_scalar(-1.0))),
        NodalOp::new("sinh", |w, x, _| Ok(w.mul(x)?.sinh())),
        NodalOp::new("chirp", |w, x, k| {
            Ok(w.mul(&x.square())?.scale(k.k_chirp).sin())
        }),
    ];
    let pool = vec![
        PoolOp::reduction("sum", ReduceKind::Sum, false),
        PoolOp::reduction("median", ReduceKind::Median, true),
        PoolOp::reduction("max", ReduceKind::Max, true),
    ];
    let activation = vec![
        ActivationOp::new("tanh", |x, b, _| Ok(x.sub(b)?.tanh())),
        ActivationOp::new("lincut", |x, b, k| {
            Ok(x.sub(b)?.scale(1.0 / k.cut).clamp(-1.0, 1.0))
        }),
    ];
    let mut lib = OperatorSetLibrary::new(nodal, pool, activation)
        .expect("built-in operator names are unique");
    lib.add_activation(ActivationOp::new("identity", |x, b, _| x.sub(b)))
        .expect("identity is not yet registered");
    lib
}

fn check_unique<T>(ops: &[Arc<T>], name: impl Fn(&T) -> &str) -> Result<()> {
    for (i, a) in ops.iter().enumerate() {
        if ops[..i].iter().any(|b| name(b) == name(a)) {
            return Err(Error::DuplicateName(name(a).to_string()));
        }
    }
    Ok(())
}

impl OperatorSetLibrary {
    pub fn new(
        nodal: Vec<NodalOp>,
        pool: Vec<PoolOp>,
        activation: Vec<ActivationOp>,
    ) -> Result<Self> {
        let nodal: Vec<_> = nodal.into_iter().map(Arc::new).collect();
        let pool: Vec<_> = pool.into_iter().map(Arc::new).collect();
        let activation: Vec<_> = activation.into_iter().map(Arc::new).collect();
        check_unique(&nodal, NodalOp::name)?;
        check_unique(&pool, PoolOp::name)?;
        check_unique(&activation, ActivationOp::name)?;
        for p in &pool {
            check_pool_contract(p)?;
        }
        let mut sets = Vec::new();
        for n in 0..nodal.len() {
            for p in 0..pool.len() {
                for a in 0..activation.len() {
                    sets.push([n, p, a]);
                }
            }
        }
        Ok(Self {
            nodal,
            pool,
            activation,
            sets,
        })
    }

    /// Number of enumerated operator sets.
    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn nodal_ops(&self) -> &[Arc<NodalOp>] {
        &self.nodal
    }

    pub fn pool_ops(&self) -> &[Arc<PoolOp>] {
        &self.pool
    }

    pub fn activation_ops(&self) -> &[Arc<ActivationOp>] {
        &self.activation
    }

    pub fn set(&self, index: usize) -> Result<OperatorSet> {
        let [n, p, a] = *self.sets.get(index).ok_or(Error::UnknownOperatorSet {
            index,
            len: self.sets.len(),
        })?;
        Ok(OperatorSet {
            nodal: Arc::clone(&self.nodal[n]),
            pool: Arc::clone(&self.pool[p]),
            activation: Arc::clone(&self.activation[a]),
            index,
        })
    }

    /// Operator positions `(nodal, pool, activation)` of set `index`.
    pub fn decode(&self, index: usize) -> Option<(usize, usize, usize)> {
        self.sets.get(index).map(|&[n, p, a]| (n, p, a))
    }

    pub fn encode(&self, nodal: usize, pool: usize, activation: usize) -> Option<usize> {
        self.sets.iter().position(|&s| s == [nodal, pool, activation])
    }

    /// Index of the set named `(nodal, pool, activation)`.
    pub fn find(&self, nodal: &str, pool: &str, activation: &str) -> Option<usize> {
        let n = self.nodal.iter().position(|o| o.name == nodal)?;
        let p = self.pool.iter().position(|o| o.name == pool)?;
        let a = self.activation.iter().position(|o| o.name == activation)?;
        self.encode(n, p, a)
    }

    pub fn add_custom_operator(&mut self, op: CustomOperator) -> Result<()> {
        match op {
            CustomOperator::Nodal(op) => self.add_nodal(op),
            CustomOperator::Pool(op) => self.add_pool(op),
            CustomOperator::Activation(op) => self.add_activation(op),
        }
    }

    pub fn add_nodal(&mut self, op: NodalOp) -> Result<()> {
        if self.nodal.iter().any(|o| o.name == op.name) {
            return Err(Error::DuplicateName(op.name));
        }
        self.nodal.push(Arc::new(op));
        let n = self.nodal.len() - 1;
        for p in 0..self.pool.len() {
            for a in 0..self.activation.len() {
                self.sets.push([n, p, a]);
            }
        }
        Ok(())
    }

    /// Registers a pool operator after checking that it collapses exactly the
    /// trailing axis.
    pub fn add_pool(&mut self, op: PoolOp) -> Result<()> {
        if self.pool.iter().any(|o| o.name == op.name) {
            return Err(Error::DuplicateName(op.name));
        }
        check_pool_contract(&op)?;
        self.pool.push(Arc::new(op));
        let p = self.pool.len() - 1;
        for n in 0..self.nodal.len() {
            for a in 0..self.activation.len() {
                self.sets.push([n, p, a]);
            }
        }
        Ok(())
    }

    pub fn add_activation(&mut self, op: ActivationOp) -> Result<()> {
        if self.activation.iter().any(|o| o.name == op.name) {
            return Err(Error::DuplicateName(op.name));
        }
        self.activation.push(Arc::new(op));
        let a = self.activation.len() - 1;
        for n in 0..self.nodal.len() {
            for p in 0..self.pool.len() {
                self.sets.push([n, p, a]);
            }
        }
        Ok(())
    }
}

fn check_pool_contract(op: &PoolOp) -> Result<()> {
    let tape = Tape::new();
    let probe = tape.constant(Tensor::from_fn(&[2, 3, 5], |i| (i as f64 * 0.37).sin()));
    let out = (op.forward)(&probe)?;
    if out.shape() != [2, 3] {
        return Err(Error::ShapeContractViolation(format!(
            "pool '{}' maps [2, 3, 5] to {:?}; it must reduce the trailing axis",
            op.name,
            out.shape()
        )));
    }
    Ok(())
}

/// Applies a nodal operator to weights and patches. The result must have the
/// broadcast shape of both and be finite.
pub fn evaluate_nodal<'t>(
    op: &NodalOp,
    w: &Var<'t>,
    y: &Var<'t>,
    constants: &OpConstants,
) -> Result<Var<'t>> {
    let expected = BroadcastSpec::new(w.shape(), y.shape())?.result;
    let z = (op.forward)(w, y, constants)?;
    if z.shape() != expected.as_slice() {
        return Err(Error::ShapeContractViolation(format!(
            "nodal '{}' produced {:?}, expected {:?}",
            op.name,
            z.shape(),
            expected
        )));
    }
    if !z.value().is_finite() {
        return Err(Error::NonFiniteValue(format!("nodal operator '{}'", op.name)));
    }
    Ok(z)
}

/// Pools the trailing patch axis away.
pub fn evaluate_pool<'t>(op: &PoolOp, z: &Var<'t>) -> Result<Var<'t>> {
    if z.shape().last().copied().unwrap_or(0) == 0 {
        return Err(Error::EmptyAxis {
            axis: last_axis(z),
            shape: z.shape().to_vec(),
        });
    }
    let out = (op.forward)(z)?;
    if out.shape() != &z.shape()[..z.shape().len() - 1] {
        return Err(Error::ShapeContractViolation(format!(
            "pool '{}' produced {:?} from {:?}",
            op.name,
            out.shape(),
            z.shape()
        )));
    }
    Ok(out)
}

pub fn evaluate_activation<'t>(
    op: &ActivationOp,
    x: &Var<'t>,
    b: &Var<'t>,
    constants: &OpConstants,
) -> Result<Var<'t>> {
    let y = (op.forward)(x, b, constants)?;
    if y.shape() != x.shape() {
        return Err(Error::ShapeContractViolation(format!(
            "activation '{}' changed shape {:?} to {:?}",
            op.name,
            x.shape(),
            y.shape()
        )));
    }
    Ok(y)
}
