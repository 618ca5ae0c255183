//! Operational neurons (blocks), layers (tiers) and networks.
//!
//! A block computes, for unfolded input patches `Y` of shape `[C, P, Q]`,
//!
//! ```text
//! Z[c, p, q] = nodal(w[c, q], Y[c, p, q])
//! x[p]       = sum_c pool_q(Z[c, p, q])
//! out        = activation(reshape(x, [M, N]), b)
//! ```
//!
//! A tier unfolds its input once, evaluates all blocks against the shared
//! patches, stacks the block outputs as channels and resamples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{gradcheck_with, CheckStatus, GradcheckOptions, GradcheckReport, Tape, Var};
use crate::error::{Error, Result};
use crate::oplib::{
    evaluate_activation, evaluate_nodal, evaluate_pool, OpConstants, OperatorSet,
    OperatorSetLibrary,
};
use crate::par::{map_indexed, Parallelism};
use crate::patchops::{resample_var, resampled_size, unfold_var, UnfoldPlan};
use crate::tensor::{ReduceKind, Tensor};

/// Weight initialization. Biases always start at zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitScheme {
    /// i.i.d. `U(-bound, bound)`.
    Uniform { bound: f64 },
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` with `fan_in = C_in * m * n`.
    FanInUniform,
}

impl Default for InitScheme {
    fn default() -> Self {
        InitScheme::Uniform { bound: 0.1 }
    }
}

#[derive(Clone, Debug)]
pub struct OpBlock {
    /// `[C_in, m, n]`.
    pub weights: Tensor,
    pub bias: f64,
    pub op_set: OperatorSet,
}

#[derive(Clone, Debug)]
pub struct OpTier {
    pub blocks: Vec<OpBlock>,
    pub in_channels: usize,
    pub kernel: (usize, usize),
    pub sampling: i32,
}

/// Construction parameters for one tier.
#[derive(Clone, Debug, PartialEq)]
pub struct TierSpec {
    pub neurons: usize,
    pub kernel: (usize, usize),
    /// Either one set index for every neuron or one per neuron.
    pub operators: Vec<usize>,
    pub sampling: i32,
}

#[derive(Clone, Debug)]
pub struct OpNetwork {
    pub tiers: Vec<OpTier>,
    pub in_channels: usize,
    pub constants: OpConstants,
    pub init: InitScheme,
}

/// Forward pass of a single block on unfolded patches `yc: [C_in, P, Q]`,
/// producing the `[out_h, out_w]` output plane of the plan.
pub fn block_forward<'t>(
    block: &OpBlock,
    weights: &Var<'t>,
    bias: &Var<'t>,
    yc: &Var<'t>,
    plan: &UnfoldPlan,
    constants: &OpConstants,
) -> Result<Var<'t>> {
    let [c, p, q] = *yc.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "block expects unfolded patches [C, P, Q], got {:?}",
            yc.shape()
        )));
    };
    if weights.shape() != [c, plan.kernel_size().0, plan.kernel_size().1] || q != plan.patch_len() {
        return Err(Error::ShapeMismatch(format!(
            "weights {:?} do not match patches {:?}",
            weights.shape(),
            yc.shape()
        )));
    }
    let w = weights.reshape(&[c, 1, q])?;
    let z = evaluate_nodal(&block.op_set.nodal, &w, yc, constants)?;
    let pooled = evaluate_pool(&block.op_set.pool, &z)?;
    let x = pooled.reduce(ReduceKind::Sum, 0)?;
    debug_assert_eq!(x.shape(), [p]);
    let (oh, ow) = plan.output_size();
    let x = x.reshape(&[oh, ow])?;
    evaluate_activation(&block.op_set.activation, &x, bias, constants)
}

impl OpTier {
    pub fn out_channels(&self) -> usize {
        self.blocks.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks.len() * (self.in_channels * self.kernel.0 * self.kernel.1 + 1)
    }

    pub fn plan(&self, h: usize, w: usize) -> Result<UnfoldPlan> {
        UnfoldPlan::same(h, w, self.kernel.0, self.kernel.1)
    }

    /// `x: [C_in, M, N] -> [K, M', N']`. `params` holds (weights, bias) per block.
    pub fn forward<'t>(
        &self,
        params: &[Var<'t>],
        x: &Var<'t>,
        constants: &OpConstants,
    ) -> Result<Var<'t>> {
        let [c, h, w] = *x.shape() else {
            return Err(Error::ShapeMismatch(format!("tier expects [C, M, N], got {:?}", x.shape())));
        };
        if c != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "tier expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let plan = self.plan(h, w)?;
        let patches = unfold_var(x, &plan)?;
        let outputs = self
            .blocks
            .iter()
            .zip(params.chunks(2))
            .map(|(block, p)| block_forward(block, &p[0], &p[1], &patches, &plan, constants))
            .collect::<Result<Vec<_>>>()?;
        resample_var(&Var::stack(&outputs)?, self.sampling)
    }
}

impl OpNetwork {
    pub fn new(
        in_channels: usize,
        specs: &[TierSpec],
        lib: &OperatorSetLibrary,
        constants: OpConstants,
        init: InitScheme,
        seed: u64,
    ) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::ShapeMismatch("a network needs at least one tier".into()));
        }
        let mut tiers = Vec::with_capacity(specs.len());
        let mut channels = in_channels;
        for (t, spec) in specs.iter().enumerate() {
            let (m, n) = spec.kernel;
            if m % 2 == 0 || n % 2 == 0 {
                return Err(Error::EvenKernel(m, n));
            }
            if spec.sampling == 0 {
                return Err(Error::ZeroFactor);
            }
            if spec.neurons == 0 {
                return Err(Error::ShapeMismatch(format!("tier {t} has no neurons")));
            }
            let ops: Vec<usize> = match spec.operators.as_slice() {
                [one] => vec![*one; spec.neurons],
                many if many.len() == spec.neurons => many.to_vec(),
                many => {
                    return Err(Error::ShapeMismatch(format!(
                        "tier {t}: {} operator sets for {} neurons",
                        many.len(),
                        spec.neurons
                    )))
                }
            };
            let blocks = ops
                .into_iter()
                .map(|i| {
                    Ok(OpBlock {
                        weights: Tensor::zeros(&[channels, m, n]),
                        bias: 0.0,
                        op_set: lib.set(i)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            tiers.push(OpTier {
                blocks,
                in_channels: channels,
                kernel: (m, n),
                sampling: spec.sampling,
            });
            channels = spec.neurons;
        }
        let mut net = Self {
            tiers,
            in_channels,
            constants,
            init,
        };
        net.reset_parameters(seed);
        Ok(net)
    }

    pub fn out_channels(&self) -> usize {
        self.tiers.last().map_or(self.in_channels, OpTier::out_channels)
    }

    pub fn parameter_count(&self) -> usize {
        self.tiers.iter().map(OpTier::parameter_count).sum()
    }

    /// Reinitializes every weight from a generator seeded with `seed`.
    pub fn reset_parameters(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for tier in &mut self.tiers {
            let bound = match self.init {
                InitScheme::Uniform { bound } => bound,
                InitScheme::FanInUniform => {
                    1.0 / ((tier.in_channels * tier.kernel.0 * tier.kernel.1) as f64).sqrt()
                }
            };
            for block in &mut tier.blocks {
                for w in block.weights.data_mut() {
                    *w = rng.gen_range(-bound..=bound);
                }
                block.bias = 0.0;
            }
        }
    }

    /// Parameter tensors in canonical order: per tier, per block, weights
    /// then bias (as a `[1]` tensor).
    pub fn parameters(&self) -> Vec<Tensor> {
        self.blocks()
            .flat_map(|(_, _, b)| [b.weights.clone(), Tensor::scalar(b.bias)])
            .collect()
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.blocks()
            .flat_map(|(t, k, _)| {
                [
                    format!("param/{t}/{k}/weights"),
                    format!("param/{t}/{k}/bias"),
                ]
            })
            .collect()
    }

    pub fn set_parameters(&mut self, params: &[Tensor]) -> Result<()> {
        let count = self.blocks().count();
        if params.len() != 2 * count {
            return Err(Error::SizeMismatch(format!(
                "network has {} parameter tensors, got {}",
                2 * count,
                params.len()
            )));
        }
        let mut it = params.iter();
        for tier in &mut self.tiers {
            for block in &mut tier.blocks {
                let (w, b) = (it.next().unwrap(), it.next().unwrap());
                if w.shape() != block.weights.shape() || b.numel() != 1 {
                    return Err(Error::SizeMismatch(format!(
                        "parameter shape {:?} does not match {:?}",
                        w.shape(),
                        block.weights.shape()
                    )));
                }
                block.weights = w.clone();
                block.bias = b.item();
            }
        }
        Ok(())
    }

    fn blocks(&self) -> impl Iterator<Item = (usize, usize, &OpBlock)> {
        self.tiers
            .iter()
            .enumerate()
            .flat_map(|(t, tier)| tier.blocks.iter().enumerate().map(move |(k, b)| (t, k, b)))
    }

    /// Parameters as variables on `tape`; tracked leaves when `track` is set.
    pub fn bind<'t>(&self, tape: &'t Tape, track: bool) -> Vec<Var<'t>> {
        self.parameters()
            .into_iter()
            .map(|p| if track { tape.leaf(p) } else { tape.constant(p) })
            .collect()
    }

    /// Output shape `[C, M, N]` of every tier for an `h x w` input.
    pub fn output_shapes(&self, h: usize, w: usize) -> Result<Vec<[usize; 3]>> {
        let (mut h, mut w) = (h, w);
        self.tiers
            .iter()
            .enumerate()
            .map(|(t, tier)| {
                (h, w) = resampled_size(h, w, tier.sampling).map_err(|e| match e {
                    Error::IndivisibleExtent { extent, factor, .. } => Error::IndivisibleExtent {
                        extent,
                        factor,
                        tier: Some(t),
                    },
                    e => e,
                })?;
                Ok([tier.out_channels(), h, w])
            })
            .collect()
    }

    /// Forward pass of one sample `[C_in, M, N]` with bound parameters.
    pub fn forward_with<'t>(&self, params: &[Var<'t>], x: &Var<'t>) -> Result<Var<'t>> {
        let [c, h, w] = *x.shape() else {
            return Err(Error::ShapeMismatch(format!(
                "network expects [C, M, N], got {:?}",
                x.shape()
            )));
        };
        if c != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "network expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        self.output_shapes(h, w)?;
        let mut offset = 0;
        let mut y = x.clone();
        for tier in &self.tiers {
            let n = 2 * tier.blocks.len();
            y = tier.forward(&params[offset..offset + n], &y, &self.constants)?;
            offset += n;
        }
        Ok(y)
    }

    /// Untracked forward pass of one sample.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let params = self.bind(&tape, false);
        let y = self.forward_with(&params, &tape.constant(x.clone()))?;
        Ok(y.value().clone())
    }

    /// `[B, C_in, M, N] -> [B, K, M', N']`, mapping samples independently.
    pub fn forward_batch(&self, x: &Tensor, mode: Parallelism) -> Result<Tensor> {
        if x.rank() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "batch must be [B, C, M, N], got {:?}",
                x.shape()
            )));
        }
        let samples: Vec<Tensor> = (0..x.shape()[0]).map(|i| x.index_axis0(i)).collect();
        let outs = map_indexed(&samples, mode, |_, s| self.forward(s))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&outs)
    }

    /// Human-readable summary of the architecture for an `h x w` input.
    pub fn describe(&self, h: usize, w: usize) -> Result<String> {
        use std::fmt::Write;
        let shapes = self.output_shapes(h, w)?;
        let mut out = String::new();
        writeln!(out, "input: {}x{}x{}", self.in_channels, h, w).unwrap();
        for (t, (tier, shape)) in self.tiers.iter().zip(&shapes).enumerate() {
            let mut sets: Vec<String> = tier.blocks.iter().map(|b| b.op_set.index.to_string()).collect();
            sets.dedup();
            writeln!(
                out,
                "tier {t}: neurons={} kernel={}x{} sampling={} operators=[{}] params={} output={}x{}x{}",
                tier.blocks.len(),
                tier.kernel.0,
                tier.kernel.1,
                tier.sampling,
                sets.join(","),
                tier.parameter_count(),
                shape[0],
                shape[1],
                shape[2]
            )
            .unwrap();
        }
        writeln!(out, "parameters: {}", self.parameter_count()).unwrap();
        Ok(out)
    }
}

/// Finite-difference check of the loss gradient of a two-tier network on a
/// 6x6 input. The hidden tier (3x3) has one neuron per entry of `hidden`, or
/// two neurons when a single set is given; the output tier is one 3x3
/// (mul, sum, identity) neuron. Draws that land on a max/median tie are
/// redrawn up to `attempts` times; the last report is returned.
pub fn gradcheck_hidden_tier(
    lib: &OperatorSetLibrary,
    hidden: &[usize],
    in_channels: usize,
    seed: u64,
    attempts: usize,
    opts: GradcheckOptions,
) -> Result<GradcheckReport> {
    let out_set = lib
        .find("mul", "sum", "identity")
        .ok_or_else(|| Error::ShapeContractViolation("library lacks (mul, sum, identity)".into()))?;
    let neurons = if hidden.len() == 1 { 2 } else { hidden.len() };
    let specs = [
        TierSpec {
            neurons,
            kernel: (3, 3),
            operators: hidden.to_vec(),
            sampling: 1,
        },
        TierSpec {
            neurons: in_channels,
            kernel: (3, 3),
            operators: vec![out_set],
            sampling: 1,
        },
    ];
    let net = OpNetwork::new(in_channels, &specs, lib, OpConstants::default(), InitScheme::default(), seed)?;
    let mut report = None;
    for attempt in 0..attempts.max(1) as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7919).wrapping_add(attempt));
        // Pixels stay clear of the exact zeros contributed by padding.
        let x = Tensor::from_fn(&[in_channels, 6, 6], |_| {
            let m: f64 = rng.gen_range(0.1..0.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        });
        let target = Tensor::from_fn(&[in_channels, 6, 6], |_| rng.gen_range(-0.5..0.5));
        let params: Vec<Tensor> = net
            .parameters()
            .iter()
            .map(|p| Tensor::from_fn(p.shape(), |_| rng.gen_range(-0.5..0.5)))
            .collect();
        let r = gradcheck_with(
            |tape, v| {
                let x = tape.constant(x.clone());
                let t = tape.constant(target.clone());
                Ok(net.forward_with(v, &x)?.sub(&t)?.square().mean_all())
            },
            &params,
            opts,
        )?;
        let done = r.status != CheckStatus::TieDetected;
        report = Some(r);
        if done {
            break;
        }
    }
    Ok(report.unwrap())
}
