//! First-order optimizers: SGD with momentum and Adam.

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SUPPORTED: [&str; 2] = ["sgd", "adam"];

/// Optimizer name plus hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSettings {
    pub name: String,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplier applied to `lr` by [`OptimizerState::decay`]; 1 disables it.
    pub lr_decay: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            name: "adam".into(),
            lr: 1e-3,
            momentum: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_decay: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub lr: f64,
    pub momentum: f64,
    pub velocity: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum OptimizerState {
    Sgd(SgdState),
    Adam(AdamState),
}

fn check(params: &[Tensor], grads: &[Tensor], slots: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() || params.len() != slots.len() {
        return Err(Error::SizeMismatch(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            slots.len()
        )));
    }
    for (i, ((p, g), s)) in params.iter().zip(grads).zip(slots).enumerate() {
        if p.shape() != g.shape() || p.shape() != s.shape() {
            return Err(Error::ShapeMismatch(format!(
                "parameter {i}: shape {:?}, gradient {:?}, slot {:?}",
                p.shape(),
                g.shape(),
                s.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(i));
        }
    }
    Ok(())
}

/// `v <- momentum * v + g; p <- p - lr * v`.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], state: &mut SgdState) -> Result<()> {
    check(params, grads, &state.velocity)?;
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        for ((p, g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *v = state.momentum * *v + g;
            *p -= state.lr * *v;
        }
    }
    Ok(())
}

/// Adam with bias-corrected moments.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    check(params, grads, &state.m)?;
    check(params, grads, &state.v)?;
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let cells = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
        for (((p, &g), m), v) in cells {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

impl OptimizerState {
    /// Fresh state with zeroed slots shaped like `params`.
    pub fn new(settings: &OptimizerSettings, params: &[Tensor]) -> Result<Self> {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        match settings.name.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Self::Sgd(SgdState {
                lr: settings.lr,
                momentum: settings.momentum,
                velocity: zeros(),
            })),
            "adam" => Ok(Self::Adam(AdamState {
                lr: settings.lr,
                beta1: settings.beta1,
                beta2: settings.beta2,
                eps: settings.eps,
                step: 0,
                m: zeros(),
                v: zeros(),
            })),
            _ => Err(Error::UnknownOptimizer(settings.name.clone())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Sgd(_) => "sgd",
            Self::Adam(_) => "adam",
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            Self::Sgd(s) => s.lr,
            Self::Adam(s) => s.lr,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        match self {
            Self::Sgd(s) => sgd_step(params, grads, s),
            Self::Adam(s) => adam_step(params, grads, s),
        }
    }

    /// Multiplies the learning rate by `factor`.
    pub fn decay(&mut self, factor: f64) {
        match self {
            Self::Sgd(s) => s.lr *= factor,
            Self::Adam(s) => s.lr *= factor,
        }
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        a.put_str("kind", self.name());
        let slots = |a: &mut Archive, key: &str, ts: &[Tensor]| {
            a.put_u64s(format!("{key}/count"), &[ts.len() as u64]);
            for (i, t) in ts.iter().enumerate() {
                a.put_tensor(format!("{key}/{i}"), t);
            }
        };
        match self {
            Self::Sgd(s) => {
                a.put_f64s("hyper", &[s.lr, s.momentum]);
                slots(&mut a, "velocity", &s.velocity);
            }
            Self::Adam(s) => {
                a.put_f64s("hyper", &[s.lr, s.beta1, s.beta2, s.eps]);
                a.put_u64s("step", &[s.step]);
                slots(&mut a, "m", &s.m);
                slots(&mut a, "v", &s.v);
            }
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let slots = |key: &str| -> Result<Vec<Tensor>> {
            let n = a.u64(&format!("{key}/count"))?;
            (0..n).map(|i| a.tensor(&format!("{key}/{i}")).cloned()).collect()
        };
        let hyper = a.f64s("hyper")?;
        let bad = || Error::CorruptState(format!("optimizer hyperparameters {hyper:?}"));
        match a.str("kind")? {
            "sgd" => {
                let [lr, momentum] = *hyper else { return Err(bad()) };
                Ok(Self::Sgd(SgdState {
                    lr,
                    momentum,
                    velocity: slots("velocity")?,
                }))
            }
            "adam" => {
                let [lr, beta1, beta2, eps] = *hyper else { return Err(bad()) };
                let (m, v) = (slots("m")?, slots("v")?);
                if m.len() != v.len() || m.iter().zip(&v).any(|(m, v)| m.shape() != v.shape()) {
                    return Err(Error::CorruptState("Adam moment shapes disagree".into()));
                }
                Ok(Self::Adam(AdamState {
                    lr,
                    beta1,
                    beta2,
                    eps,
                    step: a.u64("step")?,
                    m,
                    v,
                }))
            }
            other => Err(Error::CorruptState(format!("unknown optimizer kind {other:?}"))),
        }
    }
}

pub fn serialize_state(state: &OptimizerState) -> Vec<u8> {
    state.to_archive().to_bytes()
}

pub fn deserialize_state(bytes: &[u8]) -> Result<OptimizerState> {
    OptimizerState::from_archive(&Archive::from_bytes(bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    fn sgd(lr: f64, momentum: f64, n: usize) -> SgdState {
        SgdState {
            lr,
            momentum,
            velocity: vec![s(0.0); n],
        }
    }

    fn adam(lr: f64, params: &[Tensor]) -> OptimizerState {
        let settings = OptimizerSettings {
            lr,
            ..Default::default()
        };
        OptimizerState::new(&settings, params).unwrap()
    }

    #[test]
    fn plain_sgd_step() {
        let mut p = vec![s(0.0)];
        sgd_step(&mut p, &[s(2.0)], &mut sgd(1.0, 0.0, 1)).unwrap();
        assert_eq!(p[0].item(), -2.0);
    }

    #[test]
    fn momentum_recurrence() {
        let mut p = vec![s(0.0)];
        let mut st = sgd(0.1, 0.9, 1);
        sgd_step(&mut p, &[s(1.0)], &mut st).unwrap();
        assert_eq!(st.velocity[0].item(), 1.0);
        assert!((p[0].item() + 0.1).abs() < 1e-15);
        sgd_step(&mut p, &[s(1.0)], &mut st).unwrap();
        assert!((st.velocity[0].item() - 1.9).abs() < 1e-15);
        assert!((p[0].item() + 0.29).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let p0 = vec![Tensor::new(vec![2], vec![0.3, -0.7]).unwrap()];
        let g = vec![Tensor::zeros(&[2])];
        let mut p = p0.clone();
        sgd_step(&mut p, &g, &mut SgdState { lr: 0.5, momentum: 0.9, velocity: g.clone() }).unwrap();
        assert_eq!(p, p0);
        let mut st = adam(0.5, &p);
        st.step(&mut p, &g).unwrap();
        assert_eq!(p, p0);
    }

    #[test]
    fn adam_first_step() {
        let mut p = vec![s(0.0)];
        let mut st = adam(0.001, &p);
        st.step(&mut p, &[s(1.0)]).unwrap();
        let expect = -0.001 / (1.0 + 1e-8);
        assert!((p[0].item() - expect).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let p0 = vec![s(1.0), s(2.0)];
        let mut p = p0.clone();
        let mut st = adam(0.1, &p);
        let err = st.step(&mut p, &[s(0.5), s(f64::NAN)]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(1)));
        assert_eq!(p, p0);
        assert_eq!(st, adam(0.1, &p0));
    }

    #[test]
    fn unknown_optimizer_lists_supported() {
        let settings = OptimizerSettings {
            name: "cgd".into(),
            ..Default::default()
        };
        let err = OptimizerState::new(&settings, &[]).unwrap_err();
        assert!(matches!(&err, Error::UnknownOptimizer(n) if n == "cgd"));
        let msg = err.to_string();
        assert!(msg.contains("sgd") && msg.contains("adam"), "{msg}");
    }

    #[test]
    fn serialization_round_trip() {
        let mut p = vec![Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap(), s(0.0)];
        let g = vec![Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 0.0]).unwrap(), s(3.0)];
        for name in SUPPORTED {
            let settings = OptimizerSettings {
                name: name.into(),
                momentum: 0.9,
                ..Default::default()
            };
            let fresh = OptimizerState::new(&settings, &p).unwrap();
            assert_eq!(deserialize_state(&serialize_state(&fresh)).unwrap(), fresh);
            let mut st = fresh.clone();
            st.step(&mut p, &g).unwrap();
            let back = deserialize_state(&serialize_state(&st)).unwrap();
            assert_eq!(back, st);
            let bytes = serialize_state(&st);
            assert!(matches!(deserialize_state(&bytes[..bytes.len() - 3]), Err(Error::CorruptState(_))));
        }
    }

    #[test]
    fn decay_hook() {
        let mut st = adam(0.1, &[]);
        st.decay(0.5);
        assert_eq!(st.lr(), 0.05);
    }

    proptest! {
        #[test]
        fn zero_lr_changes_nothing(vals in prop::collection::vec(-10.0f64..10.0, 1..8), name in 0usize..2) {
            let p0 = vec![Tensor::new(vec![vals.len()], vals.clone()).unwrap()];
            let g = vec![Tensor::new(vec![vals.len()], vals.iter().map(|v| v * 3.0 - 1.0).collect()).unwrap()];
            let settings = OptimizerSettings { name: SUPPORTED[name].into(), lr: 0.0, momentum: 0.5, ..Default::default() };
            let mut st = OptimizerState::new(&settings, &p0).unwrap();
            let mut p = p0.clone();
            st.step(&mut p, &g).unwrap();
            prop_assert_eq!(p, p0);
        }

        #[test]
        fn plain_sgd_is_exact(p in -10.0f64..10.0, g in -10.0f64..10.0, lr in 0.0f64..2.0) {
            let mut ps = vec![s(p)];
            sgd_step(&mut ps, &[s(g)], &mut sgd(lr, 0.0, 1)).unwrap();
            prop_assert_eq!(ps[0].item(), p - lr * g);
        }

        #[test]
        fn adam_first_step_is_scale_free(g in prop_oneof![-1e3f64..-1e-3, 1e-3f64..1e3]) {
            let mut p = vec![s(0.0)];
            let mut st = adam(0.01, &p);
            st.step(&mut p, &[s(g)]).unwrap();
            let dp = p[0].item();
            prop_assert_eq!(dp.signum(), -g.signum());
            prop_assert!((dp.abs() - 0.01).abs() < 1e-7);
        }
    }
}
