use crate::autodiff::{ParamSet, Tensor};
use crate::error::{Error, Result};

pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        AdamConfig {
            lr,
            beta1,
            beta2,
            eps: ADAM_EPSILON,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Contract(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Contract(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Contract(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// First and second moment estimates for every tensor of one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    /// Zero moments shaped like `params`.
    pub fn new(params: &ParamSet) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// Rebuilds a state from stored moments. Shapes are checked against
    /// `params`.
    pub fn from_parts(params: &ParamSet, m: Vec<Tensor>, v: Vec<Tensor>, t: u64) -> Result<Self> {
        let state = AdamState { m, v, t };
        state.check(params)?;
        if state.v.iter().flat_map(|v| v.data()).any(|x| !(*x >= 0.0)) {
            return Err(Error::Contract("second moment has negative entries".into()));
        }
        Ok(state)
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn m(&self) -> &[Tensor] {
        &self.m
    }

    pub fn v(&self) -> &[Tensor] {
        &self.v
    }

    fn check(&self, params: &ParamSet) -> Result<()> {
        if self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer state tracks {} tensors, parameter set has {}",
                self.m.len(),
                params.len()
            )));
        }
        for ((p, m), v) in params.tensors().iter().zip(&self.m).zip(&self.v) {
            if p.shape() != m.shape() || p.shape() != v.shape() {
                return Err(Error::shape("adam_step", p.shape(), m.shape()));
            }
        }
        Ok(())
    }
}

/// One ADAM update of every parameter from its accumulated gradient.
/// Tensors that never received a gradient are treated as having a zero
/// gradient; their moments still decay.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    state.check(params)?;
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, m), v) in params.tensors_mut().iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grad = p.grad().map(<[f64]>::to_vec);
        let n = p.numel();
        let theta = p.data_mut();
        let (m, v) = (m.data_mut(), v.data_mut());
        for i in 0..n {
            let g = grad.as_ref().map_or(0.0, |g| g[i]);
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            theta[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
