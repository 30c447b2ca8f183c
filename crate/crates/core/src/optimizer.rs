//! Update rules, learning-rate schedules and the parameter EMA.
//!
//! Every worker runs the same optimizer on the same averaged gradient, so
//! all of this must be bit-for-bit deterministic.

use crate::numerics::GradTensor;

#[derive(Debug, thiserror::Error)]
pub enum OptimizerError {
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Update rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Rule {
    Vanilla,
    /// Heavy-ball momentum, `v <- mu v + g; w <- w - lr v`.
    Momentum { mu: f32 },
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

impl Rule {
    pub fn momentum() -> Self {
        Rule::Momentum { mu: 0.9 }
    }

    pub fn adam() -> Self {
        Rule::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Learning-rate schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant { base: f64 },
    /// `base * (1 - min(t, max_iter) / max_iter)^power`
    Polynomial { base: f64, power: f64, max_iter: u64 },
    /// `base * factor^floor(t / step)`
    Staircase { base: f64, factor: f64, step: u64 },
}

impl LrSchedule {
    pub fn rate(&self, t: u64) -> f64 {
        match *self {
            LrSchedule::Constant { base } => base,
            LrSchedule::Polynomial {
                base,
                power,
                max_iter,
            } => {
                if max_iter == 0 {
                    return 0.0;
                }
                let frac = t.min(max_iter) as f64 / max_iter as f64;
                base * (1.0 - frac).powf(power)
            }
            LrSchedule::Staircase { base, factor, step } => {
                base * factor.powi((t / step.max(1)) as i32)
            }
        }
    }
}

/// Per-worker optimizer buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    rule: Rule,
    first: Vec<GradTensor>,
    second: Vec<GradTensor>,
    step: u64,
}

impl OptimizerState {
    pub fn new(rule: Rule) -> Self {
        Self {
            rule,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }

    pub fn rule(&self) -> Rule {
        self.rule
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Momentum velocity or Adam first moment.
    pub fn first_moments(&self) -> &[GradTensor] {
        &self.first
    }

    /// Applies one update in place. Weight decay is added to the gradient
    /// before the rule sees it.
    pub fn apply(
        &mut self,
        params: &mut [GradTensor],
        grads: &[GradTensor],
        rate: f64,
        weight_decay: f32,
    ) -> Result<(), OptimizerError> {
        check_shapes(params, grads)?;
        if self.first.is_empty() {
            self.first = params.iter().map(GradTensor::zeros_like).collect();
            if matches!(self.rule, Rule::Adam { .. }) {
                self.second = params.iter().map(GradTensor::zeros_like).collect();
            }
        } else {
            check_shapes(params, &self.first)?;
        }
        self.step += 1;
        let lr = rate as f32;

        match self.rule {
            Rule::Vanilla => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, &d) in p.values_mut().iter_mut().zip(g.values()) {
                        *w -= lr * (d + weight_decay * *w);
                    }
                }
            }
            Rule::Momentum { mu } => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(self.first.iter_mut()) {
                    for ((w, &d), v) in p.values_mut().iter_mut().zip(g.values()).zip(v.values_mut()) {
                        *v = mu * *v + (d + weight_decay * *w);
                        *w -= lr * *v;
                    }
                }
            }
            Rule::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - (beta1 as f64).powi(self.step as i32);
                let c2 = 1.0 - (beta2 as f64).powi(self.step as i32);
                let (c1, c2) = (c1 as f32, c2 as f32);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.first.iter_mut())
                    .zip(self.second.iter_mut())
                {
                    let it = p
                        .values_mut()
                        .iter_mut()
                        .zip(g.values())
                        .zip(m.values_mut())
                        .zip(v.values_mut());
                    for (((w, &d), m), v) in it {
                        let d = d + weight_decay * *w;
                        *m = beta1 * *m + (1.0 - beta1) * d;
                        *v = beta2 * *v + (1.0 - beta2) * d * d;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_shapes(a: &[GradTensor], b: &[GradTensor]) -> Result<(), OptimizerError> {
    if a.len() != b.len() {
        return Err(OptimizerError::Shape(format!("{} tensors vs {}", a.len(), b.len())));
    }
    for (x, y) in a.iter().zip(b) {
        if x.shape() != y.shape() {
            return Err(OptimizerError::Shape(format!(
                "{} {:?} vs {} {:?}",
                x.name(),
                x.shape(),
                y.name(),
                y.shape()
            )));
        }
    }
    Ok(())
}

/// Exponential moving average of the parameters, used for evaluation.
///
/// With `warmup` set the effective decay at update `k` is
/// `min(decay, (1 + k) / (10 + k))`, so short runs are not dominated by the
/// initial parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaShadow {
    decay: f32,
    warmup: bool,
    updates: u64,
    shadow: Vec<GradTensor>,
}

impl EmaShadow {
    /// Starts the shadow at `initial`.
    pub fn new(decay: f32, initial: &[GradTensor]) -> Self {
        Self {
            decay,
            warmup: false,
            updates: 0,
            shadow: initial.to_vec(),
        }
    }

    pub fn with_warmup(mut self, warmup: bool) -> Self {
        self.warmup = warmup;
        self
    }

    fn effective_decay(&self) -> f32 {
        if self.warmup {
            let k = self.updates as f64;
            self.decay.min(((1.0 + k) / (10.0 + k)) as f32)
        } else {
            self.decay
        }
    }

    /// `shadow <- d * shadow + (1 - d) * params`.
    pub fn update(&mut self, params: &[GradTensor]) -> Result<(), OptimizerError> {
        check_shapes(&self.shadow, params)?;
        let d = self.effective_decay();
        for (s, p) in self.shadow.iter_mut().zip(params) {
            for (sv, &pv) in s.values_mut().iter_mut().zip(p.values()) {
                *sv = d * *sv + (1.0 - d) * pv;
            }
        }
        self.updates += 1;
        Ok(())
    }

    /// The averaged parameters, for evaluation. Training parameters are
    /// untouched.
    pub fn swap(&self) -> Vec<GradTensor> {
        self.shadow.clone()
    }

    pub fn shadow(&self) -> &[GradTensor] {
        &self.shadow
    }
}
