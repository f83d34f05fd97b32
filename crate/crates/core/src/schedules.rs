//! Noise schedules for the four model kinds.
//!
//! Discrete: DDPM (`beta_t`, `alpha_t`, `alphabar_t`) and SMLD (`sigma_t`,
//! max-noise-first). Continuous: VPSDE (linear `beta(t)`) and VESDE
//! (geometric `sigma(t)`), both on the horizon `t in (0, 1]`.
//!
//! The discrete schedules are discretizations of their continuous
//! counterparts; `continuous_counterpart` makes the mapping explicit so the
//! likelihood path can treat all four kinds through one SDE framework.

use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Continuous-time evaluations stay above this cutoff; the drift and the
/// loss weighting are singular at t = 0.
pub const TIME_CUTOFF: f64 = 1e-5;

/// Continuous horizon; fixed at 1.
pub const HORIZON: f64 = 1.0;

pub const DEFAULT_DDPM_STEPS: usize = 1000;
pub const DEFAULT_DDPM_BETA_START: f64 = 1e-4;
pub const DEFAULT_DDPM_BETA_END: f64 = 2e-2;
pub const DEFAULT_SMLD_SIGMA_MIN: f64 = 0.01;
pub const DEFAULT_SMLD_SIGMA_MAX: f64 = 50.0;
pub const DEFAULT_VP_BETA_MIN: f64 = 0.1;
pub const DEFAULT_VP_BETA_MAX: f64 = 20.0;

/// The four target model kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Ddpm,
    Smld,
    Vpsde,
    Vesde,
}

impl ModelKind {
    pub fn is_discrete(self) -> bool {
        matches!(self, ModelKind::Ddpm | ModelKind::Smld)
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "ddpm" => Ok(ModelKind::Ddpm),
            "smld" => Ok(ModelKind::Smld),
            "vpsde" | "vp" => Ok(ModelKind::Vpsde),
            "vesde" | "ve" => Ok(ModelKind::Vesde),
            other => Err(AuditError::Config(format!("unknown model kind '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Ddpm => "ddpm",
            ModelKind::Smld => "smld",
            ModelKind::Vpsde => "vpsde",
            ModelKind::Vesde => "vesde",
        }
    }
}

/// Forward-marginal coefficients: `x_t = mean_coef * x_0 + std * eps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalStats<F> {
    pub mean_coef: F,
    pub std: F,
}

/// Serializable schedule parameters; rebuilding from these is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleSpec {
    Ddpm { t_steps: usize, beta_start: f64, beta_end: f64 },
    Smld { t_steps: usize, sigma_min: f64, sigma_max: f64 },
    Vpsde { beta_min: f64, beta_max: f64 },
    Vesde { sigma_min: f64, sigma_max: f64 },
}

impl ScheduleSpec {
    pub fn default_for(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Ddpm => ScheduleSpec::Ddpm {
                t_steps: DEFAULT_DDPM_STEPS,
                beta_start: DEFAULT_DDPM_BETA_START,
                beta_end: DEFAULT_DDPM_BETA_END,
            },
            ModelKind::Smld => ScheduleSpec::Smld {
                t_steps: DEFAULT_DDPM_STEPS,
                sigma_min: DEFAULT_SMLD_SIGMA_MIN,
                sigma_max: DEFAULT_SMLD_SIGMA_MAX,
            },
            ModelKind::Vpsde => ScheduleSpec::Vpsde {
                beta_min: DEFAULT_VP_BETA_MIN,
                beta_max: DEFAULT_VP_BETA_MAX,
            },
            ModelKind::Vesde => ScheduleSpec::Vesde {
                sigma_min: DEFAULT_SMLD_SIGMA_MIN,
                sigma_max: DEFAULT_SMLD_SIGMA_MAX,
            },
        }
    }

    pub fn model_kind(&self) -> ModelKind {
        match self {
            ScheduleSpec::Ddpm { .. } => ModelKind::Ddpm,
            ScheduleSpec::Smld { .. } => ModelKind::Smld,
            ScheduleSpec::Vpsde { .. } => ModelKind::Vpsde,
            ScheduleSpec::Vesde { .. } => ModelKind::Vesde,
        }
    }

    pub fn build<F: Scalar>(&self) -> Result<Schedule<F>> {
        match *self {
            ScheduleSpec::Ddpm { t_steps, beta_start, beta_end } => Ok(Schedule::Discrete(
                DiscreteSchedule::ddpm_linear(t_steps, F::lit(beta_start), F::lit(beta_end))?,
            )),
            ScheduleSpec::Smld { t_steps, sigma_min, sigma_max } => Ok(Schedule::Discrete(
                DiscreteSchedule::smld_geometric(t_steps, F::lit(sigma_min), F::lit(sigma_max))?,
            )),
            ScheduleSpec::Vpsde { beta_min, beta_max } => Ok(Schedule::Continuous(
                ContinuousSchedule::vpsde(F::lit(beta_min), F::lit(beta_max))?,
            )),
            ScheduleSpec::Vesde { sigma_min, sigma_max } => Ok(Schedule::Continuous(
                ContinuousSchedule::vesde(F::lit(sigma_min), F::lit(sigma_max))?,
            )),
        }
    }
}

/// DDPM or SMLD noise sequence over `T` steps.
#[derive(Debug, Clone)]
pub struct DiscreteSchedule<F> {
    kind: ModelKind,
    /// DDPM arrays; empty for SMLD.
    betas: Vec<F>,
    alphas: Vec<F>,
    alphabars: Vec<F>,
    /// SMLD sigmas, strictly decreasing (maximal noise first); empty for DDPM.
    sigmas: Vec<F>,
}

impl<F: Scalar> DiscreteSchedule<F> {
    /// DDPM with betas linearly spaced from `beta_start` to `beta_end`.
    pub fn ddpm_linear(t_steps: usize, beta_start: F, beta_end: F) -> Result<Self> {
        if t_steps < 2 {
            return Err(AuditError::Config("ddpm needs at least 2 steps".into()));
        }
        let n = F::from_usize(t_steps - 1).expect("step count fits scalar");
        let betas = (0..t_steps)
            .map(|i| {
                let frac = F::from_usize(i).expect("index fits scalar") / n;
                beta_start + (beta_end - beta_start) * frac
            })
            .collect();
        Self::ddpm_from_betas(betas)
    }

    /// DDPM from an explicit beta sequence.
    pub fn ddpm_from_betas(betas: Vec<F>) -> Result<Self> {
        if betas.is_empty() {
            return Err(AuditError::Config("empty beta sequence".into()));
        }
        if betas.iter().any(|&b| b <= F::zero() || b >= F::one()) {
            return Err(AuditError::Config("ddpm requires 0 < beta_t < 1".into()));
        }
        let alphas: Vec<F> = betas.iter().map(|&b| F::one() - b).collect();
        let mut alphabars = Vec::with_capacity(betas.len());
        let mut prod = F::one();
        for &a in &alphas {
            prod = prod * a;
            alphabars.push(prod);
        }
        for w in alphabars.windows(2) {
            if w[1] >= w[0] {
                return Err(AuditError::Config("alphabar must be strictly decreasing".into()));
            }
        }
        Ok(DiscreteSchedule {
            kind: ModelKind::Ddpm,
            betas,
            alphas,
            alphabars,
            sigmas: Vec::new(),
        })
    }

    /// SMLD with sigmas geometrically spaced from `sigma_max` down to
    /// `sigma_min`: the first step carries maximal noise.
    pub fn smld_geometric(t_steps: usize, sigma_min: F, sigma_max: F) -> Result<Self> {
        if t_steps < 2 {
            return Err(AuditError::Config("smld needs at least 2 steps".into()));
        }
        if sigma_min <= F::zero() || sigma_min >= sigma_max {
            return Err(AuditError::Config("smld requires 0 < sigma_min < sigma_max".into()));
        }
        let n = F::from_usize(t_steps - 1).expect("step count fits scalar");
        let ratio = sigma_min / sigma_max;
        let sigmas = (0..t_steps)
            .map(|i| {
                let frac = F::from_usize(i).expect("index fits scalar") / n;
                sigma_max * ratio.powf(frac)
            })
            .collect();
        Ok(DiscreteSchedule {
            kind: ModelKind::Smld,
            betas: Vec::new(),
            alphas: Vec::new(),
            alphabars: Vec::new(),
            sigmas,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn num_steps(&self) -> usize {
        match self.kind {
            ModelKind::Ddpm => self.betas.len(),
            _ => self.sigmas.len(),
        }
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t >= self.num_steps() {
            return Err(AuditError::range(
                "diffusion step",
                format!("t={} with T={}", t, self.num_steps()),
            ));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<F> {
        self.check_step(t)?;
        Ok(self.betas[t])
    }

    pub fn alpha(&self, t: usize) -> Result<F> {
        self.check_step(t)?;
        Ok(self.alphas[t])
    }

    pub fn alphabar(&self, t: usize) -> Result<F> {
        self.check_step(t)?;
        Ok(self.alphabars[t])
    }

    pub fn sigma(&self, t: usize) -> Result<F> {
        self.check_step(t)?;
        Ok(self.sigmas[t])
    }

    pub fn marginal_stats(&self, t: usize) -> Result<MarginalStats<F>> {
        self.check_step(t)?;
        Ok(match self.kind {
            ModelKind::Ddpm => {
                let ab = self.alphabars[t];
                MarginalStats { mean_coef: ab.sqrt(), std: (F::one() - ab).sqrt() }
            }
            _ => MarginalStats { mean_coef: F::one(), std: self.sigmas[t] },
        })
    }

    pub fn perturb(&self, x0: &Tensor<F>, t: usize, eps: &Tensor<F>) -> Result<Tensor<F>> {
        let stats = self.marginal_stats(t)?;
        perturb_with(&stats, x0, eps)
    }

    /// Network time conditioning for step `t`: the step index over `T`.
    pub fn net_time(&self, t: usize) -> Result<F> {
        self.check_step(t)?;
        let t_count = F::from_usize(self.num_steps()).expect("step count fits scalar");
        Ok(F::from_usize(t).expect("index fits scalar") / t_count)
    }

    /// The continuous schedule whose marginals this discrete sequence
    /// discretizes: DDPM -> VPSDE, SMLD -> VESDE.
    pub fn continuous_counterpart(&self) -> ContinuousSchedule<F> {
        let t_count = F::from_usize(self.num_steps()).expect("step count fits scalar");
        match self.kind {
            ModelKind::Ddpm => ContinuousSchedule {
                kind: ModelKind::Vpsde,
                beta_min: self.betas[0] * t_count,
                beta_max: self.betas[self.betas.len() - 1] * t_count,
                sigma_min: F::zero(),
                sigma_max: F::zero(),
            },
            _ => ContinuousSchedule {
                kind: ModelKind::Vesde,
                beta_min: F::zero(),
                beta_max: F::zero(),
                sigma_min: self.sigmas[self.sigmas.len() - 1],
                sigma_max: self.sigmas[0],
            },
        }
    }

    /// Network conditioning time for a continuous-counterpart time `s`.
    ///
    /// DDPM step t matches VP time (t+1)/T, so the net trained on t/T is
    /// queried at s - 1/T. SMLD runs max-noise-first: step t matches VE time
    /// 1 - t/(T-1).
    pub fn net_time_for_continuous(&self, s: F) -> F {
        let t_count = F::from_usize(self.num_steps()).expect("step count fits scalar");
        match self.kind {
            ModelKind::Ddpm => {
                let tau = s - F::one() / t_count;
                tau.max(F::zero()).min((t_count - F::one()) / t_count)
            }
            _ => {
                let tau = (F::one() - s) * (t_count - F::one()) / t_count;
                tau.max(F::zero()).min((t_count - F::one()) / t_count)
            }
        }
    }
}

/// VPSDE or VESDE coefficients on the unit horizon.
#[derive(Debug, Clone)]
pub struct ContinuousSchedule<F> {
    kind: ModelKind,
    beta_min: F,
    beta_max: F,
    sigma_min: F,
    sigma_max: F,
}

impl<F: Scalar> ContinuousSchedule<F> {
    pub fn vpsde(beta_min: F, beta_max: F) -> Result<Self> {
        if beta_min <= F::zero() || beta_min >= beta_max {
            return Err(AuditError::Config("vpsde requires 0 < beta_min < beta_max".into()));
        }
        Ok(ContinuousSchedule {
            kind: ModelKind::Vpsde,
            beta_min,
            beta_max,
            sigma_min: F::zero(),
            sigma_max: F::zero(),
        })
    }

    pub fn vesde(sigma_min: F, sigma_max: F) -> Result<Self> {
        if sigma_min <= F::zero() || sigma_min >= sigma_max {
            return Err(AuditError::Config("vesde requires 0 < sigma_min < sigma_max".into()));
        }
        Ok(ContinuousSchedule {
            kind: ModelKind::Vesde,
            beta_min: F::zero(),
            beta_max: F::zero(),
            sigma_min,
            sigma_max,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn horizon(&self) -> F {
        F::lit(HORIZON)
    }

    pub fn time_cutoff(&self) -> F {
        F::lit(TIME_CUTOFF)
    }

    fn check_time(&self, t: F) -> Result<()> {
        if !(t > F::zero() && t <= self.horizon()) {
            return Err(AuditError::range(
                "continuous time",
                format!("t={} outside (0, {}]", t, HORIZON),
            ));
        }
        Ok(())
    }

    pub fn beta_at(&self, t: F) -> F {
        self.beta_min + (self.beta_max - self.beta_min) * t
    }

    pub fn sigma_at(&self, t: F) -> F {
        self.sigma_min * (self.sigma_max / self.sigma_min).powf(t)
    }

    /// Integral of the linear beta over [0, t].
    fn beta_integral(&self, t: F) -> F {
        t * self.beta_min + t * t * (self.beta_max - self.beta_min) / F::lit(2.0)
    }

    pub fn marginal_stats(&self, t: F) -> Result<MarginalStats<F>> {
        self.check_time(t)?;
        Ok(match self.kind {
            ModelKind::Vpsde => {
                let integral = self.beta_integral(t);
                let mean_coef = (-integral / F::lit(2.0)).exp();
                let std = (F::one() - (-integral).exp()).sqrt();
                MarginalStats { mean_coef, std }
            }
            _ => MarginalStats { mean_coef: F::one(), std: self.sigma_at(t) },
        })
    }

    pub fn perturb(&self, x0: &Tensor<F>, t: F, eps: &Tensor<F>) -> Result<Tensor<F>> {
        let stats = self.marginal_stats(t)?;
        perturb_with(&stats, x0, eps)
    }

    /// Forward-SDE drift and diffusion: `dx = f(x,t) dt + g(t) dw`.
    pub fn sde_coefficients(&self, x: &Tensor<F>, t: F) -> Result<(Tensor<F>, F)> {
        self.check_time(t)?;
        Ok(match self.kind {
            ModelKind::Vpsde => {
                let beta = self.beta_at(t);
                let drift = x.scale(-beta / F::lit(2.0));
                (drift, beta.sqrt())
            }
            _ => {
                // g(t) = sigma(t) * sqrt(2 ln(sigma_max/sigma_min)),
                // the closed form of sqrt(d[sigma^2(t)]/dt).
                let g = self.sigma_at(t)
                    * (F::lit(2.0) * (self.sigma_max / self.sigma_min).ln()).sqrt();
                (Tensor::zeros(x.shape()), g)
            }
        })
    }

    /// Log-density of the terminal prior at `x`, in nats.
    /// VP: standard normal; VE: `N(0, sigma_max^2 I)`.
    pub fn prior_logp(&self, x: &Tensor<F>) -> F {
        let m = F::from_usize(x.len()).expect("dimension fits scalar");
        let two_pi = F::lit(2.0 * std::f64::consts::PI);
        let half = F::lit(0.5);
        match self.kind {
            ModelKind::Vpsde => {
                let sq = crate::scalar::sum(&x.data().iter().map(|&v| v * v).collect::<Vec<_>>());
                -half * m * two_pi.ln() - half * sq
            }
            _ => {
                let var = self.sigma_max * self.sigma_max;
                let sq = crate::scalar::sum(&x.data().iter().map(|&v| v * v).collect::<Vec<_>>());
                -half * m * (two_pi * var).ln() - half * sq / var
            }
        }
    }

    /// Variance of the terminal prior (per coordinate).
    pub fn prior_variance(&self) -> F {
        match self.kind {
            ModelKind::Vpsde => F::one(),
            _ => self.sigma_max * self.sigma_max,
        }
    }
}

fn perturb_with<F: Scalar>(
    stats: &MarginalStats<F>,
    x0: &Tensor<F>,
    eps: &Tensor<F>,
) -> Result<Tensor<F>> {
    if x0.shape() != eps.shape() {
        return Err(AuditError::shape("perturb", x0.shape(), eps.shape()));
    }
    x0.scale(stats.mean_coef).add_scaled(eps, stats.std)
}

/// A discrete or continuous schedule behind one interface.
#[derive(Debug, Clone)]
pub enum Schedule<F> {
    Discrete(DiscreteSchedule<F>),
    Continuous(ContinuousSchedule<F>),
}

/// A point on a schedule's time axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimePoint<F> {
    Step(usize),
    Time(F),
}

impl<F: Scalar> TimePoint<F> {
    /// Value used in persisted score files and reports.
    pub fn as_report_value(&self) -> f64 {
        match *self {
            TimePoint::Step(t) => t as f64,
            TimePoint::Time(t) => t.to_f64_lossy(),
        }
    }
}

impl<F: Scalar> Schedule<F> {
    pub fn kind(&self) -> ModelKind {
        match self {
            Schedule::Discrete(s) => s.kind(),
            Schedule::Continuous(s) => s.kind(),
        }
    }

    pub fn as_discrete(&self) -> Result<&DiscreteSchedule<F>> {
        match self {
            Schedule::Discrete(s) => Ok(s),
            Schedule::Continuous(_) => Err(AuditError::Kind(
                "operation requires a discrete schedule".into(),
            )),
        }
    }

    pub fn as_continuous(&self) -> Result<&ContinuousSchedule<F>> {
        match self {
            Schedule::Continuous(s) => Ok(s),
            Schedule::Discrete(_) => Err(AuditError::Kind(
                "operation requires a continuous schedule".into(),
            )),
        }
    }

    pub fn marginal_stats_at(&self, t: TimePoint<F>) -> Result<MarginalStats<F>> {
        match (self, t) {
            (Schedule::Discrete(s), TimePoint::Step(t)) => s.marginal_stats(t),
            (Schedule::Continuous(s), TimePoint::Time(t)) => s.marginal_stats(t),
            _ => Err(AuditError::Kind("time point kind does not match schedule".into())),
        }
    }

    pub fn perturb_at(&self, x0: &Tensor<F>, t: TimePoint<F>, eps: &Tensor<F>) -> Result<Tensor<F>> {
        let stats = self.marginal_stats_at(t)?;
        perturb_with(&stats, x0, eps)
    }

    /// Network time conditioning for a schedule time point.
    pub fn net_time_at(&self, t: TimePoint<F>) -> Result<F> {
        match (self, t) {
            (Schedule::Discrete(s), TimePoint::Step(t)) => s.net_time(t),
            (Schedule::Continuous(s), TimePoint::Time(t)) => {
                s.check_time(t)?;
                Ok(t)
            }
            _ => Err(AuditError::Kind("time point kind does not match schedule".into())),
        }
    }

    /// The continuous schedule used for SDE/likelihood computations:
    /// continuous schedules are their own; discrete kinds map to their
    /// counterparts.
    pub fn likelihood_schedule(&self) -> ContinuousSchedule<F> {
        match self {
            Schedule::Discrete(s) => s.continuous_counterpart(),
            Schedule::Continuous(s) => s.clone(),
        }
    }

    /// Network conditioning time for continuous time `s` in the
    /// likelihood schedule.
    pub fn net_time_for_continuous(&self, s: F) -> F {
        match self {
            Schedule::Discrete(d) => d.net_time_for_continuous(s),
            Schedule::Continuous(_) => s,
        }
    }
}
