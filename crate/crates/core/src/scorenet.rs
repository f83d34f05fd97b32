//! Time-conditioned MLP with the two output parameterizations.
//!
//! DDPM/VPSDE networks predict the injected noise (`EpsilonPrediction`);
//! SMLD/VESDE networks predict the score directly, scaled by the noise
//! level (`ScorePrediction`). `predict_score` maps either to a score via
//! `score = -eps / std`, which lets every trained kind plug into the
//! likelihood path.
//!
//! Networks are immutable during inference; training mutates parameters
//! on a single thread.

use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::scalar::Scalar;
use crate::schedules::{Schedule, ScheduleSpec, TimePoint};
use crate::tensor::{add_row_kernel, matmul_kernel, Tape, Tensor, Var};

/// Lowest time-embedding frequency.
const TIME_EMBED_F_MIN: f64 = 1.0;
/// Highest time-embedding frequency; resolves ~1000 discrete steps.
const TIME_EMBED_F_MAX: f64 = 1000.0;

pub const DEFAULT_HIDDEN: [usize; 4] = [128, 128, 128, 128];
pub const DEFAULT_TIME_EMBED_WIDTH: usize = 32;

/// How the raw network output is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    EpsilonPrediction,
    ScorePrediction,
}

/// Sinusoidal Fourier features of a normalized time `tau in [0, 1]`:
/// `[sin(2 pi f_k tau), cos(2 pi f_k tau)]` for geometrically spaced `f_k`.
pub fn time_embedding<F: Scalar>(tau: F, width: usize) -> Tensor<F> {
    debug_assert!(width >= 2 && width % 2 == 0);
    let half = width / 2;
    let two_pi = F::lit(2.0 * std::f64::consts::PI);
    let f_min = F::lit(TIME_EMBED_F_MIN);
    let ratio = if half > 1 {
        F::lit((TIME_EMBED_F_MAX / TIME_EMBED_F_MIN).powf(1.0 / (half as f64 - 1.0)))
    } else {
        F::one()
    };
    let mut data = Vec::with_capacity(width);
    let mut freq = f_min;
    for _ in 0..half {
        let angle = two_pi * freq * tau;
        data.push(angle.sin());
        data.push(angle.cos());
        freq = freq * ratio;
    }
    Tensor::vector(data)
}

/// Fully-connected tanh network conditioned on a time embedding.
#[derive(Debug, Clone)]
pub struct ScoreNetwork<F> {
    data_dim: usize,
    layer_dims: Vec<usize>,
    weights: Vec<Tensor<F>>,
    biases: Vec<Tensor<F>>,
    time_embed_width: usize,
    param_kind: ParamKind,
}

impl<F: Scalar> ScoreNetwork<F> {
    /// Seeded network with Kaiming-style uniform fan-in init and a
    /// zero-initialized final layer.
    pub fn new(
        data_dim: usize,
        hidden: &[usize],
        time_embed_width: usize,
        param_kind: ParamKind,
        seed: u64,
    ) -> Result<Self> {
        use rand::{Rng, SeedableRng};
        if time_embed_width < 2 || time_embed_width % 2 != 0 {
            return Err(AuditError::Config(
                "time_embed_width must be a positive even number".into(),
            ));
        }
        let mut layer_dims = vec![data_dim + time_embed_width];
        layer_dims.extend_from_slice(hidden);
        layer_dims.push(data_dim);

        let param_count: usize = layer_dims
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum();
        if param_count >= 1_000_000 {
            return Err(AuditError::Config(format!(
                "network has {param_count} parameters; this is a desk-scale tool (< 1e6)"
            )));
        }

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let n_layers = layer_dims.len() - 1;
        for (li, w) in layer_dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let last = li == n_layers - 1;
            let limit = (6.0 / fan_in as f64).sqrt();
            let data: Vec<F> = (0..fan_in * fan_out)
                .map(|_| {
                    if last {
                        F::zero()
                    } else {
                        F::lit(rng.random_range(-limit..limit))
                    }
                })
                .collect();
            weights.push(Tensor::from_parts(vec![fan_in, fan_out], data));
            biases.push(Tensor::zeros(&[fan_out]));
        }
        Ok(ScoreNetwork {
            data_dim,
            layer_dims,
            weights,
            biases,
            time_embed_width,
            param_kind,
        })
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn time_embed_width(&self) -> usize {
        self.time_embed_width
    }

    pub fn param_kind(&self) -> ParamKind {
        self.param_kind
    }

    pub fn weights(&self) -> &[Tensor<F>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor<F>] {
        &self.biases
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Replace parameters; shapes must match layer by layer.
    pub fn set_params(&mut self, weights: Vec<Tensor<F>>, biases: Vec<Tensor<F>>) -> Result<()> {
        if weights.len() != self.weights.len() || biases.len() != self.biases.len() {
            return Err(AuditError::Contract("layer count mismatch in set_params".into()));
        }
        for (new, old) in weights.iter().zip(&self.weights) {
            if new.shape() != old.shape() {
                return Err(AuditError::shape("set_params", new.shape(), old.shape()));
            }
        }
        for (new, old) in biases.iter().zip(&self.biases) {
            if new.shape() != old.shape() {
                return Err(AuditError::shape("set_params", new.shape(), old.shape()));
            }
        }
        self.weights = weights;
        self.biases = biases;
        Ok(())
    }

    fn embed_rows(&self, taus: &[F]) -> Tensor<F> {
        let rows: Vec<Tensor<F>> = taus
            .iter()
            .map(|&tau| time_embedding(tau, self.time_embed_width))
            .collect();
        Tensor::from_rows(&rows).expect("embeddings share a width")
    }

    fn check_input(&self, x: &Tensor<F>, n_taus: usize) -> Result<usize> {
        match x.shape() {
            [m] if *m == self.data_dim && n_taus == 1 => Ok(1),
            [b, m] if *m == self.data_dim && n_taus == *b => Ok(*b),
            _ => Err(AuditError::shape(
                "scorenet_forward",
                x.shape(),
                &[n_taus, self.data_dim],
            )),
        }
    }

    /// Tapeless forward pass. `x` is `[m]` with one `tau`, or `[rows, m]`
    /// with one `tau` per row. Output shape matches `x`.
    pub fn forward_raw(&self, x: &Tensor<F>, taus: &[F]) -> Result<Tensor<F>> {
        let rows = self.check_input(x, taus.len())?;
        let emb = self.embed_rows(taus);
        let mut h: Vec<F> = Vec::with_capacity(rows * self.layer_dims[0]);
        for i in 0..rows {
            h.extend_from_slice(&x.data()[i * self.data_dim..(i + 1) * self.data_dim]);
            h.extend_from_slice(&emb.data()[i * self.time_embed_width..(i + 1) * self.time_embed_width]);
        }
        let n_layers = self.weights.len();
        for (li, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
            let mut z = matmul_kernel(&h, w.data(), rows, fan_in, fan_out);
            z = add_row_kernel(&z, b.data(), rows);
            if li + 1 < n_layers {
                for v in z.iter_mut() {
                    *v = v.tanh();
                }
            }
            h = z;
        }
        Ok(if x.shape().len() == 1 {
            Tensor::vector(h)
        } else {
            Tensor::from_parts(vec![rows, self.data_dim], h)
        })
    }

    /// Register all parameters on a tape. Trainable registration feeds
    /// `Tape::grad`; constant registration is for input-VJP consumers.
    pub fn register_params(&self, tape: &mut Tape<F>, trainable: bool) -> Vec<(Var, Var)> {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| {
                if trainable {
                    (tape.leaf(w.clone()), tape.leaf(b.clone()))
                } else {
                    (tape.constant(w.clone()), tape.constant(b.clone()))
                }
            })
            .collect()
    }

    /// Forward pass recorded on a tape, using previously registered
    /// parameter vars. `x` must already be a tape node.
    pub fn forward_graph(
        &self,
        tape: &mut Tape<F>,
        params: &[(Var, Var)],
        x: Var,
        taus: &[F],
    ) -> Result<Var> {
        let rows = self.check_input(tape.value(x), taus.len())?;
        let emb = self.embed_rows(taus);
        let emb = if rows == 1 && tape.value(x).shape().len() == 1 {
            tape.constant(Tensor::vector(emb.data().to_vec()))
        } else {
            tape.constant(emb)
        };
        let mut h = tape.concat(x, emb)?;
        let n_layers = params.len();
        for (li, &(w, b)) in params.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            let z = tape.add(z, b)?;
            h = if li + 1 < n_layers { tape.tanh(z) } else { z };
        }
        Ok(h)
    }

    /// Noise prediction at normalized time `tau`. Epsilon-parameterized
    /// networks only.
    pub fn predict_eps(&self, x_t: &Tensor<F>, tau: F) -> Result<Tensor<F>> {
        if self.param_kind != ParamKind::EpsilonPrediction {
            return Err(AuditError::Kind(
                "predict_eps requires an EpsilonPrediction network".into(),
            ));
        }
        let taus = vec![tau; if x_t.shape().len() == 2 { x_t.shape()[0] } else { 1 }];
        self.forward_raw(x_t, &taus)
    }

    /// Raw output interpreted as a score given the noise scale `std`.
    pub fn score_from_raw(&self, raw: &Tensor<F>, std: F) -> Result<Tensor<F>> {
        if std == F::zero() {
            return Err(AuditError::Singularity("predict_score"));
        }
        Ok(match self.param_kind {
            ParamKind::ScorePrediction => raw.scale(F::one() / std),
            ParamKind::EpsilonPrediction => raw.scale(-F::one() / std),
        })
    }
}

/// Score prediction at a schedule time point; works for both
/// parameterizations via `score = -eps / std`.
pub fn predict_score<F: Scalar>(
    net: &ScoreNetwork<F>,
    x_t: &Tensor<F>,
    t: TimePoint<F>,
    schedule: &Schedule<F>,
) -> Result<Tensor<F>> {
    let stats = schedule.marginal_stats_at(t)?;
    let tau = schedule.net_time_at(t)?;
    let taus = vec![tau; if x_t.shape().len() == 2 { x_t.shape()[0] } else { 1 }];
    let raw = net.forward_raw(x_t, &taus)?;
    net.score_from_raw(&raw, stats.std)
}

// ---------------------------------------------------------------------------
// Target model: network plus schedule, with the continuous-time view used
// by the SDE sampler and the likelihood path.
// ---------------------------------------------------------------------------

/// A trained (or in-training) model: the network together with its schedule.
#[derive(Debug, Clone)]
pub struct TargetModel<F> {
    net: ScoreNetwork<F>,
    schedule: Schedule<F>,
    schedule_spec: ScheduleSpec,
}

impl<F: Scalar> TargetModel<F> {
    pub fn new(net: ScoreNetwork<F>, schedule_spec: ScheduleSpec) -> Result<Self> {
        let schedule = schedule_spec.build()?;
        Ok(TargetModel { net, schedule, schedule_spec })
    }

    pub fn net(&self) -> &ScoreNetwork<F> {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut ScoreNetwork<F> {
        &mut self.net
    }

    pub fn schedule(&self) -> &Schedule<F> {
        &self.schedule
    }

    pub fn schedule_spec(&self) -> &ScheduleSpec {
        &self.schedule_spec
    }

    /// Score at continuous time `s` under the model's likelihood schedule.
    pub fn score_at(&self, x: &Tensor<F>, s: F) -> Result<Tensor<F>> {
        let lik = self.schedule.likelihood_schedule();
        let std = lik.marginal_stats(s)?.std;
        let tau = self.schedule.net_time_for_continuous(s);
        let taus = vec![tau; if x.shape().len() == 2 { x.shape()[0] } else { 1 }];
        let raw = self.net.forward_raw(x, &taus)?;
        self.net.score_from_raw(&raw, std)
    }
}

/// Something that can put `score(x, s)` on a tape so callers can take
/// vector-Jacobian products against `x`. Implemented by trained models and
/// by analytic test oracles.
pub trait TapeScore<F: Scalar>: Sync {
    fn score_on_tape(&self, tape: &mut Tape<F>, x: Var, s: F) -> Result<Var>;

    /// Score value without a tape; default goes through a throwaway tape.
    fn score_value(&self, x: &Tensor<F>, s: F) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.score_on_tape(&mut tape, xv, s)?;
        Ok(tape.value(out).clone())
    }
}

impl<F: Scalar> TapeScore<F> for TargetModel<F> {
    fn score_on_tape(&self, tape: &mut Tape<F>, x: Var, s: F) -> Result<Var> {
        let lik = self.schedule.likelihood_schedule();
        let std = lik.marginal_stats(s)?.std;
        if std == F::zero() {
            return Err(AuditError::Singularity("score_on_tape"));
        }
        let tau = self.schedule.net_time_for_continuous(s);
        let rows = if tape.value(x).shape().len() == 2 {
            tape.value(x).shape()[0]
        } else {
            1
        };
        let params = self.net.register_params(tape, false);
        let raw = self.net.forward_graph(tape, &params, x, &vec![tau; rows])?;
        let scale = match self.net.param_kind() {
            ParamKind::ScorePrediction => F::one() / std,
            ParamKind::EpsilonPrediction => -F::one() / std,
        };
        let c = tape.constant(Tensor::scalar(scale));
        tape.mul(raw, c)
    }

    fn score_value(&self, x: &Tensor<F>, s: F) -> Result<Tensor<F>> {
        self.score_at(x, s)
    }
}

// ---------------------------------------------------------------------------
// Checkpoint format
// ---------------------------------------------------------------------------

pub const CHECKPOINT_VERSION: u32 = 1;

/// Training provenance stored in a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub steps: usize,
    pub seed: u64,
    pub dataset_fingerprint: String,
}

/// Versioned structured-text model snapshot. Weights round-trip bit-exactly
/// at the parsed-value level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model_kind: String,
    pub schedule: ScheduleSpec,
    pub layer_dims: Vec<usize>,
    pub time_embed_width: usize,
    pub param_kind: ParamKind,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub meta: TrainMeta,
    /// Resolved run-config fingerprint of the producing command.
    pub config_fingerprint: String,
}

impl Checkpoint {
    pub fn from_model<F: Scalar>(
        model: &TargetModel<F>,
        meta: TrainMeta,
        config_fingerprint: String,
    ) -> Self {
        let net = model.net();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            model_kind: model.schedule_spec().model_kind().name().to_string(),
            schedule: model.schedule_spec().clone(),
            layer_dims: net.layer_dims().to_vec(),
            time_embed_width: net.time_embed_width(),
            param_kind: net.param_kind(),
            weights: net
                .weights()
                .iter()
                .map(|w| w.data().iter().map(|v| v.to_f64_lossy()).collect())
                .collect(),
            biases: net
                .biases()
                .iter()
                .map(|b| b.data().iter().map(|v| v.to_f64_lossy()).collect())
                .collect(),
            meta,
            config_fingerprint,
        }
    }

    pub fn into_model<F: Scalar>(&self) -> Result<TargetModel<F>> {
        if self.version != CHECKPOINT_VERSION {
            return Err(AuditError::Version {
                found: self.version,
                supported: CHECKPOINT_VERSION,
            });
        }
        if self.layer_dims.len() < 2 {
            return Err(AuditError::Config("checkpoint has no layers".into()));
        }
        let data_dim = *self.layer_dims.last().expect("nonempty dims");
        let hidden = &self.layer_dims[1..self.layer_dims.len() - 1];
        let mut net = ScoreNetwork::new(data_dim, hidden, self.time_embed_width, self.param_kind, 0)?;
        let weights = self
            .layer_dims
            .windows(2)
            .zip(&self.weights)
            .map(|(dims, w)| Tensor::new(vec![dims[0], dims[1]], w.iter().map(|&v| F::lit(v)).collect()))
            .collect::<Result<Vec<_>>>()?;
        let biases = self
            .layer_dims
            .windows(2)
            .zip(&self.biases)
            .map(|(dims, b)| Tensor::new(vec![dims[1]], b.iter().map(|&v| F::lit(v)).collect()))
            .collect::<Result<Vec<_>>>()?;
        net.set_params(weights, biases)?;
        TargetModel::new(net, self.schedule.clone())
    }
}
