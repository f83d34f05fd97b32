//! Run configuration: one TOML document fully specifies a reproducible run.
//!
//! Resolution precedence is flag > file > default. After resolution every
//! field is explicit; the resolved document is echoed on every command and
//! its hash is stamped into every output file as the run fingerprint.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use diffaudit_core::attacks::{AttackConfig, StepSelection};
use diffaudit_core::error::{AuditError, Result};
use diffaudit_core::likelihood::{OdeConfig, ProbeDist};
use diffaudit_core::sampler::SamplerConfig;
use diffaudit_core::schedules::{
    ModelKind, ScheduleSpec, DEFAULT_DDPM_BETA_END, DEFAULT_DDPM_BETA_START, DEFAULT_DDPM_STEPS,
    DEFAULT_SMLD_SIGMA_MAX, DEFAULT_SMLD_SIGMA_MIN, DEFAULT_VP_BETA_MAX, DEFAULT_VP_BETA_MIN,
};
use diffaudit_core::scorenet::{ParamKind, DEFAULT_HIDDEN, DEFAULT_TIME_EMBED_WIDTH};
use diffaudit_core::trainer::{DpParams, TrainConfig};

pub const OUT_DIR_ENV: &str = "DIFFAUDIT_OUT";

#[derive(Debug, Clone, Default, Deserialize)]
pub struct RawConfig {
    #[serde(default)]
    pub model: RawModel,
    #[serde(default)]
    pub schedule: RawSchedule,
    #[serde(default)]
    pub data: RawData,
    #[serde(default)]
    pub network: RawNetwork,
    #[serde(default)]
    pub train: RawTrain,
    #[serde(default)]
    pub attack: RawAttack,
    #[serde(default)]
    pub ode: RawOde,
    #[serde(default)]
    pub sampler: RawSampler,
    #[serde(default)]
    pub paths: RawPaths,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct RawModel {
    pub kind: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct RawSchedule {
    pub t_steps: Option<usize>,
    pub beta_start: Option<f64>,
    pub beta_end: Option<f64>,
    pub beta_min: Option<f64>,
    pub beta_max: Option<f64>,
    pub sigma_min: Option<f64>,
    pub sigma_max: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct RawData {
    pub generator: Option<String>,
    pub n_members: Option<usize>,
    pub n_nonmembers: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct RawNetwork {
    pub hidden: Option<Vec<usize>>,
    pub time_embed_width: Option<usize>,
    pub init_seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct RawTrain {
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub seed: Option<u64>,
    pub dp: Option<RawDp>,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct RawDp {
    pub clip_bound: Option<f64>,
    pub noise_multiplier: Option<f64>,
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct RawAttack {
    pub k_draws: Option<usize>,
    pub seed: Option<u64>,
    pub continuous_steps: Option<usize>,
    pub step_selection: Option<String>,
    pub step_stride: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct RawOde {
    pub rtol: Option<f64>,
    pub atol: Option<f64>,
    pub n_probes: Option<usize>,
    pub probe_dist: Option<String>,
    pub seed: Option<u64>,
    pub max_steps: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct RawSampler {
    pub n_samples: Option<usize>,
    pub seed: Option<u64>,
    pub langevin_inner_steps: Option<usize>,
    pub langevin_step_scale: Option<f64>,
    pub sde_steps: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct RawPaths {
    pub out_dir: Option<String>,
}

/// Flag-level overrides collected by the CLI; `None` means "not given".
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub model_kind: Option<String>,
    pub generator: Option<String>,
    pub n_members: Option<usize>,
    pub n_nonmembers: Option<usize>,
    pub data_seed: Option<u64>,
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub train_seed: Option<u64>,
    pub dp: bool,
    pub dp_clip_bound: Option<f64>,
    pub dp_noise_multiplier: Option<f64>,
    pub k_draws: Option<usize>,
    pub attack_seed: Option<u64>,
    pub step_stride: Option<usize>,
    pub n_probes: Option<usize>,
    pub ode_seed: Option<u64>,
    pub n_samples: Option<usize>,
    pub out_dir: Option<String>,
}

/// Fully-resolved run configuration; every default is explicit.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub model_kind: ModelKind,
    pub schedule: ScheduleSpec,
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    /// Evaluate every k-th discrete step in the loss attack (1 = all).
    pub attack_step_stride: usize,
    pub ode: OdeConfig,
    pub sampler: SamplerConfig,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct DataConfig {
    pub generator: String,
    pub n_members: usize,
    pub n_nonmembers: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    pub time_embed_width: usize,
    pub init_seed: u64,
}

impl RunConfig {
    pub fn param_kind(&self) -> ParamKind {
        match self.model_kind {
            ModelKind::Ddpm | ModelKind::Vpsde => ParamKind::EpsilonPrediction,
            ModelKind::Smld | ModelKind::Vesde => ParamKind::ScorePrediction,
        }
    }

    /// Canonical text form; echoed by every command.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("resolved config serializes")
    }

    /// Run fingerprint: hash of the canonical resolved document.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(8).fold(String::new(), |mut acc, b| {
            let _ = write!(acc, "{b:02x}");
            acc
        })
    }
}

fn parse_step_selection(name: &str) -> Result<StepSelection> {
    match name {
        "uniform_grid" => Ok(StepSelection::UniformGrid),
        "random" => Ok(StepSelection::Random),
        other => Err(AuditError::Config(format!(
            "unknown step_selection '{other}' (expected uniform_grid or random)"
        ))),
    }
}

fn parse_probe_dist(name: &str) -> Result<ProbeDist> {
    match name {
        "rademacher" => Ok(ProbeDist::Rademacher),
        "gaussian" => Ok(ProbeDist::Gaussian),
        other => Err(AuditError::Config(format!(
            "unknown probe_dist '{other}' (expected rademacher or gaussian)"
        ))),
    }
}

/// Load the raw config file when present.
pub fn load_raw(path: Option<&Path>) -> Result<RawConfig> {
    match path {
        None => Ok(RawConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| AuditError::Io {
                path: p.display().to_string(),
                source,
            })?;
            toml::from_str(&text).map_err(|e| AuditError::Config(format!(
                "config parse failure in {}: {e}",
                p.display()
            )))
        }
    }
}

/// Resolve raw file values and flag overrides into a complete config.
pub fn resolve(raw: RawConfig, flags: &Overrides) -> Result<RunConfig> {
    let kind_name = flags
        .model_kind
        .clone()
        .or(raw.model.kind)
        .unwrap_or_else(|| "ddpm".to_string());
    let model_kind = ModelKind::parse(&kind_name)?;

    let schedule = match model_kind {
        ModelKind::Ddpm => ScheduleSpec::Ddpm {
            t_steps: raw.schedule.t_steps.unwrap_or(DEFAULT_DDPM_STEPS),
            beta_start: raw.schedule.beta_start.unwrap_or(DEFAULT_DDPM_BETA_START),
            beta_end: raw.schedule.beta_end.unwrap_or(DEFAULT_DDPM_BETA_END),
        },
        ModelKind::Smld => ScheduleSpec::Smld {
            t_steps: raw.schedule.t_steps.unwrap_or(DEFAULT_DDPM_STEPS),
            sigma_min: raw.schedule.sigma_min.unwrap_or(DEFAULT_SMLD_SIGMA_MIN),
            sigma_max: raw.schedule.sigma_max.unwrap_or(DEFAULT_SMLD_SIGMA_MAX),
        },
        ModelKind::Vpsde => ScheduleSpec::Vpsde {
            beta_min: raw.schedule.beta_min.unwrap_or(DEFAULT_VP_BETA_MIN),
            beta_max: raw.schedule.beta_max.unwrap_or(DEFAULT_VP_BETA_MAX),
        },
        ModelKind::Vesde => ScheduleSpec::Vesde {
            sigma_min: raw.schedule.sigma_min.unwrap_or(DEFAULT_SMLD_SIGMA_MIN),
            sigma_max: raw.schedule.sigma_max.unwrap_or(DEFAULT_SMLD_SIGMA_MAX),
        },
    };

    let data = DataConfig {
        generator: flags
            .generator
            .clone()
            .or(raw.data.generator)
            .unwrap_or_else(|| "ring8".to_string()),
        n_members: flags.n_members.or(raw.data.n_members).unwrap_or(64),
        n_nonmembers: flags.n_nonmembers.or(raw.data.n_nonmembers).unwrap_or(64),
        seed: flags.data_seed.or(raw.data.seed).unwrap_or(1),
    };

    let network = NetworkConfig {
        hidden: raw.network.hidden.unwrap_or_else(|| DEFAULT_HIDDEN.to_vec()),
        time_embed_width: raw
            .network
            .time_embed_width
            .unwrap_or(DEFAULT_TIME_EMBED_WIDTH),
        init_seed: raw.network.init_seed.unwrap_or(7),
    };

    let dp = if flags.dp || raw.train.dp.is_some() {
        let raw_dp = raw.train.dp.unwrap_or_default();
        Some(DpParams {
            clip_bound: flags
                .dp_clip_bound
                .or(raw_dp.clip_bound)
                .unwrap_or(DpParams::default().clip_bound),
            noise_multiplier: flags
                .dp_noise_multiplier
                .or(raw_dp.noise_multiplier)
                .unwrap_or(DpParams::default().noise_multiplier),
            delta: raw_dp.delta.unwrap_or(DpParams::default().delta),
        })
    } else {
        None
    };

    let train = TrainConfig {
        steps: flags.steps.or(raw.train.steps).unwrap_or(TrainConfig::default().steps),
        batch_size: flags
            .batch_size
            .or(raw.train.batch_size)
            .unwrap_or(TrainConfig::default().batch_size),
        learning_rate: flags
            .learning_rate
            .or(raw.train.learning_rate)
            .unwrap_or(TrainConfig::default().learning_rate),
        seed: flags.train_seed.or(raw.train.seed).unwrap_or(2),
        dp,
    };

    let attack = AttackConfig {
        k_draws: flags.k_draws.or(raw.attack.k_draws).unwrap_or(AttackConfig::default().k_draws),
        seed: flags.attack_seed.or(raw.attack.seed).unwrap_or(3),
        continuous_steps: raw
            .attack
            .continuous_steps
            .unwrap_or(AttackConfig::default().continuous_steps),
        step_selection: match raw.attack.step_selection {
            Some(name) => parse_step_selection(&name)?,
            None => StepSelection::UniformGrid,
        },
    };
    let attack_step_stride = flags.step_stride.or(raw.attack.step_stride).unwrap_or(1);
    if attack_step_stride == 0 {
        return Err(AuditError::Config("step_stride must be >= 1".into()));
    }

    let ode = OdeConfig {
        rtol: raw.ode.rtol.unwrap_or(OdeConfig::default().rtol),
        atol: raw.ode.atol.unwrap_or(OdeConfig::default().atol),
        n_probes: flags.n_probes.or(raw.ode.n_probes).unwrap_or(OdeConfig::default().n_probes),
        probe_dist: match raw.ode.probe_dist {
            Some(name) => parse_probe_dist(&name)?,
            None => ProbeDist::Rademacher,
        },
        seed: flags.ode_seed.or(raw.ode.seed).unwrap_or(4),
        max_steps: raw.ode.max_steps.unwrap_or(OdeConfig::default().max_steps),
    };

    let sampler = SamplerConfig {
        n_samples: flags
            .n_samples
            .or(raw.sampler.n_samples)
            .unwrap_or(SamplerConfig::default().n_samples),
        seed: raw.sampler.seed.unwrap_or(5),
        langevin_inner_steps: raw
            .sampler
            .langevin_inner_steps
            .unwrap_or(SamplerConfig::default().langevin_inner_steps),
        langevin_step_scale: raw
            .sampler
            .langevin_step_scale
            .unwrap_or(SamplerConfig::default().langevin_step_scale),
        sde_steps: raw.sampler.sde_steps.unwrap_or(SamplerConfig::default().sde_steps),
    };

    let out_dir = flags
        .out_dir
        .clone()
        .or(raw.paths.out_dir)
        .or_else(|| std::env::var(OUT_DIR_ENV).ok())
        .unwrap_or_else(|| "runs/default".to_string());

    Ok(RunConfig {
        model_kind,
        schedule,
        data,
        network,
        train,
        attack,
        attack_step_stride,
        ode,
        sampler,
        out_dir: PathBuf::from(out_dir),
    })
}
