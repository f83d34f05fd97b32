//! The five pipeline commands. Every command echoes its resolved config,
//! stamps outputs with the run fingerprint, and leaves all artifacts under
//! the run's output directory:
//!
//! ```text
//! out_dir/
//!   dataset.csv            gen-data
//!   checkpoint.json        train
//!   loss_history.csv       train
//!   loss_scores.csv        attack-loss
//!   likelihood_scores.csv  attack-likelihood
//!   report/                report
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use diffaudit_core::attacks::{attack_steps, likelihood_attack_scores, loss_attack_scores};
use diffaudit_core::data::{
    self, load_checkpoint, load_dataset, load_scores, save_checkpoint, save_dataset,
    save_likelihood_scores, save_loss_history, save_loss_scores, save_roc_csv, save_samples,
    scores_by_step, ScoreFile,
};
use diffaudit_core::error::{AuditError, Result};
use diffaudit_core::metrics::{frechet_distance, roc, RocReport};
use diffaudit_core::sampler::generate;
use diffaudit_core::schedules::Schedule;
use diffaudit_core::scorenet::{Checkpoint, ScoreNetwork, TargetModel, TrainMeta};
use diffaudit_core::trainer::train;
use diffaudit_core::Dataset;

use crate::config::RunConfig;
use crate::report;

const DATASET_FILE: &str = "dataset.csv";
const CHECKPOINT_FILE: &str = "checkpoint.json";
const LOSS_HISTORY_FILE: &str = "loss_history.csv";
const LOSS_SCORES_FILE: &str = "loss_scores.csv";
const LIKELIHOOD_SCORES_FILE: &str = "likelihood_scores.csv";

fn ensure_out_dir(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|source| AuditError::Io {
        path: cfg.out_dir.display().to_string(),
        source,
    })
}

fn echo_config(cfg: &RunConfig, command: &str) {
    println!("# diffaudit {command}");
    println!("# fingerprint: {}", cfg.fingerprint());
    for line in cfg.to_toml().lines() {
        println!("# {line}");
    }
}

fn load_run_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg.out_dir.join(DATASET_FILE);
    let (dataset, _) = load_dataset(&path)?;
    Ok(dataset)
}

fn load_run_model(cfg: &RunConfig) -> Result<(TargetModel<f64>, Checkpoint)> {
    let path = cfg.out_dir.join(CHECKPOINT_FILE);
    let ckpt = load_checkpoint(&path)?;
    let model = ckpt.into_model()?;
    Ok((model, ckpt))
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    echo_config(cfg, "gen-data");
    ensure_out_dir(cfg)?;
    let dataset: Dataset = data::generate_dataset(
        &cfg.data.generator,
        cfg.data.n_members,
        cfg.data.n_nonmembers,
        cfg.data.seed,
    )?;
    let path = cfg.out_dir.join(DATASET_FILE);
    save_dataset(&path, &dataset, &cfg.fingerprint())?;
    println!(
        "wrote {} ({} members, {} nonmembers, generator {})",
        path.display(),
        dataset.member_indices.len(),
        dataset.nonmember_indices.len(),
        dataset.generator_name,
    );
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    echo_config(cfg, "train");
    ensure_out_dir(cfg)?;
    let dataset = load_run_dataset(cfg)?;
    let members = dataset.members();
    cfg.train.validate(members.shape()[0])?;

    let schedule: Schedule<f64> = cfg.schedule.build()?;
    let mut net = ScoreNetwork::new(
        dataset.dim(),
        &cfg.network.hidden,
        cfg.network.time_embed_width,
        cfg.param_kind(),
        cfg.network.init_seed,
    )?;
    let history = train(&mut net, &members, &cfg.train, &schedule)?;
    let model = TargetModel::new(net, cfg.schedule.clone())?;

    let meta = TrainMeta {
        steps: cfg.train.steps,
        seed: cfg.train.seed,
        dataset_fingerprint: dataset.fingerprint(),
    };
    let ckpt = Checkpoint::from_model(&model, meta, cfg.fingerprint());
    save_checkpoint(&cfg.out_dir.join(CHECKPOINT_FILE), &ckpt)?;
    save_loss_history(&cfg.out_dir.join(LOSS_HISTORY_FILE), &history, &cfg.fingerprint())?;

    let final_loss = history.entries.last().map(|&(_, l)| l).unwrap_or(f64::NAN);
    println!(
        "trained {} for {} steps ({}), final mean loss {final_loss:.6}",
        cfg.model_kind.name(),
        cfg.train.steps,
        if cfg.train.dp.is_some() { "dp-sgd" } else { "adam" },
    );
    Ok(())
}

pub fn cmd_attack_loss(cfg: &RunConfig) -> Result<()> {
    echo_config(cfg, "attack-loss");
    ensure_out_dir(cfg)?;
    let dataset = load_run_dataset(cfg)?;
    let (model, _) = load_run_model(cfg)?;

    let all_steps = attack_steps(model.schedule(), &cfg.attack);
    let steps: Vec<_> = all_steps
        .iter()
        .copied()
        .step_by(cfg.attack_step_stride)
        .collect();
    let profile = loss_attack_scores(
        &model,
        &dataset.members(),
        &dataset.nonmembers(),
        &steps,
        &cfg.attack,
    )?;
    let path = cfg.out_dir.join(LOSS_SCORES_FILE);
    save_loss_scores(&path, &profile, &cfg.fingerprint())?;
    println!(
        "wrote {} ({} steps x {} samples)",
        path.display(),
        profile.steps.len(),
        dataset.member_indices.len() + dataset.nonmember_indices.len(),
    );
    Ok(())
}

pub fn cmd_attack_likelihood(cfg: &RunConfig) -> Result<()> {
    echo_config(cfg, "attack-likelihood");
    ensure_out_dir(cfg)?;
    let dataset = load_run_dataset(cfg)?;
    let (model, _) = load_run_model(cfg)?;

    let members = dataset.members();
    let nonmembers = dataset.nonmembers();
    let outcome = likelihood_attack_scores(&model, &members, &nonmembers, &cfg.ode)?;
    let path = cfg.out_dir.join(LIKELIHOOD_SCORES_FILE);
    save_likelihood_scores(
        &path,
        &outcome,
        members.shape()[0],
        dataset.dim(),
        &cfg.fingerprint(),
    )?;
    println!(
        "wrote {} ({} member / {} nonmember scores, {} excluded)",
        path.display(),
        outcome.scores.member_scores.len(),
        outcome.scores.nonmember_scores.len(),
        outcome.excluded_members + outcome.excluded_nonmembers,
    );
    Ok(())
}

fn check_single_fingerprint(files: &[(&PathBuf, &str)]) -> Result<String> {
    let mut fingerprint: Option<&str> = None;
    for (path, fp) in files {
        match fingerprint {
            None => fingerprint = Some(fp),
            Some(existing) if existing == *fp => {}
            Some(existing) => {
                return Err(AuditError::Contract(format!(
                    "mixed-fingerprint inputs: {} carries {fp}, expected {existing}",
                    path.display()
                )))
            }
        }
    }
    fingerprint
        .map(str::to_string)
        .ok_or_else(|| AuditError::Contract("report needs at least one score file".into()))
}

pub fn cmd_report(cfg: &RunConfig, score_paths: &[PathBuf]) -> Result<()> {
    echo_config(cfg, "report");
    ensure_out_dir(cfg)?;
    let report_dir = cfg.out_dir.join("report");
    std::fs::create_dir_all(&report_dir).map_err(|source| AuditError::Io {
        path: report_dir.display().to_string(),
        source,
    })?;

    // default inputs: whichever score files the run directory holds
    let mut paths: Vec<PathBuf> = if score_paths.is_empty() {
        [LOSS_SCORES_FILE, LIKELIHOOD_SCORES_FILE]
            .iter()
            .map(|f| cfg.out_dir.join(f))
            .filter(|p| p.exists())
            .collect()
    } else {
        score_paths.to_vec()
    };
    paths.sort();
    if paths.is_empty() {
        return Err(AuditError::Contract(
            "no score files found; run attack-loss or attack-likelihood first".into(),
        ));
    }

    let files: Vec<(PathBuf, ScoreFile)> = paths
        .iter()
        .map(|p| load_scores(p).map(|f| (p.clone(), f)))
        .collect::<Result<Vec<_>>>()?;
    let fingerprint = check_single_fingerprint(
        &files
            .iter()
            .map(|(p, f)| (p, f.meta.fingerprint.as_str()))
            .collect::<Vec<_>>(),
    )?;

    let mut summary = String::new();
    let _ = writeln!(summary, "diffaudit report (fingerprint {fingerprint})");
    let _ = writeln!(summary, "model: {}", cfg.model_kind.name());
    let mut floor_note: Option<String> = None;

    for (path, file) in &files {
        let attack = file
            .meta
            .extra
            .iter()
            .find(|(k, _)| k == "attack")
            .map(|(_, v)| v.as_str())
            .unwrap_or("unknown");
        match attack {
            "loss" => {
                let grouped = scores_by_step(file)?;
                let rows: Vec<(f64, RocReport<f64>)> = grouped
                    .iter()
                    .map(|(step, set)| roc(set).map(|r| (*step, r)))
                    .collect::<Result<Vec<_>>>()?;

                let tpr_csv = report::tpr_vs_step_csv(&rows, &fingerprint);
                let tpr_path = report_dir.join("tpr_vs_step.csv");
                std::fs::write(&tpr_path, tpr_csv).map_err(|source| AuditError::Io {
                    path: tpr_path.display().to_string(),
                    source,
                })?;

                let _ = writeln!(summary, "\nloss-based attack ({} steps)", rows.len());
                let _ = writeln!(summary, "{}", report::summary_header());
                for idx in report::select_summary_steps(&rows) {
                    let (step, r) = &rows[idx];
                    let _ = writeln!(summary, "{}", report::summary_row(&format!("{step}"), r));
                    let roc_path = report_dir.join(format!("roc_step_{step}.csv"));
                    save_roc_csv(&roc_path, r, &fingerprint)?;
                    floor_note
                        .get_or_insert_with(|| report::floor_footnote(r.n_nonmembers));
                }
            }
            "likelihood" => {
                let set = data::likelihood_score_set(file)?;
                let r = roc(&set)?;
                let _ = writeln!(summary, "\nlikelihood-based attack");
                let _ = writeln!(summary, "{}", report::summary_header());
                let _ = writeln!(summary, "{}", report::summary_row("likelihood", &r));
                save_roc_csv(&report_dir.join("roc_likelihood.csv"), &r, &fingerprint)?;
                floor_note.get_or_insert_with(|| report::floor_footnote(r.n_nonmembers));
            }
            other => {
                return Err(AuditError::Schema {
                    path: path.display().to_string(),
                    detail: format!("unknown attack kind '{other}'"),
                })
            }
        }
    }

    // model quality: Frechet distance between fresh samples and the members
    if cfg.out_dir.join(CHECKPOINT_FILE).exists() {
        let dataset = load_run_dataset(cfg)?;
        let (model, _) = load_run_model(cfg)?;
        let samples = generate(&model, &cfg.sampler)?;
        save_samples(&cfg.out_dir.join("samples.csv"), &samples, &fingerprint)?;
        let quality = frechet_distance(&samples, &dataset.members())?;
        let _ = writeln!(
            summary,
            "\nmodel quality: frechet_distance(generated, members) = {quality:.6} \
             ({} samples)",
            samples.shape()[0],
        );
    }

    if let Some(note) = floor_note {
        let _ = writeln!(summary, "\n{note}");
    }

    let summary_path = report_dir.join("summary.txt");
    std::fs::write(&summary_path, &summary).map_err(|source| AuditError::Io {
        path: summary_path.display().to_string(),
        source,
    })?;
    print!("{summary}");
    println!("wrote {}", summary_path.display());
    Ok(())
}
