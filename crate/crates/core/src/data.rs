//! Toy dataset generation, member/nonmember splitting, and persistence for
//! every artifact the pipeline produces.
//!
//! Members and nonmembers are i.i.d. draws from the same seeded generator;
//! the split carries no distribution shift, only held-out status. Points
//! are standardized to zero mean / unit variance over the member set.
//!
//! File formats: CSVs carry a `#diffaudit-csv v<version>` metadata line
//! with the resolved-config fingerprint; the checkpoint is a JSON document
//! (see `scorenet::Checkpoint`). Floats are printed in shortest
//! round-trip form, so parsed values are bit-identical to what was saved.
//! Readers reject unknown versions instead of guessing.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::attacks::{AttackScoreSet, LikelihoodAttackOutcome, Orientation, Provenance, StepProfile};
use crate::error::{AuditError, Result};
use crate::likelihood::bits_per_dim;
use crate::metrics::RocReport;
use crate::scalar::Scalar;
use crate::scorenet::{Checkpoint, CHECKPOINT_VERSION};
use crate::tensor::Tensor;
use crate::trainer::LossHistory;

pub const CSV_FORMAT_VERSION: u32 = 1;

/// A generated point set with its member/nonmember split.
#[derive(Debug, Clone)]
pub struct Dataset<F> {
    pub points: Tensor<F>,
    pub generator_name: String,
    pub seed: u64,
    pub member_indices: Vec<usize>,
    pub nonmember_indices: Vec<usize>,
}

impl<F: Scalar> Dataset<F> {
    fn validate(&self) -> Result<()> {
        let n = self.points.shape()[0];
        let member_set: HashSet<usize> = self.member_indices.iter().copied().collect();
        for idx in &self.nonmember_indices {
            if member_set.contains(idx) {
                return Err(AuditError::Contract(format!(
                    "index {idx} appears in both member and nonmember splits"
                )));
            }
        }
        if self
            .member_indices
            .iter()
            .chain(&self.nonmember_indices)
            .any(|&i| i >= n)
        {
            return Err(AuditError::Contract("split index out of range".into()));
        }
        Ok(())
    }

    fn gather(&self, indices: &[usize]) -> Tensor<F> {
        let m = self.points.shape()[1];
        let mut data = Vec::with_capacity(indices.len() * m);
        for &i in indices {
            data.extend_from_slice(&self.points.data()[i * m..(i + 1) * m]);
        }
        Tensor::from_parts(vec![indices.len(), m], data)
    }

    pub fn members(&self) -> Tensor<F> {
        self.gather(&self.member_indices)
    }

    pub fn nonmembers(&self) -> Tensor<F> {
        self.gather(&self.nonmember_indices)
    }

    pub fn dim(&self) -> usize {
        self.points.shape()[1]
    }

    /// Content hash for provenance tagging of checkpoints and reports.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.generator_name.as_bytes());
        hasher.update(self.seed.to_le_bytes());
        hasher.update((self.member_indices.len() as u64).to_le_bytes());
        hasher.update((self.nonmember_indices.len() as u64).to_le_bytes());
        for v in self.points.data() {
            hasher.update(v.to_f64_lossy().to_bits().to_le_bytes());
        }
        hex_prefix(&hasher.finalize())
    }
}

fn hex_prefix(bytes: &[u8]) -> String {
    bytes.iter().take(8).fold(String::new(), |mut acc, b| {
        let _ = write!(acc, "{b:02x}");
        acc
    })
}

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

const GENERATOR_NAMES: [&str; 4] = ["ring8", "moons", "spiral", "gauss_grid"];

fn raw_point(name: &str, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    match name {
        "ring8" => {
            let mode = rng.random_range(0..8usize);
            let angle = 2.0 * std::f64::consts::PI * mode as f64 / 8.0;
            (
                2.0 * angle.cos() + 0.15 * normal(rng),
                2.0 * angle.sin() + 0.15 * normal(rng),
            )
        }
        "moons" => {
            let t = rng.random_range(0.0..std::f64::consts::PI);
            let upper = rng.random_range(0..2usize) == 0;
            let (cx, cy) = if upper {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            (cx + 0.08 * normal(rng), cy + 0.08 * normal(rng))
        }
        "spiral" => {
            let t = rng.random_range(0.5..3.0 * std::f64::consts::PI);
            let r = t / (3.0 * std::f64::consts::PI);
            (
                2.0 * r * t.cos() + 0.05 * normal(rng),
                2.0 * r * t.sin() + 0.05 * normal(rng),
            )
        }
        "gauss_grid" => {
            let gx = rng.random_range(0..5usize) as f64 - 2.0;
            let gy = rng.random_range(0..5usize) as f64 - 2.0;
            (gx + 0.08 * normal(rng), gy + 0.08 * normal(rng))
        }
        _ => unreachable!("validated before drawing"),
    }
}

/// Generate a standardized 2-D dataset with disjoint member/nonmember
/// splits drawn i.i.d. from the same distribution. Bit-identical for the
/// same (generator, seed, counts).
pub fn generate_dataset<F: Scalar>(
    generator_name: &str,
    n_members: usize,
    n_nonmembers: usize,
    seed: u64,
) -> Result<Dataset<F>> {
    if !GENERATOR_NAMES.contains(&generator_name) {
        return Err(AuditError::Config(format!(
            "unknown generator '{generator_name}' (expected one of {GENERATOR_NAMES:?})"
        )));
    }
    if n_members < 1 || n_nonmembers < 1 {
        return Err(AuditError::Config("need at least one member and one nonmember".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = n_members + n_nonmembers;
    let mut raw = Vec::with_capacity(total * 2);
    for _ in 0..total {
        let (x, y) = raw_point(generator_name, &mut rng);
        raw.push(x);
        raw.push(y);
    }
    // standardize with member statistics (population variance)
    let mut mean = [0.0f64; 2];
    for i in 0..n_members {
        mean[0] += raw[2 * i];
        mean[1] += raw[2 * i + 1];
    }
    mean[0] /= n_members as f64;
    mean[1] /= n_members as f64;
    let mut var = [0.0f64; 2];
    for i in 0..n_members {
        var[0] += (raw[2 * i] - mean[0]).powi(2);
        var[1] += (raw[2 * i + 1] - mean[1]).powi(2);
    }
    let std = [
        (var[0] / n_members as f64).sqrt().max(1e-12),
        (var[1] / n_members as f64).sqrt().max(1e-12),
    ];
    let data: Vec<F> = raw
        .iter()
        .enumerate()
        .map(|(i, &v)| F::lit((v - mean[i % 2]) / std[i % 2]))
        .collect();

    let dataset = Dataset {
        points: Tensor::from_parts(vec![total, 2], data),
        generator_name: generator_name.to_string(),
        seed,
        member_indices: (0..n_members).collect(),
        nonmember_indices: (n_members..total).collect(),
    };
    dataset.validate()?;
    Ok(dataset)
}

// ---------------------------------------------------------------------------
// CSV plumbing
// ---------------------------------------------------------------------------

fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        // only NaN scores are contract errors upstream; +-inf never printed
        format!("{v:?}")
    }
}

fn meta_line(kind: &str, fingerprint: &str, extra: &[(&str, String)]) -> String {
    let mut line = format!("#diffaudit-csv v{CSV_FORMAT_VERSION} kind={kind} fingerprint={fingerprint}");
    for (k, v) in extra {
        let _ = write!(line, " {k}={v}");
    }
    line
}

/// Parsed metadata line of any of our CSV formats.
#[derive(Debug, Clone)]
pub struct CsvMeta {
    pub version: u32,
    pub kind: String,
    pub fingerprint: String,
    pub extra: Vec<(String, String)>,
}

fn parse_meta(path: &str, line: &str) -> Result<CsvMeta> {
    let schema_err = |detail: &str| AuditError::Schema {
        path: path.to_string(),
        detail: detail.to_string(),
    };
    let rest = line
        .strip_prefix("#diffaudit-csv v")
        .ok_or_else(|| schema_err("missing #diffaudit-csv metadata line"))?;
    let mut parts = rest.split_whitespace();
    let version: u32 = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| schema_err("unparseable format version"))?;
    if version != CSV_FORMAT_VERSION {
        return Err(AuditError::Version { found: version, supported: CSV_FORMAT_VERSION });
    }
    let mut kind = None;
    let mut fingerprint = None;
    let mut extra = Vec::new();
    for kv in parts {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| schema_err("malformed metadata entry"))?;
        match k {
            "kind" => kind = Some(v.to_string()),
            "fingerprint" => fingerprint = Some(v.to_string()),
            _ => extra.push((k.to_string(), v.to_string())),
        }
    }
    Ok(CsvMeta {
        version,
        kind: kind.ok_or_else(|| schema_err("metadata missing kind"))?,
        fingerprint: fingerprint.ok_or_else(|| schema_err("metadata missing fingerprint"))?,
        extra,
    })
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    let io_err = |source: std::io::Error| AuditError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::fs::File::create(path).map_err(io_err)?;
    f.write_all(content.as_bytes()).map_err(io_err)?;
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|source| AuditError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(text.lines().map(|l| l.to_string()).collect())
}

fn expect_header(path: &Path, lines: &[String], expected: &str) -> Result<()> {
    if lines.len() < 2 || lines[1] != expected {
        return Err(AuditError::Schema {
            path: path.display().to_string(),
            detail: format!("expected header '{expected}'"),
        });
    }
    Ok(())
}

fn parse_f64(path: &Path, field: &str) -> Result<f64> {
    field.parse().map_err(|_| AuditError::Schema {
        path: path.display().to_string(),
        detail: format!("unparseable float '{field}'"),
    })
}

// ---------------------------------------------------------------------------
// Dataset CSV
// ---------------------------------------------------------------------------

pub fn save_dataset<F: Scalar>(path: &Path, dataset: &Dataset<F>, fingerprint: &str) -> Result<()> {
    dataset.validate()?;
    let mut out = String::new();
    let extra = [
        ("generator", dataset.generator_name.clone()),
        ("seed", dataset.seed.to_string()),
        ("n_members", dataset.member_indices.len().to_string()),
        ("n_nonmembers", dataset.nonmember_indices.len().to_string()),
    ];
    out.push_str(&meta_line("dataset", fingerprint, &extra));
    out.push('\n');
    out.push_str("index,is_member,x0,x1\n");
    let members: HashSet<usize> = dataset.member_indices.iter().copied().collect();
    let m = dataset.dim();
    for i in 0..dataset.points.shape()[0] {
        let _ = write!(
            out,
            "{i},{},{},{}\n",
            u8::from(members.contains(&i)),
            fmt_f64(dataset.points.data()[i * m].to_f64_lossy()),
            fmt_f64(dataset.points.data()[i * m + 1].to_f64_lossy()),
        );
    }
    write_file(path, &out)
}

pub fn load_dataset<F: Scalar>(path: &Path) -> Result<(Dataset<F>, CsvMeta)> {
    let lines = read_lines(path)?;
    let meta = parse_meta(&path.display().to_string(), lines.first().map(String::as_str).unwrap_or(""))?;
    if meta.kind != "dataset" {
        return Err(AuditError::Schema {
            path: path.display().to_string(),
            detail: format!("expected kind=dataset, found {}", meta.kind),
        });
    }
    expect_header(path, &lines, "index,is_member,x0,x1")?;
    let extra_value = |key: &str| -> Result<String> {
        meta.extra
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| AuditError::Schema {
                path: path.display().to_string(),
                detail: format!("metadata missing {key}"),
            })
    };
    let generator_name = extra_value("generator")?;
    let seed: u64 = extra_value("seed")?.parse().map_err(|_| AuditError::Schema {
        path: path.display().to_string(),
        detail: "unparseable seed".into(),
    })?;

    let mut data = Vec::new();
    let mut member_indices = Vec::new();
    let mut nonmember_indices = Vec::new();
    for (row_idx, line) in lines[2..].iter().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(AuditError::Schema {
                path: path.display().to_string(),
                detail: format!("row {row_idx}: expected 4 fields"),
            });
        }
        let is_member = fields[1] == "1";
        if is_member {
            member_indices.push(row_idx);
        } else {
            nonmember_indices.push(row_idx);
        }
        data.push(F::lit(parse_f64(path, fields[2])?));
        data.push(F::lit(parse_f64(path, fields[3])?));
    }
    let n = data.len() / 2;
    let dataset = Dataset {
        points: Tensor::new(vec![n, 2], data)?,
        generator_name,
        seed,
        member_indices,
        nonmember_indices,
    };
    dataset.validate()?;
    Ok((dataset, meta))
}

// ---------------------------------------------------------------------------
// Checkpoint JSON
// ---------------------------------------------------------------------------

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let text = serde_json::to_string_pretty(checkpoint).map_err(|e| AuditError::Schema {
        path: path.display().to_string(),
        detail: format!("serialize failure: {e}"),
    })?;
    write_file(path, &text)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|source| AuditError::Io {
        path: path.display().to_string(),
        source,
    })?;
    // surface version mismatches as VersionError, not a parse failure
    if let Ok(value) = serde_json::from_str::<serde_json::Value>(&text) {
        if let Some(found) = value.get("version").and_then(|v| v.as_u64()) {
            if found as u32 != CHECKPOINT_VERSION {
                return Err(AuditError::Version {
                    found: found as u32,
                    supported: CHECKPOINT_VERSION,
                });
            }
        }
    }
    serde_json::from_str(&text).map_err(|e| AuditError::Schema {
        path: path.display().to_string(),
        detail: format!("checkpoint parse failure: {e}"),
    })
}

// ---------------------------------------------------------------------------
// Score CSVs
// ---------------------------------------------------------------------------

/// One row of a loss-attack score file.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub sample_id: u64,
    pub is_member: bool,
    /// Step index (discrete) or continuous time; `None` for likelihood rows.
    pub step: Option<f64>,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct ScoreFile {
    pub meta: CsvMeta,
    pub orientation: Orientation,
    pub rows: Vec<ScoreRow>,
}

fn orientation_name(o: Orientation) -> &'static str {
    match o {
        Orientation::HigherIsMember => "higher_is_member",
        Orientation::LowerIsMember => "lower_is_member",
    }
}

fn parse_orientation(path: &Path, s: &str) -> Result<Orientation> {
    match s {
        "higher_is_member" => Ok(Orientation::HigherIsMember),
        "lower_is_member" => Ok(Orientation::LowerIsMember),
        other => Err(AuditError::Schema {
            path: path.display().to_string(),
            detail: format!("unknown orientation '{other}'"),
        }),
    }
}

/// Loss-attack scores: every (sample, step) pair in one file.
/// Sample ids follow the attack convention: members first, then nonmembers.
pub fn save_loss_scores<F: Scalar>(
    path: &Path,
    profile: &StepProfile<F>,
    fingerprint: &str,
) -> Result<()> {
    let mut out = String::new();
    let orientation = profile
        .sets
        .first()
        .map(|s| s.orientation)
        .ok_or_else(|| AuditError::Contract("empty step profile".into()))?;
    let extra = [
        ("attack", "loss".to_string()),
        ("orientation", orientation_name(orientation).to_string()),
    ];
    out.push_str(&meta_line("scores", fingerprint, &extra));
    out.push('\n');
    out.push_str("sample_id,is_member,step_or_NA,score,orientation\n");
    for (tp, set) in profile.steps.iter().zip(&profile.sets) {
        let step = fmt_f64(tp.as_report_value());
        let o = orientation_name(set.orientation);
        for (i, s) in set.member_scores.iter().enumerate() {
            let _ = write!(out, "{i},1,{step},{},{o}\n", fmt_f64(s.to_f64_lossy()));
        }
        let base = set.member_scores.len();
        for (i, s) in set.nonmember_scores.iter().enumerate() {
            let _ = write!(out, "{},0,{step},{},{o}\n", base + i, fmt_f64(s.to_f64_lossy()));
        }
    }
    write_file(path, &out)
}

/// Likelihood scores: `sample_id, is_member, log_likelihood_nats,
/// bits_per_dim`.
pub fn save_likelihood_scores<F: Scalar>(
    path: &Path,
    outcome: &LikelihoodAttackOutcome<F>,
    n_member_inputs: usize,
    dim: usize,
    fingerprint: &str,
) -> Result<()> {
    let mut out = String::new();
    let extra = [
        ("attack", "likelihood".to_string()),
        ("orientation", orientation_name(outcome.scores.orientation).to_string()),
        ("excluded_members", outcome.excluded_members.to_string()),
        ("excluded_nonmembers", outcome.excluded_nonmembers.to_string()),
    ];
    out.push_str(&meta_line("scores", fingerprint, &extra));
    out.push('\n');
    out.push_str("sample_id,is_member,log_likelihood_nats,bits_per_dim\n");
    for &(id, v) in &outcome.per_sample {
        let nats = v.to_f64_lossy();
        let _ = write!(
            out,
            "{id},{},{},{}\n",
            u8::from((id as usize) < n_member_inputs),
            fmt_f64(nats),
            fmt_f64(bits_per_dim(nats, dim)),
        );
    }
    write_file(path, &out)
}

/// Load either score format into a uniform row list.
pub fn load_scores(path: &Path) -> Result<ScoreFile> {
    let lines = read_lines(path)?;
    let meta = parse_meta(&path.display().to_string(), lines.first().map(String::as_str).unwrap_or(""))?;
    if meta.kind != "scores" {
        return Err(AuditError::Schema {
            path: path.display().to_string(),
            detail: format!("expected kind=scores, found {}", meta.kind),
        });
    }
    let attack = meta
        .extra
        .iter()
        .find(|(k, _)| k == "attack")
        .map(|(_, v)| v.clone())
        .ok_or_else(|| AuditError::Schema {
            path: path.display().to_string(),
            detail: "metadata missing attack".into(),
        })?;
    let orientation_str = meta
        .extra
        .iter()
        .find(|(k, _)| k == "orientation")
        .map(|(_, v)| v.clone())
        .ok_or_else(|| AuditError::Schema {
            path: path.display().to_string(),
            detail: "metadata missing orientation".into(),
        })?;
    let orientation = parse_orientation(path, &orientation_str)?;

    let mut rows = Vec::new();
    match attack.as_str() {
        "loss" => {
            expect_header(path, &lines, "sample_id,is_member,step_or_NA,score,orientation")?;
            for line in &lines[2..] {
                if line.is_empty() {
                    continue;
                }
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 5 {
                    return Err(AuditError::Schema {
                        path: path.display().to_string(),
                        detail: "loss score row needs 5 fields".into(),
                    });
                }
                rows.push(ScoreRow {
                    sample_id: f[0].parse().map_err(|_| AuditError::Schema {
                        path: path.display().to_string(),
                        detail: "unparseable sample_id".into(),
                    })?,
                    is_member: f[1] == "1",
                    step: Some(parse_f64(path, f[2])?),
                    score: parse_f64(path, f[3])?,
                });
            }
        }
        "likelihood" => {
            expect_header(path, &lines, "sample_id,is_member,log_likelihood_nats,bits_per_dim")?;
            for line in &lines[2..] {
                if line.is_empty() {
                    continue;
                }
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 4 {
                    return Err(AuditError::Schema {
                        path: path.display().to_string(),
                        detail: "likelihood score row needs 4 fields".into(),
                    });
                }
                rows.push(ScoreRow {
                    sample_id: f[0].parse().map_err(|_| AuditError::Schema {
                        path: path.display().to_string(),
                        detail: "unparseable sample_id".into(),
                    })?,
                    is_member: f[1] == "1",
                    step: None,
                    score: parse_f64(path, f[2])?,
                });
            }
        }
        other => {
            return Err(AuditError::Schema {
                path: path.display().to_string(),
                detail: format!("unknown attack kind '{other}'"),
            })
        }
    }
    Ok(ScoreFile { meta, orientation, rows })
}

/// Group loaded loss scores back into per-step score sets, in step order.
pub fn scores_by_step(file: &ScoreFile) -> Result<Vec<(f64, AttackScoreSet<f64>)>> {
    let mut steps: Vec<f64> = Vec::new();
    for row in &file.rows {
        let step = row.step.ok_or_else(|| {
            AuditError::Contract("scores_by_step needs loss-attack rows".into())
        })?;
        if !steps.contains(&step) {
            steps.push(step);
        }
    }
    steps.sort_by(|a, b| a.partial_cmp(b).expect("finite steps"));
    steps
        .into_iter()
        .map(|step| {
            let members: Vec<f64> = file
                .rows
                .iter()
                .filter(|r| r.step == Some(step) && r.is_member)
                .map(|r| r.score)
                .collect();
            let nonmembers: Vec<f64> = file
                .rows
                .iter()
                .filter(|r| r.step == Some(step) && !r.is_member)
                .map(|r| r.score)
                .collect();
            Ok((
                step,
                AttackScoreSet::new(
                    members,
                    nonmembers,
                    file.orientation,
                    Provenance::LossAtStep(step),
                )?,
            ))
        })
        .collect()
}

/// Rebuild one score set from likelihood rows.
pub fn likelihood_score_set(file: &ScoreFile) -> Result<AttackScoreSet<f64>> {
    let members: Vec<f64> = file.rows.iter().filter(|r| r.is_member).map(|r| r.score).collect();
    let nonmembers: Vec<f64> =
        file.rows.iter().filter(|r| !r.is_member).map(|r| r.score).collect();
    AttackScoreSet::new(members, nonmembers, file.orientation, Provenance::Likelihood)
}

// ---------------------------------------------------------------------------
// Loss history, samples, ROC
// ---------------------------------------------------------------------------

pub fn save_loss_history(path: &Path, history: &LossHistory, fingerprint: &str) -> Result<()> {
    let mut out = String::new();
    out.push_str(&meta_line("loss_history", fingerprint, &[]));
    out.push('\n');
    out.push_str("step,mean_loss\n");
    for &(step, loss) in &history.entries {
        let _ = write!(out, "{step},{}\n", fmt_f64(loss));
    }
    write_file(path, &out)
}

pub fn save_samples<F: Scalar>(path: &Path, samples: &Tensor<F>, fingerprint: &str) -> Result<()> {
    let mut out = String::new();
    out.push_str(&meta_line("samples", fingerprint, &[]));
    out.push('\n');
    out.push_str("x0,x1\n");
    let m = samples.shape()[1];
    for i in 0..samples.shape()[0] {
        let _ = write!(
            out,
            "{},{}\n",
            fmt_f64(samples.data()[i * m].to_f64_lossy()),
            fmt_f64(samples.data()[i * m + 1].to_f64_lossy()),
        );
    }
    write_file(path, &out)
}

pub fn load_samples<F: Scalar>(path: &Path) -> Result<(Tensor<F>, CsvMeta)> {
    let lines = read_lines(path)?;
    let meta = parse_meta(&path.display().to_string(), lines.first().map(String::as_str).unwrap_or(""))?;
    if meta.kind != "samples" {
        return Err(AuditError::Schema {
            path: path.display().to_string(),
            detail: format!("expected kind=samples, found {}", meta.kind),
        });
    }
    expect_header(path, &lines, "x0,x1")?;
    let mut data = Vec::new();
    for line in &lines[2..] {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 2 {
            return Err(AuditError::Schema {
                path: path.display().to_string(),
                detail: "sample row needs 2 fields".into(),
            });
        }
        data.push(F::lit(parse_f64(path, f[0])?));
        data.push(F::lit(parse_f64(path, f[1])?));
    }
    let n = data.len() / 2;
    Ok((Tensor::new(vec![n, 2], data)?, meta))
}

pub fn save_roc_csv<F: Scalar>(path: &Path, report: &RocReport<F>, fingerprint: &str) -> Result<()> {
    let mut out = String::new();
    let extra = [
        ("n_members", report.n_members.to_string()),
        ("n_nonmembers", report.n_nonmembers.to_string()),
        ("auc", fmt_f64(report.auc.to_f64_lossy())),
    ];
    out.push_str(&meta_line("roc", fingerprint, &extra));
    out.push('\n');
    out.push_str("fpr,tpr\n");
    for &(fpr, tpr) in &report.points {
        let _ = write!(out, "{},{}\n", fmt_f64(fpr.to_f64_lossy()), fmt_f64(tpr.to_f64_lossy()));
    }
    write_file(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedules::TimePoint;
    use proptest::prelude::*;
    use tempdir::tmpdir;

    /// Minimal scoped temp-dir helper for persistence tests.
    mod tempdir {
        use std::path::PathBuf;
        use std::sync::atomic::{AtomicU64, Ordering};

        static COUNTER: AtomicU64 = AtomicU64::new(0);

        pub struct TmpDir(pub PathBuf);
        impl Drop for TmpDir {
            fn drop(&mut self) {
                let _ = std::fs::remove_dir_all(&self.0);
            }
        }

        pub fn tmpdir(tag: &str) -> TmpDir {
            let id = COUNTER.fetch_add(1, Ordering::SeqCst);
            let dir = std::env::temp_dir().join(format!(
                "diffaudit-test-{tag}-{}-{id}",
                std::process::id()
            ));
            std::fs::create_dir_all(&dir).expect("create temp dir");
            TmpDir(dir)
        }
    }

    #[test]
    fn ring8_mode_counts_follow_multinomial() {
        let ds: Dataset<f64> = generate_dataset("ring8", 8000, 10, 1).unwrap();
        let members = ds.members();
        let mut counts = [0usize; 8];
        for i in 0..8000 {
            let (x, y) = (members.data()[2 * i], members.data()[2 * i + 1]);
            let angle = y.atan2(x);
            let sector = ((angle / (2.0 * std::f64::consts::PI / 8.0)).round() as i64)
                .rem_euclid(8) as usize;
            counts[sector] += 1;
        }
        let expected = 1000.0;
        let sigma = (8000.0f64 * (1.0 / 8.0) * (7.0 / 8.0)).sqrt();
        for (mode, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - expected).abs() < 4.0 * sigma,
                "mode {mode}: {c} vs {expected} (sigma {sigma})"
            );
        }
    }

    #[test]
    fn regeneration_is_bit_identical() {
        for name in GENERATOR_NAMES {
            let a: Dataset<f64> = generate_dataset(name, 32, 32, 7).unwrap();
            let b: Dataset<f64> = generate_dataset(name, 32, 32, 7).unwrap();
            assert_eq!(a.points.data(), b.points.data(), "{name}");
            let c: Dataset<f64> = generate_dataset(name, 32, 32, 8).unwrap();
            assert_ne!(a.points.data(), c.points.data(), "{name}");
        }
    }

    #[test]
    fn members_are_standardized() {
        let ds: Dataset<f64> = generate_dataset("moons", 500, 100, 3).unwrap();
        let members = ds.members();
        for d in 0..2 {
            let vals: Vec<f64> = members.data().iter().skip(d).step_by(2).copied().collect();
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-10, "dim {d} mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-10, "dim {d} std {}", var.sqrt());
        }
    }

    #[test]
    fn unknown_generator_is_config_error() {
        assert!(matches!(
            generate_dataset::<f64>("rings9", 4, 4, 0),
            Err(AuditError::Config(_))
        ));
    }

    #[test]
    fn splits_are_disjoint_by_construction() {
        let ds: Dataset<f64> = generate_dataset("spiral", 40, 60, 5).unwrap();
        let members: HashSet<usize> = ds.member_indices.iter().copied().collect();
        assert!(ds.nonmember_indices.iter().all(|i| !members.contains(i)));
        assert_eq!(ds.member_indices.len(), 40);
        assert_eq!(ds.nonmember_indices.len(), 60);
        // overlapping splits are rejected on construction
        let mut bad = ds.clone();
        bad.nonmember_indices[0] = bad.member_indices[0];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn dataset_round_trip_is_bit_identical() {
        let dir = tmpdir("dataset");
        let ds: Dataset<f64> = generate_dataset("gauss_grid", 16, 24, 11).unwrap();
        let path = dir.0.join("data.csv");
        save_dataset(&path, &ds, "fp123").unwrap();
        let (back, meta) = load_dataset::<f64>(&path).unwrap();
        assert_eq!(meta.fingerprint, "fp123");
        assert_eq!(ds.points.data(), back.points.data());
        assert_eq!(ds.member_indices, back.member_indices);
        assert_eq!(ds.nonmember_indices, back.nonmember_indices);
        assert_eq!(ds.generator_name, back.generator_name);
        assert_eq!(ds.seed, back.seed);
    }

    #[test]
    fn dataset_fingerprint_tracks_content() {
        let a: Dataset<f64> = generate_dataset("ring8", 8, 8, 1).unwrap();
        let b: Dataset<f64> = generate_dataset("ring8", 8, 8, 1).unwrap();
        let c: Dataset<f64> = generate_dataset("ring8", 8, 8, 2).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn version_mismatch_is_version_error() {
        let dir = tmpdir("version");
        let path = dir.0.join("bad.csv");
        std::fs::write(
            &path,
            "#diffaudit-csv v99 kind=dataset fingerprint=x generator=ring8 seed=0\nindex,is_member,x0,x1\n",
        )
        .unwrap();
        match load_dataset::<f64>(&path) {
            Err(AuditError::Version { found, supported }) => {
                assert_eq!(found, 99);
                assert_eq!(supported, CSV_FORMAT_VERSION);
            }
            other => panic!("expected VersionError, got {other:?}"),
        }
    }

    #[test]
    fn malformed_file_is_schema_error_not_io_error() {
        let dir = tmpdir("schema");
        let path = dir.0.join("garbage.csv");
        std::fs::write(&path, "not a diffaudit file\n1,2,3\n").unwrap();
        assert!(matches!(load_dataset::<f64>(&path), Err(AuditError::Schema { .. })));
        let missing = dir.0.join("missing.csv");
        assert!(matches!(load_dataset::<f64>(&missing), Err(AuditError::Io { .. })));
    }

    #[test]
    fn loss_scores_round_trip() {
        let dir = tmpdir("scores");
        let profile = StepProfile {
            steps: vec![TimePoint::<f64>::Step(3), TimePoint::Step(7)],
            sets: vec![
                AttackScoreSet::new(
                    vec![0.125, 0.25],
                    vec![0.5, 0.75],
                    Orientation::LowerIsMember,
                    Provenance::LossAtStep(3.0),
                )
                .unwrap(),
                AttackScoreSet::new(
                    vec![0.1, 0.2],
                    vec![0.3, 0.4],
                    Orientation::LowerIsMember,
                    Provenance::LossAtStep(7.0),
                )
                .unwrap(),
            ],
        };
        let path = dir.0.join("loss.csv");
        save_loss_scores(&path, &profile, "fpX").unwrap();
        let file = load_scores(&path).unwrap();
        assert_eq!(file.meta.fingerprint, "fpX");
        assert_eq!(file.orientation, Orientation::LowerIsMember);
        let grouped = scores_by_step(&file).unwrap();
        assert_eq!(grouped.len(), 2);
        assert_eq!(grouped[0].1.member_scores, vec![0.125, 0.25]);
        assert_eq!(grouped[1].1.nonmember_scores, vec![0.3, 0.4]);
    }

    #[test]
    fn likelihood_scores_round_trip() {
        let dir = tmpdir("lik");
        let outcome = LikelihoodAttackOutcome {
            scores: AttackScoreSet::new(
                vec![-1.5, -2.5],
                vec![-9.0],
                Orientation::HigherIsMember,
                Provenance::Likelihood,
            )
            .unwrap(),
            excluded_members: 0,
            excluded_nonmembers: 1,
            per_sample: vec![(0, -1.5), (1, -2.5), (2, -9.0)],
        };
        let path = dir.0.join("lik.csv");
        save_likelihood_scores(&path, &outcome, 2, 2, "fpY").unwrap();
        let file = load_scores(&path).unwrap();
        assert_eq!(file.rows.len(), 3);
        assert!(file.rows[0].is_member && !file.rows[2].is_member);
        let set = likelihood_score_set(&file).unwrap();
        assert_eq!(set.member_scores, vec![-1.5, -2.5]);
        assert_eq!(set.nonmember_scores, vec![-9.0]);
        let excl: Vec<&(String, String)> = file
            .meta
            .extra
            .iter()
            .filter(|(k, _)| k.starts_with("excluded"))
            .collect();
        assert_eq!(excl.len(), 2);
    }

    proptest! {
        #[test]
        fn score_round_trip_preserves_full_precision(
            scores in proptest::collection::vec(
                proptest::num::f64::NORMAL | proptest::num::f64::NEGATIVE | proptest::num::f64::POSITIVE | proptest::num::f64::ZERO,
                1..20,
            ),
        ) {
            let dir = tmpdir("prop");
            let n = scores.len();
            let profile = StepProfile {
                steps: vec![TimePoint::<f64>::Step(0)],
                sets: vec![AttackScoreSet {
                    member_scores: scores.clone(),
                    nonmember_scores: vec![0.0; n],
                    orientation: Orientation::LowerIsMember,
                    provenance: Provenance::LossAtStep(0.0),
                }],
            };
            let path = dir.0.join("p.csv");
            save_loss_scores(&path, &profile, "fp").unwrap();
            let file = load_scores(&path).unwrap();
            let loaded: Vec<f64> = file.rows.iter().filter(|r| r.is_member).map(|r| r.score).collect();
            prop_assert_eq!(loaded.len(), n);
            for (orig, back) in scores.iter().zip(&loaded) {
                prop_assert_eq!(orig.to_bits(), back.to_bits());
            }
        }
    }

    #[test]
    fn samples_and_history_round_trip() {
        let dir = tmpdir("misc");
        let samples = Tensor::<f64>::matrix(3, 2, vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6]).unwrap();
        let spath = dir.0.join("samples.csv");
        save_samples(&spath, &samples, "fp").unwrap();
        let (back, _) = load_samples::<f64>(&spath).unwrap();
        assert_eq!(samples.data(), back.data());

        let history = LossHistory { entries: vec![(100, 3.5), (200, 1.25)] };
        let hpath = dir.0.join("history.csv");
        save_loss_history(&hpath, &history, "fp").unwrap();
        let lines = read_lines(&hpath).unwrap();
        assert_eq!(lines[1], "step,mean_loss");
        assert_eq!(lines[2], "100,3.5");
    }
}
