//! Run outputs: CSV tables, line-delimited records, summaries and binary
//! checkpoints.
//!
//! Checkpoint layout (little endian): magic `LCKP`, `u32` version, `u32`
//! tensor count, then per tensor `u32` rows, `u32` cols and `rows·cols`
//! `f64` values in row-major order. A sidecar `.manifest` text file lists
//! `key=value` lines.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use localist_core::hierarchy::{DomainClassifier, HierEvent, Router};
use localist_core::trainer::{AttentionModel, Objective};
use localist_core::{BlockPartition, DialConfig, HeadParams, LabeledBatch, Matrix, ModelInstance, ModelRegistry};
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::spec::ExperimentSpec;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LCKP";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const SUMMARY_FILE: &str = "summary.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.json";
/// Files every run directory contains.
pub const REQUIRED_FILES: [&str; 4] = [SUMMARY_FILE, MANIFEST_FILE, METRICS_FILE, CONFIG_FILE];

/// A named pass/fail check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub criterion: String,
    pub passed: bool,
    pub detail: String,
}

/// Everything a scenario produces, held in memory until written.
#[derive(Debug, Default)]
pub struct Outcome {
    pub checks: Vec<Check>,
    pub metrics: Vec<(String, String)>,
    /// Wall-clock seconds; reported in the summary only, never in CSV.
    pub timings: Vec<(String, f64)>,
    pub files: BTreeMap<String, Vec<u8>>,
}

impl Outcome {
    pub fn check(&mut self, criterion: &str, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            criterion: criterion.to_string(),
            passed,
            detail: detail.into(),
        });
    }

    pub fn metric(&mut self, key: &str, value: impl ToString) {
        self.metrics.push((key.to_string(), value.to_string()));
    }

    pub fn timing(&mut self, key: &str, seconds: f64) {
        self.timings.push((key.to_string(), seconds));
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<(), CliError> {
        let bytes = to_csv(rows)?;
        self.files.insert(name.to_string(), bytes);
        Ok(())
    }

    pub fn jsonl<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<(), CliError> {
        let mut out = Vec::new();
        for r in rows {
            serde_json::to_writer(&mut out, r).map_err(|e| CliError::Artifact(e.to_string()))?;
            out.push(b'\n');
        }
        self.files.insert(name.to_string(), out);
        Ok(())
    }

    pub fn text(&mut self, name: &str, body: impl Into<String>) {
        self.files.insert(name.to_string(), body.into().into_bytes());
    }

    pub fn bytes(&mut self, name: &str, body: Vec<u8>) {
        self.files.insert(name.to_string(), body);
    }
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Artifact(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Artifact(e.to_string()))
}

/// Plain-text summary: one `PASS`/`FAIL` line per check, then metrics.
pub fn summary_text(spec: &ExperimentSpec, outcome: &Outcome) -> String {
    let mut s = format!("# {} ({})\n", spec.name, spec.scenario);
    for c in &outcome.checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        s.push_str(&format!("{status}\t{}\t{}\n", c.criterion, c.detail));
    }
    for (k, v) in &outcome.metrics {
        s.push_str(&format!("metric\t{k}\t{v}\n"));
    }
    for (k, v) in &outcome.timings {
        s.push_str(&format!("timing\t{k}\t{v:.3}s\n"));
    }
    s
}

#[derive(Serialize)]
struct MetricRow<'a> {
    key: &'a str,
    value: &'a str,
}

pub fn metrics_csv(outcome: &Outcome) -> Result<Vec<u8>, CliError> {
    let rows: Vec<MetricRow> = outcome.metrics.iter().map(|(k, v)| MetricRow { key: k, value: v }).collect();
    to_csv(&rows)
}

fn manifest_text(spec: &ExperimentSpec) -> String {
    format!(
        "name={}\nscenario={}\nseed={}\nconfig_hash={}\nversion={}\n",
        spec.name,
        spec.scenario,
        spec.seed,
        spec.config_hash(),
        env!("CARGO_PKG_VERSION")
    )
}

/// Writes a scenario's files plus manifest, resolved config and summary.
pub fn write_run(dir: &Path, spec: &ExperimentSpec, outcome: &Outcome) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    for (name, body) in &outcome.files {
        let path = dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, body)?;
    }
    fs::write(dir.join(MANIFEST_FILE), manifest_text(spec))?;
    let config = serde_json::to_string_pretty(spec).map_err(|e| CliError::Artifact(e.to_string()))?;
    fs::write(dir.join(CONFIG_FILE), config + "\n")?;
    fs::write(dir.join(METRICS_FILE), metrics_csv(outcome)?)?;
    fs::write(dir.join(SUMMARY_FILE), summary_text(spec, outcome))?;
    Ok(())
}

pub fn encode_checkpoint(tensors: &[&Matrix]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for m in tensors {
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<Matrix>, CliError> {
    let bad = |m: &str| CliError::Artifact(format!("checkpoint: {m}"));
    let mut at = 0usize;
    let mut take = |len: usize| -> Result<&[u8], CliError> {
        let s = bytes.get(at..at + len).ok_or_else(|| bad("truncated"))?;
        at += len;
        Ok(s)
    };
    if take(4)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_of = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
    let version = u32_of(take(4)?);
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = u32_of(take(4)?) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let rows = u32_of(take(4)?) as usize;
        let cols = u32_of(take(4)?) as usize;
        let raw = take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push(Matrix::new(rows, cols, data).map_err(|e| bad(&e.to_string()))?);
    }
    if at != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(out)
}

/// Tensors in head order (`W_Q`, `W_K`, `W_V` per head) then the readout.
pub fn model_tensors(model: &AttentionModel) -> Vec<&Matrix> {
    let mut t: Vec<&Matrix> = model.heads.iter().flat_map(|h| [&h.w_q, &h.w_k, &h.w_v]).collect();
    t.push(&model.readout);
    t
}

pub fn checkpoint_manifest(model: &AttentionModel, seed: u64, config_hash: &str) -> String {
    let shapes: Vec<String> = model_tensors(model).iter().map(|m| format!("{}x{}", m.rows(), m.cols())).collect();
    let groups: Vec<String> = model
        .column_groups
        .iter()
        .map(|g| g.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" "))
        .collect();
    let focus: Vec<String> = model.focus.iter().map(|f| f.to_string()).collect();
    format!(
        "format=LCKP\nversion={CHECKPOINT_VERSION}\ntensors={}\nshapes={}\nheads={}\ntau={:e}\ncolumn_groups={}\nfocus={}\nseed={seed}\nconfig_hash={config_hash}\n",
        shapes.len(),
        shapes.join(","),
        model.num_heads(),
        model.tau(),
        groups.join(","),
        focus.join(",")
    )
}

fn manifest_map(text: &str) -> BTreeMap<&str, &str> {
    text.lines().filter_map(|l| l.split_once('=')).collect()
}

fn parse_list(s: &str, sep: char) -> Result<Vec<usize>, CliError> {
    s.split(sep)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| CliError::Artifact(format!("bad integer '{p}' in manifest")))
        })
        .collect()
}

/// Rebuilds a model from checkpoint bytes and its manifest.
pub fn model_from_checkpoint(bytes: &[u8], manifest: &str) -> Result<AttentionModel, CliError> {
    let tensors = decode_checkpoint(bytes)?;
    let m = manifest_map(manifest);
    let get = |k: &str| m.get(k).copied().ok_or_else(|| CliError::Artifact(format!("manifest lacks `{k}`")));
    let heads: usize = get("heads")?.parse().map_err(|_| CliError::Artifact("bad head count".into()))?;
    let tau: f64 = get("tau")?.parse().map_err(|_| CliError::Artifact("bad tau".into()))?;
    if tensors.len() != 3 * heads + 1 {
        return Err(CliError::Artifact("tensor count does not match heads".into()));
    }
    let groups = get("column_groups")?
        .split(',')
        .map(|g| parse_list(g, ' '))
        .collect::<Result<Vec<_>, _>>()?;
    let focus = parse_list(get("focus")?, ',')?;
    let mut it = tensors.into_iter();
    let mut hs = Vec::with_capacity(heads);
    for _ in 0..heads {
        let (q, k, v) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
        hs.push(HeadParams::new(q, k, v, tau)?);
    }
    let readout = it.next().unwrap();
    Ok(AttentionModel::new(hs, readout, groups, focus)?)
}

/// Batch embeddings in checkpoint format, one tensor per sequence.
pub fn batch_checkpoint(batch: &LabeledBatch) -> Vec<u8> {
    encode_checkpoint(&batch.embeddings.iter().collect::<Vec<_>>())
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelMeta {
    id: usize,
    domain_tag: usize,
    partition: BlockPartition,
    dial: DialConfig,
    objective: Objective,
    param_count: usize,
    recruited_blocks: usize,
    checkpoint: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct RegistryMeta {
    router: Router,
    classifier: DomainClassifier,
    events: Vec<HierEvent>,
    models: Vec<ModelMeta>,
}

/// Adds `dir/registry.json` plus one checkpoint and manifest per model.
pub fn add_registry(out: &mut Outcome, dir: &str, registry: &ModelRegistry, seed: u64, config_hash: &str) -> Result<(), CliError> {
    let mut models = Vec::with_capacity(registry.models.len());
    for m in &registry.models {
        let file = format!("model_{}.lckp", m.id);
        out.bytes(&format!("{dir}/{file}"), encode_checkpoint(&model_tensors(&m.model)));
        out.text(&format!("{dir}/{file}.manifest"), checkpoint_manifest(&m.model, seed, config_hash));
        models.push(ModelMeta {
            id: m.id,
            domain_tag: m.domain_tag,
            partition: m.partition.clone(),
            dial: m.dial.clone(),
            objective: m.objective.clone(),
            param_count: m.param_count,
            recruited_blocks: m.recruited_blocks,
            checkpoint: file,
        });
    }
    let meta = RegistryMeta {
        router: registry.router.clone(),
        classifier: registry.classifier.clone(),
        events: registry.events.clone(),
        models,
    };
    let json = serde_json::to_string_pretty(&meta).map_err(|e| CliError::Artifact(e.to_string()))?;
    out.text(&format!("{dir}/registry.json"), json + "\n");
    Ok(())
}

/// Loads a registry directory written by [`add_registry`].
pub fn read_registry(dir: &Path) -> Result<ModelRegistry, CliError> {
    let text = fs::read_to_string(dir.join("registry.json"))?;
    let meta: RegistryMeta = serde_json::from_str(&text).map_err(|e| CliError::Artifact(format!("registry.json: {e}")))?;
    let mut models = Vec::with_capacity(meta.models.len());
    for m in meta.models {
        let bytes = fs::read(dir.join(&m.checkpoint))?;
        let manifest = fs::read_to_string(dir.join(format!("{}.manifest", m.checkpoint)))?;
        models.push(ModelInstance {
            id: m.id,
            partition: m.partition.revalidate()?,
            dial: m.dial,
            model: model_from_checkpoint(&bytes, &manifest)?,
            objective: m.objective,
            param_count: m.param_count,
            domain_tag: m.domain_tag,
            recruited_blocks: m.recruited_blocks,
        });
    }
    if models.is_empty() {
        return Err(CliError::Artifact("registry has no models".into()));
    }
    Ok(ModelRegistry {
        models,
        router: meta.router,
        classifier: meta.classifier,
        events: meta.events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use localist_core::trainer::ModelShape;

    #[test]
    fn checkpoint_round_trip() {
        let model = AttentionModel::random(&ModelShape::default(), 3).unwrap();
        let bytes = encode_checkpoint(&model_tensors(&model));
        assert_eq!(&bytes[..4], b"LCKP");
        let manifest = checkpoint_manifest(&model, 3, "abc");
        let back = model_from_checkpoint(&bytes, &manifest).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let m = Matrix::identity(2);
        let mut bytes = encode_checkpoint(&[&m]);
        assert_eq!(decode_checkpoint(&bytes).unwrap(), vec![m.clone()]);
        bytes.push(0);
        assert!(decode_checkpoint(&bytes).is_err());
        bytes.truncate(10);
        assert!(decode_checkpoint(&bytes).is_err());
        let mut wrong = encode_checkpoint(&[&m]);
        wrong[0] = b'X';
        assert!(decode_checkpoint(&wrong).is_err());
    }
}
