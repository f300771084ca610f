//! JSON-Lines run logs, contour tables and CSV export.
//!
//! A log is a sequence of runs. Each run is a header line
//! (`"kind": "run"`) followed by one line per trial (`"kind": "trial"`).
//! Trial lines repeat the run's identifying fields so they can be read on
//! their own. Unknown fields on either kind of line are kept and written back.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::laws::{ExperimentPoint, Target};
use crate::search::{estimate_deltas, RunHeader, SearchSpec, TrialRecord, TrialSet};
use crate::util::format_sig9;

pub const SCHEMA_VERSION: u32 = 1;
pub const CSV_HEADER: &str = "n_params,q_r,q_b,delta_opt,delta_mu,n_trials";

const HEADER_KEYS: &[&str] = &[
    "kind",
    "schema_version",
    "run_id",
    "model_id",
    "model_digest",
    "tokens_digest",
    "n_params",
    "baseline_loss",
    "source",
    "qr_target",
    "qb",
    "granularity",
    "method",
    "weight_and_activation",
    "trials",
    "seed",
    "ratio_tolerance",
];

const TRIAL_KEYS: &[&str] = &[
    "kind",
    "run_id",
    "model_digest",
    "method",
    "granularity",
    "qr_target",
    "qb",
    "source",
    "trial_index",
    "seed",
    "qr_achieved",
    "plan_digest",
    "loss",
    "delta",
    "error",
];

fn to_map<T: Serialize>(v: &T) -> Map<String, Value> {
    match serde_json::to_value(v) {
        Ok(Value::Object(m)) => m,
        _ => unreachable!("struct serializes to an object"),
    }
}

fn header_line(set: &TrialSet) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("kind".into(), "run".into());
    m.insert("schema_version".into(), SCHEMA_VERSION.into());
    let mut h = to_map(&set.header);
    h.remove("extra");
    m.extend(h);
    m.extend(to_map(&set.spec));
    for (k, v) in &set.header.extra {
        m.entry(k.clone()).or_insert_with(|| v.clone());
    }
    m
}

fn trial_line(set: &TrialSet, r: &TrialRecord) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("kind".into(), "trial".into());
    m.insert("run_id".into(), set.header.run_id.clone().into());
    m.insert(
        "model_digest".into(),
        set.header.model_digest.clone().into(),
    );
    m.insert("method".into(), set.spec.method.to_string().into());
    m.insert(
        "granularity".into(),
        set.spec.granularity.to_string().into(),
    );
    m.insert("qr_target".into(), set.spec.qr_target.into());
    m.insert("qb".into(), set.spec.qb.into());
    m.insert("source".into(), set.header.source.clone().into());
    let mut t = to_map(r);
    t.remove("extra");
    m.extend(t);
    for (k, v) in &r.extra {
        m.entry(k.clone()).or_insert_with(|| v.clone());
    }
    m
}

/// Serializes one run as JSON lines, each terminated by `\n`.
pub fn run_to_jsonl(set: &TrialSet) -> String {
    let mut out = String::new();
    let mut push = |m: Map<String, Value>| {
        out.push_str(&Value::Object(m).to_string());
        out.push('\n');
    };
    push(header_line(set));
    for r in &set.records {
        push(trial_line(set, r));
    }
    out
}

/// Appends one run to a log, creating the file if needed.
pub fn append_run(path: &Path, set: &TrialSet) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(run_to_jsonl(set).as_bytes())?;
    f.flush()?;
    Ok(())
}

fn leftovers(map: &Map<String, Value>, known: &[&str]) -> BTreeMap<String, Value> {
    map.iter()
        .filter(|(k, _)| !known.contains(&k.as_str()))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

/// Parses a whole log. Line numbers in errors are 1-based.
pub fn parse_runs(text: &str) -> Result<Vec<TrialSet>> {
    let mut runs: Vec<TrialSet> = Vec::new();
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let line_no = i + 1;
        let perr = |message: String| Error::ParseError {
            line: line_no,
            message,
        };
        if !line.ends_with('\n') {
            return Err(perr("truncated line (no terminating newline)".into()));
        }
        let body = line.trim_end_matches('\n').trim_end_matches('\r');
        if body.trim().is_empty() {
            continue;
        }
        let map = match serde_json::from_str::<Value>(body) {
            Ok(Value::Object(m)) => m,
            Ok(_) => return Err(perr("expected a JSON object".into())),
            Err(e) => return Err(perr(e.to_string())),
        };
        match map.get("kind").and_then(Value::as_str) {
            Some("run") => {
                let version = map.get("schema_version").and_then(Value::as_u64);
                if version != Some(u64::from(SCHEMA_VERSION)) {
                    return Err(Error::SchemaError(format!(
                        "line {line_no}: unsupported schema_version {}",
                        map.get("schema_version").cloned().unwrap_or(Value::Null)
                    )));
                }
                let obj = Value::Object(map.clone());
                let mut header: RunHeader =
                    serde_json::from_value(obj.clone()).map_err(|e| perr(e.to_string()))?;
                let spec: SearchSpec =
                    serde_json::from_value(obj).map_err(|e| perr(e.to_string()))?;
                header.extra = leftovers(&map, HEADER_KEYS);
                runs.push(TrialSet {
                    header,
                    spec,
                    records: Vec::new(),
                });
            }
            Some("trial") => {
                let run = runs
                    .last_mut()
                    .ok_or_else(|| perr("trial line before any run header".into()))?;
                if map.get("run_id").and_then(Value::as_str) != Some(run.header.run_id.as_str()) {
                    return Err(perr(format!(
                        "trial does not belong to run {}",
                        run.header.run_id
                    )));
                }
                let mut rec: TrialRecord = serde_json::from_value(Value::Object(map.clone()))
                    .map_err(|e| perr(e.to_string()))?;
                if let Some(prev) = run.records.last() {
                    if rec.trial_index <= prev.trial_index {
                        return Err(perr(format!(
                            "trial_index {} does not follow {}",
                            rec.trial_index, prev.trial_index
                        )));
                    }
                }
                rec.extra = leftovers(&map, TRIAL_KEYS);
                run.records.push(rec);
            }
            other => return Err(perr(format!("unknown line kind {other:?}"))),
        }
    }
    Ok(runs)
}

pub fn read_runs(path: &Path) -> Result<Vec<TrialSet>> {
    let bytes = fs::read(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::ParseError {
        line: 0,
        message: format!("log is not UTF-8: {e}"),
    })?;
    parse_runs(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContourRow {
    pub n_params: f64,
    pub q_r: f64,
    pub q_b: usize,
    pub delta_opt: f64,
    pub delta_mu: f64,
    pub n_trials: usize,
}

impl ContourRow {
    fn key_cmp(&self, other: &ContourRow) -> Ordering {
        self.n_params
            .total_cmp(&other.n_params)
            .then(self.q_r.total_cmp(&other.q_r))
            .then(self.q_b.cmp(&other.q_b))
    }
}

/// Pooled estimates per `(n_params, q_r, q_b)`, sorted by key.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ContourTable {
    pub rows: Vec<ContourRow>,
}

impl ContourTable {
    /// Fitting data: one point per row, using the chosen estimator.
    pub fn points(&self, target: Target) -> Vec<(ExperimentPoint, f64)> {
        self.rows
            .iter()
            .map(|r| {
                let d = match target {
                    Target::Opt => r.delta_opt,
                    Target::Mean => r.delta_mu,
                };
                (ExperimentPoint::new(r.n_params, r.q_r, r.q_b), d)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct KeyBits(u64, u64, usize);

/// Maps a float to an integer that sorts like `f64::total_cmp`.
fn order_bits(v: f64) -> u64 {
    let b = v.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | (1 << 63)
    }
}

fn key_bits(set: &TrialSet) -> KeyBits {
    KeyBits(
        order_bits(set.header.n_params),
        order_bits(set.spec.qr_target),
        set.spec.qb,
    )
}

/// Groups runs by `(n_params, q_r, q_b)` and pools their successful trials.
/// Runs sharing a key must agree on model, tokens, method and granularity.
pub fn build_contour(runs: &[TrialSet]) -> Result<ContourTable> {
    let mut groups: BTreeMap<KeyBits, Vec<&TrialSet>> = BTreeMap::new();
    for run in runs {
        groups.entry(key_bits(run)).or_default().push(run);
    }
    let mut rows = Vec::with_capacity(groups.len());
    for group in groups.values() {
        let first = group[0];
        for other in &group[1..] {
            let same = other.header.model_digest == first.header.model_digest
                && other.header.tokens_digest == first.header.tokens_digest
                && other.spec.method == first.spec.method
                && other.spec.granularity == first.spec.granularity
                && other.spec.weight_and_activation == first.spec.weight_and_activation;
            if !same {
                return Err(Error::ConflictError(format!(
                    "runs {} and {} share (N={}, Qr={}, Qb={}) but differ in model, tokens or method",
                    first.header.run_id, other.header.run_id, first.header.n_params, first.spec.qr_target, first.spec.qb
                )));
            }
        }
        let deltas: Vec<f64> = group.iter().flat_map(|r| r.successful_deltas()).collect();
        let est = estimate_deltas(&deltas)?;
        rows.push(ContourRow {
            n_params: first.header.n_params,
            q_r: first.spec.qr_target,
            q_b: first.spec.qb,
            delta_opt: est.delta_opt,
            delta_mu: est.delta_mu,
            n_trials: est.n,
        });
    }
    rows.sort_by(ContourRow::key_cmp);
    Ok(ContourTable { rows })
}

/// CSV text: fixed header, `%.9g` values, LF line endings.
pub fn contour_csv(table: &ContourTable) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in &table.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            format_sig9(r.n_params),
            format_sig9(r.q_r),
            r.q_b,
            format_sig9(r.delta_opt),
            format_sig9(r.delta_mu),
            r.n_trials
        ));
    }
    out
}

pub fn export_csv(table: &ContourTable, path: &Path) -> Result<()> {
    fs::write(path, contour_csv(table))?;
    Ok(())
}
