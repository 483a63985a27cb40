//! Baseline comparison on fixed plants, Monte Carlo robustness runs, and
//! CSV/JSON emitters for their results.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::Policy;
use crate::curriculum::{run_episode, ControlVariant, EnvConfig, EpisodeRecord, EpisodeSummary, ZeroAction, NUM_STAGES};
use crate::dynamics::{sample_plant, PlantParams, UncertaintyRanges};
use crate::error::{CulError, Result};
use crate::lincontrol::StateSpaceController;
use crate::seed;

/// Rows of the comparison tables, in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchVariant {
    Proposed,
    NoMbc,
    FullRandomization,
    OnlyMbc,
    NoControl,
}

impl BenchVariant {
    pub const ALL: [BenchVariant; 5] = [
        BenchVariant::Proposed,
        BenchVariant::NoMbc,
        BenchVariant::FullRandomization,
        BenchVariant::OnlyMbc,
        BenchVariant::NoControl,
    ];

    pub fn label(self) -> &'static str {
        match self {
            BenchVariant::Proposed => "Proposed",
            BenchVariant::NoMbc => "No MBC",
            BenchVariant::FullRandomization => "Full randomization",
            BenchVariant::OnlyMbc => "Only MBC",
            BenchVariant::NoControl => "No control",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            BenchVariant::Proposed => "proposed",
            BenchVariant::NoMbc => "no_mbc",
            BenchVariant::FullRandomization => "full_randomization",
            BenchVariant::OnlyMbc => "only_mbc",
            BenchVariant::NoControl => "no_control",
        }
    }

    pub fn control(self) -> ControlVariant {
        match self {
            BenchVariant::Proposed | BenchVariant::FullRandomization => ControlVariant::Residual,
            BenchVariant::NoMbc => ControlVariant::RlOnly,
            BenchVariant::OnlyMbc => ControlVariant::MbcOnly,
            BenchVariant::NoControl => ControlVariant::None,
        }
    }
}

/// Frozen actors for the learning variants; absent ones are skipped.
#[derive(Debug, Clone, Default)]
pub struct Policies {
    pub proposed: Option<Policy>,
    pub no_mbc: Option<Policy>,
    pub full_randomization: Option<Policy>,
}

impl Policies {
    /// `None` when `v` learns but has no policy.
    fn agent_for(&self, v: BenchVariant) -> Option<Option<&Policy>> {
        match v {
            BenchVariant::Proposed => self.proposed.as_ref().map(Some),
            BenchVariant::NoMbc => self.no_mbc.as_ref().map(Some),
            BenchVariant::FullRandomization => self.full_randomization.as_ref().map(Some),
            BenchVariant::OnlyMbc | BenchVariant::NoControl => Some(None),
        }
    }

    pub fn variants(&self) -> Vec<BenchVariant> {
        BenchVariant::ALL.into_iter().filter(|v| self.agent_for(*v).is_some()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub variant: BenchVariant,
    pub error_norm: f64,
    pub ret: f64,
    pub terminal_error: f64,
    pub peak_output: f64,
}

/// `√(Σ e_k²)` over the raw error samples of steps `0..=T`.
pub fn tracking_error_norm(rec: &EpisodeRecord) -> Result<f64> {
    if !rec.is_complete() {
        return Err(CulError::IncompleteRecord(format!("{} time samples", rec.t.len())));
    }
    Ok(rec.error_samples().map(|e| e * e).sum::<f64>().sqrt())
}

pub fn metric(variant: BenchVariant, rec: &EpisodeRecord) -> Result<Metric> {
    Ok(Metric {
        variant,
        error_norm: tracking_error_norm(rec)?,
        ret: rec.ret,
        terminal_error: rec.final_error,
        peak_output: rec.y.iter().fold(0.0f64, |m, y| m.max(y.abs())),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantRun {
    pub metric: Metric,
    pub record: EpisodeRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub params: PlantParams,
    pub runs: Vec<VariantRun>,
}

impl CaseResult {
    pub fn get(&self, v: BenchVariant) -> Option<&VariantRun> {
        self.runs.iter().find(|r| r.metric.variant == v)
    }
}

/// Runs every available variant in evaluation mode on the same plant.
pub fn evaluate_case(
    name: &str,
    params: &PlantParams,
    mbc: &StateSpaceController,
    policies: &Policies,
    env: &EnvConfig,
) -> Result<CaseResult> {
    let mut runs = Vec::new();
    for v in policies.variants() {
        let record = match policies.agent_for(v).flatten() {
            Some(policy) => run_episode(params, mbc, &mut &*policy, v.control(), env, NUM_STAGES - 1)?,
            None => run_episode(params, mbc, &mut ZeroAction, v.control(), env, NUM_STAGES - 1)?,
        };
        runs.push(VariantRun {
            metric: metric(v, &record)?,
            record,
        });
    }
    Ok(CaseResult {
        name: name.to_string(),
        params: *params,
        runs,
    })
}

/// Setting of one pinned parameter in a case spec.
fn pin(value: &str, lo: f64, hi: f64, nominal: f64) -> Result<f64> {
    match value {
        "min" => Ok(lo),
        "max" => Ok(hi),
        "nominal" => Ok(nominal),
        v => v
            .parse::<f64>()
            .map_err(|_| CulError::Parse(format!("case value {v:?} is not min, max, nominal or a number"))),
    }
}

const CASE_KEYS: [&str; 8] = ["m_b", "m_e", "c_g", "c_d", "c_c", "yr1", "yr2", "delta"];

/// Parses `key=value` pairs (comma separated) on top of the nominal plant.
pub fn parse_case_spec(spec: &str, nominal: &PlantParams, ranges: &UncertaintyRanges) -> Result<PlantParams> {
    let mut p = *nominal;
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| CulError::Parse(format!("case item {item:?} is not key=value")))?;
        let (key, value) = (key.trim(), value.trim());
        let n = nominal;
        match key {
            "m_b" => p.m_b = pin(value, ranges.m_b.min, ranges.m_b.max, n.m_b)?,
            "m_e" => p.m_e = pin(value, ranges.m_e.min, ranges.m_e.max, n.m_e)?,
            "c_g" => p.c_g = pin(value, ranges.c_g.min, ranges.c_g.max, n.c_g)?,
            "c_d" => p.c_d = pin(value, ranges.c_d.min, ranges.c_d.max, n.c_d)?,
            "c_c" => p.c_c = pin(value, ranges.c_c.min, ranges.c_c.max, n.c_c)?,
            "yr1" => p.yr_seg1 = pin(value, ranges.yr_seg1.min, ranges.yr_seg1.max, n.yr_seg1)?,
            "yr2" => p.yr_seg2 = pin(value, ranges.yr_seg2.min, ranges.yr_seg2.max, n.yr_seg2)?,
            "delta" => p.delta = pin(value, ranges.delta.min, ranges.delta.max, n.delta)?,
            other => return Err(CulError::UnknownCaseKey(other.to_string())),
        }
    }
    p.validate()?;
    Ok(p)
}

pub const NAMED_CASES: [(&str, &str); 4] = [
    ("nominal", "delta=0"),
    ("fig6", "m_b=max,m_e=max,c_g=max,c_d=min,c_c=max,yr1=max,yr2=min,delta=min"),
    ("fig7", "m_b=min,m_e=min,c_g=min,c_d=max,c_c=min,yr1=min,yr2=max,delta=max"),
    ("fig8", "m_b=min,m_e=max,c_g=min,c_d=min,c_c=max,yr1=min,yr2=max,delta=max"),
];

/// Resolves a named corner case or an inline `key=value` spec.
pub fn resolve_case(spec: &str, nominal: &PlantParams, ranges: &UncertaintyRanges) -> Result<PlantParams> {
    if let Some((_, pins)) = NAMED_CASES.iter().find(|(n, _)| *n == spec) {
        return parse_case_spec(pins, nominal, ranges);
    }
    if spec.contains('=') {
        return parse_case_spec(spec, nominal, ranges);
    }
    Err(CulError::UnknownCase(spec.to_string()))
}

pub fn case_keys() -> &'static [&'static str] {
    &CASE_KEYS
}

/// Mean and sample (n − 1) standard deviation; a single value has std 0.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantStats {
    pub variant: BenchVariant,
    pub mean: f64,
    pub std: f64,
    pub norms: Vec<f64>,
    /// Per-step mean of `x_B` across trials.
    pub mean_output: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub trials: usize,
    pub params: Vec<PlantParams>,
    pub variants: Vec<VariantStats>,
}

impl McSummary {
    pub fn get(&self, v: BenchVariant) -> Option<&VariantStats> {
        self.variants.iter().find(|s| s.variant == v)
    }
}

/// Evaluates every available variant on `n_trials` plants drawn with all
/// uncertainties active. Trial `i` uses its own stream derived from
/// `(master_seed, i)`, so results do not depend on thread scheduling.
pub fn monte_carlo(
    n_trials: usize,
    nominal: &PlantParams,
    ranges: &UncertaintyRanges,
    mbc: &StateSpaceController,
    policies: &Policies,
    env: &EnvConfig,
    master_seed: u64,
) -> Result<McSummary> {
    if n_trials == 0 {
        return Err(CulError::InvalidParams {
            name: "trials",
            reason: "need at least one trial".into(),
        });
    }
    let cases: Vec<CaseResult> = (0..n_trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::trial_stream(master_seed, i as u64);
            let params = sample_plant(NUM_STAGES - 1, nominal, ranges, &mut rng)?;
            evaluate_case(&format!("trial{i}"), &params, mbc, policies, env)
        })
        .collect::<Result<_>>()?;
    Ok(summarize(&cases, &policies.variants()))
}

/// Aggregates per-trial case results.
pub fn summarize(cases: &[CaseResult], variants: &[BenchVariant]) -> McSummary {
    let stats = variants
        .iter()
        .map(|&v| {
            let runs: Vec<&VariantRun> = cases.iter().filter_map(|c| c.get(v)).collect();
            let norms: Vec<f64> = runs.iter().map(|r| r.metric.error_norm).collect();
            let (mean, std) = mean_std(&norms);
            let len = runs.iter().map(|r| r.record.y.len()).min().unwrap_or(0);
            let mean_output = (0..len)
                .map(|k| runs.iter().map(|r| r.record.y[k]).sum::<f64>() / runs.len() as f64)
                .collect();
            VariantStats {
                variant: v,
                mean,
                std,
                norms,
                mean_output,
            }
        })
        .collect();
    McSummary {
        trials: cases.len(),
        params: cases.iter().map(|c| c.params).collect(),
        variants: stats,
    }
}

/// Provenance stamped on every emitted file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMeta {
    pub config_hash: String,
    pub seed: u64,
}

impl RunMeta {
    fn comment(&self) -> String {
        format!("# config_hash={} seed={}\n", self.config_hash, self.seed)
    }
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_writer(path: &Path, meta: &RunMeta) -> Result<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).map_err(|e| CulError::io(path, e))?;
    let mut out = BufWriter::new(file);
    out.write_all(meta.comment().as_bytes()).map_err(|e| CulError::io(path, e))?;
    Ok(csv::Writer::from_writer(out))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CulError + '_ {
    move |e| CulError::io(path, std::io::Error::other(e))
}

fn write_rows(path: &Path, meta: &RunMeta, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv_writer(path, meta)?;
    w.write_record(header).map_err(csv_err(path))?;
    for row in rows {
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| CulError::io(path, e))
}

/// Reads a file written by the emitters back as a header and numeric rows.
pub fn read_numeric_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(csv_err(path))?;
    let header = r.headers().map_err(csv_err(path))?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err(path))?;
        let row = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| CulError::Parse(format!("{}: {f:?}: {e}", path.display()))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

/// Time series of one case: `t, yr`, then `y_<variant>` and `u_<variant>`.
pub fn write_case_series(path: &Path, meta: &RunMeta, case: &CaseResult) -> Result<()> {
    let mut header = vec!["t".to_string(), "yr".to_string()];
    for r in &case.runs {
        header.push(format!("y_{}", r.metric.variant.key()));
        header.push(format!("u_{}", r.metric.variant.key()));
    }
    let n = case.runs.iter().map(|r| r.record.len()).min().unwrap_or(0);
    let first = case.runs.first();
    let rows = (0..n).map(|k| {
        let rec0 = &first.expect("rows exist only with runs").record;
        let mut row = vec![num(rec0.t[k]), num(rec0.yr[k])];
        for r in &case.runs {
            row.push(num(r.record.y[k]));
            row.push(num(r.record.u[k]));
        }
        row
    });
    write_rows(path, meta, &header, rows)
}

pub fn write_case_summary(path: &Path, meta: &RunMeta, case: &CaseResult) -> Result<()> {
    let header: Vec<String> = ["variant", "error_norm", "return", "terminal_error", "peak_output"]
        .map(String::from)
        .to_vec();
    let rows = case.runs.iter().map(|r| {
        let m = &r.metric;
        vec![m.variant.label().to_string(), num(m.error_norm), num(m.ret), num(m.terminal_error), num(m.peak_output)]
    });
    write_rows(path, meta, &header, rows)
}

pub fn write_reward_curve(path: &Path, meta: &RunMeta, curve: &[EpisodeSummary]) -> Result<()> {
    let header: Vec<String> = [
        "episode", "stage", "sampled_stage", "return", "m_b", "m_e", "c_g", "c_d", "c_c", "delta", "yr1", "yr2",
    ]
    .map(String::from)
    .to_vec();
    let rows = curve.iter().map(|s| {
        let p = &s.params;
        vec![
            s.episode.to_string(),
            s.stage.to_string(),
            s.sampled_stage.to_string(),
            num(s.ret),
            num(p.m_b),
            num(p.m_e),
            num(p.c_g),
            num(p.c_d),
            num(p.c_c),
            num(p.delta),
            num(p.yr_seg1),
            num(p.yr_seg2),
        ]
    });
    write_rows(path, meta, &header, rows)
}

/// One row per trial with its plant and the norm of every variant.
pub fn write_trials(path: &Path, meta: &RunMeta, summary: &McSummary) -> Result<()> {
    let mut header: Vec<String> = ["trial", "m_b", "m_e", "c_g", "c_d", "c_c", "delta", "yr1", "yr2"]
        .map(String::from)
        .to_vec();
    header.extend(summary.variants.iter().map(|s| format!("norm_{}", s.variant.key())));
    let rows = summary.params.iter().enumerate().map(|(i, p)| {
        let mut row = vec![i.to_string()];
        row.extend([p.m_b, p.m_e, p.c_g, p.c_d, p.c_c, p.delta, p.yr_seg1, p.yr_seg2].map(num));
        row.extend(summary.variants.iter().map(|s| num(s.norms[i])));
        row
    });
    write_rows(path, meta, &header, rows)
}

pub fn write_mc_table(path: &Path, meta: &RunMeta, summary: &McSummary) -> Result<()> {
    let header: Vec<String> = ["variant", "mean", "std"].map(String::from).to_vec();
    let rows = summary
        .variants
        .iter()
        .map(|s| vec![s.variant.label().to_string(), num(s.mean), num(s.std)]);
    write_rows(path, meta, &header, rows)
}

pub fn write_mean_outputs(path: &Path, meta: &RunMeta, summary: &McSummary, dt: f64) -> Result<()> {
    let mut header = vec!["t".to_string()];
    header.extend(summary.variants.iter().map(|s| format!("mean_y_{}", s.variant.key())));
    let n = summary.variants.iter().map(|s| s.mean_output.len()).min().unwrap_or(0);
    let rows = (0..n).map(|k| {
        let mut row = vec![num(k as f64 * dt)];
        row.extend(summary.variants.iter().map(|s| num(s.mean_output[k])));
        row
    });
    write_rows(path, meta, &header, rows)
}

#[derive(Serialize)]
struct VariantDoc {
    label: &'static str,
    mean: f64,
    std: f64,
    norms: Vec<f64>,
}

#[derive(Serialize)]
struct SummaryDoc<'a> {
    config_hash: &'a str,
    seed: u64,
    kind: &'a str,
    name: &'a str,
    trials: usize,
    variants: BTreeMap<&'static str, VariantDoc>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CulError::io(path, e.into()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CulError::io(path, e))
}

pub fn write_case_json(path: &Path, meta: &RunMeta, case: &CaseResult) -> Result<()> {
    let variants = case
        .runs
        .iter()
        .map(|r| {
            let m = &r.metric;
            let doc = VariantDoc { label: m.variant.label(), mean: m.error_norm, std: 0.0, norms: vec![m.error_norm] };
            (m.variant.key(), doc)
        })
        .collect();
    write_json(
        path,
        &SummaryDoc { config_hash: &meta.config_hash, seed: meta.seed, kind: "case", name: &case.name, trials: 1, variants },
    )
}

pub fn write_mc_json(path: &Path, meta: &RunMeta, summary: &McSummary) -> Result<()> {
    let variants = summary
        .variants
        .iter()
        .map(|s| {
            let doc = VariantDoc { label: s.variant.label(), mean: s.mean, std: s.std, norms: s.norms.clone() };
            (s.variant.key(), doc)
        })
        .collect();
    write_json(
        path,
        &SummaryDoc {
            config_hash: &meta.config_hash,
            seed: meta.seed,
            kind: "monte_carlo",
            name: "monte_carlo",
            trials: summary.trials,
            variants,
        },
    )
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CulError::io(dir, e))
}

/// Writes `<case>_series.csv`, `<case>_summary.csv` and `<case>_summary.json`.
pub fn emit_case(dir: &Path, meta: &RunMeta, case: &CaseResult) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let paths = ["series.csv", "summary.csv", "summary.json"].map(|s| dir.join(format!("{}_{s}", case.name)));
    write_case_series(&paths[0], meta, case)?;
    write_case_summary(&paths[1], meta, case)?;
    write_case_json(&paths[2], meta, case)?;
    Ok(paths.to_vec())
}

/// Writes the per-trial table, the mean/std table, the mean output
/// trajectories and the JSON summary of a Monte Carlo run.
pub fn emit_monte_carlo(dir: &Path, meta: &RunMeta, summary: &McSummary, dt: f64) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let paths = ["trials.csv", "summary.csv", "mean_output.csv", "summary.json"].map(|s| dir.join(format!("montecarlo_{s}")));
    write_trials(&paths[0], meta, summary)?;
    write_mc_table(&paths[1], meta, summary)?;
    write_mean_outputs(&paths[2], meta, summary, dt)?;
    write_mc_json(&paths[3], meta, summary)?;
    Ok(paths.to_vec())
}
