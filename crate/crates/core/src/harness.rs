//! Experiment specs, run directories, metrics files, evaluation summaries,
//! plots and ablation pairs. The CLI is a thin layer over these functions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, Progress};
use crate::envs::{make_env, make_era_from, AnyEnv, AnyOracle, EnvVersion, Environment, EraConfig};
use crate::error::{Error, Result};
use crate::flow::{AlphaMode, PosteriorMode};
use crate::trainer::{evaluate, MetricsRecord, PolicyKind, TrainConfig, Trainer};
use crate::ENUMERATION_LIMIT;

/// One experiment: an environment, a policy head, training settings and seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub env: EnvVersion,
    /// Custom ERA graph file replacing the shipped one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env_config: Option<PathBuf>,
    pub policy: PolicyKind,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Largest joint action space an enumerating head may use.
    #[serde(default = "default_limit")]
    pub enumeration_limit: u64,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

fn default_limit() -> u64 {
    ENUMERATION_LIMIT as u64
}

fn deserialize_spec(text: &str) -> Result<ExperimentSpec> {
    let de = toml::Deserializer::parse(text).map_err(|e| Error::config("<toml>", e.to_string().trim_end()))?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::config(if path == "." { "<root>".into() } else { path }, e.into_inner().to_string())
    })
}

/// Parse a TOML value literal, treating anything unparsable as a bare string.
fn override_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key just written"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Apply `a.b.c=value` overrides to a TOML document.
pub fn apply_overrides(text: &str, overrides: &[String]) -> Result<String> {
    let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config("<toml>", e.to_string()))?;
    for o in overrides {
        let (path, raw) = o.split_once('=').ok_or_else(|| Error::config(o.clone(), "override must look like key.path=value"))?;
        let keys: Vec<&str> = path.trim().split('.').collect();
        if keys.iter().any(|k| k.is_empty()) {
            return Err(Error::config(path, "empty key in override path"));
        }
        let mut table = &mut doc;
        for (depth, k) in keys[..keys.len() - 1].iter().enumerate() {
            let entry = table.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
            table = entry
                .as_table_mut()
                .ok_or_else(|| Error::config(keys[..=depth].join("."), "is not a table"))?;
        }
        table.insert(keys[keys.len() - 1].to_string(), override_value(raw.trim()));
    }
    Ok(toml::to_string(&doc).expect("TOML table serialises"))
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec = deserialize_spec(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        Self::from_toml(&apply_overrides(text, overrides)?)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml_with(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        let mut seen = BTreeSet::new();
        for (i, s) in self.seeds.iter().enumerate() {
            if !seen.insert(s) {
                return Err(Error::config(format!("seeds[{i}]"), format!("seed {s} appears twice")));
            }
        }
        if self.env_config.is_some() && self.env.era_shape().is_none() {
            return Err(Error::config("env_config", format!("{} takes no graph file", self.env)));
        }
        self.train.validate()?;
        let (env, _) = self.make_env()?;
        let space = env.action_space();
        if self.policy.enumerates() {
            let limit = self.enumeration_limit as u128;
            space.enumerable(limit)?;
        }
        if !self.train.ar_order.is_empty() && matches!(self.policy, PolicyKind::Ar | PolicyKind::ArIar) {
            let mut o = self.train.ar_order.clone();
            o.sort_unstable();
            if o != (0..space.dims).collect::<Vec<_>>() {
                return Err(Error::config("train.ar_order", format!("must be a permutation of 0..{}", space.dims)));
            }
        }
        Ok(())
    }

    fn era_config_text(&self) -> Result<Option<String>> {
        match &self.env_config {
            Some(p) => Ok(Some(fs::read_to_string(p)?)),
            None => Ok(None),
        }
    }

    pub fn make_env(&self) -> Result<(AnyEnv, AnyOracle)> {
        env_from(self.env, self.era_config_text()?.as_deref())
    }

    /// The spec of the run for one seed.
    pub fn for_seed(&self, seed: u64) -> Self {
        let mut s = self.clone();
        s.seeds = vec![seed];
        s.train.seed = seed;
        s
    }
}

fn env_from(version: EnvVersion, era_toml: Option<&str>) -> Result<(AnyEnv, AnyOracle)> {
    match era_toml {
        Some(text) => make_era_from(EraConfig::from_toml(text)?),
        None => make_env(version),
    }
}

/// Provenance written next to every run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub crate_version: String,
    pub git_revision: String,
    pub env: EnvVersion,
    pub policy: PolicyKind,
    pub seed: u64,
    /// Named RNG streams derived from `seed`.
    pub rng_streams: BTreeMap<String, String>,
    pub config_sha256: String,
    pub metrics: String,
    pub checkpoints: Vec<String>,
}

fn git_revision() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Append-only metrics log.
pub struct MetricsWriter {
    inner: csv::Writer<fs::File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let inner = csv::Writer::from_path(path).map_err(|e| Error::Metrics(e.to_string()))?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, rec: &MetricsRecord) -> Result<()> {
        self.inner.serialize(rec).map_err(|e| Error::Metrics(e.to_string()))?;
        self.inner.flush()?;
        Ok(())
    }
}

/// Parse a metrics CSV, checking the column set and monotone counters.
pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| Error::Metrics(e.to_string()))?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols != MetricsRecord::COLUMNS {
        return Err(Error::Metrics(format!("unexpected columns {cols:?}")));
    }
    let mut out: Vec<MetricsRecord> = Vec::new();
    for (i, row) in rdr.deserialize().enumerate() {
        let rec: MetricsRecord = row.map_err(|e| Error::Metrics(format!("row {}: {e}", i + 1)))?;
        if let Some(prev) = out.last() {
            if rec.env_steps < prev.env_steps || rec.wall_clock_s < prev.wall_clock_s {
                return Err(Error::Metrics(format!("row {}: counters decrease", i + 1)));
            }
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    parse_metrics(&fs::read_to_string(path)?)
}

/// What a finished (or aborted) seed left behind.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub seed: u64,
    pub records: Vec<MetricsRecord>,
}

pub fn run_dir(output: &Path, seed: u64) -> PathBuf {
    output.join(format!("seed_{seed}"))
}

/// Train one seed into `dir`. On a runtime abort the current agent is saved
/// to `abort.ckpt` before the error is returned.
pub fn train_seed(spec: &ExperimentSpec, seed: u64, dir: &Path) -> Result<RunOutcome> {
    let spec = spec.for_seed(seed);
    fs::create_dir_all(dir)?;
    let config = spec.to_toml();
    fs::write(dir.join("config.toml"), &config)?;
    let era_toml = spec.era_config_text()?;
    let manifest = Manifest {
        crate_version: env!("CARGO_PKG_VERSION").into(),
        git_revision: git_revision(),
        env: spec.env,
        policy: spec.policy,
        seed,
        rng_streams: BTreeMap::from([
            ("init".into(), format!("ChaCha8({seed})")),
            ("env_reset".into(), format!("ChaCha8({seed}) stream 1")),
            ("rollout".into(), format!("ChaCha8({seed}) stream 2")),
            ("eval".into(), format!("ChaCha8({seed}) stream 3+k")),
            ("eval_envs".into(), format!("seeds {}..", spec.train.eval_seed)),
        ]),
        config_sha256: hex(&Sha256::digest(config.as_bytes())),
        metrics: "metrics.csv".into(),
        checkpoints: vec!["best.ckpt".into(), "final.ckpt".into()],
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("manifest serialises"))?;

    let (_, oracle) = env_from(spec.env, era_toml.as_deref())?;
    let factory = || env_from(spec.env, era_toml.as_deref()).map(|(e, _)| e);
    let mut trainer = Trainer::new(spec.train.clone(), spec.policy, &factory, &oracle)?;
    let mut writer = MetricsWriter::create(&dir.join("metrics.csv"))?;
    let snapshot = |agent: &crate::trainer::Agent, rec: &MetricsRecord, cycles: usize| {
        let progress = Progress { env_steps: rec.env_steps, cycles, best_return: rec.best_return };
        Checkpoint::capture(agent, spec.env, era_toml.clone(), &spec.train, progress)
    };
    let per_cycle = (spec.train.n_envs * spec.train.t_max) as u64;
    let result = trainer.run(&mut |rec, agent, improved| {
        writer.write(rec)?;
        if improved {
            snapshot(agent, rec, (rec.env_steps / per_cycle) as usize).save(&dir.join("best.ckpt"))?;
        }
        Ok(())
    });
    match result {
        Ok(records) => {
            let last = records.last().expect("run records at least one evaluation");
            snapshot(trainer.agent(), last, trainer.cycles()).save(&dir.join("final.ckpt"))?;
            Ok(RunOutcome { dir: dir.to_path_buf(), seed, records })
        }
        Err(e) => {
            let progress = Progress { env_steps: trainer.env_steps(), cycles: trainer.cycles(), best_return: f64::NAN };
            Checkpoint::capture(trainer.agent(), spec.env, era_toml.clone(), &spec.train, progress)
                .save(&dir.join("abort.ckpt"))?;
            Err(e)
        }
    }
}

/// Train every seed of `spec` under `spec.output_dir`.
pub fn train_all(spec: &ExperimentSpec) -> Result<Vec<RunOutcome>> {
    spec.validate()?;
    spec.seeds.iter().map(|&s| train_seed(spec, s, &run_dir(&spec.output_dir, s))).collect()
}

/// Re-run a run directory from its config snapshot and compare metrics,
/// ignoring the wall-clock column.
pub fn replay(dir: &Path) -> Result<bool> {
    let spec = ExperimentSpec::from_toml(&fs::read_to_string(dir.join("config.toml"))?)?;
    let original = read_metrics(&dir.join("metrics.csv"))?;
    let tmp = dir.join("replay");
    let out = train_seed(&spec, spec.train.seed, &tmp)?;
    fs::remove_dir_all(&tmp)?;
    let strip = |r: &MetricsRecord| MetricsRecord { wall_clock_s: 0.0, ..r.clone() };
    Ok(original.len() == out.records.len()
        && original.iter().zip(&out.records).all(|(a, b)| format!("{:?}", strip(a)) == format!("{:?}", strip(b))))
}

/// Action histogram at the initial state of one evaluation seed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeHistogram {
    pub seed: u64,
    pub draws: usize,
    /// `(action, count)`, most frequent first.
    pub counts: Vec<(Vec<usize>, usize)>,
}

impl ProbeHistogram {
    /// Share of draws covered by the `k` most frequent actions.
    pub fn top_mass(&self, k: usize) -> f64 {
        self.counts.iter().take(k).map(|c| c.1).sum::<usize>() as f64 / self.draws as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub env: String,
    pub policy: PolicyKind,
    pub episodes: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub returns: Vec<f64>,
    pub raw_valid_fraction: f64,
    pub executed_violations: u64,
    pub probes: Vec<ProbeHistogram>,
}

/// Evaluate a checkpoint on fixed seeds and histogram 200 executed-policy
/// draws at each probe seed's initial state.
pub fn evaluate_checkpoint(
    ck: &Checkpoint,
    env: Option<EnvVersion>,
    episodes: usize,
    probe_seeds: &[u64],
) -> Result<EvaluationReport> {
    if episodes == 0 {
        return Err(Error::config("n_episodes", "must be positive"));
    }
    let version = ck.env_version()?;
    if let Some(v) = env {
        if v != version {
            return Err(Error::config("env", format!("checkpoint was trained on {version}, not {v}")));
        }
    }
    let agent = ck.restore()?;
    let (probe_env, oracle) = env_from(version, ck.header.env_config.as_deref())?;
    if probe_env.observation_dim() != ck.header.obs_dim || probe_env.action_space().dims != ck.header.dims {
        return Err(Error::config("env", "environment shape does not match the checkpoint"));
    }
    let train = &ck.header.train;
    let mut envs = vec![probe_env];
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0xE7A1);
    let summary = evaluate(&agent, &mut envs, &oracle, train, episodes, train.eval_seed, &mut rng)?;
    let mut probes = Vec::new();
    for &seed in probe_seeds {
        let env = &mut envs[0];
        let obs = env.reset(seed);
        let state = env.state().clone();
        let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
        let draws = 200;
        for _ in 0..draws {
            let (batch, _) = agent.act(&obs, &state, &oracle, train, &mut rng)?;
            *counts.entry(batch.chosen.0).or_default() += 1;
        }
        let mut counts: Vec<_> = counts.into_iter().collect();
        counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        probes.push(ProbeHistogram { seed, draws, counts });
    }
    Ok(EvaluationReport {
        env: version.name().into(),
        policy: ck.header.kind,
        episodes,
        mean_return: summary.mean,
        std_return: summary.std,
        returns: summary.returns,
        raw_valid_fraction: summary.raw_valid_fraction,
        executed_violations: summary.executed_violations,
        probes,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum XAxis {
    Steps,
    WallClock,
}

impl FromStr for XAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "steps" => Ok(XAxis::Steps),
            "wall_clock" => Ok(XAxis::WallClock),
            other => Err(Error::config("x_axis", format!("expected steps or wall_clock, got `{other}`"))),
        }
    }
}

/// Mean curve with a min/max band across runs.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    /// `(x, mean, low, high)`
    pub points: Vec<(f64, f64, f64, f64)>,
}

/// Per-run `(x, y)` pairs for `metric`, optionally as a running maximum.
pub fn curves(runs: &[Vec<MetricsRecord>], x: XAxis, metric: &str, best_till_now: bool) -> Result<Vec<Vec<(f64, f64)>>> {
    runs.iter()
        .map(|recs| {
            let mut best = f64::NEG_INFINITY;
            recs.iter()
                .map(|r| {
                    let y = r.column(metric).ok_or_else(|| {
                        Error::config("y", format!("no column `{metric}`; available: {}", MetricsRecord::COLUMNS.join(", ")))
                    })?;
                    let xv = match x {
                        XAxis::Steps => r.env_steps as f64,
                        XAxis::WallClock => r.wall_clock_s,
                    };
                    let y = if best_till_now {
                        best = best.max(y);
                        best
                    } else {
                        y
                    };
                    Ok((xv, y))
                })
                .collect()
        })
        .collect()
}

/// Align curves by evaluation index and reduce to mean and min/max.
pub fn aggregate(label: &str, curves: &[Vec<(f64, f64)>]) -> Series {
    let n = curves.iter().map(Vec::len).min().unwrap_or(0);
    let points = (0..n)
        .map(|i| {
            let xs: Vec<f64> = curves.iter().map(|c| c[i].0).collect();
            let ys: Vec<f64> = curves.iter().map(|c| c[i].1).collect();
            let k = ys.len() as f64;
            let lo = ys.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (xs.iter().sum::<f64>() / k, ys.iter().sum::<f64>() / k, lo, hi)
        })
        .collect();
    Series { label: label.into(), points }
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// A fixed-size SVG line chart; identical input gives identical bytes.
pub fn render_svg(series: &[Series], x_label: &str, y_label: &str) -> String {
    let (w, h, ml, mr, mt, mb) = (640.0, 400.0, 70.0, 20.0, 20.0, 50.0);
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.2.is_finite() && p.3.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in pts {
        x0 = x0.min(p.0);
        x1 = x1.max(p.0);
        y0 = y0.min(p.2);
        y1 = y1.max(p.3);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| ml + (x - x0) / (x1 - x0) * (w - ml - mr);
    let sy = |y: f64| h - mb - (y - y0) / (y1 - y0) * (h - mt - mb);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<line x1="{ml}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - mb, w - mr, h - mb);
    let _ = writeln!(s, r#"<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{}" stroke="black"/>"#, h - mb);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, sx(xv), h - mb + 15.0, tick(xv));
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, ml - 5.0, sy(yv) + 4.0, tick(yv));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (ml + w - mr) / 2.0, h - 10.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">{}</text>"#,
        (mt + h - mb) / 2.0,
        (mt + h - mb) / 2.0,
        escape(y_label)
    );
    for (k, ser) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let finite: Vec<_> = ser.points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
        if finite.is_empty() {
            continue;
        }
        let mut band = String::new();
        for p in &finite {
            let _ = write!(band, "{:.2},{:.2} ", sx(p.0), sy(p.3));
        }
        for p in finite.iter().rev() {
            let _ = write!(band, "{:.2},{:.2} ", sx(p.0), sy(p.2));
        }
        let _ = writeln!(s, r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, band.trim_end());
        let line: Vec<String> = finite.iter().map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.1))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, line.join(" "));
        let ly = mt + 14.0 * (k as f64 + 1.0);
        let _ = writeln!(s, r#"<text x="{}" y="{ly}" fill="{color}">{}</text>"#, ml + 10.0, escape(&ser.label));
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Files written by [`plot`].
#[derive(Clone, Debug)]
pub struct PlotFiles {
    pub svg: PathBuf,
    pub data: PathBuf,
    pub summary: PathBuf,
}

/// Plot several labelled groups of runs onto one chart and write the tidy
/// per-run data and the aggregated curves next to it.
pub fn plot(
    groups: &[(String, Vec<Vec<MetricsRecord>>)],
    x: XAxis,
    metric: &str,
    best_till_now: bool,
    out_stem: &Path,
) -> Result<PlotFiles> {
    if groups.iter().all(|g| g.1.is_empty()) {
        return Err(Error::Metrics("no runs to plot".into()));
    }
    let mut data = csv::Writer::from_writer(Vec::new());
    let mut summary = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Metrics(e.to_string());
    data.write_record(["group", "run", "x", "y"]).map_err(csv_err)?;
    summary.write_record(["group", "x", "mean", "low", "high"]).map_err(csv_err)?;
    let mut series = Vec::new();
    for (label, runs) in groups {
        let cs = curves(runs, x, metric, best_till_now)?;
        for (r, c) in cs.iter().enumerate() {
            for (xv, yv) in c {
                data.write_record([label.clone(), r.to_string(), xv.to_string(), yv.to_string()]).map_err(csv_err)?;
            }
        }
        let ser = aggregate(label, &cs);
        for p in &ser.points {
            summary
                .write_record([label.clone(), p.0.to_string(), p.1.to_string(), p.2.to_string(), p.3.to_string()])
                .map_err(csv_err)?;
        }
        series.push(ser);
    }
    let x_label = match x {
        XAxis::Steps => "environment steps",
        XAxis::WallClock => "wall clock (s)",
    };
    let y_label = if best_till_now { format!("best {metric}") } else { metric.to_string() };
    let files = PlotFiles {
        svg: out_stem.with_extension("svg"),
        data: out_stem.with_extension("data.csv"),
        summary: out_stem.with_extension("summary.csv"),
    };
    if let Some(parent) = out_stem.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&files.svg, render_svg(&series, x_label, &y_label))?;
    fs::write(&files.data, data.into_inner().map_err(|e| Error::Metrics(e.to_string()))?)?;
    fs::write(&files.summary, summary.into_inner().map_err(|e| Error::Metrics(e.to_string()))?)?;
    Ok(files)
}

/// Read every `metrics.csv` directly inside or one level below `dir`.
pub fn collect_runs(dir: &Path) -> Result<Vec<Vec<MetricsRecord>>> {
    let direct = dir.join("metrics.csv");
    if direct.is_file() {
        return Ok(vec![read_metrics(&direct)?]);
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.join("metrics.csv").is_file()).collect();
    subdirs.sort();
    subdirs.iter().map(|d| read_metrics(&d.join("metrics.csv"))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    GradientCorrection,
    Sandwich,
    PosteriorType,
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradient_correction" => Ok(Ablation::GradientCorrection),
            "sandwich" => Ok(Ablation::Sandwich),
            "posterior_type" => Ok(Ablation::PosteriorType),
            other => Err(Error::config(
                "ablation",
                format!("unknown ablation `{other}`; expected gradient_correction, sandwich or posterior_type"),
            )),
        }
    }
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::GradientCorrection => "gradient_correction",
            Ablation::Sandwich => "sandwich",
            Ablation::PosteriorType => "posterior_type",
        }
    }

    /// The full method and its ablated twin, labelled.
    pub fn pair(self, base: &ExperimentSpec) -> [(String, ExperimentSpec); 2] {
        let (mut full, mut ablated) = (base.clone(), base.clone());
        let labels = match self {
            Ablation::GradientCorrection => {
                full.train.correction = true;
                ablated.train.correction = false;
                ("corrected", "standard")
            }
            Ablation::Sandwich => {
                if full.train.flow.alpha_mode == AlphaMode::ElboOnly {
                    full.train.flow.alpha_mode = AlphaMode::Adaptive;
                }
                ablated.train.flow.alpha_mode = AlphaMode::ElboOnly;
                ("sandwich", "elbo_only")
            }
            Ablation::PosteriorType => {
                full.train.flow.posterior_mode = PosteriorMode::Flow;
                ablated.train.flow.posterior_mode = PosteriorMode::Gaussian;
                ("flow_posterior", "gaussian_posterior")
            }
        };
        let root = base.output_dir.join(self.name());
        full.output_dir = root.join(labels.0);
        ablated.output_dir = root.join(labels.1);
        [(labels.0.into(), full), (labels.1.into(), ablated)]
    }
}

fn flatten_toml(prefix: &str, v: &toml::Value, out: &mut BTreeMap<String, String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_toml(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.into(), other.to_string());
        }
    }
}

/// Dotted keys whose values differ between two specs.
pub fn spec_diff(a: &ExperimentSpec, b: &ExperimentSpec) -> Vec<String> {
    let flat = |s: &ExperimentSpec| {
        let mut m = BTreeMap::new();
        flatten_toml("", &toml::Value::try_from(s).expect("spec converts to TOML"), &mut m);
        m
    };
    let (fa, fb) = (flat(a), flat(b));
    let keys: BTreeSet<&String> = fa.keys().chain(fb.keys()).collect();
    keys.into_iter().filter(|k| fa.get(*k) != fb.get(*k)).cloned().collect()
}

/// Final-window statistics of one arm of an ablation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArmSummary {
    pub label: String,
    pub final_return: f64,
    pub first_valid_fraction: f64,
    pub final_valid_fraction: f64,
    /// Seeds whose run ended early because rejection sampling starved.
    pub starved_seeds: usize,
}

/// Mean over runs of the mean of the first and last `frac` of a column.
pub fn window_means(runs: &[Vec<MetricsRecord>], metric: &str, frac: f64) -> (f64, f64) {
    let mut first = Vec::new();
    let mut last = Vec::new();
    for r in runs {
        let ys: Vec<f64> = r.iter().filter_map(|x| x.column(metric)).filter(|y| y.is_finite()).collect();
        if ys.is_empty() {
            continue;
        }
        let k = ((ys.len() as f64 * frac).ceil() as usize).max(1);
        first.push(ys[..k].iter().sum::<f64>() / k as f64);
        last.push(ys[ys.len() - k..].iter().sum::<f64>() / k as f64);
    }
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    (mean(&first), mean(&last))
}

/// Run both arms of an ablation and write overlaid curves and a report.
pub fn ablate(which: Ablation, base: &ExperimentSpec) -> Result<Vec<ArmSummary>> {
    base.validate()?;
    let arms = which.pair(base);
    let mut groups = Vec::new();
    let mut report = Vec::new();
    for (label, spec) in &arms {
        spec.validate()?;
        let mut runs: Vec<Vec<MetricsRecord>> = Vec::new();
        let mut starved_seeds = 0;
        for &seed in &spec.seeds {
            let dir = run_dir(&spec.output_dir, seed);
            match train_seed(spec, seed, &dir) {
                Ok(out) => runs.push(out.records),
                // a starved arm ends there; its logged metrics still count
                Err(Error::RolloutStarved { .. }) => {
                    starved_seeds += 1;
                    runs.push(read_metrics(&dir.join("metrics.csv"))?);
                }
                Err(e) => return Err(e),
            }
        }
        let (first_vf, final_vf) = window_means(&runs, "valid_fraction_mean", 0.1);
        let (_, final_ret) = window_means(&runs, "mean_return", 0.1);
        report.push(ArmSummary {
            label: label.clone(),
            final_return: final_ret,
            first_valid_fraction: first_vf,
            final_valid_fraction: final_vf,
            starved_seeds,
        });
        groups.push((label.clone(), runs));
    }
    let root = base.output_dir.join(which.name());
    plot(&groups, XAxis::Steps, "valid_fraction_mean", false, &root.join("valid_fraction"))?;
    plot(&groups, XAxis::Steps, "mean_return", false, &root.join("mean_return"))?;
    let mut w = csv::Writer::from_path(root.join("report.csv")).map_err(|e| Error::Metrics(e.to_string()))?;
    for r in &report {
        w.serialize(r).map_err(|e| Error::Metrics(e.to_string()))?;
    }
    w.flush()?;
    Ok(report)
}

/// Check a file as an experiment spec, or as an ERA graph when `era` is set.
pub fn validate_file(path: &Path, era: bool) -> Result<String> {
    let text = fs::read_to_string(path)?;
    if era {
        let cfg = EraConfig::from_toml(&text)?;
        Ok(format!("ERA config: {} nodes, {} resources, max_hops {}", cfg.n_nodes(), cfg.n_resources, cfg.max_hops))
    } else {
        let spec = ExperimentSpec::from_toml(&text)?;
        let size = spec.make_env()?.0.action_space().size();
        Ok(format!("{} on {} ({size} joint actions), {} seed(s)", spec.policy, spec.env, spec.seeds.len()))
    }
}

/// Errors that a user fixes by editing input, as opposed to runtime failures.
pub fn is_validation_error(e: &Error) -> bool {
    matches!(
        e,
        Error::Config { .. } | Error::UnknownVersion(_) | Error::Capacity { .. } | Error::Schema { .. } | Error::Checkpoint(_)
    )
}
