//! Suite pipeline: generate a task grid, run reference protocols over it,
//! and report metrics, VPS tables and frontier points.
//!
//! Output layout under one root:
//!
//! ```text
//! scenarios/task_000.json
//! traces/<protocol>/task_000.json
//! reports/{seats,table1,completion,frontier}.csv
//! reports/{belief_evidence,pair_round_vps,game_summary,game_target_summary}.csv
//! sweep/frontier.csv
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::AgentId;
use crate::engine::{Clock, EngineConfig, EngineError};
use crate::metrics::{
    frontier_point, seat_reports, FrontierPoint, MetricsError, MetricsReport, FRONTIER_HEADER,
};
use crate::protocols::{resolve_lineup, run_protocol_game, DsmParams, ProtocolError, ProtocolSpec};
use crate::scenario::{
    generate_scenario, CostMode, Density, DifficultyBucket, DifficultyBuckets, Scenario,
    ScenarioError, ScenarioParams, SeededRng,
};
use crate::trace::{self, list_traces, TraceError, TraceFile};
use crate::vps::{analyze_trace, write_csv, CsvError, VpsConfig, VpsTables};

/// Stream for per-agent density draws, separate from calendars (0), labels (1)
/// and game ids (2).
pub const DENSITY_STREAM: u64 = 3;

#[derive(Debug, Error)]
pub enum SuiteError {
    #[error("invalid suite config: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Toml {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("{}: {source}", path.display())]
    ScenarioJson {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("task {task}: {source}")]
    Scenario {
        task: String,
        #[source]
        source: ScenarioError,
    },
    #[error("task {task}: engine defect: {source}")]
    Engine {
        task: String,
        #[source]
        source: EngineError,
    },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Csv(#[from] CsvError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SuiteError + '_ {
    move |source| SuiteError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Fixed scenario parameters shared by every task; key names follow the
/// scenario generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    /// First task seed; task `i` uses `seed + i`.
    pub seed: u64,
    pub num_agents: usize,
    pub num_slots: usize,
    pub num_meetings: usize,
    pub pref_level: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub errand_cost_level: Option<u32>,
    pub meeting_cost_level: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub participant_lists: Option<Vec<Vec<AgentId>>>,
    pub participants_per_meeting: usize,
    pub force_witness_errand: bool,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self {
            seed: 0,
            num_agents: 5,
            num_slots: 16,
            num_meetings: 5,
            pref_level: 3,
            errand_cost_level: None,
            meeting_cost_level: 1,
            participant_lists: None,
            participants_per_meeting: 3,
            force_witness_errand: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensitySampling {
    /// Every agent draws its own density from the list.
    #[default]
    PerAgent,
    /// Each listed density is a grid axis shared by all agents.
    Shared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub densities: Vec<f64>,
    #[serde(default)]
    pub density_sampling: DensitySampling,
    pub blocked_errand_counts: Vec<usize>,
    pub cost_modes: Vec<CostMode>,
    pub seeds_per_cell: usize,
    /// Keeps only the first tasks of the grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tasks: Option<usize>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            densities: vec![0.6, 0.8, 1.0],
            density_sampling: DensitySampling::PerAgent,
            blocked_errand_counts: vec![2, 4, 6],
            cost_modes: vec![CostMode::Uniform, CostMode::Varied],
            seeds_per_cell: 15,
            max_tasks: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Preset the sweep starts from.
    pub base: String,
    pub theta: Vec<f64>,
    pub l_max: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            base: "dsm_private".into(),
            theta: vec![0.0, 1.0, 10.0],
            l_max: vec![2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub scenario: ScenarioSection,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub engine: EngineConfig,
    /// Homogeneous lineups to run, one trace directory each.
    #[serde(default = "default_protocols")]
    pub protocols: Vec<String>,
    /// Explicit per-seat lineup; must name a single protocol.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lineup: Option<Vec<String>>,
    #[serde(default)]
    pub vps: VpsConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    /// Worker threads; 0 uses every core.
    #[serde(default)]
    pub workers: usize,
}

fn default_name() -> String {
    "canonical".into()
}

fn default_protocols() -> Vec<String> {
    ProtocolSpec::NAMES.iter().map(|s| s.to_string()).collect()
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self::canonical()
    }
}

/// One grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub index: usize,
    pub name: String,
    pub params: ScenarioParams,
}

impl SuiteConfig {
    /// 90 tasks: 3 blocked counts × 15 seeds × 2 cost modes, per-agent densities.
    pub fn canonical() -> Self {
        Self {
            name: default_name(),
            scenario: ScenarioSection::default(),
            grid: GridConfig::default(),
            engine: EngineConfig::default(),
            protocols: default_protocols(),
            lineup: None,
            vps: VpsConfig::default(),
            sweep: SweepConfig::default(),
            workers: 0,
        }
    }

    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self, SuiteError> {
        let config: Self = toml::from_str(text).map_err(|source| SuiteError::Toml {
            path: path.to_path_buf(),
            source,
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, SuiteError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("suite config serializes")
    }

    pub fn validate(&self) -> Result<(), SuiteError> {
        let g = &self.grid;
        if g.densities.is_empty()
            || g.blocked_errand_counts.is_empty()
            || g.cost_modes.is_empty()
            || g.seeds_per_cell == 0
        {
            return Err(SuiteError::Config("grid is empty".into()));
        }
        if g.densities.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return Err(SuiteError::Config("densities must lie in [0, 1]".into()));
        }
        let modes: BTreeSet<_> = g.cost_modes.iter().map(|m| *m as u8).collect();
        if modes.len() != g.cost_modes.len() {
            return Err(SuiteError::Config("cost_modes repeats a mode".into()));
        }
        self.engine
            .validate()
            .map_err(|e| SuiteError::Config(e.to_string()))?;
        self.protocol_specs()?;
        self.sweep_specs()?;
        if !(0.0..=1.0).contains(&self.vps.prior) || self.vps.floor < 0.0 {
            return Err(SuiteError::Config(
                "vps prior must lie in [0, 1] and floor be nonnegative".into(),
            ));
        }
        Ok(())
    }

    /// The protocols `run` executes: the explicit lineup if set, else `protocols`.
    pub fn protocol_specs(&self) -> Result<Vec<ProtocolSpec>, SuiteError> {
        let specs = match &self.lineup {
            Some(seats) => {
                if seats.len() != self.scenario.num_agents {
                    return Err(SuiteError::Config(format!(
                        "lineup has {} seats but num_agents is {}",
                        seats.len(),
                        self.scenario.num_agents
                    )));
                }
                vec![resolve_lineup(seats)?]
            }
            None => self
                .protocols
                .iter()
                .map(|p| ProtocolSpec::from_name(p))
                .collect::<Result<Vec<_>, _>>()?,
        };
        for s in &specs {
            s.validate()?;
        }
        Ok(specs)
    }

    /// One DSM spec per `(theta, l_max)` pair, theta-major.
    pub fn sweep_specs(&self) -> Result<Vec<ProtocolSpec>, SuiteError> {
        let base = match ProtocolSpec::from_name(&self.sweep.base)? {
            ProtocolSpec::Dsm { params, .. } => params,
            _ => return Err(SuiteError::Config("sweep base must be a DSM preset".into())),
        };
        let mut out = Vec::new();
        for &theta in &self.sweep.theta {
            for &l_max in &self.sweep.l_max {
                let params = DsmParams {
                    theta,
                    l_max,
                    l_min: base.l_min.min(l_max.max(1)),
                    ..base.clone()
                };
                let spec = ProtocolSpec::Dsm {
                    name: format!("dsm_theta{theta}_lmax{l_max}"),
                    params,
                };
                spec.validate()?;
                out.push(spec);
            }
        }
        Ok(out)
    }

    /// Grid points in a fixed order: cost mode, then density (shared
    /// sampling only), then blocked count, then seed.
    pub fn tasks(&self) -> Vec<TaskSpec> {
        let g = &self.grid;
        let shared: Vec<Option<f64>> = match g.density_sampling {
            DensitySampling::PerAgent => vec![None],
            DensitySampling::Shared => g.densities.iter().copied().map(Some).collect(),
        };
        let mut out = Vec::new();
        for &mode in &g.cost_modes {
            for &density in &shared {
                for &blocked in &g.blocked_errand_counts {
                    for _ in 0..g.seeds_per_cell {
                        let index = out.len();
                        let seed = self.scenario.seed + index as u64;
                        out.push(TaskSpec {
                            index,
                            name: format!("task_{index:03}"),
                            params: self.params_for(seed, mode, density, blocked),
                        });
                    }
                }
            }
        }
        if let Some(max) = g.max_tasks {
            out.truncate(max);
        }
        out
    }

    fn params_for(
        &self,
        seed: u64,
        mode: CostMode,
        shared: Option<f64>,
        blocked: usize,
    ) -> ScenarioParams {
        let s = &self.scenario;
        let density = match shared {
            Some(d) => Density::Shared(d),
            None => {
                let mut rng = SeededRng::new(seed, DENSITY_STREAM);
                let d = &self.grid.densities;
                Density::PerAgent((0..s.num_agents).map(|_| d[rng.below(d.len())]).collect())
            }
        };
        let mut p = ScenarioParams::new(seed, s.num_agents, s.num_meetings);
        p.num_slots = s.num_slots;
        p.density = density;
        p.pref_level = s.pref_level;
        p.errand_cost_level = s.errand_cost_level;
        p.meeting_cost_level = s.meeting_cost_level;
        p.participant_lists = s.participant_lists.clone();
        p.participants_per_meeting = s.participants_per_meeting;
        p.blocked_errand_count = blocked;
        p.force_witness_errand = s.force_witness_errand;
        p.cost_mode = mode;
        p
    }

    fn pool(&self) -> rayon::ThreadPool {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .expect("thread pool builds")
    }
}

/// Generates every task in memory, in task order.
pub fn generate_tasks(config: &SuiteConfig) -> Result<Vec<(TaskSpec, Scenario)>, SuiteError> {
    let tasks = config.tasks();
    config.pool().install(|| {
        tasks
            .into_par_iter()
            .map(|t| {
                let sc = generate_scenario(&t.params).map_err(|source| SuiteError::Scenario {
                    task: t.name.clone(),
                    source,
                })?;
                Ok((t, sc))
            })
            .collect()
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateSummary {
    pub files: Vec<PathBuf>,
    pub difficulty: Vec<f64>,
    pub buckets: DifficultyBuckets,
    /// Hard, medium, easy counts under suite tertiles.
    pub bucket_counts: [usize; 3],
}

pub fn scenario_dir(root: &Path) -> PathBuf {
    root.join("scenarios")
}

pub fn trace_dir(root: &Path, protocol: &str) -> PathBuf {
    root.join("traces").join(protocol)
}

pub fn report_dir(root: &Path) -> PathBuf {
    root.join("reports")
}

fn write_file(path: &Path, text: &str) -> Result<(), SuiteError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

/// Writes `scenarios/task_NNN.json` for every grid point.
pub fn generate(config: &SuiteConfig, root: &Path) -> Result<GenerateSummary, SuiteError> {
    let generated = generate_tasks(config)?;
    let dir = scenario_dir(root);
    let mut files = Vec::new();
    let mut difficulty = Vec::new();
    for (task, sc) in &generated {
        let path = dir.join(format!("{}.json", task.name));
        write_file(&path, &sc.to_json())?;
        files.push(path);
        difficulty.push(sc.difficulty_d());
    }
    let buckets = DifficultyBuckets::tertiles(&difficulty);
    let mut bucket_counts = [0; 3];
    for &d in &difficulty {
        let i = match buckets.classify(d) {
            DifficultyBucket::Hard => 0,
            DifficultyBucket::Medium => 1,
            DifficultyBucket::Easy => 2,
        };
        bucket_counts[i] += 1;
    }
    Ok(GenerateSummary {
        files,
        difficulty,
        buckets,
        bucket_counts,
    })
}

/// Reads `scenarios/*.json` in name order.
pub fn load_scenarios(root: &Path) -> Result<Vec<(String, Scenario)>, SuiteError> {
    let dir = scenario_dir(root);
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(io_err(&dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let text = fs::read_to_string(&p).map_err(io_err(&p))?;
            let sc = Scenario::from_json(&text).map_err(|source| SuiteError::ScenarioJson {
                path: p.clone(),
                source,
            })?;
            let name = p
                .file_stem()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            Ok((name, sc))
        })
        .collect()
}

/// Runs one protocol over named scenarios, keeping input order.
pub fn run_games(
    config: &SuiteConfig,
    scenarios: &[(String, Scenario)],
    spec: &ProtocolSpec,
    clock: &Clock,
) -> Result<Vec<(String, TraceFile)>, SuiteError> {
    config.pool().install(|| {
        scenarios
            .par_iter()
            .map(|(name, sc)| {
                let t = run_protocol_game(sc, spec, &config.engine, clock.clone()).map_err(
                    |source| SuiteError::Engine {
                        task: name.clone(),
                        source,
                    },
                )?;
                Ok((name.clone(), t))
            })
            .collect()
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunSummary {
    /// `(protocol, traces written)`.
    pub counts: Vec<(String, usize)>,
}

/// Runs every configured protocol over `scenarios/`, writing `traces/<protocol>/`.
pub fn run(config: &SuiteConfig, root: &Path, clock: &Clock) -> Result<RunSummary, SuiteError> {
    let scenarios = load_scenarios(root)?;
    let mut summary = RunSummary::default();
    for spec in config.protocol_specs()? {
        let traces = run_games(config, &scenarios, &spec, clock)?;
        let dir = trace_dir(root, spec.name());
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for (name, t) in &traces {
            trace::write(t, &dir.join(format!("{name}.json")))?;
        }
        summary.counts.push((spec.name().to_string(), traces.len()));
    }
    Ok(summary)
}

/// Reads every trace under `traces/*/`, keyed by path relative to `root`.
pub fn load_traces(root: &Path) -> Result<Vec<(String, TraceFile)>, SuiteError> {
    let base = root.join("traces");
    if !base.exists() {
        return Ok(Vec::new());
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(&base)
        .map_err(io_err(&base))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut out = Vec::new();
    for dir in dirs {
        for path in list_traces(&dir)? {
            let rel = path
                .strip_prefix(root)
                .unwrap_or(&path)
                .to_string_lossy()
                .into_owned();
            out.push((rel, trace::read(&path)?));
        }
    }
    Ok(out)
}

/// Metrics and VPS tables for a set of named traces.
pub fn analyze(
    traces: &[(String, TraceFile)],
    vps: &VpsConfig,
) -> Result<(MetricsReport, VpsTables), SuiteError> {
    let per_game: Vec<_> = traces
        .par_iter()
        .map(|(path, t)| {
            let g = analyze_trace(t, path, vps);
            let seats = seat_reports(t, path, Some(&g))?;
            Ok::<_, SuiteError>((g, seats))
        })
        .collect::<Result<_, _>>()?;
    let mut tables = VpsTables::default();
    let mut seats = Vec::new();
    for (g, s) in per_game {
        tables.push(g);
        seats.extend(s);
    }
    Ok((MetricsReport::from_seats(seats), tables))
}

/// Reads `traces/`, writes `reports/`.
pub fn report(config: &SuiteConfig, root: &Path) -> Result<(MetricsReport, VpsTables), SuiteError> {
    let traces = load_traces(root)?;
    let (metrics, tables) = config.pool().install(|| analyze(&traces, &config.vps))?;
    let dir = report_dir(root);
    metrics.write_csvs(&dir)?;
    tables.write_csvs(&dir)?;
    Ok((metrics, tables))
}

/// Runs every sweep point over `scenarios/` and writes `sweep/frontier.csv`.
/// Traces stay in memory.
pub fn sweep(
    config: &SuiteConfig,
    root: &Path,
    clock: &Clock,
) -> Result<Vec<FrontierPoint>, SuiteError> {
    let scenarios = load_scenarios(root)?;
    let mut points = Vec::new();
    for spec in config.sweep_specs()? {
        let traces = run_games(config, &scenarios, &spec, clock)?;
        let (metrics, _) = config.pool().install(|| analyze(&traces, &config.vps))?;
        points.push(frontier_point(spec.name(), &metrics.seats));
    }
    let dir = root.join("sweep");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    write_csv(&dir.join("frontier.csv"), &points, FRONTIER_HEADER)?;
    Ok(points)
}
