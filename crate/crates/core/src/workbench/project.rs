//! The project workspace and the stage state machine over it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::{ClockKind, ConfigError, ProjectConfig};
use super::metrics::{compute_metrics, MetricsFormat, MetricsReport};
use super::store::{transcript_path, LockError, ProjectLock, Store, StoreSink};
use crate::document::{load_bundle, DocumentError, PaperBundle};
use crate::extraction::{self, topological_order, validate_division, ExtractionError, ModuleDivision, SystemMetadata};
use crate::funcgen::{self, FuncgenError, TestCase};
use crate::gateway::{Clock, Gateway, GatewayState, LogicalClock, Session, Transcript, WallClock};
use crate::prompting::PromptKit;
use crate::repair::{
    self, CheckCase, EpisodeTag, Failure, IntegrationCase, PatternTable, RepairContext, RepairEpisode, RepairError,
    SandboxRecheck,
};
use crate::report::ValidationReport;
use crate::scaffold::code::{adapter_for, LanguageAdapter};
use crate::scaffold::{self, CodeUnit};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const METADATA: &str = "metadata.json";
pub const DIVISION: &str = "modules.json";
pub const INTEGRATION_CASES: &str = "tests/integration.json";
const FORMAT: &str = "papyrus-project/1";
/// Approvals from the CLI and the API are recorded under one actor so
/// that both produce the same files.
pub const OPERATOR: &str = "operator";

#[derive(Debug, Error)]
pub enum WorkbenchError {
    #[error("{0} already holds a project; resume it instead")]
    RefusedExisting(PathBuf),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Document(#[from] DocumentError),
    #[error("corrupt workspace: {0}")]
    CorruptWorkspace(String),
    #[error("`{0}` has not been produced yet")]
    NotProduced(String),
    #[error("cannot run `{op}` while the project is {stage}")]
    OutOfOrderStage { op: String, stage: String },
    #[error("unknown stage `{0}`; expected extract, scaffold, funcgen, integrate or test")]
    UnknownStage(String),
    #[error("stage `{stage}` failed: {reason}")]
    StageFailed { stage: String, reason: String },
    #[error("division has validation errors:\n{}", .0.summary())]
    ValidationFailed(ValidationReport),
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
    #[error("unknown module `{0}`")]
    UnknownModule(String),
    #[error("unknown repair episode `{0}`")]
    UnknownEpisode(String),
    #[error(transparent)]
    Repair(#[from] RepairError),
    #[error("paper-reading timer: {0}")]
    UnbalancedTimer(String),
    #[error(transparent)]
    Locked(#[from] LockError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Initialized,
    Extracted,
    DivisionApproved,
    Scaffolded,
    FunctionsGenerated,
    Integrated,
    Repairing,
    Done,
    Failed { stage: String, reason: String },
}

impl Stage {
    /// The documented order, without the failure state.
    pub const ORDER: [Stage; 8] = [
        Stage::Initialized,
        Stage::Extracted,
        Stage::DivisionApproved,
        Stage::Scaffolded,
        Stage::FunctionsGenerated,
        Stage::Integrated,
        Stage::Repairing,
        Stage::Done,
    ];
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Failed { stage, reason } => write!(f, "Failed({stage}: {reason})"),
            other => write!(f, "{other:?}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageOp {
    Extract,
    Scaffold,
    Funcgen,
    Integrate,
    Test,
}

impl StageOp {
    pub const ALL: [StageOp; 5] = [StageOp::Extract, StageOp::Scaffold, StageOp::Funcgen, StageOp::Integrate, StageOp::Test];

    pub fn name(self) -> &'static str {
        match self {
            StageOp::Extract => "extract",
            StageOp::Scaffold => "scaffold",
            StageOp::Funcgen => "funcgen",
            StageOp::Integrate => "integrate",
            StageOp::Test => "test",
        }
    }

    /// The state the operation starts from.
    pub fn from(self) -> Stage {
        match self {
            StageOp::Extract => Stage::Initialized,
            StageOp::Scaffold => Stage::DivisionApproved,
            StageOp::Funcgen => Stage::Scaffolded,
            StageOp::Integrate => Stage::FunctionsGenerated,
            StageOp::Test => Stage::Integrated,
        }
    }

    /// The state a clean run ends in.
    pub fn done(self) -> Stage {
        match self {
            StageOp::Extract => Stage::Extracted,
            StageOp::Scaffold => Stage::Scaffolded,
            StageOp::Funcgen => Stage::FunctionsGenerated,
            StageOp::Integrate => Stage::Integrated,
            StageOp::Test => Stage::Done,
        }
    }
}

impl fmt::Display for StageOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StageOp {
    type Err = WorkbenchError;

    fn from_str(s: &str) -> Result<StageOp, WorkbenchError> {
        StageOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| WorkbenchError::UnknownStage(s.to_string()))
    }
}

/// Things that move a project between states.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    /// An operation finished; `open_episodes` says whether repairs remain.
    Ran { op: StageOp, open_episodes: bool },
    RunFailed { op: StageOp, reason: String },
    Approved,
    /// The last open repair episode was resolved by hand.
    EpisodesClosed,
}

fn may_run(stage: &Stage, op: StageOp) -> bool {
    match stage {
        Stage::Failed { stage, .. } => stage == op.name(),
        s => *s == op.from() || *s == op.done(),
    }
}

/// The state after `event`, or `None` when the event is not allowed in
/// `stage`. Re-running the operation that produced the current state is
/// allowed and overwrites its outputs.
pub fn transition(stage: &Stage, event: &Event) -> Option<Stage> {
    match event {
        Event::Ran { op, open_episodes } => {
            if !may_run(stage, *op) {
                return None;
            }
            let needs_repair = matches!(op, StageOp::Integrate | StageOp::Test) && *open_episodes;
            Some(if needs_repair { Stage::Repairing } else { op.done() })
        }
        Event::RunFailed { op, reason } => may_run(stage, *op).then(|| Stage::Failed {
            stage: op.name().to_string(),
            reason: reason.clone(),
        }),
        Event::Approved => {
            matches!(stage, Stage::Extracted | Stage::DivisionApproved).then_some(Stage::DivisionApproved)
        }
        Event::EpisodesClosed => (*stage == Stage::Repairing).then_some(Stage::Integrated),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start_ms: u64,
    pub stop_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimerAction {
    Start,
    Stop,
}

impl FromStr for TimerAction {
    type Err = WorkbenchError;

    fn from_str(s: &str) -> Result<TimerAction, WorkbenchError> {
        match s {
            "start" => Ok(TimerAction::Start),
            "stop" => Ok(TimerAction::Stop),
            other => Err(WorkbenchError::UnbalancedTimer(format!("unknown action `{other}`"))),
        }
    }
}

/// Human time declared with start and stop events.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timer {
    pub spans: Vec<Span>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub running_since: Option<u64>,
}

impl Timer {
    pub fn apply(&mut self, action: TimerAction, at_ms: u64) -> Result<(), WorkbenchError> {
        match (action, self.running_since) {
            (TimerAction::Start, None) => self.running_since = Some(at_ms),
            (TimerAction::Start, Some(t)) => {
                return Err(WorkbenchError::UnbalancedTimer(format!("already running since {t}")))
            }
            (TimerAction::Stop, None) => return Err(WorkbenchError::UnbalancedTimer("stop without start".into())),
            (TimerAction::Stop, Some(start)) => {
                if at_ms < start {
                    return Err(WorkbenchError::UnbalancedTimer(format!("stop at {at_ms} is before start at {start}")));
                }
                self.spans.push(Span { start_ms: start, stop_ms: at_ms });
                self.running_since = None;
            }
        }
        Ok(())
    }

    pub fn total_ms(&self) -> u64 {
        self.spans.iter().map(|s| s.stop_ms - s.start_ms).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub project_id: String,
    pub bundle: PathBuf,
    pub stage: Stage,
    /// Every state the project has been in, oldest first.
    pub history: Vec<Stage>,
    /// Bumped on every write of the manifest.
    pub revision: u64,
    /// Paths, relative to the project, of every persisted output.
    pub artifacts: BTreeSet<String>,
    pub gateway: GatewayState,
    pub clock_ms: u64,
    pub paper_reading: Timer,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub waivers: BTreeMap<String, BTreeSet<String>>,
    pub next_episode: u64,
}

/// What `GET /state` and `status` report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectState {
    pub project_id: String,
    pub stage: Stage,
    pub revision: u64,
    pub history: Vec<Stage>,
    pub artifacts: BTreeSet<String>,
    pub open_episodes: Vec<String>,
    pub paper_reading_ms: u64,
    pub config: ProjectConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivisionView {
    pub division: ModuleDivision,
    pub findings: ValidationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleArtifacts {
    pub module: String,
    pub scot: Option<String>,
    pub framework: Option<CodeUnit>,
    pub unit: Option<CodeUnit>,
    pub secots: BTreeMap<String, String>,
    pub tests: Vec<TestCase>,
    pub episodes: Vec<String>,
}

fn scot_path(m: &str) -> String {
    format!("scots/{m}.md")
}
fn framework_path(m: &str) -> String {
    format!("scots/{m}.framework.json")
}
fn generated_path(m: &str) -> String {
    format!("secots/{m}/unit.json")
}
fn secot_path(m: &str, f: &str) -> String {
    format!("secots/{m}/{f}.secot.md")
}
fn unit_path(m: &str) -> String {
    format!("workspace/{m}/unit.json")
}
fn tests_path(m: &str) -> String {
    format!("tests/{m}.json")
}
fn episode_path(id: &str) -> String {
    format!("repairs/{id}.json")
}

fn corrupt(e: impl fmt::Display) -> WorkbenchError {
    WorkbenchError::CorruptWorkspace(e.to_string())
}

/// Opens sessions and remembers their ids so the transcripts can be indexed.
struct Sessions<'a> {
    gateway: &'a mut Gateway,
    config: &'a ProjectConfig,
    opened: &'a mut Vec<String>,
}

impl Sessions<'_> {
    fn open(&mut self, stage: &str) -> Result<Session, WorkbenchError> {
        let s = self
            .gateway
            .open_session(self.config.profile_for(stage), stage)
            .map_err(|e| WorkbenchError::StageFailed {
                stage: stage.to_string(),
                reason: e.to_string(),
            })?;
        self.opened.push(s.id().to_string());
        Ok(s)
    }
}

pub struct Project {
    store: Store,
    config: ProjectConfig,
    manifest: Manifest,
    bundle: PaperBundle,
    kit: PromptKit,
    adapter: Box<dyn LanguageAdapter>,
    table: PatternTable,
    clock: Arc<dyn Clock>,
    logical: Option<Arc<LogicalClock>>,
    gateway: Gateway,
    opened: Vec<String>,
    _lock: ProjectLock,
}

impl fmt::Debug for Project {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Project")
            .field("root", &self.store.root())
            .field("stage", &self.manifest.stage)
            .finish()
    }
}

impl Project {
    /// Creates a project in `dir` for the bundle at `bundle`.
    pub fn init(dir: &Path, bundle: &Path, config: &Path) -> Result<Project, WorkbenchError> {
        if dir.join(MANIFEST).exists() {
            return Err(WorkbenchError::RefusedExisting(dir.to_path_buf()));
        }
        let mut cfg = ProjectConfig::load(config)?;
        if adapter_for(&cfg.language).is_none() {
            return Err(ConfigError {
                key: "language".into(),
                message: format!("no code adapter for `{}`", cfg.language),
            }
            .into());
        }
        let base = config.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.anchor_stub_paths(&std::path::absolute(&base)?);
        let bundle_path = std::path::absolute(bundle)?;
        load_bundle(&bundle_path)?;

        std::fs::create_dir_all(dir)?;
        let lock = ProjectLock::acquire(dir)?;
        let store = Store::new(dir);
        store.write(CONFIG_SNAPSHOT, cfg.to_toml().as_bytes())?;
        let project_id = std::path::absolute(dir)?
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "project".into());
        let manifest = Manifest {
            format: FORMAT.into(),
            project_id,
            bundle: bundle_path,
            stage: Stage::Initialized,
            history: vec![Stage::Initialized],
            revision: 0,
            artifacts: BTreeSet::from([CONFIG_SNAPSHOT.to_string()]),
            gateway: GatewayState::default(),
            clock_ms: 0,
            paper_reading: Timer::default(),
            waivers: BTreeMap::new(),
            next_episode: 1,
        };
        store.write_json(MANIFEST, &manifest)?;
        drop(lock);
        Project::open(dir)
    }

    /// Rebuilds the project from its files alone.
    pub fn open(dir: &Path) -> Result<Project, WorkbenchError> {
        if !dir.join(MANIFEST).is_file() {
            return Err(corrupt(format!("{MANIFEST} is missing in {}", dir.display())));
        }
        let lock = ProjectLock::acquire(dir)?;
        let store = Store::new(dir);
        store.sweep_temporaries()?;
        let manifest: Manifest = store.read_json(MANIFEST).map_err(corrupt)?;
        if manifest.format != FORMAT {
            return Err(corrupt(format!("unsupported format `{}`", manifest.format)));
        }
        if let Some(missing) = manifest.artifacts.iter().find(|a| !store.exists(a)) {
            return Err(corrupt(format!("indexed artifact `{missing}` is missing")));
        }
        let config = ProjectConfig::parse(&store.read(CONFIG_SNAPSHOT).map_err(corrupt)?)?;
        let adapter = adapter_for(&config.language)
            .ok_or_else(|| corrupt(format!("no code adapter for `{}`", config.language)))?;
        let bundle = load_bundle(&manifest.bundle)?;
        let (clock, logical): (Arc<dyn Clock>, _) = match config.clock {
            ClockKind::Logical => {
                let c = Arc::new(LogicalClock::starting_at(manifest.clock_ms));
                (c.clone(), Some(c))
            }
            ClockKind::Wall => (Arc::new(WallClock), None),
        };
        let mut gateway = Gateway::new(clock.clone()).with_sink(Arc::new(StoreSink(store.clone())));
        gateway.restore(&manifest.gateway);
        Ok(Project {
            kit: config.prompt_kit(),
            store,
            config,
            manifest,
            bundle,
            adapter,
            table: PatternTable::builtin(),
            clock,
            logical,
            gateway,
            opened: Vec::new(),
            _lock: lock,
        })
    }

    pub fn root(&self) -> &Path {
        self.store.root()
    }

    pub fn stage(&self) -> &Stage {
        &self.manifest.stage
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn config(&self) -> &ProjectConfig {
        &self.config
    }

    /// Fault injection: every write after the next `writes` fails, as if
    /// the process had been killed.
    pub fn crash_after(&self, writes: u64) {
        self.store.crash_after(writes);
    }

    pub fn writes(&self) -> u64 {
        self.store.write_count()
    }

    pub fn state(&self) -> Result<ProjectState, WorkbenchError> {
        let open_episodes = self
            .episodes()?
            .into_iter()
            .filter(|e| !e.resolved)
            .map(|e| e.error_id)
            .collect();
        Ok(ProjectState {
            project_id: self.manifest.project_id.clone(),
            stage: self.manifest.stage.clone(),
            revision: self.manifest.revision,
            history: self.manifest.history.clone(),
            artifacts: self.manifest.artifacts.clone(),
            open_episodes,
            paper_reading_ms: self.manifest.paper_reading.total_ms(),
            config: self.config.clone(),
        })
    }

    fn put(&mut self, rel: &str, bytes: &[u8]) -> Result<(), WorkbenchError> {
        self.store.write(rel, bytes)?;
        self.manifest.artifacts.insert(rel.to_string());
        Ok(())
    }

    fn put_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), WorkbenchError> {
        let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
        text.push('\n');
        self.put(rel, text.as_bytes())
    }

    fn get_json<T: serde::de::DeserializeOwned>(&self, rel: &str) -> Result<T, WorkbenchError> {
        if !self.manifest.artifacts.contains(rel) {
            return Err(WorkbenchError::NotProduced(rel.to_string()));
        }
        self.store.read_json(rel).map_err(corrupt)
    }

    /// Writes the manifest, which makes everything written before it part
    /// of the project.
    fn commit(&mut self) -> Result<(), WorkbenchError> {
        for id in std::mem::take(&mut self.opened) {
            let path = transcript_path(&id);
            if self.store.exists(&path) {
                self.manifest.artifacts.insert(path);
            }
        }
        self.manifest.gateway = self.gateway.state();
        self.manifest.clock_ms = self.logical.as_ref().map(|c| c.peek()).unwrap_or(0);
        self.manifest.revision += 1;
        self.store.write_json(MANIFEST, &self.manifest)?;
        Ok(())
    }

    fn enter(&mut self, stage: Stage) {
        self.manifest.history.push(stage.clone());
        self.manifest.stage = stage;
    }

    fn sessions(&mut self) -> Sessions<'_> {
        Sessions {
            gateway: &mut self.gateway,
            config: &self.config,
            opened: &mut self.opened,
        }
    }

    fn out_of_order(&self, op: &str) -> WorkbenchError {
        WorkbenchError::OutOfOrderStage {
            op: op.to_string(),
            stage: self.manifest.stage.to_string(),
        }
    }

    pub fn run_stage(&mut self, name: &str) -> Result<ProjectState, WorkbenchError> {
        self.run(name.parse()?)
    }

    /// Runs one operation. Its outputs and the new state are persisted
    /// together when it ends; a failure is recorded as `Failed`.
    pub fn run(&mut self, op: StageOp) -> Result<ProjectState, WorkbenchError> {
        if !may_run(&self.manifest.stage, op) {
            return Err(self.out_of_order(op.name()));
        }
        let result = match op {
            StageOp::Extract => self.extract().map(|_| false),
            StageOp::Scaffold => self.scaffold().map(|_| false),
            StageOp::Funcgen => self.funcgen().map(|_| false),
            StageOp::Integrate => self.integrate(),
            StageOp::Test => self.test(),
        };
        if self.store.crashed() {
            return Err(super::store::injected_crash().into());
        }
        match result {
            Ok(open_episodes) => {
                let next = transition(&self.manifest.stage, &Event::Ran { op, open_episodes }).expect("checked");
                self.enter(next);
                self.commit()?;
                self.state()
            }
            Err(e) => {
                let reason = match &e {
                    WorkbenchError::StageFailed { reason, .. } => reason.clone(),
                    other => other.to_string(),
                };
                let failed = transition(&self.manifest.stage, &Event::RunFailed { op, reason: reason.clone() })
                    .expect("checked");
                self.enter(failed);
                self.commit()?;
                Err(WorkbenchError::StageFailed {
                    stage: op.name().to_string(),
                    reason,
                })
            }
        }
    }

    fn extract(&mut self) -> Result<(), WorkbenchError> {
        let retries = self.config.retry_limit;
        let mut s = self.sessions().open("extract")?;
        let metadata = extraction::extract_metadata(&self.bundle, &mut s, &self.kit, retries)?;
        let mut s = self.sessions().open("divide")?;
        let division = extraction::divide_modules(&self.bundle, &metadata, &mut s, &self.kit, retries)?;
        self.put_json(METADATA, &metadata)?;
        self.put_json(DIVISION, &division)?;
        Ok(())
    }

    pub fn metadata(&self) -> Result<SystemMetadata, WorkbenchError> {
        self.get_json(METADATA)
    }

    pub fn division(&self) -> Result<DivisionView, WorkbenchError> {
        let division: ModuleDivision = self.get_json(DIVISION)?;
        let findings = validate_division(&division, self.metadata().ok().as_ref());
        Ok(DivisionView { division, findings })
    }

    /// Freezes the division; refused with the findings while it has
    /// validation errors.
    pub fn approve_division(&mut self, actor: &str) -> Result<ProjectState, WorkbenchError> {
        let Some(next) = transition(&self.manifest.stage, &Event::Approved) else {
            return Err(self.out_of_order("approve-division"));
        };
        let division: ModuleDivision = self.get_json(DIVISION)?;
        let metadata = self.metadata()?;
        let at = self.clock.now_ms();
        let approved = match extraction::approve_division(&division, actor, at, Some(&metadata)) {
            Ok(d) => d,
            Err(ExtractionError::ValidationErrorsPresent(r)) => return Err(WorkbenchError::ValidationFailed(r)),
            Err(e) => return Err(e.into()),
        };
        self.put_json(DIVISION, &approved)?;
        if self.manifest.stage != next {
            self.enter(next);
        }
        self.commit()?;
        self.state()
    }

    /// Replaces the pending division with a revision addressing `feedback`.
    pub fn refine_division(&mut self, feedback: &str) -> Result<DivisionView, WorkbenchError> {
        if self.manifest.stage != Stage::Extracted {
            return Err(self.out_of_order("refine-division"));
        }
        let division: ModuleDivision = self.get_json(DIVISION)?;
        let metadata = self.metadata()?;
        let retries = self.config.retry_limit;
        let mut s = self.sessions().open("refine")?;
        let refined = extraction::refine_division(&division, feedback, &metadata, &mut s, &self.kit, retries);
        let refined = match refined {
            Ok(d) => d,
            Err(e) => {
                self.commit()?;
                return Err(e.into());
            }
        };
        self.put_json(DIVISION, &refined)?;
        self.commit()?;
        self.division()
    }

    fn module_order(&self) -> Result<Vec<String>, WorkbenchError> {
        let division: ModuleDivision = self.get_json(DIVISION)?;
        Ok(topological_order(&division)?.into_iter().map(|m| m.name.clone()).collect())
    }

    fn write_unit(&mut self, unit: &CodeUnit) -> Result<(), WorkbenchError> {
        for f in &unit.files {
            let text = f.text.clone();
            self.put(&format!("workspace/{}", f.path), text.as_bytes())?;
        }
        self.put_json(&unit_path(&unit.module_name), unit)
    }

    fn write_harness(&mut self) -> Result<(), WorkbenchError> {
        for (path, text) in self.adapter.harness_files() {
            self.put(&format!("workspace/{path}"), text.as_bytes())?;
        }
        Ok(())
    }

    fn scaffold(&mut self) -> Result<(), WorkbenchError> {
        let division: ModuleDivision = self.get_json(DIVISION)?;
        let retries = self.config.retry_limit;
        for name in self.module_order()? {
            let spec = division.module(&name).expect("ordered from the division").clone();
            let mut s = self.sessions().open("scaffold")?;
            let stage_err = |e: scaffold::ScaffoldError| WorkbenchError::StageFailed {
                stage: "scaffold".into(),
                reason: format!("module `{name}`: {e}"),
            };
            let scot = scaffold::generate_scot(&spec, &mut s, &self.kit, retries).map_err(stage_err)?;
            let mut unit = scaffold::generate_framework(
                &spec,
                &scot,
                &mut s,
                &self.kit,
                self.adapter.as_ref(),
                &self.config.toolchain,
                retries,
            )
            .map_err(stage_err)?;
            scaffold::map_paper_content(&mut unit, &spec, &self.bundle, &mut s, &self.kit, self.adapter.as_ref(), retries)
                .map_err(stage_err)?;
            self.put(&scot_path(&name), scot.to_string().as_bytes())?;
            self.put_json(&framework_path(&name), &unit)?;
            self.write_unit(&unit)?;
        }
        self.write_harness()
    }

    fn funcgen(&mut self) -> Result<(), WorkbenchError> {
        let division: ModuleDivision = self.get_json(DIVISION)?;
        let retries = self.config.retry_limit;
        for name in self.module_order()? {
            let spec = division.module(&name).expect("ordered from the division").clone();
            let mut unit: CodeUnit = self.get_json(&framework_path(&name))?;
            let waived = self.manifest.waivers.get(&name).cloned().unwrap_or_default();
            let todo: Vec<String> = unit
                .placeholders()
                .map(|d| d.name.clone())
                .filter(|n| !waived.contains(n))
                .collect();
            let mut s = self.sessions().open("funcgen")?;
            let mut tests = Vec::new();
            let stage_err = |f: &str, e: FuncgenError| WorkbenchError::StageFailed {
                stage: "funcgen".into(),
                reason: format!("`{name}.{f}`: {e}"),
            };
            for f in &todo {
                let secot = funcgen::generate_secot(&unit, f, &mut s, &self.kit, retries).map_err(|e| stage_err(f, e))?;
                funcgen::generate_function(&mut unit, f, &secot, &mut s, &self.kit, self.adapter.as_ref(), retries)
                    .map_err(|e| stage_err(f, e))?;
                let decl = unit.function(f).expect("generated").clone();
                for w in funcgen::check_io_compliance(&decl, &spec).findings {
                    unit.function_mut(f).expect("generated").flags.push(w.to_string());
                }
                let generated = funcgen::generate_tests(&unit, f, &mut s, &self.kit, self.adapter.as_ref(), retries)
                    .map_err(|e| stage_err(f, e))?;
                tests.extend(generated.cases);
                self.put(&secot_path(&name, f), secot.to_string().as_bytes())?;
            }
            self.put_json(&tests_path(&name), &tests)?;
            self.put_json(&generated_path(&name), &unit)?;
            self.write_unit(&unit)?;
        }
        Ok(())
    }

    fn units_from(&self, path: fn(&str) -> String) -> Result<Vec<CodeUnit>, WorkbenchError> {
        self.module_order()?.iter().map(|m| self.get_json(&path(m))).collect()
    }

    fn new_episode_id(&mut self) -> String {
        let id = format!("E{:03}", self.manifest.next_episode);
        self.manifest.next_episode += 1;
        id
    }

    fn unit_checks(&self, module: &str) -> Result<Vec<CheckCase>, WorkbenchError> {
        let tests: Vec<TestCase> = self.get_json(&tests_path(module))?;
        Ok(tests
            .iter()
            .map(|t| CheckCase {
                module: t.module.clone(),
                function: t.function.clone(),
                case: t.harness_case(),
            })
            .collect())
    }

    fn integrate_check(&self, module: &str) -> impl FnMut(&CodeUnit) -> Result<Option<Failure>, RepairError> + '_ {
        let waivers = self.manifest.waivers.get(module).cloned().unwrap_or_default();
        move |u: &CodeUnit| match funcgen::integrate(u.clone(), &waivers, self.adapter.as_ref(), &self.config.toolchain) {
            Ok(_) => Ok(None),
            Err(FuncgenError::BuildFailed(report)) => Ok(Some(Failure::Build { report: *report })),
            Err(FuncgenError::UnfilledPlaceholders(names)) => Err(RepairError::NotIntegrated(names)),
            Err(other) => Err(RepairError::ContractViolation(other.to_string())),
        }
    }

    /// Runs one automatic repair episode on `units[index]` and stores it.
    fn open_episode(
        &mut self,
        units: &mut [CodeUnit],
        index: usize,
        tag: EpisodeTag,
        trigger: Failure,
        mut recheck: impl FnMut(&Project, &[CodeUnit], &CodeUnit) -> Result<Option<Failure>, RepairError>,
    ) -> Result<RepairEpisode, WorkbenchError> {
        let id = self.new_episode_id();
        let mut session = self.sessions().open("repair")?;
        let ctx = RepairContext::from_units(units);
        let mut unit = units[index].clone();
        let episode = {
            let this: &Project = self;
            let system: &[CodeUnit] = units;
            let mut check = |u: &CodeUnit| recheck(this, system, u);
            repair::repair_loop(
                &mut unit,
                &id,
                tag,
                trigger,
                &ctx,
                &mut session,
                &this.kit,
                this.adapter.as_ref(),
                &this.table,
                &mut check,
                &this.config.repair,
                this.clock.as_ref(),
            )?
        };
        units[index] = unit;
        self.put_json(&episode_path(&id), &episode)?;
        Ok(episode)
    }

    /// Builds every unit and runs the unit tests, repairing failures.
    /// Returns whether an episode is left open.
    fn integrate(&mut self) -> Result<bool, WorkbenchError> {
        let mut units = self.units_from(generated_path)?;
        let mut open = false;
        for i in 0..units.len() {
            let module = units[i].module_name.clone();
            let outcome = self.integrate_check(&module)(&units[i])?;
            if let Some(trigger) = outcome {
                let episode = self.open_episode(&mut units, i, EpisodeTag::Build, trigger, |p, _, u| {
                    p.integrate_check(&u.module_name)(u)
                })?;
                if !episode.resolved {
                    open = true;
                    continue;
                }
            }
            let waivers = self.manifest.waivers.get(&module).cloned().unwrap_or_default();
            units[i] = funcgen::integrate(units[i].clone(), &waivers, self.adapter.as_ref(), &self.config.toolchain)
                .map_err(|e| WorkbenchError::StageFailed {
                    stage: "integrate".into(),
                    reason: format!("module `{module}`: {e}"),
                })?;
        }
        if !open && self.config.run_unit_tests {
            for i in 0..units.len() {
                let module = units[i].module_name.clone();
                let cases = self.unit_checks(&module)?;
                for _ in 0..=cases.len() {
                    let first = SandboxRecheck {
                        system: &units,
                        adapter: self.adapter.as_ref(),
                        toolchain: &self.config.toolchain,
                        cases: cases.clone(),
                    }
                    .recheck_unit(&units[i])?;
                    let Some(trigger) = first else { break };
                    let cases = cases.clone();
                    let episode = self.open_episode(&mut units, i, EpisodeTag::Unit, trigger, move |p, system, u| {
                        SandboxRecheck {
                            system,
                            adapter: p.adapter.as_ref(),
                            toolchain: &p.config.toolchain,
                            cases: cases.clone(),
                        }
                        .recheck_unit(u)
                    })?;
                    if !episode.resolved {
                        open = true;
                        break;
                    }
                }
            }
        }
        for u in &units {
            self.write_unit(u)?;
        }
        self.write_harness()?;
        Ok(open)
    }

    fn first_integration_failure(
        &self,
        units: &[CodeUnit],
        cases: &[IntegrationCase],
    ) -> Result<Option<Failure>, RepairError> {
        let dir = tempfile::tempdir()?;
        let report =
            repair::run_integration_cases(units, cases.to_vec(), dir.path(), self.adapter.as_ref(), &self.config.toolchain)?;
        Ok(report.failures.into_iter().next())
    }

    fn integration_check(
        &self,
        system: &[CodeUnit],
        patched: &CodeUnit,
        cases: &[IntegrationCase],
    ) -> Result<Option<Failure>, RepairError> {
        let mut units: Vec<CodeUnit> = system.to_vec();
        if let Some(slot) = units.iter_mut().find(|u| u.module_name == patched.module_name) {
            *slot = patched.clone();
        }
        self.first_integration_failure(&units, cases)
    }

    /// Cross-module cases over the integrated system, repairing failures.
    fn test(&mut self) -> Result<bool, WorkbenchError> {
        let mut units = self.units_from(unit_path)?;
        let cases: Vec<IntegrationCase> = if self.manifest.artifacts.contains(INTEGRATION_CASES) {
            self.get_json(INTEGRATION_CASES)?
        } else {
            let metadata = self.metadata()?;
            let mut s = self.sessions().open("integration")?;
            let dir = tempfile::tempdir()?;
            let report = repair::integration_test(
                &units,
                &metadata,
                dir.path(),
                &mut s,
                &self.kit,
                self.adapter.as_ref(),
                &self.config.toolchain,
                self.config.retry_limit,
            )
            .map_err(|e| WorkbenchError::StageFailed {
                stage: "test".into(),
                reason: e.to_string(),
            })?;
            self.put_json(INTEGRATION_CASES, &report.cases)?;
            report.cases
        };
        let mut open = false;
        for _ in 0..=cases.len() {
            let Some(trigger) = self.first_integration_failure(&units, &cases)? else { break };
            let Some(module) = repair::failing_module(&trigger, &units) else {
                return Err(WorkbenchError::StageFailed {
                    stage: "test".into(),
                    reason: "an integration failure could not be traced to a module".into(),
                });
            };
            let index = units.iter().position(|u| u.module_name == module).expect("module of the system");
            let Failure::Case(failed) = &trigger else {
                return Err(WorkbenchError::StageFailed {
                    stage: "test".into(),
                    reason: format!("the system does not build:\n{}", trigger.report().diagnostics()),
                });
            };
            let only: Vec<IntegrationCase> = cases.iter().filter(|c| c.name == failed.name).cloned().collect();
            let episode = self.open_episode(&mut units, index, EpisodeTag::Integration, trigger, move |p, system, u| {
                p.integration_check(system, u, &only)
            })?;
            if !episode.resolved {
                open = true;
                break;
            }
        }
        for u in &units {
            self.write_unit(u)?;
        }
        Ok(open)
    }

    pub fn episodes(&self) -> Result<Vec<RepairEpisode>, WorkbenchError> {
        self.manifest
            .artifacts
            .iter()
            .filter(|a| a.starts_with("repairs/"))
            .map(|a| self.get_json(a))
            .collect()
    }

    pub fn episode(&self, id: &str) -> Result<RepairEpisode, WorkbenchError> {
        let path = episode_path(id);
        if !self.manifest.artifacts.contains(&path) {
            return Err(WorkbenchError::UnknownEpisode(id.to_string()));
        }
        self.get_json(&path)
    }

    /// Sends a handcrafted repair prompt within an episode and re-checks.
    /// When it resolves the last open episode the project returns to
    /// `Integrated`.
    pub fn human_prompt(&mut self, id: &str, text: &str) -> Result<RepairEpisode, WorkbenchError> {
        let mut episode = self.episode(id)?;
        let transcript = Transcript::from_jsonl(&self.store.read(&transcript_path(&episode.session_id))?)?;
        let profile = self.config.profile_for("repair").clone();
        let mut session = self
            .gateway
            .resume_session(&profile, transcript)
            .map_err(RepairError::Gateway)?;
        let mut units = self.units_from(unit_path)?;
        let index = units
            .iter()
            .position(|u| u.module_name == episode.module)
            .ok_or_else(|| WorkbenchError::UnknownModule(episode.module.clone()))?;
        let mut unit = units[index].clone();
        let integration: Vec<IntegrationCase> = match episode.tag {
            EpisodeTag::Integration => {
                let all: Vec<IntegrationCase> = self.get_json(INTEGRATION_CASES)?;
                let name = match &episode.trigger {
                    Failure::Case(c) => c.name.clone(),
                    Failure::Build { .. } => String::new(),
                };
                all.into_iter().filter(|c| c.name == name).collect()
            }
            _ => Vec::new(),
        };
        let unit_cases = match episode.tag {
            EpisodeTag::Unit => self.unit_checks(&episode.module)?,
            _ => Vec::new(),
        };
        let tag = episode.tag;
        let result = {
            let this: &Project = self;
            let system: &[CodeUnit] = &units;
            let mut check = |u: &CodeUnit| match tag {
                EpisodeTag::Build => this.integrate_check(&u.module_name)(u),
                EpisodeTag::Unit => SandboxRecheck {
                    system,
                    adapter: this.adapter.as_ref(),
                    toolchain: &this.config.toolchain,
                    cases: unit_cases.clone(),
                }
                .recheck_unit(u),
                EpisodeTag::Integration => this.integration_check(system, u, &integration),
            };
            repair::human_repair_step(
                &mut episode,
                &mut unit,
                text,
                &mut session,
                &this.kit,
                this.adapter.as_ref(),
                &this.table,
                &mut check,
                &this.config.repair,
                this.clock.as_ref(),
            )
        };
        if self.store.crashed() {
            return Err(super::store::injected_crash().into());
        }
        result?;
        units[index] = unit;
        if tag == EpisodeTag::Build && episode.resolved {
            let waivers = self.manifest.waivers.get(&episode.module).cloned().unwrap_or_default();
            if let Ok(u) = funcgen::integrate(units[index].clone(), &waivers, self.adapter.as_ref(), &self.config.toolchain) {
                units[index] = u;
            }
        }
        self.write_unit(&units[index])?;
        self.put_json(&episode_path(id), &episode)?;
        let still_open = self.episodes()?.iter().any(|e| !e.resolved);
        if !still_open {
            if let Some(next) = transition(&self.manifest.stage, &Event::EpisodesClosed) {
                self.enter(next);
            }
        }
        self.commit()?;
        Ok(episode)
    }

    /// Marks a function as deliberately left unimplemented.
    pub fn waive(&mut self, module: &str, function: &str) -> Result<(), WorkbenchError> {
        let framework: CodeUnit = self
            .get_json(&framework_path(module))
            .map_err(|_| WorkbenchError::UnknownModule(module.to_string()))?;
        if framework.function(function).is_none() {
            return Err(WorkbenchError::UnknownModule(format!("{module}.{function}")));
        }
        self.manifest.waivers.entry(module.to_string()).or_default().insert(function.to_string());
        self.commit()
    }

    pub fn module_artifacts(&self, module: &str) -> Result<ModuleArtifacts, WorkbenchError> {
        let division: ModuleDivision = self.get_json(DIVISION)?;
        if division.module(module).is_none() {
            return Err(WorkbenchError::UnknownModule(module.to_string()));
        }
        let opt_json = |rel: String| -> Result<Option<CodeUnit>, WorkbenchError> {
            if self.manifest.artifacts.contains(&rel) {
                self.get_json(&rel).map(Some)
            } else {
                Ok(None)
            }
        };
        let scot = match self.manifest.artifacts.contains(&scot_path(module)) {
            true => Some(self.store.read(&scot_path(module))?),
            false => None,
        };
        let prefix = format!("secots/{module}/");
        let mut secots = BTreeMap::new();
        for a in self.manifest.artifacts.iter().filter(|a| a.starts_with(&prefix) && a.ends_with(".secot.md")) {
            let f = a[prefix.len()..].trim_end_matches(".secot.md").to_string();
            secots.insert(f, self.store.read(a)?);
        }
        let tests = match self.manifest.artifacts.contains(&tests_path(module)) {
            true => self.get_json(&tests_path(module))?,
            false => Vec::new(),
        };
        let episodes = self
            .episodes()?
            .into_iter()
            .filter(|e| e.module == module)
            .map(|e| e.error_id)
            .collect();
        Ok(ModuleArtifacts {
            module: module.to_string(),
            scot,
            framework: opt_json(framework_path(module))?,
            unit: opt_json(unit_path(module))?,
            secots,
            tests,
            episodes,
        })
    }

    pub fn transcripts(&self) -> Result<Vec<Transcript>, WorkbenchError> {
        let mut out = Vec::new();
        for a in self.manifest.artifacts.iter().filter(|a| a.starts_with("transcripts/")) {
            out.push(Transcript::from_jsonl(&self.store.read(a)?)?);
        }
        out.sort_by_key(|t| t.records.first().map(|r| r.started_ms).unwrap_or(u64::MAX));
        Ok(out)
    }

    /// Records a paper-reading start or stop; `at_ms` defaults to now.
    pub fn paper_reading(&mut self, action: TimerAction, at_ms: Option<u64>) -> Result<Timer, WorkbenchError> {
        let at = at_ms.unwrap_or_else(|| WallClock.now_ms());
        self.manifest.paper_reading.apply(action, at)?;
        self.commit()?;
        Ok(self.manifest.paper_reading.clone())
    }

    pub fn metrics(&self) -> Result<MetricsReport, WorkbenchError> {
        Ok(compute_metrics(
            &self.transcripts()?,
            &self.episodes()?,
            self.manifest.paper_reading.total_ms(),
        ))
    }

    /// Writes the report under `metrics/` and returns its text.
    pub fn export_metrics(&mut self, format: MetricsFormat) -> Result<String, WorkbenchError> {
        let text = self.metrics()?.render(format);
        self.put(&format!("metrics/metrics.{}", format.extension()), text.as_bytes())?;
        self.commit()?;
        Ok(text)
    }
}

/// The unit re-check as a plain method, for call sites that hold no
/// `&mut` to the recheck.
trait RecheckUnit {
    fn recheck_unit(self, unit: &CodeUnit) -> Result<Option<Failure>, RepairError>;
}

impl RecheckUnit for SandboxRecheck<'_> {
    fn recheck_unit(mut self, unit: &CodeUnit) -> Result<Option<Failure>, RepairError> {
        repair::Recheck::recheck(&mut self, unit)
    }
}
