use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use papyrus_core::repair::RepairEpisode;
use papyrus_core::workbench::api;
use papyrus_core::workbench::project::{Project, ProjectState, Stage, TimerAction, WorkbenchError, OPERATOR};
use papyrus_core::workbench::MetricsFormat;

/// Turns a research paper bundle into a working code base, stage by stage.
#[derive(Debug, Parser)]
#[command(name = "papyrus", version)]
struct Cli {
    /// Project directory.
    #[arg(short = 'C', long = "project", global = true, default_value = ".")]
    project: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Create a project from a paper bundle and a config file.
    Init {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Run one stage: extract, scaffold, funcgen, integrate or test.
    Run { stage: String },
    /// Reopen the project from its files and say what comes next.
    Resume,
    /// Print the current state.
    Status {
        #[arg(long)]
        json: bool,
    },
    /// Approve the pending module division.
    ApproveDivision,
    /// Revise the pending module division with feedback.
    RefineDivision {
        #[arg(short = 'm', long = "message")]
        message: String,
    },
    /// Send a prompt of your own to an open repair episode.
    Repair {
        #[arg(long)]
        episode: String,
        #[arg(short = 'm', long = "message")]
        message: String,
    },
    /// Export metrics under metrics/ and print them.
    Metrics {
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Serve the JSON API on the loopback interface.
    Serve {
        #[arg(long, default_value_t = 7878)]
        port: u16,
    },
    /// Record human time that transcripts cannot observe.
    Timer {
        #[command(subcommand)]
        timer: Timer,
    },
    /// Accept a function being left unimplemented.
    Waive { module: String, function: String },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
enum Timer {
    PaperReading {
        #[arg(value_enum)]
        action: Action,
        /// Event time in milliseconds; defaults to now.
        #[arg(long)]
        at_ms: Option<u64>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Action {
    Start,
    Stop,
}

fn next_step(state: &ProjectState) -> String {
    match &state.stage {
        Stage::Initialized => "papyrus run extract".into(),
        Stage::Extracted => "review modules.json, then papyrus approve-division or refine-division -m".into(),
        Stage::DivisionApproved => "papyrus run scaffold".into(),
        Stage::Scaffolded => "papyrus run funcgen".into(),
        Stage::FunctionsGenerated => "papyrus run integrate".into(),
        Stage::Integrated => "papyrus run test".into(),
        Stage::Repairing => format!("papyrus repair --episode {} -m <prompt>", state.open_episodes.join("|")),
        Stage::Done => "nothing; export metrics with papyrus metrics".into(),
        Stage::Failed { stage, .. } => format!("papyrus run {stage}"),
    }
}

fn print_state(state: &ProjectState) {
    println!("project   {}", state.project_id);
    println!("stage     {}", state.stage);
    println!("revision  {}", state.revision);
    println!("artifacts {}", state.artifacts.len());
    if !state.open_episodes.is_empty() {
        println!("open      {}", state.open_episodes.join(", "));
    }
    if state.paper_reading_ms > 0 {
        println!("reading   {:.1} min", state.paper_reading_ms as f64 / 60_000.0);
    }
    println!("next      {}", next_step(state));
}

fn print_episode(ep: &RepairEpisode) {
    let status = if ep.resolved {
        "resolved"
    } else if ep.escalated {
        "escalated"
    } else {
        "open"
    };
    println!(
        "{} {} {} ({}): {} automatic, {} human prompts",
        ep.error_id, ep.module, ep.class, status, ep.automatic_prompt_count, ep.human_prompt_count
    );
}

fn open(cli: &Cli) -> Result<Project> {
    Project::open(&cli.project).with_context(|| format!("cannot open project {}", cli.project.display()))
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Init { bundle, config } => {
            let p = Project::init(&cli.project, bundle, config)?;
            print_state(&p.state()?);
        }
        Command::Run { stage } => {
            let mut p = open(&cli)?;
            let state = p.run_stage(stage)?;
            print_state(&state);
        }
        Command::Resume => print_state(&open(&cli)?.state()?),
        Command::Status { json } => {
            let state = open(&cli)?.state()?;
            if *json {
                println!("{}", serde_json::to_string_pretty(&state)?);
            } else {
                print_state(&state);
            }
        }
        Command::ApproveDivision => {
            let mut p = open(&cli)?;
            print_state(&p.approve_division(OPERATOR)?);
        }
        Command::RefineDivision { message } => {
            let mut p = open(&cli)?;
            let view = p.refine_division(message)?;
            for m in &view.division.modules {
                println!("{}: {}", m.name, m.brief_description);
            }
            for f in &view.findings.findings {
                println!("{f}");
            }
        }
        Command::Repair { episode, message } => {
            let mut p = open(&cli)?;
            print_episode(&p.human_prompt(episode, message)?);
            println!("stage {}", p.stage());
        }
        Command::Metrics { format } => {
            let mut p = open(&cli)?;
            let format = match format {
                Format::Csv => MetricsFormat::Csv,
                Format::Json => MetricsFormat::Json,
            };
            print!("{}", p.export_metrics(format)?);
        }
        Command::Serve { port } => {
            let handle = api::serve(open(&cli)?, *port)?;
            eprintln!("serving on http://{}", handle.addr);
            handle.join()?;
        }
        Command::Timer { timer: Timer::PaperReading { action, at_ms } } => {
            let mut p = open(&cli)?;
            let action = match action {
                Action::Start => TimerAction::Start,
                Action::Stop => TimerAction::Stop,
            };
            let t = p.paper_reading(action, *at_ms)?;
            println!("paper reading {:.1} min", t.total_ms() as f64 / 60_000.0);
        }
        Command::Waive { module, function } => {
            let mut p = open(&cli)?;
            p.waive(module, function)?;
            println!("waived {module}.{function}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if let Some(WorkbenchError::ValidationFailed(report)) = e.downcast_ref::<WorkbenchError>() {
                for f in &report.findings {
                    eprintln!("  {f}");
                }
            }
            ExitCode::FAILURE
        }
    }
}
