//! Command-line entry points.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use erasure_core::registry::RegistrySeed;
use erasure_core::service::LOG_FILE;
use erasure_core::sim::{Scenario, ScenarioReport, Simulation};
use erasure_core::store::{verify_log_bytes, DigestAlgorithm, VerificationReport};
use erasure_core::workflow::{ReviewDecision, SubjectRef};
use serde_json::{json, Value};

use crate::api::{ReviewBody, SubmitBody};
use crate::config::{ServiceConfig, ENV_DATA_DIR};

/// Exit status for invariant violations and broken audit chains.
pub const EXIT_VIOLATION: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "erasure", version, about = "Erasure-request orchestration service")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Remote {
    /// Base URL of a running gateway.
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    pub url: String,
    /// Bearer token of the calling principal.
    #[arg(long)]
    pub token: String,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct Subject {
    #[arg(long)]
    pub user: Option<String>,
    #[arg(long)]
    pub email: Option<String>,
    #[arg(long)]
    pub business: Option<String>,
}

impl Subject {
    fn to_ref(&self) -> SubjectRef {
        match (&self.user, &self.email, &self.business) {
            (Some(u), _, _) => SubjectRef::user(u),
            (_, Some(e), _) => SubjectRef::email(e),
            (_, _, Some(b)) => SubjectRef::business(b),
            _ => unreachable!("clap requires one subject"),
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Decision {
    Approve,
    Reject,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Digest {
    Sha256,
    Sha512,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP gateway.
    Serve {
        /// TOML configuration; defaults apply when omitted.
        #[arg(long, short)]
        config: Option<PathBuf>,
    },
    /// Register every entity in a JSON registry seed.
    SeedRegistry {
        file: PathBuf,
        #[command(flatten)]
        remote: Remote,
    },
    /// Submit an erasure request.
    Submit {
        #[command(flatten)]
        subject: Subject,
        #[arg(long)]
        purpose: Option<String>,
        /// Record the request as entered by hand.
        #[arg(long)]
        manual: bool,
        #[command(flatten)]
        remote: Remote,
    },
    /// Approve or reject a request.
    Review {
        id: String,
        #[arg(long, value_enum)]
        decision: Decision,
        #[arg(long, default_value = "")]
        comment: String,
        #[command(flatten)]
        remote: Remote,
    },
    /// Show one request with its sub-tasks, or list all requests.
    Status {
        id: Option<String>,
        #[command(flatten)]
        remote: Remote,
    },
    /// Print the erasure report of a closed request.
    Report {
        id: String,
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        remote: Remote,
    },
    /// Run a scenario under the virtual clock and print its JSON report.
    RunScenario {
        /// Scenario file, or the name of a bundled scenario.
        scenario: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write one JSONL action log per target system into this directory.
        #[arg(long)]
        action_logs: Option<PathBuf>,
    },
    /// Verify the hash chain of an audit log offline.
    VerifyAudit {
        /// Log file; defaults to the log in the data directory.
        #[arg(long, conflicts_with = "data_dir")]
        log: Option<PathBuf>,
        #[arg(long, env = ENV_DATA_DIR)]
        data_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "sha256")]
        digest: Digest,
    },
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

pub fn run(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Serve { config } => serve(config.as_deref()),
        Command::SeedRegistry { file, remote } => {
            let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
            let seed = RegistrySeed::from_json(&text)?;
            print_json(&remote.call(reqwest::Method::POST, "/registry/seed", Some(json!(seed)))?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Submit { subject, purpose, manual, remote } => {
            let body = SubmitBody { subject: subject.to_ref(), purpose_filter: purpose.map(Into::into), manual };
            print_json(&remote.call(reqwest::Method::POST, "/requests", Some(json!(body)))?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Review { id, decision, comment, remote } => {
            let decision = match decision {
                Decision::Approve => ReviewDecision::Approve,
                Decision::Reject => ReviewDecision::Reject,
            };
            let body = ReviewBody { decision, comment };
            print_json(&remote.call(reqwest::Method::POST, &format!("/requests/{id}/review"), Some(json!(body)))?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Status { id, remote } => {
            let path = id.map_or_else(|| "/requests".to_string(), |id| format!("/requests/{id}"));
            print_json(&remote.call(reqwest::Method::GET, &path, None)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { id, json, remote } => {
            if json {
                print_json(&remote.call(reqwest::Method::GET, &format!("/requests/{id}/report"), None)?);
            } else {
                print!("{}", remote.text(&format!("/requests/{id}/report?format=text"))?);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::RunScenario { scenario, seed, out, action_logs } => {
            let report = run_scenario(&scenario, seed, action_logs.as_deref())?;
            match out {
                Some(path) => std::fs::write(&path, report.to_json() + "\n")
                    .with_context(|| format!("writing {}", path.display()))?,
                None => println!("{}", report.to_json()),
            }
            let violations = report.violations();
            if violations.is_empty() {
                return Ok(ExitCode::SUCCESS);
            }
            for v in violations {
                let at: Vec<String> = v.positions.iter().map(|p| format!("{}#{}", p.system_id, p.index)).collect();
                eprintln!("InvariantViolation: {}: {} [{}]", v.name, v.detail, at.join(", "));
            }
            Ok(ExitCode::from(EXIT_VIOLATION))
        }
        Command::VerifyAudit { log, data_dir, digest } => {
            let path = match (log, data_dir) {
                (Some(p), _) => p,
                (None, Some(d)) => d.join(LOG_FILE),
                (None, None) => bail!("give --log or --data-dir"),
            };
            let alg = match digest {
                Digest::Sha256 => DigestAlgorithm::Sha256,
                Digest::Sha512 => DigestAlgorithm::Sha512,
            };
            let report = verify_audit(&path, alg)?;
            print_json(&json!(report));
            Ok(if report.intact { ExitCode::SUCCESS } else { ExitCode::from(EXIT_VIOLATION) })
        }
    }
}

/// Loads a scenario file, or a bundled scenario by name.
pub fn load_scenario(name_or_path: &str) -> anyhow::Result<Scenario> {
    let path = Path::new(name_or_path);
    if path.is_file() {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        return Ok(Scenario::from_json(&text)?);
    }
    Scenario::bundled(name_or_path).ok_or_else(|| {
        anyhow!(
            "no scenario file '{name_or_path}' and no bundled scenario of that name (bundled: {})",
            Scenario::bundled_names().join(", ")
        )
    })
}

pub fn run_scenario(name_or_path: &str, seed: u64, action_logs: Option<&Path>) -> anyhow::Result<ScenarioReport> {
    let mut sim = Simulation::new(load_scenario(name_or_path)?, seed)?;
    sim.run()?;
    if let Some(dir) = action_logs {
        sim.fleet().write_action_logs(dir)?;
    }
    Ok(sim.report())
}

pub fn verify_audit(path: &Path, alg: DigestAlgorithm) -> anyhow::Result<VerificationReport> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(verify_log_bytes(alg, &bytes))
}

fn serve(config: Option<&Path>) -> anyhow::Result<ExitCode> {
    let config = match config {
        Some(p) => ServiceConfig::load(p)?,
        None => {
            let mut c = ServiceConfig::default();
            c.apply_env(|k| std::env::var(k).ok());
            c.validate()?;
            c
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let handle = crate::server::serve(config).await?;
        println!("listening on {}", handle.local_addr);
        tokio::signal::ctrl_c().await?;
        handle.shutdown().await?;
        Ok(ExitCode::SUCCESS)
    })
}

impl Remote {
    fn request(&self, method: reqwest::Method, path: &str) -> reqwest::blocking::RequestBuilder {
        let url = format!("{}{}", self.url.trim_end_matches('/'), path);
        reqwest::blocking::Client::new().request(method, url).bearer_auth(&self.token)
    }

    fn call(&self, method: reqwest::Method, path: &str, body: Option<Value>) -> anyhow::Result<Value> {
        let mut req = self.request(method, path);
        if let Some(b) = body {
            req = req.json(&b);
        }
        let resp = req.send()?;
        let status = resp.status();
        let text = resp.text()?;
        if !status.is_success() {
            bail!("{status}: {text}");
        }
        Ok(serde_json::from_str(&text)?)
    }

    fn text(&self, path: &str) -> anyhow::Result<String> {
        let resp = self.request(reqwest::Method::GET, path).send()?;
        let status = resp.status();
        let text = resp.text()?;
        if !status.is_success() {
            bail!("{status}: {text}");
        }
        Ok(text)
    }
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("values serialize"));
}
