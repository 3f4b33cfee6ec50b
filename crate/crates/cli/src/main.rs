//! `vlprobe`: generate synthetic corpora, train the toy model, probe model
//! backends and explain their predictions. Every run writes a manifest into
//! its output directory, and `vlprobe replay` re-executes it.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 backend error. On
//! failure the last line on stderr is a JSON object `{"error": {...}}`.

mod commands;
mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use vlprobe::probing::parse_conditions;
use vlprobe::{Error, ErrorKind};

use commands::{BackendSpec, ExplainConfig, GenConfig, Invocation, ItmCmdConfig, NoConfig, TrainCmdConfig};
use config::flag;
use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "vlprobe", version, about = "Probe vision-language models for verb grounding")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// Flat TOML file of config keys; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads, 0 for all cores. Results do not depend on it.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    /// SVO-style TSV dataset.
    #[arg(long)]
    data: PathBuf,
    /// ROI directory [default: rois/ next to the dataset]
    #[arg(long)]
    rois: Option<PathBuf>,
}

#[derive(Args)]
struct BackendArgs {
    /// toy:<checkpoint> or remote:<host:port>
    #[arg(long)]
    backend: String,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus (corpus.tsv plus rois/).
    Gen {
        #[command(flatten)]
        common: Common,
        /// World seed: verb sets and visual codes.
        #[arg(long)]
        seed: Option<u64>,
        /// Seed for the sampled instances.
        #[arg(long)]
        instance_seed: Option<u64>,
        #[arg(long)]
        samples: Option<usize>,
        /// Add a verb-swapped mismatching pair after every caption.
        #[arg(long)]
        negatives: bool,
    },
    /// Train the toy model (model.ckpt plus loss.tsv).
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Guided masking under the ablation conditions.
    Probe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        backend: BackendArgs,
        #[arg(long)]
        k: Option<usize>,
        /// Comma-separated: guided,subject_ablation,whole_image,text_only
        #[arg(long)]
        conditions: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Image-text matching accuracy, split by pair label.
    Itm {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        backend: BackendArgs,
        #[arg(long)]
        threshold: Option<f64>,
        /// Comma-separated: none,subject,whole
        #[arg(long)]
        ablations: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Relevancy heatmap and token scores for one sample.
    Explain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        backend: BackendArgs,
        /// Sample id [default: the first sample]
        #[arg(long)]
        sample: Option<String>,
        /// mlm or itm
        #[arg(long)]
        target: Option<String>,
        /// Word whose logit to explain in mlm mode [default: the prediction]
        #[arg(long)]
        token: Option<String>,
    },
    /// Merge probe reports into one comparison table.
    Report {
        #[command(flatten)]
        common: Common,
        /// report.json files
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
    /// Re-run a manifest and check the outputs are byte-identical.
    Replay {
        manifest: PathBuf,
        /// [default: replay/ next to the manifest]
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
}

fn data_inputs(d: DataArgs) -> Vec<(String, PathBuf)> {
    let rois = d
        .rois
        .unwrap_or_else(|| d.data.parent().unwrap_or(Path::new(".")).join("rois"));
    vec![("data".into(), d.data), ("rois".into(), rois)]
}

fn split_list(s: &str) -> Value {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| Value::String(p.to_string()))
        .collect()
}

fn invocation(cmd: Cmd) -> anyhow::Result<Invocation> {
    let build = |command: &str, common: Common, inputs, backend: Option<BackendArgs>, config: Value| {
        Ok::<_, anyhow::Error>(Invocation {
            command: command.into(),
            inputs,
            backend: backend.map(|b| b.backend.parse::<BackendSpec>()).transpose()?,
            config,
            workers: common.workers,
            out: common.out,
        })
    };
    Ok(match cmd {
        Cmd::Gen {
            common,
            seed,
            instance_seed,
            samples,
            negatives,
        } => {
            let overrides = [
                flag("seed", seed),
                flag("instance_seed", instance_seed),
                flag("n_samples", samples),
                flag("negatives", negatives.then_some(true)),
            ];
            let cfg = config::resolve::<GenConfig>(common.config.as_deref(), overrides.into_iter().flatten().collect())?;
            build("gen", common, vec![], None, cfg)?
        }
        Cmd::Train {
            common,
            data,
            seed,
            steps,
        } => {
            let overrides = [flag("seed", seed), flag("steps", steps)];
            let cfg =
                config::resolve::<TrainCmdConfig>(common.config.as_deref(), overrides.into_iter().flatten().collect())?;
            build("train", common, data_inputs(data), None, cfg)?
        }
        Cmd::Probe {
            common,
            data,
            backend,
            k,
            conditions,
            seed,
        } => {
            if let Some(c) = &conditions {
                parse_conditions(c)?;
            }
            let overrides = [
                flag("k", k),
                conditions.map(|c| ("conditions", split_list(&c))),
                flag("seed", seed),
            ];
            let cfg = config::resolve::<vlprobe::probing::ProbeConfig>(
                common.config.as_deref(),
                overrides.into_iter().flatten().collect(),
            )?;
            build("probe", common, data_inputs(data), Some(backend), cfg)?
        }
        Cmd::Itm {
            common,
            data,
            backend,
            threshold,
            ablations,
            seed,
        } => {
            let overrides = [
                flag("itm_threshold", threshold),
                ablations.map(|a| ("ablations", split_list(&a))),
                flag("seed", seed),
            ];
            let cfg =
                config::resolve::<ItmCmdConfig>(common.config.as_deref(), overrides.into_iter().flatten().collect())?;
            build("itm", common, data_inputs(data), Some(backend), cfg)?
        }
        Cmd::Explain {
            common,
            data,
            backend,
            sample,
            target,
            token,
        } => {
            let overrides = [flag("sample", sample), flag("target", target), flag("token", token)];
            let cfg =
                config::resolve::<ExplainConfig>(common.config.as_deref(), overrides.into_iter().flatten().collect())?;
            build("explain", common, data_inputs(data), Some(backend), cfg)?
        }
        Cmd::Report { common, reports } => {
            let cfg = config::resolve::<NoConfig>(common.config.as_deref(), vec![])?;
            let inputs = reports.into_iter().map(|p| ("report".to_string(), p)).collect();
            build("report", common, inputs, None, cfg)?
        }
        Cmd::Replay { .. } => unreachable!("handled by replay()"),
    })
}

/// Runs an invocation and writes its manifest.
fn run_and_record(inv: &Invocation) -> anyhow::Result<RunManifest> {
    let started_at = chrono::Utc::now().to_rfc3339();
    let mut inputs = inv
        .inputs
        .iter()
        .map(|(role, path)| manifest::input(role, path))
        .collect::<Result<Vec<_>, _>>()?;
    let mut backend = inv.backend.clone();
    if let Some(BackendSpec::Toy(path)) = &backend {
        let ck = manifest::input("checkpoint", path)?;
        backend = Some(BackendSpec::Toy(ck.path.clone()));
        inputs.push(ck);
    }
    let written = commands::execute(inv)?;
    let m = RunManifest {
        schema: manifest::MANIFEST_SCHEMA,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: inv.command.clone(),
        argv: std::env::args().collect(),
        backend: backend.map(|b| b.to_string()),
        seed: inv.config.get("seed").and_then(Value::as_u64),
        config: inv.config.clone(),
        workers: inv.workers,
        inputs,
        outputs: manifest::outputs(&inv.out, &written)?,
        started_at,
        finished_at: chrono::Utc::now().to_rfc3339(),
    };
    let path = manifest::write(&m, &inv.out)?;
    eprintln!("manifest: {}", path.display());
    Ok(m)
}

fn replay(path: &Path, out: Option<PathBuf>, workers: Option<usize>) -> anyhow::Result<()> {
    let original = manifest::load(path)?;
    manifest::verify_inputs(&original)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let out = out.unwrap_or_else(|| dir.join("replay"));
    if out.canonicalize().ok() == dir.canonicalize().ok() {
        return Err(Error::Config("replay output directory must differ from the original".into()).into());
    }
    let inv = Invocation {
        command: original.command.clone(),
        inputs: original
            .inputs
            .iter()
            .filter(|f| f.role != "checkpoint")
            .map(|f| (f.role.clone(), f.path.clone()))
            .collect(),
        backend: original.backend.as_deref().map(str::parse).transpose()?,
        config: original.config.clone(),
        workers: workers.unwrap_or(original.workers),
        out,
    };
    let fresh = run_and_record(&inv).context("replaying")?;
    let differing: Vec<String> = original
        .outputs
        .iter()
        .filter(|o| !fresh.outputs.iter().any(|f| f.path == o.path && f.sha256 == o.sha256))
        .map(|o| o.path.display().to_string())
        .collect();
    if !differing.is_empty() || fresh.outputs.len() != original.outputs.len() {
        return Err(Error::Schema(format!("replay outputs differ: {}", differing.join(", "))).into());
    }
    println!(
        "replayed {}: {} outputs byte-identical",
        original.command,
        original.outputs.len()
    );
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Cmd::Replay { manifest, out, workers } => replay(&manifest, out, workers),
        cmd => run_and_record(&invocation(cmd)?).map(|_| ()),
    }
}

fn classify(e: &anyhow::Error) -> (&'static str, u8) {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err.kind() {
                ErrorKind::Usage => ("usage", 2),
                ErrorKind::Data => ("data", 3),
                ErrorKind::Backend => ("backend", 4),
            };
        }
    }
    ("data", 3)
}

fn fail(kind: &str, code: u8, message: String, transcript: &[String]) -> ExitCode {
    eprintln!("vlprobe: {message}");
    let mut err = json!({"kind": kind, "exit_code": code, "message": message});
    if !transcript.is_empty() {
        err["transcript"] = json!(transcript);
    }
    eprintln!("{}", json!({ "error": err }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return fail("usage", 2, e.kind().to_string(), &[]);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = classify(&e);
            let transcript = e
                .chain()
                .find_map(|c| match c.downcast_ref::<Error>() {
                    Some(Error::Backend { transcript, .. }) => Some(transcript.clone()),
                    _ => None,
                })
                .unwrap_or_default();
            fail(kind, code, format!("{e:#}"), &transcript)
        }
    }
}
