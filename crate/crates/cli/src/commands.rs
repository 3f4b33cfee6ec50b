//! One function per subcommand. Each takes a fully resolved [`Invocation`]
//! and returns the files it wrote, so the same code serves fresh runs and
//! replays.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use vlprobe::dataset::{load_svo_dataset_with_rois, write_svo_dataset, Dataset, PairLabel};
use vlprobe::exec::Executor;
use vlprobe::explain::{relevancy, render_heatmap};
use vlprobe::lexicon::Lexicon;
use vlprobe::model::checkpoint::{load_checkpoint, save_checkpoint};
use vlprobe::model::remote::RemoteBackend;
use vlprobe::model::train::{train_with_progress, write_loss_trace, TrainConfig};
use vlprobe::model::{ModelBackend, ReadoutTarget, TextInput, ToyBackend, ToyConfig, ToyModelParams};
use vlprobe::probing::report::DatasetSummary;
use vlprobe::probing::{
    emit_report, format_table, load_report, merge_reports, run_guided_masking, run_itm, Ablation, ProbeConfig,
    ProbeReport,
};
use vlprobe::synthetic::{generate_synthetic_corpus, make_itm_set, synthetic_vocabulary, SyntheticCorpusSpec};
use vlprobe::text::{caption_from_words, mask_at, Vocabulary, UNK};
use vlprobe::Error;

use crate::config;

#[derive(Debug, Clone, PartialEq)]
pub enum BackendSpec {
    Toy(PathBuf),
    Remote(String),
}

impl FromStr for BackendSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s.split_once(':') {
            Some(("toy", path)) if !path.is_empty() => Ok(BackendSpec::Toy(path.into())),
            Some(("remote", ep)) if !ep.is_empty() => Ok(BackendSpec::Remote(ep.into())),
            _ => Err(Error::Config(format!(
                "backend {s:?} is neither toy:<checkpoint> nor remote:<endpoint>"
            ))),
        }
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendSpec::Toy(p) => write!(f, "toy:{}", p.display()),
            BackendSpec::Remote(ep) => write!(f, "remote:{ep}"),
        }
    }
}

/// Everything a command needs; nothing is read from the environment.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub command: String,
    /// `(role, path)`; the toy checkpoint is carried by `backend` instead.
    pub inputs: Vec<(String, PathBuf)>,
    pub backend: Option<BackendSpec>,
    pub config: Value,
    pub workers: usize,
    pub out: PathBuf,
}

impl Invocation {
    fn input(&self, role: &str) -> anyhow::Result<&Path> {
        self.inputs
            .iter()
            .find(|(r, _)| r == role)
            .map(|(_, p)| p.as_path())
            .ok_or_else(|| Error::Config(format!("missing input {role}")).into())
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    #[serde(flatten)]
    pub corpus: SyntheticCorpusSpec,
    /// Follow each caption with a verb-swapped mismatching copy.
    pub negatives: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainCmdConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
}

impl Default for TrainCmdConfig {
    fn default() -> Self {
        let r = ToyConfig::reference(0);
        TrainCmdConfig {
            train: TrainConfig::default(),
            d_model: r.d_model,
            n_heads: r.n_heads,
            n_layers: r.n_layers,
            ffn_dim: r.ffn_dim,
            max_len: r.max_len,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ItmCmdConfig {
    #[serde(flatten)]
    pub probe: ProbeConfig,
    pub ablations: Vec<Ablation>,
}

impl Default for ItmCmdConfig {
    fn default() -> Self {
        ItmCmdConfig {
            probe: ProbeConfig::default(),
            ablations: vec![Ablation::None, Ablation::Subject, Ablation::Whole],
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainConfig {
    /// Sample id; empty means the first sample.
    pub sample: String,
    /// `mlm` explains the masked target word, `itm` the match logit.
    pub target: ExplainTarget,
    /// Token whose logit to explain in `mlm` mode; defaults to the prediction.
    pub token: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExplainTarget {
    #[default]
    Mlm,
    Itm,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct NoConfig {}

pub fn execute(inv: &Invocation) -> anyhow::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(&inv.out).with_context(|| format!("creating {}", inv.out.display()))?;
    match inv.command.as_str() {
        "gen" => gen(inv),
        "train" => train(inv),
        "probe" => probe(inv),
        "itm" => itm(inv),
        "explain" => explain(inv),
        "report" => report(inv),
        other => bail!(Error::Config(format!("unknown command {other:?}"))),
    }
}

fn gen(inv: &Invocation) -> anyhow::Result<Vec<PathBuf>> {
    let cfg: GenConfig = config::parse(&inv.config)?;
    let corpus = generate_synthetic_corpus(&cfg.corpus)?;
    let samples = if cfg.negatives {
        make_itm_set(&corpus, cfg.corpus.instance_seed)?
    } else {
        corpus.samples
    };
    let (tsv, rois) = (inv.out.join("corpus.tsv"), inv.out.join("rois"));
    write_svo_dataset(&samples, &tsv, &rois)?;
    eprintln!("wrote {} samples to {}", samples.len(), tsv.display());
    Ok(vec![tsv, rois])
}

fn load_data(inv: &Invocation, vocab: &Vocabulary) -> anyhow::Result<Dataset> {
    let data = load_svo_dataset_with_rois(inv.input("data")?, inv.input("rois")?, vocab, &Lexicon::english())?;
    if data.malformed > 0 {
        eprintln!("skipped {} malformed rows of {}", data.malformed, data.rows);
    }
    if data.samples.is_empty() {
        bail!(Error::Schema(format!("{}: no usable samples", inv.input("data")?.display())));
    }
    Ok(data)
}

/// The synthetic vocabulary plus any other caption word in the data, so a
/// model trained here can read every caption it was trained on.
fn training_vocabulary(data: &Dataset) -> Vocabulary {
    let base = synthetic_vocabulary();
    let extra: std::collections::BTreeSet<&str> = data
        .samples
        .iter()
        .flat_map(|s| s.caption.words.iter())
        .map(String::as_str)
        .filter(|w| base.id(w).is_none())
        .collect();
    Vocabulary::new(base.words().chain(extra))
}

fn train(inv: &Invocation) -> anyhow::Result<Vec<PathBuf>> {
    let cfg: TrainCmdConfig = config::parse(&inv.config)?;
    let mut data = load_data(inv, &synthetic_vocabulary())?;
    let vocab = training_vocabulary(&data);
    if data.samples.iter().any(|s| s.caption.tokens.contains(&UNK)) {
        for s in &mut data.samples {
            s.caption = caption_from_words(&s.caption.words, &vocab)?;
        }
    }
    let positives: Vec<_> = data.positives().cloned().collect();
    let model = ToyConfig {
        vocab_size: vocab.len(),
        d_model: cfg.d_model,
        n_heads: cfg.n_heads,
        n_layers: cfg.n_layers,
        d_visual: positives.first().map_or(0, |s| s.image.feature_dim()),
        max_len: cfg.max_len,
        ffn_dim: cfg.ffn_dim,
    };
    let params = ToyModelParams::init(model, cfg.train.seed)?;
    let exec = Executor::new(inv.workers)?;
    let every = (cfg.train.steps / 10).max(1);
    let out = train_with_progress(params, &positives, &cfg.train, &exec, |r| {
        if (r.step + 1) % every == 0 {
            eprintln!("step {:>6}  mlm {:.4}  itm {:.4}", r.step + 1, r.mlm_loss, r.itm_loss);
        }
    })?;
    let (ckpt, loss) = (inv.out.join("model.ckpt"), inv.out.join("loss.tsv"));
    save_checkpoint(&out.params, &vocab, &ckpt)?;
    write_loss_trace(&out.trace, &loss)?;
    Ok(vec![ckpt, loss])
}

fn open_backend(spec: &BackendSpec, visual_dim: usize) -> anyhow::Result<(Box<dyn ModelBackend>, Vocabulary)> {
    Ok(match spec {
        BackendSpec::Toy(path) => {
            let ck = load_checkpoint(path)?;
            let stem = path.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
            let vocab = ck.vocab.clone();
            (Box::new(ToyBackend::new(ck.params, ck.vocab)?.with_name(format!("toy:{stem}"))), vocab)
        }
        // remote servers work on words; token ids never leave this process
        BackendSpec::Remote(ep) => (Box::new(RemoteBackend::connect(ep, visual_dim)?), synthetic_vocabulary()),
    })
}

/// Opens the backend, then loads the data tokenized with its vocabulary.
fn backend_and_data(inv: &Invocation) -> anyhow::Result<(Box<dyn ModelBackend>, Vocabulary, Dataset)> {
    let spec = inv
        .backend
        .as_ref()
        .ok_or_else(|| Error::Config("--backend is required".into()))?;
    let (backend, vocab) = open_backend(spec, 0)?;
    let data = load_data(inv, &vocab)?;
    Ok((backend, vocab, data))
}

fn summary(inv: &Invocation, data: &Dataset) -> anyhow::Result<DatasetSummary> {
    let path = inv.input("data")?;
    let n_positive = data.positives().count();
    Ok(DatasetSummary {
        name: path.file_stem().map_or(String::new(), |s| s.to_string_lossy().into_owned()),
        n_samples: data.samples.len(),
        n_positive,
        n_negative: data.samples.len() - n_positive,
        n_malformed: data.malformed,
    })
}

fn finish_report(inv: &Invocation, report: &ProbeReport) -> anyhow::Result<Vec<PathBuf>> {
    let (json, txt) = emit_report(report, inv.out.join("report"))?;
    print!("{}", format_table(report));
    Ok(vec![json, txt])
}

fn probe(inv: &Invocation) -> anyhow::Result<Vec<PathBuf>> {
    let cfg: ProbeConfig = config::parse(&inv.config)?;
    cfg.validate()?;
    let (backend, _, data) = backend_and_data(inv)?;
    let run = run_guided_masking(&data.samples, backend.as_ref(), &cfg, &Lexicon::english(), &Executor::new(inv.workers)?)?;
    let mut report = ProbeReport::new(backend.name(), summary(inv, &data)?, cfg);
    if let Some(e) = &run.first_error {
        report.notes.push(format!("first backend error: {e}"));
    }
    report.guided = Some(run);
    finish_report(inv, &report)
}

fn itm(inv: &Invocation) -> anyhow::Result<Vec<PathBuf>> {
    let cfg: ItmCmdConfig = config::parse(&inv.config)?;
    cfg.probe.validate()?;
    let (backend, _, data) = backend_and_data(inv)?;
    if !data.samples.iter().any(|s| s.pair_label == PairLabel::Negative) {
        eprintln!("warning: no mismatching pairs; negative accuracy is undefined");
    }
    let exec = Executor::new(inv.workers)?;
    let lex = Lexicon::english();
    let mut report = ProbeReport::new(backend.name(), summary(inv, &data)?, cfg.probe.clone());
    for &ablation in &cfg.ablations {
        report
            .itm
            .push(run_itm(&data.samples, backend.as_ref(), &cfg.probe, ablation, &lex, &exec)?);
    }
    finish_report(inv, &report)
}

fn explain(inv: &Invocation) -> anyhow::Result<Vec<PathBuf>> {
    let cfg: ExplainConfig = config::parse(&inv.config)?;
    let (backend, vocab, data) = backend_and_data(inv)?;
    let sample = if cfg.sample.is_empty() {
        &data.samples[0]
    } else {
        data.samples
            .iter()
            .find(|s| s.id == cfg.sample)
            .ok_or_else(|| Error::Config(format!("no sample with id {:?}", cfg.sample)))?
    };
    let map = match cfg.target {
        ExplainTarget::Itm => relevancy(
            backend.as_ref(),
            &sample.image,
            TextInput::Plain(&sample.caption),
            ReadoutTarget::ItmClass { class: 1 },
        )?,
        ExplainTarget::Mlm => {
            let index = sample
                .target_index
                .ok_or_else(|| Error::NoTargetWord(sample.caption.raw.clone()))?;
            let token = match &cfg.token {
                None => None,
                Some(w) => Some(
                    vocab
                        .id(w)
                        .ok_or_else(|| Error::Config(format!("{w:?} is not in the model vocabulary")))?,
                ),
            };
            let masked = mask_at(&sample.caption, index)?;
            relevancy(
                backend.as_ref(),
                &sample.image,
                TextInput::Masked(&masked),
                ReadoutTarget::MaskedToken {
                    word_index: index,
                    token,
                },
            )?
        }
    };
    let stem: String = sample
        .id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect();
    let (ppm, tsv) = render_heatmap(&map, &sample.image, inv.out.join(stem))?;
    print!("{}", std::fs::read_to_string(&tsv).with_context(|| tsv.display().to_string())?);
    Ok(vec![ppm, tsv])
}

fn report(inv: &Invocation) -> anyhow::Result<Vec<PathBuf>> {
    let reports = inv
        .inputs
        .iter()
        .filter(|(r, _)| r == "report")
        .map(|(_, p)| load_report(p))
        .collect::<Result<Vec<_>, _>>()?;
    if reports.is_empty() {
        bail!(Error::Config("report needs at least one report file".into()));
    }
    let table = merge_reports(&reports);
    let path = inv.out.join("comparison.txt");
    std::fs::write(&path, &table).with_context(|| path.display().to_string())?;
    print!("{table}");
    Ok(vec![path])
}
