//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use crate::config::RunConfig;
use crate::data::{load_manifest, split_validation, write_corpus, Corpus, SyntheticTask, Utterance, Vocab};
use crate::error::{Error, Result};
use crate::metrics::{report_tsv, score_trace, Trace};
use crate::model::WAIT_ALL;
use crate::simul::simulate;
use crate::train::{self, average_checkpoints, epoch_path, Checkpoint, TrainStage, LOG_HEADER};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "simulst", version, about = "Simultaneous speech translation experiments", after_help = RunConfig::key_help())]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides a config key; repeatable.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Valid,
    All,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Writes the synthetic corpus to `data_dir`.
    GenData,
    /// CTC pre-training of the acoustic encoder.
    Pretrain,
    /// Joint fine-tuning; writes the averaged final checkpoint.
    Finetune {
        /// Starting checkpoint (default: `work_dir/pretrain.ckpt`).
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Streams a split through the engine and reports BLEU, AP and AL.
    Evaluate {
        /// Default: `work_dir/final.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "valid")]
        split: Split,
        /// Also write every action trace.
        #[arg(long)]
        traces: bool,
    },
    /// Replays one utterance and writes its action trace.
    Simulate {
        #[arg(long)]
        utt: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Default: standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Computes metrics from action traces.
    Score {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prints the effective configuration.
    ShowConfig,
}

/// Exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => EXIT_USAGE,
        Error::NonFinite(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for s in &cli.set {
        cfg.apply_override(s)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::GenData => gen_data(&cfg),
        Command::Pretrain => pretrain(&cfg),
        Command::Finetune { from } => finetune(&cfg, from),
        Command::Evaluate { checkpoint, split, traces } => evaluate(&cfg, checkpoint, split, traces),
        Command::Simulate { utt, checkpoint, out } => simulate_one(&cfg, checkpoint, &utt, out),
        Command::Score { traces, out } => score(&traces, out),
        Command::ShowConfig => {
            print!("{}", cfg.to_text());
            Ok(())
        }
    }
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    let task = SyntheticTask::new(cfg.synthetic.clone())?;
    let corpus = task.generate(cfg.size)?;
    let manifest = write_corpus(&cfg.data_dir, &corpus)?;
    info!("wrote {} utterances to {}", corpus.utterances.len(), manifest.display());
    Ok(())
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let dir = &cfg.data_dir;
    let src = Vocab::load(&dir.join("src.vocab"))?;
    let tgt = Vocab::load(&dir.join("tgt.vocab"))?;
    load_manifest(&dir.join("manifest.tsv"), &src, &tgt, cfg.cmvn)
}

/// Model config with vocabulary sizes and feature width taken from data.
fn fit_to_data(cfg: &RunConfig, corpus: &Corpus) -> Result<crate::model::ModelConfig> {
    let mut m = cfg.model.clone();
    m.src_vocab = corpus.src_vocab.len();
    m.tgt_vocab = corpus.tgt_vocab.len();
    m.d_feat = corpus.utterances.first().ok_or(Error::Empty("corpus"))?.features.dim();
    m.validate()?;
    Ok(m)
}

fn splits(cfg: &RunConfig, corpus: &Corpus) -> (Vec<Utterance>, Vec<Utterance>) {
    split_validation(corpus.utterances.clone(), cfg.train.valid_percent)
}

fn train_config(cfg: &RunConfig) -> train::TrainConfig {
    let mut t = cfg.train.clone();
    if t.save_dir.is_none() {
        t.save_dir = Some(cfg.work_dir.clone());
    }
    t
}

fn open_log(path: &Path) -> Result<fs::File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(path, e))?;
    Ok(f)
}

fn pretrain(cfg: &RunConfig) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let model_cfg = fit_to_data(cfg, &corpus)?;
    let (tr, va) = splits(cfg, &corpus);
    let tcfg = train_config(cfg);
    let log_path = cfg.work_dir.join("pretrain_log.tsv");
    let mut log = open_log(&log_path)?;
    let ckpt = train::pretrain_ctc(&tr, &va, &model_cfg, &tcfg, cfg.pretrain_epochs, Some(&mut log))?;
    let (q, blank) = train::shrink_quality_of(&ckpt.model, &va)?;
    info!(
        "pre-training done: held-out diff<=2 {:.1}%, blank fraction {:.3}",
        q.within_2, blank
    );
    ckpt.save(&cfg.work_dir.join("pretrain.ckpt"))
}

fn finetune(cfg: &RunConfig, from: Option<PathBuf>) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let model_cfg = fit_to_data(cfg, &corpus)?;
    let (tr, va) = splits(cfg, &corpus);
    let tcfg = train_config(cfg);
    let start = if cfg.ctc_pretrain {
        Checkpoint::load(&from.unwrap_or_else(|| cfg.work_dir.join("pretrain.ckpt")))?
    } else {
        Checkpoint::init(model_cfg.clone(), &tcfg, TrainStage::Finetune)?
    };
    let mut log = open_log(&cfg.work_dir.join("finetune_log.tsv"))?;
    let ckpt = train::finetune(&tr, &va, &start, &model_cfg, &tcfg, cfg.finetune_epochs, Some(&mut log))?;
    let dir = tcfg.save_dir.as_deref().unwrap_or(&cfg.work_dir);
    let first = ckpt.epoch.saturating_sub(cfg.average_last) + 1;
    let paths: Vec<PathBuf> = (first..=ckpt.epoch).map(|e| epoch_path(dir, TrainStage::Finetune, e)).collect();
    let final_ckpt = if paths.is_empty() { ckpt } else { average_checkpoints(&paths, paths.len())? };
    final_ckpt.save(&cfg.work_dir.join("final.ckpt"))
}

fn checkpoint_or_final(cfg: &RunConfig, p: Option<PathBuf>) -> Result<Checkpoint> {
    Checkpoint::load(&p.unwrap_or_else(|| cfg.work_dir.join("final.ckpt")))
}

fn policy_tag(k: usize, n: usize) -> String {
    if k == WAIT_ALL {
        format!("kinf_n{n}")
    } else {
        format!("k{k}_n{n}")
    }
}

fn evaluate(cfg: &RunConfig, checkpoint: Option<PathBuf>, split: Split, traces: bool) -> Result<()> {
    cfg.eval_policies()?;
    let ckpt = checkpoint_or_final(cfg, checkpoint)?;
    let mut run = cfg.clone();
    run.model.k = ckpt.model.cfg.k;
    run.model.n = ckpt.model.cfg.n;
    let policies = run.eval_policies()?;
    let corpus = load_corpus(cfg)?;
    let (tr, va) = splits(cfg, &corpus);
    let utts = match split {
        Split::Train => tr,
        Split::Valid => va,
        Split::All => corpus.utterances,
    };
    let out_dir = &cfg.work_dir;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut summary = String::new();
    for (i, p) in policies.iter().enumerate() {
        let report = train::evaluate(&ckpt.model, &utts, *p, cfg.chunk_frames)?;
        let tsv = report.summary_tsv();
        let body = if i == 0 { tsv.as_str() } else { tsv.split_once('\n').map_or("", |x| x.1) };
        summary.push_str(body);
        let tag = policy_tag(p.k, p.n);
        let path = out_dir.join(format!("metrics_{tag}.tsv"));
        fs::write(&path, report_tsv(&report.rows)).map_err(|e| Error::io(&path, e))?;
        if traces {
            let dir = out_dir.join(format!("traces_{tag}"));
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for t in &report.traces {
                let path = dir.join(format!("{}.trace.tsv", t.utt));
                fs::write(&path, t.to_tsv()).map_err(|e| Error::io(&path, e))?;
            }
        }
        info!("{tag}: BLEU {:.2}, AP {:.3}, AL {:.1} ms", report.bleu, report.ap, report.al);
    }
    let path = out_dir.join("eval_summary.tsv");
    fs::write(&path, &summary).map_err(|e| Error::io(&path, e))?;
    print!("{summary}");
    Ok(())
}

fn simulate_one(cfg: &RunConfig, checkpoint: Option<PathBuf>, id: &str, out: Option<PathBuf>) -> Result<()> {
    cfg.eval_policies()?;
    let ckpt = checkpoint_or_final(cfg, checkpoint)?;
    let corpus = load_corpus(cfg)?;
    let utt = corpus
        .utterances
        .iter()
        .find(|u| u.id == id)
        .ok_or_else(|| Error::invalid(format!("no utterance {id:?} in the corpus")))?;
    let mut run = cfg.clone();
    run.model.k = ckpt.model.cfg.k;
    run.model.n = ckpt.model.cfg.n;
    let policy = run.eval_policies()?[0];
    let (session, _, _) = simulate(&ckpt.model, policy, &utt.features, cfg.chunk_frames, utt.translation.len())?;
    let text = session.trace(&utt.id, &utt.translation).to_tsv();
    write_out(out, &text)
}

fn write_out(out: Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(&p, text).map_err(|e| Error::io(&p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn score(paths: &[PathBuf], out: Option<PathBuf>) -> Result<()> {
    let mut rows = Vec::with_capacity(paths.len());
    for p in paths {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let trace = Trace::parse(&text, p)?;
        rows.push(score_trace(&trace).map_err(|e| Error::Parse { path: p.clone(), line: 0, msg: e.to_string() })?);
    }
    write_out(out, &report_tsv(&rows))
}
