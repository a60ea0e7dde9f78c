use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use convqa::config::Setting;
use convqa::corpus::{generate_fixture, ConversationStyle, Corpus, PlantSpec};
use convqa::dense::EmbeddingStore;
use convqa::eval::{evaluate, hop_coverage, EvalOptions};
use convqa::lexical::InvertedIndex;
use convqa::model::ModelParams;
use convqa::pipeline::Engine;
use convqa::training::{examples, pretrain, train_phase, Phase};

use crate::config::Settings;
use crate::data::{Artifact, DataDir};
use crate::session::{render_answer, render_trace, Session};
use crate::Failure;

#[derive(Debug, Parser)]
#[command(name = "convqa", version, about = "Conversational open-domain question answering over a hyperlinked corpus")]
pub struct Cli {
    /// TOML file of hyperparameters.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed of the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print retrieval rounds and explorer candidates.
    #[arg(long, global = true)]
    pub trace: bool,
    #[arg(long, global = true, default_value = "data")]
    pub data_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus with planted conversational locality.
    GenerateFixture(FixtureArgs),
    /// Validate and store passages and conversations.
    Ingest {
        #[arg(long)]
        passages: PathBuf,
        #[arg(long)]
        conversations: PathBuf,
    },
    /// Build the TF-IDF index, and the dense store once the encoder is frozen.
    Index,
    /// Pretrain and freeze the passage encoder.
    Pretrain,
    /// Run one training phase, or every remaining one.
    Train {
        #[arg(long)]
        phase: Option<Phase>,
    },
    /// Evaluate and write a run report.
    Eval {
        #[arg(long, value_enum, default_value = "pred")]
        setting: SettingArg,
        #[arg(long, value_enum, default_value = "heldout")]
        split: Split,
        /// Extra copy of the JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fraction of answers within h hops of the previous turn's answer.
    HopCoverage {
        #[arg(long, default_value_t = 2)]
        max_hops: u32,
        #[arg(long)]
        json: bool,
    },
    /// Interactive question answering; one question per line.
    Ask,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SettingArg {
    Pred,
    True,
}

impl From<SettingArg> for Setting {
    fn from(s: SettingArg) -> Self {
        match s {
            SettingArg::Pred => Setting::Pred,
            SettingArg::True => Setting::True,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Heldout,
    Train,
    All,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StyleArg {
    Hop,
    Topic,
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub passages: usize,
    #[arg(long, default_value_t = 100)]
    pub conversations: usize,
    #[arg(long, value_enum, default_value = "hop")]
    pub style: StyleArg,
    /// Defaults to 0.6 (hop) or 1.0 (topic).
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub hop_limit: Option<u32>,
    #[arg(long)]
    pub links: Option<usize>,
}

pub fn run(cli: Cli, stdin: &mut dyn BufRead, stdout: &mut dyn Write) -> anyhow::Result<()> {
    let settings = Settings::load(cli.config.as_deref(), cli.seed)?;
    let data = DataDir::new(&cli.data_dir);
    match cli.command {
        Command::GenerateFixture(a) => generate(&a, &settings, stdout),
        Command::Ingest { passages, conversations } => ingest(&data, &passages, &conversations, stdout),
        Command::Index => index(&data, stdout),
        Command::Pretrain => {
            let _lock = data.lock()?;
            run_pretrain(&data, &settings, stdout)
        }
        Command::Train { phase } => {
            let _lock = data.lock()?;
            match phase {
                Some(Phase::Pretrain) => run_pretrain(&data, &settings, stdout),
                Some(p) => run_phase(&data, &settings, p, stdout),
                None => {
                    let done = data.phases()?.completed;
                    for p in [Phase::Joint, Phase::Dhm, Phase::Explorer] {
                        if !done.contains(&p) {
                            run_phase(&data, &settings, p, stdout)?;
                        }
                    }
                    Ok(())
                }
            }
        }
        Command::Eval { setting, split, out } => eval(&data, &settings, setting.into(), split, out.as_deref(), stdout),
        Command::HopCoverage { max_hops, json } => {
            let corpus = data.corpus()?;
            let cov = hop_coverage(&corpus, max_hops)?;
            if json {
                writeln!(stdout, "{}", serde_json::to_string_pretty(&cov)?)?;
            } else {
                write!(stdout, "{}", cov.to_text())?;
            }
            Ok(())
        }
        Command::Ask => ask(&data, &settings, cli.trace, stdin, stdout),
    }
}

fn generate(a: &FixtureArgs, settings: &Settings, stdout: &mut dyn Write) -> anyhow::Result<()> {
    let base = match a.style {
        StyleArg::Hop => PlantSpec::default(),
        StyleArg::Topic => PlantSpec::topic(),
    };
    let plant = PlantSpec {
        conversations: a.conversations,
        fraction: a.fraction.unwrap_or(base.fraction),
        hop_limit: a.hop_limit.unwrap_or(base.hop_limit),
        links_per_passage: a.links.unwrap_or(base.links_per_passage),
        ..base
    };
    let files = generate_fixture(settings.seed, a.passages, &plant)?;
    files.write_to(&a.out)?;
    writeln!(
        stdout,
        "wrote {} passages and {} conversations to {} ({} style, {:.3} within {} hop(s))",
        files.passages.len(),
        files.conversations.len(),
        a.out.display(),
        match plant.style {
            ConversationStyle::Hop => "hop",
            ConversationStyle::Topic => "topic",
        },
        files.manifest.fraction_within(plant.hop_limit),
        plant.hop_limit
    )?;
    Ok(())
}

fn ingest(data: &DataDir, passages: &Path, conversations: &Path, stdout: &mut dyn Write) -> anyhow::Result<()> {
    let _lock = data.lock()?;
    let (mut corpus, stats) = Corpus::ingest_passages(passages)?;
    let conv = corpus.ingest_conversations(conversations)?;
    for r in &conv.rejected {
        log::warn!("rejected: {r}");
    }
    corpus.save(&data.path(Artifact::Corpus))?;
    writeln!(
        stdout,
        "ingested {} passages, {} edges ({} dangling links), {} conversations ({} rejected)",
        stats.passages,
        stats.edges,
        stats.dangling_links,
        conv.accepted,
        conv.rejected.len()
    )?;
    Ok(())
}

fn index(data: &DataDir, stdout: &mut dyn Write) -> anyhow::Result<()> {
    let _lock = data.lock()?;
    let corpus = data.corpus()?;
    let lexical = InvertedIndex::build(&corpus)?;
    lexical.save(&data.path(Artifact::Lexical))?;
    writeln!(stdout, "lexical index: {} documents", lexical.n_docs())?;
    let ckpt = data.path(Artifact::Model);
    if ckpt.exists() {
        let params = ModelParams::load(&ckpt)?;
        if params.encoder.is_frozen() {
            let store = EmbeddingStore::build(&corpus, &params.encoder)?;
            store.save(&data.path(Artifact::Store))?;
            writeln!(stdout, "dense store: {} vectors of dim {}", store.len(), store.dim())?;
        }
    } else {
        writeln!(stdout, "dense store: built by `convqa pretrain`")?;
    }
    Ok(())
}

fn train_split(corpus: &Corpus, settings: &Settings) -> Vec<convqa::training::Example> {
    examples(corpus, |c| !settings.is_held_out(c))
}

fn run_pretrain(data: &DataDir, settings: &Settings, stdout: &mut dyn Write) -> anyhow::Result<()> {
    let corpus = data.corpus()?;
    let ckpt = data.path(Artifact::Model);
    let mut params = if ckpt.exists() {
        ModelParams::load(&ckpt)?
    } else {
        ModelParams::init(&settings.model)?
    };
    let ex = train_split(&corpus, settings);
    let (log, store) = pretrain(&mut params, &corpus, &ex, &settings.schedule.pretrain)?;
    params.save(&ckpt)?;
    store.save(&data.path(Artifact::Store))?;
    data.append_loss_log(&log)?;
    data.record_phase(Phase::Pretrain)?;
    report_phase(stdout, Phase::Pretrain, &log)
}

fn run_phase(data: &DataDir, settings: &Settings, phase: Phase, stdout: &mut dyn Write) -> anyhow::Result<()> {
    let done = data.phases()?.completed;
    let pos = Phase::ORDER.iter().position(|&p| p == phase).expect("listed");
    if let Some(missing) = Phase::ORDER[..pos].iter().find(|p| !done.contains(p)) {
        return Err(Failure::new(
            "phase-order",
            format!("phase `{}` needs `{}` first", phase.name(), missing.name()),
        )
        .into());
    }
    let corpus = data.corpus()?;
    let lexical = data.lexical()?;
    let mut params = data.model()?;
    let store = data.store()?;
    let ex = train_split(&corpus, settings);
    let log = train_phase(
        &mut params,
        &corpus,
        &store,
        &lexical,
        &settings.pipeline,
        &ex,
        phase,
        settings.schedule.phase(phase),
    )?;
    params.save(&data.path(Artifact::Model))?;
    data.append_loss_log(&log)?;
    data.record_phase(phase)?;
    report_phase(stdout, phase, &log)
}

fn report_phase(stdout: &mut dyn Write, phase: Phase, log: &[convqa::training::EpochLog]) -> anyhow::Result<()> {
    match log.last() {
        Some(e) => writeln!(
            stdout,
            "{}: {} epoch(s), final loss {:.6} over {} examples ({} skipped)",
            phase.name(),
            log.len(),
            e.loss.total,
            e.examples,
            e.skipped
        )?,
        None => writeln!(stdout, "{}: 0 epochs", phase.name())?,
    }
    Ok(())
}

struct Loaded {
    corpus: Corpus,
    params: ModelParams,
    store: EmbeddingStore,
    lexical: InvertedIndex,
}

fn load_all(data: &DataDir) -> anyhow::Result<Loaded> {
    let corpus = data.corpus()?;
    let lexical = data.lexical()?;
    let params = data.model()?;
    let store = data.store()?;
    store.verify(&params.encoder)?;
    Ok(Loaded {
        corpus,
        params,
        store,
        lexical,
    })
}

fn eval(
    data: &DataDir,
    settings: &Settings,
    setting: Setting,
    split: Split,
    out: Option<&Path>,
    stdout: &mut dyn Write,
) -> anyhow::Result<()> {
    let l = load_all(data)?;
    let engine = Engine {
        corpus: &l.corpus,
        params: &l.params,
        store: &l.store,
        index: &l.lexical,
        config: &settings.pipeline,
    };
    let convs: Vec<usize> = (0..l.corpus.conversations().len())
        .filter(|&c| match split {
            Split::All => true,
            Split::Heldout => settings.holdout_every == 0 || settings.is_held_out(c),
            Split::Train => !settings.is_held_out(c),
        })
        .collect();
    let report = evaluate(
        &engine,
        &convs,
        setting,
        EvalOptions {
            strip_articles: settings.strip_articles,
        },
    )?;
    let json = report.to_json()?;
    let text = report.to_text();
    let dir = data.reports_dir();
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let stem = format!("eval-{}", setting.as_str());
    let json_path = dir.join(format!("{stem}.json"));
    std::fs::write(&json_path, &json).with_context(|| format!("writing {}", json_path.display()))?;
    std::fs::write(dir.join(format!("{stem}.txt")), &text)?;
    if let Some(p) = out {
        std::fs::write(p, &json).with_context(|| format!("writing {}", p.display()))?;
    }
    write!(stdout, "{text}")?;
    writeln!(stdout, "report: {}", json_path.display())?;
    Ok(())
}

fn ask(data: &DataDir, settings: &Settings, trace: bool, stdin: &mut dyn BufRead, stdout: &mut dyn Write) -> anyhow::Result<()> {
    let l = load_all(data)?;
    let engine = Engine {
        corpus: &l.corpus,
        params: &l.params,
        store: &l.store,
        index: &l.lexical,
        config: &settings.pipeline,
    };
    let mut session = Session::new(settings.pipeline.clone(), trace);
    writeln!(stdout, "one question per line; `:reset` starts a new conversation, `:quit` exits")?;
    let mut line = String::new();
    loop {
        write!(stdout, "[{}]> ", session.turns.len() + 1)?;
        stdout.flush()?;
        line.clear();
        if stdin.read_line(&mut line)? == 0 {
            break;
        }
        match line.trim() {
            "" => continue,
            ":quit" | ":q" => break,
            ":reset" => {
                session.reset();
                writeln!(stdout, "conversation reset")?;
            }
            q => match session.ask(&engine, q) {
                Ok(out) => {
                    if session.trace {
                        write!(stdout, "{}", render_trace(&engine, &out))?;
                    }
                    write!(stdout, "{}", render_answer(&out))?;
                }
                Err(e) => writeln!(stdout, "{}", crate::error_line(&e.into()))?,
            },
        }
    }
    Ok(())
}
