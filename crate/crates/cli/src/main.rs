use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use uhop::config::Settings;
use uhop::datagen::{gen_gridworld, gen_synth, load_examples, QaExample};
use uhop::eval::{
    count_search_space, evaluate, evaluate_chain, evaluate_with, oracle_for, transfer_experiment,
    write_reports, SpaceMode,
};
use uhop::scorer::{Model, Vocab};
use uhop::trainer::{fit, resolve_all, save_fit, GoldExample, Objective};
use uhop::{Error, KnowledgeGraph};

#[derive(Parser)]
#[command(
    name = "uhop",
    version,
    about = "Unrestricted-hop relation path extraction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a setting, e.g. `--set epochs=10`. Repeatable; applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory. The resolved settings are written here.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct Data {
    /// Directory holding kg.tsv and {train,valid,test}.jsonl.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Uhop,
    Chain,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a Grid World graph and question splits.
    GenGrid {
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic multi-hop graph and question splits.
    GenSynth {
        #[command(flatten)]
        common: Common,
    },
    /// Train a scorer; writes best.ckpt, vocab.tsv, best.meta, train_log.csv.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        /// Keep only training/validation questions with these gold lengths.
        #[arg(long, value_delimiter = ',')]
        train_hops: Vec<usize>,
    },
    /// Evaluate a checkpoint (or the prefix oracle) on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[arg(long, default_value = "test")]
        split: String,
        /// Checkpoint to evaluate; omit with --oracle.
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Use the gold-prefix oracle scorer instead of a checkpoint.
        #[arg(long)]
        oracle: bool,
        /// Decode with the fixed-length chain baseline instead of UHop.
        #[arg(long)]
        chain: bool,
        /// Keep only questions with these gold lengths.
        #[arg(long, value_delimiter = ',')]
        hops: Vec<usize>,
    },
    /// Count scored candidates (uhop) or enumerable paths (chain) per question.
    CountSpace {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_enum, default_value = "uhop")]
        mode: Mode,
        /// Scorer for uhop mode; the prefix oracle when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train on one set of gold lengths and test on another, UHop vs chain.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[arg(long, value_delimiter = ',', default_value = "3")]
        train_hops: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "2")]
        test_hops: Vec<usize>,
    },
}

fn settings(common: &Common) -> Result<Settings, Error> {
    let mut s = Settings::default();
    if let Some(path) = &common.config {
        s.apply_file(path)?;
    }
    s.apply_overrides(&common.overrides)?;
    s.train.validate()?;
    s.write_resolved(&common.out)?;
    Ok(s)
}

fn load_graph(data: &Data) -> Result<KnowledgeGraph, Error> {
    KnowledgeGraph::load_tsv(data.data.join("kg.tsv"))
}

fn load_split(data: &Data, split: &str, graph: &KnowledgeGraph) -> Result<Vec<QaExample>, Error> {
    load_examples(data.data.join(format!("{split}.jsonl")), Some(graph))
}

fn keep_hops(examples: Vec<QaExample>, hops: &[usize]) -> Vec<QaExample> {
    if hops.is_empty() {
        return examples;
    }
    examples
        .into_iter()
        .filter(|e| hops.contains(&e.gold_path.len()))
        .collect()
}

fn write(path: &Path, body: &str) -> Result<(), Error> {
    fs::write(path, body).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenGrid { common } => {
            let s = settings(&common)?;
            gen_gridworld(&s.grid)?.write_to(&common.out)?;
        }
        Command::GenSynth { common } => {
            let s = settings(&common)?;
            gen_synth(&s.synth)?.write_to(&common.out)?;
        }
        Command::Train {
            common,
            data,
            train_hops,
        } => {
            let s = settings(&common)?;
            let graph = load_graph(&data)?;
            let train = keep_hops(load_split(&data, "train", &graph)?, &train_hops);
            let valid = keep_hops(load_split(&data, "valid", &graph)?, &train_hops);
            let vocab = Vocab::build(train.iter().map(|e| e.question_tokens.as_slice()), &graph);
            let model = Model::new(s.scorer.clone(), vocab, &graph);
            let result = fit(
                model,
                &resolve_all(&graph, &train),
                &resolve_all(&graph, &valid),
                &graph,
                &s.train,
                &s.engine,
            )?;
            save_fit(&common.out, &result)?;
            println!(
                "best epoch {} valid path accuracy {:.4}",
                result.best_epoch, result.best_valid
            );
        }
        Command::Eval {
            common,
            data,
            split,
            checkpoint,
            oracle,
            chain,
            hops,
        } => {
            let s = settings(&common)?;
            let graph = load_graph(&data)?;
            let examples = keep_hops(load_split(&data, &split, &graph)?, &hops);
            let gold: Vec<GoldExample> = resolve_all(&graph, &examples);
            let report = match (checkpoint, chain) {
                (Some(ckpt), false) if !oracle => {
                    let model = Model::load(&ckpt, &graph)?;
                    evaluate(&model, &split, &gold, &graph, &s.engine, Some(&common.out))?
                }
                (Some(ckpt), true) if !oracle => {
                    let model = Model::load(&ckpt, &graph)?;
                    uhop::eval::check_vocab(&model.vocab, &gold)?;
                    let r = evaluate_chain(
                        &split,
                        &gold,
                        &graph,
                        &model,
                        s.chain_hops,
                        s.engine.chain_budget,
                    )?;
                    write_reports(&common.out, std::slice::from_ref(&r))?;
                    r
                }
                _ => {
                    let (r, traces) = evaluate_with(&split, &gold, &graph, &s.engine, oracle_for)?;
                    write_reports(&common.out, std::slice::from_ref(&r))?;
                    write(
                        &common.out.join("traces.jsonl"),
                        &(traces.join("\n") + "\n"),
                    )?;
                    r
                }
            };
            println!(
                "{}: {} examples, path accuracy {:.4} (RE {}, TD early {}, TD late {})",
                report.split,
                report.n_examples,
                report.path_accuracy(),
                report.re_errors(),
                report.td_early(),
                report.td_late()
            );
        }
        Command::CountSpace {
            common,
            data,
            split,
            mode,
            checkpoint,
        } => {
            let s = settings(&common)?;
            let graph = load_graph(&data)?;
            let gold = resolve_all(&graph, &load_split(&data, &split, &graph)?);
            let mode = match mode {
                Mode::Uhop => SpaceMode::Uhop,
                Mode::Chain => SpaceMode::Chain(s.chain_hops),
            };
            let report = match checkpoint {
                Some(ckpt) => {
                    let model = Model::load(&ckpt, &graph)?;
                    count_search_space(&gold, &graph, mode, &s.engine, |_| &model)?
                }
                None => count_search_space(&gold, &graph, mode, &s.engine, oracle_for)?,
            };
            write(&common.out.join("space.csv"), &report.csv(mode))?;
            match report.mean {
                Some(m) => println!("mean candidates {m:.3} ({} excluded)", report.excluded),
                None => println!("every example exceeded the budget"),
            }
            if report.excluded > 0 {
                return Err(Error::Budget {
                    budget: s.engine.chain_budget,
                });
            }
        }
        Command::Transfer {
            common,
            data,
            train_hops,
            test_hops,
        } => {
            let s = settings(&common)?;
            let graph = load_graph(&data)?;
            let train = keep_hops(load_split(&data, "train", &graph)?, &train_hops);
            let valid = keep_hops(load_split(&data, "valid", &graph)?, &train_hops);
            let test = keep_hops(load_split(&data, "test", &graph)?, &test_hops);
            let vocab = Vocab::build(train.iter().map(|e| e.question_tokens.as_slice()), &graph);
            let mut train_cfg = s.train.clone();
            train_cfg.objective = Objective::Uhop;
            let report = transfer_experiment(
                &resolve_all(&graph, &train),
                &resolve_all(&graph, &valid),
                &resolve_all(&graph, &test),
                &graph,
                &vocab,
                &s.scorer,
                &train_cfg,
                &s.engine,
                s.chain_hops,
            )?;
            write_reports(&common.out, &[report.uhop.clone(), report.chain.clone()])?;
            save_fit(common.out.join("uhop"), &report.uhop_fit)?;
            save_fit(common.out.join("chain"), &report.chain_fit)?;
            for r in [&report.uhop, &report.chain] {
                println!(
                    "{}: path accuracy {:.4} (RE {}, TD {})",
                    r.split,
                    r.path_accuracy(),
                    r.re_errors(),
                    r.td_errors()
                );
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Budget { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
