use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};

use lisa::checkpoint;
use lisa::config::{ParseSourceKind, RunConfig, KEYS};
use lisa::corpus::{read_conll, write_conll_file};
use lisa::embed::{ContextualLayers, StaticTable};
use lisa::encoder::ParseSource;
use lisa::eval::{evaluate, export_metrics, metrics_csv};
use lisa::model::EmbeddingKind;
use lisa::train::{self, gen_synth, log_csv, parse_heads, SynthSizes, TrainData, LOG_HEADER};
use lisa::{Error, Result};

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

/// One `--flag VALUE` per configuration key, plus `--config FILE`.
fn config_args() -> Vec<Arg> {
    let mut args = vec![Arg::new("config")
        .long("config")
        .value_name("FILE")
        .help("key = value configuration file; flags override it")];
    args.extend(KEYS.iter().map(|k| {
        Arg::new(*k)
            .long(flag(k))
            .value_name("VALUE")
            .help(format!("sets {k}"))
    }));
    args
}

fn cli() -> Command {
    let size = |name: &'static str, default: &'static str| {
        Arg::new(name)
            .long(name)
            .value_parser(value_parser!(usize))
            .default_value(default)
    };
    Command::new("lisa")
        .about("Syntax-informed self-attention for semantic role labeling")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            Command::new("gen-synth")
                .about("Write a synthetic corpus, embeddings and contextual layers")
                .arg(Arg::new("out").long("out").required(true).value_name("DIR"))
                .arg(size("train", "2000"))
                .arg(size("dev", "500"))
                .arg(size("test", "500"))
                .arg(size("test-ood", "500"))
                .arg(size("dim", "64"))
                .arg(
                    Arg::new("seed")
                        .long("seed")
                        .value_parser(value_parser!(u64))
                        .default_value("1"),
                ),
        )
        .subcommand(
            Command::new("train")
                .about("Train and keep the best checkpoint by dev F1")
                .args(config_args())
                .arg(
                    Arg::new("quiet")
                        .long("quiet")
                        .action(ArgAction::SetTrue)
                        .help("do not print the per-epoch log"),
                ),
        )
        .subcommand(
            Command::new("predict")
                .about("Tag a corpus with a trained checkpoint")
                .args(config_args()),
        )
        .subcommand(
            Command::new("evaluate")
                .about("Score predictions against gold annotations")
                .args(config_args()),
        )
}

/// File settings first, then every flag given on the command line.
fn run_config(m: &ArgMatches) -> Result<RunConfig> {
    let mut c = match m.get_one::<String>("config") {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for k in KEYS {
        if let Some(v) = m.get_one::<String>(k) {
            c.set(k, v)?;
        }
    }
    Ok(c)
}

fn path(p: &Option<PathBuf>) -> &Path {
    p.as_deref().expect("checked by require")
}

fn cmd_gen_synth(m: &ArgMatches) -> Result<()> {
    let n = |k: &str| *m.get_one::<usize>(k).expect("defaulted");
    let sizes = SynthSizes {
        train: n("train"),
        dev: n("dev"),
        test: n("test"),
        test_ood: n("test-ood"),
        dim: n("dim"),
        seed: *m.get_one::<u64>("seed").expect("defaulted"),
    };
    let out = m.get_one::<String>("out").expect("required");
    gen_synth(out, &sizes)?;
    println!("wrote synthetic corpus to {out}");
    Ok(())
}

fn cmd_train(m: &ArgMatches) -> Result<()> {
    let c = run_config(m)?;
    c.validate()?;
    c.require(&[("train", &c.train), ("dev", &c.dev)])?;
    let ckpt = c
        .checkpoint
        .clone()
        .ok_or_else(|| Error::Config("checkpoint is required".into()))?;
    let mut data = TrainData {
        train: read_conll(path(&c.train))?,
        dev: read_conll(path(&c.dev))?,
        table: None,
        train_context: None,
        dev_context: None,
    };
    match c.model.embedding {
        EmbeddingKind::Static => {
            c.require(&[("embeddings", &c.embeddings)])?;
            data.table = Some(StaticTable::read(path(&c.embeddings))?);
        }
        EmbeddingKind::Contextual => {
            c.require(&[("context_train", &c.context_train), ("context_dev", &c.context_dev)])?;
            data.train_context = Some(ContextualLayers::read(path(&c.context_train))?);
            data.dev_context = Some(ContextualLayers::read(path(&c.context_dev))?);
        }
    }
    let quiet = m.get_flag("quiet");
    if !quiet {
        println!("{LOG_HEADER}");
    }
    let mut rows = Vec::new();
    let outcome = train::train(&c, &data, &mut |entry, model, improved| {
        if !quiet {
            println!("{}", entry.csv_row());
        }
        rows.push(entry.clone());
        if let Some(log) = &c.log {
            std::fs::write(log, log_csv(&rows))?;
        }
        if improved {
            checkpoint::save(&ckpt, model, &c)?;
        }
        Ok(ControlFlow::Continue(()))
    })?;
    println!(
        "best dev F1 {:.4} at epoch {}, checkpoint {}",
        outcome
            .log
            .get(outcome.best_epoch.saturating_sub(1))
            .map_or(0.0, |e| e.dev.srl.f1),
        outcome.best_epoch,
        ckpt.display()
    );
    Ok(())
}

fn cmd_predict(m: &ArgMatches) -> Result<()> {
    let c = run_config(m)?;
    c.require(&[("checkpoint", &c.checkpoint), ("input", &c.input)])?;
    let output = c
        .output
        .clone()
        .ok_or_else(|| Error::Config("output is required".into()))?;
    let (mut model, _) = checkpoint::load(path(&c.checkpoint))?;
    // a predict-time switch; everything else comes from the checkpoint
    if m.get_one::<String>("harden_parse").is_some() {
        model.net.config.harden_parse = c.model.harden_parse;
    }
    let corpus = read_conll(path(&c.input))?;
    train::check_compatible(&model, &corpus)?;
    let source = match c.parse_source {
        ParseSourceKind::SelfPredicted => ParseSource::SelfPredicted,
        ParseSourceKind::Gold => ParseSource::Gold,
        ParseSourceKind::External => {
            c.require(&[("parse_file", &c.parse_file)])?;
            ParseSource::External(parse_heads(&std::fs::read_to_string(path(&c.parse_file))?)?)
        }
    };
    let context = match model.net.config.embedding {
        EmbeddingKind::Static => None,
        EmbeddingKind::Contextual => {
            c.require(&[("context", &c.context)])?;
            Some(ContextualLayers::read(path(&c.context))?)
        }
    };
    let preds = train::predict_corpus(&model, &corpus, context.as_ref(), &source)?;
    write_conll_file(&output, &preds)?;
    println!("wrote {} sentences to {}", preds.len(), output.display());
    Ok(())
}

fn cmd_evaluate(m: &ArgMatches) -> Result<()> {
    let c = run_config(m)?;
    c.require(&[("gold", &c.gold), ("input", &c.input)])?;
    let gold = read_conll(path(&c.gold))?;
    let pred = read_conll(path(&c.input))?;
    let report = evaluate(&gold, &pred)?;
    match &c.metrics {
        Some(p) => {
            export_metrics(&report, p)?;
            println!(
                "srl f1 {:.4}, predicate f1 {:.4}, uas {:.4}",
                report.srl.f1, report.predicate.f1, report.uas
            );
        }
        None => print!("{}", metrics_csv(&report)),
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let result = match matches.subcommand() {
        Some(("gen-synth", m)) => cmd_gen_synth(m),
        Some(("train", m)) => cmd_train(m),
        Some(("predict", m)) => cmd_predict(m),
        Some(("evaluate", m)) => cmd_evaluate(m),
        _ => unreachable!("subcommand required"),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::FAILURE
        }
    }
}
