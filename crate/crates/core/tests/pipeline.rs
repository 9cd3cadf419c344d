use std::ops::ControlFlow;

use lisa::checkpoint;
use lisa::config::RunConfig;
use lisa::corpus::read_conll;
use lisa::embed::{ContextualLayers, StaticTable};
use lisa::encoder::ParseSource;
use lisa::eval::{evaluate, export_metrics, METRICS_HEADER};
use lisa::model::EmbeddingKind;
use lisa::train::{self, check_compatible, gen_synth, parse_heads, predict_corpus, SynthSizes, TrainData};
use lisa::Error;

fn small_sizes() -> SynthSizes {
    SynthSizes {
        train: 40,
        dev: 10,
        test: 10,
        test_ood: 10,
        dim: 16,
        seed: 2,
    }
}

fn small_run() -> RunConfig {
    let mut c = RunConfig::default();
    c.apply_text("d_model = 16\nd_k = 4\nd_q = 4\nd_v = 4\nd_r = 8\nepochs = 2\n")
        .unwrap();
    c
}

#[test]
fn files_to_checkpoint_to_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_synth(d, &small_sizes()).unwrap();
    let data = TrainData {
        train: read_conll(d.join("train.conll")).unwrap(),
        dev: read_conll(d.join("dev.conll")).unwrap(),
        table: Some(StaticTable::read(d.join("embeddings.txt")).unwrap()),
        train_context: None,
        dev_context: None,
    };
    let run = small_run();
    let out = train::train(&run, &data, &mut |_, _, _| Ok(ControlFlow::Continue(()))).unwrap();
    assert_eq!(out.log.len(), 2);

    let ckpt = d.join("model.ckpt");
    checkpoint::save(&ckpt, &out.best, &run).unwrap();
    let (model, stored) = checkpoint::load(&ckpt).unwrap();
    assert_eq!(stored.model, run.model);

    let test = read_conll(d.join("test.conll")).unwrap();
    check_compatible(&model, &test).unwrap();
    let heads = parse_heads(&std::fs::read_to_string(d.join("test.heads")).unwrap()).unwrap();
    let external = predict_corpus(&model, &test, None, &ParseSource::External(heads)).unwrap();
    let gold = predict_corpus(&model, &test, None, &ParseSource::Gold).unwrap();
    // the gold heads file makes the external source identical to the gold one
    assert_eq!(external, gold);

    let report = evaluate(&test, &gold).unwrap();
    assert_eq!(report.uas, 1.0);
    let metrics = d.join("metrics.csv");
    export_metrics(&report, &metrics).unwrap();
    let csv = std::fs::read_to_string(metrics).unwrap();
    assert_eq!(csv.lines().next(), Some(METRICS_HEADER));
    assert!(csv.lines().any(|l| l.starts_with("uas,all,")));
}

#[test]
fn contextual_path_trains_and_predicts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_synth(d, &small_sizes()).unwrap();
    let mut run = small_run();
    run.model.embedding = EmbeddingKind::Contextual;
    let data = TrainData {
        train: read_conll(d.join("train.conll")).unwrap(),
        dev: read_conll(d.join("dev.conll")).unwrap(),
        table: None,
        train_context: Some(ContextualLayers::read(d.join("train.ctxl")).unwrap()),
        dev_context: Some(ContextualLayers::read(d.join("dev.ctxl")).unwrap()),
    };
    let out = train::train(&run, &data, &mut |_, _, _| Ok(ControlFlow::Continue(()))).unwrap();
    assert!(out.best.net.table().is_none());

    let test = read_conll(d.join("test.conll")).unwrap();
    let ctx = ContextualLayers::read(d.join("test.ctxl")).unwrap();
    let preds = predict_corpus(&out.best, &test, Some(&ctx), &ParseSource::SelfPredicted).unwrap();
    assert_eq!(preds.len(), test.len());
    for p in &preds {
        p.validate().unwrap();
    }

    // layers from another split do not line up with these sentences
    let wrong = ContextualLayers::read(d.join("train.ctxl")).unwrap();
    let err = predict_corpus(&out.best, &test, Some(&wrong), &ParseSource::SelfPredicted);
    assert!(matches!(err, Err(Error::Alignment(_))));
    let err = predict_corpus(&out.best, &test, None, &ParseSource::SelfPredicted);
    assert!(matches!(err, Err(Error::Alignment(_))));
}

#[test]
fn external_parse_must_cover_the_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_synth(d, &small_sizes()).unwrap();
    let data = TrainData {
        train: read_conll(d.join("train.conll")).unwrap(),
        dev: read_conll(d.join("dev.conll")).unwrap(),
        table: Some(StaticTable::read(d.join("embeddings.txt")).unwrap()),
        train_context: None,
        dev_context: None,
    };
    let mut run = small_run();
    run.epochs = 1;
    let out = train::train(&run, &data, &mut |_, _, _| Ok(ControlFlow::Continue(()))).unwrap();
    let test = read_conll(d.join("test.conll")).unwrap();
    let mut heads = parse_heads(&std::fs::read_to_string(d.join("test.heads")).unwrap()).unwrap();
    heads.pop();
    let err = predict_corpus(&out.best, &test, None, &ParseSource::External(heads));
    assert_eq!(err.unwrap_err().category(), "alignment");
}
