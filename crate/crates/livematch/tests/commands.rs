use std::fs;
use std::path::Path;

use livematch::checkpoint::Checkpoint;
use livematch::commands::{self, Corpus};
use livematch::config::RunConfig;
use livematch::formats::write_comments;
use livematch::Error;
use livematch_core::corpus::detokenize;
use livematch_core::MatchingModel;

fn config(data: &Path, out: &Path, extra: &[(&'static str, &str)]) -> RunConfig {
    let mut flags = vec![
        ("data_dir", data.display().to_string()),
        ("out_dir", out.display().to_string()),
        ("n_clips", "40".to_string()),
        ("seed", "5".to_string()),
        ("batch_size", "8".to_string()),
        ("lr", "0.001".to_string()),
        ("candidates", "10".to_string()),
        ("dim", "16".to_string()),
        ("ffn_dim", "32".to_string()),
    ];
    flags.extend(extra.iter().map(|(k, v)| (*k, v.to_string())));
    RunConfig::resolve(&[], None, &flags).unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().into_string().unwrap(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn synth_is_byte_deterministic_and_loads() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    commands::synth(&config(&a, &a, &[])).unwrap();
    commands::synth(&config(
        &b,
        &b,
        &[
            ("data_dir", b.to_str().unwrap()),
            ("out_dir", a.to_str().unwrap()),
        ],
    ))
    .unwrap();
    let (fa, fb) = (files(&a), files(&b));
    let names: Vec<_> = fa.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        names,
        [
            "config.txt",
            "dev.jsonl",
            "pool.txt",
            "popular.txt",
            "test.jsonl",
            "train.jsonl",
            "vocab.txt"
        ]
    );
    // config.txt records the directories, so it alone may differ
    for ((na, da), (nb, db)) in fa.iter().zip(&fb) {
        assert_eq!(na, nb);
        if na != "config.txt" {
            assert_eq!(da, db, "{na}");
        }
    }
    let corpus = Corpus::load(&a, None).unwrap();
    assert_eq!(corpus.train.len(), 32);
    assert_eq!(corpus.split(&a, "dev").unwrap().len(), 4);
    assert_eq!(corpus.split(&a, "test").unwrap().len(), 4);
    assert_eq!(corpus.popular.len(), 20);
    assert!(matches!(corpus.split(&a, "val"), Err(Error::Usage(_))));

    let err = commands::synth(&config(&a, &a, &[("n_clips", "0")])).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn popular_falls_back_to_training_frequency() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    commands::synth(&config(d, d, &[])).unwrap();
    fs::remove_file(d.join("popular.txt")).unwrap();
    let corpus = Corpus::load(d, None).unwrap();
    let mut counts = std::collections::BTreeMap::new();
    for r in &corpus.train {
        *counts.entry(&r.candidate).or_insert(0usize) += 1;
    }
    let top = counts.values().max().copied().unwrap();
    assert_eq!(counts[&corpus.popular[0]], top);
    assert_eq!(corpus.popular.len(), 20.min(counts.len()));
}

#[test]
fn zero_epochs_writes_the_initial_model() {
    let tmp = tempfile::tempdir().unwrap();
    let (d, o) = (tmp.path().join("d"), tmp.path().join("o"));
    let cfg = config(&d, &o, &[("max_epochs", "0")]);
    commands::synth(&cfg).unwrap();
    let out = commands::train(&cfg, None).unwrap();
    assert!(out.reports.is_empty());
    let corpus = Corpus::load(&d, None).unwrap();
    let fresh = MatchingModel::new(
        cfg.model_config(corpus.vocab.len(), corpus.vision_dim),
        cfg.seed,
    )
    .unwrap();
    for name in ["last.ckpt", "best.ckpt"] {
        let ck = Checkpoint::load(&o.join(name)).unwrap();
        assert_eq!(ck.model, fresh);
        assert_eq!(ck.state.epoch, 0);
        assert_eq!(ck.config, cfg);
    }
    assert_eq!(
        fs::read_to_string(o.join("config.txt")).unwrap(),
        cfg.to_text()
    );
    assert_eq!(fs::read_to_string(o.join("epochs.jsonl")).unwrap(), "");
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    let (full, part) = (tmp.path().join("full"), tmp.path().join("part"));
    commands::synth(&config(&d, &d, &[])).unwrap();
    let whole = commands::train(&config(&d, &full, &[("max_epochs", "3")]), None).unwrap();
    commands::train(&config(&d, &part, &[("max_epochs", "1")]), None).unwrap();
    let rest = commands::train(
        &config(&d, &part, &[("max_epochs", "3")]),
        Some(&part.join("last.ckpt")),
    )
    .unwrap();
    assert_eq!(rest.reports.len(), 2);
    assert_eq!(rest.model, whole.model);
    assert_eq!(rest.state, whole.state);
    let log = |dir: &Path| fs::read_to_string(dir.join("epochs.jsonl")).unwrap();
    assert_eq!(log(&part), log(&full));
    assert_eq!(log(&full).lines().count(), 3);
    // the stored configs differ in out_dir only
    let (a, b) = (
        Checkpoint::load(&part.join("last.ckpt")).unwrap(),
        Checkpoint::load(&full.join("last.ckpt")).unwrap(),
    );
    assert_eq!((a.model, a.state), (b.model, b.state));

    let again = commands::train(
        &config(&d, &tmp.path().join("again"), &[("max_epochs", "3")]),
        None,
    )
    .unwrap();
    assert_eq!(again.reports, whole.reports);

    let err = commands::train(
        &config(
            &d,
            &part,
            &[("max_epochs", "4"), ("dim", "8"), ("ffn_dim", "16")],
        ),
        Some(&part.join("last.ckpt")),
    )
    .unwrap_err();
    assert_eq!(err.exit_code(), 1, "{err}");
}

#[test]
fn eval_is_repeatable_and_checks_the_vocabulary() {
    let tmp = tempfile::tempdir().unwrap();
    let (d, o) = (tmp.path().join("d"), tmp.path().join("o"));
    let cfg = config(&d, &o, &[("max_epochs", "1")]);
    commands::synth(&cfg).unwrap();
    commands::train(&cfg, None).unwrap();
    let ck = o.join("best.ckpt");
    let e1 = commands::eval(&config(&d, &tmp.path().join("e1"), &[]), &ck, "test").unwrap();
    let e2 = commands::eval(&config(&d, &tmp.path().join("e2"), &[]), &ck, "test").unwrap();
    assert_eq!(e1.report, e2.report);
    assert_eq!(e1.report.n_clips, 4);
    for name in ["metrics.jsonl", "audit.jsonl"] {
        assert_eq!(
            fs::read(tmp.path().join("e1").join(name)).unwrap(),
            fs::read(tmp.path().join("e2").join(name)).unwrap()
        );
    }
    let audit = fs::read_to_string(tmp.path().join("e1/audit.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(audit.lines().next().unwrap()).unwrap();
    assert_eq!(first["top5"].as_array().unwrap().len(), 5);
    assert_eq!(
        first["gt_rank"].as_u64().unwrap() as usize,
        e1.results[0].gt_rank
    );
    let metrics: serde_json::Value = serde_json::from_str(
        fs::read_to_string(tmp.path().join("e1/metrics.jsonl"))
            .unwrap()
            .trim(),
    )
    .unwrap();
    assert_eq!(metrics["recall@1"].as_f64().unwrap(), e1.report.recall_at_1);
    assert_eq!(metrics["mr"].as_f64().unwrap(), e1.report.mean_rank);

    let missing = commands::eval(&cfg, &o.join("nope.ckpt"), "test").unwrap_err();
    assert_eq!(missing.exit_code(), 2);

    let mut vocab = fs::read_to_string(d.join("vocab.txt")).unwrap();
    vocab.push_str("zzzextra\n");
    fs::write(d.join("vocab.txt"), vocab).unwrap();
    let err = commands::eval(&cfg, &ck, "test").unwrap_err();
    assert!(err.to_string().contains("checksum"), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn rank_agrees_with_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let (d, o) = (tmp.path().join("d"), tmp.path().join("o"));
    let cfg = config(&d, &o, &[("max_epochs", "1")]);
    commands::synth(&cfg).unwrap();
    commands::train(&cfg, None).unwrap();
    let ck = o.join("last.ckpt");
    let ev = commands::eval(&config(&d, &tmp.path().join("e"), &[]), &ck, "dev").unwrap();

    let clip_line = fs::read_to_string(d.join("dev.jsonl"))
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    let clip_file = tmp.path().join("clip.jsonl");
    fs::write(&clip_file, format!("{clip_line}\n")).unwrap();
    let set = &ev.clips[0].set;
    let cands = tmp.path().join("cands.txt");
    write_comments(&cands, &set.candidates).unwrap();
    let ranked = commands::rank(&cfg, &ck, &clip_file, &cands).unwrap();
    let expected: Vec<String> = ev.results[0]
        .order
        .iter()
        .map(|&i| detokenize(&set.candidates[i]))
        .collect();
    let got: Vec<String> = ranked.iter().map(|r| r.candidate.clone()).collect();
    assert_eq!(got, expected);
    let gt_pos = ranked.iter().position(|r| r.ground_truth).unwrap();
    assert_eq!(gt_pos + 1, ev.results[0].gt_rank);
    assert_eq!(ranked.iter().filter(|r| r.ground_truth).count(), 1);
    assert!(ranked.iter().all(|r| (-1.0..=1.0).contains(&r.score)));
    for (r, &i) in ranked.iter().zip(&ev.results[0].order) {
        assert_eq!(r.score, ev.results[0].scores[i]);
    }

    fs::write(&cands, "cat music cute\n").unwrap();
    let one = commands::rank(&cfg, &ck, &clip_file, &cands).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one[0].rank, 1);

    fs::write(&clip_file, format!("{clip_line}\n{clip_line}\n")).unwrap();
    assert!(commands::rank(&cfg, &ck, &clip_file, &cands).is_err());
    fs::write(&clip_file, "{not json\n").unwrap();
    let err = commands::rank(&cfg, &ck, &clip_file, &cands).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 1, .. }), "{err:?}");
}

#[test]
fn gradcheck_passes_and_catches_a_broken_rule() {
    let cfg = RunConfig::resolve(&commands::gradcheck_defaults(), None, &[]).unwrap();
    assert_eq!((cfg.dim, cfg.heads, cfg.blocks, cfg.ffn_dim), (8, 2, 2, 16));
    let report = commands::gradcheck(&cfg, None).unwrap();
    assert!(report.passed(), "{report:?}");
    assert!(report.max_rel_error() <= 1e-4);
    let broken =
        commands::gradcheck(&cfg, Some(livematch_core::autodiff::OpKind::Softmax)).unwrap();
    assert!(!broken.passed());
}
