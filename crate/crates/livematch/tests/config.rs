use std::path::{Path, PathBuf};

use livematch::config::{Profile, RunConfig, KEYS};
use livematch::Error;
use livematch_core::{CrossTopology, Modalities};

fn flags(pairs: &[(&'static str, &str)]) -> Vec<(&'static str, String)> {
    pairs.iter().map(|(k, v)| (*k, v.to_string())).collect()
}

#[test]
fn unset_values_follow_published_settings() {
    let c = RunConfig::resolve(&[], None, &[]).unwrap();
    assert_eq!(c.profile, Profile::Desk);
    assert_eq!(c.margin, 0.1);
    assert_eq!(c.lr, 0.00009);
    assert_eq!((c.beta1, c.beta2), (0.9, 0.999));
    assert_eq!(c.batch_size, 64);
    assert_eq!(c.dropout, 0.2);
    assert_eq!(c.negatives_per_clip, 1);
    assert_eq!(c.candidates, 100);
    assert_eq!((c.dim, c.heads, c.blocks, c.ffn_dim), (32, 2, 2, 64));
    assert_eq!(c.modalities, Modalities::ALL);
    assert_eq!(c.topology, CrossTopology::Symmetric);

    let p = RunConfig::resolve(&[], None, &flags(&[("profile", "paper")])).unwrap();
    assert_eq!((p.dim, p.heads, p.blocks, p.ffn_dim), (512, 8, 6, 2048));
}

#[test]
fn flags_beat_file_beat_defaults_beat_profile() {
    let file = "# run\nprofile = paper\ndim = 64   # comment\nheads = 4\nlr = 0.5\n\n";
    let c = RunConfig::resolve(
        &flags(&[("dim", "8"), ("blocks", "3")]),
        Some((Path::new("f.conf"), file)),
        &flags(&[("lr", "0.25"), ("data_dir", "/tmp/x")]),
    )
    .unwrap();
    assert_eq!(c.profile, Profile::Paper);
    assert_eq!(c.dim, 64);
    assert_eq!(c.heads, 4);
    assert_eq!(c.blocks, 3);
    assert_eq!(c.ffn_dim, 2048);
    assert_eq!(c.lr, 0.25);
    assert_eq!(c.data_dir, PathBuf::from("/tmp/x"));
    let c = RunConfig::resolve(
        &[],
        Some((Path::new("f"), "profile = paper\n")),
        &flags(&[("profile", "desk")]),
    )
    .unwrap();
    assert_eq!(c.dim, 32);
}

#[test]
fn every_problem_is_listed() {
    let err = RunConfig::resolve(
        &[],
        None,
        &flags(&[
            ("margin", "-1"),
            ("heads", "5"),
            ("colour", "red"),
            ("lr", "fast"),
            ("modalities", "text,smell"),
        ]),
    )
    .unwrap_err();
    let Error::Usage(msg) = &err else {
        panic!("{err:?}")
    };
    for needle in ["margin", "heads 5", "colour", "lr", "smell"] {
        assert!(msg.contains(needle), "{needle} missing from {msg}");
    }
    assert_eq!(err.exit_code(), 1);

    let err = RunConfig::resolve(&[], Some((Path::new("f.conf"), "dim 8\n")), &[]).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 1, .. }), "{err:?}");
}

#[test]
fn dump_reads_back_identically() {
    let c = RunConfig::resolve(
        &[],
        None,
        &flags(&[
            ("lr", "0.000123456789"),
            ("dropout", "0.1"),
            ("modalities", "vision,audio"),
            ("halve_on_drop", "false"),
            ("seed", "42"),
        ]),
    )
    .unwrap();
    let text = c.to_text();
    assert_eq!(text.lines().count(), KEYS.len());
    let back = RunConfig::resolve(&[], Some((Path::new("dump"), &text)), &[]).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.to_text(), text);
}
