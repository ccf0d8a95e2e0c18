use std::path::Path;

use livematch::formats::{
    load_clips, load_comments, load_vocab, parse_clips, write_clips, write_comments, write_vocab,
};
use livematch::Error;
use livematch_core::corpus::synth::{generate, SynthConfig};
use livematch_core::corpus::AUDIO_DIM;

fn line(id: &str, audio_width: usize) -> String {
    let audio: Vec<Vec<f64>> = vec![vec![0.25; audio_width]; 5];
    serde_json::json!({
        "clip_id": id,
        "timestamp_s": 12,
        "surrounding": ["So cute!!", "lol"],
        "vision": [[0.5, -1.0], [0.0, 2.0]],
        "audio": audio,
        "candidate": "Oh My God",
        "is_ground_truth": true,
    })
    .to_string()
}

#[test]
fn three_lines_three_records() {
    let text = [line("a", 64), line("b", 64), line("c", 64)].join("\n");
    let clips = parse_clips(&text, Path::new("x.jsonl"), AUDIO_DIM, None).unwrap();
    assert_eq!(clips.len(), 3);
    assert_eq!(clips[1].clip_id, "b");
    assert_eq!(clips[0].surrounding[0], ["so", "cute", "!", "!"]);
    assert_eq!(clips[0].candidate, ["oh", "my", "god"]);
    assert_eq!(clips[2].timestamp_s, 12);
}

#[test]
fn short_audio_frame_names_its_line() {
    let text = [line("a", 64), String::new(), line("b", 63)].join("\n");
    let err = parse_clips(&text, Path::new("x.jsonl"), AUDIO_DIM, None).unwrap_err();
    match &err {
        Error::Parse { line, msg, .. } => {
            assert_eq!(*line, 3);
            assert!(msg.contains("audio"), "{msg}");
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(err.to_string().starts_with("x.jsonl:3:"), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn malformed_json_and_vision_width() {
    let text = format!("{}\n{{\"clip_id\": 3}}\n", line("a", 64));
    let err = parse_clips(&text, Path::new("x"), AUDIO_DIM, None).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 2, .. }), "{err:?}");
    let err = parse_clips(&line("a", 64), Path::new("x"), AUDIO_DIM, Some(3)).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 1, .. }), "{err:?}");
}

#[test]
fn synthetic_corpus_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate(11, 40, &SynthConfig::default()).unwrap();
    let path = dir.path().join("clips.jsonl");
    write_clips(&path, &corpus.clips).unwrap();
    let back = load_clips(&path, AUDIO_DIM, None).unwrap();
    assert_eq!(back, corpus.clips);

    let pool = dir.path().join("pool.txt");
    write_comments(&pool, &corpus.pool).unwrap();
    assert_eq!(load_comments(&pool).unwrap(), corpus.pool);

    let vocab = corpus.vocabulary().unwrap();
    let vpath = dir.path().join("vocab.txt");
    write_vocab(&vpath, &vocab).unwrap();
    let again = load_vocab(&vpath).unwrap();
    assert_eq!(again, vocab);
    assert_eq!(again.checksum(), vocab.checksum());
}

#[test]
fn bad_text_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("v.txt");
    std::fs::write(&p, "a\nb\na\n").unwrap();
    assert!(matches!(load_vocab(&p), Err(Error::Parse { line: 3, .. })));
    std::fs::write(&p, "a\nb c\n").unwrap();
    assert!(matches!(load_vocab(&p), Err(Error::Parse { line: 2, .. })));
    std::fs::write(&p, "fine\n  \n").unwrap();
    assert!(matches!(
        load_comments(&p),
        Err(Error::Parse { line: 2, .. })
    ));
    let missing = dir.path().join("nope.jsonl");
    assert!(matches!(
        load_clips(&missing, AUDIO_DIM, None),
        Err(Error::Io { .. })
    ));
}
