use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/toy")
}

fn emspeech(args: &[&str]) -> Output {
    emspeech_with(args, &[])
}

fn emspeech_with(args: &[&str], env: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_emspeech"));
    cmd.args(args).env_remove("EMSPEECH_CACHE");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn prepare(out: &Path, env: &[(&str, &Path)]) -> Output {
    let f = fixture();
    emspeech_with(
        &[
            "prepare",
            "--manifest",
            s(&f.join("manifest.tsv")),
            "--wav-dir",
            s(&f.join("wav")),
            "--align-dir",
            s(&f.join("align")),
            "--out-dir",
            s(out),
            "--config",
            s(&f.join("train.toml")),
        ],
        env,
    )
}

fn train(data: &Path, out: &Path, steps: u64, resume: Option<&Path>) -> Output {
    let config = fixture().join("train.toml");
    let steps = steps.to_string();
    let mut args = vec![
        "train",
        "--data-dir",
        s(data),
        "--out-dir",
        s(out),
        "--config",
        s(&config),
        "--steps",
        &steps,
    ];
    if let Some(c) = resume {
        args.extend(["--checkpoint", s(c)]);
    }
    emspeech(&args)
}

#[test]
fn usage_errors_exit_with_two() {
    let o = emspeech(&["stats", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    assert_eq!(emspeech(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(emspeech(&[]).status.code(), Some(2));
    let o = emspeech(&["synth", "--checkpoint", "x", "--phonemes", "a", "--polarity", "0.7"]);
    assert_eq!(o.status.code(), Some(2));
    let o = emspeech(&["synth", "--checkpoint", "x", "--phonemes", "a", "--text", "b"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn stats_reports_counts() {
    let f = fixture();
    let o = emspeech(&["stats", s(&f.join("manifest.tsv"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.starts_with("total\t20\n"), "{out}");
    for p in ["-1", "-0.5", "0", "0.5", "1"] {
        assert!(out.contains(&format!("count[{p}]\t4\n")), "{out}");
    }
    assert!(out.contains("mean_audio_s\tabsent"));
    let o = emspeech(&[
        "stats",
        "--manifest",
        s(&f.join("manifest.tsv")),
        "--wav-dir",
        s(&f.join("wav")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!stdout(&o).contains("absent"));
}

#[test]
fn runtime_errors_are_one_tab_separated_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    let o = emspeech(&["synth", "--checkpoint", s(&missing), "--phonemes", "a"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error\tnot-found\t"), "{err}");
    let bad = dir.path().join("bad.tsv");
    fs::write(&bad, "id\tspeaker\tpolarity\ttext\nu1\ts\t0.7\thi\n").unwrap();
    let o = emspeech(&["stats", s(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error\t"), "{}", stderr(&o));
}

#[test]
fn prepare_train_synth_pipeline() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = prepare(&data, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("prepared\t20\t"));
    let feat = data.join("features/toy003.feat");
    let first = fs::read(&feat).unwrap();
    fs::remove_file(&feat).unwrap();
    assert!(prepare(&data, &[]).status.success());
    assert_eq!(fs::read(&feat).unwrap(), first, "features differ between runs");

    let run = dir.path().join("run");
    let o = train(&data, &run, 30, None);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = run.join("checkpoint.ckpt");
    let log = fs::read_to_string(run.join("train_log.tsv")).unwrap();
    assert!(log.starts_with("step\tlr\tmel_mae"));
    assert!(log.lines().last().unwrap().starts_with("30\t"));
    assert_eq!(fs::read_to_string(run.join("split.tsv")).unwrap().lines().count(), 21);

    let out = dir.path().join("out");
    let synth = |name: &str, polarity: &str| {
        emspeech(&[
            "synth",
            "--checkpoint",
            s(&ckpt),
            "--text",
            "be ge se",
            "--lexicon",
            s(&f.join("lexicon.tsv")),
            "--polarity",
            polarity,
            "--out-dir",
            s(&out),
            "--name",
            name,
        ])
    };
    let o = synth("a", "-1");
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<String> = stdout(&o).lines().map(str::to_string).collect();
    assert_eq!(lines[0], "label\tsource\ttotal_frames");
    let row: Vec<&str> = lines[1].split('\t').collect();
    assert_eq!(&row[..2], ["-1", "forced"]);
    assert!(row[2].parse::<usize>().unwrap() >= 8);
    assert!(synth("b", "-1").status.success());
    for ext in ["mel", "wav", "png"] {
        let a = fs::read(out.join(format!("a.{ext}"))).unwrap();
        assert_eq!(a, fs::read(out.join(format!("b.{ext}"))).unwrap(), "{ext} differs");
    }
    let wav = wav_format(&out.join("a.wav"));
    assert_eq!(wav, (1, 22050, 16));

    let o = emspeech(&[
        "synth",
        "--checkpoint",
        s(&ckpt),
        "--phonemes",
        "b e qq",
        "--out-dir",
        s(&out),
        "--no-wav",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("warning\tunknown\t1"), "{}", stderr(&o));
    assert!(stdout(&o).lines().nth(1).unwrap().contains("\tpredicted\t"));

    let o = emspeech(&[
        "synth",
        "--checkpoint",
        s(&ckpt),
        "--phonemes",
        "b e",
        "--speaker",
        "nobody",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error\tspeaker\t"), "{}", stderr(&o));

    let o = emspeech(&[
        "eval-classifier",
        "--checkpoint",
        s(&ckpt),
        "--data-dir",
        s(&data),
        "--part",
        "train",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("total\t20\n"));
    let o = emspeech(&["eval-classifier", "--checkpoint", s(&ckpt), "--data-dir", s(&data)]);
    assert_eq!(o.status.code(), Some(1), "empty test split must fail");

    let o = emspeech(&[
        "probe-control",
        "--checkpoint",
        s(&ckpt),
        "--lexicon",
        s(&f.join("lexicon.tsv")),
        "--texts",
        s(&f.join("probe.txt")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("texts\t20\n"));
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(prepare(&data, &[]).status.success());
    let full = dir.path().join("full");
    assert!(train(&data, &full, 20, None).status.success());
    let part = dir.path().join("part");
    assert!(train(&data, &part, 10, None).status.success());
    let first = part.join("checkpoint.ckpt");
    let moved = dir.path().join("at10.ckpt");
    fs::rename(&first, &moved).unwrap();
    let o = train(&data, &part, 20, Some(&moved));
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(full.join("checkpoint.ckpt")).unwrap(),
        fs::read(part.join("checkpoint.ckpt")).unwrap()
    );
    assert_eq!(
        fs::read_to_string(full.join("train_log.tsv")).unwrap().lines().last(),
        fs::read_to_string(part.join("train_log.tsv")).unwrap().lines().last()
    );
}

#[test]
fn cache_root_follows_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("elsewhere");
    let out = dir.path().join("data");
    let o = prepare(&out, &[("EMSPEECH_CACHE", &cache)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(cache.join("toy000.feat").exists());
    assert!(!out.join("features").exists());
}

/// (channels, rate, bits) from a WAV header.
fn wav_format(path: &Path) -> (u16, u32, u16) {
    let b = fs::read(path).unwrap();
    assert_eq!(&b[..4], b"RIFF");
    let u16_at = |i: usize| u16::from_le_bytes([b[i], b[i + 1]]);
    let u32_at = |i: usize| u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]]);
    (u16_at(22), u32_at(24), u16_at(34))
}
