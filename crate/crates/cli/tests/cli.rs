use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use coughwatch_core::synth::{burst_clip, silence, tone};
use coughwatch_core::{encode_wav, ModelWeights};
use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_coughwatch"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn coughwatch")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Self { dir: TempDir::new().unwrap() };
        let mut positive = ModelWeights::seeded(1, (40, 267));
        positive.dense.bias = 20.0;
        std::fs::write(f.path("positive.cghw"), positive.to_bytes()).unwrap();
        std::fs::write(f.path("burst.wav"), encode_wav(&burst_clip(5.0, 2.3, 0.2, 42))).unwrap();
        std::fs::write(f.path("silence.wav"), encode_wav(&silence(5.0))).unwrap();
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }
}

#[test]
fn budget_all_prints_ten_rows() {
    let o = run(&["budget", "--all", "--csv"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 11);
    assert!(lines[0].starts_with("frame_ms,overlap_pct"));
    assert_eq!(lines[6], "35,25,26.25,39,1560,6.09375,14.49375");
}

#[test]
fn budget_single_row_and_model_section() {
    let o = run(&["budget", "--frame-ms", "35", "--overlap", "0"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("4.53125"));
    assert!(text.contains("parameters            16561"));
    assert!(text.contains("published 16.25 KB"));
    let o = run(&["budget", "--json"]);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["model"]["mac_count"], 4_575_640);
    assert_eq!(v["features"][0]["n_frames"], 267);
}

#[test]
fn budget_rejects_fractional_hop() {
    let o = run(&["budget", "--frame-ms", "3", "--overlap", "10"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("whole-sample hop"));
}

#[test]
fn detect_exit_codes() {
    let f = Fixture::new();
    let o = run(&["detect", &f.arg("burst.wav"), "--weights", &f.arg("positive.cghw")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["events"].as_array().unwrap().len(), 1);
    assert_eq!(v["segment_count"], 5);

    let o = run(&["detect", &f.arg("silence.wav"), "--weights", &f.arg("positive.cghw")]);
    assert_eq!(code(&o), 1);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v["events"].as_array().unwrap().is_empty());

    let missing = f.arg("missing.cghw");
    let o = run(&["detect", &f.arg("burst.wav"), "--weights", &missing]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains(&missing));

    let o = run(&["detect", &f.arg("burst.wav")]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no weights"));
}

#[test]
fn detect_reports_bad_audio_with_path() {
    let f = Fixture::new();
    std::fs::write(f.path("junk.wav"), b"RIFF\x10\x00\x00\x00WAVEjunk").unwrap();
    let o = run(&["detect", &f.arg("junk.wav"), "--weights", &f.arg("positive.cghw")]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("junk.wav"), "{}", stderr(&o));
}

#[test]
fn detect_from_stdin_matches_file() {
    let f = Fixture::new();
    let from_file = run(&["detect", &f.arg("burst.wav"), "--weights", &f.arg("positive.cghw")]);
    let o = bin()
        .args(["detect", "-", "--weights", &f.arg("positive.cghw")])
        .stdin(Stdio::from(std::fs::File::open(f.path("burst.wav")).unwrap()))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let a: Value = serde_json::from_str(&stdout(&from_file)).unwrap();
    let b: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(a["events"], b["events"]);
    assert_eq!(b["source"], "-");
}

#[test]
fn featurize_binary_layout() {
    let f = Fixture::new();
    std::fs::write(f.path("one.wav"), encode_wav(&tone(1.0, 440.0, 0.3))).unwrap();
    let o = run(&["featurize", &f.arg("one.wav")]);
    assert_eq!(code(&o), 0);
    let b = &o.stdout;
    assert_eq!(b.len(), 16 + 40 * 267 * 4);
    assert_eq!(&b[..4], b"MFC1");
    let u = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().unwrap());
    assert_eq!((u(4), u(8), u(12)), (40, 267, 0));
    assert!(b[16..].chunks_exact(4).all(|c| f32::from_le_bytes(c.try_into().unwrap()).is_finite()));

    let o = run(&["featurize", &f.arg("burst.wav"), "--frame-ms", "35", "--overlap", "0", "-o", &f.arg("out.bin")]);
    assert_eq!(code(&o), 0);
    let bytes = std::fs::read(f.path("out.bin")).unwrap();
    let per = 16 + 40 * 29 * 4;
    assert_eq!(bytes.len(), 5 * per);
    assert_eq!(u32::from_le_bytes(bytes[4 * per + 12..4 * per + 16].try_into().unwrap()), 4);
}

#[test]
fn featurize_json_and_raw() {
    let f = Fixture::new();
    std::fs::write(f.path("one.wav"), encode_wav(&tone(1.0, 440.0, 0.3))).unwrap();
    let cooked: Value = serde_json::from_slice(&run(&["featurize", &f.arg("one.wav"), "--format", "json"]).stdout).unwrap();
    let raw: Value = serde_json::from_slice(&run(&["featurize", &f.arg("one.wav"), "--format", "json", "--raw"]).stdout).unwrap();
    assert_eq!(cooked[0]["n_frames"], 267);
    assert_eq!(cooked[0]["coefficients"].as_array().unwrap().len(), 40);
    assert_eq!(cooked[0]["coefficients"][0].as_array().unwrap().len(), 267);
    assert_ne!(cooked, raw);
}

fn labels(dir: &Path, weights: &str, clips: &[String]) -> Vec<bool> {
    clips
        .iter()
        .map(|c| {
            let o = run(&["detect", &dir.join(c).display().to_string(), "--weights", weights]);
            assert!(code(&o) < 2, "{}", stderr(&o));
            code(&o) == 0
        })
        .collect()
}

#[test]
fn quantized_weights_agree_on_fixture_clips() {
    let f = Fixture::new();
    let o = run(&["init-weights", "--seed", "5", "--out", &f.arg("float.cghw")]);
    assert_eq!(code(&o), 0);
    let o = run(&["quantize", &f.arg("float.cghw"), &f.arg("int8.cghw")]);
    assert_eq!(code(&o), 0);
    assert!(std::fs::metadata(f.path("int8.cghw")).unwrap().len() < std::fs::metadata(f.path("float.cghw")).unwrap().len() / 3);

    let mut clips = Vec::new();
    for i in 0..12u64 {
        let name = format!("clip{i}.wav");
        let mut s = silence(2.0);
        if i % 3 != 0 {
            coughwatch_core::synth::add_burst(&mut s, 0.1 * i as f64, 0.05 + 0.02 * i as f64, i);
        }
        std::fs::write(f.path(&name), encode_wav(&s)).unwrap();
        clips.push(name);
    }
    let a = labels(f.dir.path(), &f.arg("float.cghw"), &clips);
    let b = labels(f.dir.path(), &f.arg("int8.cghw"), &clips);
    let agree = a.iter().zip(&b).filter(|(x, y)| x == y).count();
    assert!(agree * 100 >= 98 * clips.len(), "{agree}/{}", clips.len());
}

#[test]
fn evaluate_manifest() {
    let f = Fixture::new();
    std::fs::write(f.path("manifest.csv"), "path,label\nburst.wav,cough\nsilence.wav,not-cough\n").unwrap();
    let args = |jobs: &str| {
        run(&["evaluate", &f.arg("manifest.csv"), "--weights", &f.arg("positive.cghw"), "--jobs", jobs])
    };
    let o = args("1");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["report"]["counts"], serde_json::json!({"tp": 1, "tn": 1, "fp": 0, "fn": 0}));
    assert_eq!(v["report"]["sensitivity"], 1.0);
    assert!(v["report"]["f1"].is_number());
    assert!(stderr(&o).contains("sensitivity  100.00%"));
    assert_eq!(stdout(&args("3")), stdout(&o));

    std::fs::write(f.path("bad.csv"), "burst.wav,maybe\n").unwrap();
    let o = run(&["evaluate", &f.arg("bad.csv"), "--weights", &f.arg("positive.cghw")]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 1"));
}

#[test]
fn config_dump_reloads_and_flags_override() {
    let f = Fixture::new();
    let o = run(&["detect", "x.wav", "--dump-config", "--frame-ms", "35", "--overlap", "0", "--tail", "0.3"]);
    assert_eq!(code(&o), 0);
    let dumped = stdout(&o);
    std::fs::write(f.path("c.conf"), &dumped).unwrap();
    let again = run(&["detect", "x.wav", "--dump-config", "--config", &f.arg("c.conf")]);
    assert_eq!(stdout(&again), dumped);
    let o = run(&["detect", "x.wav", "--dump-config", "--config", &f.arg("c.conf"), "--tail", "0.5"]);
    assert!(stdout(&o).contains("tail_s = 0.5"));
    assert!(stdout(&o).contains("mfcc.frame_length_ms = 35"));

    std::fs::write(f.path("bad.conf"), "mfcc.frame_length_ms = 35\nnot_a_key = 1\n").unwrap();
    let o = run(&["detect", "x.wav", "--config", &f.arg("bad.conf")]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 2"));
}

#[test]
fn feature_shape_must_match_weights() {
    let f = Fixture::new();
    // weights for 35 ms frames used with the default 5 ms configuration
    let o = run(&["init-weights", "--n-frames", "29", "--out", &f.arg("w35.cghw")]);
    assert_eq!(code(&o), 0);
    let o = run(&["detect", &f.arg("burst.wav"), "--weights", &f.arg("w35.cghw")]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("(40, 29)"));
    let o = run(&["detect", &f.arg("burst.wav"), "--weights", &f.arg("w35.cghw"), "--frame-ms", "35", "--overlap", "0"]);
    assert!(code(&o) < 2, "{}", stderr(&o));
}
