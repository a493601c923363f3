use std::path::Path;
use std::process::Command;

use eclf_cli::config::{parse_config, RunConfig};
use eclf_cli::{run, split_overrides};
use eclf_core::synthleaf::Preset;

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn kv(k: &str, v: &str) -> (String, String) {
    (k.to_string(), v.to_string())
}

#[test]
fn rendered_config_parses_back() {
    let mut cfg = RunConfig::default();
    cfg.set("data.preset", "synth3").unwrap();
    cfg.set("vae.beta", "4.5").unwrap();
    cfg.set("sweep.axis", "latent_dim").unwrap();
    cfg.set("sweep.values", "8,16,32").unwrap();
    let back = parse_config(None, Some(&cfg.render()), &[], None).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.render(), cfg.render());
}

#[test]
fn overrides_beat_seed_beat_file_beat_defaults() {
    let file = "vae.beta = 3\nvae.seed = 11\ndata.seed = 12\n";
    let cfg = parse_config(None, Some(file), &[], None).unwrap();
    assert_eq!((cfg.vae.beta, cfg.vae.seed, cfg.data.seed), (3.0, 11, 12));
    assert_eq!(cfg.vae.gamma, RunConfig::default().vae.gamma);

    let cfg = parse_config(None, Some(file), &[kv("vae.seed", "99"), kv("vae.beta", "6")], Some(5)).unwrap();
    assert_eq!((cfg.vae.beta, cfg.vae.seed, cfg.data.seed, cfg.classifier.seed), (6.0, 99, 5, 5));
}

#[test]
fn config_file_is_read_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("run.conf");
    std::fs::write(&p, "# comment\ndata.preset = synth4\n").unwrap();
    let cfg = parse_config(Some(&p), None, &[], None).unwrap();
    assert_eq!(cfg.data.preset, Some(Preset::Synth4));
    let err = parse_config(Some(&dir.path().join("nope.conf")), None, &[], None).unwrap_err().to_string();
    assert!(err.contains("nope.conf"), "{err}");
}

#[test]
fn unknown_keys_and_bad_values_are_named() {
    let err = parse_config(None, Some("vae.betta = 2\n"), &[], None).unwrap_err().to_string();
    assert!(err.contains("vae.betta"), "{err}");
    let err = parse_config(None, None, &[kv("nosuch.key", "1")], None).unwrap_err().to_string();
    assert!(err.contains("nosuch.key"), "{err}");
    let err = parse_config(None, None, &[kv("vae.batch_size", "many")], None).unwrap_err().to_string();
    assert!(err.contains("vae.batch_size"), "{err}");
}

#[test]
fn split_overrides_accepts_both_forms() {
    let (rest, ov) = split_overrides(strings(&["eclf", "--vae.beta", "4", "train-vae", "--data.seed=3", "--seed", "2"])).unwrap();
    assert_eq!(rest, strings(&["eclf", "train-vae", "--seed", "2"]));
    assert_eq!(ov, vec![kv("vae.beta", "4"), kv("data.seed", "3")]);
    assert!(split_overrides(strings(&["eclf", "--vae.beta"])).is_err());
}

#[test]
fn usage_errors_come_from_clap() {
    assert!(run(strings(&["eclf", "no-such-command"])).is_err());
    assert!(run(strings(&["eclf", "train-vae", "--bogus"])).is_err());
}

#[test]
fn gen_data_requires_a_preset() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let err = run(strings(&["eclf", "gen-data", "--out", out])).unwrap().unwrap_err().to_string();
    assert!(err.contains("data.preset"), "{err}");
    assert!(std::fs::read_dir(dir.path()).unwrap().next().is_none(), "no run directory on failure");
}

#[test]
fn stages_name_their_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let err = run(strings(&["eclf", "train-vae", "--out", out])).unwrap().unwrap_err().to_string();
    assert!(err.contains("missing artifact") && err.contains("gen-data"), "{err}");

    let made = run(strings(&[
        "eclf",
        "gen-data",
        "--out",
        out,
        "--data.preset",
        "synth2",
        "--data.train_per_class",
        "4",
        "--data.val_per_class",
        "2",
        "--data.test_per_class",
        "2",
    ]))
    .unwrap()
    .unwrap();
    assert!(made.run_dir.join("dataset/manifest.csv").exists());
    assert!(made.run_dir.join("config.txt").exists());
    let err = run(strings(&["eclf", "explain", "--out", out])).unwrap().unwrap_err().to_string();
    assert!(err.contains("missing artifact") && err.contains("train-vae"), "{err}");
    let err = run(strings(&["eclf", "train-cls", "--out", out, "--vae", "/nonexistent/vae.ckpt"]))
        .unwrap()
        .unwrap_err()
        .to_string();
    assert!(err.contains("/nonexistent/vae.ckpt"), "{err}");
}

fn eclf(out: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_eclf"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("ECLF_OUT")
        .output()
        .unwrap()
}

#[test]
fn binary_reports_errors_with_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = eclf(dir.path(), &["gen-data"]);
    assert_eq!(o.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("error:") && stderr.contains("data.preset"), "{stderr}");

    let o = eclf(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));

    let o = eclf(
        dir.path(),
        &[
            "gen-data",
            "--data.preset",
            "synth3",
            "--data.train_per_class",
            "2",
            "--data.val_per_class",
            "1",
            "--data.test_per_class",
            "1",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let printed = String::from_utf8_lossy(&o.stdout);
    assert!(Path::new(printed.trim()).join("dataset").is_dir(), "{printed}");
}
