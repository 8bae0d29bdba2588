//! Binary-level checks: flag parsing, config rejection paths, error
//! reporting, and the synth command's artifact layout.

use std::path::Path;
use std::process::{Command, Output};

fn modalsurv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_modalsurv"))
        .args(args)
        .output()
        .expect("spawning modalsurv")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn help_lists_every_command() {
    let out = modalsurv(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout).to_lowercase();
    for cmd in ["synth", "pretrain", "train", "evaluate", "ablate"] {
        assert!(text.contains(cmd), "help output is missing {cmd}");
    }
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.toml", "retry_count = 3\n");
    let out = modalsurv(&["--config", &cfg, "synth"]);
    assert!(!out.status.success());
    assert!(
        stderr_of(&out).contains("retry_count"),
        "error should name the unknown key: {}",
        stderr_of(&out)
    );
}

#[test]
fn tiny_cohort_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "cfg.toml",
        &format!(
            "out_dir = \"{}\"\n[synth]\nn = 4\n",
            dir.path().join("cohort").display()
        ),
    );
    let out = modalsurv(&["--config", &cfg, "synth"]);
    assert!(!out.status.success());
    assert!(
        stderr_of(&out).contains("need at least"),
        "unexpected error: {}",
        stderr_of(&out)
    );
}

#[test]
fn missing_manifest_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "cfg.toml",
        &format!(
            "manifest = \"{0}/nowhere/manifest.json\"\nout_dir = \"{0}/run\"\n",
            dir.path().display()
        ),
    );
    let out = modalsurv(&["--config", &cfg, "pretrain"]);
    assert!(!out.status.success());
    assert!(
        stderr_of(&out).contains("manifest"),
        "unexpected error: {}",
        stderr_of(&out)
    );
}

#[test]
fn missing_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = dir.path().join("cohort");
    let cfg = write_config(
        dir.path(),
        "cfg.toml",
        &format!(
            "manifest = \"{m}\"\nout_dir = \"{o}\"\n[synth]\nn = 10\nvolume_shape = [4, 8, 8]\ngene_count = 20\n",
            m = cohort.join("manifest.json").display(),
            o = dir.path().join("run").display(),
        ),
    );
    let synth_cfg = write_config(
        dir.path(),
        "synth.toml",
        &format!(
            "out_dir = \"{}\"\n[synth]\nn = 10\nvolume_shape = [4, 8, 8]\ngene_count = 20\n",
            cohort.display()
        ),
    );
    let out = modalsurv(&["--config", &synth_cfg, "synth"]);
    assert!(out.status.success(), "{}", stderr_of(&out));

    let out = modalsurv(&["--config", &cfg, "evaluate"]);
    assert!(!out.status.success());
    assert!(
        stderr_of(&out).contains("checkpoint"),
        "unexpected error: {}",
        stderr_of(&out)
    );
}

#[test]
fn synth_emits_manifest_latents_and_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = dir.path().join("cohort");
    let cfg = write_config(
        dir.path(),
        "cfg.toml",
        &format!(
            "out_dir = \"{}\"\n[synth]\nn = 10\nvolume_shape = [4, 8, 8]\ngene_count = 20\n",
            cohort.display()
        ),
    );
    let out = modalsurv(&["--config", &cfg, "synth"]);
    assert!(out.status.success(), "{}", stderr_of(&out));

    let manifest = std::fs::read_to_string(cohort.join("manifest.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(parsed["patients"].as_array().unwrap().len(), 10);

    let latents = std::fs::read_to_string(cohort.join("latents.csv")).unwrap();
    assert_eq!(latents.lines().count(), 11, "header plus one latent per patient");
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut latents = Vec::new();
    for (name, seed) in [("a", "7"), ("b", "8"), ("c", "7")] {
        let cohort = dir.path().join(name);
        let cfg = write_config(
            dir.path(),
            &format!("{name}.toml"),
            &format!(
                "out_dir = \"{}\"\n[synth]\nn = 10\nvolume_shape = [4, 8, 8]\ngene_count = 20\n",
                cohort.display()
            ),
        );
        let out = modalsurv(&["--config", &cfg, "--seed", seed, "synth"]);
        assert!(out.status.success(), "{}", stderr_of(&out));
        latents.push(std::fs::read(cohort.join("latents.csv")).unwrap());
    }
    assert_ne!(latents[0], latents[1], "different seeds must change the cohort");
    assert_eq!(latents[0], latents[2], "equal seeds must reproduce the cohort");
}
