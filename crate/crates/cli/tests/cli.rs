use std::path::Path;
use std::process::{Command, Output};

fn texbridge(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_texbridge"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("TEXBRIDGE_DATA_DIR")
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: [&str; 4] = ["--override", "dataset.phone_ids=20", "--override", "dataset.studio_ids=16"];

#[test]
fn config_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    for bad in ["bogus.key=1", "dataset.master_seed=3", "colorxform.k=0"] {
        let o = texbridge(dir.path(), &["gen-data", "--override", bad]);
        assert_eq!(o.status.code(), Some(2), "{bad}: {}", stderr(&o));
    }
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, "schema_version = 99\n").unwrap();
    let o = texbridge(dir.path(), &["gen-data", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn missing_upstream_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let o = texbridge(dir.path(), &["infer"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("gen_data"), "{}", stderr(&o));

    let mut args = vec!["gen-data"];
    args.extend(SMALL);
    assert!(texbridge(dir.path(), &args).status.success());
    let mut args = vec!["infer"];
    args.extend(SMALL);
    let o = texbridge(dir.path(), &args);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("`invert`"), "{}", stderr(&o));

    // the dataset was made with other sizes, so under the defaults it is stale
    let o = texbridge(dir.path(), &["pretrain-phone"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("`gen_data`"), "{}", stderr(&o));
}

#[test]
fn tampered_artifact_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["gen-data"];
    args.extend(SMALL);
    assert!(texbridge(dir.path(), &args).status.success());
    let again = texbridge(dir.path(), &args);
    assert!(again.status.success());

    let manifest = dir.path().join("data/manifest.json");
    let mut bytes = std::fs::read(&manifest).unwrap();
    bytes.push(b'\n');
    std::fs::write(&manifest, bytes).unwrap();
    let o = texbridge(dir.path(), &args);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("hash"), "{}", stderr(&o));
}

#[test]
fn gen_data_is_deterministic_and_skipped_when_current() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut args = vec!["gen-data"];
    args.extend(SMALL);
    for d in [&a, &b] {
        assert!(texbridge(d.path(), &args).status.success());
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("data/manifest.json")).unwrap();
    assert_eq!(read(&a), read(&b));

    let o = Command::new(env!("CARGO_BIN_EXE_texbridge")).args(&args).arg("--out").arg(a.path()).env("RUST_LOG", "info").output().unwrap();
    assert!(stderr(&o).contains("up to date"), "{}", stderr(&o));
}

#[test]
fn defaults_command_prints_a_loadable_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = texbridge(dir.path(), &["defaults"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let table: toml::Table = text.parse().unwrap();
    assert!(table.contains_key("diffusion") && table.contains_key("finetune"));
}
