use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn egiinet(args: &[&str], dir: &Path, seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_egiinet"));
    cmd.args(args).current_dir(dir).env_remove("EGIINET_SEED");
    if let Some(s) = seed_env {
        cmd.env("EGIINET_SEED", s);
    }
    cmd.output().unwrap()
}

#[test]
fn usage_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&[][..], &["frobnicate"], &["train", "--bogus"], &["train", "--variant", "no_everything"]] {
        let out = egiinet(args, dir.path(), None);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains("Usage") || err.contains("--help"), "{args:?}: {err}");
    }
}

#[test]
fn runtime_errors_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = egiinet(&["train", "--preset", "tiny"], dir.path(), None);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest"));
    let out = egiinet(&["eval", "--checkpoint", "missing"], dir.path(), None);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn generate_data_is_deterministic_and_seed_precedence_holds() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let gen = |out: &str, seed: Option<&str>, env: Option<&str>| {
        let mut args = vec!["generate-data", "--preset", "tiny", "--train", "3", "--val", "2", "--out", out];
        if let Some(s) = seed {
            args.extend(["--seed", s]);
        }
        assert!(egiinet(&args, p, env).status.success());
        fs::read(p.join(out).join("manifest.tsv")).unwrap()
    };
    let a = gen("a", Some("7"), None);
    assert_eq!(a, gen("b", Some("7"), None));
    assert_eq!(a, gen("c", Some("7"), Some("9")));
    assert_eq!(a, gen("d", None, Some("7")));
    assert_ne!(a, gen("e", None, Some("9")));
    assert_eq!(fs::read(p.join("a/view/t00000.png")).unwrap(), fs::read(p.join("b/view/t00000.png")).unwrap());
}

#[test]
fn train_eval_and_visualize_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let ok = |args: &[&str]| {
        let out = egiinet(args, p, None);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out
    };
    ok(&["generate-data", "--preset", "tiny", "--train", "6", "--val", "3", "--out", "data"]);
    ok(&["train", "--preset", "tiny", "--epochs", "2", "--manifest", "data", "--out", "run"]);
    for f in ["manifest.txt", "params.bin", "optim.bin", "config.toml"] {
        assert!(p.join("run/checkpoint").join(f).is_file(), "{f}");
    }
    assert_eq!(fs::read_to_string(p.join("run/metrics.csv")).unwrap().lines().count(), 4);

    let out = ok(&["eval", "--checkpoint", "run/checkpoint", "--out", "eval"]);
    let csv = fs::read_to_string(p.join("eval/eval.csv")).unwrap();
    assert_eq!(String::from_utf8_lossy(&out.stdout), csv);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,family,cd_l2_x1000,fscore");
    assert!(lines.last().unwrap().starts_with("full,average,"));

    ok(&["visualize-attention", "--checkpoint", "run/checkpoint", "--sample", "v00007", "--out", "viz"]);
    let img = egiinet_core::ImageView::load_png(&p.join("viz/attention_v00007.png")).unwrap();
    assert_eq!((img.height(), img.width()), (8, 16));

    let out = ok(&["ablate", "--preset", "tiny", "--epochs", "1", "--manifest", "data", "--variants", "full,no_image", "--out", "abl"]);
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("no_image,average,"));
    assert!(p.join("abl/no_image/checkpoint/params.bin").is_file());
}
