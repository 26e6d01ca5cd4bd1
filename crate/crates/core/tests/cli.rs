use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use adaptformer::checkpoint::Checkpoint;
use adaptformer::harness::RunReport;

const TINY: &str = "\
image_size = 8
patch_size = 4
embed_dim = 8
depth = 1
num_heads = 2
mlp_ratio = 2
epochs = 2
warmup_epochs = 1
batch_size = 16
base_lr = 0.5
train_samples = 64
eval_samples = 32
";

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adaptformer")).args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn run_dir(out: &Output) -> PathBuf {
    let stdout = String::from_utf8_lossy(&out.stdout);
    let line = stdout.lines().find_map(|l| l.strip_prefix("run directory: ")).unwrap_or_else(|| {
        panic!("no run directory in {stdout:?}; stderr {}", String::from_utf8_lossy(&out.stderr))
    });
    PathBuf::from(line)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pretrain(tmp: &Path) -> PathBuf {
    let cfg = write(tmp, "pre.txt", TINY);
    let out = bin(&["pretrain", "--config", s(&cfg), "--out", s(&tmp.join("runs"))]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    run_dir(&out).join("backbone.ckpt")
}

#[test]
fn pretrain_finetune_export() {
    let tmp = tempfile::tempdir().unwrap();
    let backbone = pretrain(tmp.path());
    let runs = tmp.path().join("runs");
    let cfg = write(
        tmp.path(),
        "ft.txt",
        &format!("{TINY}shift = label-regroup\nmode = adaptformer\nmid_dim = 2\nbackbone = {}\n", backbone.display()),
    );
    let out = bin(&["finetune", "--config", s(&cfg), "--out", s(&runs), "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = run_dir(&out);
    assert!(dir.file_name().unwrap().to_str().unwrap().contains("seed3"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("unchanged"));
    let resolved = fs::read_to_string(dir.join("config.txt")).unwrap();
    assert!(resolved.contains("seed = 3") && resolved.contains("mid_dim = 2"));
    let report = RunReport::read_csv(&dir.join("finetune.csv"), "adaptformer").unwrap();
    assert_eq!(report.rows.len(), 2);
    let delta = dir.join("delta.ckpt");
    assert!(Checkpoint::load(&delta).unwrap().names().all(|n| !n.starts_with("blocks.0.attn")));

    let mut exports = Vec::new();
    for _ in 0..2 {
        let out = bin(&["export-features", "--checkpoint", s(&delta), "--out", s(&runs)]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        exports.push(fs::read(run_dir(&out).join("features.csv")).unwrap());
    }
    assert_eq!(exports[0], exports[1]);
    let text = String::from_utf8(exports.pop().unwrap()).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 1 + 32);
    assert!(rows.iter().all(|r| r.split(',').count() == 1 + 8));
}

#[test]
fn pretrain_is_reproducible_and_never_overwrites() {
    let tmp = tempfile::tempdir().unwrap();
    let a = pretrain(tmp.path());
    let b = pretrain(tmp.path());
    assert_ne!(a, b);
    assert_eq!(Checkpoint::load(&a).unwrap().digest(), Checkpoint::load(&b).unwrap().digest());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn sweep_writes_merged_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let backbone = pretrain(tmp.path());
    let cfg = write(
        tmp.path(),
        "sw.txt",
        &format!("{TINY}epochs = 1\nmode = vpt\nbackbone = {}\n", backbone.display()).replacen("epochs = 2\n", "", 1),
    );
    let out = bin(&["sweep", "--config", s(&cfg), "--axis", "prompt_tokens", "--values", "1,2", "--out", s(&tmp.path().join("runs"))]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(run_dir(&out).join("sweep.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "prompt_tokens,epoch,lr,train_loss,eval_top1,tunable_params,wall_ms");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,0,") && lines[2].starts_with("2,0,"));
}

#[test]
fn census_prints_vit_base_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "c.txt",
        "image_size = 224\npatch_size = 16\nembed_dim = 768\ndepth = 12\nnum_heads = 12\nnum_classes = 174\nmode = adaptformer\nmid_dim = 64\n",
    );
    let out = bin(&["census", "--config", s(&cfg), "--out", s(&tmp.path().join("runs"))]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains(",1323438\n"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = tmp.path().join("runs");
    let unknown = write(tmp.path(), "u.txt", "epochz = 3\n");
    let out = bin(&["pretrain", "--config", s(&unknown), "--out", s(&runs)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));

    let no_backbone = write(tmp.path(), "nb.txt", TINY);
    let out = bin(&["finetune", "--config", s(&no_backbone), "--mode", "linear", "--out", s(&runs)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("backbone"));

    let mismatch = write(tmp.path(), "mm.txt", "mode = linear\nmid_dim = 4\n");
    assert_eq!(bin(&["finetune", "--config", s(&mismatch), "--out", s(&runs)]).status.code(), Some(2));

    let empty = write(tmp.path(), "e.txt", &format!("{TINY}backbone = x.ckpt\nmode = adaptformer\n"));
    assert_eq!(bin(&["sweep", "--config", s(&empty), "--axis", "mid_dim", "--out", s(&runs)]).status.code(), Some(2));

    let missing = tmp.path().join("absent.txt");
    assert_eq!(bin(&["pretrain", "--config", s(&missing), "--out", s(&runs)]).status.code(), Some(3));

    let garbage = write(tmp.path(), "g.ckpt", "not a checkpoint");
    assert_eq!(bin(&["export-features", "--checkpoint", s(&garbage), "--out", s(&runs)]).status.code(), Some(3));

    let explode = write(tmp.path(), "nan.txt", &TINY.replace("base_lr = 0.5", "base_lr = 1e300"));
    let out = bin(&["pretrain", "--config", s(&explode), "--out", s(&runs)]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));

    assert_eq!(bin(&["no-such-command"]).status.code(), Some(2));
}
