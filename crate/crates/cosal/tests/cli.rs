//! End-to-end checks of the command-line surface on a tiny dataset.

use std::fs;
use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cosal"))
}

fn gen(dir: &Path) {
    let out = bin()
        .args(["gen-data", "--classes", "4", "--per-class", "6", "--size", "32", "--seed", "3"])
        .arg("--out")
        .arg(dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn full_cli_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data);
    assert!(data.join("manifest.csv").is_file());
    assert!(data.join("train/disk/0.ppm").is_file());
    assert!(data.join("eval").is_dir());

    let ckpt = tmp.path().join("model.gckp");
    let loss = tmp.path().join("loss.csv");
    let out = bin()
        .args(["train", "--epochs", "1", "--k", "2", "--lr", "1e-3", "--seed", "1"])
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&ckpt)
        .arg("--loss-csv")
        .arg(&loss)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ckpt.is_file());
    let log = fs::read_to_string(&loss).unwrap();
    assert!(log.starts_with("step,l_sal,l_ctm,l_cls,total\n"));

    let report = tmp.path().join("report.csv");
    let out = bin()
        .args(["eval", "--split", "eval"])
        .arg("--ckpt")
        .arg(&ckpt)
        .arg("--data")
        .arg(&data)
        .arg("--report")
        .arg(&report)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("group,n_images,Emax,S,Fmax,MAE\n"));
    assert!(csv.lines().any(|l| l.starts_with("ALL,")));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("group") && table.contains("ALL"));

    let group_dir = data.join("eval/ring");
    let sal_dir = tmp.path().join("sal");
    let out = bin()
        .arg("infer")
        .arg("--ckpt")
        .arg(&ckpt)
        .arg("--group")
        .arg(&group_dir)
        .arg("--out")
        .arg(&sal_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let maps: Vec<_> = fs::read_dir(&sal_dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().to_string_lossy().ends_with(".sal.pgm"))
        .collect();
    assert_eq!(maps.len(), 6, "one map per input image");

    let att_dir = tmp.path().join("att");
    let out = bin()
        .arg("dump-attention")
        .arg("--ckpt")
        .arg(&ckpt)
        .arg("--group")
        .arg(&group_dir)
        .arg("--out")
        .arg(&att_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sidecar = fs::read_to_string(att_dir.join("0.att.txt")).unwrap();
    assert!(sidecar.starts_with("min=") && sidecar.contains("max="));
    assert!(att_dir.join("0.att.pgm").is_file());

    let cons = tmp.path().join("consensus.csv");
    let out = bin()
        .args(["export-consensus", "--split", "train"])
        .arg("--ckpt")
        .arg(&ckpt)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&cons)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(&cons).unwrap();
    assert!(csv.starts_with("group_id,sub_batch,c0"));
    assert!(csv.lines().last().unwrap().starts_with("# d1="));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("ratio="));
}

#[test]
fn errors_are_one_line_and_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["eval", "--ckpt", "/nonexistent.gckp"])
        .arg("--data")
        .arg(tmp.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: "), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");

    // bad gen-data arguments are rejected up front
    let out = bin()
        .args(["gen-data", "--classes", "1", "--per-class", "1", "--size", "32", "--seed", "0"])
        .arg("--out")
        .arg(tmp.path().join("x"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
}
