//! Command-line determinism: a full pipeline run twice must leave
//! byte-identical outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

/// The pipeline, in order; every path is relative to the run directory.
const STEPS: &[&[&str]] = &[
    &["synth", "--seed", "4", "--n", "4", "--size", "32", "--cells", "12,16", "--out", "raw"],
    &[
        "prepare", "--in", "raw", "--out", "prep", "--threshold", "0.05", "--input-frames", "2", "--gap", "1",
        "--output-frames", "1", "--test-fraction", "0.25", "--seed", "2",
    ],
    &["train", "--data", "prep", "--template", "smoke", "--max-epochs", "2", "--seed", "3", "--out", "run"],
    &["train", "--model", "unet", "--data", "prep", "--template", "smoke", "--max-epochs", "2", "--out", "unet"],
    &["eval", "--checkpoints", "run/checkpoint", "unet/checkpoint", "--data", "prep", "--out", "eval/metrics.csv"],
    &["sweep-layers", "--data", "prep", "--template", "smoke", "--depths", "1,2", "--max-epochs", "1", "--out", "sweep"],
    &["synth", "--kind", "clouds", "--seed", "6", "--n", "2", "--size", "32", "--out", "clouds"],
    &["prepare", "--in", "clouds", "--out", "cprep", "--mode", "cloud", "--test-fraction", "0.5"],
    &["train", "--data", "cprep", "--template", "smoke", "--max-epochs", "1", "--out", "crun"],
    &["uncertainty", "--checkpoint", "crun/checkpoint", "--data", "cprep", "--max-windows", "2", "--out", "unc"],
    &["params", "--template", "tiny", "--format", "csv", "--out", "params.csv"],
];

fn run_pipeline(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut stdout = Vec::new();
    for args in STEPS {
        let o = Command::new(env!("CARGO_BIN_EXE_aa-nowcast"))
            .args(*args)
            .current_dir(dir)
            .env_remove("AA_NOWCAST_SEED")
            .output()
            .unwrap();
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        stdout.extend(o.stdout);
    }
    let mut files = tree(dir);
    files.insert(PathBuf::from("<stdout>"), stdout);
    files
}

/// Every file except run manifests, which carry wall-clock times.
fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.to_string_lossy().ends_with("manifest.json") {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

pub fn determinism() -> String {
    let base = tempfile::tempdir().unwrap();
    let (a, b) = (base.path().join("a"), base.path().join("b"));
    fs::create_dir_all(&a).unwrap();
    fs::create_dir_all(&b).unwrap();
    let (ta, tb) = (run_pipeline(&a), run_pipeline(&b));
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>(), "different file sets");
    for (path, bytes) in &ta {
        assert!(bytes == &tb[path], "{} differs between reruns", path.display());
    }
    let csvs = ta.keys().filter(|p| p.extension().is_some_and(|e| e == "csv")).count();
    let dumps = ta.keys().filter(|p| p.extension().is_some_and(|e| e == "t32")).count();
    assert!(csvs >= 6 && dumps >= 2, "{csvs} csv files, {dumps} tensor dumps");

    // the uncertainty command ran without --k
    let unc = String::from_utf8(ta[Path::new("unc/uncertainty.csv")].clone()).unwrap();
    assert!(unc.lines().skip(1).all(|l| l.split(',').nth(2) == Some("20")), "{unc}");
    format!("{} commands, {} files identical ({csvs} CSV, {dumps} tensor dumps)", STEPS.len(), ta.len())
}
