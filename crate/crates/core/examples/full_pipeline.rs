//! The whole command-line pipeline on a small dataset: data, preference
//! model, common direction, supervised and reward fine-tuning, evaluation.
//!
//!     cargo run --release --example full_pipeline -- [runs_dir]

use std::path::{Path, PathBuf};

use longalign::cli;

fn newest(runs: &Path, command: &str) -> String {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(runs)
        .expect("runs directory exists")
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with(&format!("{command}-20"))))
        .collect();
    dirs.sort();
    dirs.pop().expect("command produced a run").to_string_lossy().into_owned()
}

fn run(runs: &str, args: &[&str]) {
    println!("\n$ longalign {}", args.join(" "));
    let mut argv = vec!["longalign", "--runs", runs];
    argv.extend_from_slice(args);
    let code = cli::dispatch(argv);
    if code != 0 {
        std::process::exit(code);
    }
}

fn main() {
    let root = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("longalign-runs"));
    let r = root.to_string_lossy().into_owned();
    run(&r, &["gen-data", "--n", "1200", "--seed", "1"]);
    let data = newest(&root, "gen-data");
    run(&r, &["train-pref", "--data", &data, "--steps", "300"]);
    let pref = format!("{}/pref.ckpt", newest(&root, "train-pref"));
    run(&r, &["fit-direction", "--pref", &pref, "--data", &data]);
    let dir = format!("{}/direction.ckpt", newest(&root, "fit-direction"));
    run(&r, &["train-sft", "--data", &data, "--steps", "600"]);
    let sft = format!("{}/sft.ckpt", newest(&root, "train-sft"));
    run(&r, &["train-rft", "--sft", &sft, "--pref", &pref, "--direction", &dir, "--data", &data, "--updates", "100"]);
    let rft = format!("{}/rft.ckpt", newest(&root, "train-rft"));
    run(&r, &["eval-retrieval", "--pref", &pref, "--direction", &dir, "--data", &data, "--caps", "1,2,4"]);
    for model in [&sft, &rft] {
        run(&r, &["eval-scores", "--pref", &pref, "--direction", &dir, "--data", &data, "--n", "32", "--model", model]);
    }
    run(&r, &["sample", "--model", &rft, "--data", &data, "--n", "4"]);
    run(&r, &["align-report", "--pref", &pref, "--data", &data, "--index", "0"]);
}
