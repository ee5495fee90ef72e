//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fail.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use chips_cli::checks::{run_check, Scale, CHECKS};

const BIN: &str = env!("CARGO_BIN_EXE_chips");

fn chips(args: &[&str]) -> Result<(), String> {
    let out = Command::new(BIN).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "chips {} exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn read(p: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()))
}

/// Two complete `score` + `select` runs through the binary, with 1 and 4
/// workers, compared byte for byte.
fn cli_determinism() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let s = |name: &str| d.join(name).to_string_lossy().into_owned();
    chips(&["synth", "--out", &s(""), "--seed", "7"])?;
    let mut outputs = Vec::new();
    for (run, workers) in [("a", "1"), ("b", "4"), ("c", "4")] {
        let scores = s(&format!("{run}.chsc"));
        let manifest = s(&format!("{run}.manifest"));
        chips(&[
            "score", "--config", &s("config.toml"), "--pool", &s("pool.chfs"), "--eval", &s("eval.chfs"),
            "--params", &s("params.chep"), "--trajectory", &s("trajectory.chtj"), "--out", &scores,
            "--workers", workers,
        ])?;
        chips(&["select", "--scores", &scores, "--out", &manifest, "--config", &s("config.toml")])?;
        outputs.push([
            read(&d.join(format!("{run}.chsc")))?,
            read(&d.join(format!("{run}.chcv")))?,
            read(&d.join(format!("{run}.manifest")))?,
        ]);
    }
    if outputs[1] != outputs[0] || outputs[2] != outputs[0] {
        return Err("score, surrogate or manifest bytes differ between runs".into());
    }
    Ok(format!("3 runs, {} bytes each identical", outputs[0].iter().map(Vec::len).sum::<usize>()))
}

fn main() {
    let mut failed = 0;
    for check in CHECKS.iter().filter(|c| c.primary) {
        match run_check(check, Scale::Full) {
            Ok(rep) => {
                failed += usize::from(!rep.passed);
                println!("{rep}");
            }
            Err(e) => {
                failed += 1;
                println!("FAIL {} (error: {e})", check.name);
            }
        }
    }
    let start = Instant::now();
    match cli_determinism() {
        Ok(msg) => println!("PASS determinism-cli {msg} seconds={:.2}", start.elapsed().as_secs_f64()),
        Err(e) => {
            failed += 1;
            println!("FAIL determinism-cli ({e})");
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
