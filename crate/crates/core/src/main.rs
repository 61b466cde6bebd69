use std::path::PathBuf;
use std::process::ExitCode;

use kaclab::experiments::{default_out_dir, run, Config, ExperimentError, EXPERIMENTS};

const USAGE: &str = "usage: kaclab <experiment> [--config FILE] [--out DIR] [--seed N] [--KEY VALUE]...
       kaclab <experiment> --print-config
       kaclab list";

fn parse(args: &[String]) -> Result<Option<(Config, PathBuf)>, ExperimentError> {
    let name = &args[0];
    let mut cfg = Config::new(name)?;
    let mut out = None;
    let mut print = false;
    let mut overrides = Vec::new();
    let mut i = 1;
    while i < args.len() {
        let flag = args[i]
            .strip_prefix("--")
            .ok_or_else(|| ExperimentError::Invalid(format!("unexpected argument '{}'", args[i])))?;
        if flag == "print-config" {
            print = true;
            i += 1;
            continue;
        }
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = args
                    .get(i + 1)
                    .ok_or_else(|| ExperimentError::Invalid(format!("--{flag} needs a value")))?;
                i += 1;
                (flag.to_string(), v.clone())
            }
        };
        i += 1;
        match key.as_str() {
            "config" => {
                let text = std::fs::read_to_string(&value)
                    .map_err(|e| ExperimentError::Invalid(format!("{value}: {e}")))?;
                cfg.apply_text(&text)?;
            }
            "out" => out = Some(PathBuf::from(value)),
            _ => overrides.push((key.replace('-', "_"), value)),
        }
    }
    // command-line values win over the config file regardless of order
    for (k, v) in overrides {
        cfg.set(&k, &v)?;
    }
    if print {
        print!("{}", cfg.echo());
        return Ok(None);
    }
    let out = out.unwrap_or_else(|| default_out_dir(name));
    Ok(Some((cfg, out)))
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match args.first().map(String::as_str) {
        None | Some("-h") | Some("--help") => {
            println!("{USAGE}");
            return ExitCode::SUCCESS;
        }
        Some("list") => {
            for e in EXPERIMENTS {
                println!("{e}");
            }
            return ExitCode::SUCCESS;
        }
        _ => {}
    }
    let (cfg, out) = match parse(&args) {
        Ok(Some(x)) => x,
        Ok(None) => return ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}\n{USAGE}");
            return ExitCode::from(2);
        }
    };
    match run(&cfg, &out) {
        Ok(summary) => {
            for m in &summary.metrics {
                let verdict = match m.expected {
                    None => "info",
                    Some(_) if m.passes() => "ok",
                    Some(_) => "FAIL",
                };
                match (m.expected, m.tolerance) {
                    (Some(e), Some(t)) => println!("{verdict:>4}  {} = {:.6e} (expected {e:.6e}, tol {t:.3e})", m.name, m.value),
                    _ => println!("{verdict:>4}  {} = {:.6e}", m.name, m.value),
                }
            }
            println!("{}: {} ({})", summary.name, if summary.pass { "PASS" } else { "FAIL" }, out.display());
            if summary.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
