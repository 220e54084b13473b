//! Line-oriented `key = value` config files, merged ahead of the command
//! line so that flags win.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use crate::error::{usage, CliResult};

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_config(text: &str, origin: &str) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("{origin}:{}: expected key = value", i + 1)))?;
        let key = k.trim().trim_start_matches("--").replace('_', "-");
        if key.is_empty() {
            return Err(usage(format!("{origin}:{}: empty key", i + 1)));
        }
        if key == "config" {
            return Err(usage(format!(
                "{origin}:{}: config files cannot nest",
                i + 1
            )));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_config(path: &Path) -> CliResult<Vec<(String, String)>> {
    let text = fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text, &path.display().to_string())
}

/// Splices the entries of any `--config <path>` found after the subcommand
/// in front of the user's own flags. Later occurrences override earlier
/// ones, so explicit flags take precedence over the file.
pub fn expand_args(args: Vec<OsString>) -> CliResult<Vec<OsString>> {
    if args.len() < 2 {
        return Ok(args);
    }
    let rest = &args[2..];
    let mut config_path = None;
    let mut user = Vec::with_capacity(rest.len());
    let mut i = 0;
    while i < rest.len() {
        let a = rest[i].to_string_lossy();
        if a == "--config" {
            let p = rest
                .get(i + 1)
                .ok_or_else(|| usage("--config needs a path"))?;
            config_path = Some(p.clone());
            i += 2;
            continue;
        }
        if let Some(p) = a.strip_prefix("--config=") {
            config_path = Some(OsString::from(p));
            i += 1;
            continue;
        }
        user.push(rest[i].clone());
        i += 1;
    }
    let Some(path) = config_path else {
        return Ok(args);
    };
    let mut out = vec![args[0].clone(), args[1].clone()];
    for (k, v) in read_config(Path::new(&path))? {
        out.push(OsString::from(format!("--{k}")));
        out.push(OsString::from(v));
    }
    out.extend(user);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn parses_pairs_and_skips_comments() {
        let kv = parse_config("# c\n\nrank = 3\n--eta=0.05\nmax_iters = 9\n", "x").unwrap();
        assert_eq!(
            kv,
            vec![
                ("rank".to_string(), "3".to_string()),
                ("eta".to_string(), "0.05".to_string()),
                ("max-iters".to_string(), "9".to_string())
            ]
        );
        assert!(parse_config("rank 3", "x").is_err());
        assert!(parse_config("config = a", "x").is_err());
    }

    #[test]
    fn flags_come_after_file_entries() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.conf");
        fs::write(&p, "eta = 0.05\nrank = 2\n").unwrap();
        let args = os(&[
            "bin",
            "decompose",
            "--eta",
            "0.3",
            "--config",
            p.to_str().unwrap(),
        ]);
        let out = expand_args(args).unwrap();
        assert_eq!(
            out,
            os(&[
                "bin",
                "decompose",
                "--eta",
                "0.05",
                "--rank",
                "2",
                "--eta",
                "0.3"
            ])
        );
    }

    #[test]
    fn untouched_without_config() {
        let args = os(&["bin", "verify", "--seed", "1"]);
        assert_eq!(expand_args(args.clone()).unwrap(), args);
    }
}
