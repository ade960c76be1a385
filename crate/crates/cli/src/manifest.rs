//! Run manifests: flat `key=value` text recording the tool version, the
//! subcommand and every resolved flag, defaults included. A manifest holds
//! enough to replay the run through `tdml rerun`.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context};
use clap::{ArgAction, ArgMatches, CommandFactory};

use crate::{usage, Cli};

const RESERVED: [&str; 4] = ["tool", "version", "subcommand", "threads"];

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        std::fs::write(path, self.render()).with_context(|| format!("writing manifest {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!("manifest line {}: expected key=value", n + 1);
            };
            entries.push((k.to_owned(), v.to_owned()));
        }
        Ok(Self { entries })
    }
}

/// Records the subcommand in `matches` with all of its resolved values.
pub fn from_matches(matches: &ArgMatches, threads: usize) -> Manifest {
    let mut cmd = Cli::command();
    cmd.build();
    let mut entries = vec![
        ("tool".to_owned(), "tdml".to_owned()),
        ("version".to_owned(), env!("CARGO_PKG_VERSION").to_owned()),
    ];
    let Some((name, sub)) = matches.subcommand() else {
        return Manifest { entries };
    };
    entries.push(("subcommand".to_owned(), name.to_owned()));
    entries.push(("threads".to_owned(), threads.to_string()));
    let sub_cmd = cmd.find_subcommand(name).expect("parsed subcommand exists");
    for arg in sub_cmd.get_arguments() {
        let id = arg.get_id().as_str();
        if RESERVED.contains(&id) || id == "help" {
            continue;
        }
        let key = arg.get_long().unwrap_or(id).to_owned();
        match arg.get_action() {
            ArgAction::SetTrue => entries.push((key, sub.get_flag(id).to_string())),
            _ => {
                for v in sub.get_raw(id).into_iter().flatten() {
                    entries.push((key.clone(), v.to_string_lossy().into_owned()));
                }
            }
        }
    }
    Manifest { entries }
}

/// Rebuilds the command line recorded in a manifest, optionally redirecting
/// its output.
pub fn to_argv(manifest: &Manifest, out: Option<&Path>) -> anyhow::Result<Vec<OsString>> {
    if manifest.get("tool") != Some("tdml") {
        return Err(usage("not a tdml manifest (missing tool=tdml)"));
    }
    let name = manifest.get("subcommand").ok_or_else(|| usage("manifest has no subcommand"))?;
    if name == "rerun" {
        return Err(usage("a rerun manifest cannot be replayed"));
    }
    if let Some(v) = manifest.get("version").filter(|v| *v != env!("CARGO_PKG_VERSION")) {
        log::warn!("manifest was written by tdml {v}, this is {}", env!("CARGO_PKG_VERSION"));
    }
    let mut cmd = Cli::command();
    cmd.build();
    let sub_cmd = cmd
        .find_subcommand(name)
        .ok_or_else(|| usage(format!("unknown subcommand {name:?} in manifest")))?;

    let mut argv: Vec<OsString> = vec!["tdml".into()];
    if let Some(t) = manifest.get("threads") {
        argv.push(format!("--threads={t}").into());
    }
    argv.push(name.into());
    let mut replaced_out = false;
    for (key, value) in &manifest.entries {
        if RESERVED.contains(&key.as_str()) {
            continue;
        }
        let arg = sub_cmd
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| usage(format!("unknown flag {key:?} for {name} in manifest")))?;
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            if value == "true" {
                argv.push(format!("--{key}").into());
            }
            continue;
        }
        let mut flag = OsString::from(format!("--{key}="));
        match out {
            Some(path) if key == "out" => {
                flag.push(path.as_os_str());
                replaced_out = true;
            }
            _ => flag.push(value),
        }
        argv.push(flag);
    }
    if let (Some(path), false) = (out, replaced_out) {
        let mut flag = OsString::from("--out=");
        flag.push(path.as_os_str());
        argv.push(flag);
    }
    Ok(argv)
}
