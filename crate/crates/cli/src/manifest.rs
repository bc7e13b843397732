//! Plain-text `key = value` record written next to every output.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::settings::Settings;
use crate::{CliError, GlobalArgs};

pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &str, global: &GlobalArgs, settings: &Settings) -> Manifest {
        let mut m = Manifest { entries: Vec::new() };
        m.push("command", command);
        m.push("version", env!("CARGO_PKG_VERSION"));
        m.push("seed", global.seed);
        m.push("threads", rayon::current_num_threads());
        m.push("strict", global.strict);
        if let Some(p) = &global.preset {
            m.push("preset", p);
        }
        if let Some(p) = &global.config {
            m.push("config", p.display());
        }
        for (k, v) in settings.entries() {
            m.push(k, v);
        }
        m
    }

    pub fn push(&mut self, key: &str, value: impl Display) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn path(&mut self, key: &str, path: &Path) {
        self.push(key, path.display());
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn write(mut self, path: &Path) -> Result<(), CliError> {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        self.push("timestamp_unix", now);
        std::fs::write(path, self.render())
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

/// `out` with `suffix` appended to its file name: `dict.bin` -> `dict.bin.trace.csv`.
pub fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".");
    name.push(suffix);
    out.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_names() {
        assert_eq!(sidecar(Path::new("out/d.cfad"), "manifest"), PathBuf::from("out/d.cfad.manifest"));
    }

    #[test]
    fn renders_in_order() {
        let g = GlobalArgs {
            seed: 3,
            threads: None,
            config: None,
            preset: None,
            strict: false,
        };
        let mut s = Settings::default();
        s.set("iters", 5);
        let mut m = Manifest::new("measure", &g, &s);
        m.push("csr", 0.3);
        let text = m.render();
        assert!(text.starts_with("command = measure\n"));
        assert!(text.contains("seed = 3\n"));
        assert!(text.contains("iters = 5\n"));
        assert!(text.ends_with("csr = 0.3\n"));
    }
}
