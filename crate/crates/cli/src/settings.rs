//! Resolved run settings: built-in preset, then the config file, then flags.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use cscfa::cfa::SolverConfig;
use cscfa::classifier::TrainSettings;
use cscfa::cs::preset;
use cscfa::sensing::SensingKind;

use crate::CliError;

/// Every key a config file may set.
pub const KEYS: &[&str] = &[
    "atoms",
    "kernel",
    "matrix",
    "iters",
    "sparsity",
    "beta",
    "eta0",
    "eta_max",
    "eta_growth",
    "eta_absolute",
    "accelerate",
    "normalize_atoms",
    "rel_tol",
    "cg_tol",
    "cg_max_iter",
    "zero_init",
    "epochs",
    "step",
    "l2",
];

#[derive(Clone, Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

fn canonical(key: &str) -> String {
    key.trim().replace('-', "_")
}

impl Settings {
    pub fn from_preset(name: &str) -> Result<Settings, CliError> {
        let p = preset(name).ok_or_else(|| {
            CliError::Usage(format!("unknown preset {name:?} (known: mnist, generic-64)"))
        })?;
        let mut s = Settings::default();
        s.set("atoms", p.atoms);
        s.set("kernel", format!("{}x{}", p.kernel.0, p.kernel.1));
        s.set("matrix", p.sensing);
        Ok(s)
    }

    /// `key = value` lines; blank lines and `#` comments are skipped.
    pub fn merge_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("{}:{}: expected key = value", path.display(), n + 1))
            })?;
            let k = canonical(k);
            if !KEYS.contains(&k.as_str()) {
                return Err(CliError::Usage(format!(
                    "{}:{}: unknown key {k:?}",
                    path.display(),
                    n + 1
                )));
            }
            self.values.insert(k, v.trim().to_string());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.values.insert(canonical(key), value.to_string());
    }

    pub fn set_opt<T: Display>(&mut self, key: &str, value: Option<T>) {
        if let Some(v) = value {
            self.set(key, v);
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| CliError::Usage(format!("invalid value {raw:?} for {key}"))),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        self.get(key)?
            .ok_or_else(|| CliError::Usage(format!("missing required setting --{}", key.replace('_', "-"))))
    }

    pub fn kernel(&self, key: &str) -> Result<(usize, usize), CliError> {
        let raw: String = self.require(key)?;
        parse_pair(&raw).map_err(CliError::Usage)
    }

    pub fn matrix(&self) -> Result<SensingKind, CliError> {
        let raw: String = self.get("matrix")?.unwrap_or_else(|| "gaussian".into());
        raw.parse().map_err(|e: cscfa::Error| CliError::Usage(e.to_string()))
    }

    pub fn solver(&self, seed: u64) -> Result<SolverConfig, CliError> {
        let mut c = SolverConfig {
            seed,
            ..SolverConfig::default()
        };
        macro_rules! apply {
            ($($key:literal => $field:ident),* $(,)?) => {
                $(if let Some(v) = self.get($key)? { c.$field = v; })*
            };
        }
        apply!(
            "iters" => max_outer,
            "sparsity" => sparsity_target,
            "beta" => beta,
            "eta0" => eta0,
            "eta_max" => eta_max,
            "eta_growth" => eta_growth,
            "accelerate" => accelerate,
            "normalize_atoms" => normalize_atoms,
            "rel_tol" => rel_tol,
            "cg_tol" => cg_tol,
            "cg_max_iter" => cg_max_iter,
            "zero_init" => zero_init,
        );
        if let Some(abs) = self.get::<bool>("eta_absolute")? {
            c.eta_relative = !abs;
        }
        c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(c)
    }

    pub fn softmax(&self) -> Result<TrainSettings, CliError> {
        let d = TrainSettings::default();
        Ok(TrainSettings {
            epochs: self.get("epochs")?.unwrap_or(d.epochs),
            step: self.get("step")?.unwrap_or(d.step),
            l2: self.get("l2")?.unwrap_or(d.l2),
        })
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

/// `7` or `7x9`.
pub fn parse_pair(raw: &str) -> Result<(usize, usize), String> {
    let num = |s: &str| {
        s.trim()
            .parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| format!("expected a positive size or HxW, got {raw:?}"))
    };
    match raw.split_once(['x', 'X']) {
        Some((h, w)) => Ok((num(h)?, num(w)?)),
        None => num(raw).map(|v| (v, v)),
    }
}
