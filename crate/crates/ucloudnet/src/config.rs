//! Run configuration files: flat `key=value` text, `#` comments allowed.
//! Run keys are those of [`RunConfig`]; `dataset`, `out` and `checkpoint`
//! hold paths.

use std::path::{Path, PathBuf};

use ucloudnet_core::train::RunConfig;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub run: RunConfig,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for CliConfig {
    /// Plain training: auxiliary losses and decay are opt-in on the command line.
    fn default() -> Self {
        CliConfig {
            run: RunConfig { aux: false, lr_decay: false, ..RunConfig::default() },
            dataset: None,
            out: None,
            checkpoint: None,
        }
    }
}

impl CliConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            _ => {
                if !self.run.apply(key, value)? {
                    return Err(Error::Config(format!("unknown key {key:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Output directory, `runs/<run name>` unless set.
    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| Path::new("runs").join(self.run.run_name()))
    }

    /// The resolved configuration in the same format it is read from.
    pub fn to_text(&self) -> String {
        let mut s = self.run.to_kv();
        for (key, v) in [("dataset", &self.dataset), ("out", &self.out), ("checkpoint", &self.checkpoint)] {
            if let Some(p) = v {
                s.push_str(&format!("{key}={}\n", p.display()));
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = CliConfig::default();
        c.apply_text("# comment\nk = 2\naux=true\ndataset=/data/swinyseg\n\nout=/tmp/x\n").unwrap();
        assert_eq!(c.run.k, 2);
        assert!(c.run.aux && !c.run.lr_decay);
        let mut back = CliConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let mut c = CliConfig::default();
        assert!(c.apply_text("colour=blue").is_err());
        assert!(c.apply_text("k").unwrap_err().to_string().contains("line 1"));
        assert!(c.apply_text("epochs=ten").is_err());
    }

    #[test]
    fn default_out_dir_uses_run_name() {
        let mut c = CliConfig::default();
        c.run.k = 4;
        c.run.aux = true;
        assert_eq!(c.out_dir(), Path::new("runs/ucloudnet_k4_aux"));
    }
}
