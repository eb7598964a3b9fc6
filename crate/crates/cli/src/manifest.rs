//! Reproducibility record written next to every output.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use flowm::config::RunConfig;
use flowm::io::write_atomic;
use flowm::Result;

pub const MANIFEST_FILE: &str = "manifest.txt";

pub struct RunManifest {
    pub subcommand: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub version: String,
    pub started: u64,
    pub finished: u64,
    pub outputs: Vec<PathBuf>,
    pub config: RunConfig,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn new(subcommand: &str, seed: u64, config: RunConfig) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            argv: std::env::args().collect(),
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started: unix_now(),
            finished: 0,
            outputs: Vec::new(),
            config,
        }
    }

    /// Run metadata as comments followed by the resolved configuration, so
    /// the file can be passed back through `--config`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("# subcommand: {}\n", self.subcommand));
        s.push_str(&format!("# argv: {}\n", self.argv.join(" ")));
        s.push_str(&format!("# seed: {}\n", self.seed));
        s.push_str(&format!("# version: flowm {}\n", self.version));
        s.push_str(&format!("# started: {}\n", self.started));
        s.push_str(&format!("# finished: {}\n", self.finished));
        for p in &self.outputs {
            s.push_str(&format!("# output: {}\n", p.display()));
        }
        s.push('\n');
        s.push_str(&self.config.to_text());
        s
    }

    pub fn finish(mut self, dir: &Path, outputs: Vec<PathBuf>) -> Result<()> {
        self.finished = unix_now();
        self.outputs = outputs;
        write_atomic(&dir.join(MANIFEST_FILE), self.to_text().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use flowm::config::parse_config;

    #[test]
    fn manifest_parses_back_to_its_config() {
        let cfg = parse_config("scale = desk\n[train]\nseed = 4\n", &[]).unwrap();
        let mut m = RunManifest::new("train", 4, cfg.clone());
        m.outputs = vec![PathBuf::from("out/metrics.csv")];
        let text = m.to_text();
        assert!(text.starts_with("# subcommand: train\n"));
        assert!(text.contains("# output: out/metrics.csv\n"));
        assert_eq!(parse_config(&text, &[]).unwrap(), cfg);
    }
}
