use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use voxcal_core::eval::MetricsReport;

use crate::config::RunConfig;
use crate::CliError;

pub const RUN_RECORD: &str = "run_record.json";

pub fn version() -> String {
    format!("v{}-{}", env!("CARGO_PKG_VERSION"), env!("VOXCAL_GIT_DESCRIBE"))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageTime {
    pub command: String,
    pub seed: u64,
    pub seconds: f64,
}

/// The single provenance file of a report directory. Later commands update it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: String,
    pub config: RunConfig,
    pub stages: Vec<StageTime>,
    /// Latest metrics per configuration label (medians over seeds for ablations).
    pub metrics: BTreeMap<String, MetricsReport>,
}

impl RunRecord {
    pub fn open(cfg: &RunConfig) -> Self {
        let path = cfg.paths.report_dir.join(RUN_RECORD);
        let previous = std::fs::read(&path)
            .ok()
            .and_then(|b| serde_json::from_slice::<RunRecord>(&b).ok());
        let mut record = previous.unwrap_or_else(|| RunRecord {
            version: String::new(),
            config: cfg.clone(),
            stages: Vec::new(),
            metrics: BTreeMap::new(),
        });
        record.version = version();
        record.config = cfg.clone();
        record
    }

    pub fn time<T>(
        &mut self,
        command: &str,
        seed: u64,
        f: impl FnOnce() -> Result<T, CliError>,
    ) -> Result<T, CliError> {
        let start = Instant::now();
        let out = f()?;
        self.stages.push(StageTime {
            command: command.to_owned(),
            seed,
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(out)
    }

    pub fn save(&self, report_dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(report_dir)?;
        std::fs::write(report_dir.join(RUN_RECORD), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
