//! Run configuration: one JSON document shared by every subcommand, with
//! command-line flags applied on top.

use std::path::{Path, PathBuf};

use kobt::data::{ColumnRef, CsvOptions, Dataset, Task};
use kobt::importance::Statistic;
use kobt::knockoff::KnockoffKind;
use kobt::knockoff_filter::FilterConfig;
use kobt::sim_harness::ExperimentSpec;
use kobt::{KobtError, Result};
use serde::{Deserialize, Serialize};

/// Where the data comes from. `path` is relative to the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[derive(schemars::JsonSchema)]
pub struct DataSource {
    pub path: PathBuf,
    #[serde(default = "yes")]
    pub has_header: bool,
    pub response_column: ColumnRef,
    #[serde(default)]
    pub covariate_columns: Option<Vec<ColumnRef>>,
    #[serde(default)]
    pub task: Task,
    /// Drop constant and non-finite columns before fitting.
    #[serde(default = "yes")]
    pub clean: bool,
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[derive(schemars::JsonSchema)]
pub struct RunConfig {
    #[serde(default)]
    pub data: Option<DataSource>,
    #[serde(default)]
    pub filter: FilterConfig,
    /// Knockoff matrices written by the `knockoff` command.
    #[serde(default = "one")]
    pub knockoff_count: usize,
    #[serde(default)]
    pub experiment: Option<ExperimentSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            filter: FilterConfig::default(),
            knockoff_count: 1,
            experiment: None,
        }
    }
}

/// JSON schema of the config document, as published in `schema/`.
pub fn schema_json() -> String {
    let mut s = serde_json::to_string_pretty(&schemars::schema_for!(RunConfig)).expect("schema serializes");
    s.push('\n');
    s
}

/// Parses a config document, reporting the JSON path of the offending field.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        KobtError::invalid(if path == "." { "config".to_string() } else { path }, e.into_inner().to_string())
    })
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| KobtError::io(path, e))?;
    let mut config = parse_config(&text)?;
    if let Some(data) = &mut config.data {
        if data.path.is_relative() {
            if let Some(dir) = path.parent() {
                data.path = dir.join(&data.path);
            }
        }
    }
    Ok(config)
}

/// Flag values that override config fields.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub delta: Option<f64>,
    pub q: Option<usize>,
    pub statistic: Option<Statistic>,
    pub knockoff_kind: Option<KnockoffKind>,
    pub reps: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, config: &mut RunConfig) {
        let f = &mut config.filter;
        if let Some(s) = self.seed {
            f.master_seed = s;
        }
        if let Some(d) = self.delta {
            f.delta = d;
        }
        if let Some(q) = self.q {
            f.q = q;
        }
        if let Some(s) = self.statistic {
            f.statistic = s;
        }
        if let Some(k) = &self.knockoff_kind {
            f.knockoff = k.clone();
        }
        if let Some(e) = &mut config.experiment {
            if let Some(s) = self.seed {
                e.seed = s;
            }
            if let Some(r) = self.reps {
                e.reps = r;
            }
            if let Some(d) = self.delta {
                e.delta = d;
            }
            if let Some(q) = self.q {
                e.q = q;
            }
            if let Some(s) = self.statistic {
                e.statistics = vec![s];
            }
            if let Some(k) = &self.knockoff_kind {
                e.knockoffs = vec![k.clone()];
            }
        }
    }
}

/// `shrunk`, `sparse`, or `pc<K>` / `pc:<K>`.
pub fn parse_knockoff_kind(s: &str) -> std::result::Result<KnockoffKind, String> {
    match s {
        "shrunk" | "shrunk_gaussian" => Ok(KnockoffKind::ShrunkGaussian),
        "sparse" | "sparse_gaussian" => Ok(KnockoffKind::sparse_default()),
        _ => {
            let k = s
                .strip_prefix("pc:")
                .or_else(|| s.strip_prefix("pc"))
                .ok_or_else(|| format!("unknown knockoff kind '{s}' (expected shrunk, sparse or pc<K>)"))?;
            let num_pcs: usize = k.parse().map_err(|_| format!("bad principal-component count in '{s}'"))?;
            Ok(KnockoffKind::PcPermute { num_pcs })
        }
    }
}

impl RunConfig {
    pub fn data_source(&self) -> Result<&DataSource> {
        self.data
            .as_ref()
            .ok_or_else(|| KobtError::invalid("data", "this command needs a data section"))
    }

    pub fn experiment(&self) -> Result<&ExperimentSpec> {
        self.experiment
            .as_ref()
            .ok_or_else(|| KobtError::invalid("experiment", "the simulate command needs an experiment section"))
    }

    /// Checks ranges and that referenced files exist.
    pub fn validate_for(&self, command: Command) -> Result<()> {
        match command {
            Command::Select | Command::Knockoff | Command::Tune => {
                let data = self.data_source()?;
                if !data.path.is_file() {
                    return Err(KobtError::invalid("data.path", format!("{} does not exist", data.path.display())));
                }
                self.filter.validate()?;
                if command == Command::Knockoff && self.knockoff_count < 1 {
                    return Err(KobtError::invalid("knockoff_count", "must be >= 1"));
                }
                Ok(())
            }
            Command::Simulate => self.experiment()?.validate(),
        }
    }

    /// Loads and optionally cleans the dataset. Returns dropped column names.
    pub fn load_dataset(&self) -> Result<(Dataset, Vec<String>)> {
        let source = self.data_source()?;
        let options = CsvOptions {
            has_header: source.has_header,
            response_column: source.response_column.clone(),
            covariate_columns: source.covariate_columns.clone(),
            task: source.task,
        };
        let mut data = kobt::data::load_csv(&source.path, &options)?;
        let mut dropped = Vec::new();
        if source.clean {
            let (x, d) = kobt::data::clean_columns(&data.x)?;
            dropped = d;
            data = Dataset::new(x, data.y, data.w, data.task)?;
        }
        Ok((data, dropped))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Select,
    Knockoff,
    Tune,
    Simulate,
}

impl Command {
    pub fn as_str(&self) -> &'static str {
        match self {
            Command::Select => "select",
            Command::Knockoff => "knockoff",
            Command::Tune => "tune",
            Command::Simulate => "simulate",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_schema_is_current() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schema/run_config.schema.json");
        if std::env::var_os("KOBT_BLESS_SCHEMA").is_some() {
            std::fs::write(&path, schema_json()).unwrap();
        }
        let published = std::fs::read_to_string(&path).unwrap();
        assert_eq!(published, schema_json(), "rerun with KOBT_BLESS_SCHEMA=1 to refresh");
        let doc: serde_json::Value = serde_json::from_str(&published).unwrap();
        assert!(doc["properties"]["filter"].is_object());
    }

    #[test]
    fn default_config_round_trips() {
        let c = RunConfig { experiment: Some(ExperimentSpec::default()), ..RunConfig::default() };
        assert_eq!(parse_config(&serde_json::to_string(&c).unwrap()).unwrap(), c);
    }

    #[test]
    fn unknown_field_reports_path() {
        let err = parse_config(r#"{"filter": {"q": 3, "bogus": 1}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("filter") && msg.contains("bogus"), "{msg}");
        assert!(err.is_validation());
    }

    #[test]
    fn bad_delta_names_the_field() {
        let c = parse_config(r#"{"filter": {"delta": 1.5}}"#).unwrap();
        let err = c.filter.validate().unwrap_err();
        assert!(err.to_string().contains("delta"));
    }

    #[test]
    fn knockoff_kind_flags() {
        assert_eq!(parse_knockoff_kind("shrunk").unwrap(), KnockoffKind::ShrunkGaussian);
        assert_eq!(parse_knockoff_kind("pc10").unwrap(), KnockoffKind::PcPermute { num_pcs: 10 });
        assert_eq!(parse_knockoff_kind("pc:30").unwrap(), KnockoffKind::PcPermute { num_pcs: 30 });
        assert!(parse_knockoff_kind("pcx").is_err());
        assert!(parse_knockoff_kind("gauss").is_err());
    }

    #[test]
    fn overrides_reach_both_sections() {
        let mut c = parse_config(r#"{"experiment": {"protocol": "ranking"}}"#).unwrap();
        Overrides { seed: Some(9), reps: Some(3), q: Some(4), ..Overrides::default() }.apply(&mut c);
        assert_eq!(c.filter.master_seed, 9);
        assert_eq!(c.filter.q, 4);
        let e = c.experiment.unwrap();
        assert_eq!((e.seed, e.reps, e.q), (9, 3, 4));
    }

    #[test]
    fn relative_data_path_resolves_next_to_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.json");
        std::fs::write(&cfg, r#"{"data": {"path": "d.csv", "response_column": "y"}}"#).unwrap();
        let c = load_config(&cfg).unwrap();
        assert_eq!(c.data.unwrap().path, dir.path().join("d.csv"));
    }
}
