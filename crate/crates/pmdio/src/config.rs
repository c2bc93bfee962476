//! Engine configuration and its TOML form.
//!
//! ```toml
//! [engine]
//! num_aggregators = 4        # or "per_node"
//! ranks_per_node = 2
//! mode = "aggregated"        # or "file_per_process"
//! overwrite = false
//! verify_writes = false
//! fsync_on_close = false
//!
//! [compression]
//! codec = "blosc-like"       # none | blosc-like | bzip2-like
//! level = 5                  # 0..=9
//! shuffle = true
//!
//! profiling = true
//! ```
//!
//! Every key is optional. `PMDIO_PROFILING=1` in the environment forces
//! profiling on regardless of the file.

use serde::Deserialize;

use crate::codecs::{self, CodecConfig};
use crate::engine::layout::EngineMode;
use crate::error::{Error, Result};

/// Aggregator count: a fixed number of subfiles or one per node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AggSetting {
    Count(u32),
    PerNode,
}

impl Default for AggSetting {
    fn default() -> Self {
        AggSetting::PerNode
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EngineConfig {
    pub num_aggregators: AggSetting,
    /// Stand-in for node topology when `num_aggregators = "per_node"`:
    /// the effective subfile count is ceil(n_ranks / ranks_per_node).
    pub ranks_per_node: u32,
    pub mode: EngineMode,
    /// Allow create mode to replace an existing series directory.
    pub overwrite: bool,
    /// Read every appended frame back and checksum it before commit.
    pub verify_writes: bool,
    /// Issue fsync on data files before their write handles close.
    pub fsync_on_close: bool,
    pub codec: CodecConfig,
    pub profiling: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            num_aggregators: AggSetting::default(),
            ranks_per_node: 2,
            mode: EngineMode::Aggregated,
            overwrite: false,
            verify_writes: false,
            fsync_on_close: false,
            codec: CodecConfig::default(),
            profiling: true,
        }
    }
}

impl EngineConfig {
    /// Subfile count for a group of `n_ranks`, after per-node expansion and
    /// clamping to the rank count.
    pub fn effective_aggregators(&self, n_ranks: u32) -> u32 {
        let requested = match self.num_aggregators {
            AggSetting::Count(n) => n,
            AggSetting::PerNode => n_ranks.div_ceil(self.ranks_per_node.max(1)),
        };
        requested.clamp(1, n_ranks.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if let AggSetting::Count(0) = self.num_aggregators {
            return Err(Error::InvalidConfig("engine.num_aggregators must be >= 1".into()));
        }
        if self.ranks_per_node == 0 {
            return Err(Error::InvalidConfig("engine.ranks_per_node must be >= 1".into()));
        }
        self.codec.validate()
    }

    /// Parse the TOML text form. Unknown keys are rejected so typos fail
    /// loudly rather than silently running with defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: ConfigDoc =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("engine config: {e}")))?;
        let mut cfg = EngineConfig::default();
        if let Some(engine) = doc.engine {
            if let Some(n) = engine.num_aggregators {
                cfg.num_aggregators = n.into_setting()?;
            }
            if let Some(r) = engine.ranks_per_node {
                cfg.ranks_per_node = r;
            }
            if let Some(mode) = engine.mode {
                cfg.mode = match mode.as_str() {
                    "aggregated" => EngineMode::Aggregated,
                    "file_per_process" => EngineMode::FilePerProcess,
                    other => {
                        return Err(Error::InvalidConfig(format!(
                            "engine.mode {other:?} (expected \"aggregated\" or \"file_per_process\")"
                        )))
                    }
                };
            }
            if let Some(v) = engine.overwrite {
                cfg.overwrite = v;
            }
            if let Some(v) = engine.verify_writes {
                cfg.verify_writes = v;
            }
            if let Some(v) = engine.fsync_on_close {
                cfg.fsync_on_close = v;
            }
        }
        if let Some(c) = doc.compression {
            if let Some(name) = c.codec {
                cfg.codec.codec_id = codecs::CodecConfig::named(&name).ok_or_else(|| {
                    Error::InvalidConfig(format!(
                        "compression.codec {name:?} (expected none, blosc-like or bzip2-like)"
                    ))
                })?;
            }
            if let Some(level) = c.level {
                if level > 9 {
                    return Err(Error::InvalidConfig(format!(
                        "compression.level {level} out of range 0..=9"
                    )));
                }
                cfg.codec.level = level;
            }
            if let Some(s) = c.shuffle {
                cfg.codec.shuffle = s;
            }
        }
        if let Some(p) = doc.profiling {
            cfg.profiling = p;
        }
        cfg.apply_env();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        Self::from_toml(&text)
    }

    /// Environment overrides; also applied by `from_toml`.
    pub fn apply_env(&mut self) {
        if let Ok(v) = std::env::var("PMDIO_PROFILING") {
            if v == "1" {
                self.profiling = true;
            }
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigDoc {
    engine: Option<EngineSection>,
    compression: Option<CompressionSection>,
    profiling: Option<bool>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EngineSection {
    num_aggregators: Option<AggValue>,
    ranks_per_node: Option<u32>,
    mode: Option<String>,
    overwrite: Option<bool>,
    verify_writes: Option<bool>,
    fsync_on_close: Option<bool>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CompressionSection {
    codec: Option<String>,
    level: Option<u8>,
    shuffle: Option<bool>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum AggValue {
    Count(i64),
    Name(String),
}

impl AggValue {
    fn into_setting(self) -> Result<AggSetting> {
        match self {
            AggValue::Count(n) if n >= 1 && n <= u32::MAX as i64 => {
                Ok(AggSetting::Count(n as u32))
            }
            AggValue::Count(n) => Err(Error::InvalidConfig(format!(
                "engine.num_aggregators {n} must be >= 1"
            ))),
            AggValue::Name(s) if s == "per_node" => Ok(AggSetting::PerNode),
            AggValue::Name(s) => Err(Error::InvalidConfig(format!(
                "engine.num_aggregators {s:?} (expected an integer or \"per_node\")"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_out_missing_keys() {
        let cfg = EngineConfig::from_toml("").unwrap();
        assert_eq!(cfg.num_aggregators, AggSetting::PerNode);
        assert_eq!(cfg.codec.codec_id, codecs::CODEC_NONE);
    }

    #[test]
    fn full_document_parses() {
        let cfg = EngineConfig::from_toml(
            r#"
            profiling = false

            [engine]
            num_aggregators = 4
            ranks_per_node = 8
            mode = "file_per_process"
            overwrite = true

            [compression]
            codec = "bzip2-like"
            level = 9
            shuffle = false
            "#,
        )
        .unwrap();
        assert_eq!(cfg.num_aggregators, AggSetting::Count(4));
        assert_eq!(cfg.mode, EngineMode::FilePerProcess);
        assert!(cfg.overwrite);
        assert_eq!(cfg.codec.codec_id, codecs::CODEC_BZIP2_LIKE);
        assert_eq!(cfg.codec.level, 9);
        assert!(!cfg.codec.shuffle);
        assert!(!cfg.profiling);
    }

    #[test]
    fn per_node_string_accepted() {
        let cfg = EngineConfig::from_toml("[engine]\nnum_aggregators = \"per_node\"\n").unwrap();
        assert_eq!(cfg.num_aggregators, AggSetting::PerNode);
        assert_eq!(cfg.effective_aggregators(8), 4);
        assert_eq!(cfg.effective_aggregators(7), 4);
        assert_eq!(cfg.effective_aggregators(1), 1);
    }

    #[test]
    fn zero_aggregators_rejected() {
        let err = EngineConfig::from_toml("[engine]\nnum_aggregators = 0\n").unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }

    #[test]
    fn level_out_of_range_rejected() {
        let err = EngineConfig::from_toml("[compression]\nlevel = 10\n").unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(EngineConfig::from_toml("[engine]\nnum_agg = 1\n").is_err());
        assert!(EngineConfig::from_toml("prof = true\n").is_err());
    }

    #[test]
    fn effective_count_clamps_to_ranks() {
        let mut cfg = EngineConfig::default();
        cfg.num_aggregators = AggSetting::Count(64);
        assert_eq!(cfg.effective_aggregators(3), 3);
        cfg.num_aggregators = AggSetting::Count(2);
        assert_eq!(cfg.effective_aggregators(8), 2);
    }
}
