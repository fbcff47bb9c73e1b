//! Run configuration file.
//!
//! ```toml
//! seed = 0
//!
//! [network]            # NetworkConfig; omitted keys take their defaults
//! variant = "mamba_3d"
//! stage_channels = [32, 64, 128, 256]
//!
//! [cost]
//! input_shape = [128, 128, 128]
//! variants = ["mamba_1d", "mamba_3d", "trans_sra"]
//!
//! [train]              # TrainConfig
//! [data]               # SyntheticVolumeSpec
//! ```
//!
//! Unknown keys anywhere are errors.

use std::path::Path;

use anyhow::{anyhow, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ulike_core::blocks::Multiscale;
use ulike_core::network::{NetworkConfig, Variant};
use ulike_core::scan_order::{direction_preset, DIRECTION_PRESETS};
use ulike_core::train::{SyntheticVolumeSpec, TrainConfig};

use crate::exit::ConfigError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostSection {
    pub input_shape: [usize; 3],
    /// Entries of the comparison table; see [`variant_entry`].
    pub variants: Vec<String>,
}

impl Default for CostSection {
    fn default() -> Self {
        CostSection {
            input_shape: [128, 128, 128],
            variants: ["mamba_1d", "mamba_3d", "trans_sra", "trans_vanilla"].map(String::from).to_vec(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub network: NetworkConfig,
    pub cost: CostSection,
    pub train: TrainConfig,
    pub data: SyntheticVolumeSpec,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(RunConfig::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| ConfigError(e.to_string()).into())
    }

    /// Fills variant-dependent defaults and validates every section.
    pub fn resolve(mut self) -> Result<Self> {
        self.network = self.network.resolve();
        let check = |r: ulike_core::Result<()>| r.map_err(|e| anyhow!(ConfigError(e.to_string())));
        check(self.network.validate())?;
        check(self.train.validate())?;
        check(self.data.validate())?;
        if self.cost.variants.is_empty() {
            return Err(ConfigError("cost.variants must not be empty".into()).into());
        }
        for v in &self.cost.variants {
            variant_entry(&self.network, v)?;
        }
        // TOML integers are signed 64-bit.
        toml::to_string(&self).map_err(|e| ConfigError(e.to_string()))?;
        Ok(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// First 12 hex digits of the SHA-256 of the resolved config.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))[..12].to_string()
    }
}

/// Applies a comparison entry to `base`: a variant name (`mamba_3d`), a
/// direction preset (`dual_fb`) or a multi-scale scheme (`msv2`).
pub fn variant_entry(base: &NetworkConfig, name: &str) -> Result<NetworkConfig> {
    let mut cfg = base.clone();
    let variant = Variant::ALL.into_iter().find(|v| v.name() == name);
    if let Some(v) = variant {
        cfg.variant = v;
        // Let the new variant pick its own defaults.
        cfg.dwconv = None;
        cfg.directions = None;
        if base.variant == Variant::Mamba3dMt {
            cfg.multiscale = Multiscale::None;
        }
    } else if let Some(dirs) = direction_preset(name) {
        cfg.directions = Some(dirs);
    } else if let Some(m) = multiscale_by_name(name) {
        cfg.multiscale = m;
    } else {
        let known: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).chain(DIRECTION_PRESETS).collect();
        return Err(ConfigError(format!(
            "unknown comparison entry {name:?}; expected one of {}, msv1..msv4",
            known.join(", ")
        ))
        .into());
    }
    let cfg = cfg.resolve();
    cfg.validate().map_err(|e| ConfigError(format!("{name}: {e}")))?;
    Ok(cfg)
}

fn multiscale_by_name(name: &str) -> Option<Multiscale> {
    Some(match name {
        "msv1" => Multiscale::Msv1,
        "msv2" => Multiscale::Msv2,
        "msv3" => Multiscale::Msv3,
        "msv4" => Multiscale::Msv4,
        _ => return None,
    })
}
