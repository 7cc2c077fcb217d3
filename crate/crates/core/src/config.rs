//! Plain-text `key = value` configuration files for [`AdaptConfig`].

use std::path::Path;
use std::str::FromStr;

use crate::adapt::{AdaptConfig, BankSchedule};
use crate::error::{Error, Result};

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Format(format!("config key '{key}': cannot parse '{value}'")))
}

/// Sets one field by name.
pub fn set_field(cfg: &mut AdaptConfig, key: &str, value: &str) -> Result<()> {
    let t = &mut cfg.toggles;
    match key {
        "gamma" => cfg.gamma = parse(key, value)?,
        "epochs" => cfg.epochs = parse(key, value)?,
        "batch_size" => cfg.batch_size = parse(key, value)?,
        "lr" => cfg.lr = parse(key, value)?,
        "weight_decay" => cfg.weight_decay = parse(key, value)?,
        "poly_power" => cfg.poly_power = parse(key, value)?,
        "ffp_fov_deg" => cfg.ffp_fov_deg = parse(key, value)?,
        "tp_rings" => cfg.tp_rings = parse(key, value)?,
        "tp_lons" => cfg.tp_lons = parse(key, value)?,
        "tp_fov_deg" => cfg.tp_fov_deg = parse(key, value)?,
        "tp_patch" => cfg.tp_patch = parse(key, value)?,
        "n_max" => cfg.n_max = parse(key, value)?,
        "seed" => cfg.seed = parse(key, value)?,
        "init_from_source" => cfg.init_from_source = parse(key, value)?,
        "bank_schedule" => {
            cfg.bank_schedule = match value {
                "per_iteration" => BankSchedule::PerIteration,
                "per_epoch" => BankSchedule::PerEpoch,
                _ => return Err(Error::Format(format!("bank_schedule must be per_iteration or per_epoch, got '{value}'"))),
            }
        }
        "l_sup" => t.sup = parse(key, value)?,
        "l_un" => t.un = parse(key, value)?,
        "l_ppa" => t.ppa = parse(key, value)?,
        "l_sft" => t.sft = parse(key, value)?,
        "l_cda" => t.cda = parse(key, value)?,
        "l_bns" => t.bns = parse(key, value)?,
        _ => return Err(Error::Format(format!("unknown config key '{key}'"))),
    }
    Ok(())
}

/// Applies every `key = value` line of `text`; `#` starts a comment.
pub fn apply_config(cfg: &mut AdaptConfig, text: &str) -> Result<()> {
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected 'key = value', got '{raw}'", n + 1)))?;
        set_field(cfg, key.trim(), value.trim())?;
    }
    cfg.validate()
}

pub fn load_config(path: impl AsRef<Path>, base: AdaptConfig) -> Result<AdaptConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg = base;
    apply_config(&mut cfg, &text)?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_and_comments() {
        let mut cfg = AdaptConfig::default();
        apply_config(&mut cfg, "# sweep\ngamma = 0.05\nl_cda = false  # off\nbank_schedule = per_epoch\n").unwrap();
        assert_eq!(cfg.gamma, 0.05);
        assert!(!cfg.toggles.cda);
        assert_eq!(cfg.bank_schedule, BankSchedule::PerEpoch);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        let mut cfg = AdaptConfig::default();
        assert!(apply_config(&mut cfg, "colour = red").is_err());
        assert!(apply_config(&mut cfg, "gamma 0.1").is_err());
        assert!(apply_config(&mut cfg, "gamma = -1").is_err());
        assert!(apply_config(&mut cfg, "ffp_fov_deg = 100").is_err());
    }
}
