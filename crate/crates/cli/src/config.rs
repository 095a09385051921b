//! Run configuration as TOML: `key = value` pairs, dotted for nested
//! sections (`hyper.beta_rec = 0.2`). Every field has a default and unknown
//! keys are rejected.

use std::fs;
use std::path::Path;

use introprior_core::TrainConfig;
use toml::{Table, Value};

use crate::error::{CliError, CliResult, IoContext};

pub fn parse_config(text: &str) -> CliResult<TrainConfig> {
    let cfg: TrainConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> CliResult<TrainConfig> {
    let text = fs::read_to_string(path).at(path)?;
    parse_config(&text).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn config_to_toml(cfg: &TrainConfig) -> String {
    toml::to_string(cfg).expect("config serializes")
}

/// Sets `key` (dotted) in `table`, creating intermediate tables.
pub fn set_dotted(table: &mut Table, key: &str, value: Value) -> CliResult<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("malformed key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// `cfg` with each `(key, value)` applied, validated as a whole.
pub fn with_overrides(cfg: &TrainConfig, overrides: &[(String, Value)]) -> CliResult<TrainConfig> {
    let mut table = Table::try_from(cfg).map_err(|e| CliError::Config(e.to_string()))?;
    for (k, v) in overrides {
        set_dotted(&mut table, k, v.clone())?;
    }
    let text = toml::to_string(&table).map_err(|e| CliError::Config(e.to_string()))?;
    parse_config(&text)
}

/// Parses `key=value`, reading the value as a TOML literal and falling back
/// to a bare string.
pub fn parse_override(arg: &str) -> CliResult<(String, Value)> {
    let (k, v) = arg
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{arg}` is not key=value")))?;
    let k = k.trim().to_string();
    let v = v.trim();
    let value = format!("v = {v}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(v.to_string()));
    Ok((k, value))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(parse_config("").unwrap(), TrainConfig::default());
    }

    #[test]
    fn dotted_keys_and_sections_agree() {
        let a = parse_config("hyper.beta_rec = 0.2\nprior.kind = \"sg\"\n").unwrap();
        let b = parse_config("[hyper]\nbeta_rec = 0.2\n[prior]\nkind = \"sg\"\n").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hyper.beta_rec, 0.2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["bogus = 1", "hyper.beta_recc = 0.2", "[prior]\nmode = 3"] {
            assert!(matches!(parse_config(text), Err(CliError::Config(_))), "{text}");
        }
        assert!(parse_config("dataset = \"moons\"").is_err());
    }

    #[test]
    fn round_trip_through_toml() {
        let mut cfg = TrainConfig::default();
        cfg.hyper.beta_neg = 0.9;
        cfg.seed = 17;
        cfg.clip.k = Some(12.5);
        assert_eq!(parse_config(&config_to_toml(&cfg)).unwrap(), cfg);
    }

    #[test]
    fn overrides() {
        let base = TrainConfig::default();
        let o = vec![
            parse_override("hyper.beta_kl=0.3").unwrap(),
            parse_override("dataset=rings").unwrap(),
            parse_override("prior.modes = 8").unwrap(),
        ];
        let cfg = with_overrides(&base, &o).unwrap();
        assert_eq!((cfg.hyper.beta_kl, cfg.dataset.as_str(), cfg.prior.modes), (0.3, "rings", 8));
        assert!(with_overrides(&base, &[parse_override("hyper.nope=1").unwrap()]).is_err());
        assert!(parse_override("novalue").is_err());
    }
}
