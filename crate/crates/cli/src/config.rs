//! Flat `key = value` configuration files with command-line overrides.

use std::path::Path;

use serde::de::DeserializeOwned;
use toml::{Table, Value};

use crate::CliError;

/// Loads an optional config file and applies `key=value` overrides on top.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Table, CliError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            text.parse::<Table>().map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    if let Some((key, _)) =
        table.iter().find(|(_, v)| v.is_table() || v.as_array().is_some_and(|a| a.iter().any(toml::Value::is_table)))
    {
        return Err(CliError::Usage(format!("config must be flat; `{key}` is a table")));
    }
    for item in overrides {
        let (key, raw) =
            item.split_once('=').ok_or_else(|| CliError::Usage(format!("override {item:?} is not KEY=VALUE")))?;
        table.insert(key.trim().to_string(), parse_value(raw.trim()));
    }
    Ok(table)
}

/// A TOML literal if it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Removes and returns `key`.
pub fn take<T: DeserializeOwned>(table: &mut Table, key: &str) -> Result<Option<T>, CliError> {
    match table.remove(key) {
        None => Ok(None),
        Some(v) => v.try_into().map(Some).map_err(|e| CliError::Usage(format!("config key `{key}`: {e}"))),
    }
}

/// Deserialises the remaining keys; unknown keys are an error.
pub fn finish<T: DeserializeOwned>(table: Table, what: &str) -> Result<T, CliError> {
    Value::Table(table).try_into().map_err(|e| CliError::Usage(format!("{what} config: {e}")))
}

/// The seed from the flag, else from the config; one of them is required.
pub fn seed(flag: Option<u64>, table: &mut Table) -> Result<u64, CliError> {
    let from_file: Option<u64> = take(table, "seed")?;
    flag.or(from_file).ok_or_else(|| CliError::Usage("a seed is required (--seed or `seed` in the config)".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_as_toml_literals() {
        let t = load(None, &["a=3".into(), "b = 0.5".into(), "c=true".into(), "d=gp".into()]).unwrap();
        assert_eq!(t["a"], Value::Integer(3));
        assert_eq!(t["b"], Value::Float(0.5));
        assert_eq!(t["c"], Value::Boolean(true));
        assert_eq!(t["d"], Value::String("gp".into()));
        assert!(load(None, &["novalue".into()]).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut t = load(None, &["learning_rate=0.1".into(), "typo=1".into()]).unwrap();
        assert_eq!(take::<f64>(&mut t, "learning_rate").unwrap(), Some(0.1));
        assert!(finish::<gpuq::svgp::TrainConfig>(t, "gp").is_err());
    }

    #[test]
    fn seed_is_required() {
        assert!(seed(None, &mut Table::new()).is_err());
        let mut t = load(None, &["seed=4".into()]).unwrap();
        assert_eq!(seed(None, &mut t).unwrap(), 4);
        assert_eq!(seed(Some(9), &mut load(None, &["seed=4".into()]).unwrap()).unwrap(), 9);
    }
}
