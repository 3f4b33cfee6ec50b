//! Flat TOML config files merged under command-line flags.
//!
//! Every command has a typed config with defaults. A file may set any of its
//! keys; flags override file values; unknown keys are rejected. The merged
//! result is kept as JSON so it can be written into the run manifest verbatim.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use vlprobe::Error;

pub fn resolve<T>(file: Option<&Path>, overrides: Vec<(&str, Value)>) -> Result<Value, Error>
where
    T: Serialize + DeserializeOwned + Default,
{
    let Value::Object(mut merged) = serde_json::to_value(T::default()).expect("config serializes") else {
        unreachable!("configs are structs")
    };
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let table: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let table = serde_json::to_value(table).map_err(|e| Error::Config(e.to_string()))?;
        let Value::Object(table) = table else { unreachable!() };
        set_all(&mut merged, table)?;
    }
    set_all(&mut merged, overrides.into_iter().map(|(k, v)| (k.to_string(), v)).collect())?;
    let merged = Value::Object(merged);
    parse::<T>(&merged)?;
    Ok(merged)
}

fn set_all(into: &mut Map<String, Value>, from: Map<String, Value>) -> Result<(), Error> {
    for (key, value) in from {
        match into.get_mut(&key) {
            Some(slot) => *slot = value,
            None => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
    }
    Ok(())
}

pub fn parse<T: DeserializeOwned>(value: &Value) -> Result<T, Error> {
    serde_json::from_value(value.clone()).map_err(|e| Error::Config(e.to_string()))
}

/// Helper for optional flags.
pub fn flag<T: Serialize>(key: &'static str, value: Option<T>) -> Option<(&'static str, Value)> {
    value.map(|v| (key, serde_json::to_value(v).expect("flag serializes")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use vlprobe::probing::ProbeConfig;

    #[test]
    fn flags_beat_file_and_unknown_keys_fail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "k = 3\nitm_threshold = 0.25\nconditions = [\"guided\"]\n").unwrap();
        let v = resolve::<ProbeConfig>(Some(&path), vec![("k", 7.into())]).unwrap();
        let c: ProbeConfig = parse(&v).unwrap();
        assert_eq!(c.k, 7);
        assert_eq!(c.itm_threshold, 0.25);
        assert_eq!(c.conditions.len(), 1);

        std::fs::write(&path, "kk = 3\n").unwrap();
        assert!(matches!(resolve::<ProbeConfig>(Some(&path), vec![]), Err(Error::Config(_))));
        std::fs::write(&path, "k = \"three\"\n").unwrap();
        assert!(matches!(resolve::<ProbeConfig>(Some(&path), vec![]), Err(Error::Config(_))));
    }
}
