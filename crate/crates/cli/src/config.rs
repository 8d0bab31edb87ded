//! `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys use the long
//! flag names (`bits`, `budget-ipc`, ...). A flag given on the command line
//! wins over the file, which wins over the built-in default.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

pub const KEYS: &[&str] = &[
    "seed",
    "bits",
    "patch",
    "budget-ipc",
    "refine",
    "refine-iterations",
    "post-iterations",
    "step-size",
    "weight-seed",
    "entropy",
    "groups",
    "bits-list",
    "groups-list",
    "methods",
    "mode",
    "when",
];

#[derive(Debug, Default, Clone)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value", n + 1))?;
            let key = key.trim();
            if !KEYS.contains(&key) {
                return Err(format!("line {}: unknown key `{key}`", n + 1));
            }
            values.insert(key.to_string(), value.trim().to_string());
        }
        Ok(Self { values })
    }

    /// Flag value, else file value, else `default`.
    pub fn resolve<T>(&self, key: &str, flag: Option<T>, default: T) -> Result<T, String>
    where
        T: FromStr,
        T::Err: Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.values.get(key) {
            Some(raw) => raw
                .parse()
                .map_err(|e| format!("invalid value `{raw}` for `{key}`: {e}")),
            None => Ok(default),
        }
    }

    /// Like [`resolve`](Self::resolve) for values parsed by `parse`.
    pub fn resolve_with<T>(
        &self,
        key: &str,
        flag: Option<&str>,
        default: &str,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<T, String> {
        let raw = flag.or(self.values.get(key).map(String::as_str)).unwrap_or(default);
        parse(raw).map_err(|e| format!("invalid value `{raw}` for `{key}`: {e}"))
    }
}

pub fn parse_patch(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X', '×'])
        .ok_or_else(|| "expected HxW".to_string())?;
    let h: usize = h.trim().parse().map_err(|e| format!("{e}"))?;
    let w: usize = w.trim().parse().map_err(|e| format!("{e}"))?;
    if h == 0 || w == 0 {
        return Err("patch sides must be positive".into());
    }
    Ok((h, w))
}

pub fn parse_list<T>(s: &str) -> Result<Vec<T>, String>
where
    T: FromStr,
    T::Err: Display,
{
    let items: Vec<T> = s
        .split(',')
        .map(|p| p.trim().parse::<T>().map_err(|e| format!("`{}`: {e}", p.trim())))
        .collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err("empty list".into());
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let cfg = ConfigFile::parse("# defaults\nbits = 4\n\npatch=3x3\n").unwrap();
        assert_eq!(cfg.resolve("bits", None, 2u8).unwrap(), 4);
        assert_eq!(cfg.resolve("bits", Some(8u8), 2).unwrap(), 8);
        assert_eq!(cfg.resolve("seed", None, 7u64).unwrap(), 7);
        assert_eq!(cfg.resolve_with("patch", None, "5x5", parse_patch).unwrap(), (3, 3));
        assert_eq!(cfg.resolve_with("patch", Some("2x4"), "5x5", parse_patch).unwrap(), (2, 4));
    }

    #[test]
    fn errors_name_the_field() {
        let err = ConfigFile::parse("bitz = 4").unwrap_err();
        assert!(err.contains("bitz"));
        let cfg = ConfigFile::parse("bits = many").unwrap();
        assert!(cfg.resolve("bits", None, 2u8).unwrap_err().contains("`bits`"));
        assert!(ConfigFile::parse("bits").is_err());
    }

    #[test]
    fn lists_and_patches() {
        assert_eq!(parse_list::<u8>("2, 3,4").unwrap(), vec![2, 3, 4]);
        assert!(parse_list::<u8>("2,,3").is_err());
        assert_eq!(parse_patch("5×5").unwrap(), (5, 5));
        assert!(parse_patch("0x5").is_err());
        assert!(parse_patch("5").is_err());
    }
}
