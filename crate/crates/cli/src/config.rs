//! Experiment config files: `[section]` headers, `key = value` lines and
//! `#` comments. Values given as flags win over the file.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;

use crate::error::{CliError, CliResult};

const KNOWN: &[(&str, &[&str])] = &[
    ("data", &["dir", "synthetic", "width", "height", "seed"]),
    ("noise", &["model", "sigmas"]),
    ("decomp", &["patch", "stride", "mode", "masks"]),
    ("net", &["channels", "middle_layers", "kernel"]),
    ("pretrain", &["learning_rate", "batch_size", "epochs"]),
    ("finetune", &["learning_rate", "batch_size", "epochs"]),
    ("experiment", &["k", "seed"]),
    ("gating", &["features", "embedding_dim"]),
];

#[derive(Debug, Default)]
pub struct ConfigFile {
    path: PathBuf,
    ini: Option<Ini>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let err = |message: String| CliError::Config {
            path: path.to_path_buf(),
            message,
        };
        let ini = Ini::load_from_file_noescape(path).map_err(|e| err(e.to_string()))?;
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if let Some((k, _)) = props.iter().next() {
                    return Err(err(format!("key `{k}` outside any section")));
                }
                continue;
            };
            let keys = KNOWN
                .iter()
                .find(|(s, _)| *s == section)
                .map(|(_, k)| *k)
                .ok_or_else(|| err(format!("unknown section [{section}]")))?;
            for (k, _) in props.iter() {
                if !keys.contains(&k) {
                    return Err(err(format!("unknown key `{k}` in [{section}]")));
                }
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            ini: Some(ini),
        })
    }

    pub fn get<T: FromStr>(&self, section: &str, key: &str) -> CliResult<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        let Some(raw) = self
            .ini
            .as_ref()
            .and_then(|i| i.get_from(Some(section), key))
        else {
            return Ok(None);
        };
        // Trailing `# comment` on a value line.
        let raw = raw.split('#').next().unwrap_or("").trim();
        raw.parse().map(Some).map_err(|e| CliError::Config {
            path: self.path.clone(),
            message: format!("[{section}] {key} = `{raw}`: {e}"),
        })
    }

    /// Flag value, else config value, else `default`.
    pub fn pick<T: FromStr>(
        &self,
        flag: Option<T>,
        section: &str,
        key: &str,
        default: T,
    ) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        match flag {
            Some(v) => Ok(v),
            None => Ok(self.get(section, key)?.unwrap_or(default)),
        }
    }
}

/// Comma-separated list such as `0.01,0.03,0.05`.
#[derive(Debug, Clone, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: std::fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(|p| p.trim().parse::<T>().map_err(|e| format!("`{p}`: {e}")))
            .collect::<Result<Vec<_>, _>>()
            .and_then(|v| {
                if v.is_empty() {
                    Err("empty list".into())
                } else {
                    Ok(List(v))
                }
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(text: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("exp.ini");
        std::fs::write(&p, text).unwrap();
        (dir, p)
    }

    #[test]
    fn reads_values_and_flags_override() {
        let (_d, p) = write("# experiment\n[experiment]\nk = 3\nseed = 9 # trailing\n\n[noise]\nsigmas = 0.01, 0.05\n");
        let c = ConfigFile::load(Some(&p)).unwrap();
        assert_eq!(c.get::<usize>("experiment", "k").unwrap(), Some(3));
        assert_eq!(c.pick(None, "experiment", "seed", 0u64).unwrap(), 9);
        assert_eq!(c.pick(Some(1u64), "experiment", "seed", 0).unwrap(), 1);
        assert_eq!(c.pick(None, "net", "channels", 32usize).unwrap(), 32);
        let s: List<f32> = c.get("noise", "sigmas").unwrap().unwrap();
        assert_eq!(s.0, vec![0.01, 0.05]);
    }

    #[test]
    fn rejects_unknown_names_and_bad_values() {
        let (_d, p) = write("[experimnt]\nk = 3\n");
        assert!(ConfigFile::load(Some(&p)).is_err());
        let (_d, p) = write("[net]\nwidth = 3\n");
        assert!(ConfigFile::load(Some(&p)).is_err());
        let (_d, p) = write("k = 3\n");
        assert!(ConfigFile::load(Some(&p)).is_err());
        let (_d, p) = write("[net]\nchannels = many\n");
        let c = ConfigFile::load(Some(&p)).unwrap();
        assert!(c.get::<usize>("net", "channels").is_err());
    }
}
