//! Plain-text `key=value` run configuration.
//!
//! One file addresses network, training and generator settings; keys are
//! routed to whichever section knows them and unknown keys are rejected.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::dataset::parse_key_values;
use crate::harness::synth::GenConfig;
use crate::harness::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub gen: GenConfig,
}

impl RunConfig {
    /// Applies settings in order; `variant` is applied before any other
    /// network key so explicit values win over variant defaults.
    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        let pairs: Vec<_> = pairs.into_iter().collect();
        let ordered = pairs
            .iter()
            .filter(|(k, _)| *k == "variant")
            .chain(pairs.iter().filter(|(k, _)| *k != "variant"));
        for &(k, v) in ordered {
            if !self.train.set(k, v)? && !self.gen.set(k, v)? {
                return Err(Error::Config(format!("unknown setting {k:?}")));
            }
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = parse_key_values(text)?;
        let mut c = Self::default();
        c.apply(kv.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        Ok(c)
    }

    /// Reads `path` (when given), then applies `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut c = match path {
            Some(p) => Self::from_text(&fs::read_to_string(p).map_err(|e| {
                Error::Config(format!("cannot read config {}: {e}", p.display()))
            })?)?,
            None => Self::default(),
        };
        c.apply(overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        c.train.validate()?;
        c.gen.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# network and training\n");
        for (k, v) in self.train.to_pairs() {
            s.push_str(&format!("{k}={v}\n"));
        }
        s.push_str("# generator\n");
        for (k, v) in self.gen.to_pairs() {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }
}

/// Splits `key=value` command-line overrides.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| Error::Config(format!("override must look like key=value, got {s:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::MotionMode;
    use crate::net::Variant;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.apply([("variant", "v4"), ("lr", "0.01"), ("occlusion_rate", "0.4")]).unwrap();
        let back = RunConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.train.net.motion, MotionMode::Off);
    }

    #[test]
    fn explicit_keys_beat_variant() {
        let c = RunConfig::from_text("t=20\nvariant=v6\n").unwrap();
        assert_eq!(c.train.net.variant, Variant::V6);
        assert_eq!(c.train.net.t, 20);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = RunConfig::from_text("bogus=1").unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
        assert!(parse_override("nope").is_err());
    }
}
