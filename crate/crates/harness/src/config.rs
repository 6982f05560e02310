//! Flat `section.key = value` configuration files.
//!
//! Every key must be consumed by the reader; leftovers are reported as
//! errors so a typo never silently falls back to a default.

use std::collections::BTreeMap;

use fmc_core::error::{Error, Result};
use fmc_core::model::{DetectSet, ModelConfig};

/// Parsed key/value pairs with consumption tracking.
#[derive(Debug, Clone)]
pub struct FlatConfig {
    entries: BTreeMap<String, String>,
}

impl FlatConfig {
    /// Parse the text form. Blank lines and `#` comments are skipped; every
    /// other line must look like `section.key = value`.
    pub fn parse(text: &str) -> Result<FlatConfig> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(
                    format!("line {}", lineno + 1),
                    format!("expected `section.key = value`, got {line:?}"),
                )
            })?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() || !key.contains('.') {
                return Err(Error::config(
                    format!("line {}", lineno + 1),
                    format!("key {key:?} must be dotted as `section.key`"),
                ));
            }
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::config(key, "duplicate key"));
            }
        }
        Ok(FlatConfig { entries })
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Remove and return a key, if present.
    pub fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn take_str(&mut self, key: &str, default: &str) -> String {
        self.take(key).unwrap_or_else(|| default.to_string())
    }

    pub fn take_usize(&mut self, key: &str, default: usize) -> Result<usize> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::config(key, format!("expected an integer, got {v:?}"))),
        }
    }

    pub fn take_u64(&mut self, key: &str, default: u64) -> Result<u64> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::config(key, format!("expected an integer, got {v:?}"))),
        }
    }

    pub fn take_f64(&mut self, key: &str, default: f64) -> Result<f64> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::config(key, format!("expected a number, got {v:?}"))),
        }
    }

    pub fn take_bool(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.take(key).as_deref() {
            None => Ok(default),
            Some("true") | Some("on") | Some("1") => Ok(true),
            Some("false") | Some("off") | Some("0") => Ok(false),
            Some(v) => Err(Error::config(key, format!("expected true/false, got {v:?}"))),
        }
    }

    /// Space-separated integer list of a fixed length.
    pub fn take_usize_list(&mut self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.take(key) {
            None => Ok(default.to_vec()),
            Some(v) => {
                let parsed: std::result::Result<Vec<usize>, _> =
                    v.split_whitespace().map(str::parse).collect();
                let list = parsed
                    .map_err(|_| Error::config(key, format!("expected integers, got {v:?}")))?;
                if list.len() != default.len() {
                    return Err(Error::config(
                        key,
                        format!("expected {} values, got {}", default.len(), list.len()),
                    ));
                }
                Ok(list)
            }
        }
    }

    /// Fail if any key was never consumed.
    pub fn finish(self) -> Result<()> {
        if let Some(key) = self.entries.keys().next() {
            return Err(Error::config(key, "unknown key"));
        }
        Ok(())
    }
}

/// Read the `model.*` section into a detector configuration. Missing keys
/// fall back to the tiny preset at the given extent.
pub fn model_from_config(cfg: &mut FlatConfig, default_extent: (usize, usize)) -> Result<ModelConfig> {
    let base = ModelConfig::tiny(default_extent);
    let widths = cfg.take_usize_list("model.widths", &base.widths)?;
    let blocks = cfg.take_usize_list("model.blocks", &base.blocks)?;
    let extent = cfg.take_usize_list(
        "model.extent",
        &[base.input_extent.0, base.input_extent.1],
    )?;
    let model = ModelConfig {
        widths: [widths[0], widths[1], widths[2], widths[3]],
        blocks: [blocks[0], blocks[1], blocks[2], blocks[3]],
        include_s5: cfg.take_bool("model.s5", base.include_s5)?,
        detect: match cfg.take("model.detect") {
            Some(v) => DetectSet::parse(&v)?,
            None => base.detect,
        },
        classes: cfg.take_usize("model.classes", base.classes)?,
        input_extent: (extent[0], extent[1]),
        use_wekat: cfg.take_bool("model.wekat", base.use_wekat)?,
        use_cpf: cfg.take_bool("model.cpf", base.use_cpf)?,
        use_mdfc: cfg.take_bool("model.mdfc", base.use_mdfc)?,
        alpha: cfg.take_f64("model.alpha", base.alpha)?,
        wave_levels: cfg.take_usize("model.wave_levels", base.wave_levels)?,
        akat_heads: cfg.take_usize("model.akat_heads", base.akat_heads)?,
        kan_groups: cfg.take_usize("model.kan_groups", base.kan_groups)?,
    };
    model.validate()?;
    Ok(model)
}

/// Serialize a model configuration back into the flat text form, so a
/// checkpoint can carry its architecture in a sidecar file.
pub fn model_to_config(m: &ModelConfig) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "model.widths = {} {} {} {}\n",
        m.widths[0], m.widths[1], m.widths[2], m.widths[3]
    ));
    s.push_str(&format!(
        "model.blocks = {} {} {} {}\n",
        m.blocks[0], m.blocks[1], m.blocks[2], m.blocks[3]
    ));
    s.push_str(&format!("model.s5 = {}\n", m.include_s5));
    s.push_str(&format!("model.detect = {}\n", m.detect.label()));
    s.push_str(&format!("model.classes = {}\n", m.classes));
    s.push_str(&format!(
        "model.extent = {} {}\n",
        m.input_extent.0, m.input_extent.1
    ));
    s.push_str(&format!("model.wekat = {}\n", m.use_wekat));
    s.push_str(&format!("model.cpf = {}\n", m.use_cpf));
    s.push_str(&format!("model.mdfc = {}\n", m.use_mdfc));
    s.push_str(&format!("model.alpha = {}\n", m.alpha));
    s.push_str(&format!("model.wave_levels = {}\n", m.wave_levels));
    s.push_str(&format!("model.akat_heads = {}\n", m.akat_heads));
    s.push_str(&format!("model.kan_groups = {}\n", m.kan_groups));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_skips_comments() {
        let mut c = FlatConfig::parse("# comment\n\ntrain.lr = 0.001\nscene.haze = 0.5\n").unwrap();
        assert_eq!(c.take_f64("train.lr", 0.0).unwrap(), 0.001);
        assert_eq!(c.take_f64("scene.haze", 0.0).unwrap(), 0.5);
        c.finish().unwrap();
    }

    #[test]
    fn unknown_keys_are_errors() {
        let mut c = FlatConfig::parse("train.lr = 0.001\ntrain.typo = 3\n").unwrap();
        let _ = c.take_f64("train.lr", 0.0).unwrap();
        let err = c.finish().unwrap_err();
        assert!(err.to_string().contains("train.typo"), "{err}");
    }

    #[test]
    fn rejects_malformed_lines_and_duplicates() {
        assert!(FlatConfig::parse("not a pair\n").is_err());
        assert!(FlatConfig::parse("nodot = 1\n").is_err());
        assert!(FlatConfig::parse("a.b = 1\na.b = 2\n").is_err());
    }

    #[test]
    fn typed_getters_validate() {
        let mut c = FlatConfig::parse("x.n = soup\n").unwrap();
        assert!(c.take_usize("x.n", 0).is_err());
        let mut c = FlatConfig::parse("x.b = maybe\n").unwrap();
        assert!(c.take_bool("x.b", false).is_err());
        let mut c = FlatConfig::parse("x.list = 1 2\n").unwrap();
        assert!(c.take_usize_list("x.list", &[0, 0, 0]).is_err());
    }

    #[test]
    fn model_round_trips_through_the_flat_form() {
        let m = ModelConfig::tiny((64, 64));
        let text = model_to_config(&m);
        let mut cfg = FlatConfig::parse(&text).unwrap();
        let back = model_from_config(&mut cfg, (8, 8)).unwrap();
        cfg.finish().unwrap();
        assert_eq!(back.widths, m.widths);
        assert_eq!(back.blocks, m.blocks);
        assert_eq!(back.include_s5, m.include_s5);
        assert_eq!(back.detect, m.detect);
        assert_eq!(back.classes, m.classes);
        assert_eq!(back.input_extent, m.input_extent);
        assert_eq!(back.use_wekat, m.use_wekat);
        assert_eq!(back.alpha, m.alpha);
    }

    #[test]
    fn model_defaults_to_the_tiny_preset() {
        let mut cfg = FlatConfig::parse("").unwrap();
        let m = model_from_config(&mut cfg, (32, 32)).unwrap();
        assert_eq!(m.widths, ModelConfig::tiny((32, 32)).widths);
        assert_eq!(m.input_extent, (32, 32));
    }
}
