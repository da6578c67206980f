//! Plain-text `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ecloss_core::ecloss::{BetaSchedule, LossConfig};
use ecloss_core::nn::NetworkSpec;
use ecloss_core::synthdata::DatasetSpec;
use ecloss_core::templates::TemplateParams;

/// Every recognized key with its default.
pub const KEYS: &[(&str, &str)] = &[
    ("data.identities", "10"),
    ("data.per_identity", "200"),
    ("data.size", "56"),
    ("data.jitter", "0.05"),
    ("data.noise", "0.05"),
    ("data.seed", "0"),
    ("net.spec", "reference"),
    ("net.channels", "16"),
    ("net.init", "glorot"),
    ("templates.tau", "0.001"),
    ("templates.radius", "4"),
    ("templates.grid", "auto"),
    ("templates.count", "400"),
    ("templates.seed", "0"),
    ("loss.alpha", "1"),
    ("loss.beta", "1e-5"),
    ("loss.schedule", "fixed"),
    ("loss.window", "50"),
    ("train.lr", "0.03"),
    ("train.batch", "64"),
    ("train.epochs", "10"),
    ("train.split", "0.8"),
    ("seed", "0"),
    ("metrics.prominence_min", "auto"),
    ("metrics.literal_ls", "false"),
    ("viz.alpha", "0.5"),
    ("out", "out"),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

type Result<T> = std::result::Result<T, ConfigError>;

fn err<T>(msg: impl Into<String>) -> Result<T> {
    Err(ConfigError(msg.into()))
}

pub fn is_key(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Glorot,
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return err(format!("line {}: expected key = value", n + 1));
            };
            config
                .set(key.trim(), value.trim())
                .map_err(|e| ConfigError(format!("line {}: {e}", n + 1)))?;
        }
        Ok(config)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !is_key(key) {
            return err(format!("unknown config key '{key}'"));
        }
        if value.is_empty() {
            return err(format!("empty value for '{key}'"));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        &self.values[key]
    }

    fn typed<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key);
        raw.parse()
            .map_err(|_| ConfigError(format!("invalid value '{raw}' for '{key}'")))
    }

    /// Resolved configuration, one `key = value` per line in key order.
    pub fn render(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        Ok(DatasetSpec {
            n_identities: self.typed("data.identities")?,
            samples_per_identity: self.typed("data.per_identity")?,
            image_size: self.typed("data.size")?,
            jitter_radius: self.typed("data.jitter")?,
            noise_std: self.typed("data.noise")?,
            seed: self.typed("data.seed")?,
        })
    }

    /// Network for an `image_size` input and `classes` outputs.
    pub fn network_spec(&self, image_size: usize, classes: usize) -> Result<NetworkSpec> {
        let spec = match self.get("net.spec") {
            "reference" => NetworkSpec::reference(image_size, self.typed("net.channels")?, classes),
            s => s
                .parse()
                .map_err(|e| ConfigError(format!("invalid net.spec: {e}")))?,
        };
        spec.validate()
            .map_err(|e| ConfigError(format!("invalid network: {e}")))?;
        Ok(spec)
    }

    pub fn init(&self) -> Result<Init> {
        match self.get("net.init") {
            "glorot" => Ok(Init::Glorot),
            "zero" => Ok(Init::Zero),
            other => err(format!("net.init must be glorot or zero, got '{other}'")),
        }
    }

    /// Template parameters; an `auto` grid follows the target layer's map size.
    pub fn template_params(&self, target_hw: Option<(usize, usize)>) -> Result<TemplateParams> {
        let (h, w) = match (self.get("templates.grid"), target_hw) {
            ("auto", Some(hw)) => hw,
            ("auto", None) => {
                let spec = self.dataset_spec()?;
                let net = self.network_spec(spec.image_size, spec.n_identities)?;
                let (_, h, w) = net
                    .target_shape()
                    .map_err(|e| ConfigError(e.to_string()))?;
                (h, w)
            }
            (g, hw) => {
                let parsed = parse_grid(g)?;
                if let Some(hw) = hw {
                    if hw != parsed {
                        return err(format!(
                            "templates.grid {}x{} does not match the {}x{} target maps",
                            parsed.0, parsed.1, hw.0, hw.1
                        ));
                    }
                }
                parsed
            }
        };
        TemplateParams::new(h, w, self.typed("templates.tau")?, self.typed("templates.radius")?)
            .map_err(|e| ConfigError(e.to_string()))
    }

    pub fn template_count(&self) -> Result<usize> {
        self.typed("templates.count")
    }

    pub fn template_seed(&self) -> Result<u64> {
        self.typed("templates.seed")
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        let beta_schedule = match self.get("loss.schedule") {
            "fixed" => BetaSchedule::Fixed,
            "auto" => match BetaSchedule::auto_default() {
                BetaSchedule::Auto { up, down, min, max, .. } => BetaSchedule::Auto {
                    window: self.typed("loss.window")?,
                    up,
                    down,
                    min,
                    max,
                },
                fixed => fixed,
            },
            other => return err(format!("loss.schedule must be fixed or auto, got '{other}'")),
        };
        let config = LossConfig {
            alpha: self.typed("loss.alpha")?,
            beta: self.typed("loss.beta")?,
            beta_schedule,
        };
        config.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(config)
    }

    pub fn learning_rate(&self) -> Result<f64> {
        self.typed("train.lr")
    }

    pub fn batch_size(&self) -> Result<usize> {
        self.typed("train.batch")
    }

    pub fn epochs(&self) -> Result<usize> {
        self.typed("train.epochs")
    }

    pub fn split(&self) -> Result<f64> {
        self.typed("train.split")
    }

    pub fn seed(&self) -> Result<u64> {
        self.typed("seed")
    }

    pub fn prominence_min(&self) -> Result<Option<f64>> {
        match self.get("metrics.prominence_min") {
            "auto" => Ok(None),
            _ => {
                let v: f64 = self.typed("metrics.prominence_min")?;
                if !(v.is_finite() && v >= 0.0) {
                    return err("metrics.prominence_min must be a non-negative number or auto");
                }
                Ok(Some(v))
            }
        }
    }

    pub fn literal_ls(&self) -> Result<bool> {
        self.typed("metrics.literal_ls")
    }

    pub fn overlay_alpha(&self) -> Result<f64> {
        self.typed("viz.alpha")
    }

    pub fn out_dir(&self) -> &str {
        self.get("out")
    }
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let parsed = s
        .split_once('x')
        .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)));
    match parsed {
        Some(hw) => Ok(hw),
        None => err(format!("templates.grid must be auto or HxW, got '{s}'")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_cover_every_key() {
        let c = RunConfig::default();
        let rendered = c.render();
        assert_eq!(rendered.lines().count(), KEYS.len());
        assert_eq!(RunConfig::parse(&rendered).unwrap(), c);
    }

    #[test]
    fn defaults_resolve() {
        let c = RunConfig::default();
        assert_eq!(c.dataset_spec().unwrap(), DatasetSpec::default());
        let tp = c.template_params(None).unwrap();
        assert_eq!((tp.height, tp.width, tp.tau, tp.radius), (14, 14, 0.001, 4.0));
        assert_eq!(c.template_count().unwrap(), 400);
        assert_eq!(c.learning_rate().unwrap(), 0.03);
        let loss = c.loss_config().unwrap();
        assert_eq!((loss.alpha, loss.beta), (1.0, 1e-5));
        assert_eq!(c.prominence_min().unwrap(), None);
    }

    #[test]
    fn unknown_and_malformed_keys() {
        assert!(RunConfig::parse("train.lr = 0.1\n# comment\n\n").is_ok());
        assert!(RunConfig::parse("train.learning_rate = 0.1").is_err());
        assert!(RunConfig::parse("train.lr 0.1").is_err());
        let c = RunConfig::parse("train.lr = fast").unwrap();
        assert!(c.learning_rate().is_err());
    }

    #[test]
    fn grid_must_match_target() {
        let mut c = RunConfig::default();
        c.set("templates.grid", "10x10").unwrap();
        assert!(c.template_params(Some((14, 14))).is_err());
        assert_eq!(c.template_params(None).unwrap().height, 10);
        c.set("templates.grid", "ten").unwrap();
        assert!(c.template_params(None).is_err());
    }

    #[test]
    fn auto_schedule_uses_window() {
        let mut c = RunConfig::default();
        c.set("loss.schedule", "auto").unwrap();
        c.set("loss.window", "7").unwrap();
        assert!(matches!(
            c.loss_config().unwrap().beta_schedule,
            BetaSchedule::Auto { window: 7, .. }
        ));
    }
}
