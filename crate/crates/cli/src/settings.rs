//! `key=value` run settings: defaults, then a config file, then flags.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use vimkit::model::{Strategy, VimConfig};
use vimkit::train::TrainConfig;

const TRAIN_KEYS: [&str; 10] = [
    "strategy",
    "epochs",
    "lr",
    "lr_decay_factor",
    "lr_decay_epochs",
    "patience",
    "batch_size",
    "seed",
    "model_seed",
    "clip_grad_norm",
];

#[derive(Clone, Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                anyhow!("{}: line {}: expected key=value", origin.display(), n + 1)
            })?;
            values.insert(k.trim().to_string(), v.trim().to_string());
        }
        let model_keys: Vec<&str> = VimConfig::toy()
            .to_pairs()
            .into_iter()
            .map(|(k, _)| k)
            .collect();
        for k in values.keys() {
            if !TRAIN_KEYS.contains(&k.as_str()) && !model_keys.contains(&k.as_str()) {
                log::warn!("{}: ignoring unknown key `{k}`", origin.display());
            }
        }
        Ok(Settings { values })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Settings::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading {}", p.display()))?;
                Settings::parse(&text, p)
            }
        }
    }

    /// Flags win over the file.
    pub fn set(&mut self, key: &str, value: Option<impl Display>) {
        if let Some(v) = value {
            self.values.insert(key.to_string(), v.to_string());
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.values
            .get(key)
            .map(|v| v.parse().map_err(|_| anyhow!("{key}: cannot parse `{v}`")))
            .transpose()
    }

    pub fn model_config(&self, base: VimConfig) -> Result<VimConfig> {
        let mut cfg = base;
        cfg.apply_pairs(&self.values)?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let epochs = self.get("epochs")?.unwrap_or(20);
        let mut cfg = TrainConfig::new(epochs);
        cfg.strategy = self
            .get::<Strategy>("strategy")?
            .unwrap_or(Strategy::Scratch);
        if let Some(v) = self.get("lr")? {
            cfg.base_lr = v;
        }
        if let Some(v) = self.get("lr_decay_factor")? {
            cfg.lr_decay_factor = v;
        }
        if let Some(v) = self.values.get("lr_decay_epochs") {
            cfg.lr_decay_epochs = v
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| anyhow!("lr_decay_epochs: cannot parse `{s}`"))
                })
                .collect::<Result<_>>()?;
        }
        if let Some(v) = self.get("patience")? {
            cfg.patience = v;
        }
        if let Some(v) = self.get("batch_size")? {
            cfg.batch_size = v;
        }
        if let Some(v) = self.get("seed")? {
            cfg.seed = v;
        }
        cfg.clip_grad_norm = match self.values.get("clip_grad_norm").map(String::as_str) {
            None | Some("none") => None,
            Some(_) => self.get("clip_grad_norm")?,
        };
        if cfg.max_epochs == 0 {
            bail!("epochs must be positive");
        }
        Ok(cfg)
    }
}

/// The settings a run actually used, one `key=value` per line.
pub fn resolved(
    model: &VimConfig,
    train: Option<&TrainConfig>,
    extra: &[(&str, String)],
) -> String {
    let mut out = String::new();
    for (k, v) in extra {
        out.push_str(&format!("{k}={v}\n"));
    }
    if let Some(t) = train {
        let decay: Vec<String> = t.lr_decay_epochs.iter().map(|e| e.to_string()).collect();
        let pairs = [
            ("strategy", t.strategy.to_string()),
            ("epochs", t.max_epochs.to_string()),
            ("lr", t.base_lr.to_string()),
            ("lr_decay_factor", t.lr_decay_factor.to_string()),
            ("lr_decay_epochs", decay.join(",")),
            ("patience", t.patience.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("seed", t.seed.to_string()),
            (
                "clip_grad_norm",
                t.clip_grad_norm
                    .map(|c| c.to_string())
                    .unwrap_or_else(|| "none".into()),
            ),
        ];
        for (k, v) in pairs {
            out.push_str(&format!("{k}={v}\n"));
        }
    }
    for (k, v) in model.to_pairs() {
        out.push_str(&format!("{k}={v}\n"));
    }
    out
}
