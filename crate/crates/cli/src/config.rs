//! `key=value` run configuration: parsing, layering and resolution into a
//! [`TrainConfig`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use evsnn_core::network::ArchKind;
use evsnn_core::training::{ModelKind, TrainConfig};
use evsnn_core::{Error, Result};

/// Every accepted key, in the order the resolved config is written.
pub const KEYS: &[&str] = &[
    "model",
    "arch",
    "channels",
    "blocks",
    "ft",
    "fh",
    "fw",
    "stem",
    "classes",
    "height",
    "width",
    "vth",
    "vreset",
    "alpha",
    "optimizer",
    "lr0",
    "epochs",
    "batch_size",
    "seed",
    "frames",
    "train_frames",
    "segments",
    "frames_per_segment",
    "consensus",
    "momentum",
    "clip_norm",
    "checkpoint_every",
];

/// Raw key/value settings; later writes win.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    /// Parses newline-delimited `key=value` text. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            s.set_pair(line).map_err(|e| Error::Validation(format!("line {}: {e}", n + 1)))?;
        }
        Ok(s)
    }

    /// Applies one `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Validation(format!("expected key=value, got {pair:?}")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KEYS.contains(&key) {
            return Err(Error::Validation(format!("unknown config key {key:?}")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| v.parse().map_err(|_| Error::Validation(format!("{key}={v} is not a valid value"))))
            .transpose()
    }

    /// Builds the full configuration. `frames`, `height` and `width` fall back
    /// to the data's dimensions when not set.
    pub fn resolve(&self, data_dims: Option<(usize, usize, usize)>) -> Result<TrainConfig> {
        let model: ModelKind = self.parsed("model")?.unwrap_or(ModelKind::TsSnn);
        let dim = |key: &str, from_data: Option<usize>| -> Result<usize> {
            self.parsed(key)?
                .or(from_data)
                .ok_or_else(|| Error::Validation(format!("{key} is not set and there is no data to infer it from")))
        };
        let height = dim("height", data_dims.map(|d| d.1))?;
        let width = dim("width", data_dims.map(|d| d.2))?;
        let mut cfg = TrainConfig::new(model, height, width);
        if let Some((frames, _, _)) = data_dims {
            cfg.frames = frames;
        }

        if let Some(kind) = self.parsed::<ArchKind>("arch")? {
            cfg.arch.kind = kind;
        }
        let a = &mut cfg.arch;
        macro_rules! take {
            ($key:literal, $field:expr) => {
                if let Some(v) = self.parsed($key)? {
                    $field = v;
                }
            };
        }
        take!("channels", a.channels);
        take!("blocks", a.blocks);
        take!("ft", a.kernel[0]);
        take!("fh", a.kernel[1]);
        take!("fw", a.kernel[2]);
        take!("stem", a.stem_kernel);
        take!("classes", a.classes);
        take!("vth", a.v_th);
        take!("vreset", a.v_reset);
        take!("alpha", a.alpha);
        take!("optimizer", cfg.optimizer);
        take!("lr0", cfg.lr0);
        take!("epochs", cfg.epochs);
        take!("batch_size", cfg.batch_size);
        take!("seed", cfg.seed);
        take!("frames", cfg.frames);
        take!("train_frames", cfg.train_frames);
        take!("segments", cfg.segments);
        take!("frames_per_segment", cfg.frames_per_segment);
        take!("consensus", cfg.consensus);
        take!("momentum", cfg.momentum);
        take!("checkpoint_every", cfg.checkpoint_every);
        cfg.clip_norm = match self.get("clip_norm") {
            None | Some("none") => None,
            Some(_) => self.parsed("clip_norm")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Writes every key of `cfg` so the file alone reproduces the run.
pub fn render(cfg: &TrainConfig) -> String {
    let a = &cfg.arch;
    let clip = cfg.clip_norm.map_or("none".to_string(), |c| c.to_string());
    let values: Vec<String> = vec![
        cfg.model.to_string(),
        a.kind.to_string(),
        a.channels.to_string(),
        a.blocks.to_string(),
        a.kernel[0].to_string(),
        a.kernel[1].to_string(),
        a.kernel[2].to_string(),
        a.stem_kernel.to_string(),
        a.classes.to_string(),
        a.height.to_string(),
        a.width.to_string(),
        a.v_th.to_string(),
        a.v_reset.to_string(),
        a.alpha.to_string(),
        cfg.optimizer.to_string(),
        cfg.lr0.to_string(),
        cfg.epochs.to_string(),
        cfg.batch_size.to_string(),
        cfg.seed.to_string(),
        cfg.frames.to_string(),
        cfg.train_frames.to_string(),
        cfg.segments.to_string(),
        cfg.frames_per_segment.to_string(),
        cfg.consensus.to_string(),
        cfg.momentum.to_string(),
        clip,
        cfg.checkpoint_every.to_string(),
    ];
    let mut out = String::from("# resolved configuration\n");
    for (k, v) in KEYS.iter().zip(values) {
        writeln!(out, "{k}={v}").unwrap();
    }
    out
}
