//! The run configuration: one TOML tree covering every module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::{CodecConfig, CodecTrainConfig};
use crate::dil::{IdentityEncoderConfig, IdentityTrainConfig};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::fal::FalSpace;
use crate::metrics::{RegressorConfig, RegressorTrainConfig};
use crate::trainer::{ModelConfig, SwapOptions, TrainConfig};
use crate::videodata::SyntheticDatasetConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, replaces every module seed on [`RunConfig::resolve`].
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub data: SyntheticDatasetConfig,
    pub codec: CodecConfig,
    pub codec_train: CodecTrainConfig,
    pub idenc: IdentityEncoderConfig,
    pub idenc_train: IdentityTrainConfig,
    pub regressor: RegressorConfig,
    pub regressor_train: RegressorTrainConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub swap: SwapOptions,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            out_dir: PathBuf::from("runs/default"),
            data: SyntheticDatasetConfig::default(),
            codec: CodecConfig::default(),
            codec_train: CodecTrainConfig::default(),
            idenc: IdentityEncoderConfig::default(),
            idenc_train: IdentityTrainConfig::default(),
            regressor: RegressorConfig::default(),
            regressor_train: RegressorTrainConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            swap: SwapOptions::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(config_err)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(config_err)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => e.into(),
        })?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    /// Applies `a.b.c=value` overrides. Values parse as TOML literals and fall
    /// back to bare strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut tree = toml::Value::try_from(self).map_err(config_err)?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
            let value = parse_value(raw.trim());
            let path: Vec<&str> = key.trim().split('.').collect();
            let (leaf, parents) = path.split_last().expect("split yields one item");
            let mut node = &mut tree;
            for p in parents {
                node = node
                    .get_mut(*p)
                    .filter(|n| n.is_table())
                    .ok_or_else(|| Error::Config(format!("unknown config section `{p}` in `{key}`")))?;
            }
            node.as_table_mut()
                .expect("checked table")
                .insert(leaf.to_string(), value);
        }
        tree.try_into().map_err(config_err)
    }

    /// Propagates the run seed and checks cross-module consistency.
    pub fn resolve(&self) -> Result<Self> {
        let mut c = self.clone();
        if let Some(s) = c.seed {
            c.data.seed = s;
            c.codec_train.seed = s;
            c.idenc_train.seed = s;
            c.regressor_train.seed = s;
            c.train.seed = s;
            c.swap.seed = s;
            c.eval.seed = s;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model.validate().map_err(config_err)?;
        self.train.validate().map_err(config_err)?;
        self.idenc.validate().map_err(config_err)?;
        self.swap.schedule.validate().map_err(config_err)?;
        self.eval.validate()?;
        if self.data.clips == 0 || self.data.frames == 0 || self.data.identities == 0 {
            return bad("data.clips, data.frames and data.identities must be positive".into());
        }
        if self.data.height % self.codec.factor != 0 || self.data.width % self.codec.factor != 0 {
            return bad(format!("frame size must be divisible by codec.factor {}", self.codec.factor));
        }
        if self.model.denoiser.latent_channels != self.codec.latent_channels() {
            return bad(format!(
                "model.denoiser.latent_channels {} != codec latent channels {}",
                self.model.denoiser.latent_channels,
                self.codec.latent_channels()
            ));
        }
        let fal_in = match self.model.fal.space {
            FalSpace::Latent => self.codec.latent_channels(),
            FalSpace::Pixel => 3 * self.codec.factor * self.codec.factor,
        };
        if self.model.fal.input_channels != fal_in {
            return bad(format!("model.fal.input_channels must be {fal_in}"));
        }
        if self.model.fal.id_dim != self.idenc.embed_dim {
            return bad(format!("model.fal.id_dim must equal idenc.embed_dim {}", self.idenc.embed_dim));
        }
        if self.model.denoiser.frames > self.data.frames {
            return bad(format!(
                "model.denoiser.frames {} exceeds data.frames {}",
                self.model.denoiser.frames, self.data.frames
            ));
        }
        Ok(())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    match toml::from_str::<Wrap>(&format!("v = {raw}")) {
        Ok(w) => w.v,
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
        c.resolve().unwrap();
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = RunConfig::from_toml("[train]\ntotal_steps = 7\n").unwrap();
        assert_eq!(c.train.total_steps, 7);
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[train]\nstepz = 1\n"), Err(Error::Config(_))));
        let c = RunConfig::default();
        assert!(c.with_overrides(&["train.stepz=1"]).is_err());
        assert!(c.with_overrides(&["nope.total_steps=1"]).is_err());
        assert!(c.with_overrides(&["train.total_steps"]).is_err());
    }

    #[test]
    fn overrides_parse_literals() {
        let c = RunConfig::default()
            .with_overrides(&[
                "train.total_steps=12",
                "train.warmup_steps=3",
                "train.learning_rate = 3e-4",
                "model.denoiser.channel_mult=[1, 1]",
                "model.fal.space=pixel",
                "out_dir=/tmp/x",
                "swap.clip_len=4",
                "seed=9",
            ])
            .unwrap();
        assert_eq!(c.train.total_steps, 12);
        assert_eq!(c.train.learning_rate, 3e-4);
        assert_eq!(c.model.denoiser.channel_mult, vec![1, 1]);
        assert_eq!(c.model.fal.space, FalSpace::Pixel);
        assert_eq!(c.out_dir, PathBuf::from("/tmp/x"));
        assert_eq!(c.swap.clip_len, Some(4));
        let r = c.with_overrides(&["model.fal.space=latent"]).unwrap().resolve().unwrap();
        assert_eq!((r.train.seed, r.data.seed, r.eval.seed), (9, 9, 9));
    }

    #[test]
    fn inconsistent_modules_fail_validation() {
        let c = RunConfig::default().with_overrides(&["model.fal.id_dim=7"]).unwrap();
        assert!(matches!(c.resolve(), Err(Error::Config(_))));
        let c = RunConfig::default().with_overrides(&["model.denoiser.frames=99"]).unwrap();
        assert!(matches!(c.resolve(), Err(Error::Config(_))));
    }
}
