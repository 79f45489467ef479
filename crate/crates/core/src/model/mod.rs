//! Quality model on top of a frozen feature pyramid.

pub mod aff;
pub mod cmp;
pub mod head;
pub mod layers;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeaturePyramid;
use crate::params::{ParamBuilder, ParamStore};
use crate::{Error, Result};
use aff::{Aff, SdaConfig};
use cmp::{CmpStage, CmpStageConfig, Perception};
use head::{pool_and_concat, Cae, CaeConfig, Regressor};
pub use layers::Mode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateDcn {
    /// One deformable kernel per channel.
    Depthwise,
    /// Full channel mixing.
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub resolution: usize,
    pub backbone: String,
    pub backbone_weights: std::path::PathBuf,
    pub fusion_channels: usize,
    pub ablate_cmp: bool,
    pub ablate_sda: bool,
    pub ablate_cae: bool,
    pub dropout: f64,
    pub regressor_hidden: usize,
    pub cae_expansion: usize,
    pub dcn_modulated: bool,
    pub sda_dcn: GateDcn,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            resolution: 224,
            backbone: "swinv2_t".into(),
            backbone_weights: "weights/swinv2_t.safetensors".into(),
            fusion_channels: 512,
            ablate_cmp: false,
            ablate_sda: false,
            ablate_cae: false,
            dropout: 0.1,
            regressor_hidden: 256,
            cae_expansion: 2,
            dcn_modulated: true,
            sda_dcn: GateDcn::Depthwise,
        }
    }
}

impl ModelConfig {
    /// Returns the names of offending fields.
    pub fn invalid_keys(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if self.resolution == 0 || !self.resolution.is_multiple_of(32) {
            bad.push("resolution".into());
        }
        if self.fusion_channels == 0 {
            bad.push("fusion_channels".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bad.push("dropout".into());
        }
        if self.regressor_hidden == 0 {
            bad.push("regressor_hidden".into());
        }
        if self.cae_expansion == 0 {
            bad.push("cae_expansion".into());
        }
        if crate::backbone::SwinV2Config::by_name(&self.backbone).is_none() {
            bad.push("backbone".into());
        }
        bad
    }

    pub fn validate(&self) -> Result<()> {
        let keys = self.invalid_keys();
        if keys.is_empty() {
            Ok(())
        } else {
            Err(Error::Config { keys })
        }
    }
}

/// Intermediate outputs of one forward pass.
pub struct ModelTrace {
    pub perception: [Tensor; 4],
    pub fused: Tensor,
    pub enhanced: Tensor,
    pub pooled: Tensor,
    pub score: Tensor,
}

pub struct VugaModel {
    pub config: ModelConfig,
    pub stage_channels: [usize; 4],
    pub perception: [Perception; 4],
    pub aff: Aff,
    pub cae: Option<Cae>,
    pub regressor: Regressor,
    params: ParamStore,
}

impl VugaModel {
    pub fn new(config: &ModelConfig, stage_channels: [usize; 4], seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        if !(0.0..1.0).contains(&config.dropout) || config.fusion_channels == 0 {
            return Err(Error::Config { keys: config.invalid_keys() });
        }
        let pb = ParamBuilder::new(seed, dtype, device);
        let fusion = config.fusion_channels;
        let build_stage = |i: usize| -> Result<Perception> {
            let p = pb.pp(format!("cmp.{i}"));
            Ok(if config.ablate_cmp {
                Perception::Projection(layers::Conv1x1::new(&p.pp("proj"), stage_channels[i], fusion)?)
            } else {
                let mut cfg = CmpStageConfig::new(stage_channels[i], fusion);
                cfg.dcn_modulated = config.dcn_modulated;
                Perception::Full(CmpStage::new(&p, &cfg)?)
            })
        };
        let perception = [build_stage(0)?, build_stage(1)?, build_stage(2)?, build_stage(3)?];
        let mut sda = SdaConfig::new(fusion);
        sda.dcn_modulated = config.dcn_modulated;
        if config.sda_dcn == GateDcn::Dense {
            sda.gate_dcn_groups = 1;
        }
        let aff = Aff::new(&pb.pp("aff"), &sda, !config.ablate_sda)?;
        let c4 = stage_channels[3];
        let cae = if config.ablate_cae {
            None
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1);
            let cfg = CaeConfig {
                in_channels: c4,
                expansion: config.cae_expansion,
                dropout_rate: config.dropout,
            };
            Some(Cae::new(&pb.pp("cae"), &cfg, rng)?)
        };
        let regressor = Regressor::new(&pb.pp("regressor"), c4 + fusion, config.regressor_hidden)?;
        Ok(Self {
            config: config.clone(),
            stage_channels,
            perception,
            aff,
            cae,
            regressor,
            params: pb.into_store(),
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn check(&self, pyramid: &FeaturePyramid) -> Result<()> {
        pyramid.validate(&self.stage_channels)
    }

    pub fn forward_traced(&self, pyramid: &FeaturePyramid, mode: Mode) -> Result<ModelTrace> {
        self.check(pyramid)?;
        let dtype = self.regressor.fc1.weight.dtype();
        let stage = |i: usize| -> Result<Tensor> {
            let f = pyramid.stages[i].to_dtype(dtype)?;
            Ok(layers::boundary(self.perception[i].forward(&f, mode)?, mode))
        };
        let perception = [stage(0)?, stage(1)?, stage(2)?, stage(3)?];
        let fused = self.aff.forward(&perception, mode)?;
        let f4 = pyramid.stages[3].to_dtype(dtype)?;
        let enhanced = match &self.cae {
            Some(cae) => cae.forward(&f4, mode)?,
            None => f4,
        };
        let pooled = pool_and_concat(&enhanced, &fused)?;
        let score = self.regressor.forward(&pooled)?;
        Ok(ModelTrace { perception, fused, enhanced, pooled, score })
    }

    /// One score per batch row, `[B]`.
    pub fn forward(&self, pyramid: &FeaturePyramid, mode: Mode) -> Result<Tensor> {
        Ok(self.forward_traced(pyramid, mode)?.score)
    }
}
