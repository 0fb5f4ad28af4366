//! Encoder and decoder parameters under one set, with the configurations
//! that shape them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{self, CaptionHypothesis, DecoderConfig};
use crate::encoder::{self, EncoderConfig, EncoderOutput, RegionFeatures};
use crate::error::{Error, Result};
use crate::tensor::ParameterSet;
use crate::text::TokenContext;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    /// Both halves sized for `vocab_size`, sharing hidden size and heads.
    pub fn toy(vocab_size: usize, region_dim: usize) -> Self {
        let encoder = EncoderConfig {
            hidden: 32,
            heads: 4,
            language_layers: 1,
            visual_layers: 1,
            cross_layers: 1,
            ffn_hidden: 64,
            region_dim,
            vocab_size,
            max_text_len: 64,
            max_segments: 8,
            box_geometry: false,
        };
        let decoder = DecoderConfig {
            hidden: 32,
            heads: 4,
            layers: 2,
            ffn_hidden: 64,
            vocab_size,
            max_len: decoder::DEFAULT_MAX_LEN,
        };
        Self { encoder, decoder }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut issues = encoder::validate_config(&self.encoder);
        issues.extend(decoder::validate_config(&self.decoder));
        if self.encoder.hidden != self.decoder.hidden {
            issues.push(format!(
                "encoder hidden size {} differs from decoder hidden size {}",
                self.encoder.hidden, self.decoder.hidden
            ));
        }
        issues
    }

    pub fn check(&self) -> Result<()> {
        let issues = self.validate();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }
}

#[derive(Debug, Clone)]
pub struct CaptionModel {
    pub config: ModelConfig,
    pub params: ParameterSet,
}

impl CaptionModel {
    /// Freshly initialized parameters; the seed fixes every value.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        encoder::init_params(&mut params, &config.encoder, &mut rng)?;
        decoder::init_params(&mut params, &config.decoder, &mut rng)?;
        Ok(Self { config, params })
    }

    pub fn encode(&self, regions: &RegionFeatures, context: &TokenContext) -> Result<EncoderOutput> {
        encoder::encode(regions, context, &self.params, &self.config.encoder)
    }

    pub fn teacher_forced_loss(&self, encoded: &EncoderOutput, target: &[usize]) -> Result<f64> {
        decoder::teacher_forced_loss(encoded, target, &self.params, &self.config.decoder)
    }

    pub fn greedy(&self, encoded: &EncoderOutput) -> Result<CaptionHypothesis> {
        decoder::greedy_decode(encoded, &self.params, &self.config.decoder, self.config.decoder.max_len)
    }

    pub fn beam(&self, encoded: &EncoderOutput, beam_width: usize) -> Result<CaptionHypothesis> {
        decoder::beam_search(
            encoded,
            &self.params,
            &self.config.decoder,
            beam_width,
            self.config.decoder.max_len,
        )
    }

    pub fn sample(&self, encoded: &EncoderOutput, seed: u64) -> Result<CaptionHypothesis> {
        decoder::sample_sequence(encoded, &self.params, &self.config.decoder, seed, self.config.decoder.max_len)
    }
}
