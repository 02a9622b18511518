//! The assembled network: front-end, conformer, CTC head, attention decoder,
//! speaker head and the two MI estimators, all in one parameter store.

use serde::{Deserialize, Serialize};

use crate::backend::{Conformer, ConformerConfig};
use crate::decoder::{DecoderConfig, TransformerDecoder};
use crate::error::{Error, Result};
use crate::frontend::{Frontend, FrontendConfig, FrontendInput};
use crate::mi::{ScoreNet, VariationalNet};
use crate::nn::{Linear, ParamBuilder, ParamId, ParamStore, Session};
use crate::rng::stream;
use crate::speaker::SpeakerHead;
use crate::tensor::Var;
use crate::vocab::VOCAB_SIZE;

const INIT_TAG: u64 = 0x494e_4954;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub frontend: FrontendConfig,
    pub backend: ConformerConfig,
    pub decoder: DecoderConfig,
    pub speakers: usize,
    pub id_dim: usize,
    pub club_hidden: usize,
    pub score_hidden: usize,
}

impl ModelConfig {
    pub fn reference_scale(speakers: usize) -> Self {
        ModelConfig {
            frontend: FrontendConfig::reference_scale(),
            backend: ConformerConfig::reference_scale(),
            decoder: DecoderConfig::reference_scale(),
            speakers,
            id_dim: 128,
            club_hidden: 128,
            score_hidden: 128,
        }
    }

    pub fn desk(speakers: usize) -> Self {
        ModelConfig {
            frontend: FrontendConfig::desk(),
            backend: ConformerConfig::desk(),
            decoder: DecoderConfig::desk(),
            speakers,
            id_dim: 16,
            club_hidden: 16,
            score_hidden: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.backend.validate()?;
        let d = self.backend.model_dim;
        if self.frontend.output_dim != d || self.decoder.model_dim != d {
            return Err(Error::Config(format!(
                "front-end output {}, conformer {d} and decoder {} widths must agree",
                self.frontend.output_dim, self.decoder.model_dim
            )));
        }
        if self.decoder.heads == 0 || !d.is_multiple_of(self.decoder.heads) {
            return Err(Error::Config(format!("decoder width {d} not divisible by {} heads", self.decoder.heads)));
        }
        if self.speakers < 2 {
            return Err(Error::Config("speaker head needs at least 2 classes".into()));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(8)
    }
}

#[derive(Clone, Debug)]
pub struct LipModel {
    pub config: ModelConfig,
    pub frontend: Frontend,
    pub backend: Conformer,
    pub ctc_head: Linear,
    pub decoder: TransformerDecoder,
    pub speaker: SpeakerHead,
    pub club: VariationalNet,
    pub score: ScoreNet,
}

/// Graph handles produced by the encoder path.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// [B, T, d].
    pub h0: Var,
    /// [B, T, d].
    pub hlb: Var,
    pub fusion_attention: Vec<Var>,
    pub conformer_attention: Vec<Var>,
}

impl LipModel {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = stream(seed, &[INIT_TAG]);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let d = config.backend.model_dim;
        let model = LipModel {
            config: config.clone(),
            frontend: Frontend::new(&mut pb.sub("frontend"), &config.frontend)?,
            backend: Conformer::new(&mut pb.sub("backend"), &config.backend)?,
            ctc_head: Linear::new(&mut pb.sub("ctc_head"), d, VOCAB_SIZE, true),
            decoder: TransformerDecoder::new(&mut pb.sub("decoder"), &config.decoder)?,
            speaker: SpeakerHead::new(&mut pb.sub("speaker"), d, config.id_dim, config.speakers),
            club: VariationalNet::new(&mut pb.sub("club"), config.id_dim, config.club_hidden, d),
            score: ScoreNet::new(&mut pb.sub("score"), d, d, config.score_hidden),
        };
        Ok((model, store))
    }

    pub fn speaker_ids(&self, store: &ParamStore) -> Vec<ParamId> {
        store.ids_with_prefix("speaker.").collect()
    }

    pub fn club_ids(&self, store: &ParamStore) -> Vec<ParamId> {
        store.ids_with_prefix("club.").collect()
    }

    pub fn score_ids(&self, store: &ParamStore) -> Vec<ParamId> {
        store.ids_with_prefix("score.").collect()
    }

    pub fn estimator_ids(&self, store: &ParamStore) -> Vec<ParamId> {
        let mut ids = self.club_ids(store);
        ids.extend(self.score_ids(store));
        ids.sort();
        ids
    }

    /// Parameters of the recognition path (front-end through decoder).
    pub fn vsr_ids(&self, store: &ParamStore) -> Vec<ParamId> {
        store
            .ids()
            .filter(|&id| {
                let n = &store.entry(id).name;
                !(n.starts_with("speaker.") || n.starts_with("club.") || n.starts_with("score."))
            })
            .collect()
    }

    /// Resets both estimators to a fresh draw derived from `seed`.
    pub fn reinit_estimators(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        let (_, fresh) = LipModel::build(&self.config, seed)?;
        for id in self.estimator_ids(store) {
            let name = store.entry(id).name.clone();
            let src = fresh.id(&name).expect("same architecture");
            store.set(id, fresh.get(src).clone())?;
        }
        Ok(())
    }

    pub fn encode(&self, s: &Session, input: &FrontendInput, batch_stats: bool) -> Result<Encoded> {
        let fe = self.frontend.forward(s, input, batch_stats)?;
        let be = self.backend.forward(s, fe.h0, batch_stats)?;
        Ok(Encoded {
            h0: fe.h0,
            hlb: be.hlb,
            fusion_attention: fe.attention,
            conformer_attention: be.attention,
        })
    }

    /// CTC logits [B, T, V].
    pub fn ctc_logits(&self, s: &Session, hlb: Var) -> Result<Var> {
        self.ctc_head.forward(s, hlb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_groups_partition_the_store() {
        let (m, store) = LipModel::build(&ModelConfig::desk(4), 0).unwrap();
        let total = m.vsr_ids(&store).len() + m.speaker_ids(&store).len() + m.estimator_ids(&store).len();
        assert_eq!(total, store.len());
        assert!(!m.speaker_ids(&store).is_empty());
    }

    #[test]
    fn estimator_reinit_touches_only_estimators() {
        let (m, mut store) = LipModel::build(&ModelConfig::desk(4), 0).unwrap();
        let vsr = store.digest(m.vsr_ids(&store));
        let est = store.digest(m.estimator_ids(&store));
        m.reinit_estimators(&mut store, 99).unwrap();
        assert_eq!(vsr, store.digest(m.vsr_ids(&store)));
        assert_ne!(est, store.digest(m.estimator_ids(&store)));
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let mut c = ModelConfig::desk(4);
        c.frontend.output_dim = 24;
        assert!(matches!(LipModel::build(&c, 0), Err(Error::Config(_))));
    }
}
