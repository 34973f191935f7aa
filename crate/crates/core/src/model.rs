//! The full instruction generator: feature projections, Triplet Qformer,
//! prefix projection and language model over one parameter store.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, Var};
use crate::datasets::{Vocab, BOS};
use crate::decoder::{
    beam_search, greedy, BeamConfig, Candidate, DecoderConfig, LanguageModel, LmStepper, PrefixProjection,
};
use crate::error::Result;
use crate::features::{FeatureProjector, ProviderManifest, RawImageFeatures};
use crate::qformer::{QformerConfig, QueryStates, TripletQformer};

/// Parameter-name prefixes of the model parts.
pub const FEATURE_PARAMS: &str = "features.";
pub const QFORMER_PARAMS: &str = "qformer.";
pub const PREFIX_PARAMS: &str = "prefix.";
pub const LM_PARAMS: &str = "lm.";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub num_queries: usize,
    pub qformer_layers: usize,
    pub qformer_heads: usize,
    pub ffn_mult: usize,
    pub d_dec: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            num_queries: 8,
            qformer_layers: 2,
            qformer_heads: 4,
            ffn_mult: 4,
            d_dec: 64,
            lm_layers: 2,
            lm_heads: 4,
            max_len: 24,
        }
    }
}

impl ModelConfig {
    /// A very small configuration for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            d_model: 8,
            num_queries: 2,
            qformer_layers: 1,
            qformer_heads: 2,
            ffn_mult: 2,
            d_dec: 8,
            lm_layers: 1,
            lm_heads: 2,
            max_len: 24,
        }
    }

    pub fn qformer(&self, vocab_size: usize) -> QformerConfig {
        QformerConfig {
            d_model: self.d_model,
            num_layers: self.qformer_layers,
            num_queries: self.num_queries,
            num_heads: self.qformer_heads,
            ffn_mult: self.ffn_mult,
            vocab_size,
            // BOS + up to max_len tokens (EOS included).
            max_text_len: self.max_len + 1,
        }
    }

    pub fn decoder(&self, vocab_size: usize) -> DecoderConfig {
        DecoderConfig {
            d_dec: self.d_dec,
            num_layers: self.lm_layers,
            num_heads: self.lm_heads,
            ffn_mult: self.ffn_mult,
            vocab_size,
            max_len: self.max_len,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InstructionModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub manifest: ProviderManifest,
    pub params: ParamStore,
    pub features: FeatureProjector,
    pub qformer: TripletQformer,
    pub prefix: PrefixProjection,
    pub lm: LanguageModel,
}

impl InstructionModel {
    pub fn new(config: ModelConfig, vocab: Vocab, manifest: ProviderManifest, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let features = FeatureProjector::new(&mut params, &manifest, config.d_model, &mut rng);
        let qformer = TripletQformer::new(&mut params, &config.qformer(vocab.len()), &mut rng);
        let prefix = PrefixProjection::new(&mut params, config.d_model, config.d_dec, &mut rng);
        let lm = LanguageModel::new(&mut params, &config.decoder(vocab.len()), &mut rng);
        Self {
            config,
            vocab,
            manifest,
            params,
            features,
            qformer,
            prefix,
            lm,
        }
    }

    /// Query states for an image pair; `text` is the full text-branch input
    /// (BOS first) when the training-only branch is wanted.
    pub fn encode(
        &self,
        g: &mut Graph,
        target: &RawImageFeatures,
        receptacle: &RawImageFeatures,
        text: Option<&[u32]>,
    ) -> Result<QueryStates> {
        let bundle = self.features.assemble(g, target, receptacle);
        self.qformer.forward(g, &bundle, text)
    }

    /// Decoder prefix rows for an image pair.
    pub fn prefix_var(&self, g: &mut Graph, target: &RawImageFeatures, receptacle: &RawImageFeatures) -> Result<Var> {
        let states = self.encode(g, target, receptacle, None)?;
        Ok(self.prefix.forward(g, states.h_q))
    }

    pub fn prefix_values(&self, target: &RawImageFeatures, receptacle: &RawImageFeatures) -> Result<Array2<f64>> {
        let mut g = Graph::new(&self.params);
        let p = self.prefix_var(&mut g, target, receptacle)?;
        Ok(g.value(p).clone())
    }

    pub fn generate(
        &self,
        target: &RawImageFeatures,
        receptacle: &RawImageFeatures,
        beam: &BeamConfig,
    ) -> Result<Vec<Candidate>> {
        let prefix = self.prefix_values(target, receptacle)?;
        let stepper = LmStepper {
            lm: &self.lm,
            store: &self.params,
            prefix: Some(&prefix),
        };
        beam_search(&stepper, &self.vocab, beam)
    }

    pub fn greedy(&self, target: &RawImageFeatures, receptacle: &RawImageFeatures) -> Result<Candidate> {
        let prefix = self.prefix_values(target, receptacle)?;
        let stepper = LmStepper {
            lm: &self.lm,
            store: &self.params,
            prefix: Some(&prefix),
        };
        Ok(greedy(&stepper, &self.vocab, self.config.max_len))
    }

    /// Text-branch input `[BOS, tokens…, EOS]` for a reference sentence.
    pub fn text_input(&self, sentence: &str) -> Vec<u32> {
        let mut ids = vec![BOS];
        ids.extend(self.target_tokens(sentence));
        ids
    }

    /// EOS-terminated target tokens, clipped to `max_len`.
    pub fn target_tokens(&self, sentence: &str) -> Vec<u32> {
        let mut ids = self.vocab.encode_sentence(sentence);
        if ids.len() > self.config.max_len {
            ids.truncate(self.config.max_len - 1);
            ids.push(crate::datasets::EOS);
        }
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::EOS;

    fn model() -> InstructionModel {
        let vocab = Vocab::from_sentences(["move the red cup to the sink ."]);
        let manifest = ProviderManifest::synthetic(
            vec!["cup".into(), "sink".into(), "red".into()],
            3,
        );
        InstructionModel::new(ModelConfig::tiny(), vocab, manifest, 4)
    }

    #[test]
    fn parts_use_disjoint_prefixes() {
        let m = model();
        let total = m.params.len();
        let counted: usize = [FEATURE_PARAMS, QFORMER_PARAMS, PREFIX_PARAMS, LM_PARAMS]
            .iter()
            .map(|p| m.params.ids_with_prefix(&[p]).len())
            .sum();
        assert_eq!(total, counted);
    }

    #[test]
    fn same_seed_same_parameters() {
        let (a, b) = (model(), model());
        for ((na, va), (nb, vb)) in a.params.named().zip(b.params.named()) {
            assert_eq!(na, nb);
            assert_eq!(va, vb);
        }
    }

    #[test]
    fn token_helpers_frame_sentences() {
        let m = model();
        let t = m.text_input("move the cup.");
        assert_eq!(t[0], BOS);
        assert_eq!(*t.last().unwrap(), EOS);
        let long = "the ".repeat(40);
        let y = m.target_tokens(&long);
        assert_eq!(y.len(), m.config.max_len);
        assert_eq!(*y.last().unwrap(), EOS);
    }
}
