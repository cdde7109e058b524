use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::backbone::{BackboneParams, ModelConfig};
use crate::encoder::{EncoderInputs, EncoderParams, TokenSpec};
use crate::error::Result;
use crate::heads::PretrainHeads;
use crate::tensor::Scalar;

/// Encoder, backbone and the masked-cell decoding heads.
#[derive(Clone, Debug)]
pub struct PretrainModel<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: EncoderParams,
    pub backbone: BackboneParams,
    pub heads: PretrainHeads,
}

impl<T: Scalar> PretrainModel<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = EncoderParams::register(&mut store, &config, &mut rng)?;
        let backbone = BackboneParams::register(&mut store, &config, &mut rng)?;
        let heads = PretrainHeads::register(&mut store, &config, &mut rng)?;
        Ok(PretrainModel { config, store, encoder, backbone, heads })
    }

    pub fn from_store(config: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        let encoder = EncoderParams::bind(&store, &config)?;
        let backbone = BackboneParams::bind(&store, &config)?;
        let heads = PretrainHeads::bind(&store, &config)?;
        Ok(PretrainModel { config, store, encoder, backbone, heads })
    }
}

/// Encodes a padded batch of prepared rows and runs the backbone on it.
/// Returns the hidden states and the batch layout.
pub fn hidden_states<T: Scalar, S: AsRef<[TokenSpec]>, R: Rng + ?Sized>(
    g: &mut Graph<'_, T>,
    encoder: &EncoderParams,
    backbone: &BackboneParams,
    rows: &[S],
    rng: Option<&mut R>,
) -> Result<(Var, EncoderInputs<T>)> {
    let inputs = EncoderInputs::build(rows, encoder)?;
    let tokens = encoder.tokens(g, &inputs);
    let hidden = backbone.forward_graph(g, tokens, &inputs.lengths, inputs.max_len, rng);
    Ok((hidden, inputs))
}
