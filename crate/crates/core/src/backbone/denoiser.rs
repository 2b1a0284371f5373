use crate::error::Result;
use crate::numerics::{Real, RngState, Tape, Tensor, Var};

use super::config::ModelConfig;
use super::model::{build_model, Model};
use super::record::AttentionRecord;
use super::text::TextEmbedder;

/// Backbone plus the token embedder that feeds it; the unit that is
/// trained, sampled and checkpointed.
#[derive(Clone, Debug)]
pub struct Denoiser<F: Real> {
    pub model: Model<F>,
    pub embedder: TextEmbedder<F>,
}

impl<F: Real> Denoiser<F> {
    pub fn new(config: &ModelConfig, rng: &mut RngState) -> Result<Self> {
        let model = build_model(config, rng)?;
        let embedder = TextEmbedder::new(config, rng);
        Ok(Denoiser { model, embedder })
    }

    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    pub fn cast<G: Real>(&self) -> Denoiser<G> {
        Denoiser {
            model: self.model.cast(),
            embedder: self.embedder.cast(),
        }
    }

    /// Every trainable tensor: backbone parameters in registration order,
    /// then the embedder table and positions.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out: Vec<&mut Tensor<F>> =
            self.model.params_mut().iter_mut().map(|p| &mut p.value).collect();
        out.extend(self.embedder.tensors_mut());
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor<F>> {
        let mut out: Vec<&Tensor<F>> = self.model.params().iter().map(|p| &p.value).collect();
        out.push(self.embedder.table());
        out.push(self.embedder.pos());
        out
    }

    /// Builds the noise prediction on `tape`. Returns the output node, the
    /// parameter leaves (aligned with [`Denoiser::tensors`]) and any
    /// captured attention.
    pub fn predict_on_tape(
        &self,
        tape: &mut Tape<F>,
        x_t: &Tensor<F>,
        t: &[usize],
        tokens: &[Vec<u32>],
        trainable: bool,
        capture: bool,
    ) -> Result<(Var, Vec<Var>, Vec<AttentionRecord>)> {
        let mut vars = self.model.bind(tape, trainable);
        let emb_vars = self.embedder.bind(tape, trainable);
        let text = self.embedder.encode_on_tape(tape, emb_vars, tokens)?;
        let (out, records) = self
            .model
            .forward_on_tape(tape, &vars, x_t, t, text, capture)?;
        vars.extend(emb_vars);
        Ok((out, vars, records))
    }

    pub fn predict(
        &self,
        x_t: &Tensor<F>,
        t: &[usize],
        tokens: &[Vec<u32>],
        capture: bool,
    ) -> Result<(Tensor<F>, Vec<AttentionRecord>)> {
        let mut tape = Tape::new();
        let (out, _, records) = self.predict_on_tape(&mut tape, x_t, t, tokens, false, capture)?;
        Ok((tape.value(out).clone(), records))
    }
}
