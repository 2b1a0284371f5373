//! Learned token embedder standing in for a pretrained text encoder.

use crate::error::{Error, Result};
use crate::numerics::{Real, RngState, Tape, Tensor, Var};

use super::config::ModelConfig;

/// Padding after the last content word.
pub const PAD_TOKEN: u32 = 0;
/// Fills the whole caption for the unconditional (empty-caption) branch.
pub const NULL_TOKEN: u32 = 1;

/// Lookup table plus learned positions. `NULL_TOKEN` maps to its table row
/// with no position added, so an all-null caption is one repeated vector.
#[derive(Clone, Debug)]
pub struct TextEmbedder<F: Real> {
    table: Tensor<F>,
    pos: Tensor<F>,
}

impl<F: Real> TextEmbedder<F> {
    pub const TABLE: &'static str = "embedder.table";
    pub const POS: &'static str = "embedder.pos";

    /// Token vectors start at unit scale so captions stay distinguishable
    /// after the text projection and layer norms; positions start small.
    pub fn new(config: &ModelConfig, rng: &mut RngState) -> Self {
        let (v, l, d) = (config.vocab_size, config.text_len, config.text_in_dim);
        let table = Tensor::from_fn(&[v, d], |_| F::from_f64_lossy(rng.standard_normal()));
        let pos = Tensor::from_fn(&[l, d], |_| F::from_f64_lossy(rng.truncated_normal(0.02)));
        TextEmbedder { table, pos }
    }

    pub fn from_tensors(config: &ModelConfig, table: Tensor<F>, pos: Tensor<F>) -> Result<Self> {
        let (v, l, d) = (config.vocab_size, config.text_len, config.text_in_dim);
        if table.shape() != [v, d] {
            return Err(Error::dim("embedder table", table.shape(), &[v, d]));
        }
        if pos.shape() != [l, d] {
            return Err(Error::dim("embedder positions", pos.shape(), &[l, d]));
        }
        Ok(TextEmbedder { table, pos })
    }

    pub fn table(&self) -> &Tensor<F> {
        &self.table
    }

    pub fn pos(&self) -> &Tensor<F> {
        &self.pos
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<F>; 2] {
        [&mut self.table, &mut self.pos]
    }

    pub fn null_row(&self) -> &[F] {
        let d = self.table.shape()[1];
        let id = NULL_TOKEN as usize;
        &self.table.data()[id * d..(id + 1) * d]
    }

    pub fn cast<G: Real>(&self) -> TextEmbedder<G> {
        TextEmbedder {
            table: self.table.cast(),
            pos: self.pos.cast(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> [Var; 2] {
        if trainable {
            [tape.param(self.table.clone()), tape.param(self.pos.clone())]
        } else {
            [tape.constant(self.table.clone()), tape.constant(self.pos.clone())]
        }
    }

    /// Text features `[B, L_txt, d_txt]` for a batch of token-id rows.
    pub fn encode_on_tape(&self, tape: &mut Tape<F>, vars: [Var; 2], ids: &[Vec<u32>]) -> Result<Var> {
        let (v, d) = (self.table.shape()[0], self.table.shape()[1]);
        let l = self.pos.shape()[0];
        let mut flat = Vec::with_capacity(ids.len() * l);
        let mut positions = Vec::with_capacity(ids.len() * l);
        let mut mask = Vec::with_capacity(ids.len() * l);
        for row in ids {
            if row.len() != l {
                return Err(Error::dim("token ids", &[row.len()], &[l]));
            }
            for (p, &id) in row.iter().enumerate() {
                if id as usize >= v {
                    return Err(Error::Data(format!(
                        "token id {id} out of range for vocabulary of {v}"
                    )));
                }
                flat.push(id as usize);
                positions.push(p);
                mask.push(if id == NULL_TOKEN { F::zero() } else { F::one() });
            }
        }
        let shape = [ids.len(), l, d];
        let tok = tape.gather(vars[0], &flat, &shape)?;
        let pos = tape.gather(vars[1], &positions, &shape)?;
        let pos = tape.mask_rows(pos, mask)?;
        tape.add(tok, pos)
    }

    pub fn encode(&self, ids: &[Vec<u32>]) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let out = self.encode_on_tape(&mut tape, vars, ids)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::config::{Conditioning, Fusion};

    fn config() -> ModelConfig {
        let mut c = ModelConfig::reference(Fusion::Early, Conditioning::Concat);
        c.text_len = 4;
        c.text_in_dim = 6;
        c
    }

    #[test]
    fn all_null_caption_repeats_the_null_row() {
        let e = TextEmbedder::<f64>::new(&config(), &mut RngState::new(3));
        let out = e.encode(&[vec![NULL_TOKEN; 4]]).unwrap();
        for row in out.data().chunks(6) {
            assert_eq!(row, e.null_row());
        }
    }

    #[test]
    fn encoding_is_deterministic_and_position_aware() {
        let e = TextEmbedder::<f32>::new(&config(), &mut RngState::new(3));
        let ids = vec![vec![2, 2, 9, PAD_TOKEN]];
        let a = e.encode(&ids).unwrap();
        let b = e.encode(&ids).unwrap();
        assert!(a.bit_eq(&b));
        assert_ne!(&a.data()[..6], &a.data()[6..12]);
    }

    #[test]
    fn out_of_range_id_is_data_error() {
        let e = TextEmbedder::<f32>::new(&config(), &mut RngState::new(3));
        let err = e.encode(&[vec![2, 99, 0, 0]]).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn gradient_lands_only_on_looked_up_rows() {
        let e = TextEmbedder::<f64>::new(&config(), &mut RngState::new(3));
        let mut tape = Tape::new();
        let vars = e.bind(&mut tape, true);
        let out = e.encode_on_tape(&mut tape, vars, &[vec![3, 5, 3, NULL_TOKEN]]).unwrap();
        let s = tape.sum(out);
        let grads = tape.backward(s).unwrap();
        let g = grads.get(vars[0]).unwrap();
        for (row, chunk) in g.chunks(6).enumerate() {
            let expected = match row {
                3 => 2.0,
                5 | 1 => 1.0,
                _ => 0.0,
            };
            assert!(chunk.iter().all(|&v| v == expected), "row {row}: {chunk:?}");
        }
        let gp = grads.get(vars[1]).unwrap();
        assert!(gp[18..].iter().all(|&v| v == 0.0), "null slot carries no position");
    }
}
