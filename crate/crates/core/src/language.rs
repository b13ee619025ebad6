//! Fine-grained language encoder over the four concatenated prompts.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::ftg::{TokenSeq, CONTEXT_LEN, LEVELS};
use crate::nn::{Graph, Init, ParamId, ParamStore, TransformerBlock, Var};

/// Tokens seen by the encoder: four 77-token sentences back to back.
pub const SEQ_LEN: usize = LEVELS * CONTEXT_LEN;

const EMBED_STD: f64 = 0.02;

/// Position the sentence embedding is read from: the EOT token of the last
/// sentence in the concatenated sequence.
pub fn read_position(seqs: &[TokenSeq; LEVELS]) -> usize {
    (LEVELS - 1) * CONTEXT_LEN + seqs[LEVELS - 1].eot_index()
}

#[derive(Clone, Debug)]
pub struct LanguageEncoder {
    pub embed: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub vocab_size: usize,
}

impl LanguageEncoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &ModelConfig, vocab_size: usize) -> Self {
        let embed = store.add("fle.embed", init.trunc_normal(&[vocab_size, cfg.d], EMBED_STD), true);
        let pos = store.add("fle.pos", init.trunc_normal(&[SEQ_LEN, cfg.d], EMBED_STD), false);
        let blocks = (0..cfg.text_blocks)
            .map(|i| TransformerBlock::new(store, init, &format!("fle.block{i}"), cfg.d, cfg.heads, cfg.mlp_ratio))
            .collect();
        Self {
            embed,
            pos,
            blocks,
            vocab_size,
        }
    }

    /// Word embeddings plus position embeddings: `n x 308 x d`.
    pub fn embed(&self, g: &mut Graph, prompts: &[[TokenSeq; LEVELS]]) -> Result<Var> {
        let mut ids = Vec::with_capacity(prompts.len() * SEQ_LEN);
        for set in prompts {
            for seq in set {
                for &id in &seq.ids {
                    if id >= self.vocab_size {
                        return Err(Error::TokenRange { id, size: self.vocab_size });
                    }
                    ids.push(id);
                }
            }
        }
        let table = g.param(self.embed);
        let d = g.shape(table)[1];
        let rows = g.gather_rows(table, ids);
        let seq = g.reshape(rows, &[prompts.len(), SEQ_LEN, d]);
        let pos = g.param(self.pos);
        Ok(g.add_bcast(seq, pos))
    }

    /// Runs the blocks over embedded tokens and reads `T_l` at each set's
    /// read position: `n x d`.
    pub fn encode(&self, g: &mut Graph, embedded: Var, read_at: Vec<usize>) -> Var {
        let mut t = embedded;
        for blk in &self.blocks {
            t = blk.forward(g, t);
        }
        g.gather_tokens(t, read_at)
    }

    pub fn forward(&self, g: &mut Graph, prompts: &[[TokenSeq; LEVELS]]) -> Result<Var> {
        let e = self.embed(g, prompts)?;
        Ok(self.encode(g, e, prompts.iter().map(read_position).collect()))
    }
}
