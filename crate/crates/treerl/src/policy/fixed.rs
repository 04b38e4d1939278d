//! A generator whose responses always have the same total length.
//!
//! Surprisals are i.i.d. uniform on `[0, 1)`, so entropy-ranked fork points
//! land uniformly over each sequence. Used to measure leaf/token efficiency
//! against the analytic bounds.

use super::{BackendError, Continuation, FinishReason, GenParams, PolicyBackend};
use crate::gentree::{Prompt, TokenRecord};
use crate::mix::hash_words;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FixedLengthBackend {
    pub total_len: usize,
    pub vocab: u32,
}

impl FixedLengthBackend {
    pub fn new(total_len: usize, vocab: u32) -> Self {
        assert!(total_len >= 1 && vocab >= 2);
        Self { total_len, vocab }
    }

    pub fn eos(&self) -> u32 {
        self.vocab - 1
    }
}

impl PolicyBackend for FixedLengthBackend {
    fn sample_continuation(
        &self,
        prompt: &Prompt,
        prefix: &[TokenRecord],
        params: &GenParams,
    ) -> Result<Continuation, BackendError> {
        if let Some(t) = prefix.iter().find(|t| t.token_id >= self.vocab) {
            return Err(BackendError::Vocab { token: t.token_id, vocab: self.vocab as usize });
        }
        let mut words: Vec<u64> = prompt.tokens.iter().map(|&t| t as u64).collect();
        words.push(u64::MAX);
        words.extend(prefix.iter().map(|t| t.token_id as u64));
        let mut rng = ChaCha8Rng::seed_from_u64(hash_words(params.seed, &words));
        let len = self.total_len.saturating_sub(prefix.len()).max(1);
        let tokens = (0..len)
            .map(|i| {
                let id = if i + 1 == len { self.eos() } else { rng.gen_range(0..self.eos()) };
                TokenRecord::new(id, rng.gen::<f64>())
            })
            .collect();
        Ok(Continuation { tokens, terminal: true, finish_reason: FinishReason::EndToken })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn responses_have_fixed_total_length() {
        let b = FixedLengthBackend::new(50, 16);
        let p = Prompt::default();
        let g = GenParams::synthetic();
        let first = b.sample_continuation(&p, &[], &g).unwrap();
        assert_eq!(first.tokens.len(), 50);
        let rest = b.sample_continuation(&p, &first.tokens[..20], &g).unwrap();
        assert_eq!(rest.tokens.len(), 30);
        assert_eq!(rest.tokens.last().unwrap().token_id, 15);
    }
}
