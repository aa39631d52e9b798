use crate::rng::{fnv1a, SeededRng};
use crate::tensorad::Tensor;

pub const MAX_TOKENS: usize = 8;
pub const VOCAB: usize = 512;

/// Toy text encoder: words hashed into a fixed vocabulary, looked up in a
/// seeded table that is never trained.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTable {
    d_txt: usize,
    seed: u64,
    table: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub tokens: Vec<usize>,
    /// `[max(tokens, 1), d_txt]`.
    pub vectors: Tensor,
}

impl PromptEmbedding {
    pub fn is_unconditional(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl PromptTable {
    pub fn new(d_txt: usize, seed: u64) -> Self {
        let mut rng = SeededRng::derive(seed, "prompt-table");
        let scale = 1.0 / (d_txt as f64).sqrt();
        let table = (0..VOCAB * d_txt).map(|_| rng.normal() * scale).collect();
        Self { d_txt, seed, table }
    }

    pub fn d_txt(&self) -> usize {
        self.d_txt
    }

    pub fn tokenize(&self, prompt: &str) -> Vec<usize> {
        prompt
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .take(MAX_TOKENS)
            .map(|w| {
                let mut bytes = self.seed.to_le_bytes().to_vec();
                bytes.extend(w.to_lowercase().bytes());
                (fnv1a(&bytes) % VOCAB as u64) as usize
            })
            .collect()
    }

    pub fn embed(&self, prompt: &str) -> PromptEmbedding {
        let tokens = self.tokenize(prompt);
        let vectors = if tokens.is_empty() {
            Tensor::zeros(&[1, self.d_txt])
        } else {
            let d = self.d_txt;
            let data = tokens
                .iter()
                .flat_map(|&t| self.table[t * d..(t + 1) * d].iter().copied())
                .collect();
            Tensor::new(vec![tokens.len(), d], data).expect("sized from tokens")
        };
        PromptEmbedding { tokens, vectors }
    }

    pub fn unconditional(&self) -> PromptEmbedding {
        self.embed("")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_bounded() {
        let t = PromptTable::new(32, 1);
        let a = t.embed("A red square, moving!");
        assert_eq!(a, t.embed("a red square moving"));
        assert_eq!(a.tokens.len(), 4);
        assert_eq!(a.vectors.dims(), &[4, 32]);
        let long = t.embed("one two three four five six seven eight nine ten");
        assert_eq!(long.tokens.len(), MAX_TOKENS);
        assert_ne!(t.embed("blue").vectors, t.embed("green").vectors);
    }

    #[test]
    fn empty_is_single_zero_vector() {
        let e = PromptTable::new(32, 1).embed("  ,, ");
        assert!(e.is_unconditional());
        assert_eq!(e.vectors.dims(), &[1, 32]);
        assert!(e.vectors.data().iter().all(|&v| v == 0.0));
    }
}
