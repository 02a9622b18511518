//! Character vocabulary shared by the CTC head and the attention decoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BLANK: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const SPACE: usize = 3;
const LETTER_BASE: usize = 4;
const DIGIT_BASE: usize = 30;
pub const VOCAB_SIZE: usize = 40;

/// Fixed 40-token character inventory: blank, sos, eos, space, a–z, 0–9.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary;

impl Vocabulary {
    pub fn len(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn token_of(&self, c: char) -> Option<usize> {
        match c {
            ' ' => Some(SPACE),
            'a'..='z' => Some(LETTER_BASE + (c as usize - 'a' as usize)),
            '0'..='9' => Some(DIGIT_BASE + (c as usize - '0' as usize)),
            _ => None,
        }
    }

    /// Printable form of a token; control tokens render as `<blank>`, `<sos>`, `<eos>`.
    pub fn symbol(&self, token: usize) -> String {
        match token {
            BLANK => "<blank>".into(),
            SOS => "<sos>".into(),
            EOS => "<eos>".into(),
            SPACE => " ".into(),
            t if (LETTER_BASE..DIGIT_BASE).contains(&t) => {
                char::from(b'a' + (t - LETTER_BASE) as u8).to_string()
            }
            t if (DIGIT_BASE..VOCAB_SIZE).contains(&t) => {
                char::from(b'0' + (t - DIGIT_BASE) as u8).to_string()
            }
            t => format!("<{t}?>"),
        }
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.token_of(c)
                    .ok_or_else(|| Error::arg(format!("character {c:?} not in vocabulary")))
            })
            .collect()
    }

    /// Renders content tokens as text, skipping control tokens.
    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .filter(|&&t| (SPACE..VOCAB_SIZE).contains(&t))
            .map(|&t| self.symbol(t))
            .collect()
    }
}

/// A character-level target sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub text: String,
    pub tokens: Vec<usize>,
}

impl Utterance {
    pub fn new(text: &str) -> Result<Self> {
        Ok(Utterance {
            text: text.to_string(),
            tokens: Vocabulary.encode(text)?,
        })
    }

    /// Utterance whose text is the decoded content tokens.
    pub fn from_tokens(tokens: &[usize]) -> Self {
        let tokens: Vec<usize> = tokens
            .iter()
            .copied()
            .filter(|&t| (SPACE..VOCAB_SIZE).contains(&t))
            .collect();
        Utterance {
            text: Vocabulary.decode(&tokens),
            tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Decoder input under teacher forcing: `sos` followed by the tokens.
    pub fn decoder_input(&self) -> Vec<usize> {
        std::iter::once(SOS).chain(self.tokens.iter().copied()).collect()
    }

    /// Decoder target under teacher forcing: the tokens followed by `eos`.
    pub fn decoder_target(&self) -> Vec<usize> {
        self.tokens.iter().copied().chain(std::iter::once(EOS)).collect()
    }

    pub fn words(&self) -> Vec<&str> {
        self.text.split_whitespace().collect()
    }
}
