//! Six-slot sentence grammar modelled on GRID.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const COMMANDS: [&str; 4] = ["bin", "lay", "place", "set"];
pub const COLORS: [&str; 4] = ["blue", "green", "red", "white"];
pub const PREPOSITIONS: [&str; 4] = ["at", "by", "in", "with"];
pub const LETTERS: [&str; 25] = [
    "a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k", "l", "m", "n", "o", "p", "q", "r",
    "s", "t", "u", "v", "x", "y", "z",
];
pub const DIGITS: [&str; 10] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
];
pub const ADVERBS: [&str; 4] = ["again", "now", "please", "soon"];

/// Word lists in slot order.
pub const SLOTS: [&[&str]; 6] = [&COMMANDS, &COLORS, &PREPOSITIONS, &LETTERS, &DIGITS, &ADVERBS];

/// One word index per slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sentence {
    pub slots: [usize; 6],
}

impl Sentence {
    pub fn words(&self) -> [&'static str; 6] {
        std::array::from_fn(|i| SLOTS[i][self.slots[i]])
    }

    pub fn text(&self) -> String {
        self.words().join(" ")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let words: Vec<&str> = text.split_whitespace().collect();
        if words.len() != 6 {
            return Err(Error::Parse(format!(
                "sentence needs 6 words, got {}: {text:?}",
                words.len()
            )));
        }
        let mut slots = [0; 6];
        for (i, w) in words.iter().enumerate() {
            slots[i] = SLOTS[i].iter().position(|x| x == w).ok_or_else(|| {
                Error::Parse(format!("word {w:?} not allowed in slot {i}"))
            })?;
        }
        Ok(Sentence { slots })
    }
}

/// Independent uniform draw for every slot.
pub fn sample_sentence<R: Rng + ?Sized>(rng: &mut R) -> Sentence {
    let mut slots = [0; 6];
    for (slot, list) in slots.iter_mut().zip(SLOTS) {
        *slot = rng.random_range(0..list.len());
    }
    Sentence { slots }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn same_seed_same_sentence() {
        let a = sample_sentence(&mut stream(0, &[]));
        let b = sample_sentence(&mut stream(0, &[]));
        assert_eq!(a, b);
        assert_eq!(a.words().len(), 6);
    }

    #[test]
    fn every_word_appears_in_ten_thousand_draws() {
        let mut rng = stream(1, &[]);
        let mut seen: Vec<Vec<bool>> = SLOTS.iter().map(|l| vec![false; l.len()]).collect();
        for _ in 0..10_000 {
            let s = sample_sentence(&mut rng);
            assert_eq!(s.text().split(' ').count(), 6);
            for (i, &w) in s.slots.iter().enumerate() {
                seen[i][w] = true;
            }
        }
        assert!(seen.iter().flatten().all(|&b| b));
    }

    #[test]
    fn text_round_trip() {
        let mut rng = stream(3, &[]);
        for _ in 0..100 {
            let s = sample_sentence(&mut rng);
            assert_eq!(Sentence::parse(&s.text()).unwrap(), s);
        }
        assert!(Sentence::parse("bin blue at w two now").is_err());
        assert!(Sentence::parse("bin blue").is_err());
    }
}
