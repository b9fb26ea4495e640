//! Labeled sentence corpora, the seeded synthetic sentiment generator, and
//! the line-delimited corpus file format.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Vocabulary;
use crate::tensor::Rng;

pub const CORPUS_FORMAT_VERSION: u32 = 1;

pub const POSITIVE_WORDS: [&str; 10] = [
    "good",
    "great",
    "excellent",
    "lovely",
    "wonderful",
    "superb",
    "delightful",
    "remarkable",
    "brilliant",
    "charming",
];

pub const NEGATIVE_WORDS: [&str; 10] = [
    "bad",
    "awful",
    "terrible",
    "hideous",
    "boring",
    "dull",
    "confusing",
    "poor",
    "dreadful",
    "junk",
];

const FILLER_WORDS: [&str; 40] = [
    "the", "a", "an", "movie", "film", "story", "plot", "cast", "scene", "script", "is", "was",
    "and", "but", "of", "with", "this", "that", "it", "its", "at", "on", "in", "for", "about",
    "director", "actor", "ending", "music", "camera", "very", "rather", "quite", "often", "one",
    "some", "overall", "really", "just", "seems",
];

/// Smallest vocabulary the generator can build: specials, both lexicons, and
/// at least one filler word.
pub const MIN_SYNTHETIC_VOCAB: usize = 2 + POSITIVE_WORDS.len() + NEGATIVE_WORDS.len() + 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: u64,
    pub tokens: Vec<String>,
    pub label: usize,
}

/// Sentences over a shared vocabulary. Ids are unique and every token is in
/// the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    vocabulary: Vocabulary,
    sentences: Vec<Sentence>,
}

impl Corpus {
    pub fn new(vocabulary: Vocabulary, sentences: Vec<Sentence>) -> Result<Self> {
        let mut ids = HashSet::with_capacity(sentences.len());
        for s in &sentences {
            if !ids.insert(s.id) {
                return Err(Error::input(format!("duplicate sentence id {}", s.id)));
            }
            if s.tokens.is_empty() {
                return Err(Error::input(format!("sentence {} has no tokens", s.id)));
            }
            if let Some(t) = s.tokens.iter().find(|t| vocabulary.id(t).is_none()) {
                return Err(Error::input(format!(
                    "sentence {}: token {t:?} is not in the vocabulary",
                    s.id
                )));
            }
            if s.label > 1 {
                return Err(Error::input(format!("sentence {}: label {} is not 0 or 1", s.id, s.label)));
            }
        }
        Ok(Corpus { vocabulary, sentences })
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn sentences(&self) -> &[Sentence] {
        &self.sentences
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// The first `n` sentences (or all of them).
    pub fn truncated(&self, n: usize) -> Corpus {
        Corpus {
            vocabulary: self.vocabulary.clone(),
            sentences: self.sentences.iter().take(n).cloned().collect(),
        }
    }

    /// Header line carrying the vocabulary, then one record per sentence.
    pub fn to_jsonl(&self) -> Result<String> {
        let header = CorpusHeader {
            format_version: CORPUS_FORMAT_VERSION,
            kind: "corpus".into(),
            vocabulary: self.vocabulary.tokens().to_vec(),
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for s in &self.sentences {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or_else(|| Error::format("corpus file is empty"))?;
        let header: CorpusHeader =
            serde_json::from_str(first).map_err(|e| Error::format(format!("corpus header: {e}")))?;
        if header.kind != "corpus" || header.format_version != CORPUS_FORMAT_VERSION {
            return Err(Error::format(format!(
                "expected a corpus document with format_version {CORPUS_FORMAT_VERSION}, found kind {:?} version {}",
                header.kind, header.format_version
            )));
        }
        let vocabulary = Vocabulary::from_tokens(header.vocabulary)?;
        let sentences = lines
            .map(|(no, line)| {
                serde_json::from_str(line).map_err(|e| Error::format(format!("corpus line {}: {e}", no + 1)))
            })
            .collect::<Result<Vec<Sentence>>>()?;
        Corpus::new(vocabulary, sentences)
    }
}

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    format_version: u32,
    kind: String,
    vocabulary: Vec<String>,
}

/// Vocabulary of exactly `vocab_size` tokens (at least
/// [`MIN_SYNTHETIC_VOCAB`]): specials, lexicon words, then fillers.
pub fn synthetic_vocabulary(vocab_size: usize) -> Vocabulary {
    let vocab_size = vocab_size.max(MIN_SYNTHETIC_VOCAB);
    let fillers = vocab_size - 2 - POSITIVE_WORDS.len() - NEGATIVE_WORDS.len();
    let mut words: Vec<String> = POSITIVE_WORDS.iter().chain(&NEGATIVE_WORDS).map(|w| w.to_string()).collect();
    words.extend(
        (0..fillers).map(|k| FILLER_WORDS.get(k).map_or_else(|| format!("w{k:03}"), |w| w.to_string())),
    );
    Vocabulary::with_words(&words).expect("synthetic vocabulary is unique")
}

/// `size` sentences of 4–12 tokens. Each draws a polarity uniformly, places
/// one or two lexicon words of that polarity at random positions, and fills
/// the rest with neutral words. The label is the polarity.
pub fn generate_synthetic_corpus(size: usize, vocab_size: usize, seed: u64) -> Corpus {
    let vocabulary = synthetic_vocabulary(vocab_size);
    let fillers: Vec<&str> = vocabulary.tokens()[2 + POSITIVE_WORDS.len() + NEGATIVE_WORDS.len()..]
        .iter()
        .map(String::as_str)
        .collect();
    let mut rng = Rng::new(seed);
    let sentences = (0..size)
        .map(|id| {
            let len = 4 + rng.below(9);
            let label = rng.below(2);
            let lexicon: &[&str] = if label == 1 { &POSITIVE_WORDS } else { &NEGATIVE_WORDS };
            let n_lex = 1 + rng.below(2);
            let mut positions: Vec<usize> = (0..len).collect();
            rng.shuffle(&mut positions);
            let mut tokens: Vec<String> = (0..len).map(|_| fillers[rng.below(fillers.len())].to_string()).collect();
            for &p in &positions[..n_lex] {
                tokens[p] = lexicon[rng.below(lexicon.len())].to_string();
            }
            Sentence {
                id: id as u64,
                tokens,
                label,
            }
        })
        .collect();
    Corpus::new(vocabulary, sentences).expect("generated corpus is valid")
}

pub const DEFAULT_CORPUS_SIZE: usize = 1000;
pub const DEFAULT_VOCAB_SIZE: usize = 64;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_is_deterministic() {
        let a = generate_synthetic_corpus(1, 64, 7);
        let b = generate_synthetic_corpus(1, 64, 7);
        assert_eq!(a, b);
        assert_ne!(generate_synthetic_corpus(20, 64, 7), generate_synthetic_corpus(20, 64, 8));
    }

    #[test]
    fn sentences_follow_the_construction() {
        let corpus = generate_synthetic_corpus(1000, DEFAULT_VOCAB_SIZE, 1);
        assert_eq!(corpus.vocabulary().len(), DEFAULT_VOCAB_SIZE);
        let mut positives = 0;
        for s in corpus.sentences() {
            assert!((4..=12).contains(&s.tokens.len()));
            let pos = s.tokens.iter().filter(|t| POSITIVE_WORDS.contains(&t.as_str())).count();
            let neg = s.tokens.iter().filter(|t| NEGATIVE_WORDS.contains(&t.as_str())).count();
            assert!((1..=2).contains(&(pos + neg)), "{:?}", s.tokens);
            assert_eq!(s.label, usize::from(pos > neg));
            positives += s.label;
        }
        let share = positives as f64 / 1000.0;
        assert!((share - 0.5).abs() <= 0.05, "positive share {share}");
    }

    #[test]
    fn small_vocab_is_clamped() {
        let v = synthetic_vocabulary(3);
        assert_eq!(v.len(), MIN_SYNTHETIC_VOCAB);
        assert_eq!(&v.tokens()[..2], &["<pad>".to_string(), "<mask>".to_string()]);
    }

    #[test]
    fn jsonl_round_trip_and_validation() {
        let corpus = generate_synthetic_corpus(25, 48, 3);
        let text = corpus.to_jsonl().unwrap();
        assert_eq!(text.lines().count(), 26);
        assert_eq!(Corpus::from_jsonl(&text).unwrap(), corpus);
        assert!(Corpus::from_jsonl("").is_err());
        let dup = text.clone() + &serde_json::to_string(&corpus.sentences()[0]).unwrap();
        assert!(Corpus::from_jsonl(&dup).is_err());
        let unknown = text.replacen("\"tokens\":[\"", "\"tokens\":[\"zzz\",\"", 1);
        assert!(Corpus::from_jsonl(&unknown).is_err());
    }
}
