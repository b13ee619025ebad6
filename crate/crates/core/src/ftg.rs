//! Fine-grained text generation: a hierarchical label becomes four sentences,
//! each encoded into a fixed-length sequence of word-level token ids.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::{Error, IoContext, Result};
use crate::taxonomy::{Authenticity, Family, ForgeryType, HierLabel, KNOWN_GENERATORS};

/// Tokens per sentence.
pub const CONTEXT_LEN: usize = 77;
/// Sentences per prompt set.
pub const LEVELS: usize = 4;

pub const PAD_ID: usize = 0;
pub const SOT_ID: usize = 1;
pub const EOT_ID: usize = 2;
const FIRST_WORD_ID: usize = 3;

pub const REAL_NEUTRAL: [&str; 3] = [
    "a photo of a pristine face",
    "a photo not generated by any model",
    "a photo captured by a camera",
];

// Used only when a fake label stops short of the deepest level.
const FAKE_TYPE_UNKNOWN: &str = "a photo of a forged face";
const FAKE_FAMILY_UNKNOWN: &str = "a photo generated by an unknown model";
const FAKE_GENERATOR_UNKNOWN: &str = "a photo generated by an unknown generator";

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PromptSet {
    pub sentences: [String; LEVELS],
}

pub fn generate_prompts(label: &HierLabel) -> PromptSet {
    let sentences = match label.authenticity() {
        Authenticity::Real => [
            "a photo of a real face".to_string(),
            REAL_NEUTRAL[0].to_string(),
            REAL_NEUTRAL[1].to_string(),
            REAL_NEUTRAL[2].to_string(),
        ],
        Authenticity::Fake => [
            "a photo of a fake face".to_string(),
            label
                .forgery_type()
                .map_or(FAKE_TYPE_UNKNOWN, type_sentence)
                .to_string(),
            label
                .family()
                .map_or(FAKE_FAMILY_UNKNOWN, family_sentence)
                .to_string(),
            label
                .generator()
                .map_or(FAKE_GENERATOR_UNKNOWN.to_string(), |g| {
                    format!("a photo generated by {g}")
                }),
        ],
    };
    PromptSet { sentences }
}

fn type_sentence(t: ForgeryType) -> &'static str {
    match t {
        ForgeryType::Efs => "a photo of an entire synthesized face",
        ForgeryType::Am => "a photo of an attributed manipulated face",
        ForgeryType::Fs => "a photo of an identity swapped face",
    }
}

fn family_sentence(f: Family) -> &'static str {
    match f {
        Family::Diffusion => "a photo generated by the diffusion-based model",
        Family::Gan => "a photo generated by the GAN-based model",
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: [usize; CONTEXT_LEN],
    pub valid_len: usize,
}

impl TokenSeq {
    /// Index of the EOT token.
    pub fn eot_index(&self) -> usize {
        self.valid_len - 1
    }
}

/// Closed word-level vocabulary. Lookup is case-insensitive; each id keeps
/// the surface spelling it was built from so decoding restores generator
/// names like `DiffFace`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_generators(KNOWN_GENERATORS.iter().map(|(_, _, g)| *g))
    }
}

impl Vocab {
    /// Vocabulary covering every template instantiation for the given
    /// generator names (plus the reference taxonomy's).
    pub fn from_generators<'a>(generators: impl IntoIterator<Item = &'a str>) -> Self {
        let mut labels: Vec<HierLabel> = vec![HierLabel::real()];
        let mut names: BTreeSet<String> = KNOWN_GENERATORS
            .iter()
            .map(|(_, _, g)| g.to_string())
            .collect();
        names.extend(generators.into_iter().map(str::to_string));
        for t in [ForgeryType::Efs, ForgeryType::Am, ForgeryType::Fs] {
            labels.push(HierLabel::new(Authenticity::Fake, Some(t), None, None).unwrap());
            for f in [Family::Diffusion, Family::Gan] {
                labels.push(HierLabel::new(Authenticity::Fake, Some(t), Some(f), None).unwrap());
                for g in &names {
                    labels.push(
                        HierLabel::new(Authenticity::Fake, Some(t), Some(f), Some(g.clone()))
                            .unwrap(),
                    );
                }
            }
        }
        labels.push(HierLabel::new(Authenticity::Fake, None, None, None).unwrap());

        let mut surface: BTreeMap<String, String> = BTreeMap::new();
        for l in &labels {
            for s in &generate_prompts(l).sentences {
                for w in s.split_whitespace() {
                    surface.entry(w.to_lowercase()).or_insert_with(|| w.to_string());
                }
            }
        }
        Self::from_words(surface.into_values())
    }

    fn from_words(words: impl IntoIterator<Item = String>) -> Self {
        let mut words: Vec<String> = words.into_iter().collect();
        words.sort_by_key(|w| w.to_lowercase());
        words.dedup_by_key(|w| w.to_lowercase());
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.to_lowercase(), FIRST_WORD_ID + i))
            .collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        FIRST_WORD_ID + self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(&word.to_lowercase()).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        match id {
            PAD_ID => Some("<|pad|>"),
            SOT_ID => Some("<|sot|>"),
            EOT_ID => Some("<|eot|>"),
            _ => self.words.get(id - FIRST_WORD_ID).map(String::as_str),
        }
    }

    pub fn tokenize(&self, sentence: &str) -> Result<TokenSeq> {
        let words: Vec<&str> = sentence.split_whitespace().collect();
        if words.len() + 2 > CONTEXT_LEN {
            return Err(Error::Config(format!(
                "sentence of {} words exceeds the {CONTEXT_LEN}-token context",
                words.len()
            )));
        }
        let mut ids = [PAD_ID; CONTEXT_LEN];
        ids[0] = SOT_ID;
        for (slot, w) in ids[1..].iter_mut().zip(&words) {
            *slot = self.id(w).ok_or_else(|| Error::OutOfVocabulary(w.to_string()))?;
        }
        let valid_len = words.len() + 2;
        ids[valid_len - 1] = EOT_ID;
        Ok(TokenSeq { ids, valid_len })
    }

    pub fn detokenize(&self, seq: &TokenSeq) -> String {
        seq.ids[1..seq.valid_len - 1]
            .iter()
            .filter_map(|&id| self.word(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn encode_prompts(&self, prompts: &PromptSet) -> Result<[TokenSeq; LEVELS]> {
        let seqs: Vec<TokenSeq> = prompts
            .sentences
            .iter()
            .map(|s| self.tokenize(s))
            .collect::<Result<_>>()?;
        Ok(seqs.try_into().expect("four sentences"))
    }

    /// Tokenizes a batch into `b x 4 x 77` ids.
    pub fn encode_prompt_batch(&self, prompts: &[PromptSet]) -> Result<Vec<[TokenSeq; LEVELS]>> {
        prompts.iter().map(|p| self.encode_prompts(p)).collect()
    }

    /// Header line with the special ids, then one word per line in id order.
    pub fn to_text(&self) -> String {
        let mut out = format!("<|pad|>={PAD_ID}\t<|sot|>={SOT_ID}\t<|eot|>={EOT_ID}\n");
        for w in &self.words {
            out.push_str(w);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let expected = format!("<|pad|>={PAD_ID}\t<|sot|>={SOT_ID}\t<|eot|>={EOT_ID}");
        if header != expected {
            return Err(Error::Parse {
                path: "vocab".into(),
                line: 1,
                msg: format!("expected header {expected:?}"),
            });
        }
        let words: Vec<String> = lines
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        let vocab = Self::from_words(words.clone());
        if vocab.words != words {
            return Err(Error::Parse {
                path: "vocab".into(),
                line: 2,
                msg: "words must be unique and sorted".into(),
            });
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path).at(path)?)
    }
}
