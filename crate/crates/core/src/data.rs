// Copyright 2026 The tamt Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! Character vocabulary, corpora and the synthetic language used for the
//! built-in corpus and downstream tasks.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::SeededRng;

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const UNK: usize = 4;
pub const NUM_SPECIAL: usize = 5;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["[PAD]", "[MASK]", "[CLS]", "[SEP]", "[UNK]"];

/// Character-level vocabulary. Specials take ids `0..5`; characters follow
/// in code-point order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
    index: BTreeMap<char, usize>,
}

impl Vocab {
    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Self {
        let set: BTreeSet<char> = chars.into_iter().collect();
        let chars: Vec<char> = set.into_iter().collect();
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i + NUM_SPECIAL)).collect();
        Self { chars, index }
    }

    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        Self::from_chars(texts.into_iter().flat_map(str::chars))
    }

    pub fn len(&self) -> usize {
        NUM_SPECIAL + self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<char> {
        id.checked_sub(NUM_SPECIAL).and_then(|i| self.chars.get(i).copied())
    }

    /// `[CLS] chars… [SEP]`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::with_capacity(text.len() + 2);
        ids.push(CLS);
        ids.extend(text.chars().map(|c| self.id(c)));
        ids.push(SEP);
        ids
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&id| match self.token(id) {
                Some(c) => String::from(c),
                None => String::from(SPECIAL_TOKENS.get(id).copied().unwrap_or("[UNK]")),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
}

/// Token-id sequences sharing one vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub docs: Vec<Vec<usize>>,
    pub vocab: Vocab,
    pub split: Split,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.docs.iter().map(Vec::len).sum()
    }
}

/// Collapses whitespace runs and cuts the text into windows of at most
/// `width` characters.
pub fn chunk_text(text: &str, width: usize) -> Vec<String> {
    let mut chunks = Vec::new();
    let mut cur = String::new();
    let mut cur_len = 0;
    let mut pending_space = false;
    for c in text.chars() {
        if c.is_whitespace() {
            pending_space = cur_len > 0;
            continue;
        }
        if pending_space {
            if cur_len + 1 >= width {
                chunks.push(core::mem::take(&mut cur));
                cur_len = 0;
            } else {
                cur.push(' ');
                cur_len += 1;
            }
            pending_space = false;
        }
        if cur_len == width {
            chunks.push(core::mem::take(&mut cur));
            cur_len = 0;
        }
        cur.push(c);
        cur_len += 1;
    }
    if cur_len > 0 {
        chunks.push(cur);
    }
    chunks
}

fn fnv(text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Chunks documents into `[CLS] … [SEP]` sequences of at most `max_len`
/// tokens and splits them deterministically into train and dev. The
/// vocabulary is built from the train split only; dev chunks whose text also
/// occurs in train are dropped.
pub fn build_corpus(texts: &[String], max_len: usize, dev_fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(dev_fraction > 0.0 && dev_fraction < 1.0) {
        return Err(Error::InvalidArgument(alloc::format!(
            "dev fraction {dev_fraction} outside (0, 1)"
        )));
    }
    if max_len < 3 {
        return Err(Error::InvalidArgument(alloc::format!("max_len {max_len} leaves no room for text")));
    }
    let mut chunks: Vec<String> = texts.iter().flat_map(|t| chunk_text(t, max_len - 2)).collect();
    if chunks.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let mut rng = SeededRng::seed_from_u64(seed);
    chunks.shuffle(&mut rng);
    let n = chunks.len();
    let n_dev = if n < 2 {
        0
    } else {
        (libm::round(n as f64 * dev_fraction) as usize).clamp(1, n - 1)
    };
    let dev_text = chunks.split_off(n - n_dev);
    let train_text = chunks;
    let seen: BTreeSet<u64> = train_text.iter().map(|t| fnv(t)).collect();
    let vocab = Vocab::from_texts(train_text.iter().map(String::as_str));
    let train = Corpus {
        docs: train_text.iter().map(|t| vocab.encode(t)).collect(),
        vocab: vocab.clone(),
        split: Split::Train,
    };
    let dev = Corpus {
        docs: dev_text
            .iter()
            .filter(|t| !seen.contains(&fnv(t)))
            .map(|t| vocab.encode(t))
            .collect(),
        vocab,
        split: Split::Dev,
    };
    Ok((train, dev))
}

/// Word lists of the built-in synthetic language. Noun class and adjective
/// polarity are not visible in the spelling; a model can only pick them up
/// from which verbs and adjectives a word co-occurs with.
pub mod lexicon {
    pub const DETERMINERS: [&str; 3] = ["the", "a", "one"];
    pub const ANIMALS: [&str; 16] = [
        "cat", "dog", "fox", "hen", "cow", "owl", "pig", "rat", "bat", "ant", "elk", "yak", "emu", "ape", "eel", "bee",
    ];
    pub const PEOPLE: [&str; 16] = [
        "man", "boy", "girl", "king", "maid", "lady", "monk", "nun", "cook", "chef", "aunt", "son", "wife", "duke",
        "lord", "poet",
    ];
    /// Proper names; they behave like people.
    pub const NAMES: [&str; 10] = ["tom", "ann", "bob", "eve", "max", "zoe", "sam", "kim", "lea", "ian"];
    pub const POSITIVE: [&str; 10] = ["good", "kind", "nice", "glad", "fine", "calm", "warm", "wise", "fair", "neat"];
    pub const NEGATIVE: [&str; 10] = ["bad", "sad", "mean", "ugly", "weak", "rude", "cold", "vile", "sly", "dull"];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NounClass {
    Animal,
    Person,
}

impl NounClass {
    pub const ALL: [NounClass; 2] = [NounClass::Animal, NounClass::Person];

    pub fn nouns(self) -> &'static [&'static str] {
        match self {
            NounClass::Animal => &lexicon::ANIMALS,
            NounClass::Person => &lexicon::PEOPLE,
        }
    }

    /// Class of a noun or name.
    pub fn of(word: &str) -> Option<Self> {
        if lexicon::ANIMALS.contains(&word) {
            Some(NounClass::Animal)
        } else if lexicon::PEOPLE.contains(&word) || lexicon::NAMES.contains(&word) {
            Some(NounClass::Person)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn adjectives(self) -> &'static [&'static str] {
        match self {
            Polarity::Positive => &lexicon::POSITIVE,
            Polarity::Negative => &lexicon::NEGATIVE,
        }
    }

    pub fn of(adjective: &str) -> Option<Self> {
        if lexicon::POSITIVE.contains(&adjective) {
            Some(Polarity::Positive)
        } else if lexicon::NEGATIVE.contains(&adjective) {
            Some(Polarity::Negative)
        } else {
            None
        }
    }
}

/// Verbs licensed for one (subject class, object class) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerbSet {
    pub positive: [&'static str; 2],
    pub negative: [&'static str; 2],
    pub neutral: [&'static str; 2],
}

impl VerbSet {
    /// Verbs of one mood; `None` selects the neutral ones.
    pub fn mood(&self, polarity: Option<Polarity>) -> &[&'static str; 2] {
        match polarity {
            Some(Polarity::Positive) => &self.positive,
            Some(Polarity::Negative) => &self.negative,
            None => &self.neutral,
        }
    }

    /// Polarity carried by `verb`: `Some(None)` for a neutral verb, `None`
    /// when the verb is not in this set.
    pub fn polarity_of(&self, verb: &str) -> Option<Option<Polarity>> {
        [Some(Polarity::Positive), Some(Polarity::Negative), None]
            .into_iter()
            .find(|&p| self.mood(p).contains(&verb))
    }
}

const VERB_TABLE: [[VerbSet; 2]; 2] = [
    [
        VerbSet {
            positive: ["grooms", "warms"],
            negative: ["chases", "eats"],
            neutral: ["smells", "joins"],
        },
        VerbSet {
            positive: ["licks", "greets"],
            negative: ["bites", "stings"],
            neutral: ["eyes", "nears"],
        },
    ],
    [
        VerbSet {
            positive: ["feeds", "pets"],
            negative: ["kicks", "traps"],
            neutral: ["owns", "walks"],
        },
        VerbSet {
            positive: ["hugs", "helps"],
            negative: ["robs", "hits"],
            neutral: ["meets", "sees"],
        },
    ],
];

/// Verbs that take a `subject` of one class and an `object` of another.
pub fn verbs(subject: NounClass, object: NounClass) -> &'static VerbSet {
    &VERB_TABLE[subject as usize][object as usize]
}

/// Every verb of the language.
pub fn all_verbs() -> impl Iterator<Item = &'static str> {
    VERB_TABLE
        .iter()
        .flatten()
        .flat_map(|v| v.positive.iter().chain(&v.negative).chain(&v.neutral).copied())
}

/// Sentence sampler for the synthetic language `NP VERB NP .` with
/// `NP = DET [ADJ] NOUN | NAME`.
///
/// Each sentence has a polarity. Adjectives are drawn from it and the verb
/// is either neutral or carries it. The verb must also fit the classes of
/// subject and object.
#[derive(Debug, Clone, Copy)]
pub struct Grammar {
    pub adjective_prob: f64,
    pub name_prob: f64,
    pub polar_verb_prob: f64,
}

impl Default for Grammar {
    fn default() -> Self {
        Self {
            adjective_prob: 0.5,
            name_prob: 0.2,
            polar_verb_prob: 0.5,
        }
    }
}

/// Noun phrase specification for constrained generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Np<'a> {
    Any,
    /// Determiner, optional adjective and a noun of this class.
    Class(NounClass),
    /// Determiner, optional adjective and this noun.
    Noun(&'a str),
    /// Determiner, this adjective and a random noun; fixes the polarity.
    Adjective(&'a str),
    /// A name or a determiner and noun without adjective.
    Plain,
    Name(&'a str),
}

/// Verb selection for [`Grammar::clause`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mood {
    Sampled,
    Neutral,
}

impl Grammar {
    fn random_class(rng: &mut SeededRng) -> NounClass {
        if rng.random::<bool>() {
            NounClass::Animal
        } else {
            NounClass::Person
        }
    }

    fn noun_phrase(&self, rng: &mut SeededRng, np: Np<'_>, polarity: Polarity) -> (String, NounClass) {
        use lexicon::*;
        let name_roll = rng.random::<f64>() < self.name_prob;
        let (noun, adjective) = match np {
            Np::Name(n) => return (String::from(n), NounClass::Person),
            Np::Any | Np::Plain if name_roll => return (String::from(*NAMES.choose(rng).unwrap()), NounClass::Person),
            Np::Noun(n) => (n, None),
            Np::Class(c) => (*c.nouns().choose(rng).unwrap(), None),
            Np::Adjective(a) => (*Self::random_class(rng).nouns().choose(rng).unwrap(), Some(Some(a))),
            Np::Any => (*Self::random_class(rng).nouns().choose(rng).unwrap(), None),
            Np::Plain => (*Self::random_class(rng).nouns().choose(rng).unwrap(), Some(None)),
        };
        let class = NounClass::of(noun).expect("nouns come from the lexicon");
        let det = *DETERMINERS.choose(rng).unwrap();
        let adjective = adjective.unwrap_or_else(|| {
            (rng.random::<f64>() < self.adjective_prob).then(|| *polarity.adjectives().choose(rng).unwrap())
        });
        let text = match adjective {
            Some(a) => alloc::format!("{det} {a} {noun}"),
            None => alloc::format!("{det} {noun}"),
        };
        (text, class)
    }

    /// Builds one sentence. An [`Np::Adjective`] phrase fixes the sentence
    /// polarity; otherwise it is drawn at random.
    pub fn clause(&self, rng: &mut SeededRng, subject: Np<'_>, object: Np<'_>, mood: Mood) -> String {
        let fixed = [subject, object].into_iter().find_map(|np| match np {
            Np::Adjective(a) => Polarity::of(a),
            _ => None,
        });
        let polarity = fixed.unwrap_or_else(|| {
            if rng.random::<bool>() {
                Polarity::Positive
            } else {
                Polarity::Negative
            }
        });
        let (s, sc) = self.noun_phrase(rng, subject, polarity);
        let (o, oc) = self.noun_phrase(rng, object, polarity);
        let polar = mood == Mood::Sampled && rng.random::<f64>() < self.polar_verb_prob;
        let v = *verbs(sc, oc).mood(polar.then_some(polarity)).choose(rng).unwrap();
        alloc::format!("{s} {v} {o}.")
    }

    pub fn sentence_with(&self, rng: &mut SeededRng, subject: Np<'_>, object: Np<'_>) -> String {
        self.clause(rng, subject, object, Mood::Sampled)
    }

    pub fn sentence(&self, rng: &mut SeededRng) -> String {
        self.sentence_with(rng, Np::Any, Np::Any)
    }
}

/// Plain text of `sentences` sentences, grouped into lines of four.
pub fn synthetic_text(seed: u64, sentences: usize) -> String {
    let grammar = Grammar::default();
    let mut rng = SeededRng::seed_from_u64(seed);
    let mut out = String::new();
    for i in 0..sentences {
        out.push_str(&grammar.sentence(&mut rng));
        out.push(if i % 4 == 3 { '\n' } else { ' ' });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    #[test]
    fn single_short_doc_is_one_sequence() {
        let (train, dev) = build_corpus(&["abcdefghij".to_string()], 128, 0.1, 0).unwrap();
        assert_eq!(train.docs.len(), 1);
        assert_eq!(train.docs[0].len(), 12);
        assert_eq!(train.docs[0][0], CLS);
        assert_eq!(train.docs[0][11], SEP);
        assert!(dev.is_empty());
    }

    #[test]
    fn unseen_dev_char_maps_to_unk() {
        let v = Vocab::from_texts(["abc"]);
        assert_eq!(v.encode("az"), vec![CLS, NUM_SPECIAL, UNK, SEP]);
        assert_eq!(v.len(), 8);
        assert_eq!(v.decode(&v.encode("cab")), "[CLS]cab[SEP]");
    }

    #[test]
    fn vocab_sorted_by_code_point() {
        let v = Vocab::from_texts(["zyx a"]);
        assert_eq!(v.chars(), &[' ', 'a', 'x', 'y', 'z']);
    }

    #[test]
    fn build_corpus_errors_and_determinism() {
        assert!(build_corpus(&[], 16, 0.1, 0).is_err());
        assert!(build_corpus(&["   ".to_string()], 16, 0.1, 0).is_err());
        assert!(build_corpus(&["abc".to_string()], 16, 0.0, 0).is_err());
        assert!(build_corpus(&["abc".to_string()], 16, 1.0, 0).is_err());
        let text = vec![synthetic_text(1, 200)];
        let a = build_corpus(&text, 32, 0.1, 7).unwrap();
        let b = build_corpus(&text, 32, 0.1, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.0.docs.iter().all(|d| d.len() <= 32));
        assert!(!a.1.is_empty());
    }

    #[test]
    fn chunking_respects_width_and_whitespace() {
        let chunks = chunk_text("ab  cd\nef", 4);
        assert!(chunks.iter().all(|c| c.chars().count() <= 4));
        assert_eq!(chunks.concat().replace(' ', ""), "abcdef");
    }

    #[test]
    fn grammar_builds_sentences() {
        let mut rng = SeededRng::seed_from_u64(0);
        let g = Grammar::default();
        let s = g.sentence_with(&mut rng, Np::Name("tom"), Np::Noun("fox"));
        assert!(s.starts_with("tom "));
        assert!(s.ends_with(" fox."));
        let verb = s.split(' ').nth(1).unwrap();
        assert!(verbs(NounClass::Person, NounClass::Animal).polarity_of(verb).is_some(), "{s}");
    }

    #[test]
    fn lexicon_words_are_unambiguous() {
        let mut seen = BTreeSet::new();
        let words = lexicon::DETERMINERS
            .iter()
            .chain(&lexicon::ANIMALS)
            .chain(&lexicon::PEOPLE)
            .chain(&lexicon::NAMES)
            .chain(&lexicon::POSITIVE)
            .chain(&lexicon::NEGATIVE)
            .copied()
            .chain(all_verbs());
        for w in words {
            assert!(seen.insert(w), "{w} listed twice");
        }
    }

    #[test]
    fn adjectives_agree_with_polar_verbs() {
        let mut rng = SeededRng::seed_from_u64(3);
        let g = Grammar::default();
        for _ in 0..500 {
            let s = g.sentence(&mut rng);
            let ws: Vec<&str> = s.trim_end_matches('.').split(' ').collect();
            let mut polarities: Vec<Polarity> = ws.iter().filter_map(|w| Polarity::of(w)).collect();
            for set in NounClass::ALL.iter().flat_map(|&a| NounClass::ALL.map(|b| verbs(a, b))) {
                polarities.extend(ws.iter().filter_map(|w| set.polarity_of(w)).flatten());
            }
            assert!(polarities.windows(2).all(|p| p[0] == p[1]), "{s}");
        }
    }
}
