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

//! Synthetic downstream tasks over the built-in language.
//!
//! | family          | kind            | rule                                             |
//! |-----------------|-----------------|--------------------------------------------------|
//! | `motif`         | 2-way class     | 1 iff the word `fox` occurs                      |
//! | `acceptability` | 2-way class     | 0 iff the verb misfits its arguments or a word   |
//! |                 |                 | is misspelled                                    |
//! | `sentiment`     | 2-way class     | polarity of the only adjective; verb is neutral  |
//! | `count`         | regression      | number of animal noun phrases / 2                |
//! | `span`          | span extraction | character range of the single personal name      |

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};

use crate::data::{all_verbs, lexicon, verbs, Grammar, Mood, NounClass, Np, Polarity, Vocab};
use crate::error::{Error, Result};
use crate::metrics::{Label, MetricKind};
use crate::model::HeadKind;
use crate::SeededRng;

pub const FAMILIES: [&str; 5] = ["motif", "acceptability", "sentiment", "count", "span"];

/// Word planted by the `motif` family.
pub const MOTIF: &str = "fox";

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub text: String,
    pub label: Label,
}

impl Example {
    pub fn tokens(&self, vocab: &Vocab) -> Vec<usize> {
        vocab.encode(&self.text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub id: String,
    pub kind: HeadKind,
    pub metric: MetricKind,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
}

impl Task {
    pub fn validate(&self) -> Result<()> {
        if self.dev.is_empty() {
            return Err(Error::Empty("dev set"));
        }
        for ex in self.train.iter().chain(&self.dev) {
            let ok = match (self.kind, ex.label) {
                (HeadKind::Classification(n), Label::Class(c)) => c < n,
                (HeadKind::Regression, Label::Value(v)) => v.is_finite(),
                (HeadKind::Span, Label::Span { start, end }) => start < end && end <= ex.text.chars().count(),
                _ => false,
            };
            if !ok {
                return Err(Error::InvalidArgument(alloc::format!(
                    "task {}: label {:?} inconsistent with {:?}",
                    self.id,
                    ex.label,
                    self.kind
                )));
            }
        }
        Ok(())
    }
}

fn words(text: &str) -> impl Iterator<Item = &str> {
    text.split(' ').map(|w| w.trim_end_matches('.'))
}

fn contains_word(text: &str, word: &str) -> bool {
    words(text).any(|w| w == word)
}

fn family_shape(family: &str) -> Result<(HeadKind, MetricKind)> {
    Ok(match family {
        "motif" | "sentiment" => (HeadKind::Classification(2), MetricKind::Accuracy),
        "acceptability" => (HeadKind::Classification(2), MetricKind::Matthews),
        "count" => (HeadKind::Regression, MetricKind::Pearson),
        "span" => (HeadKind::Span, MetricKind::F1Span),
        other => return Err(Error::UnknownFamily(other.to_string())),
    })
}

fn is_word(w: &str) -> bool {
    NounClass::of(w).is_some()
        || Polarity::of(w).is_some()
        || lexicon::DETERMINERS.contains(&w)
        || all_verbs().any(|v| v == w)
}

fn corrupt(rng: &mut SeededRng, text: &str) -> String {
    let body = text.trim_end_matches('.');
    let mut ws: Vec<String> = body.split(' ').map(String::from).collect();
    if rng.random::<bool>() {
        // Replace the verb by one of the same mood licensed only for other
        // argument classes.
        let v = ws.iter().position(|w| all_verbs().any(|x| x == w)).expect("every sentence has a verb");
        let subject = NounClass::of(&ws[v - 1]).expect("subject noun precedes the verb");
        let object = NounClass::of(ws.last().unwrap()).expect("sentence ends with a noun");
        let mood = verbs(subject, object).polarity_of(&ws[v]).expect("verb fits its arguments");
        let wrong: Vec<&str> = NounClass::ALL
            .iter()
            .flat_map(|&a| NounClass::ALL.map(|b| (a, b)))
            .filter(|&pair| pair != (subject, object))
            .flat_map(|(a, b)| verbs(a, b).mood(mood).iter().copied())
            .collect();
        ws[v] = String::from(*wrong.choose(rng).unwrap());
    } else {
        // Swap two distinct adjacent letters so that no known word results.
        let mut options = Vec::new();
        for (i, w) in ws.iter().enumerate() {
            let chars: Vec<char> = w.chars().collect();
            for j in 0..chars.len().saturating_sub(1) {
                let mut c = chars.clone();
                c.swap(j, j + 1);
                let swapped: String = c.into_iter().collect();
                if chars.len() >= 3 && chars[j] != chars[j + 1] && !is_word(&swapped) {
                    options.push((i, swapped));
                }
            }
        }
        let (i, swapped) = options.choose(rng).expect("every sentence has a misspellable word").clone();
        ws[i] = swapped;
    }
    let mut out = ws.join(" ");
    out.push('.');
    out
}

fn np_kind(rng: &mut SeededRng) -> (Np<'static>, usize) {
    match rng.random_range(0..3) {
        0 => (Np::Class(NounClass::Animal), 1),
        1 => (Np::Class(NounClass::Person), 0),
        _ => (Np::Name(lexicon::NAMES.choose(rng).unwrap()), 0),
    }
}

fn sample(family: &str, grammar: &Grammar, rng: &mut SeededRng) -> Example {
    match family {
        "motif" => {
            if rng.random::<bool>() {
                let (s, o) = if rng.random::<bool>() {
                    (Np::Noun(MOTIF), Np::Any)
                } else {
                    (Np::Any, Np::Noun(MOTIF))
                };
                let text = grammar.sentence_with(rng, s, o);
                Example { text, label: Label::Class(1) }
            } else {
                loop {
                    let text = grammar.sentence(rng);
                    if !contains_word(&text, MOTIF) {
                        return Example { text, label: Label::Class(0) };
                    }
                }
            }
        }
        "acceptability" => {
            let text = grammar.sentence(rng);
            if rng.random::<bool>() {
                Example { text, label: Label::Class(1) }
            } else {
                Example { text: corrupt(rng, &text), label: Label::Class(0) }
            }
        }
        "sentiment" => {
            let polarity = if rng.random::<bool>() { Polarity::Positive } else { Polarity::Negative };
            let adj = *polarity.adjectives().choose(rng).unwrap();
            let (s, o) = if rng.random::<bool>() {
                (Np::Adjective(adj), Np::Plain)
            } else {
                (Np::Plain, Np::Adjective(adj))
            };
            let text = grammar.clause(rng, s, o, Mood::Neutral);
            Example { text, label: Label::Class((polarity == Polarity::Positive) as usize) }
        }
        "count" => {
            let (s, a) = np_kind(rng);
            let (o, b) = np_kind(rng);
            let text = grammar.sentence_with(rng, s, o);
            Example { text, label: Label::Value((a + b) as f64 / 2.0) }
        }
        "span" => {
            let name = *lexicon::NAMES.choose(rng).unwrap();
            let class = *NounClass::ALL.choose(rng).unwrap();
            let subject_is_name = rng.random::<bool>();
            let (s, o) = if subject_is_name {
                (Np::Name(name), Np::Class(class))
            } else {
                (Np::Class(class), Np::Name(name))
            };
            let text = grammar.sentence_with(rng, s, o);
            let start = if subject_is_name {
                0
            } else {
                text.len() - 1 - name.len()
            };
            Example { text, label: Label::Span { start, end: start + name.len() } }
        }
        _ => unreachable!("family checked by caller"),
    }
}

/// Generates `train + dev` examples of a registered family, each at most
/// `max_chars` characters long.
pub fn make_task(family: &str, train: usize, dev: usize, seed: u64, max_chars: usize) -> Result<Task> {
    let (kind, metric) = family_shape(family)?;
    if dev == 0 {
        return Err(Error::Empty("dev set"));
    }
    if max_chars < 24 {
        return Err(Error::InvalidArgument(alloc::format!(
            "max_chars {max_chars} too small for the synthetic language"
        )));
    }
    let grammar = Grammar::default();
    let mut rng = SeededRng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(train + dev);
    while examples.len() < train + dev {
        let ex = sample(family, &grammar, &mut rng);
        if ex.text.chars().count() <= max_chars {
            examples.push(ex);
        }
    }
    let dev_set = examples.split_off(train);
    let task = Task {
        id: family.to_string(),
        kind,
        metric,
        train: examples,
        dev: dev_set,
    };
    task.validate()?;
    Ok(task)
}

/// Keeps `n` training examples, stratified by label for classification.
/// Selected examples keep their original order; the dev set is untouched.
pub fn subsample(task: &Task, n: usize, seed: u64) -> Result<Task> {
    let total = task.train.len();
    if n == 0 || n > total {
        return Err(Error::InvalidArgument(alloc::format!(
            "subsample size {n} outside 1..={total}"
        )));
    }
    let mut rng = SeededRng::seed_from_u64(seed);
    let mut picked: Vec<usize> = match task.kind {
        HeadKind::Classification(classes) => {
            let mut by_class: Vec<Vec<usize>> = (0..classes).map(|_| Vec::new()).collect();
            for (i, ex) in task.train.iter().enumerate() {
                if let Label::Class(c) = ex.label {
                    by_class[c].push(i);
                }
            }
            // Largest-remainder quotas keep each class within one example
            // of its original proportion.
            let exact: Vec<f64> = by_class.iter().map(|v| v.len() as f64 * n as f64 / total as f64).collect();
            let mut quota: Vec<usize> = exact.iter().map(|&e| libm::floor(e) as usize).collect();
            let mut order: Vec<usize> = (0..classes).collect();
            order.sort_by(|&a, &b| {
                let ra = exact[a] - quota[a] as f64;
                let rb = exact[b] - quota[b] as f64;
                rb.total_cmp(&ra).then(a.cmp(&b))
            });
            let mut remaining = n - quota.iter().sum::<usize>();
            for c in order {
                if remaining == 0 {
                    break;
                }
                if quota[c] < by_class[c].len() {
                    quota[c] += 1;
                    remaining -= 1;
                }
            }
            by_class
                .iter_mut()
                .zip(&quota)
                .flat_map(|(idx, &q)| {
                    idx.shuffle(&mut rng);
                    idx[..q].to_vec()
                })
                .collect()
        }
        _ => rand::seq::index::sample(&mut rng, total, n).into_vec(),
    };
    picked.sort_unstable();
    Ok(Task {
        train: picked.iter().map(|&i| task.train[i].clone()).collect(),
        ..task.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_family() {
        assert!(matches!(make_task("nope", 1, 1, 0, 30), Err(Error::UnknownFamily(_))));
    }

    #[test]
    fn motif_labels_match_presence() {
        let t = make_task("motif", 500, 50, 1, 30).unwrap();
        for ex in t.train.iter().chain(&t.dev) {
            assert_eq!(ex.label == Label::Class(1), contains_word(&ex.text, MOTIF), "{}", ex.text);
        }
    }

    #[test]
    fn span_labels_locate_the_name() {
        let t = make_task("span", 300, 30, 2, 30).unwrap();
        for ex in &t.train {
            let Label::Span { start, end } = ex.label else { panic!() };
            assert!(lexicon::NAMES.contains(&&ex.text[start..end]), "{}", ex.text);
        }
    }

    #[test]
    fn sentences_respect_length_limit() {
        for family in FAMILIES {
            let t = make_task(family, 200, 20, 3, 26).unwrap();
            assert!(t.train.iter().all(|e| e.text.chars().count() <= 26));
        }
    }

    // Length, class and adjective polarity of the noun phrase opening `ws`.
    fn noun_phrase(ws: &[&str]) -> Option<(usize, NounClass, Option<Polarity>)> {
        match ws {
            [n, ..] if lexicon::NAMES.contains(n) => Some((1, NounClass::Person, None)),
            [d, a, n, ..] if lexicon::DETERMINERS.contains(d) && Polarity::of(a).is_some() => {
                NounClass::of(n).filter(|_| !lexicon::NAMES.contains(n)).map(|c| (3, c, Polarity::of(a)))
            }
            [d, n, ..] if lexicon::DETERMINERS.contains(d) && !lexicon::NAMES.contains(n) => {
                NounClass::of(n).map(|c| (2, c, None))
            }
            _ => None,
        }
    }

    // Recognizer for `NP VERB NP .` with class restrictions and polarity
    // agreement.
    fn grammatical(text: &str) -> bool {
        let Some(body) = text.strip_suffix('.') else { return false };
        let ws: Vec<&str> = body.split(' ').collect();
        let Some((a, sc, sp)) = noun_phrase(&ws) else { return false };
        let Some(&verb) = ws.get(a) else { return false };
        let Some((b, oc, op)) = noun_phrase(&ws[a + 1..]) else { return false };
        if a + 1 + b != ws.len() {
            return false;
        }
        let Some(vp) = verbs(sc, oc).polarity_of(verb) else { return false };
        let marks: Vec<Polarity> = [sp, op, vp].into_iter().flatten().collect();
        marks.windows(2).all(|p| p[0] == p[1])
    }

    #[test]
    fn acceptability_labels_match_a_recognizer() {
        let t = make_task("acceptability", 2000, 10, 4, 40).unwrap();
        for ex in &t.train {
            assert_eq!(ex.label == Label::Class(1), grammatical(&ex.text), "{}", ex.text);
        }
    }

    #[test]
    fn sentiment_labels_follow_the_adjective() {
        let t = make_task("sentiment", 500, 10, 8, 40).unwrap();
        for ex in &t.train {
            assert!(grammatical(&ex.text), "{}", ex.text);
            let marks: Vec<Polarity> = ex.text.trim_end_matches('.').split(' ').filter_map(Polarity::of).collect();
            assert_eq!(marks.len(), 1, "{}", ex.text);
            assert_eq!(ex.label == Label::Class(1), marks[0] == Polarity::Positive);
        }
    }

    #[test]
    fn count_labels_count_animals() {
        let t = make_task("count", 500, 10, 9, 40).unwrap();
        for ex in &t.train {
            let animals = words(&ex.text).filter(|w| lexicon::ANIMALS.contains(w)).count();
            assert_eq!(ex.label, Label::Value(animals as f64 / 2.0), "{}", ex.text);
        }
    }

    #[test]
    fn subsample_contracts() {
        let t = make_task("sentiment", 101, 10, 5, 30).unwrap();
        assert_eq!(subsample(&t, 101, 9).unwrap(), t);
        assert!(subsample(&t, 0, 9).is_err());
        assert!(subsample(&t, 102, 9).is_err());
        let s = subsample(&t, 37, 9).unwrap();
        assert_eq!(s, subsample(&t, 37, 9).unwrap());
        assert_eq!(s.dev, t.dev);
        let pos = |v: &[Example]| v.iter().filter(|e| e.label == Label::Class(1)).count() as f64;
        let expected = pos(&t.train) * 37.0 / 101.0;
        assert!((pos(&s.train) - expected).abs() <= 1.0);
        let r = make_task("count", 50, 5, 6, 30).unwrap();
        assert_eq!(subsample(&r, 20, 1).unwrap().train.len(), 20);
    }
}
