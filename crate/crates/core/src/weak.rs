//! Weak supervision from text: a small rule-based caption parser, ingestion
//! of externally synthesized scene graphs, and grounding of parsed triplets
//! against detector boxes.
//!
//! The parser is a transparent pattern grammar rather than a dependency
//! parser. Its rules, in the order they are applied:
//!
//! 1. Sentence punctuation (`. ; ! ? :`) ends a clause.
//! 2. Quantifier phrases ("a group of", "a pair of") and determiners open a
//!    noun phrase and are dropped.
//! 3. Predicates are matched longest-first against the lexicon relations
//!    (also with the first word inflected, so "rides" finds "riding"), then
//!    against a fixed preposition list, then as participles (`-ing`) or
//!    known finite verbs, each optionally followed by a preposition that is
//!    merged in ("standing" + "next to").
//! 4. A copula before a predicate is collapsed ("is on" becomes "on") and
//!    ties the predicate to the clause subject.
//! 5. Remaining words form noun phrases; the phrase resolves to its
//!    rightmost lexicon object (with plural stripping), else to its raw
//!    singularized head noun.
//! 6. "and", "or" and commas between noun phrases form conjunction groups;
//!    a subject group is distributed over the predicate.
//! 7. In object position, a group followed by a verb starts a new clause
//!    with its last member as subject ("holding an umbrella and a man
//!    wearing a hat").
//! 8. "of" and "with" bind to the nearest preceding noun phrase ("a plate
//!    of food"); every other predicate binds to the clause subject ("a
//!    woman holding an umbrella on a street").
//! 9. A relative pronoun makes the preceding noun phrase the clause subject
//!    ("a man looking at a dog that is lying on a bed").
//! 10. Predicates are normalized to the lexicon by inflection stripping or a
//!     single-character edit in a long word, otherwise kept raw.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{normalize_name, BBox, ConceptSpace, Edge, Node};

/// Which pipeline produced a triplet or graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Parser,
    Llm,
    Mllm,
}

/// A (subject, predicate, object) phrase triplet not yet tied to boxes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UngroundedTriplet {
    pub subject_phrase: String,
    pub predicate_phrase: String,
    pub object_phrase: String,
    pub source: Source,
}

impl UngroundedTriplet {
    pub fn new(subject: &str, predicate: &str, object: &str, source: Source) -> Self {
        UngroundedTriplet {
            subject_phrase: normalize_name(subject),
            predicate_phrase: normalize_name(predicate),
            object_phrase: normalize_name(object),
            source,
        }
    }

    pub fn key(&self) -> (&str, &str, &str) {
        (&self.subject_phrase, &self.predicate_phrase, &self.object_phrase)
    }
}

/// One line of a caption corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    pub caption: String,
}

const DETERMINERS: &[&str] = &[
    "a", "an", "the", "this", "these", "those", "some", "several", "many", "few", "two", "three", "four",
    "five", "six", "seven", "eight", "nine", "ten", "one", "his", "her", "its", "their", "our", "my",
    "your", "another", "each", "every", "other", "both", "all", "multiple", "numerous", "various",
];

const QUANTIFIERS: &[&str] = &[
    "group", "bunch", "couple", "pair", "lot", "lots", "herd", "flock", "pile", "set", "row", "stack",
    "variety", "team",
];

const COPULAS: &[&str] = &["is", "are", "was", "were", "be", "been", "being", "am"];

const IGNORED: &[&str] = &[
    "there", "down", "up", "together", "very", "it", "them", "him", "they", "he", "she", "we", "out",
    "just", "also", "still", "away", "here", "something", "while", "who", "which", "that",
];

const RELATIVE: &[&str] = &["that", "which", "who"];

/// Prepositions beyond the lexicon, longest phrases first when matched.
const EXTRA_PREPOSITIONS: &[&str] = &[
    "next to", "on top of", "close to", "out of", "inside of", "in the middle of", "beside", "inside",
    "into", "onto", "by", "beneath", "underneath", "below", "through", "around", "among", "atop",
    "outside", "toward", "towards", "alongside", "behind", "near", "beyond", "within", "upon", "off",
    "like",
];

/// Single-word prepositions that start lexicon relation phrases.
const PREPOSITION_WORDS: &[&str] = &[
    "above", "across", "against", "along", "at", "behind", "between", "for", "from", "in", "near", "of",
    "on", "over", "to", "under", "with", "next", "beside", "inside", "into", "onto", "by", "beneath",
    "underneath", "below", "through", "around", "among", "atop", "outside", "toward", "towards",
    "alongside", "close", "out", "beyond", "within", "upon", "off", "like",
];

/// Finite verb forms recognized even when their `-ing` form is not in the
/// lexicon.
const FINITE_VERBS: &[&str] = &[
    "sits", "stands", "holds", "rides", "wears", "eats", "looks", "walks", "lays", "lies", "flies",
    "hangs", "plays", "carries", "watches", "uses", "covers", "grows", "throws", "runs", "jumps",
    "swings", "drives", "pulls", "pushes", "catches", "cuts", "drinks", "reads", "talks", "waits",
    "kicks", "hits", "leans", "rests", "sleeps", "grazes", "crosses", "chases", "stares", "has",
    "have", "says", "contains", "shows", "travels", "surfs", "skis", "feeds", "pets",
];

fn irregular_plural(w: &str) -> Option<&'static str> {
    Some(match w {
        "men" => "man",
        "women" => "woman",
        "children" => "child",
        "people" => "person",
        "feet" => "foot",
        "teeth" => "tooth",
        "mice" => "mouse",
        "geese" => "goose",
        "leaves" => "leaf",
        "knives" => "knife",
        "shelves" => "shelf",
        "wolves" => "wolf",
        "loaves" => "loaf",
        "calves" => "calf",
        _ => return None,
    })
}

/// Candidate singular forms of `w`, most specific first (the word itself
/// is not included).
fn singulars(w: &str) -> Vec<String> {
    let mut out = Vec::new();
    if let Some(s) = irregular_plural(w) {
        out.push(s.to_string());
    }
    if let Some(stem) = w.strip_suffix("ies") {
        out.push(format!("{stem}y"));
    }
    if let Some(stem) = w.strip_suffix("es") {
        out.push(stem.to_string());
    }
    if let Some(stem) = w.strip_suffix('s') {
        if !stem.ends_with('s') && !stem.is_empty() {
            out.push(stem.to_string());
        }
    }
    out
}

/// Best-effort singular for a word outside the lexicon.
fn raw_singular(w: &str) -> String {
    if let Some(s) = irregular_plural(w) {
        return s.to_string();
    }
    if w.len() > 4 {
        if let Some(stem) = w.strip_suffix("ies") {
            return format!("{stem}y");
        }
        for suf in ["ches", "shes", "sses", "xes"] {
            if w.ends_with(suf) {
                return w[..w.len() - 2].to_string();
            }
        }
    }
    if w.len() > 3 && w.ends_with('s') && !w.ends_with("ss") && !w.ends_with("us") && !w.ends_with("is") {
        return w[..w.len() - 1].to_string();
    }
    w.to_string()
}

/// `-ing` forms a finite verb (or a bare stem) could come from.
fn ing_forms(w: &str) -> Vec<String> {
    if w == "has" || w == "have" {
        return vec!["has".into()];
    }
    let mut stems = vec![w.to_string()];
    if let Some(s) = w.strip_suffix("ies") {
        stems.push(format!("{s}y"));
        stems.push(format!("{s}ie"));
    }
    if let Some(s) = w.strip_suffix("es") {
        stems.push(s.to_string());
    }
    if let Some(s) = w.strip_suffix('s') {
        stems.push(s.to_string());
    }
    let mut out = Vec::new();
    for s in stems {
        if s.is_empty() {
            continue;
        }
        out.push(format!("{s}ing"));
        if let Some(t) = s.strip_suffix("ie") {
            out.push(format!("{t}ying"));
        }
        if let Some(t) = s.strip_suffix('e') {
            out.push(format!("{t}ing"));
        }
        if let Some(last) = s.chars().last() {
            if !"aeiouwxy".contains(last) {
                out.push(format!("{s}{last}ing"));
            }
        }
    }
    out
}

fn levenshtein_at_most_one(a: &str, b: &str) -> bool {
    let (a, b): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
    if a.len().abs_diff(b.len()) > 1 {
        return false;
    }
    let (mut i, mut j, mut edits) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        if a[i] == b[j] {
            i += 1;
            j += 1;
            continue;
        }
        edits += 1;
        if edits > 1 {
            return false;
        }
        match a.len().cmp(&b.len()) {
            std::cmp::Ordering::Greater => i += 1,
            std::cmp::Ordering::Less => j += 1,
            std::cmp::Ordering::Equal => {
                i += 1;
                j += 1;
            }
        }
    }
    edits + (a.len() - i) + (b.len() - j) <= 1
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Comma,
    Stop,
}

fn tokenize(caption: &str) -> Vec<Tok> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let flush = |cur: &mut String, out: &mut Vec<Tok>| {
        if !cur.is_empty() {
            let w = cur.trim_matches(|c| c == '\'' || c == '-');
            let w = w.strip_suffix("'s").unwrap_or(w).trim_end_matches('\'');
            if !w.is_empty() {
                out.push(Tok::Word(w.to_string()));
            }
            cur.clear();
        }
    };
    for ch in caption.chars() {
        if ch.is_alphanumeric() || ch == '\'' || ch == '-' {
            cur.extend(ch.to_lowercase());
        } else {
            flush(&mut cur, &mut out);
            match ch {
                ',' => out.push(Tok::Comma),
                '.' | ';' | '!' | '?' | ':' => out.push(Tok::Stop),
                _ => {}
            }
        }
    }
    flush(&mut cur, &mut out);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PredKind {
    Preposition,
    Participle,
    Finite,
}

#[derive(Debug, Clone, PartialEq)]
enum Item {
    Np(String),
    Pred { phrase: String, kind: PredKind },
    Copula,
    Conj,
    Comma,
    Rel,
    Break,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Attach {
    ClauseSubject,
    Nearest,
}

/// Caption parser bound to one lexicon. Build once, parse many captions.
#[derive(Debug, Clone)]
pub struct CaptionParser {
    objects: HashSet<String>,
    max_object_words: usize,
    relations: HashSet<String>,
    /// Relation phrases keyed by word count, for longest-first matching.
    relations_by_len: Vec<Vec<Vec<String>>>,
    prepositions: Vec<Vec<String>>,
    relation_list: Vec<Vec<String>>,
}

impl CaptionParser {
    pub fn new(lexicon: &ConceptSpace) -> Self {
        let objects: HashSet<String> = lexicon.objects().iter().map(|c| c.name.clone()).collect();
        let max_object_words = objects.iter().map(|o| o.split(' ').count()).max().unwrap_or(1);
        // "and" is a VG predicate but the parser needs it as a conjunction.
        let relations: HashSet<String> =
            lexicon.relations().iter().map(|c| c.name.clone()).filter(|r| r != "and").collect();
        let mut relation_list: Vec<Vec<String>> =
            relations.iter().map(|r| r.split(' ').map(String::from).collect()).collect();
        relation_list.sort();
        let max_len = relation_list.iter().map(Vec::len).max().unwrap_or(0);
        let mut relations_by_len = vec![Vec::new(); max_len + 1];
        for r in &relation_list {
            relations_by_len[r.len()].push(r.clone());
        }
        let mut prepositions: Vec<Vec<String>> = EXTRA_PREPOSITIONS
            .iter()
            .map(|p| p.to_string())
            .chain(relation_list.iter().filter(|r| PREPOSITION_WORDS.contains(&r[0].as_str())).map(|r| r.join(" ")))
            .collect::<HashSet<_>>()
            .into_iter()
            .map(|p| p.split(' ').map(String::from).collect())
            .collect();
        prepositions.sort_by(|a: &Vec<String>, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        CaptionParser {
            objects,
            max_object_words,
            relations,
            relations_by_len,
            prepositions,
            relation_list,
        }
    }

    /// Extracts triplets from one caption. Never fails; unparseable input
    /// yields an empty list. Duplicates within a caption are removed,
    /// keeping first occurrences.
    pub fn parse(&self, caption: &str) -> Vec<UngroundedTriplet> {
        let items = self.chunk(&tokenize(caption));
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        for (s, p, o) in build_triplets(&items) {
            if seen.insert((s.clone(), p.clone(), o.clone())) {
                out.push(UngroundedTriplet {
                    subject_phrase: s,
                    predicate_phrase: p,
                    object_phrase: o,
                    source: Source::Parser,
                });
            }
        }
        out
    }

    fn is_object(&self, w: &str) -> bool {
        self.objects.contains(w)
    }

    fn lexicon_object(&self, words: &[String]) -> Option<String> {
        let joined = words.join(" ");
        if self.objects.contains(&joined) {
            return Some(joined);
        }
        let (last, head) = words.split_last()?;
        for s in singulars(last) {
            let mut cand = head.to_vec();
            cand.push(s);
            let joined = cand.join(" ");
            if self.objects.contains(&joined) {
                return Some(joined);
            }
        }
        None
    }

    /// Rightmost, then longest, lexicon object inside the phrase; else the
    /// raw singularized head noun.
    fn resolve_np(&self, words: &[String]) -> String {
        for end in (1..=words.len()).rev() {
            let lo = end.saturating_sub(self.max_object_words);
            for start in lo..end {
                if let Some(name) = self.lexicon_object(&words[start..end]) {
                    return name;
                }
            }
        }
        raw_singular(words.last().map(String::as_str).unwrap_or_default())
    }

    fn matches_at(words: &[&str], i: usize, phrase: &[String]) -> bool {
        i + phrase.len() <= words.len() && phrase.iter().zip(&words[i..]).all(|(p, w)| p == w)
    }

    /// Lexicon relation starting at `i`, literal or with an inflected first
    /// word. Returns (tokens consumed, phrase words, inflected).
    fn match_relation(&self, words: &[&str], i: usize) -> Option<(usize, Vec<String>, bool)> {
        for len in (1..self.relations_by_len.len()).rev() {
            for r in &self.relations_by_len[len] {
                if Self::matches_at(words, i, r) {
                    return Some((len, r.clone(), false));
                }
            }
        }
        let first = words[i];
        if !first.ends_with('s') && first != "have" {
            return None;
        }
        let forms = ing_forms(first);
        for len in (1..self.relations_by_len.len()).rev() {
            for r in &self.relations_by_len[len] {
                if forms.contains(&r[0]) && Self::matches_at(words, i + 1, &r[1..]) && len >= 1 {
                    return Some((len, r.clone(), true));
                }
            }
        }
        None
    }

    fn match_preposition(&self, words: &[&str], i: usize) -> Option<(usize, Vec<String>)> {
        self.prepositions
            .iter()
            .find(|p| Self::matches_at(words, i, p))
            .map(|p| (p.len(), p.clone()))
    }

    fn is_participle(&self, w: &str) -> bool {
        w.len() > 4 && w.ends_with("ing") && !self.is_object(w)
    }

    fn is_finite_verb(&self, w: &str) -> bool {
        FINITE_VERBS.contains(&w)
    }

    fn chunk(&self, toks: &[Tok]) -> Vec<Item> {
        let mut items = Vec::new();
        let mut np: Vec<String> = Vec::new();
        let flush = |np: &mut Vec<String>, items: &mut Vec<Item>| {
            if !np.is_empty() {
                items.push(Item::Np(self.resolve_np(np)));
                np.clear();
            }
        };
        // Split into runs of words so predicate matching never crosses
        // punctuation.
        let mut t = 0;
        while t < toks.len() {
            match &toks[t] {
                Tok::Stop => {
                    flush(&mut np, &mut items);
                    items.push(Item::Break);
                    t += 1;
                    continue;
                }
                Tok::Comma => {
                    flush(&mut np, &mut items);
                    items.push(Item::Comma);
                    t += 1;
                    continue;
                }
                Tok::Word(_) => {}
            }
            let run_end = toks[t..].iter().position(|x| !matches!(x, Tok::Word(_))).map_or(toks.len(), |p| t + p);
            let words: Vec<&str> = toks[t..run_end]
                .iter()
                .map(|x| match x {
                    Tok::Word(w) => w.as_str(),
                    _ => unreachable!(),
                })
                .collect();
            let mut i = 0;
            while i < words.len() {
                let w = words[i];
                if w == "and" || w == "or" || w == "&" {
                    flush(&mut np, &mut items);
                    items.push(Item::Conj);
                    i += 1;
                    continue;
                }
                if COPULAS.contains(&w) {
                    flush(&mut np, &mut items);
                    items.push(Item::Copula);
                    i += 1;
                    continue;
                }
                if RELATIVE.contains(&w) && (!np.is_empty() || matches!(items.last(), Some(Item::Np(_)))) {
                    flush(&mut np, &mut items);
                    items.push(Item::Rel);
                    i += 1;
                    continue;
                }
                if i + 1 < words.len() && QUANTIFIERS.contains(&w) && words[i + 1] == "of" {
                    flush(&mut np, &mut items);
                    i += 2;
                    continue;
                }
                if DETERMINERS.contains(&w) {
                    flush(&mut np, &mut items);
                    i += 1;
                    continue;
                }
                let prep_len = self.match_preposition(&words, i).map_or(0, |(l, _)| l);
                if let Some((len, phrase, inflected)) = self.match_relation(&words, i).filter(|(l, _, _)| *l >= prep_len) {
                    // A lexicon object spelled like a verb ("stands") is a
                    // noun when it directly follows a determiner-led phrase.
                    let noun_reading = !inflected || !np.is_empty() && self.lexicon_object(&[w.to_string()]).is_some();
                    if !(inflected && noun_reading) {
                        flush(&mut np, &mut items);
                        let kind = if inflected {
                            PredKind::Finite
                        } else if self.is_participle(&phrase[0]) || phrase[0].ends_with("ed") {
                            PredKind::Participle
                        } else if PREPOSITION_WORDS.contains(&phrase[0].as_str()) {
                            PredKind::Preposition
                        } else {
                            PredKind::Finite
                        };
                        let mut raw: Vec<String> = words[i..i + len].iter().map(|s| s.to_string()).collect();
                        i += len;
                        if kind != PredKind::Preposition {
                            if let Some((plen, p)) = self.match_preposition(&words, i) {
                                raw.extend(p);
                                i += plen;
                            }
                        }
                        let phrase = self.normalize_predicate(&raw);
                        items.push(Item::Pred { phrase, kind });
                        continue;
                    }
                }
                if let Some((len, p)) = self.match_preposition(&words, i) {
                    flush(&mut np, &mut items);
                    i += len;
                    let phrase = self.normalize_predicate(&p);
                    items.push(Item::Pred {
                        phrase,
                        kind: PredKind::Preposition,
                    });
                    continue;
                }
                let finite = self.is_finite_verb(w) && (np.is_empty() || !self.is_object(&raw_singular(w)));
                // A past participle only counts when a preposition follows:
                // "parked in front of", "perched on".
                let past = w.len() > 4
                    && w.ends_with("ed")
                    && !self.is_object(w)
                    && self.match_preposition(&words, i + 1).is_some();
                if self.is_participle(w) || finite || past {
                    flush(&mut np, &mut items);
                        let kind = if finite { PredKind::Finite } else { PredKind::Participle };
                    let mut raw = vec![w.to_string()];
                    i += 1;
                    if let Some((plen, p)) = self.match_preposition(&words, i) {
                        raw.extend(p);
                        i += plen;
                    }
                    let phrase = self.normalize_predicate(&raw);
                    items.push(Item::Pred { phrase, kind });
                    continue;
                }
                if IGNORED.contains(&w) {
                    flush(&mut np, &mut items);
                    i += 1;
                    continue;
                }
                np.push(w.to_string());
                i += 1;
            }
            flush(&mut np, &mut items);
            t = run_end;
        }
        items
    }

    /// Lexicon form of a predicate if one is within reach, else the raw
    /// phrase.
    pub fn normalize_predicate(&self, words: &[String]) -> String {
        let joined = words.join(" ");
        if self.relations.contains(&joined) {
            return joined;
        }
        if let Some((first, rest)) = words.split_first() {
            for f in ing_forms(first) {
                let mut cand = vec![f];
                cand.extend(rest.iter().cloned());
                let c = cand.join(" ");
                if self.relations.contains(&c) {
                    return c;
                }
            }
        }
        // One character edit in one long word, every other word identical.
        for r in &self.relation_list {
            if r.len() != words.len() {
                continue;
            }
            let diffs: Vec<usize> = (0..r.len()).filter(|&k| r[k] != words[k]).collect();
            if let [k] = diffs[..] {
                // Typos rarely hit the first letter; "talking" is not
                // "walking".
                if r[k].len() >= 5
                    && words[k].len() >= 4
                    && r[k].chars().next() == words[k].chars().next()
                    && levenshtein_at_most_one(&r[k], &words[k])
                {
                    return r.join(" ");
                }
            }
        }
        joined
    }
}

fn build_triplets(items: &[Item]) -> Vec<(String, String, String)> {
    let mut out = Vec::new();
    let mut clause_subj: Vec<String> = Vec::new();
    let mut last: Vec<String> = Vec::new();
    let mut pending: Option<(String, Attach, PredKind)> = None;
    let mut copula = false;
    let mut relative = false;
    // A bare noun phrase after a comma may open a new clause.
    let mut after_comma = false;

    let mut i = 0;
    while i < items.len() {
        match &items[i] {
            Item::Break => {
                clause_subj.clear();
                last.clear();
                pending = None;
                copula = false;
                relative = false;
                after_comma = false;
                i += 1;
            }
            Item::Copula => {
                copula = true;
                i += 1;
            }
            Item::Rel => {
                relative = true;
                i += 1;
            }
            Item::Comma => {
                after_comma = true;
                i += 1;
            }
            Item::Conj => i += 1,
            Item::Pred { phrase, kind } => {
                if relative && !last.is_empty() {
                    clause_subj = last.clone();
                }
                let nearest = *kind == PredKind::Preposition && (phrase == "of" || phrase == "with");
                let attach = if nearest { Attach::Nearest } else { Attach::ClauseSubject };
                // Two predicates in a row: the second one wins.
                pending = Some((phrase.clone(), attach, *kind));
                copula = false;
                relative = false;
                i += 1;
            }
            Item::Np(_) => {
                // Collect a conjunction group.
                let mut group = Vec::new();
                let mut j = i;
                while let Some(Item::Np(n)) = items.get(j) {
                    if !group.contains(n) {
                        group.push(n.clone());
                    }
                    j += 1;
                    match (items.get(j), items.get(j + 1)) {
                        (Some(Item::Conj | Item::Comma), Some(Item::Np(_))) => j += 1,
                        (Some(Item::Comma), Some(Item::Conj)) if matches!(items.get(j + 2), Some(Item::Np(_))) => j += 2,
                        _ => break,
                    }
                }
                let next_is_verb = matches!(
                    items.get(j),
                    Some(Item::Copula) | Some(Item::Pred { kind: PredKind::Participle | PredKind::Finite, .. })
                );
                match pending.take() {
                    Some((phrase, attach, _)) => {
                        let subjects = match attach {
                            Attach::ClauseSubject if !clause_subj.is_empty() => clause_subj.clone(),
                            _ => last.clone(),
                        };
                        let (objects, new_subject) = if next_is_verb && group.len() > 1 {
                            let (l, rest) = group.split_last().unwrap();
                            (rest.to_vec(), Some(vec![l.clone()]))
                        } else {
                            (group.clone(), None)
                        };
                        for s in &subjects {
                            for o in &objects {
                                out.push((s.clone(), phrase.clone(), o.clone()));
                            }
                        }
                        match new_subject {
                            Some(ns) => {
                                clause_subj = ns.clone();
                                last = ns;
                            }
                            None => {
                                // A preposition after a group attaches to
                                // its last member only.
                                last = vec![objects.last().cloned().unwrap_or_default()];
                                if clause_subj.is_empty() {
                                    clause_subj = subjects.clone();
                                }
                            }
                        }
                    }
                    None => {
                        if clause_subj.is_empty() || after_comma || copula {
                            // "a man is a skier" has nothing to extract;
                            // a bare phrase opens a clause.
                            if !copula {
                                clause_subj = group.clone();
                            }
                        }
                        last = group;
                    }
                }
                copula = false;
                after_comma = false;
                i = j;
            }
        }
    }
    out.retain(|(s, p, o)| !s.is_empty() && !p.is_empty() && !o.is_empty());
    out
}

/// Parses one caption against a lexicon. Prefer [`CaptionParser`] for many
/// captions.
pub fn parse_caption(caption: &str, lexicon: &ConceptSpace) -> Vec<UngroundedTriplet> {
    CaptionParser::new(lexicon).parse(caption)
}

/// Parses a corpus in parallel; output order follows input order.
pub fn parse_corpus(records: &[CaptionRecord], parser: &CaptionParser) -> Vec<(String, Vec<UngroundedTriplet>)> {
    records
        .par_iter()
        .map(|r| (r.image_id.clone(), parser.parse(&r.caption)))
        .collect()
}

#[derive(Deserialize)]
struct NamesOnly {
    objects: Vec<String>,
    relations: Vec<String>,
}

/// Loads a lexicon: either a full concept space file or a names-only file
/// `{"objects": [...], "relations": [...]}`, which gets placeholder
/// embeddings.
pub fn load_lexicon(path: impl AsRef<Path>) -> Result<ConceptSpace> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if let Ok(n) = serde_json::from_str::<NamesOnly>(&text) {
        let o: Vec<&str> = n.objects.iter().map(String::as_str).collect();
        let r: Vec<&str> = n.relations.iter().map(String::as_str).collect();
        return ConceptSpace::synthetic(&o, &r, 8, 0);
    }
    Ok(serde_json::from_str(&text)?)
}

// ---------------------------------------------------------------------------
// Synthesized graphs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub pipeline: Source,
    pub model: String,
}

/// A node of a synthesized graph; text-only pipelines produce no boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthNode {
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
    pub category: String,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub score: f64,
}

fn one() -> f64 {
    1.0
}

fn is_one(v: &f64) -> bool {
    *v == 1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesizedGraphRecord {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    pub nodes: Vec<SynthNode>,
    pub edges: Vec<Edge>,
    pub provenance: Provenance,
}

impl SynthesizedGraphRecord {
    /// Boxes from a multimodal model are kept but should not be trusted for
    /// localization.
    pub fn low_trust_boxes(&self) -> bool {
        self.provenance.pipeline == Source::Mllm && self.nodes.iter().any(|n| n.bbox.is_some())
    }

    /// The record's edges as phrase triplets, tagged with its pipeline.
    pub fn triplets(&self) -> Vec<UngroundedTriplet> {
        self.edges
            .iter()
            .map(|e| UngroundedTriplet {
                subject_phrase: self.nodes[e.subject].category.clone(),
                predicate_phrase: e.predicate.clone(),
                object_phrase: self.nodes[e.object].category.clone(),
                source: self.provenance.pipeline,
            })
            .collect()
    }

    fn check(&mut self) -> std::result::Result<(), String> {
        if self.image_id.is_empty() {
            return Err("empty image_id".into());
        }
        for (i, n) in self.nodes.iter_mut().enumerate() {
            n.category = normalize_name(&n.category);
            if n.category.is_empty() {
                return Err(format!("nodes[{i}]: empty category"));
            }
            if let Some(b) = n.bbox {
                if !b.is_valid() {
                    return Err(format!("nodes[{i}]: invalid box {b}"));
                }
            }
        }
        for (k, e) in self.edges.iter().enumerate() {
            let n = self.nodes.len();
            if e.subject >= n || e.object >= n {
                return Err(format!("edges[{k}]: node index out of range ({} nodes)", n));
            }
            if e.subject == e.object {
                return Err(format!("edges[{k}]: self-loop"));
            }
            if e.predicate.is_empty() {
                return Err(format!("edges[{k}]: empty predicate"));
            }
        }
        self.provenance.model = self.provenance.model.trim().to_string();
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordError {
    pub index: usize,
    pub image_id: Option<String>,
    pub reason: String,
}

/// Valid records plus one error per rejected record.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IngestReport {
    pub records: Vec<SynthesizedGraphRecord>,
    pub errors: Vec<RecordError>,
}

#[derive(Deserialize)]
struct SynthFileWire {
    images: Vec<serde_json::Value>,
}

#[derive(Serialize)]
struct SynthFileOut<'a> {
    images: &'a [SynthesizedGraphRecord],
}

/// Reads a synthesized-graph file `{"images": [record, ...]}`. A malformed
/// top level is an error; a malformed record is reported and skipped.
pub fn ingest_synthesized_reader<R: Read>(reader: R) -> Result<IngestReport> {
    let wire: SynthFileWire =
        serde_json::from_reader(reader).map_err(|e| Error::schema(format!("synthesized graph file: {e}")))?;
    let mut report = IngestReport::default();
    for (index, value) in wire.images.into_iter().enumerate() {
        let image_id = value.get("image_id").and_then(|v| v.as_str()).map(String::from);
        let parsed = serde_json::from_value::<SynthesizedGraphRecord>(value).map_err(|e| e.to_string());
        match parsed.and_then(|mut r| r.check().map(|_| r)) {
            Ok(r) => report.records.push(r),
            Err(reason) => report.errors.push(RecordError { index, image_id, reason }),
        }
    }
    Ok(report)
}

pub fn ingest_synthesized(path: impl AsRef<Path>) -> Result<IngestReport> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_synthesized_reader(BufReader::new(file))
}

pub fn serialize_synthesized(records: &[SynthesizedGraphRecord]) -> String {
    serde_json::to_string_pretty(&SynthFileOut { images: records }).expect("records serialize")
}

/// Reads a JSON-lines caption corpus. Extra fields on a line are ignored.
pub fn read_captions<R: BufRead>(reader: R) -> Result<Vec<CaptionRecord>> {
    crate::types::read_json_lines(reader)
}

// ---------------------------------------------------------------------------
// Grounding

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Grounding {
    pub edges: Vec<Edge>,
    /// Triplets with a phrase no candidate could take.
    pub dropped: usize,
    /// Triplets that grounded to an edge already emitted.
    pub duplicates: usize,
}

fn head_noun(phrase: &str) -> &str {
    phrase.rsplit(' ').next().unwrap_or(phrase)
}

fn best_candidate(phrase: &str, candidates: &[Node], exclude: Option<usize>) -> Option<usize> {
    let head = head_noun(phrase);
    let mut best: Option<usize> = None;
    for (i, c) in candidates.iter().enumerate() {
        if Some(i) == exclude || !(c.category == phrase || c.category == head) {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(b) => {
                let cb = &candidates[b];
                // Higher score, then larger area; earlier index wins ties.
                let better = c.score > cb.score || (c.score == cb.score && c.bbox.area() > cb.bbox.area());
                Some(if better { i } else { b })
            }
        };
    }
    best
}

/// Ties each phrase to the best candidate whose category equals the phrase
/// or its head noun. The object never reuses the subject's node; a triplet
/// that cannot be placed is dropped.
pub fn ground_triplets(triplets: &[UngroundedTriplet], candidates: &[Node]) -> Grounding {
    let mut g = Grounding::default();
    let mut seen: HashMap<(usize, usize, String), ()> = HashMap::new();
    for t in triplets {
        let Some(s) = best_candidate(&t.subject_phrase, candidates, None) else {
            g.dropped += 1;
            continue;
        };
        let Some(o) = best_candidate(&t.object_phrase, candidates, Some(s)) else {
            g.dropped += 1;
            continue;
        };
        if seen.insert((s, o, t.predicate_phrase.clone()), ()).is_some() {
            g.duplicates += 1;
            continue;
        }
        g.edges.push(Edge::new(s, o, &t.predicate_phrase));
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lexicon() -> ConceptSpace {
        load_lexicon(concat!(env!("CARGO_MANIFEST_DIR"), "/data/vg150_lexicon.json")).unwrap()
    }

    fn keys(ts: &[UngroundedTriplet]) -> Vec<(String, String, String)> {
        ts.iter()
            .map(|t| (t.subject_phrase.clone(), t.predicate_phrase.clone(), t.object_phrase.clone()))
            .collect()
    }

    fn t(s: &str, p: &str, o: &str) -> (String, String, String) {
        (s.into(), p.into(), o.into())
    }

    #[test]
    fn copula_collapses_into_preposition() {
        let p = CaptionParser::new(&lexicon());
        assert_eq!(keys(&p.parse("a man is on a skateboard")), vec![t("man", "on", "skateboard")]);
    }

    #[test]
    fn participle_and_main_verb_share_subject() {
        let p = CaptionParser::new(&lexicon());
        assert_eq!(
            keys(&p.parse("a man wearing a shirt is riding a skateboard")),
            vec![t("man", "wearing", "shirt"), t("man", "riding", "skateboard")]
        );
    }

    #[test]
    fn empty_and_garbage_give_nothing() {
        let p = CaptionParser::new(&lexicon());
        assert!(p.parse("").is_empty());
        assert!(p.parse("!!! ,,, ...").is_empty());
        assert!(p.parse("on on on").is_empty());
    }

    #[test]
    fn subject_conjunction_distributes() {
        let p = CaptionParser::new(&lexicon());
        assert_eq!(
            keys(&p.parse("a man and a woman riding horses")),
            vec![t("man", "riding", "horse"), t("woman", "riding", "horse")]
        );
    }

    #[test]
    fn object_group_followed_by_verb_opens_a_clause() {
        let p = CaptionParser::new(&lexicon());
        assert_eq!(
            keys(&p.parse("a woman holding an umbrella and a man wearing a hat")),
            vec![t("woman", "holding", "umbrella"), t("man", "wearing", "hat")]
        );
    }

    #[test]
    fn finite_verbs_normalize_to_lexicon() {
        let p = CaptionParser::new(&lexicon());
        assert_eq!(keys(&p.parse("a boy rides a bike")), vec![t("boy", "riding", "bike")]);
        assert_eq!(keys(&p.parse("the cat sits on the table")), vec![t("cat", "sitting on", "table")]);
    }

    #[test]
    fn unknown_predicates_stay_raw_and_unknown_nouns_fall_back_to_head() {
        let p = CaptionParser::new(&lexicon());
        assert_eq!(
            keys(&p.parse("a man throwing a red frisbee")),
            vec![t("man", "throwing", "frisbee")]
        );
        assert_eq!(keys(&p.parse("a dog next to a fire hydrant")), vec![t("dog", "next to", "hydrant")]);
    }

    #[test]
    fn predicate_typos_within_one_edit_are_fixed() {
        let p = CaptionParser::new(&lexicon());
        let w = |s: &str| s.split(' ').map(String::from).collect::<Vec<_>>();
        assert_eq!(p.normalize_predicate(&w("wering")), "wearing");
        assert_eq!(p.normalize_predicate(&w("holdng")), "holding");
        // Short function words are not "corrected".
        assert_eq!(p.normalize_predicate(&w("standing in")), "standing in");
    }

    #[test]
    fn edit_distance_helper() {
        assert!(levenshtein_at_most_one("abc", "abc"));
        assert!(levenshtein_at_most_one("abc", "abd"));
        assert!(levenshtein_at_most_one("abc", "ab"));
        assert!(levenshtein_at_most_one("abc", "xabc"));
        assert!(!levenshtein_at_most_one("abc", "bca"));
        assert!(!levenshtein_at_most_one("abc", "a"));
    }

    fn node(cat: &str, score: f64, side: f64) -> Node {
        Node::new(BBox::new(0.0, 0.0, side, side).unwrap(), cat).with_score(score)
    }

    #[test]
    fn grounding_picks_highest_score_then_area_then_index() {
        let tr = [UngroundedTriplet::new("man", "on", "skateboard", Source::Parser)];
        let c = vec![node("man", 0.7, 10.0), node("man", 0.9, 5.0), node("skateboard", 0.5, 3.0)];
        let g = ground_triplets(&tr, &c);
        assert_eq!(g.edges, vec![Edge::new(1, 2, "on")]);
        let c = vec![node("man", 0.9, 5.0), node("man", 0.9, 6.0), node("skateboard", 0.5, 3.0)];
        assert_eq!(ground_triplets(&tr, &c).edges[0].subject, 1);
        let c = vec![node("man", 0.9, 5.0), node("man", 0.9, 5.0), node("skateboard", 0.5, 3.0)];
        assert_eq!(ground_triplets(&tr, &c).edges[0].subject, 0);
    }

    #[test]
    fn grounding_drops_unmatched_and_avoids_self_loops() {
        let c = vec![node("man", 0.9, 5.0), node("skateboard", 0.5, 3.0)];
        let tr = [
            UngroundedTriplet::new("zebra", "near", "man", Source::Parser),
            UngroundedTriplet::new("man", "near", "man", Source::Parser),
            UngroundedTriplet::new("young man", "on", "skateboard", Source::Llm),
        ];
        let g = ground_triplets(&tr, &c);
        assert_eq!(g.dropped, 2);
        assert_eq!(g.edges, vec![Edge::new(0, 1, "on")]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        const NOUNS: &[&str] = &["man", "dogs", "table", "red", "shirt", "frisbee", "people", "tennis"];
        const PREDS: &[&str] = &["on", "riding", "rides", "in front of", "next to", "with", "of", "holds", "parked"];
        const OTHER: &[&str] = &["a", "the", "is", "are", "that", "there", "two", ".", "very"];

        fn caption() -> impl Strategy<Value = Vec<(u8, usize)>> {
            prop::collection::vec((0u8..3, 0usize..16), 0..20)
        }

        fn render(parts: &[(u8, usize)]) -> (String, usize) {
            let mut words = Vec::new();
            let mut preds = 0;
            for &(class, k) in parts {
                match class {
                    0 => words.push(NOUNS[k % NOUNS.len()]),
                    1 => {
                        let p = PREDS[k % PREDS.len()];
                        preds += p.split(' ').count();
                        words.push(p);
                    }
                    _ => words.push(OTHER[k % OTHER.len()]),
                }
            }
            (words.join(" "), preds)
        }

        proptest! {
            #[test]
            fn parse_is_total_and_deterministic(s in "\\PC{0,60}") {
                let p = CaptionParser::new(&lexicon());
                let a = p.parse(&s);
                prop_assert_eq!(&a, &p.parse(&s));
                for t in &a {
                    prop_assert!(!t.subject_phrase.is_empty() && !t.predicate_phrase.is_empty() && !t.object_phrase.is_empty());
                }
            }

            #[test]
            fn without_conjunctions_triplets_are_bounded_by_predicate_words(parts in caption()) {
                let (text, preds) = render(&parts);
                let p = CaptionParser::new(&lexicon());
                prop_assert!(p.parse(&text).len() <= preds, "{} -> {:?}", text, p.parse(&text));
            }

            #[test]
            fn grounding_only_references_candidates(
                cats in prop::collection::vec(0usize..3, 0..6),
                scores in prop::collection::vec(0.0f64..1.0, 6),
                trip in prop::collection::vec((0usize..4, 0usize..4), 0..6),
            ) {
                let names = ["man", "dog", "kite", "zebra"];
                let cands: Vec<Node> = cats.iter().enumerate()
                    .map(|(i, &c)| node(names[c], scores[i], 1.0 + i as f64))
                    .collect();
                let ts: Vec<UngroundedTriplet> = trip.iter()
                    .map(|&(s, o)| UngroundedTriplet::new(names[s], "near", names[o], Source::Parser))
                    .collect();
                let g = ground_triplets(&ts, &cands);
                prop_assert_eq!(g.edges.len() + g.dropped + g.duplicates, ts.len());
                for e in &g.edges {
                    prop_assert!(e.subject < cands.len() && e.object < cands.len() && e.subject != e.object);
                }
            }
        }
    }

    const SYNTH: &str = r#"{"images": [
      {"image_id": "a", "nodes": [{"category": "Man"}, {"category": "kite"}],
       "edges": [{"sub": 0, "obj": 1, "predicate": "Flying High"}],
       "provenance": {"pipeline": "llm", "model": "some-llm"}},
      {"image_id": "b", "width": 100, "height": 80,
       "nodes": [{"box": [1, 2, 30, 40], "category": "dog"}, {"box": [5, 5, 20, 20], "category": "frisbee"}],
       "edges": [{"sub": 0, "obj": 1, "predicate": "catching"}],
       "provenance": {"pipeline": "mllm", "model": "some-mllm"}},
      {"image_id": "c", "nodes": [{"category": "man"}],
       "edges": [{"sub": 0, "obj": 3, "predicate": "on"}],
       "provenance": {"pipeline": "llm", "model": "x"}},
      {"image_id": "d", "nodes": []}
    ]}"#;

    #[test]
    fn ingestion_keeps_valid_records_and_reports_the_rest() {
        let rep = ingest_synthesized_reader(SYNTH.as_bytes()).unwrap();
        assert_eq!(rep.records.len(), 2);
        assert_eq!(rep.records[0].nodes[0].category, "man");
        assert!(rep.records[0].nodes.iter().all(|n| n.bbox.is_none()));
        assert_eq!(rep.records[0].edges[0].predicate, "flying high");
        assert!(!rep.records[0].low_trust_boxes());
        assert!(rep.records[1].low_trust_boxes());
        assert_eq!(rep.errors.len(), 2);
        assert_eq!(rep.errors[0].index, 2);
        assert!(rep.errors[0].reason.contains("out of range"), "{}", rep.errors[0].reason);
        assert_eq!(rep.errors[1].image_id.as_deref(), Some("d"));
    }

    #[test]
    fn ingestion_round_trips() {
        let rep = ingest_synthesized_reader(SYNTH.as_bytes()).unwrap();
        let again = ingest_synthesized_reader(serialize_synthesized(&rep.records).as_bytes()).unwrap();
        assert!(again.errors.is_empty());
        assert_eq!(again.records, rep.records);
    }

    #[test]
    fn malformed_top_level_is_a_schema_error() {
        assert!(matches!(ingest_synthesized_reader("[1,2]".as_bytes()), Err(Error::Schema(_))));
    }
}
