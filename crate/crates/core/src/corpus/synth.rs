//! Synthetic corpus whose role labels follow from the dependency tree.
//!
//! Sentences are `SUBJ [ADV] VERB [OBJ] PP* .` with an optional relative
//! clause on the subject. Prepositional phrases after an object attach
//! either to the verb (becoming their own argument) or to the object noun
//! (becoming part of the object span). The attachment is drawn per phrase,
//! biased by a hidden property of the object noun, so only the tree tells
//! the two readings apart with certainty.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{spans_to_bio, AnnotatedSentence, CorpusError, Result, RoleSpan};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    InDomain,
    Shifted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PrepClass {
    Locative,
    Temporal,
    Instrument,
}

impl PrepClass {
    pub fn role(self) -> &'static str {
        match self {
            PrepClass::Locative => "AM-LOC",
            PrepClass::Temporal => "AM-TMP",
            PrepClass::Instrument => "A2",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WordClass {
    Determiner,
    Adjective,
    Noun { attaches: bool },
    Verb,
    Adverb,
    Preposition(PrepClass),
    Relativizer,
    Punctuation,
}

impl WordClass {
    pub fn pos(self) -> &'static str {
        match self {
            WordClass::Determiner => "DT",
            WordClass::Adjective => "JJ",
            WordClass::Noun { .. } => "NN",
            WordClass::Verb => "VBD",
            WordClass::Adverb => "RB",
            WordClass::Preposition(_) => "IN",
            WordClass::Relativizer => "WDT",
            WordClass::Punctuation => ".",
        }
    }
}

pub const DETERMINERS: [&str; 4] = ["the", "a", "every", "some"];
pub const PREPOSITIONS: [(&str, PrepClass); 8] = [
    ("in", PrepClass::Locative),
    ("at", PrepClass::Locative),
    ("on", PrepClass::Locative),
    ("near", PrepClass::Locative),
    ("during", PrepClass::Temporal),
    ("after", PrepClass::Temporal),
    ("before", PrepClass::Temporal),
    ("with", PrepClass::Instrument),
];

const NOUNS: usize = 120;
const VERBS: usize = 30;
const ADJECTIVES: usize = 30;
const ADVERBS: usize = 10;

/// Pronounceable two-syllable (or longer) word, unique per id.
fn pseudo_word(id: usize) -> String {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    let syllables = C.len() * V.len();
    let mut out = String::new();
    let mut rest = id;
    loop {
        let s = rest % syllables;
        out.push(C[s / V.len()] as char);
        out.push(V[s % V.len()] as char);
        rest /= syllables;
        if rest == 0 && out.len() >= 4 {
            break;
        }
    }
    out
}

fn noun_attaches(id: usize) -> bool {
    (id.wrapping_mul(2_654_435_761) >> 7) & 1 == 1
}

/// Open-class words of one domain; the shifted domain uses a disjoint range.
#[derive(Clone, Debug)]
pub struct Lexicon {
    pub nouns: Vec<(String, bool)>,
    pub verbs: Vec<String>,
    pub adjectives: Vec<String>,
    pub adverbs: Vec<String>,
}

impl Lexicon {
    pub fn new(domain: Domain) -> Self {
        let shift = usize::from(domain == Domain::Shifted);
        let block = |base: usize, size: usize| (base + shift * size)..(base + (shift + 1) * size);
        let noun_base = 0;
        let verb_base = 2 * NOUNS;
        let adj_base = verb_base + 2 * VERBS;
        let adv_base = adj_base + 2 * ADJECTIVES;
        Lexicon {
            nouns: block(noun_base, NOUNS)
                .map(|id| (pseudo_word(id), noun_attaches(id)))
                .collect(),
            verbs: block(verb_base, VERBS).map(pseudo_word).collect(),
            adjectives: block(adj_base, ADJECTIVES).map(pseudo_word).collect(),
            adverbs: block(adv_base, ADVERBS).map(pseudo_word).collect(),
        }
    }
}

/// Every word either domain can produce, with its class.
pub fn vocabulary() -> Vec<(String, WordClass)> {
    let mut out: Vec<(String, WordClass)> = Vec::new();
    for w in DETERMINERS {
        out.push((w.to_string(), WordClass::Determiner));
    }
    for (w, c) in PREPOSITIONS {
        out.push((w.to_string(), WordClass::Preposition(c)));
    }
    out.push(("that".into(), WordClass::Relativizer));
    out.push((".".into(), WordClass::Punctuation));
    for domain in [Domain::InDomain, Domain::Shifted] {
        let lex = Lexicon::new(domain);
        for (w, a) in lex.nouns {
            out.push((w, WordClass::Noun { attaches: a }));
        }
        out.extend(lex.verbs.into_iter().map(|w| (w, WordClass::Verb)));
        out.extend(lex.adjectives.into_iter().map(|w| (w, WordClass::Adjective)));
        out.extend(lex.adverbs.into_iter().map(|w| (w, WordClass::Adverb)));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub domain: Domain,
    pub max_adjectives: usize,
    pub max_pps: usize,
    /// Chance of each further prepositional phrase after the verb.
    pub pp_rate: f64,
    pub object_rate: f64,
    pub relative_rate: f64,
    pub adverb_rate: f64,
    /// Chance that a phrase after an attach-prone object noun attaches to it;
    /// other nouns use the complement.
    pub noun_attach_rate: f64,
}

impl SynthParams {
    pub fn in_domain() -> Self {
        SynthParams {
            domain: Domain::InDomain,
            max_adjectives: 2,
            max_pps: 2,
            pp_rate: 0.6,
            object_rate: 0.85,
            relative_rate: 0.3,
            adverb_rate: 0.25,
            noun_attach_rate: 0.9,
        }
    }

    /// Disjoint open-class vocabulary and longer sentences.
    pub fn shifted() -> Self {
        SynthParams {
            domain: Domain::Shifted,
            max_adjectives: 3,
            max_pps: 3,
            pp_rate: 0.75,
            relative_rate: 0.5,
            ..SynthParams::in_domain()
        }
    }
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams::in_domain()
    }
}

struct Np {
    start: usize,
    noun: usize,
}

#[derive(Default)]
struct Builder {
    words: Vec<String>,
    pos: Vec<&'static str>,
    heads: Vec<usize>,
    frames: BTreeMap<usize, Vec<RoleSpan>>,
}

impl Builder {
    fn push(&mut self, word: &str, pos: &'static str) -> usize {
        self.words.push(word.to_string());
        self.pos.push(pos);
        self.heads.push(usize::MAX);
        self.words.len() - 1
    }

    fn noun_phrase(&mut self, rng: &mut ChaCha8Rng, lex: &Lexicon, max_adj: usize) -> (Np, bool) {
        let start = self.push(DETERMINERS[rng.random_range(0..DETERMINERS.len())], "DT");
        let adjs = rng.random_range(0..=max_adj);
        for _ in 0..adjs {
            self.push(&lex.adjectives[rng.random_range(0..lex.adjectives.len())], "JJ");
        }
        let (noun, attaches) = &lex.nouns[rng.random_range(0..lex.nouns.len())];
        let n = self.push(noun, "NN");
        for t in start..n {
            self.heads[t] = n;
        }
        (Np { start, noun: n }, *attaches)
    }

    fn verb(&mut self, rng: &mut ChaCha8Rng, lex: &Lexicon) -> usize {
        let v = self.push(&lex.verbs[rng.random_range(0..lex.verbs.len())], "VBD");
        self.frames.insert(v, Vec::new());
        v
    }

    fn role(&mut self, predicate: usize, start: usize, end: usize, label: &str) {
        self.frames
            .get_mut(&predicate)
            .expect("frame opened with the verb")
            .push(RoleSpan::new(start, end, label));
    }

    fn last(&self) -> usize {
        self.words.len() - 1
    }
}

fn sentence(rng: &mut ChaCha8Rng, lex: &Lexicon, p: &SynthParams) -> Result<AnnotatedSentence> {
    let mut b = Builder::default();

    let (subj, _) = b.noun_phrase(rng, lex, p.max_adjectives);
    if rng.random_bool(p.relative_rate) {
        let that = b.push("that", "WDT");
        let rv = b.verb(rng, lex);
        b.heads[that] = rv;
        b.heads[rv] = subj.noun;
        b.role(rv, subj.start, subj.noun, "A0");
        b.role(rv, that, that, "R-A0");
        let (obj, _) = b.noun_phrase(rng, lex, p.max_adjectives.min(1));
        b.heads[obj.noun] = rv;
        b.role(rv, obj.start, b.last(), "A1");
    }
    let subj_end = b.last();

    let adverb = rng
        .random_bool(p.adverb_rate)
        .then(|| b.push(&lex.adverbs[rng.random_range(0..lex.adverbs.len())], "RB"));
    let verb = b.verb(rng, lex);
    b.heads[verb] = verb;
    b.heads[subj.noun] = verb;
    b.role(verb, subj.start, subj_end, "A0");
    if let Some(a) = adverb {
        b.heads[a] = verb;
        b.role(verb, a, a, "AM-MNR");
    }

    let object = if rng.random_bool(p.object_rate) {
        let (obj, attaches) = b.noun_phrase(rng, lex, p.max_adjectives);
        b.heads[obj.noun] = verb;
        Some((obj, attaches))
    } else {
        None
    };
    let mut object_end = object.as_ref().map(|(o, _)| o.noun);

    // once a phrase attaches to the verb, later ones must too (projectivity)
    let mut on_verb = object.is_none();
    for _ in 0..p.max_pps {
        if !rng.random_bool(p.pp_rate) {
            break;
        }
        let (word, class) = PREPOSITIONS[rng.random_range(0..PREPOSITIONS.len())];
        let prep = b.push(word, "IN");
        let (inner, _) = b.noun_phrase(rng, lex, p.max_adjectives.min(1));
        b.heads[inner.noun] = prep;
        if !on_verb {
            let (obj, attaches) = object.as_ref().expect("object present when not on verb");
            let rate = if *attaches {
                p.noun_attach_rate
            } else {
                1.0 - p.noun_attach_rate
            };
            if rng.random_bool(rate) {
                b.heads[prep] = obj.noun;
                object_end = Some(b.last());
                continue;
            }
            on_verb = true;
        }
        b.heads[prep] = verb;
        b.role(verb, prep, b.last(), class.role());
    }
    if let (Some((obj, _)), Some(end)) = (&object, object_end) {
        b.role(verb, obj.start, end, "A1");
    }
    let dot = b.push(".", ".");
    b.heads[dot] = verb;

    let n = b.words.len();
    let mut frames = BTreeMap::new();
    for (pred, mut spans) in b.frames {
        spans.sort();
        frames.insert(pred, spans_to_bio(&spans, n)?);
    }
    let s = AnnotatedSentence {
        predicates: (0..n).map(|t| frames.contains_key(&t)).collect(),
        tokens: b.words,
        pos: b.pos.iter().map(|s| s.to_string()).collect(),
        heads: b.heads,
        frames,
    };
    s.validate()?;
    Ok(s)
}

/// `n` sentences, deterministic under `seed`.
pub fn gen_synthetic(n: usize, seed: u64, params: &SynthParams) -> Result<Vec<AnnotatedSentence>> {
    if n == 0 {
        return Err(CorpusError::Invalid("sentence count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lex = Lexicon::new(params.domain);
    (0..n).map(|_| sentence(&mut rng, &lex, params)).collect()
}
