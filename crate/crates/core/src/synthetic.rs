//! Generated relation corpora for end-to-end checks at toy scale.
//!
//! Each relation has a few question phrasings, several lexically distinct
//! context sentences and a pool of single-token answers. A passage holds one
//! sentence expressing the asked relation plus distractor sentences about
//! other subjects and relations.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{AnswerSpan, Case, Dataset, Passage, Question};
use crate::error::Result;
use crate::textproc::{Gazetteer, RuleRecognizer};

pub struct Relation {
    pub name: &'static str,
    /// Templates with a `{s}` slot for the subject.
    pub questions: &'static [&'static str],
    /// Templates with `{s}` and `{a}` slots.
    pub contexts: &'static [&'static str],
    pub answers: &'static [&'static str],
}

const CITIES: &[&str] = &[
    "Lisbon", "Porto", "Oslo", "Bergen", "Vienna", "Graz", "Krakow", "Gdansk", "Lyon", "Nantes",
    "Seville", "Bilbao", "Turin", "Naples", "Dresden", "Bremen", "Ghent", "Utrecht", "Aarhus",
    "Tampere", "Riga", "Vilnius", "Tallinn", "Zagreb", "Split", "Sofia", "Varna", "Brno", "Kosice",
    "Cork", "Galway", "Leeds", "Bristol", "Quebec", "Halifax", "Denver", "Austin", "Tucson",
    "Adelaide", "Perth",
];
const YEARS: &[&str] = &[
    "1803", "1811", "1818", "1824", "1829", "1833", "1837", "1842", "1846", "1851", "1855", "1859",
    "1864", "1868", "1871", "1876", "1879", "1883", "1887", "1892", "1896", "1901", "1905", "1909",
    "1913", "1917", "1922", "1926", "1931", "1934", "1938", "1943", "1947", "1952", "1956", "1961",
    "1965", "1969", "1974", "1978",
];
const SURNAMES: &[&str] = &[
    "Halvorsen",
    "Brandt",
    "Moreau",
    "Castell",
    "Lindqvist",
    "Okafor",
    "Petrakis",
    "Novak",
    "Ferreira",
    "Kowalczyk",
    "Lamberti",
    "Dubois",
    "Eriksen",
    "Hartmann",
    "Jansen",
    "Kovacs",
    "Marchetti",
    "Nakamura",
    "Oliveira",
    "Quist",
    "Rasmussen",
    "Sandoval",
    "Tanaka",
    "Ulrich",
    "Vasquez",
    "Whitfield",
    "Yilmaz",
    "Zielinski",
    "Abernathy",
    "Bergstrom",
    "Carvalho",
    "Delacroix",
    "Engstrom",
    "Fontaine",
    "Gallagher",
    "Holloway",
    "Ivanov",
    "Jorgensen",
    "Kaminski",
    "Lindgren",
];
const COUNTRIES: &[&str] = &[
    "Portugal", "Norway", "Austria", "Poland", "France", "Spain", "Italy", "Germany", "Belgium",
    "Denmark", "Finland", "Latvia", "Estonia", "Croatia", "Bulgaria", "Slovakia", "Ireland",
    "Canada", "Mexico", "Chile", "Peru", "Kenya", "Ghana", "Egypt", "Japan", "Vietnam", "Thailand",
    "Mongolia", "Iceland", "Greece",
];
const LANGUAGES: &[&str] = &[
    "Portuguese",
    "Norwegian",
    "German",
    "Polish",
    "French",
    "Spanish",
    "Italian",
    "Dutch",
    "Danish",
    "Finnish",
    "Latvian",
    "Estonian",
    "Croatian",
    "Bulgarian",
    "Slovak",
    "Irish",
    "Swahili",
    "Japanese",
    "Vietnamese",
    "Greek",
];

pub const RELATIONS: &[Relation] = &[
    Relation {
        name: "birthplace",
        questions: &["Where was {s} born ?", "In which city was {s} born ?"],
        contexts: &[
            "{s} was born in {a} .",
            "{a} is the hometown of {s} .",
            "{s} grew up in {a} , where the family had settled .",
            "The birthplace of {s} is {a} .",
            "{s} , a native of {a} , moved abroad later .",
            "Records list {a} as the city where {s} first saw daylight .",
        ],
        answers: CITIES,
    },
    Relation {
        name: "founded",
        questions: &["When was {s} founded ?", "In what year was {s} founded ?"],
        contexts: &[
            "{s} was founded in {a} .",
            "{s} opened its doors in {a} .",
            "In {a} , a group of merchants established {s} .",
            "{s} dates back to {a} .",
            "The charter of {s} was signed in {a} .",
            "{s} began operating during {a} .",
        ],
        answers: YEARS,
    },
    Relation {
        name: "inventor",
        questions: &["Who invented the {s} ?", "Who created the {s} ?"],
        contexts: &[
            "The {s} was invented by {a} .",
            "{a} designed the {s} .",
            "Engineer {a} built the first {s} .",
            "The {s} is credited to {a} .",
            "{a} patented the {s} after years of work .",
            "Credit for the {s} goes to {a} .",
        ],
        answers: SURNAMES,
    },
    Relation {
        name: "country",
        questions: &[
            "In which country is {s} located ?",
            "Which country is {s} in ?",
        ],
        contexts: &[
            "{s} is located in {a} .",
            "{s} lies in the north of {a} .",
            "Visitors reach {s} by crossing {a} .",
            "{a} is home to {s} .",
            "{s} sits inside the borders of {a} .",
            "The region of {a} contains {s} .",
        ],
        answers: COUNTRIES,
    },
    Relation {
        name: "language",
        questions: &[
            "What language does {s} speak ?",
            "What language is spoken by {s} ?",
        ],
        contexts: &[
            "{s} speaks {a} fluently .",
            "The native tongue of {s} is {a} .",
            "{s} writes poems in {a} .",
            "{a} is the language {s} uses at home .",
            "{s} learned {a} as a child .",
            "Most letters by {s} were written in {a} .",
        ],
        answers: LANGUAGES,
    },
];

/// Relation held out of training entirely. Its answers are cities, a type
/// training has seen, but its question phrasing sits closest to a relation
/// with a different answer type, and its context sentences are new.
pub const NOVEL_RELATION: Relation = Relation {
    name: "venue",
    questions: &["What venue does {s} use ?", "What venue is chosen by {s} ?"],
    contexts: &[
        "{s} was held in {a} last summer .",
        "Crowds gathered in {a} to attend {s} .",
        "{a} hosted {s} for three days .",
        "The organisers brought {s} to {a} .",
    ],
    answers: CITIES,
};

const SYLLABLES: &[&str] = &[
    "bar", "vel", "kor", "mit", "das", "lun", "tro", "pes", "qua", "rin", "sol", "fen", "gar",
    "hol", "jun", "lek", "mor", "nal", "pir", "ros", "tav", "ulm", "vor", "zan", "bri", "cal",
    "dor", "eth", "fil", "gor",
];

#[derive(Debug, Clone)]
pub struct ToyCorpusConfig {
    pub seed: u64,
    pub train_per_relation: usize,
    pub heldout_per_relation: usize,
    /// Sentences about other subjects added to every passage.
    pub distractors: usize,
    /// Size of each of the two word pools subject names are drawn from.
    pub name_pool: usize,
    pub novel_support: usize,
    pub novel_test: usize,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        ToyCorpusConfig {
            seed: 13,
            train_per_relation: 100,
            heldout_per_relation: 20,
            distractors: 2,
            name_pool: 60,
            novel_support: 32,
            novel_test: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub train: Dataset,
    pub heldout: Dataset,
    /// Cases of [`NOVEL_RELATION`] for casebase augmentation.
    pub novel_support: Dataset,
    pub novel_test: Dataset,
    /// Every generated subject name.
    pub subjects: Vec<String>,
}

impl ToyCorpus {
    /// Rule recognizer whose gazetteer lists every subject.
    pub fn recognizer(&self) -> RuleRecognizer {
        RuleRecognizer::new(Gazetteer::new(&self.subjects))
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(2..=3);
    let w: String = (0..n).map(|_| *SYLLABLES.choose(rng).unwrap()).collect();
    capitalize(&w)
}

/// `n` distinct pseudo-words not in `taken`.
fn word_pool(rng: &mut ChaCha8Rng, n: usize, taken: &mut HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = pseudo_word(rng);
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

struct Generator {
    rng: ChaCha8Rng,
    first: Vec<String>,
    second: Vec<String>,
    used: HashSet<String>,
    subjects: Vec<String>,
}

impl Generator {
    fn new(seed: u64, pool_size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut taken = HashSet::new();
        let first = word_pool(&mut rng, pool_size, &mut taken);
        let second = word_pool(&mut rng, pool_size, &mut taken);
        Generator {
            rng,
            first,
            second,
            used: HashSet::new(),
            subjects: Vec::new(),
        }
    }

    /// A two-word subject name not used before; both words come from
    /// shared pools, so every word recurs across many cases.
    fn subject(&mut self) -> String {
        loop {
            let s = format!(
                "{} {}",
                self.first.choose(&mut self.rng).unwrap(),
                self.second.choose(&mut self.rng).unwrap()
            );
            if self.used.insert(s.clone()) {
                self.subjects.push(s.clone());
                return s;
            }
        }
    }

    /// A filled context sentence and the byte offset of the answer in it.
    fn sentence(&mut self, rel: &Relation, subject: &str, answer: &str) -> (String, usize) {
        let t = rel.contexts.choose(&mut self.rng).unwrap();
        let before = t.split("{a}").next().unwrap();
        let offset = before.replace("{s}", subject).len();
        (t.replace("{s}", subject).replace("{a}", answer), offset)
    }

    fn answer(&mut self, rel: &Relation, taken: &mut HashSet<&'static str>) -> &'static str {
        loop {
            let a = *rel.answers.choose(&mut self.rng).unwrap();
            if taken.insert(a) {
                return a;
            }
        }
    }

    /// One case of `rel`. The passage also holds a sentence of every
    /// relation in `forced` and `distractors` sentences drawn from `pool`,
    /// each about a fresh subject with a distinct answer.
    fn case(
        &mut self,
        id: String,
        rel: &Relation,
        forced: &[&Relation],
        pool: &[&Relation],
        distractors: usize,
    ) -> Result<Case> {
        let mut taken = HashSet::new();
        let subject = self.subject();
        let answer = self.answer(rel, &mut taken);
        let (target, slot) = self.sentence(rel, &subject, answer);
        let mut sentences = vec![(Some(slot), target)];
        let picks: Vec<&Relation> = pool
            .choose_multiple(&mut self.rng, distractors)
            .copied()
            .collect();
        for other in forced.iter().chain(&picks) {
            let s = self.subject();
            let a = self.answer(other, &mut taken);
            sentences.push((None, self.sentence(other, &s, a).0));
        }
        sentences.shuffle(&mut self.rng);
        let mut text = String::new();
        let mut answer_start = 0;
        for (slot, s) in &sentences {
            if !text.is_empty() {
                text.push(' ');
            }
            if let Some(off) = slot {
                answer_start = text.len() + off;
            }
            text.push_str(s);
        }
        let passage = Passage::from_text(text);
        let span = AnswerSpan::from_chars(&passage, answer_start, answer_start + answer.len())?;
        let q = rel
            .questions
            .choose(&mut self.rng)
            .unwrap()
            .replace("{s}", &subject);
        Case::new(Question::new(id, q), vec![span], passage)
    }
}

pub fn toy_relation_corpus(cfg: &ToyCorpusConfig) -> Result<ToyCorpus> {
    let mut g = Generator::new(cfg.seed, cfg.name_pool);
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    for rel in RELATIONS {
        let pool: Vec<&Relation> = RELATIONS.iter().filter(|o| o.name != rel.name).collect();
        for i in 0..cfg.train_per_relation {
            train.push(g.case(
                format!("train-{}-{i}", rel.name),
                rel,
                &[],
                &pool,
                cfg.distractors,
            )?);
        }
        for i in 0..cfg.heldout_per_relation {
            heldout.push(g.case(
                format!("heldout-{}-{i}", rel.name),
                rel,
                &[],
                &pool,
                cfg.distractors,
            )?);
        }
    }
    // no other city in novel passages
    let pool: Vec<&Relation> = RELATIONS
        .iter()
        .filter(|r| r.answers != NOVEL_RELATION.answers)
        .collect();
    let mut support = Vec::new();
    let mut novel = Vec::new();
    for i in 0..cfg.novel_support {
        let id = format!("support-{}-{i}", NOVEL_RELATION.name);
        support.push(g.case(id, &NOVEL_RELATION, &[], &pool, cfg.distractors)?);
    }
    for i in 0..cfg.novel_test {
        let id = format!("novel-{}-{i}", NOVEL_RELATION.name);
        novel.push(g.case(id, &NOVEL_RELATION, &[], &pool, cfg.distractors)?);
    }
    train.shuffle(&mut g.rng);
    Ok(ToyCorpus {
        train: Dataset::new("toy-train", train)?,
        heldout: Dataset::new("toy-heldout", heldout)?,
        novel_support: Dataset::new("toy-novel-support", support)?,
        novel_test: Dataset::new("toy-novel-test", novel)?,
        subjects: g.subjects,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_shape_and_answers() {
        let c = toy_relation_corpus(&ToyCorpusConfig::default()).unwrap();
        assert_eq!(c.train.len(), 500);
        assert_eq!(c.heldout.len(), 100);
        assert_eq!(c.novel_support.len(), 32);
        assert_eq!(c.novel_test.len(), 20);
        for case in c.train.cases.iter().chain(&c.heldout.cases) {
            assert_eq!(case.answers.len(), 1);
            assert_eq!(case.answers[0].token_len(), 1);
        }
        let again = toy_relation_corpus(&ToyCorpusConfig::default()).unwrap();
        assert_eq!(again.train, c.train);
    }
}
