//! A synthetic AMR-to-text task with two made-up target languages.  Every
//! graph has exactly one rendering per language, and the two languages order
//! their words differently (verb-final versus verb-second, adjective before
//! versus after the noun), so a model must read the language token to pick
//! the right output.
//!
//! The languages borrow the `de` and `fr` codes only to have valid language
//! tokens; their words are invented.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::amr::AmrGraph;
use crate::lang::Language;

const NOUNS: [&str; 10] = ["boy", "girl", "cat", "dog", "teacher", "child", "bird", "man", "woman", "doctor"];
const VERBS: [&str; 6] = ["see-01", "like-01", "help-01", "call-01", "follow-01", "find-01"];
const ADJECTIVES: [&str; 5] = ["big", "small", "old", "young", "happy"];

struct Lexicon {
    nouns: [&'static str; 10],
    verbs: [&'static str; 6],
    adjectives: [&'static str; 5],
    want: &'static str,
    determiner: &'static str,
    pronoun: &'static str,
    complementizer: &'static str,
}

const FIRST: Lexicon = Lexicon {
    nouns: ["knabo", "maedi", "katzo", "hundo", "lehri", "kindo", "vogli", "manno", "frawi", "arzto"],
    verbs: ["siehat", "magat", "hilfat", "rufat", "folgat", "findat"],
    adjectives: ["grosi", "kleni", "alti", "jungi", "frohi"],
    want: "willat",
    determiner: "da",
    pronoun: "era",
    complementizer: "dass",
};

const SECOND: Lexicon = Lexicon {
    nouns: ["garsu", "filu", "chatu", "chienu", "maitru", "enfu", "oisu", "hommu", "femmu", "medu"],
    verbs: ["voiru", "aimeru", "aideru", "appelu", "suivru", "trouvu"],
    adjectives: ["grandu", "petitu", "vieru", "jeunu", "contu"],
    want: "veulu",
    determiner: "lo",
    pronoun: "ilo",
    complementizer: "ke",
};

/// The two toy languages, in output order.
pub fn languages() -> [Language; 2] {
    [Language::new("de").expect("known code"), Language::new("fr").expect("known code")]
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct NounPhrase {
    noun: usize,
    adjective: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Object {
    Thing(NounPhrase),
    /// A clause whose subject is the main subject again.
    Clause { verb: usize, object: NounPhrase, negated: bool },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Sentence {
    subject: NounPhrase,
    /// `None` for `want-01`.
    verb: Option<usize>,
    object: Object,
    negated: bool,
}

/// One toy graph with its two renderings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyExample {
    pub graph: AmrGraph,
    /// `(language, sentence)` for each of [`languages`].
    pub texts: [(Language, String); 2],
}

impl ToyExample {
    pub fn penman(&self) -> String {
        self.graph.to_penman().expect("toy graphs are valid")
    }

    pub fn text(&self, lang: Language) -> Option<&str> {
        self.texts.iter().find(|(l, _)| *l == lang).map(|(_, t)| t.as_str())
    }
}

fn noun_phrase(rng: &mut ChaCha8Rng) -> NounPhrase {
    NounPhrase {
        noun: rng.random_range(0..NOUNS.len()),
        adjective: rng.random_bool(0.4).then(|| rng.random_range(0..ADJECTIVES.len())),
    }
}

fn sentence(rng: &mut ChaCha8Rng) -> Sentence {
    let subject = noun_phrase(rng);
    let negated = rng.random_bool(0.2);
    if rng.random_bool(0.25) {
        let object = Object::Clause {
            verb: rng.random_range(0..VERBS.len()),
            object: noun_phrase(rng),
            negated: rng.random_bool(0.2),
        };
        Sentence {
            subject,
            verb: None,
            object,
            negated,
        }
    } else {
        Sentence {
            subject,
            verb: Some(rng.random_range(0..VERBS.len())),
            object: Object::Thing(noun_phrase(rng)),
            negated,
        }
    }
}

struct Builder {
    graph: Option<AmrGraph>,
    used: HashSet<String>,
}

impl Builder {
    fn var(&mut self, concept: &str) -> String {
        let first = concept.chars().next().unwrap_or('x').to_string();
        let mut id = first.clone();
        let mut k = 2;
        while self.used.contains(&id) {
            id = format!("{first}{k}");
            k += 1;
        }
        self.used.insert(id.clone());
        id
    }

    fn node(&mut self, concept: &str) -> String {
        let id = self.var(concept);
        match &mut self.graph {
            Some(g) => {
                g.add_node(id.clone(), concept);
            }
            None => self.graph = Some(AmrGraph::new(id.clone(), concept)),
        }
        id
    }

    fn edge(&mut self, from: &str, role: &str, to: &str) {
        self.graph.as_mut().expect("root exists").add_edge(from, role, to);
    }

    fn polarity(&mut self, from: &str) {
        self.graph.as_mut().expect("root exists").add_attribute(from, ":polarity", "-");
    }

    fn noun_phrase(&mut self, np: &NounPhrase) -> String {
        let id = self.node(NOUNS[np.noun]);
        if let Some(a) = np.adjective {
            let adj = self.node(ADJECTIVES[a]);
            self.edge(&id, ":mod", &adj);
        }
        id
    }
}

fn to_graph(s: &Sentence) -> AmrGraph {
    let mut b = Builder {
        graph: None,
        used: HashSet::new(),
    };
    let top = b.node(s.verb.map_or("want-01", |v| VERBS[v]));
    let subject = b.noun_phrase(&s.subject);
    b.edge(&top, ":ARG0", &subject);
    match &s.object {
        Object::Thing(np) => {
            let o = b.noun_phrase(np);
            b.edge(&top, ":ARG1", &o);
        }
        Object::Clause { verb, object, negated } => {
            let c = b.node(VERBS[*verb]);
            b.edge(&top, ":ARG1", &c);
            b.edge(&c, ":ARG0", &subject);
            let o = b.noun_phrase(object);
            b.edge(&c, ":ARG1", &o);
            if *negated {
                b.polarity(&c);
            }
        }
    }
    if s.negated {
        b.polarity(&top);
    }
    b.graph.expect("root exists")
}

fn np_words(lex: &Lexicon, np: &NounPhrase, adjective_first: bool, out: &mut Vec<&'static str>) {
    out.push(lex.determiner);
    let adj = np.adjective.map(|a| lex.adjectives[a]);
    if adjective_first {
        out.extend(adj);
        out.push(lex.nouns[np.noun]);
    } else {
        out.push(lex.nouns[np.noun]);
        out.extend(adj);
    }
}

/// First language: subject object verb, negation after the verb,
/// adjectives before nouns.
fn render_first(s: &Sentence) -> Vec<&'static str> {
    let lex = &FIRST;
    let mut w = Vec::new();
    np_words(lex, &s.subject, true, &mut w);
    match &s.object {
        Object::Thing(np) => {
            np_words(lex, np, true, &mut w);
            w.push(lex.verbs[s.verb.expect("transitive")]);
            if s.negated {
                w.push("nit");
            }
        }
        Object::Clause { verb, object, negated } => {
            w.push(lex.want);
            if s.negated {
                w.push("nit");
            }
            w.push(lex.complementizer);
            w.push(lex.pronoun);
            np_words(lex, object, true, &mut w);
            w.push(lex.verbs[*verb]);
            if *negated {
                w.push("nit");
            }
        }
    }
    w
}

/// Second language: subject verb object, negation wrapped around the verb,
/// adjectives after nouns.
fn render_second(s: &Sentence) -> Vec<&'static str> {
    let lex = &SECOND;
    let mut w = Vec::new();
    let verb = |w: &mut Vec<&'static str>, v: &'static str, neg: bool| {
        if neg {
            w.push("na");
        }
        w.push(v);
        if neg {
            w.push("pu");
        }
    };
    np_words(lex, &s.subject, false, &mut w);
    match &s.object {
        Object::Thing(np) => {
            verb(&mut w, lex.verbs[s.verb.expect("transitive")], s.negated);
            np_words(lex, np, false, &mut w);
        }
        Object::Clause {
            verb: v,
            object,
            negated,
        } => {
            verb(&mut w, lex.want, s.negated);
            w.push(lex.complementizer);
            w.push(lex.pronoun);
            verb(&mut w, lex.verbs[*v], *negated);
            np_words(lex, object, false, &mut w);
        }
    }
    w
}

fn finish(words: Vec<&str>) -> String {
    let mut s = words.join(" ");
    if let Some(first) = s.get(..1) {
        s = first.to_uppercase() + &s[1..];
    }
    s.push('.');
    s
}

/// `n` distinct toy examples drawn with `seed`.
pub fn generate(n: usize, seed: u64) -> Vec<ToyExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let [first, second] = languages();
    let mut attempts = 0;
    while out.len() < n && attempts < n * 1000 {
        attempts += 1;
        let s = sentence(&mut rng);
        if !seen.insert(s.clone()) {
            continue;
        }
        out.push(ToyExample {
            graph: to_graph(&s),
            texts: [(first, finish(render_first(&s))), (second, finish(render_second(&s)))],
        });
    }
    out
}

/// Files of the bundled toy dataset: `graphs.amr` (one PENMAN graph per
/// line), one text file per language, and a manifest using the first
/// `n_train` examples for training and the rest for a shared test file.
pub fn dataset_files(examples: &[ToyExample], n_train: usize) -> Vec<(String, String)> {
    let line = |ex: &[ToyExample], f: &dyn Fn(&ToyExample) -> String| -> String {
        ex.iter().map(|e| f(e) + "\n").collect()
    };
    let (train, test) = examples.split_at(n_train.min(examples.len()));
    let mut files = vec![
        ("train.amr".to_string(), line(train, &|e| e.penman())),
        ("test.amr".to_string(), line(test, &|e| e.penman())),
    ];
    let mut manifest = String::from("# lang\tamr\ttext\tsplit\n");
    for lang in languages() {
        let text = |e: &ToyExample| e.text(lang).unwrap_or_default().to_string();
        files.push((format!("train.{lang}"), line(train, &text)));
        files.push((format!("test.{lang}"), line(test, &text)));
        manifest.push_str(&format!("{lang}\ttrain.amr\ttrain.{lang}\ttrain\n"));
        manifest.push_str(&format!("{lang}\ttest.amr\ttest.{lang}\ttest\n"));
    }
    files.push(("manifest.tsv".to_string(), manifest));
    files
}
