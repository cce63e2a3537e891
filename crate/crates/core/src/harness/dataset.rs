use crate::editor::EditExample;
use crate::error::{Result, WiseError};
use crate::numerics::Token;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::PathBuf;

/// Two surface forms of one relation; `{s}` marks the subject.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Relation {
    pub name: String,
    pub templates: [String; 2],
}

impl Relation {
    pub fn new(name: &str, a: &str, b: &str) -> Self {
        Self {
            name: name.into(),
            templates: [a.into(), b.into()],
        }
    }

    pub fn render(&self, which: usize, subject: &str) -> String {
        self.templates[which].replace("{s}", subject)
    }
}

/// Where the subject sits in a rendered prompt.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateLayout {
    /// `locutu lives in`
    #[default]
    SubjectFirst,
    /// `home of locutu`
    SubjectLast,
}

pub fn default_relations() -> Vec<Relation> {
    relations(TemplateLayout::SubjectFirst)
}

pub fn relations(layout: TemplateLayout) -> Vec<Relation> {
    match layout {
        TemplateLayout::SubjectFirst => vec![
            Relation::new("lives", "{s} lives in", "{s} resides in"),
            Relation::new("works", "{s} works at", "{s} is employed at"),
            Relation::new("born", "{s} was born in", "{s} comes from"),
            Relation::new("likes", "{s} likes", "{s} is fond of"),
        ],
        TemplateLayout::SubjectLast => vec![
            Relation::new("lives", "home of {s}", "the town of {s}"),
            Relation::new("works", "employer of {s}", "the company of {s}"),
            Relation::new("born", "birthplace of {s}", "the origin of {s}"),
            Relation::new("likes", "favorite of {s}", "the pet love of {s}"),
        ],
    }
}

pub const DEFAULT_OBJECTS: [&str; 16] = [
    "rom", "pax", "lud", "kir", "bes", "tov", "mag", "fen", "dul", "siv", "gor", "naj", "wex", "hib",
    "cal", "zun",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fact {
    pub subject: String,
    pub relation: usize,
    pub object: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_facts: usize,
    /// Background facts whose prompts serve as irrelevant examples.
    pub n_irrelevant: usize,
    /// Background facts whose prompts serve as locality probes.
    pub n_locality: usize,
    /// Letters per subject name.
    pub subject_len: usize,
    pub relations: Vec<Relation>,
    pub objects: Vec<String>,
}

impl DatasetConfig {
    /// Background pools sized like the stream.
    pub fn new(seed: u64, n_facts: usize) -> Self {
        Self {
            seed,
            n_facts,
            n_irrelevant: n_facts.max(8),
            n_locality: n_facts.max(8),
            subject_len: 6,
            relations: default_relations(),
            objects: DEFAULT_OBJECTS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Ordered sequence of edits plus where irrelevant examples come from.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EditStream {
    pub examples: Vec<EditExample>,
    pub corpus_ref: Option<PathBuf>,
}

impl EditStream {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (i, ex) in self.examples.iter().enumerate() {
            ex.validate()?;
            if !seen.insert(&ex.prompt) {
                return Err(WiseError::Input(format!("duplicate prompt at example {i}")));
            }
        }
        Ok(())
    }

    /// First `n` examples.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            examples: self.examples[..n.min(self.examples.len())].to_vec(),
            corpus_ref: self.corpus_ref.clone(),
        }
    }
}

/// Output of [`gen_dataset`].
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    pub stream: EditStream,
    /// Pretraining text: every fact in both surface forms with its original
    /// object.
    pub corpus: Vec<String>,
    /// Prompts the side memory must stay inactive on during training.
    pub irrelevant: Vec<String>,
    /// Corpus prompts never used in training the side memory.
    pub held_out: Vec<String>,
    pub stream_facts: Vec<Fact>,
}

pub fn tokenize(text: &str) -> Vec<Token> {
    text.bytes().map(Token::from).collect()
}

pub fn detokenize(tokens: &[Token]) -> Result<String> {
    let bytes = tokens
        .iter()
        .map(|&t| u8::try_from(t).map_err(|_| WiseError::Input(format!("token {t} is not a byte"))))
        .collect::<Result<Vec<u8>>>()?;
    String::from_utf8(bytes).map_err(|e| WiseError::Input(format!("tokens are not UTF-8: {e}")))
}

fn random_subject(rng: &mut ChaCha8Rng, len: usize) -> String {
    const CONSONANTS: &[u8] = b"bcdfghjklmnprstvwz";
    const VOWELS: &[u8] = b"aeiou";
    let mut s = String::with_capacity(len);
    for i in 0..len {
        let pool = if i % 2 == 0 { CONSONANTS } else { VOWELS };
        s.push(pool[rng.gen_range(0..pool.len())] as char);
    }
    s
}

/// Builds a random fact world. The stream edits each stream fact to a new
/// object; the corpus teaches the original ones.
pub fn gen_dataset(cfg: &DatasetConfig) -> Result<SyntheticWorld> {
    if cfg.n_facts == 0 {
        return Err(WiseError::Input("n_facts must be at least 1".into()));
    }
    if cfg.objects.len() < 2 || cfg.relations.is_empty() {
        return Err(WiseError::Config("need at least 2 objects and 1 relation".into()));
    }
    for r in &cfg.relations {
        if r.render(0, "x") == r.render(1, "x") {
            return Err(WiseError::Generation(format!(
                "relation '{}' renders both templates identically",
                r.name
            )));
        }
    }
    let total = cfg.n_facts + cfg.n_irrelevant + cfg.n_locality;
    let space = (0..cfg.subject_len).fold(1f64, |acc, i| acc * if i % 2 == 0 { 18.0 } else { 5.0 });
    if cfg.subject_len == 0 || total as f64 > space / 4.0 {
        return Err(WiseError::Config(format!("{total} facts exceed the subject space")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut subjects = BTreeSet::new();
    let mut facts = Vec::with_capacity(total);
    while facts.len() < total {
        let s = random_subject(&mut rng, cfg.subject_len);
        if !subjects.insert(s.clone()) {
            continue;
        }
        facts.push(Fact {
            subject: s,
            relation: rng.gen_range(0..cfg.relations.len()),
            object: cfg.objects.choose(&mut rng).expect("objects").clone(),
        });
    }

    let mut corpus = Vec::with_capacity(2 * total);
    for f in &facts {
        let rel = &cfg.relations[f.relation];
        for which in 0..2 {
            corpus.push(format!("{} {}", rel.render(which, &f.subject), f.object));
        }
    }
    corpus.shuffle(&mut rng);

    let (stream_facts, background) = facts.split_at(cfg.n_facts);
    let (irr_facts, loc_facts) = background.split_at(cfg.n_irrelevant);
    let prompt = |f: &Fact, which: usize| cfg.relations[f.relation].render(which, &f.subject);
    let irrelevant: Vec<String> = irr_facts
        .iter()
        .flat_map(|f| [prompt(f, 0), prompt(f, 1)])
        .collect();
    let held_out: Vec<String> = loc_facts.iter().map(|f| prompt(f, 0)).collect();

    let mut examples = Vec::with_capacity(cfg.n_facts);
    for (i, f) in stream_facts.iter().enumerate() {
        let new_object = loop {
            let o = cfg.objects.choose(&mut rng).expect("objects");
            if *o != f.object {
                break o.clone();
            }
        };
        let (p, q) = (prompt(f, 0), prompt(f, 1));
        if p == q {
            return Err(WiseError::Generation(format!("paraphrase of '{p}' equals the prompt")));
        }
        let locality = if held_out.is_empty() {
            prompt(&background[i % background.len().max(1)], 0)
        } else {
            held_out[i % held_out.len()].clone()
        };
        examples.push(EditExample {
            prompt: tokenize(&p),
            target: tokenize(&format!(" {new_object}")),
            paraphrase: Some(tokenize(&q)),
            locality: tokenize(&locality),
            original: Some(tokenize(&format!(" {}", f.object))),
        });
    }
    Ok(SyntheticWorld {
        stream: EditStream {
            examples,
            corpus_ref: None,
        },
        corpus,
        irrelevant,
        held_out,
        stream_facts: stream_facts.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_fact_world() {
        let w = gen_dataset(&DatasetConfig::new(1, 1)).unwrap();
        assert_eq!(w.stream.len(), 1);
        let ex = &w.stream.examples[0];
        assert_ne!(Some(&ex.prompt), ex.paraphrase.as_ref());
        assert_ne!(Some(&ex.target), ex.original.as_ref());
        w.stream.validate().unwrap();
    }

    #[test]
    fn corpus_teaches_original_objects() {
        let w = gen_dataset(&DatasetConfig::new(5, 20)).unwrap();
        for ex in &w.stream.examples {
            let line = detokenize(&[ex.prompt.clone(), ex.original.clone().unwrap()].concat()).unwrap();
            assert!(w.corpus.contains(&line), "{line}");
            let edited = detokenize(&[ex.prompt.clone(), ex.target.clone()].concat()).unwrap();
            assert!(!w.corpus.contains(&edited));
        }
        assert_eq!(w.corpus.len(), 2 * (20 + 20 + 20));
        let stream_prompts: BTreeSet<String> = w
            .stream
            .examples
            .iter()
            .map(|e| detokenize(&e.prompt).unwrap())
            .collect();
        assert!(w.irrelevant.iter().all(|p| !stream_prompts.contains(p)));
        assert!(w.held_out.iter().all(|p| !w.irrelevant.contains(p)));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_dataset(&DatasetConfig::new(9, 30)).unwrap();
        assert_eq!(a, gen_dataset(&DatasetConfig::new(9, 30)).unwrap());
        assert_ne!(a, gen_dataset(&DatasetConfig::new(10, 30)).unwrap());
    }

    #[test]
    fn degenerate_inputs_rejected() {
        assert!(gen_dataset(&DatasetConfig::new(0, 0)).is_err());
        let mut cfg = DatasetConfig::new(0, 3);
        cfg.relations = vec![Relation::new("x", "{s} is", "{s} is")];
        assert!(matches!(gen_dataset(&cfg), Err(WiseError::Generation(_))));
    }

    #[test]
    fn byte_tokenizer_round_trip() {
        let t = tokenize("kobu lives in rom");
        assert_eq!(t[0], b'k' as Token);
        assert_eq!(detokenize(&t).unwrap(), "kobu lives in rom");
        assert!(detokenize(&[300]).is_err());
    }
}
