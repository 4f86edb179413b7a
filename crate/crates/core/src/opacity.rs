//! Natural-language sentence pairs that alternate a proper name with a
//! co-referring definite description inside transparent or opaque contexts.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LabeledPair, PairLabel};
use crate::error::{Error, Result};
use crate::io;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pronoun {
    She,
    He,
}

impl Pronoun {
    pub const BOTH: [Pronoun; 2] = [Pronoun::She, Pronoun::He];

    pub fn capitalized(self) -> &'static str {
        match self {
            Pronoun::She => "She",
            Pronoun::He => "He",
        }
    }

    pub fn lowercase(self) -> &'static str {
        match self {
            Pronoun::She => "she",
            Pronoun::He => "he",
        }
    }
}

fn both_pronouns() -> Vec<Pronoun> {
    Pronoun::BOTH.to_vec()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactEntry {
    pub name: String,
    pub description: String,
    pub category: String,
    #[serde(default = "both_pronouns")]
    pub pronoun_pool: Vec<Pronoun>,
}

impl FactEntry {
    pub fn new(name: &str, description: &str, category: &str) -> Self {
        FactEntry {
            name: name.to_string(),
            description: description.to_string(),
            category: category.to_string(),
            pronoun_pool: both_pronouns(),
        }
    }

    pub fn validate(&self, templates: &TemplateRegistry) -> Result<()> {
        if self.name.trim().is_empty() || self.description.trim().is_empty() {
            return Err(Error::config("fact name and description must be non-empty"));
        }
        if self.name == self.description {
            return Err(Error::config(format!("fact {:?}: name equals description", self.name)));
        }
        if self.pronoun_pool.is_empty() {
            return Err(Error::config(format!("fact {:?}: empty pronoun pool", self.name)));
        }
        templates.get(&self.category).map(|_| ())
    }
}

pub fn read_facts(path: &Path) -> Result<Vec<FactEntry>> {
    io::read_jsonl(path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerbClass {
    Transparent,
    Opaque,
}

impl VerbClass {
    pub fn label(self) -> PairLabel {
        match self {
            VerbClass::Transparent => PairLabel::Equivalent,
            VerbClass::Opaque => PairLabel::NonEquivalent,
        }
    }
}

impl fmt::Display for VerbClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VerbClass::Transparent => "transparent",
            VerbClass::Opaque => "opaque",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerbInventory {
    /// Verbs taking an infinitival complement that leave it transparent.
    pub transparent: Vec<String>,
    /// Propositional-attitude verbs taking an infinitival complement.
    pub opaque: Vec<String>,
    /// Opaque main-clause verb taking the entity directly.
    pub mainclause_opaque: String,
}

impl Default for VerbInventory {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        VerbInventory {
            transparent: s(&["starts", "begins", "ceases", "stops", "managed", "failed"]),
            opaque: s(&["wants", "intends", "hopes", "begs", "preferred", "suggested"]),
            mainclause_opaque: "dislikes".to_string(),
        }
    }
}

impl VerbInventory {
    pub fn validate(&self) -> Result<()> {
        if self.transparent.iter().any(|v| self.opaque.contains(v)) {
            return Err(Error::config("a verb is listed as both transparent and opaque"));
        }
        if self.transparent.is_empty() || self.opaque.is_empty() {
            return Err(Error::config("both verb classes need at least one verb"));
        }
        Ok(())
    }

    /// Class of an embedding verb from either list.
    pub fn class_of(&self, verb: &str) -> Option<VerbClass> {
        if self.transparent.iter().any(|v| v == verb) {
            Some(VerbClass::Transparent)
        } else if self.opaque.iter().any(|v| v == verb) {
            Some(VerbClass::Opaque)
        } else {
            None
        }
    }

    /// Embedding verbs, transparent first.
    pub fn embedding_verbs(&self) -> Vec<(&str, VerbClass)> {
        self.transparent
            .iter()
            .map(|v| (v.as_str(), VerbClass::Transparent))
            .chain(self.opaque.iter().map(|v| (v.as_str(), VerbClass::Opaque)))
            .collect()
    }
}

/// Per-category phrasing: the infinitive used under an embedding verb and
/// the transparent main-clause verb.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryTemplates {
    pub infinitive: String,
    pub main_verb: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateRegistry {
    pub categories: BTreeMap<String, CategoryTemplates>,
}

impl Default for TemplateRegistry {
    fn default() -> Self {
        let entries = [
            ("official-language", "speak", "speaks"),
            ("native-language", "speak", "speaks"),
            ("original-language", "watch films in", "watches films in"),
            ("religion", "practice", "practices"),
            ("capital", "visit", "visits"),
            ("person", "meet", "meets"),
        ];
        TemplateRegistry {
            categories: entries
                .iter()
                .map(|(c, i, m)| {
                    (
                        c.to_string(),
                        CategoryTemplates {
                            infinitive: i.to_string(),
                            main_verb: m.to_string(),
                        },
                    )
                })
                .collect(),
        }
    }
}

impl TemplateRegistry {
    pub fn get(&self, category: &str) -> Result<&CategoryTemplates> {
        self.categories
            .get(category)
            .ok_or_else(|| Error::config(format!("no templates registered for category {category:?}")))
    }
}

/// What frames the entity in a clause.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "verb")]
pub enum Frame {
    /// `[PRONOUN] [VERB] to <infinitive> [ENTITY]`.
    Embedded(String),
    /// `[PRONOUN] dislikes [ENTITY]`.
    MainOpaque,
    /// `[PRONOUN] <category verb> [ENTITY]`.
    MainTransparent,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Clause<'a> {
    pub fact: &'a FactEntry,
    pub pronoun: Pronoun,
    pub frame: Frame,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClauseInfo {
    pub verb: String,
    pub class: VerbClass,
    pub fact: String,
    pub alternated: bool,
}

pub struct Generator<'a> {
    pub inventory: &'a VerbInventory,
    pub templates: &'a TemplateRegistry,
}

impl<'a> Generator<'a> {
    pub fn new(inventory: &'a VerbInventory, templates: &'a TemplateRegistry) -> Result<Self> {
        inventory.validate()?;
        Ok(Generator { inventory, templates })
    }

    fn verb_and_class(&self, clause: &Clause) -> Result<(String, VerbClass)> {
        Ok(match &clause.frame {
            Frame::Embedded(v) => {
                let class = self
                    .inventory
                    .class_of(v)
                    .ok_or_else(|| Error::config(format!("verb {v:?} is not in the inventory")))?;
                (v.clone(), class)
            }
            Frame::MainOpaque => (self.inventory.mainclause_opaque.clone(), VerbClass::Opaque),
            Frame::MainTransparent => (
                self.templates.get(&clause.fact.category)?.main_verb.clone(),
                VerbClass::Transparent,
            ),
        })
    }

    /// Clause text without final punctuation.
    fn render(&self, clause: &Clause, use_description: bool, capitalize: bool) -> Result<String> {
        let t = self.templates.get(&clause.fact.category)?;
        let pronoun = if capitalize {
            clause.pronoun.capitalized()
        } else {
            clause.pronoun.lowercase()
        };
        let entity = if use_description {
            &clause.fact.description
        } else {
            &clause.fact.name
        };
        Ok(match &clause.frame {
            Frame::Embedded(v) => format!("{pronoun} {v} to {} {entity}", t.infinitive),
            Frame::MainOpaque => format!("{pronoun} {} {entity}", self.inventory.mainclause_opaque),
            Frame::MainTransparent => format!("{pronoun} {} {entity}", t.main_verb),
        })
    }

    /// One clause, name in `a` and description in `b`.
    pub fn simple_pair(&self, clause: &Clause) -> Result<OpacityPair> {
        let (verb, class) = self.verb_and_class(clause)?;
        Ok(OpacityPair {
            a: format!("{}.", self.render(clause, false, true)?),
            b: format!("{}.", self.render(clause, true, true)?),
            label: class.label(),
            shape: Shape::Simple,
            clauses: vec![ClauseInfo {
                verb,
                class,
                fact: clause.fact.name.clone(),
                alternated: true,
            }],
        })
    }

    /// Two clauses joined by "and"; only clause `alternate` (0 or 1) swaps
    /// the name for the description.
    pub fn coordinated_pair(&self, first: &Clause, second: &Clause, alternate: usize) -> Result<OpacityPair> {
        assert!(alternate < 2);
        let mut infos = Vec::with_capacity(2);
        let mut a_parts = Vec::with_capacity(2);
        let mut b_parts = Vec::with_capacity(2);
        for (k, c) in [first, second].into_iter().enumerate() {
            let (verb, class) = self.verb_and_class(c)?;
            a_parts.push(self.render(c, false, k == 0)?);
            b_parts.push(self.render(c, k == alternate, k == 0)?);
            infos.push(ClauseInfo {
                verb,
                class,
                fact: c.fact.name.clone(),
                alternated: k == alternate,
            });
        }
        let label = infos[alternate].class.label();
        Ok(OpacityPair {
            a: format!("{} and {}.", a_parts[0], a_parts[1]),
            b: format!("{} and {}.", b_parts[0], b_parts[1]),
            label,
            shape: Shape::Coordinated,
            clauses: infos,
        })
    }

    /// Every fact x pronoun x embedding verb, then every fact x pronoun in
    /// the two main-clause frames.
    pub fn generate_simple_pairs(&self, facts: &[FactEntry]) -> Result<Vec<OpacityPair>> {
        for f in facts {
            f.validate(self.templates)?;
        }
        let mut out = Vec::new();
        for fact in facts {
            for &pronoun in &fact.pronoun_pool {
                for (verb, _) in self.inventory.embedding_verbs() {
                    out.push(self.simple_pair(&Clause {
                        fact,
                        pronoun,
                        frame: Frame::Embedded(verb.to_string()),
                    })?);
                }
            }
        }
        for fact in facts {
            for &pronoun in &fact.pronoun_pool {
                for frame in [Frame::MainOpaque, Frame::MainTransparent] {
                    out.push(self.simple_pair(&Clause { fact, pronoun, frame })?);
                }
            }
        }
        Ok(out)
    }

    fn frames(&self, class: VerbClass) -> Vec<Frame> {
        let (list, main) = match class {
            VerbClass::Transparent => (&self.inventory.transparent, Frame::MainTransparent),
            VerbClass::Opaque => (&self.inventory.opaque, Frame::MainOpaque),
        };
        list.iter().map(|v| Frame::Embedded(v.clone())).chain([main]).collect()
    }

    /// `n_target` distinct coordinated pairs, each joining an opaque and a
    /// transparent clause over different facts. Clause order and the
    /// alternation site are drawn uniformly; the two labels alternate.
    pub fn generate_coordinated_pairs<R: Rng + ?Sized>(
        &self,
        facts: &[FactEntry],
        rng: &mut R,
        n_target: usize,
    ) -> Result<Vec<OpacityPair>> {
        for f in facts {
            f.validate(self.templates)?;
        }
        if facts.len() < 2 {
            return Err(Error::Infeasible("coordinated pairs need at least two facts".into()));
        }
        let opaque = self.frames(VerbClass::Opaque);
        let transparent = self.frames(VerbClass::Transparent);
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::with_capacity(n_target);
        let budget = 100 * n_target + 1000;
        for _ in 0..budget {
            if out.len() == n_target {
                break;
            }
            let i = rng.random_range(0..facts.len());
            let mut j = rng.random_range(0..facts.len() - 1);
            if j >= i {
                j += 1;
            }
            let op = Clause {
                fact: &facts[i],
                pronoun: *facts[i].pronoun_pool.choose(rng).expect("non-empty"),
                frame: opaque.choose(rng).expect("non-empty").clone(),
            };
            let tr = Clause {
                fact: &facts[j],
                pronoun: *facts[j].pronoun_pool.choose(rng).expect("non-empty"),
                frame: transparent.choose(rng).expect("non-empty").clone(),
            };
            let alternate_transparent = out.len() % 2 == 0;
            let opaque_first = rng.random_bool(0.5);
            let (first, second) = if opaque_first { (&op, &tr) } else { (&tr, &op) };
            let alternate = usize::from(opaque_first == alternate_transparent);
            let pair = self.coordinated_pair(first, second, alternate)?;
            if seen.insert((pair.a.clone(), pair.b.clone())) {
                out.push(pair);
            }
        }
        if out.len() < n_target {
            return Err(Error::Infeasible(format!(
                "only {} distinct coordinated pairs found for {n_target} requested",
                out.len()
            )));
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Simple,
    Coordinated,
}

impl FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple" => Ok(Shape::Simple),
            "coordinated" => Ok(Shape::Coordinated),
            other => Err(Error::config(format!("unknown shape {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpacityPair {
    pub a: String,
    pub b: String,
    pub label: PairLabel,
    pub shape: Shape,
    pub clauses: Vec<ClauseInfo>,
}

impl OpacityPair {
    /// Verb of the clause carrying the alternation.
    pub fn alternated_verb(&self) -> &str {
        &self.alternated_clause().verb
    }

    pub fn alternated_clause(&self) -> &ClauseInfo {
        self.clauses
            .iter()
            .find(|c| c.alternated)
            .expect("one alternated clause")
    }

    /// Problems with the stored label or the minimal-difference property.
    pub fn check(&self, facts: &[FactEntry]) -> Vec<String> {
        let mut out = Vec::new();
        let alternated: Vec<&ClauseInfo> = self.clauses.iter().filter(|c| c.alternated).collect();
        if alternated.len() != 1 {
            out.push(format!("{} alternated clauses", alternated.len()));
            return out;
        }
        if alternated[0].class.label() != self.label {
            out.push(format!(
                "label {} disagrees with the {} alternation site",
                self.label, alternated[0].class
            ));
        }
        match facts.iter().find(|f| f.name == alternated[0].fact) {
            Some(f) => {
                let minimal = self.a.match_indices(f.name.as_str()).any(|(i, _)| {
                    format!("{}{}{}", &self.a[..i], f.description, &self.a[i + f.name.len()..]) == self.b
                });
                if !minimal {
                    out.push("sentences differ outside the alternated entity".to_string());
                }
            }
            None => out.push(format!("unknown fact {:?}", alternated[0].fact)),
        }
        out
    }
}

impl LabeledPair for OpacityPair {
    fn sentence_a(&self) -> &str {
        &self.a
    }

    fn sentence_b(&self) -> &str {
        &self.b
    }

    fn label(&self) -> PairLabel {
        self.label
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub valid: Vec<T>,
    pub test: Vec<T>,
}

/// Target split sizes for `n` items and `ratios`, by largest remainder.
fn targets(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let total: f64 = ratios.iter().sum();
    let exact: Vec<f64> = ratios.iter().map(|r| r / total * n as f64).collect();
    let mut out = [0usize; 3];
    for k in 0..3 {
        out[k] = exact[k].floor() as usize;
    }
    let mut rest = n - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&x, &y| (exact[y] - exact[y].floor()).total_cmp(&(exact[x] - exact[x].floor())));
    for &k in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        out[k] += 1;
        rest -= 1;
    }
    out
}

/// Shuffled split stratified by label; overall sizes follow `ratios` by
/// largest remainder.
pub fn split_dataset<T: LabeledPair + Clone>(pairs: &[T], ratios: [f64; 3], seed: u64) -> Splits<T> {
    let mut r = rng::stream(seed, 0x5e);
    let global = targets(pairs.len(), ratios);
    let mut groups: BTreeMap<PairLabel, Vec<usize>> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        groups.entry(p.label()).or_default().push(i);
    }
    let mut quotas: Vec<[usize; 3]> = groups.values().map(|g| {
        let mut q = [0usize; 3];
        let total: f64 = ratios.iter().sum();
        for k in 0..3 {
            q[k] = (ratios[k] / total * g.len() as f64).floor() as usize;
        }
        q
    }).collect();
    let mut remaining: [usize; 3] = [0; 3];
    for k in 0..3 {
        remaining[k] = global[k] - quotas.iter().map(|q| q[k]).sum::<usize>();
    }
    for (g, q) in groups.values().zip(quotas.iter_mut()) {
        let mut left = g.len() - q.iter().sum::<usize>();
        while left > 0 {
            let k = (0..3).max_by_key(|&k| (remaining[k], std::cmp::Reverse(k))).expect("three splits");
            q[k] += 1;
            remaining[k] -= 1;
            left -= 1;
        }
    }
    let mut out = Splits {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    for (g, q) in groups.into_values().zip(quotas) {
        let mut g = g;
        g.shuffle(&mut r);
        let (tr, rest) = g.split_at(q[0]);
        let (va, te) = rest.split_at(q[1]);
        out.train.extend(tr.iter().map(|&i| pairs[i].clone()));
        out.valid.extend(va.iter().map(|&i| pairs[i].clone()));
        out.test.extend(te.iter().map(|&i| pairs[i].clone()));
    }
    out.train.shuffle(&mut r);
    out.valid.shuffle(&mut r);
    out.test.shuffle(&mut r);
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpacityManifest {
    pub shape: Shape,
    pub seed: u64,
    pub facts: usize,
    pub facts_digest: Option<String>,
    pub counts: BTreeMap<String, usize>,
    pub equivalent: BTreeMap<String, usize>,
    pub digests: BTreeMap<String, String>,
}

/// Writes `train.jsonl`, `valid.jsonl`, `test.jsonl` and `manifest.json`.
pub fn write_splits(
    splits: &Splits<OpacityPair>,
    shape: Shape,
    seed: u64,
    facts: usize,
    facts_digest: Option<String>,
    out_dir: &Path,
) -> Result<OpacityManifest> {
    io::create_dir(out_dir)?;
    let mut m = OpacityManifest {
        shape,
        seed,
        facts,
        facts_digest,
        counts: BTreeMap::new(),
        equivalent: BTreeMap::new(),
        digests: BTreeMap::new(),
    };
    for (name, items) in [("train", &splits.train), ("valid", &splits.valid), ("test", &splits.test)] {
        let path = out_dir.join(format!("{name}.jsonl"));
        io::write_jsonl(&path, items)?;
        m.counts.insert(name.into(), items.len());
        m.equivalent
            .insert(name.into(), items.iter().filter(|p| p.label.is_equivalent()).count());
        m.digests.insert(name.into(), io::file_digest(&path)?);
    }
    io::write_json(&out_dir.join("manifest.json"), &m)?;
    Ok(m)
}

pub fn read_pairs(path: &Path) -> Result<Vec<OpacityPair>> {
    io::read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn facts() -> Vec<FactEntry> {
        vec![
            FactEntry::new("Yuri Gagarin", "the first person in space", "person"),
            FactEntry::new("Lao", "the official language of Laos", "official-language"),
            FactEntry::new("Paris", "the capital of France", "capital"),
        ]
    }

    #[test]
    fn simple_counts_and_labels() {
        let inv = VerbInventory::default();
        let reg = TemplateRegistry::default();
        let g = Generator::new(&inv, &reg).unwrap();
        let f = facts();
        let pairs = g.generate_simple_pairs(&f[..1]).unwrap();
        let embedded = pairs.iter().filter(|p| inv.class_of(p.alternated_verb()).is_some()).count();
        assert_eq!(embedded, 2 * 12);
        assert_eq!(pairs.len(), 2 * 12 + 2 * 2);
        for p in &pairs {
            assert!(p.check(&f).is_empty(), "{p:?}");
        }
        let eq = pairs.iter().filter(|p| p.label.is_equivalent()).count();
        assert_eq!(eq * 2, pairs.len());
    }

    #[test]
    fn coordinated_pairs_mix_both_classes() {
        let inv = VerbInventory::default();
        let reg = TemplateRegistry::default();
        let g = Generator::new(&inv, &reg).unwrap();
        let f = facts();
        let pairs = g.generate_coordinated_pairs(&f, &mut rng::seeded(1), 200).unwrap();
        assert_eq!(pairs.len(), 200);
        for p in &pairs {
            assert!(p.check(&f).is_empty(), "{p:?}");
            let classes: Vec<VerbClass> = p.clauses.iter().map(|c| c.class).collect();
            assert!(classes.contains(&VerbClass::Opaque) && classes.contains(&VerbClass::Transparent));
            assert_ne!(p.clauses[0].fact, p.clauses[1].fact);
        }
        assert_eq!(pairs.iter().filter(|p| p.label.is_equivalent()).count(), 100);
        assert!(g.generate_coordinated_pairs(&f[..1], &mut rng::seeded(1), 2).is_err());
    }

    #[test]
    fn split_sizes() {
        let inv = VerbInventory::default();
        let reg = TemplateRegistry::default();
        let g = Generator::new(&inv, &reg).unwrap();
        let pairs = g.generate_coordinated_pairs(&facts(), &mut rng::seeded(2), 100).unwrap();
        let s = split_dataset(&pairs, [8.0, 1.0, 1.0], 4);
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (80, 10, 10));
        let again = split_dataset(&pairs, [8.0, 1.0, 1.0], 4);
        assert_eq!(s, again);
        for part in [&s.train, &s.valid, &s.test] {
            let eq = part.iter().filter(|p| p.label.is_equivalent()).count() as f64 / part.len() as f64;
            assert!((eq - 0.5).abs() <= 0.05);
        }
        assert_eq!(targets(7, [8.0, 1.0, 1.0]).iter().sum::<usize>(), 7);
    }
}
