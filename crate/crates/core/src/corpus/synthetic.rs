//! Synthetic task families with known plans.
//!
//! A procedure is an opaque name such as `P-17` bound to a fixed sequence of
//! two to four templates. Each template is one deterministic state
//! transition with a canonical plan sentence and a step renderer, so every
//! sample's plans and answer are known exactly. Templates are shared across
//! procedures, which gives plans cross-question commonality.

use std::collections::BTreeSet;

use iclp_substrate::Rng;
use serde::{Deserialize, Serialize};

use super::{Family, ReasoningSample};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    Double,
    Add3,
    SquareMod97,
    HalveFloor,
    NegateMod97,
    AddDigitSum,
    Reverse,
    RotateLeft1,
    DuplicateFirst,
    DropLast,
}

pub const ARITH_TEMPLATES: [Template; 6] = [
    Template::Double,
    Template::Add3,
    Template::SquareMod97,
    Template::HalveFloor,
    Template::NegateMod97,
    Template::AddDigitSum,
];

pub const STRING_TEMPLATES: [Template; 4] =
    [Template::Reverse, Template::RotateLeft1, Template::DuplicateFirst, Template::DropLast];

const LETTERS: [char; 6] = ['a', 'b', 'c', 'd', 'e', 'f'];

/// Task state: an integer in `[0, 99]` or a short letter string.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum State {
    Int(u32),
    Letters(Vec<char>),
}

impl State {
    pub fn render(&self) -> String {
        match self {
            State::Int(v) => v.to_string(),
            State::Letters(l) => {
                let s: Vec<String> = l.iter().map(|c| c.to_string()).collect();
                format!("`{}`", s.join(" "))
            }
        }
    }

    /// The canonical answer string (no backquotes for letter strings).
    pub fn answer(&self) -> String {
        match self {
            State::Int(v) => v.to_string(),
            State::Letters(l) => l.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" "),
        }
    }
}

fn digit_sum(v: u32) -> u32 {
    v.to_string().bytes().map(|b| (b - b'0') as u32).sum()
}

impl Template {
    pub fn id(self) -> &'static str {
        match self {
            Template::Double => "double",
            Template::Add3 => "add3",
            Template::SquareMod97 => "square_mod_97",
            Template::HalveFloor => "halve_floor",
            Template::NegateMod97 => "negate_mod_97",
            Template::AddDigitSum => "add_digit_sum",
            Template::Reverse => "reverse",
            Template::RotateLeft1 => "rotate_left_1",
            Template::DuplicateFirst => "duplicate_first",
            Template::DropLast => "drop_last",
        }
    }

    pub fn family(self) -> Family {
        if STRING_TEMPLATES.contains(&self) {
            Family::Strings
        } else {
            Family::Arith
        }
    }

    pub fn plan_text(self) -> &'static str {
        match self {
            Template::Double => "Multiply the current value by two.",
            Template::Add3 => "Add three to the current value.",
            Template::SquareMod97 => "Square the current value and reduce it modulo 97.",
            Template::HalveFloor => "Halve the current value, rounding down.",
            Template::NegateMod97 => "Negate the current value modulo 97.",
            Template::AddDigitSum => "Add the sum of its digits to the current value.",
            Template::Reverse => "Reverse the order of the letters.",
            Template::RotateLeft1 => "Move the first letter to the end.",
            Template::DuplicateFirst => "Repeat the first letter at the front.",
            Template::DropLast => "Remove the last letter.",
        }
    }

    /// Next state and the step body (without the `Step i: ` prefix).
    pub fn apply(self, state: &State) -> (State, String) {
        match (self, state) {
            (Template::Double, State::Int(v)) => int_step(2 * v, format!("2 × {v}")),
            (Template::Add3, State::Int(v)) => int_step(v + 3, format!("{v} + 3")),
            (Template::SquareMod97, State::Int(v)) => {
                let r = v * v % 97;
                (State::Int(r), format!("{v} × {v} mod 97 = {r}"))
            }
            (Template::HalveFloor, State::Int(v)) => int_step(v / 2, format!("{v} / 2")),
            (Template::NegateMod97, State::Int(v)) => {
                let r = (97 - v % 97) % 97;
                (State::Int(r), format!("-{v} mod 97 = {r}"))
            }
            (Template::AddDigitSum, State::Int(v)) => {
                let ds = digit_sum(*v);
                int_step(v + ds, format!("{v} + {ds}"))
            }
            (t, State::Letters(l)) => {
                let mut next = l.clone();
                match t {
                    Template::Reverse => next.reverse(),
                    Template::RotateLeft1 => next.rotate_left(1),
                    Template::DuplicateFirst => next.insert(0, l[0]),
                    Template::DropLast => {
                        if next.len() > 1 {
                            next.pop();
                        }
                    }
                    _ => unreachable!("arith template on letters"),
                }
                let next = State::Letters(next);
                let body = format!("{} → {}", state.render(), next.render());
                (next, body)
            }
            (t, s) => panic!("template {} cannot apply to {s:?}", t.id()),
        }
    }
}

/// Results of 100 or more wrap with an explicit `mod 100` clause.
fn int_step(raw: u32, expr: String) -> (State, String) {
    if raw >= 100 {
        (State::Int(raw % 100), format!("{expr} = {raw} mod 100 = {}", raw % 100))
    } else {
        (State::Int(raw), format!("{expr} = {raw}"))
    }
}

/// Replays a template sequence, returning the step texts and final state.
pub fn replay(templates: &[Template], start: &State) -> (Vec<String>, State) {
    let mut state = start.clone();
    let mut steps = Vec::with_capacity(templates.len());
    for (i, t) in templates.iter().enumerate() {
        let (next, body) = t.apply(&state);
        steps.push(format!("Step {}: {}: {body}", i + 1, t.id()));
        state = next;
    }
    (steps, state)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Procedure {
    pub name: String,
    pub templates: Vec<Template>,
}

/// Procedure-name to template-sequence binding of a generated corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcedureManifest {
    pub family: Family,
    pub seed: u64,
    pub procedures: Vec<Procedure>,
}

impl ProcedureManifest {
    pub fn get(&self, name: &str) -> Option<&Procedure> {
        self.procedures.iter().find(|p| p.name == name)
    }

    /// Draws `count` procedures with distinct names and distinct template
    /// sequences, every template used by at least two of them.
    pub fn generate(family: Family, count: usize, seed: u64) -> Result<Self> {
        let templates: &[Template] = match family {
            Family::Arith => &ARITH_TEMPLATES,
            Family::Strings => &STRING_TEMPLATES,
        };
        if count == 0 || count > 90 {
            return Err(Error::Corpus(format!("procedure count must be in 1..=90, got {count}")));
        }
        if count * 4 < 2 * templates.len() {
            return Err(Error::Corpus(format!(
                "{count} procedures of at most 4 steps cannot use each of {} templates twice",
                templates.len()
            )));
        }
        let mut rng = Rng::derived(seed, &format!("procedures/{family}"));
        let mut numbers: Vec<u32> = (10..100).collect();
        rng.shuffle(&mut numbers);

        // Each template twice, dealt round-robin, then topped up at random;
        // redraw the whole binding until the sequences are distinct.
        let mut seqs: Vec<Vec<Template>> = Vec::new();
        for attempt in 0.. {
            if attempt == 10_000 {
                return Err(Error::Corpus("could not draw distinct procedures".into()));
            }
            let mut pool: Vec<Template> = templates.iter().flat_map(|&t| [t, t]).collect();
            rng.shuffle(&mut pool);
            seqs = vec![Vec::new(); count];
            for (i, t) in pool.into_iter().enumerate() {
                seqs[i % count].push(t);
            }
            for seq in seqs.iter_mut() {
                let target = (2 + rng.below(3)).max(seq.len());
                while seq.len() < target {
                    seq.push(templates[rng.below(templates.len())]);
                }
                rng.shuffle(seq);
            }
            let unique: BTreeSet<&Vec<Template>> = seqs.iter().collect();
            let covered = templates.iter().all(|t| seqs.iter().filter(|s| s.contains(t)).count() >= 2);
            if unique.len() == count && covered {
                break;
            }
        }
        let procedures = seqs
            .into_iter()
            .zip(numbers)
            .map(|(templates, n)| Procedure { name: format!("P-{n}"), templates })
            .collect();
        Ok(Self { family, seed, procedures })
    }
}

/// Which (procedure, start) pairs a sample may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub family: Family,
    pub count: usize,
    pub procedures: usize,
    pub seed: u64,
    pub split: Split,
    /// Percentage of (procedure, start) pairs reserved for the test split.
    pub heldout_percent: u32,
    /// Never repeat a (procedure, start) pair.
    pub distinct: bool,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            family: Family::Arith,
            count: 2000,
            procedures: 20,
            seed: 0,
            split: Split::Train,
            heldout_percent: 20,
            distinct: false,
        }
    }
}

/// Every start state of a family, in a fixed order.
pub fn start_states(family: Family) -> Vec<State> {
    match family {
        Family::Arith => (0..100).map(State::Int).collect(),
        Family::Strings => {
            let mut out = Vec::new();
            for len in 3..=5u32 {
                let total = 6usize.pow(len);
                for mut code in 0..total {
                    let mut letters = Vec::with_capacity(len as usize);
                    for _ in 0..len {
                        letters.push(LETTERS[code % 6]);
                        code /= 6;
                    }
                    out.push(State::Letters(letters));
                }
            }
            out
        }
    }
}

/// Held-out rule: a stable hash of the pair, independent of the corpus seed.
pub fn is_heldout(procedure: &str, start: &State, percent: u32) -> bool {
    let key = format!("{procedure}|{}", start.answer());
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    (h % 100) < percent as u64
}

pub fn question_text(start: &State, procedure: &str) -> String {
    match start {
        State::Int(v) => format!("Start with {v}. Apply procedure {procedure}. What is the final value?"),
        s @ State::Letters(_) => {
            format!("Start with {}. Apply procedure {procedure}. What is the final string?", s.render())
        }
    }
}

pub fn make_sample(id: String, family: Family, procedure: &Procedure, start: &State) -> ReasoningSample {
    let (steps, end) = replay(&procedure.templates, start);
    ReasoningSample {
        id,
        family,
        procedure_id: procedure.name.clone(),
        question: question_text(start, &procedure.name),
        steps,
        plans: procedure.templates.iter().map(|t| t.plan_text().to_string()).collect(),
        answer: end.answer(),
        source: None,
    }
}

/// Generates a corpus. Pure in the config: the same config yields the same
/// samples, and the procedure binding depends only on family, procedure
/// count and seed, so train and test splits of one seed share procedures.
pub fn generate(config: &SyntheticConfig) -> Result<(Vec<ReasoningSample>, ProcedureManifest)> {
    if config.count == 0 {
        return Err(Error::Corpus("count must be at least 1".into()));
    }
    if config.heldout_percent > 100 {
        return Err(Error::Corpus("heldout_percent must be at most 100".into()));
    }
    let manifest = ProcedureManifest::generate(config.family, config.procedures, config.seed)?;
    let starts = start_states(config.family);
    let eligible: Vec<Vec<&State>> = manifest
        .procedures
        .iter()
        .map(|p| {
            starts
                .iter()
                .filter(|s| {
                    let held = is_heldout(&p.name, s, config.heldout_percent);
                    match config.split {
                        Split::Train => !held,
                        Split::Test => held,
                        Split::All => true,
                    }
                })
                .collect()
        })
        .collect();
    let procs = manifest.procedures.len();
    for (p, pool) in manifest.procedures.iter().zip(&eligible) {
        let need = config.count.div_ceil(procs);
        if pool.is_empty() || (config.distinct && need > pool.len()) {
            return Err(Error::Corpus(format!(
                "procedure {} has {} eligible start states, {} requested",
                p.name,
                pool.len(),
                need
            )));
        }
    }
    let split_label = format!("{:?}", config.split).to_lowercase();
    let mut rng = Rng::derived(config.seed, &format!("samples/{}/{split_label}", config.family));
    let mut orders: Vec<Vec<&State>> = eligible.clone();
    for o in orders.iter_mut() {
        rng.shuffle(o);
    }
    let mut samples = Vec::with_capacity(config.count);
    for i in 0..config.count {
        let p = i % procs;
        let round = i / procs;
        let start = if config.distinct { orders[p][round] } else { eligible[p][rng.below(eligible[p].len())] };
        let id = format!("{}-{split_label}-{i:05}", config.family);
        samples.push(make_sample(id, config.family, &manifest.procedures[p], start));
    }
    Ok((samples, manifest))
}

/// Every text fragment a family can render: questions for all start states
/// and procedure names, every template applied to every start state, and
/// the plan sentences. A tokenizer built over these covers any sample of
/// the family, including held-out ones.
pub fn vocabulary_texts(family: Family) -> Vec<String> {
    let templates: &[Template] = match family {
        Family::Arith => &ARITH_TEMPLATES,
        Family::Strings => &STRING_TEMPLATES,
    };
    let mut out = Vec::new();
    for start in start_states(family) {
        out.push(question_text(&start, "P-10"));
        for &t in templates {
            let (_, body) = t.apply(&start);
            out.push(format!("Step 1: {}: {body}\n", t.id()));
        }
    }
    out.extend((10..100).map(|n| format!(" P-{n}")));
    out.extend((1..=9).map(|i| format!("Step {i}:")));
    out.extend(templates.iter().map(|t| format!("{}\n", t.plan_text())));
    out
}

/// Ordered operation phrases used by [`toy_plans`].
const TOY_OPS: [&str; 12] = [
    "add three",
    "add five",
    "subtract two",
    "double",
    "halve",
    "square",
    "negate",
    "reverse the digits",
    "take the digit sum",
    "keep the last digit",
    "multiply by seven",
    "divide by four",
];

/// `count` distinct two-operation plans such as `"add three then double."`,
/// drawn from ordered pairs so that word order matters.
pub fn toy_plans(count: usize, seed: u64) -> Result<Vec<String>> {
    let mut all = Vec::new();
    for a in TOY_OPS {
        for b in TOY_OPS {
            if a != b {
                all.push(format!("{a} then {b}."));
            }
        }
    }
    if count > all.len() {
        return Err(Error::Corpus(format!("at most {} toy plans exist, {count} requested", all.len())));
    }
    let mut rng = Rng::derived(seed, "toy-plans");
    rng.shuffle(&mut all);
    all.truncate(count);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_example() {
        let proc_ = Procedure { name: "P-17".into(), templates: vec![Template::Double, Template::Add3] };
        let s = make_sample("x".into(), Family::Arith, &proc_, &State::Int(5));
        assert_eq!(s.steps, vec!["Step 1: double: 2 × 5 = 10", "Step 2: add3: 10 + 3 = 13"]);
        assert_eq!(s.answer, "13");
        assert_eq!(s.question, "Start with 5. Apply procedure P-17. What is the final value?");
        s.validate().unwrap();
    }

    #[test]
    fn vocabulary_texts_cover_every_sample() {
        for family in [Family::Arith, Family::Strings] {
            let texts = vocabulary_texts(family);
            let tok = crate::tokenizer::Tokenizer::build(texts.iter().map(String::as_str));
            let cfg = SyntheticConfig { family, count: 400, split: Split::All, ..SyntheticConfig::default() };
            for s in generate(&cfg).unwrap().0 {
                assert!(tok.covers(&s.question), "{}", s.question);
                for t in s.steps.iter().chain(&s.plans) {
                    assert!(tok.covers(&format!("{t}\n")), "{t}");
                }
            }
        }
    }

    #[test]
    fn wraparound_and_modular_steps() {
        assert_eq!(Template::Double.apply(&State::Int(60)).1, "2 × 60 = 120 mod 100 = 20");
        assert_eq!(Template::NegateMod97.apply(&State::Int(0)).1, "-0 mod 97 = 0");
        assert_eq!(Template::NegateMod97.apply(&State::Int(98)).0, State::Int(96));
        assert_eq!(Template::AddDigitSum.apply(&State::Int(99)).1, "99 + 18 = 117 mod 100 = 17");
        assert_eq!(Template::HalveFloor.apply(&State::Int(7)).0, State::Int(3));
    }

    #[test]
    fn string_steps() {
        let s = State::Letters(vec!['a', 'b', 'c']);
        assert_eq!(Template::Reverse.apply(&s).1, "`a b c` → `c b a`");
        assert_eq!(Template::RotateLeft1.apply(&s).0.answer(), "b c a");
        assert_eq!(Template::DuplicateFirst.apply(&s).0.answer(), "a a b c");
        let one = State::Letters(vec!['d']);
        assert_eq!(Template::DropLast.apply(&one).0, one);
    }

    #[test]
    fn manifest_reuses_every_template() {
        for (family, n) in [(Family::Arith, 20), (Family::Arith, 3), (Family::Strings, 6), (Family::Strings, 2)] {
            let m = ProcedureManifest::generate(family, n, 4).unwrap();
            assert_eq!(m.procedures.len(), n);
            let templates: &[Template] = if family == Family::Arith { &ARITH_TEMPLATES } else { &STRING_TEMPLATES };
            for t in templates {
                assert!(m.procedures.iter().filter(|p| p.templates.contains(t)).count() >= 2, "{family} {n}");
            }
            let names: BTreeSet<_> = m.procedures.iter().map(|p| &p.name).collect();
            let seqs: BTreeSet<_> = m.procedures.iter().map(|p| &p.templates).collect();
            assert_eq!(names.len(), n);
            assert_eq!(seqs.len(), n);
            assert!(m.procedures.iter().all(|p| (2..=4).contains(&p.templates.len())));
        }
        assert!(ProcedureManifest::generate(Family::Arith, 2, 0).is_err());
    }

    #[test]
    fn splits_are_disjoint() {
        let base = SyntheticConfig { count: 400, ..Default::default() };
        let (train, m1) = generate(&base).unwrap();
        let (test, m2) = generate(&SyntheticConfig { split: Split::Test, ..base.clone() }).unwrap();
        assert_eq!(m1, m2);
        let train_q: BTreeSet<_> = train.iter().map(|s| &s.question).collect();
        assert!(test.iter().all(|s| !train_q.contains(&s.question)));
    }

    #[test]
    fn distinct_quota_is_enforced() {
        let cfg = SyntheticConfig { count: 20 * 100, distinct: true, split: Split::Test, ..Default::default() };
        assert!(generate(&cfg).is_err());
        let ok = SyntheticConfig { count: 40, distinct: true, split: Split::Test, ..Default::default() };
        let (s, _) = generate(&ok).unwrap();
        let qs: BTreeSet<_> = s.iter().map(|s| &s.question).collect();
        assert_eq!(qs.len(), 40);
    }

    #[test]
    fn toy_plans_are_distinct() {
        let plans = toy_plans(64, 1).unwrap();
        assert_eq!(plans.iter().collect::<BTreeSet<_>>().len(), 64);
        assert!(toy_plans(1000, 1).is_err());
    }

    proptest! {
        #[test]
        fn generation_is_pure(seed in 0u64..1000, count in 1usize..60) {
            let cfg = SyntheticConfig { count, seed, family: Family::Strings, procedures: 4, ..Default::default() };
            prop_assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        }

        #[test]
        fn samples_are_well_formed(seed in 0u64..200) {
            let cfg = SyntheticConfig { count: 30, seed, ..Default::default() };
            let (samples, manifest) = generate(&cfg).unwrap();
            for s in &samples {
                s.validate().unwrap();
                let p = manifest.get(&s.procedure_id).unwrap();
                prop_assert_eq!(s.n(), p.templates.len());
            }
        }
    }
}
