//! Synthetic single-token tasks over a closed symbol vocabulary and the
//! `x → y, …` prompt layout.
//!
//! Token ids: `0..26` are the lower symbols (rendered `a`..`z`), `26..52` the
//! paired upper symbols (`A`..`Z`), then `→` and `,`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use crate::model::Token;
use crate::error::{Error, Result};
use crate::rng;

pub const ALPHABET: usize = 26;
pub const VOCAB_SIZE: usize = 2 * ALPHABET + 2;
pub const ARROW: Token = Token(2 * ALPHABET as u16);
pub const SEP: Token = Token(2 * ALPHABET as u16 + 1);
pub const LIST_LEN: usize = 3;

/// Seed offset of the evaluation-only bijection pool. Training bijections use
/// seeds below it.
pub const HELD_OUT_BIJECTION_BASE: u64 = 1_000_000;

/// Fixed 54-token vocabulary.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Vocab;

impl Vocab {
    pub fn size(self) -> usize {
        VOCAB_SIZE
    }

    pub fn lower(self, i: usize) -> Token {
        assert!(i < ALPHABET);
        Token(i as u16)
    }

    pub fn upper(self, i: usize) -> Token {
        assert!(i < ALPHABET);
        Token((ALPHABET + i) as u16)
    }

    pub fn is_lower(self, t: Token) -> bool {
        t.index() < ALPHABET
    }

    pub fn is_upper(self, t: Token) -> bool {
        (ALPHABET..2 * ALPHABET).contains(&t.index())
    }

    pub fn name(self, t: Token) -> String {
        let i = t.index();
        match i {
            _ if i < ALPHABET => char::from(b'a' + i as u8).to_string(),
            _ if i < 2 * ALPHABET => char::from(b'A' + (i - ALPHABET) as u8).to_string(),
            _ if t == ARROW => "→".into(),
            _ if t == SEP => ",".into(),
            _ => format!("<{i}>"),
        }
    }

    pub fn render(self, tokens: &[Token]) -> String {
        tokens.iter().map(|&t| self.name(t)).collect::<Vec<_>>().join(" ")
    }

    /// Inverse of [`Vocab::render`]: whitespace-separated token names.
    pub fn parse(self, text: &str) -> Result<Vec<Token>> {
        text.split_whitespace()
            .map(|w| {
                (0..VOCAB_SIZE as u16)
                    .map(Token)
                    .find(|&t| self.name(t) == w)
                    .ok_or_else(|| Error::Config(format!("unknown token {w:?}")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Algorithmic,
    Bijection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSpace {
    Lower,
    Upper,
    /// Lists of `LIST_LEN` distinct lower symbols.
    LowerList,
}

impl InputSpace {
    pub fn capacity(self) -> usize {
        match self {
            Self::Lower | Self::Upper => ALPHABET,
            Self::LowerList => ALPHABET * (ALPHABET - 1) * (ALPHABET - 2),
        }
    }

    pub fn contains(self, input: &[Token]) -> bool {
        let v = Vocab;
        match self {
            Self::Lower => input.len() == 1 && v.is_lower(input[0]),
            Self::Upper => input.len() == 1 && v.is_upper(input[0]),
            Self::LowerList => {
                input.len() == LIST_LEN
                    && input.iter().all(|&t| v.is_lower(t))
                    && (0..LIST_LEN).all(|i| !input[i + 1..].contains(&input[i]))
            }
        }
    }

    fn sample_one<R: Rng>(self, rng: &mut R) -> Vec<Token> {
        match self {
            Self::Lower => alloc::vec![Token(rng.random_range(0..ALPHABET as u16))],
            Self::Upper => {
                alloc::vec![Token(rng.random_range(ALPHABET as u16..2 * ALPHABET as u16))]
            }
            Self::LowerList => {
                let mut all: Vec<u16> = (0..ALPHABET as u16).collect();
                let (chosen, _) = all.partial_shuffle(rng, LIST_LEN);
                chosen.iter().map(|&i| Token(i)).collect()
            }
        }
    }

    /// `n` distinct inputs, none of which is in `exclude`.
    pub fn sample_distinct<R: Rng>(
        self,
        n: usize,
        exclude: &[&[Token]],
        rng: &mut R,
    ) -> Option<Vec<Vec<Token>>> {
        if n + exclude.len() > self.capacity() {
            return None;
        }
        match self {
            Self::Lower | Self::Upper => {
                let offset = if self == Self::Upper { ALPHABET } else { 0 };
                let mut pool: Vec<Token> = (0..ALPHABET)
                    .map(|i| Token((offset + i) as u16))
                    .filter(|t| !exclude.iter().any(|e| e == &[*t]))
                    .collect();
                if pool.len() < n {
                    return None;
                }
                let (chosen, _) = pool.partial_shuffle(rng, n);
                Some(chosen.iter().map(|&t| alloc::vec![t]).collect())
            }
            Self::LowerList => {
                let mut out: Vec<Vec<Token>> = Vec::with_capacity(n);
                while out.len() < n {
                    let cand = self.sample_one(rng);
                    if !out.contains(&cand) && !exclude.contains(&cand.as_slice()) {
                        out.push(cand);
                    }
                }
                Some(out)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskRule {
    NextSymbol,
    PrevSymbol,
    ListFirst,
    ListLast,
    ToUpper,
    ToLower,
    /// `perm[i]` is the image of lower symbol `i`.
    Bijection { perm: Vec<u8> },
}

/// A named deterministic map from task inputs to a single output token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub category: Category,
    pub rule: TaskRule,
}

impl TaskSpec {
    fn algorithmic(name: &str, rule: TaskRule) -> Self {
        Self {
            name: name.into(),
            category: Category::Algorithmic,
            rule,
        }
    }

    pub fn input_space(&self) -> InputSpace {
        match self.rule {
            TaskRule::ListFirst | TaskRule::ListLast => InputSpace::LowerList,
            TaskRule::ToLower => InputSpace::Upper,
            _ => InputSpace::Lower,
        }
    }

    pub fn apply(&self, input: &[Token]) -> Result<Token> {
        if !self.input_space().contains(input) {
            return Err(Error::Contract(format!(
                "{} is not a valid input for task {}",
                Vocab.render(input),
                self.name
            )));
        }
        let i = input[0].index();
        let n = ALPHABET;
        Ok(match &self.rule {
            TaskRule::NextSymbol => Token(((i + 1) % n) as u16),
            TaskRule::PrevSymbol => Token(((i + n - 1) % n) as u16),
            TaskRule::ListFirst => input[0],
            TaskRule::ListLast => input[LIST_LEN - 1],
            TaskRule::ToUpper => Token((i + n) as u16),
            TaskRule::ToLower => Token((i - n) as u16),
            TaskRule::Bijection { perm } => Token(u16::from(perm[i])),
        })
    }
}

/// The six algorithmic tasks.
pub fn builtin_tasks() -> Vec<TaskSpec> {
    alloc::vec![
        TaskSpec::algorithmic("next_symbol", TaskRule::NextSymbol),
        TaskSpec::algorithmic("prev_symbol", TaskRule::PrevSymbol),
        TaskSpec::algorithmic("list_first", TaskRule::ListFirst),
        TaskSpec::algorithmic("list_last", TaskRule::ListLast),
        TaskSpec::algorithmic("to_upper", TaskRule::ToUpper),
        TaskSpec::algorithmic("to_lower", TaskRule::ToLower),
    ]
}

/// Seeded permutation of the lower symbols, named `bijection:{seed}`.
pub fn random_bijection_task(seed: u64) -> TaskSpec {
    let mut perm: Vec<u8> = (0..ALPHABET as u8).collect();
    perm.shuffle(&mut rng::rng_from(seed, &[rng::label("bijection")]));
    TaskSpec {
        name: format!("bijection:{seed}"),
        category: Category::Bijection,
        rule: TaskRule::Bijection { perm },
    }
}

pub fn bijection_from_permutation(name: &str, perm: Vec<u8>) -> Result<TaskSpec> {
    let mut seen = [false; ALPHABET];
    if perm.len() != ALPHABET {
        return Err(Error::Contract(format!("permutation has {} entries", perm.len())));
    }
    for &p in &perm {
        let p = usize::from(p);
        if p >= ALPHABET || seen[p] {
            return Err(Error::Contract("not a permutation of the lower symbols".into()));
        }
        seen[p] = true;
    }
    Ok(TaskSpec {
        name: name.into(),
        category: Category::Bijection,
        rule: TaskRule::Bijection { perm },
    })
}

/// Training pool: `bijection:0 .. bijection:{n-1}`.
pub fn training_bijections(n: usize) -> Vec<TaskSpec> {
    (0..n as u64).map(random_bijection_task).collect()
}

/// Evaluation pool, disjoint from every training pool smaller than the base.
pub fn held_out_bijections(n: usize) -> Vec<TaskSpec> {
    (0..n as u64)
        .map(|i| random_bijection_task(HELD_OUT_BIJECTION_BASE + i))
        .collect()
}

/// Looks up `next_symbol`-style names and `bijection:{seed}`.
pub fn task_by_name(name: &str) -> Result<TaskSpec> {
    if let Some(seed) = name.strip_prefix("bijection:") {
        return seed
            .parse()
            .map(random_bijection_task)
            .map_err(|_| Error::UnknownTask(name.into()));
    }
    builtin_tasks()
        .into_iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::UnknownTask(name.into()))
}

/// Comma-separated task names. `builtin` expands to the six algorithmic
/// tasks and `held_out:N` to the first `N` evaluation bijections.
pub fn parse_task_list(list: &str) -> Result<Vec<TaskSpec>> {
    let mut out = Vec::new();
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if item == "builtin" {
            out.extend(builtin_tasks());
        } else if let Some(n) = item.strip_prefix("held_out:") {
            let n = n.parse().map_err(|_| Error::UnknownTask(item.into()))?;
            out.extend(held_out_bijections(n));
        } else if let Some(n) = item.strip_prefix("train_bijections:") {
            let n = n.parse().map_err(|_| Error::UnknownTask(item.into()))?;
            out.extend(training_bijections(n));
        } else {
            out.push(task_by_name(item)?);
        }
    }
    if out.is_empty() {
        return Err(Error::Config("empty task list".into()));
    }
    Ok(out)
}

/// One sampled `(S, x, y)` instance of a task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub task: String,
    pub demos: Vec<(Vec<Token>, Token)>,
    pub query: Vec<Token>,
    pub answer: Token,
    pub seed: u64,
}

impl Episode {
    pub fn demo_inputs(&self) -> Vec<&[Token]> {
        self.demos.iter().map(|(x, _)| x.as_slice()).collect()
    }

    pub fn prompt(&self) -> Vec<Token> {
        render_prompt(&self.demos, &self.query)
    }
}

/// `k` demonstrations with distinct inputs and a query distinct from all of them.
pub fn sample_episode(task: &TaskSpec, k: usize, seed: u64) -> Result<Episode> {
    if k == 0 {
        return Err(Error::Contract("episodes need at least one demonstration".into()));
    }
    let mut rng = rng::rng_from(seed, &[rng::label(&task.name), k as u64]);
    let space = task.input_space();
    let inputs = space
        .sample_distinct(k + 1, &[], &mut rng)
        .ok_or_else(|| Error::Capacity {
            task: task.name.clone(),
            needed: k + 1,
            available: space.capacity(),
        })?;
    let mut demos = Vec::with_capacity(k);
    for x in &inputs[..k] {
        demos.push((x.clone(), task.apply(x)?));
    }
    let query = inputs[k].clone();
    let answer = task.apply(&query)?;
    Ok(Episode {
        task: task.name.clone(),
        demos,
        query,
        answer,
        seed,
    })
}

/// List elements are separated by `,` inside the input span.
pub fn render_input(input: &[Token]) -> Vec<Token> {
    let mut out = Vec::with_capacity(2 * input.len());
    for (i, &t) in input.iter().enumerate() {
        if i > 0 {
            out.push(SEP);
        }
        out.push(t);
    }
    out
}

/// `[in₁ → out₁ , in₂ → out₂ , … , x →]`
pub fn render_prompt(demos: &[(Vec<Token>, Token)], query: &[Token]) -> Vec<Token> {
    let mut out = Vec::new();
    for (x, y) in demos {
        out.extend(render_input(x));
        out.push(ARROW);
        out.push(*y);
        out.push(SEP);
    }
    out.extend(render_input(query));
    out.push(ARROW);
    out
}

/// Positions holding `→`.
pub fn arrow_positions(tokens: &[Token]) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == ARROW)
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn l(i: u16) -> Token {
        Token(i)
    }

    fn u(i: u16) -> Token {
        Token(26 + i)
    }

    #[test]
    fn vocab_layout() {
        assert_eq!(Vocab.size(), 54);
        assert_eq!(ARROW, Token(52));
        assert_eq!(SEP, Token(53));
        assert_eq!(Vocab.render(&[l(0), ARROW, u(1), SEP]), "a → B ,");
    }

    #[test]
    fn builtin_examples() {
        let t = task_by_name("next_symbol").unwrap();
        assert_eq!(t.apply(&[l(0)]).unwrap(), l(1));
        assert_eq!(t.apply(&[l(25)]).unwrap(), l(0));
        let t = task_by_name("prev_symbol").unwrap();
        assert_eq!(t.apply(&[l(0)]).unwrap(), l(25));
        let t = task_by_name("list_first").unwrap();
        assert_eq!(t.apply(&[l(0), l(1), l(2)]).unwrap(), l(0));
        let t = task_by_name("list_last").unwrap();
        assert_eq!(t.apply(&[l(0), l(1), l(2)]).unwrap(), l(2));
        let t = task_by_name("to_upper").unwrap();
        assert_eq!(t.apply(&[l(4)]).unwrap(), u(4));
        let t = task_by_name("to_lower").unwrap();
        assert_eq!(t.apply(&[u(0)]).unwrap(), l(0));
        assert_eq!(builtin_tasks().len(), 6);
    }

    #[test]
    fn apply_rejects_foreign_inputs() {
        let t = task_by_name("to_lower").unwrap();
        assert!(t.apply(&[l(0)]).is_err());
        let t = task_by_name("list_last").unwrap();
        assert!(t.apply(&[l(0), l(0), l(2)]).is_err());
        assert!(t.apply(&[l(0)]).is_err());
    }

    #[test]
    fn identity_bijection() {
        let t = bijection_from_permutation("id", (0..26).collect()).unwrap();
        assert_eq!(t.apply(&[l(3)]).unwrap(), l(3));
        assert!(bijection_from_permutation("bad", alloc::vec![0; 26]).is_err());
    }

    #[test]
    fn bijections_are_permutations_and_seeded() {
        let a = random_bijection_task(0);
        let b = random_bijection_task(1);
        let mut image: Vec<Token> = (0..26).map(|i| a.apply(&[l(i)]).unwrap()).collect();
        image.sort();
        image.dedup();
        assert_eq!(image.len(), 26);
        assert!((0..26).any(|i| a.apply(&[l(i)]).unwrap() != b.apply(&[l(i)]).unwrap()));
        assert_eq!(random_bijection_task(0), a);
    }

    #[test]
    fn registry_parsing() {
        assert_eq!(task_by_name("bijection:17").unwrap().name, "bijection:17");
        assert!(matches!(task_by_name("nope"), Err(Error::UnknownTask(_))));
        assert_eq!(parse_task_list("builtin,bijection:3").unwrap().len(), 7);
        assert_eq!(parse_task_list("held_out:4").unwrap()[0].name, "bijection:1000000");
        assert!(parse_task_list(" , ").is_err());
    }

    #[test]
    fn episode_k1() {
        let t = task_by_name("next_symbol").unwrap();
        let e = sample_episode(&t, 1, 9).unwrap();
        assert_eq!(e.demos.len(), 1);
        assert_ne!(e.demos[0].0, e.query);
        assert_eq!(t.apply(&e.query).unwrap(), e.answer);
    }

    #[test]
    fn episode_capacity_error() {
        let t = task_by_name("to_upper").unwrap();
        assert!(sample_episode(&t, 25, 0).is_ok());
        assert!(matches!(sample_episode(&t, 26, 0), Err(Error::Capacity { .. })));
        assert!(sample_episode(&t, 0, 0).is_err());
    }

    #[test]
    fn render_single_demo() {
        let p = render_prompt(&[(alloc::vec![l(0)], l(1))], &[l(5)]);
        assert_eq!(p, alloc::vec![l(0), ARROW, l(1), SEP, l(5), ARROW]);
        assert_eq!(render_prompt(&[], &[l(5)]), alloc::vec![l(5), ARROW]);
    }

    #[test]
    fn render_lengths() {
        let t = task_by_name("list_first").unwrap();
        for k in 1..=6 {
            let e = sample_episode(&t, k, k as u64).unwrap();
            let p = e.prompt();
            // Each demonstration is input span, arrow, output, separator.
            assert_eq!(p.len(), k * (5 + 3) + 5 + 1);
            assert_eq!(arrow_positions(&p).len(), k + 1);
            assert_eq!(*arrow_positions(&p).last().unwrap(), p.len() - 1);
        }
    }
}
