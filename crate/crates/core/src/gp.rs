//! Stack-based genetic programming: linear postfix programs over the
//! terminal vector, protected operators, mutation and two-point crossover,
//! Pareto tournament selection on (error, complexity), and the two-phase
//! evolution loop (mutation-only warm start, then the main search).

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::aggd::FeatureVector;
use crate::error::{Error, Result};
use crate::eval::srocc;

pub const PDIV_THRESHOLD: f64 = 1e-9;
const CONSTANT_RANGE: f64 = 2.0;
const CONSTANT_JITTER_SD: f64 = 0.1;
const CROSSOVER_RETRIES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Operator {
    Add,
    Sub,
    Mul,
    PDiv,
    PSqrt,
    PLog,
    PExp,
}

impl Operator {
    pub fn arity(self) -> usize {
        match self {
            Operator::Add | Operator::Sub | Operator::Mul | Operator::PDiv => 2,
            Operator::PSqrt | Operator::PLog | Operator::PExp => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Operator::Add => "add",
            Operator::Sub => "sub",
            Operator::Mul => "mul",
            Operator::PDiv => "pdiv",
            Operator::PSqrt => "psqrt",
            Operator::PLog => "plog",
            Operator::PExp => "pexp",
        }
    }

    pub fn from_name(name: &str) -> Option<Operator> {
        Some(match name {
            "add" => Operator::Add,
            "sub" => Operator::Sub,
            "mul" => Operator::Mul,
            "pdiv" => Operator::PDiv,
            "psqrt" => Operator::PSqrt,
            "plog" => Operator::PLog,
            "pexp" => Operator::PExp,
            _ => return None,
        })
    }
}

/// Which primitives evolution may draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum OperatorSet {
    /// Arithmetic only: add, sub, mul, pdiv.
    Strict,
    /// Default: arithmetic plus protected square root.
    Extended,
    /// Ablation variant: extended plus protected log and exp.
    NonLinear,
}

impl OperatorSet {
    pub fn operators(self) -> &'static [Operator] {
        match self {
            OperatorSet::Strict => &[Operator::Add, Operator::Sub, Operator::Mul, Operator::PDiv],
            OperatorSet::Extended => &[
                Operator::Add,
                Operator::Sub,
                Operator::Mul,
                Operator::PDiv,
                Operator::PSqrt,
            ],
            OperatorSet::NonLinear => &[
                Operator::Add,
                Operator::Sub,
                Operator::Mul,
                Operator::PDiv,
                Operator::PSqrt,
                Operator::PLog,
                Operator::PExp,
            ],
        }
    }

    pub fn has_unary(self) -> bool {
        self.operators().iter().any(|o| o.arity() == 1)
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "strict" => Ok(OperatorSet::Strict),
            "extended" => Ok(OperatorSet::Extended),
            "nonlinear" => Ok(OperatorSet::NonLinear),
            other => Err(Error::Config(format!("unknown operator set: {}", other))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OperatorSet::Strict => "strict",
            OperatorSet::Extended => "extended",
            OperatorSet::NonLinear => "nonlinear",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FitnessKind {
    Spearman,
    Pearson,
}

impl FitnessKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "spearman" => Ok(FitnessKind::Spearman),
            "pearson" => Ok(FitnessKind::Pearson),
            other => Err(Error::Config(format!("unknown fitness kind: {}", other))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FitnessKind::Spearman => "spearman",
            FitnessKind::Pearson => "pearson",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Token {
    Terminal(usize),
    Constant(f64),
    Op(Operator),
}

impl Token {
    fn depth_delta(self) -> isize {
        match self {
            Token::Terminal(_) | Token::Constant(_) => 1,
            Token::Op(op) => 1 - op.arity() as isize,
        }
    }
}

/// A linear postfix program. Construction enforces stack validity: the
/// simulated stack never underflows and ends with exactly one value.
#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    tokens: Vec<Token>,
}

/// Stack simulator; true iff the token sequence evaluates to one value.
pub fn is_stack_valid(tokens: &[Token], terminal_count: usize) -> bool {
    if tokens.is_empty() {
        return false;
    }
    let mut depth: isize = 0;
    for &t in tokens {
        if let Token::Terminal(i) = t {
            if i >= terminal_count {
                return false;
            }
        }
        if let Token::Op(op) = t {
            if depth < op.arity() as isize {
                return false;
            }
        }
        if let Token::Constant(c) = t {
            if !c.is_finite() {
                return false;
            }
        }
        depth += t.depth_delta();
    }
    depth == 1
}

impl Program {
    pub fn new(tokens: Vec<Token>, terminal_count: usize, max_len: usize) -> Result<Self> {
        if tokens.len() > max_len {
            return Err(Error::Logic(format!(
                "program length {} exceeds max {}",
                tokens.len(),
                max_len
            )));
        }
        if !is_stack_valid(&tokens, terminal_count) {
            return Err(Error::Logic("program is not stack-valid".into()));
        }
        Ok(Program { tokens })
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn complexity(&self) -> usize {
        self.tokens.len()
    }
}

/// Protected postfix evaluation. Division by a near-zero denominator yields
/// 1, sqrt/log act on magnitudes, and any non-finite intermediate collapses
/// to 0 so every program evaluates to a finite value.
pub fn eval_program(program: &Program, x: &FeatureVector) -> f64 {
    let mut stack: Vec<f64> = Vec::with_capacity(program.tokens.len());
    for &t in &program.tokens {
        let v = match t {
            Token::Terminal(i) => x.get(i),
            Token::Constant(c) => c,
            Token::Op(op) => {
                if op.arity() == 2 {
                    let b = stack.pop().expect("validated program");
                    let a = stack.pop().expect("validated program");
                    match op {
                        Operator::Add => a + b,
                        Operator::Sub => a - b,
                        Operator::Mul => a * b,
                        Operator::PDiv => {
                            if b.abs() > PDIV_THRESHOLD {
                                a / b
                            } else {
                                1.0
                            }
                        }
                        _ => unreachable!(),
                    }
                } else {
                    let a = stack.pop().expect("validated program");
                    match op {
                        Operator::PSqrt => a.abs().sqrt(),
                        Operator::PLog => (a.abs().max(PDIV_THRESHOLD)).ln(),
                        Operator::PExp => a.clamp(-700.0, 700.0).exp(),
                        _ => unreachable!(),
                    }
                }
            }
        };
        stack.push(if v.is_finite() { v } else { 0.0 });
    }
    stack.pop().expect("validated program")
}

/// Accuracy/complexity pair driving Pareto selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitnessRecord {
    /// 1 - |correlation| on training targets, in [0, 2]; degenerate
    /// constant predictions score 1 by convention.
    pub error: f64,
    pub complexity: usize,
}

impl FitnessRecord {
    /// Strict Pareto dominance on (error, complexity).
    pub fn dominates(&self, other: &FitnessRecord) -> bool {
        (self.error <= other.error && self.complexity <= other.complexity)
            && (self.error < other.error || self.complexity < other.complexity)
    }
}

/// Evolution hyper-parameters. The defaults mirror the two-phase protocol:
/// a 10-generation mutation-only sprint at population 500 seeding a main
/// search of 600 individuals for 400 generations, 80/20 crossover/mutation,
/// size-10 tournaments with size-5 Pareto rule, 15 elites.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvolutionConfig {
    pub warm_pop: usize,
    pub warm_gens: usize,
    pub main_pop: usize,
    pub main_gens: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    pub tournament_size: usize,
    pub pareto_sample: usize,
    pub elitism: usize,
    pub max_len: usize,
    pub operator_set: OperatorSet,
    pub fitness_kind: FitnessKind,
    /// Skip the warm-start sprint entirely (ablation).
    pub cold_start: bool,
    pub seed: u64,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        EvolutionConfig {
            warm_pop: 500,
            warm_gens: 10,
            main_pop: 600,
            main_gens: 400,
            crossover_rate: 0.80,
            mutation_rate: 0.20,
            tournament_size: 10,
            pareto_sample: 5,
            elitism: 15,
            max_len: 64,
            operator_set: OperatorSet::Extended,
            fitness_kind: FitnessKind::Spearman,
            cold_start: false,
            seed: 0,
        }
    }
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<()> {
        if (self.crossover_rate + self.mutation_rate - 1.0).abs() > 1e-9 {
            return Err(Error::Config(
                "crossover_rate and mutation_rate must sum to 1".into(),
            ));
        }
        for (name, v) in [
            ("warm_pop", self.warm_pop),
            ("warm_gens", self.warm_gens),
            ("main_pop", self.main_pop),
            ("main_gens", self.main_gens),
            ("tournament_size", self.tournament_size),
            ("pareto_sample", self.pareto_sample),
            ("elitism", self.elitism),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{} must be positive", name)));
            }
        }
        if self.elitism >= self.main_pop {
            return Err(Error::Config("elitism must be below main_pop".into()));
        }
        Ok(())
    }
}

fn random_push_token(terminal_count: usize, rng: &mut impl Rng) -> Token {
    if rng.gen::<f64>() < 0.2 {
        Token::Constant(rng.gen_range(-CONSTANT_RANGE..CONSTANT_RANGE))
    } else {
        Token::Terminal(rng.gen_range(0..terminal_count))
    }
}

/// Generates a stack-valid program of uniform random length in
/// [1, max_len/2]. With a purely binary operator set the length parity is
/// forced odd (pushes must exceed binary ops by exactly one).
pub fn random_program(
    terminal_count: usize,
    operator_set: OperatorSet,
    max_len: usize,
    rng: &mut impl Rng,
) -> Program {
    let has_unary = operator_set.has_unary();
    let cap = (max_len / 2).max(1);
    let mut len = rng.gen_range(1..=cap);
    if !has_unary && len % 2 == 0 {
        len = if len > 1 { len - 1 } else { len + 1 };
    }
    let binary_ops: Vec<Operator> = operator_set
        .operators()
        .iter()
        .copied()
        .filter(|o| o.arity() == 2)
        .collect();
    let unary_ops: Vec<Operator> = operator_set
        .operators()
        .iter()
        .copied()
        .filter(|o| o.arity() == 1)
        .collect();

    let mut tokens = Vec::with_capacity(len);
    let mut depth: isize = 0;
    for pos in 0..len {
        let remaining_after = (len - pos - 1) as isize;
        // A category is feasible when the sequence can still close to
        // depth 1 within the remaining slots.
        let closable = |d: isize| -> bool {
            if d < 1 || d - 1 > remaining_after {
                return false;
            }
            if !has_unary && (d - 1) % 2 != remaining_after % 2 {
                return false;
            }
            true
        };
        let mut choices: Vec<u8> = Vec::with_capacity(3);
        if closable(depth + 1) {
            choices.push(0); // push
        }
        if depth >= 2 && !binary_ops.is_empty() && closable(depth - 1) {
            choices.push(1);
        }
        if depth >= 1 && !unary_ops.is_empty() && closable(depth) {
            choices.push(2);
        }
        let choice = *choices.choose(rng).expect("feasible token category");
        let token = match choice {
            0 => random_push_token(terminal_count, rng),
            1 => Token::Op(*binary_ops.choose(rng).unwrap()),
            _ => Token::Op(*unary_ops.choose(rng).unwrap()),
        };
        depth += token.depth_delta();
        tokens.push(token);
    }
    debug_assert!(is_stack_valid(&tokens, terminal_count));
    Program { tokens }
}

/// Splices a contiguous span of `b` into `a` at explicit cut points.
/// Exposed for the self-crossover identity check.
pub fn crossover_spans(
    a: &Program,
    b: &Program,
    a_start: usize,
    a_end: usize,
    b_start: usize,
    b_end: usize,
) -> Vec<Token> {
    let mut child = Vec::with_capacity(a_start + (b_end - b_start) + (a.tokens.len() - a_end));
    child.extend_from_slice(&a.tokens[..a_start]);
    child.extend_from_slice(&b.tokens[b_start..b_end]);
    child.extend_from_slice(&a.tokens[a_end..]);
    child
}

/// Two-point crossover: a span of `a` is replaced by a span of `b`,
/// retried until stack-valid and within max_len; falls back to a clone
/// of `a` after the retry budget.
pub fn two_point_crossover(
    a: &Program,
    b: &Program,
    terminal_count: usize,
    max_len: usize,
    rng: &mut impl Rng,
) -> Program {
    for _ in 0..CROSSOVER_RETRIES {
        let mut i1 = rng.gen_range(0..=a.tokens.len());
        let mut j1 = rng.gen_range(0..=a.tokens.len());
        if i1 > j1 {
            std::mem::swap(&mut i1, &mut j1);
        }
        let mut i2 = rng.gen_range(0..=b.tokens.len());
        let mut j2 = rng.gen_range(0..=b.tokens.len());
        if i2 > j2 {
            std::mem::swap(&mut i2, &mut j2);
        }
        let child = crossover_spans(a, b, i1, j1, i2, j2);
        if !child.is_empty() && child.len() <= max_len && is_stack_valid(&child, terminal_count) {
            return Program { tokens: child };
        }
    }
    a.clone()
}

#[derive(Debug, Clone, Copy)]
enum MutationKind {
    Point,
    Push,
    Trim,
    Insert,
}

fn point_mutation(
    p: &Program,
    terminal_count: usize,
    operator_set: OperatorSet,
    rng: &mut impl Rng,
) -> Program {
    let mut tokens = p.tokens.clone();
    let idx = rng.gen_range(0..tokens.len());
    tokens[idx] = match tokens[idx] {
        Token::Constant(c) if rng.gen::<bool>() => {
            // Gaussian jitter on ephemeral constants
            let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
            let u2: f64 = rng.gen();
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            Token::Constant(c + CONSTANT_JITTER_SD * z)
        }
        Token::Terminal(_) | Token::Constant(_) => random_push_token(terminal_count, rng),
        Token::Op(op) => {
            let same_arity: Vec<Operator> = operator_set
                .operators()
                .iter()
                .copied()
                .filter(|o| o.arity() == op.arity())
                .collect();
            Token::Op(*same_arity.choose(rng).unwrap_or(&op))
        }
    };
    debug_assert!(is_stack_valid(&tokens, terminal_count));
    Program { tokens }
}

/// One of four structural mutations chosen uniformly: point replacement,
/// push (insert a value + binary-op pair), trim (remove a span), or random
/// terminal/function insertion. Invalid or oversized candidates retry and
/// finally fall back to point replacement.
pub fn mutate(
    p: &Program,
    terminal_count: usize,
    operator_set: OperatorSet,
    max_len: usize,
    rng: &mut impl Rng,
) -> Program {
    let kind = match rng.gen_range(0..4u8) {
        0 => MutationKind::Point,
        1 => MutationKind::Push,
        2 => MutationKind::Trim,
        _ => MutationKind::Insert,
    };
    match kind {
        MutationKind::Point => point_mutation(p, terminal_count, operator_set, rng),
        MutationKind::Push => {
            let binary_ops: Vec<Operator> = operator_set
                .operators()
                .iter()
                .copied()
                .filter(|o| o.arity() == 2)
                .collect();
            if p.tokens.len() + 2 > max_len || binary_ops.is_empty() {
                return point_mutation(p, terminal_count, operator_set, rng);
            }
            // inserting [push, binary-op] after any prefix with depth >= 1
            // keeps the net depth unchanged
            let mut tokens = p.tokens.clone();
            let pos = rng.gen_range(1..=tokens.len());
            tokens.insert(pos, Token::Op(*binary_ops.choose(rng).unwrap()));
            tokens.insert(pos, random_push_token(terminal_count, rng));
            if is_stack_valid(&tokens, terminal_count) {
                Program { tokens }
            } else {
                point_mutation(p, terminal_count, operator_set, rng)
            }
        }
        MutationKind::Trim => {
            if p.tokens.len() <= 1 {
                return point_mutation(p, terminal_count, operator_set, rng);
            }
            for _ in 0..CROSSOVER_RETRIES {
                let mut i = rng.gen_range(0..p.tokens.len());
                let mut j = rng.gen_range(0..p.tokens.len());
                if i > j {
                    std::mem::swap(&mut i, &mut j);
                }
                let mut tokens = p.tokens.clone();
                tokens.drain(i..=j);
                if !tokens.is_empty() && is_stack_valid(&tokens, terminal_count) {
                    return Program { tokens };
                }
            }
            point_mutation(p, terminal_count, operator_set, rng)
        }
        MutationKind::Insert => {
            if p.tokens.len() >= max_len {
                return point_mutation(p, terminal_count, operator_set, rng);
            }
            for _ in 0..CROSSOVER_RETRIES {
                let mut tokens = p.tokens.clone();
                let pos = rng.gen_range(0..=tokens.len());
                let token = if rng.gen::<bool>() {
                    random_push_token(terminal_count, rng)
                } else {
                    Token::Op(*operator_set.operators().choose(rng).unwrap())
                };
                tokens.insert(pos, token);
                if is_stack_valid(&tokens, terminal_count) {
                    return Program { tokens };
                }
            }
            point_mutation(p, terminal_count, operator_set, rng)
        }
    }
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        None
    } else {
        Some(cov / (va * vb).sqrt())
    }
}

/// Correlation fitness: error = 1 - |rho| with rho Spearman (default) or
/// Pearson. Constant predictions score error 1.
pub fn fitness(
    program: &Program,
    xs: &[FeatureVector],
    ys: &[f64],
    kind: FitnessKind,
) -> Result<FitnessRecord> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} feature vectors vs {} targets",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 3 {
        return Err(Error::DimensionMismatch(
            "fitness needs at least 3 samples".into(),
        ));
    }
    let preds: Vec<f64> = xs.iter().map(|x| eval_program(program, x)).collect();
    let rho = match kind {
        FitnessKind::Spearman => {
            let s = srocc(&preds, ys)?;
            if s.degenerate {
                None
            } else {
                Some(s.rho)
            }
        }
        FitnessKind::Pearson => pearson(&preds, ys),
    };
    let error = match rho {
        Some(r) => 1.0 - r.abs(),
        None => 1.0,
    };
    Ok(FitnessRecord {
        error,
        complexity: program.complexity(),
    })
}

/// Non-dominated subset of a tournament sample; never empty.
pub fn pareto_winners(records: &[FitnessRecord]) -> Vec<usize> {
    (0..records.len())
        .filter(|&i| {
            !records
                .iter()
                .enumerate()
                .any(|(j, r)| j != i && r.dominates(&records[i]))
        })
        .collect()
}

/// One selection event: sample `tournament_size` distinct candidates, apply
/// the size-`pareto_sample` Pareto rule to the best-by-error among them,
/// and pick uniformly among the non-dominated winners.
fn select_parent(fits: &[FitnessRecord], cfg: &EvolutionConfig, rng: &mut impl Rng) -> usize {
    let n = fits.len();
    let k = cfg.tournament_size.min(n);
    let mut sample = rand::seq::index::sample(rng, n, k).into_vec();
    sample.sort_by(|&a, &b| {
        fits[a]
            .error
            .partial_cmp(&fits[b].error)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    sample.truncate(cfg.pareto_sample.min(sample.len()));
    let group: Vec<FitnessRecord> = sample.iter().map(|&i| fits[i]).collect();
    let winners = pareto_winners(&group);
    sample[*winners.choose(rng).expect("non-empty winner set")]
}

fn evaluate_population(
    pop: &[Program],
    xs: &[FeatureVector],
    ys: &[f64],
    kind: FitnessKind,
) -> Result<Vec<FitnessRecord>> {
    pop.par_iter().map(|p| fitness(p, xs, ys, kind)).collect()
}

fn sorted_indices_by_error(fits: &[FitnessRecord]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..fits.len()).collect();
    idx.sort_by(|&a, &b| {
        fits[a]
            .error
            .partial_cmp(&fits[b].error)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(fits[a].complexity.cmp(&fits[b].complexity))
    });
    idx
}

/// Mutation-only sprint: 10 generations over `warm_pop` individuals,
/// returned as the initial seed for the main phase.
pub fn warm_start(
    cfg: &EvolutionConfig,
    terminal_count: usize,
    xs: &[FeatureVector],
    ys: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Program>> {
    cfg.validate()?;
    let mut pop: Vec<Program> = (0..cfg.warm_pop)
        .map(|_| random_program(terminal_count, cfg.operator_set, cfg.max_len, rng))
        .collect();
    for _ in 0..cfg.warm_gens {
        let fits = evaluate_population(&pop, xs, ys, cfg.fitness_kind)?;
        let order = sorted_indices_by_error(&fits);
        let mut next: Vec<Program> = order
            .iter()
            .take(cfg.elitism.min(cfg.warm_pop))
            .map(|&i| pop[i].clone())
            .collect();
        while next.len() < cfg.warm_pop {
            let parent = select_parent(&fits, cfg, rng);
            next.push(mutate(
                &pop[parent],
                terminal_count,
                cfg.operator_set,
                cfg.max_len,
                rng,
            ));
        }
        pop = next;
    }
    Ok(pop)
}

/// Final non-dominated front over (training error, complexity).
#[derive(Debug, Clone)]
pub struct ParetoFront {
    pub members: Vec<(Program, FitnessRecord)>,
}

/// Main evolutionary loop. Seeds from `warm` (topped up or truncated to
/// `main_pop`), runs `main_gens` generations of 80/20 crossover/mutation
/// with Pareto tournaments and elitism, and returns the final front plus
/// the per-generation best-error history.
pub fn evolve(
    cfg: &EvolutionConfig,
    terminal_count: usize,
    xs: &[FeatureVector],
    ys: &[f64],
    warm: Vec<Program>,
    rng: &mut ChaCha8Rng,
) -> Result<(ParetoFront, Vec<f64>)> {
    cfg.validate()?;
    let mut pop = warm;
    pop.truncate(cfg.main_pop);
    while pop.len() < cfg.main_pop {
        pop.push(random_program(
            terminal_count,
            cfg.operator_set,
            cfg.max_len,
            rng,
        ));
    }

    let mut history = Vec::with_capacity(cfg.main_gens);
    let mut fits = evaluate_population(&pop, xs, ys, cfg.fitness_kind)?;
    for _ in 0..cfg.main_gens {
        let order = sorted_indices_by_error(&fits);
        history.push(fits[order[0]].error);

        let mut next: Vec<Program> = order
            .iter()
            .take(cfg.elitism)
            .map(|&i| pop[i].clone())
            .collect();
        while next.len() < cfg.main_pop {
            let child = if rng.gen::<f64>() < cfg.crossover_rate {
                let a = select_parent(&fits, cfg, rng);
                let b = select_parent(&fits, cfg, rng);
                two_point_crossover(&pop[a], &pop[b], terminal_count, cfg.max_len, rng)
            } else {
                let a = select_parent(&fits, cfg, rng);
                mutate(&pop[a], terminal_count, cfg.operator_set, cfg.max_len, rng)
            };
            next.push(child);
        }
        pop = next;
        fits = evaluate_population(&pop, xs, ys, cfg.fitness_kind)?;
    }

    let winners = pareto_winners(&fits);
    let members = winners
        .into_iter()
        .map(|i| (pop[i].clone(), fits[i]))
        .collect();
    Ok((ParetoFront { members }, history))
}

/// Runs the full two-phase protocol (or cold start) for one seed.
pub fn run_evolution(
    cfg: &EvolutionConfig,
    terminal_count: usize,
    xs: &[FeatureVector],
    ys: &[f64],
) -> Result<(ParetoFront, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let warm = if cfg.cold_start {
        Vec::new()
    } else {
        warm_start(cfg, terminal_count, xs, ys, &mut rng)?
    };
    evolve(cfg, terminal_count, xs, ys, warm, &mut rng)
}

/// Front member with the highest |Spearman| on validation; ties break to
/// lower complexity, then earlier front order.
pub fn select_final(
    front: &ParetoFront,
    xs_val: &[FeatureVector],
    ys_val: &[f64],
) -> Result<Program> {
    if front.members.is_empty() {
        return Err(Error::Logic("empty Pareto front".into()));
    }
    let mut best: Option<(f64, usize, usize)> = None; // (|rho|, complexity, index)
    for (i, (program, _)) in front.members.iter().enumerate() {
        let preds: Vec<f64> = xs_val.iter().map(|x| eval_program(program, x)).collect();
        let rho = srocc(&preds, ys_val)?.rho.abs();
        let candidate = (rho, program.complexity(), i);
        best = Some(match best {
            None => candidate,
            Some(cur) => {
                if candidate.0 > cur.0 + 1e-15
                    || ((candidate.0 - cur.0).abs() <= 1e-15 && candidate.1 < cur.1)
                {
                    candidate
                } else {
                    cur
                }
            }
        });
    }
    Ok(front.members[best.unwrap().2].0.clone())
}

/// Fully parenthesized infix rendering with named terminals; protected
/// operators print as named functions.
pub fn to_expression_string(program: &Program, names: &[String]) -> String {
    let mut stack: Vec<String> = Vec::new();
    for &t in &program.tokens {
        match t {
            Token::Terminal(i) => stack.push(
                names
                    .get(i)
                    .cloned()
                    .unwrap_or_else(|| format!("x{}", i)),
            ),
            Token::Constant(c) => stack.push(format!("{}", c)),
            Token::Op(op) => {
                if op.arity() == 2 {
                    let b = stack.pop().expect("validated program");
                    let a = stack.pop().expect("validated program");
                    let s = match op {
                        Operator::Add => format!("({} + {})", a, b),
                        Operator::Sub => format!("({} - {})", a, b),
                        Operator::Mul => format!("({} * {})", a, b),
                        Operator::PDiv => format!("pdiv({}, {})", a, b),
                        _ => unreachable!(),
                    };
                    stack.push(s);
                } else {
                    let a = stack.pop().expect("validated program");
                    stack.push(format!("{}({})", op.name(), a));
                }
            }
        }
    }
    stack.pop().expect("validated program")
}

/// Serializes a model to the line-oriented text format: a commented header
/// (config hash, seed, pretty expression) followed by one token per line.
pub fn serialize_model(
    program: &Program,
    names: &[String],
    config_hash: &str,
    seed: u64,
) -> String {
    let mut out = String::new();
    out.push_str("# evoiqa model v1\n");
    out.push_str(&format!("# config-hash: {}\n", config_hash));
    out.push_str(&format!("# seed: {}\n", seed));
    out.push_str(&format!("# expr: {}\n", to_expression_string(program, names)));
    for &t in program.tokens() {
        match t {
            Token::Terminal(i) => out.push_str(&format!("T {}\n", i)),
            Token::Constant(c) => out.push_str(&format!("C {}\n", c)),
            Token::Op(op) => out.push_str(&format!("O {}\n", op.name())),
        }
    }
    out
}

/// Parses the model text format. Comment lines (#) are ignored.
pub fn deserialize_model(text: &str, terminal_count: usize, max_len: usize) -> Result<Program> {
    let mut tokens = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |reason: &str| Error::Parse {
            location: format!("model line {}", lineno + 1),
            reason: reason.to_string(),
        };
        let (kind, rest) = line
            .split_once(' ')
            .ok_or_else(|| parse_err("expected '<kind> <value>'"))?;
        let token = match kind {
            "T" => Token::Terminal(
                rest.parse::<usize>()
                    .map_err(|_| parse_err("bad terminal index"))?,
            ),
            "C" => Token::Constant(
                rest.parse::<f64>()
                    .map_err(|_| parse_err("bad constant"))?,
            ),
            "O" => Token::Op(
                Operator::from_name(rest).ok_or_else(|| parse_err("unknown operator"))?,
            ),
            _ => return Err(parse_err("unknown token kind")),
        };
        tokens.push(token);
    }
    let cap = max_len.max(tokens_len_cap(&tokens));
    Program::new(tokens, terminal_count, cap)
}

fn tokens_len_cap(tokens: &[Token]) -> usize {
    tokens.len()
}
