//! Private query-plan generation.
//!
//! A plan for desired message θ is built in three stages:
//!
//! 1. Index assignment: a query tree over the N servers where every level-m
//!    vertex bundles m-sum queries, split into an M-partition (queries that
//!    carry a fresh desired-message symbol, built by side-information
//!    exploitation from the parent vertex) and an I-partition (queries over
//!    the other messages, built by message symmetry with indices copied from
//!    the M-partition).
//! 2. Sign assignment: +/- signs on query terms so that message dependencies
//!    turn into exact linear identities among query values (enabling the
//!    download compression in the `redundancy` module).
//! 3. Randomization: a private uniform permutation π of symbol positions and
//!    uniform signs σ, applied when the plan is serialized to the wire. The
//!    wire ordering is canonical and provably independent of θ.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlanError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("fresh-index allocator exhausted (requested more than {0})")]
    AllocatorExhausted(u64),
    #[error("no matching source query for message set {0:?}")]
    MissingSource(Vec<u16>),
}

/// One signed symbol reference inside a query: message `msg`, virtual symbol
/// index `idx` (pre-permutation), and the scheme sign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Term {
    pub msg: u16,
    pub idx: u64,
    pub sign: i8,
}

/// An m-sum query; terms are kept in lexicographic (message-index) order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub terms: Vec<Term>,
}

impl Query {
    fn singleton(msg: u16, idx: u64) -> Self {
        Query {
            terms: vec![Term { msg, idx, sign: 1 }],
        }
    }

    pub fn message_tuple(&self) -> Vec<u16> {
        self.terms.iter().map(|t| t.msg).collect()
    }

    /// 1-based position of message `msg` in this query, or 0 if absent.
    pub fn delta(&self, msg: u16) -> u32 {
        self.terms
            .iter()
            .position(|t| t.msg == msg)
            .map_or(0, |p| p as u32 + 1)
    }

    pub fn term_for(&self, msg: u16) -> Option<&Term> {
        self.terms.iter().find(|t| t.msg == msg)
    }
}

/// A query-tree vertex Q(n_m, ..., n_1): `chain[0]` is the owning server.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vertex {
    pub level: usize,
    pub chain: Vec<u16>,
    /// Queries containing the desired message (side-information exploitation).
    pub m_part: Vec<Query>,
    /// Queries avoiding the desired message (message symmetry).
    pub i_part: Vec<Query>,
}

/// Reference to a query inside a vertex, used to tie wire positions back to
/// the M/I partitions after the labels are suppressed for transmission.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryRef {
    M(usize),
    I(usize),
}

impl Vertex {
    pub fn query(&self, r: QueryRef) -> &Query {
        match r {
            QueryRef::M(i) => &self.m_part[i],
            QueryRef::I(i) => &self.i_part[i],
        }
    }

    /// All queries of the vertex sorted lexicographically by message tuple —
    /// the canonical transmission order.
    pub fn sorted_refs(&self) -> Vec<QueryRef> {
        let mut refs: Vec<QueryRef> = (0..self.m_part.len())
            .map(QueryRef::M)
            .chain((0..self.i_part.len()).map(QueryRef::I))
            .collect();
        refs.sort_by_key(|&r| self.query(r).message_tuple());
        refs
    }
}

/// The private permutation and signs. `pi[i-1]` is the storage position of
/// virtual index i; `sigma[i-1]` its private sign.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Randomizer {
    pub pi: Vec<u64>,
    pub sigma: Vec<i8>,
}

impl Randomizer {
    pub fn identity(l: u64) -> Self {
        Randomizer {
            pi: (1..=l).collect(),
            sigma: vec![1; l as usize],
        }
    }

    /// Uniform (π, σ) from a seed. Over F_2 signs carry no information, so σ
    /// is pinned to +1 there.
    pub fn sample(seed: u64, l: u64, p: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pi: Vec<u64> = (1..=l).collect();
        pi.shuffle(&mut rng);
        let sigma = if p == 2 {
            vec![1; l as usize]
        } else {
            (0..l).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect()
        };
        Randomizer { pi, sigma }
    }

    #[inline]
    pub fn position(&self, idx: u64) -> u64 {
        self.pi[(idx - 1) as usize]
    }

    #[inline]
    pub fn sign(&self, idx: u64) -> i8 {
        self.sigma[(idx - 1) as usize]
    }
}

/// A query as the server sees it: storage positions and composite signs.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WireQuery {
    pub terms: Vec<(u16, u64, i8)>,
}

/// Test hook for the statistical privacy audit's negative control: a build
/// that leaks the desired index through one wire sign.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    None,
    /// Forces the first wire term's sign positive whenever θ ≠ 1.
    LeakSign,
}

/// Complete per-server query plan for one desired message index.
#[derive(Debug, Clone)]
pub struct QueryPlan {
    pub theta: usize,
    pub n: usize,
    pub m: usize,
    pub l: u64,
    /// Per server (outer index = server - 1), vertices in canonical order:
    /// blocks ascending, chains lexicographic within a block.
    pub servers: Vec<Vec<Vertex>>,
    /// True for the N=1 fallback, where privacy is vacuous and the plan is a
    /// plain download of the stored datasets.
    pub degenerate: bool,
    chain_index: BTreeMap<Vec<u16>, (usize, usize)>,
}

struct IndexAllocator {
    next: u64,
    max: u64,
}

impl IndexAllocator {
    fn take(&mut self) -> Result<u64, PlanError> {
        if self.next > self.max {
            return Err(PlanError::AllocatorExhausted(self.max));
        }
        let v = self.next;
        self.next += 1;
        Ok(v)
    }
}

/// All r-subsets of `items` in lexicographic order.
pub fn combinations(items: &[u16], r: usize) -> Vec<Vec<u16>> {
    if r > items.len() {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..r).collect();
    loop {
        out.push(idx.iter().map(|&i| items[i]).collect());
        // Advance the combination.
        let mut i = r;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] != i + items.len() - r {
                break;
            }
            if i == 0 {
                return out;
            }
        }
        idx[i] += 1;
        for j in i + 1..r {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

pub(crate) fn binom(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let mut acc: u64 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u64 / (i + 1) as u64;
    }
    acc
}

/// Chains (n_{B-1}, ..., n_1) feeding a level-B vertex at `server`:
/// n_{B-1} != server, adjacent entries differ, lexicographic order.
fn chains(server: u16, level: usize, n: usize) -> Vec<Vec<u16>> {
    let mut out = Vec::new();
    let mut stack: Vec<u16> = Vec::new();
    fn rec(out: &mut Vec<Vec<u16>>, stack: &mut Vec<u16>, prev: u16, depth: usize, n: usize) {
        if depth == 0 {
            out.push(stack.clone());
            return;
        }
        for cand in 1..=n as u16 {
            if cand == prev {
                continue;
            }
            stack.push(cand);
            rec(out, stack, cand, depth - 1, n);
            stack.pop();
        }
    }
    rec(&mut out, &mut stack, server, level - 1, n);
    out
}

/// Fresh desired-symbol prepended to each parent I-query, preserving order.
fn exploit_si(
    parent_i: &[Query],
    theta: u16,
    allocator: &mut IndexAllocator,
) -> Result<Vec<Query>, PlanError> {
    let mut out = Vec::with_capacity(parent_i.len());
    for q in parent_i {
        let fresh = allocator.take()?;
        let mut terms = q.terms.clone();
        for t in &mut terms {
            t.sign = 1;
        }
        let pos = terms.iter().position(|t| t.msg > theta).unwrap_or(terms.len());
        terms.insert(
            pos,
            Term {
                msg: theta,
                idx: fresh,
                sign: 1,
            },
        );
        out.push(Query { terms });
    }
    Ok(out)
}

/// Message symmetry: one query per B-subset of the non-desired messages, with
/// each symbol index copied from the M-query whose non-desired message set is
/// the subset minus that symbol's message.
fn m_sym(m_part: &[Query], theta: u16, level: usize, m: usize) -> Result<Vec<Query>, PlanError> {
    let mut by_set: HashMap<Vec<u16>, u64> = HashMap::new();
    for q in m_part {
        let set: Vec<u16> = q.terms.iter().filter(|t| t.msg != theta).map(|t| t.msg).collect();
        let theta_idx = q.term_for(theta).expect("M-query carries theta").idx;
        by_set.insert(set, theta_idx);
    }
    let others: Vec<u16> = (1..=m as u16).filter(|&x| x != theta).collect();
    let mut out = Vec::new();
    for subset in combinations(&others, level) {
        let mut terms = Vec::with_capacity(level);
        for (l, &msg) in subset.iter().enumerate() {
            let mut key = subset.clone();
            key.remove(l);
            let idx = *by_set
                .get(&key)
                .ok_or_else(|| PlanError::MissingSource(key.clone()))?;
            terms.push(Term { msg, idx, sign: 1 });
        }
        out.push(Query { terms });
    }
    Ok(out)
}

/// Builds the unsigned query tree (index assignment only).
pub fn build_tree(theta: usize, n: usize, m: usize) -> Result<QueryPlan, PlanError> {
    if m == 0 || theta == 0 || theta > m || n == 0 {
        return Err(PlanError::InvalidArgument(format!(
            "need 1 <= theta <= M and N >= 1, got theta={theta}, M={m}, N={n}"
        )));
    }
    if n == 1 {
        // Degenerate fallback: privacy is vacuous with one server; the plan
        // is completed by the client downloading the stored datasets (see the
        // client module). L = 1 per round.
        return Ok(QueryPlan {
            theta,
            n,
            m,
            l: 1,
            servers: vec![Vec::new()],
            degenerate: true,
            chain_index: BTreeMap::new(),
        });
    }
    let l = (n as u64)
        .checked_pow(m as u32)
        .ok_or_else(|| PlanError::InvalidArgument("N^M overflows".into()))?;
    let theta_u = theta as u16;
    let mut servers: Vec<Vec<Vertex>> = vec![Vec::new(); n];
    let mut chain_index: BTreeMap<Vec<u16>, (usize, usize)> = BTreeMap::new();
    let mut allocator = IndexAllocator {
        next: n as u64 + 1,
        max: l,
    };

    // Block 1: one singleton per message at each server, index = server.
    for server in 1..=n as u16 {
        let m_part = vec![Query::singleton(theta_u, server as u64)];
        let i_part: Vec<Query> = (1..=m as u16)
            .filter(|&msg| msg != theta_u)
            .map(|msg| Query::singleton(msg, server as u64))
            .collect();
        let vertex = Vertex {
            level: 1,
            chain: vec![server],
            m_part,
            i_part,
        };
        chain_index.insert(vertex.chain.clone(), (server as usize - 1, 0));
        servers[server as usize - 1].push(vertex);
    }

    // Blocks 2..M: expand each chain; fresh desired-symbol indices are
    // allocated globally in this visit order (blocks ascending, servers
    // ascending, chains lexicographic).
    for level in 2..=m {
        for server in 1..=n as u16 {
            for suffix in chains(server, level, n) {
                let parent = &chain_index[&suffix];
                let parent_vertex = &servers[parent.0][parent.1];
                let m_part = exploit_si(&parent_vertex.i_part, theta_u, &mut allocator)?;
                let i_part = m_sym(&m_part, theta_u, level, m)?;
                let mut chain = Vec::with_capacity(level);
                chain.push(server);
                chain.extend_from_slice(&suffix);
                let vertex = Vertex {
                    level,
                    chain,
                    m_part,
                    i_part,
                };
                let slot = (server as usize - 1, servers[server as usize - 1].len());
                chain_index.insert(vertex.chain.clone(), slot);
                servers[server as usize - 1].push(vertex);
            }
        }
    }

    Ok(QueryPlan {
        theta,
        n,
        m,
        l,
        servers,
        degenerate: false,
        chain_index: chain_index.clone(),
    })
}

/// Sub-block numbering for one block: queries are grouped by the position of
/// the desired symbol (Δ), positive values descending first, the Δ=0 group
/// last. Returns Δ -> S.
pub fn sub_block_map(m: usize, theta: usize, level: usize) -> BTreeMap<u32, u32> {
    // Positive Δ = c + 1 where c counts non-desired messages below θ in the
    // query; the reachable range follows from the subset sizes.
    let below = theta - 1;
    let above = m - theta;
    let picks = level - 1;
    let c_min = picks.saturating_sub(above);
    let c_max = picks.min(below);
    let mut deltas: Vec<u32> = (c_min..=c_max).map(|c| c as u32 + 1).collect();
    deltas.sort_unstable_by(|a, b| b.cmp(a));
    let mut map = BTreeMap::new();
    let mut s = 1;
    for d in deltas {
        map.insert(d, s);
        s += 1;
    }
    if level < m {
        map.insert(0, s);
    }
    map
}

/// Attaches scheme signs (no-op over F_2, where signs are redundant).
///
/// Step 1: in every desired-free query, terms at even lexicographic positions
/// go negative. Step 2: a (message, index) pair negated in Step 1 is negated
/// everywhere it appears, plan-wide. Step 3: every query carrying a desired
/// symbol is wholly multiplied by (-1)^(S + [θ≠1]) with S its sub-block.
/// Step 4: the desired term's sign is then forced to (-1)^(Δ+1).
pub fn sign_assign(plan: &mut QueryPlan, p: u64) {
    if p == 2 || plan.degenerate {
        return;
    }
    let theta = plan.theta as u16;

    // Step 1, with a consistency check: the construction must never demand
    // two different signs for the same (message, index) pair.
    let mut step1: HashMap<(u16, u64), i8> = HashMap::new();
    for vertex in plan.servers.iter_mut().flatten() {
        for q in &mut vertex.i_part {
            for (pos, t) in q.terms.iter_mut().enumerate() {
                let sign = if pos % 2 == 1 { -1 } else { 1 };
                t.sign = sign;
                let prev = step1.insert((t.msg, t.idx), sign);
                assert!(
                    prev.is_none_or(|s| s == sign),
                    "inconsistent sign for message {} index {}",
                    t.msg,
                    t.idx
                );
            }
        }
    }

    // Step 2: propagate negations into the desired-carrying queries.
    for vertex in plan.servers.iter_mut().flatten() {
        for q in &mut vertex.m_part {
            for t in &mut q.terms {
                if let Some(&s) = step1.get(&(t.msg, t.idx)) {
                    t.sign = s;
                }
            }
        }
    }

    // Steps 3 and 4, per block.
    let indicator = u32::from(plan.theta != 1);
    for level in 1..=plan.m {
        let sub_blocks = sub_block_map(plan.m, plan.theta, level);
        for vertex in plan.servers.iter_mut().flatten() {
            if vertex.level != level {
                continue;
            }
            for q in &mut vertex.m_part {
                let delta = q.delta(theta);
                let s = sub_blocks[&delta];
                if (s + indicator) % 2 == 1 {
                    for t in &mut q.terms {
                        t.sign = -t.sign;
                    }
                }
                let desired = q.terms.iter_mut().find(|t| t.msg == theta).unwrap();
                desired.sign = if delta % 2 == 1 { 1 } else { -1 };
            }
        }
    }
}

/// Builds the fully signed plan.
pub fn build_plan(theta: usize, n: usize, m: usize, p: u64) -> Result<QueryPlan, PlanError> {
    let mut plan = build_tree(theta, n, m)?;
    sign_assign(&mut plan, p);
    Ok(plan)
}

impl QueryPlan {
    pub fn vertex(&self, server: usize, idx: usize) -> &Vertex {
        &self.servers[server - 1][idx]
    }

    /// Locates the parent vertex (one level up, at the chain's next server).
    pub fn parent_of(&self, vertex: &Vertex) -> Option<(usize, usize)> {
        if vertex.level < 2 {
            return None;
        }
        let (s, i) = self.chain_index[&vertex.chain[1..].to_vec()];
        Some((s + 1, i))
    }

    /// Serializes the plan for transmission: private (π, σ) applied, M/I
    /// labels suppressed, queries in canonical order. The resulting shape is
    /// identical for every θ.
    pub fn to_wire(&self, randomizer: &Randomizer, mutation: Mutation) -> Vec<Vec<WireQuery>> {
        let mut out = Vec::with_capacity(self.n);
        for vertices in &self.servers {
            let mut queries = Vec::new();
            for vertex in vertices {
                for r in vertex.sorted_refs() {
                    let q = vertex.query(r);
                    let terms = q
                        .terms
                        .iter()
                        .map(|t| {
                            (
                                t.msg,
                                randomizer.position(t.idx),
                                t.sign * randomizer.sign(t.idx),
                            )
                        })
                        .collect();
                    queries.push(WireQuery { terms });
                }
            }
            if mutation == Mutation::LeakSign && self.theta != 1 {
                if let Some(first) = queries.first_mut() {
                    if let Some(t) = first.terms.first_mut() {
                        t.2 = 1;
                    }
                }
            }
            out.push(queries);
        }
        out
    }

    /// Total queries each server receives.
    pub fn queries_per_server(&self) -> u64 {
        self.servers[0]
            .iter()
            .map(|v| (v.m_part.len() + v.i_part.len()) as u64)
            .sum()
    }

    /// All desired-symbol virtual indices across the plan, in visit order.
    pub fn desired_indices(&self) -> Vec<u64> {
        let theta = self.theta as u16;
        let mut out = Vec::new();
        for level in 1..=self.m {
            for vertices in &self.servers {
                for v in vertices.iter().filter(|v| v.level == level) {
                    for q in &v.m_part {
                        out.push(q.term_for(theta).unwrap().idx);
                    }
                }
            }
        }
        out
    }

    /// Renders the signed plan in a block/sub-block table (two-server layout).
    pub fn render_sign_table(&self) -> String {
        assert_eq!(self.n, 2, "sign-table layout is two-server");
        assert!(self.m <= 26);
        let theta = self.theta as u16;
        let mut out = String::new();
        // Block 1: singletons, desired message printed first.
        let mut row: Vec<String> = Vec::new();
        for server in 1..=self.n {
            let v = self.vertex(server, 0);
            let mut parts: Vec<String> = v.m_part.iter().map(|q| term_str(&q.terms[0], true)).collect();
            parts.extend(v.i_part.iter().map(|q| term_str(&q.terms[0], true)));
            row.push(parts.join(", "));
        }
        writeln!(out, "1 -(-) | {}", row.join(" | ")).unwrap();

        for level in 2..=self.m {
            let sub_blocks = sub_block_map(self.m, self.theta, level);
            // Collect (S, tuple, per-server strings).
            let mut rows: Vec<(u32, Vec<u16>, Vec<String>)> = Vec::new();
            let base = self.vertex(1, 0); // placeholder to appease the borrow below
            let _ = base;
            let per_server: Vec<&Vertex> = (1..=self.n)
                .map(|s| {
                    self.servers[s - 1]
                        .iter()
                        .find(|v| v.level == level)
                        .expect("two-server plans have one vertex per level")
                })
                .collect();
            let refs = per_server[0].sorted_refs();
            for r in refs {
                let q0 = per_server[0].query(r);
                let delta = q0.delta(theta);
                let s = sub_blocks[&delta];
                let tuple = q0.message_tuple();
                let cols: Vec<String> = per_server
                    .iter()
                    .map(|v| {
                        let rr = v
                            .sorted_refs()
                            .into_iter()
                            .find(|&rr| v.query(rr).message_tuple() == tuple)
                            .unwrap();
                        query_str(v.query(rr))
                    })
                    .collect();
                rows.push((s, tuple, cols));
            }
            rows.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
            for (s, tuple, cols) in rows {
                let delta = tuple
                    .iter()
                    .position(|&m| m == theta)
                    .map_or(0, |p| p + 1);
                writeln!(out, "{level} {s}({delta}) | {}", cols.join(" | ")).unwrap();
            }
        }
        out
    }

    /// Renders the unsigned index assignment, vertex by vertex.
    pub fn render_tree(&self) -> String {
        assert!(self.m <= 26);
        let mut out = String::new();
        for server in 1..=self.n {
            writeln!(out, "Server {server}").unwrap();
            for v in &self.servers[server - 1] {
                let chain: Vec<String> = v.chain.iter().map(|c| c.to_string()).collect();
                let chain = chain.join(",");
                if v.level == 1 {
                    let mut qs: Vec<&Query> = v.m_part.iter().chain(v.i_part.iter()).collect();
                    qs.sort_by_key(|q| q.message_tuple());
                    let parts: Vec<String> =
                        qs.iter().map(|q| term_str(&q.terms[0], true)).collect();
                    writeln!(out, "B=1 Q({chain}): {}", parts.join(", ")).unwrap();
                } else {
                    let m_str: Vec<String> = v.m_part.iter().map(unsigned_query_str).collect();
                    writeln!(out, "B={} Q({chain}) M: {}", v.level, m_str.join(" | ")).unwrap();
                    if !v.i_part.is_empty() {
                        let i_str: Vec<String> = v.i_part.iter().map(unsigned_query_str).collect();
                        writeln!(out, "B={} Q({chain}) I: {}", v.level, i_str.join(" | ")).unwrap();
                    }
                }
            }
        }
        out
    }
}

fn letter(msg: u16) -> char {
    (b'a' + (msg - 1) as u8) as char
}

fn term_str(t: &Term, leading: bool) -> String {
    let body = format!("{}{}", letter(t.msg), t.idx);
    if t.sign < 0 {
        format!("-{body}")
    } else if leading {
        body
    } else {
        format!("+{body}")
    }
}

fn query_str(q: &Query) -> String {
    let mut out = term_str(&q.terms[0], true);
    for t in &q.terms[1..] {
        let op = if t.sign < 0 { " - " } else { " + " };
        write!(out, "{op}{}{}", letter(t.msg), t.idx).unwrap();
    }
    out
}

fn unsigned_query_str(q: &Query) -> String {
    let parts: Vec<String> = q
        .terms
        .iter()
        .map(|t| format!("{}{}", letter(t.msg), t.idx))
        .collect();
    parts.join("+")
}

/// Per-server vertex layout: (level, query count) in canonical order. The
/// grouping a server uses to compress raw answers, derivable from (N, M)
/// alone (and K in the degenerate single-server case).
pub fn vertex_layout(n: usize, m: usize, k: usize) -> Vec<(usize, usize)> {
    if n == 1 {
        return vec![(1, k)];
    }
    let mut out = Vec::new();
    for level in 1..=m {
        let count = if level == 1 {
            1
        } else {
            (n - 1).pow(level as u32 - 1)
        };
        for _ in 0..count {
            out.push((level, binom(m, level) as usize));
        }
    }
    out
}
