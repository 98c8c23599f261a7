//! Retrieval orchestration and decoding.
//!
//! The client normalizes the public combination matrix, maps the requested
//! (raw) message index to its normalized position, builds the signed query
//! plan, randomizes it, and sends every server its share — all shares before
//! reading any answer. Decoding walks the query tree level by level: each
//! vertex's compressed download is completed with that level's dependency
//! rows (whose constants come from side information recorded at the parent
//! vertex), solved, and mined for fresh desired symbols and new side
//! information.
//!
//! Stores longer than one round (N^M symbols) are handled by repeating the
//! scheme with fresh randomness per round and absolute wire positions.

use std::collections::HashMap;
use std::io::Write as _;
use std::net::TcpStream;
use std::sync::{Arc, Mutex, OnceLock};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::gf::{FieldContext, GfError, Matrix};
use crate::model::{normalize, CombinationMatrix, ModelError};
use crate::planner::{build_plan, Mutation, PlanError, QueryPlan, QueryRef, Randomizer, WireQuery};
use crate::redundancy::{
    certified_compression_spec, lambda_table, relations_oracle, select_basis,
    CompressionSpec, RedundancyError, RedundancyRelation,
};
use crate::server::{ServerEngine, ServerError};
use crate::wire::{read_response, write_request, Request, Response, WireError};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("decode failure: {0}")]
    Decode(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Redundancy(#[from] RedundancyError),
    #[error(transparent)]
    Gf(#[from] GfError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How the client reaches the N servers.
pub enum Transport {
    /// Direct calls into co-located engines (index = server - 1).
    InProcess(Vec<Arc<ServerEngine>>),
    /// TCP endpoints, `host:port`, one per server.
    Socket(Vec<String>),
}

#[derive(Debug, Clone)]
pub struct RetrievalConfig {
    pub seed: u64,
    /// Disables the private permutation and signs (for plan inspection only —
    /// an identity randomizer forfeits privacy).
    pub identity_randomizer: bool,
    /// Downloads every query value raw instead of the compressed
    /// combinations. Only supported in-process.
    pub uncompressed: bool,
    /// Negative-control hook for the statistical privacy audit.
    pub mutation: Mutation,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            seed: 0,
            identity_randomizer: false,
            uncompressed: false,
            mutation: Mutation::None,
        }
    }
}

/// Public record of a finished retrieval. Deliberately excludes the desired
/// index and the decoded data.
#[derive(Debug, Clone, Serialize)]
pub struct Transcript {
    pub n: usize,
    pub k: usize,
    pub m: usize,
    pub p: u64,
    pub l_total: u64,
    pub rounds: u64,
    pub queries_sent_total: u64,
    pub download_total: u64,
    pub per_server_download: u64,
    pub uncompressed: bool,
    pub transport: String,
}

static PLAN_CACHE: OnceLock<Mutex<HashMap<(usize, usize, usize, u64), Arc<QueryPlan>>>> =
    OnceLock::new();

/// Signed plans are pure functions of (θ, N, M, p); cache them across
/// retrievals and across the audit suites.
pub fn cached_plan(theta: usize, n: usize, m: usize, p: u64) -> Result<Arc<QueryPlan>, PlanError> {
    let cache = PLAN_CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("plan cache poisoned");
    if let Some(plan) = guard.get(&(theta, n, m, p)) {
        return Ok(Arc::clone(plan));
    }
    let plan = Arc::new(build_plan(theta, n, m, p)?);
    guard.insert((theta, n, m, p), Arc::clone(&plan));
    Ok(plan)
}

/// Per-level decode helpers derived from the compression spec and the
/// dependency rows (identical across the vertices of a level).
struct LevelDecode {
    relations: Vec<RedundancyRelation>,
    /// Inverse of (compression rows over dependency rows); `None` for
    /// identity levels, which need no solving.
    inverse: Option<Matrix>,
    download_rows: usize,
    cols: usize,
}

struct Decoder {
    plan: Arc<QueryPlan>,
    theta: usize,
    levels: Vec<LevelDecode>,
}

impl Decoder {
    fn new(
        matrix: &CombinationMatrix,
        theta: usize,
        n: usize,
        spec: &CompressionSpec,
        ctx: &FieldContext,
    ) -> Result<Self, ClientError> {
        let m = matrix.message_count();
        let plan = cached_plan(theta, n, m, ctx.modulus())?;
        let sel = select_basis(matrix, theta, ctx)?;
        let lambda = lambda_table(matrix, &sel, ctx)?;
        let mut levels = Vec::with_capacity(m);
        for level in 1..=m {
            let lc = spec.level(level);
            if lc.is_identity() {
                levels.push(LevelDecode {
                    relations: Vec::new(),
                    inverse: None,
                    download_rows: lc.rows,
                    cols: lc.cols,
                });
                continue;
            }
            let vertex = plan.servers[0]
                .iter()
                .find(|v| v.level == level)
                .expect("every level has a vertex");
            // Elimination is robust for arbitrary matrices; the closed-form
            // variant cross-checks it in the test suites.
            let relations = relations_oracle(vertex, &sel, &lambda, ctx)?;
            let rows: Vec<Vec<u64>> = relations.iter().map(|r| r.coeffs.clone()).collect();
            let stacked = lc.matrix(ctx).stack(&Matrix::from_rows(&rows)?)?;
            levels.push(LevelDecode {
                relations,
                inverse: Some(stacked.inverse(ctx)?),
                download_rows: lc.rows,
                cols: lc.cols,
            });
        }
        Ok(Decoder {
            plan,
            theta,
            levels,
        })
    }

    /// Decodes one round. `payloads[s]` is server s+1's values for the round:
    /// compressed rows, or raw query values when `uncompressed`. Returns the
    /// round's L desired symbols in storage order.
    fn decode_round(
        &self,
        payloads: &[Vec<u64>],
        randomizer: &Randomizer,
        uncompressed: bool,
        ctx: &FieldContext,
    ) -> Result<Vec<u64>, ClientError> {
        let plan = &self.plan;
        let theta = self.theta as u16;
        let l = plan.l;
        let mut out = vec![0u64; l as usize];
        // Ledger of decoded anchor-free values, keyed by vertex chain.
        let mut ledger: HashMap<Vec<u16>, Vec<u64>> = HashMap::new();
        // Pre-split each server's payload by vertex, in canonical order.
        let mut offsets = vec![0usize; plan.n];
        for level in 1..=plan.m {
            for server in 1..=plan.n {
                for vertex in plan.servers[server - 1].iter().filter(|v| v.level == level) {
                    let ld = &self.levels[level - 1];
                    let take = if uncompressed { ld.cols } else { ld.download_rows };
                    let payload = &payloads[server - 1];
                    let start = offsets[server - 1];
                    if start + take > payload.len() {
                        return Err(ClientError::Decode(format!(
                            "server {server} payload exhausted at level {level}"
                        )));
                    }
                    let slice = &payload[start..start + take];
                    offsets[server - 1] += take;

                    let parent_vals: Option<&Vec<u64>> = if level >= 2 {
                        Some(ledger.get(&vertex.chain[1..].to_vec()).ok_or_else(|| {
                            ClientError::Decode(format!(
                                "missing side information for {:?}",
                                vertex.chain
                            ))
                        })?)
                    } else {
                        None
                    };

                    // Recover the full vector of query values (wire order).
                    let q: Vec<u64> = if uncompressed || ld.inverse.is_none() {
                        slice.to_vec()
                    } else {
                        let inv = ld.inverse.as_ref().unwrap();
                        let mut rhs = slice.to_vec();
                        for rel in &ld.relations {
                            let pv = parent_vals.map(|v| v.as_slice()).unwrap_or(&[]);
                            let c = rel
                                .parent_consts
                                .iter()
                                .zip(pv.iter().chain(std::iter::repeat(&0)))
                                .fold(0u64, |acc, (&c, &v)| ctx.add(acc, ctx.mul(c, v)));
                            rhs.push(c);
                        }
                        inv.mul_vec(ctx, &rhs)?
                    };

                    // Distribute values back onto the two partitions.
                    let refs = vertex.sorted_refs();
                    let mut m_vals = vec![0u64; vertex.m_part.len()];
                    let mut i_vals = vec![0u64; vertex.i_part.len()];
                    for (j, r) in refs.iter().enumerate() {
                        match *r {
                            QueryRef::M(i) => m_vals[i] = q[j],
                            QueryRef::I(i) => i_vals[i] = q[j],
                        }
                    }

                    // Fresh desired symbols.
                    for (f, mq) in vertex.m_part.iter().enumerate() {
                        let t = mq.term_for(theta).expect("desired-carrying query");
                        let mut val = m_vals[f];
                        if let Some(first_other) = mq.terms.iter().find(|t| t.msg != theta) {
                            let pv = parent_vals.expect("level >= 2 has a parent")[f];
                            val = ctx.sub(val, ctx.apply_sign(first_other.sign, pv));
                        }
                        // Solving happens over σ-twisted symbol values; undo
                        // the private sign to recover the stored symbol.
                        let u = ctx.apply_sign(t.sign, val);
                        let pos = randomizer.position(t.idx);
                        out[(pos - 1) as usize] = ctx.apply_sign(randomizer.sign(t.idx), u);
                    }

                    ledger.insert(vertex.chain.clone(), i_vals);
                }
            }
        }
        Ok(out)
    }
}

/// Retrieves the full desired message W_θ (raw index) of a store of
/// `l_total` symbols. Returns the symbols and a privacy-safe transcript.
pub fn retrieve(
    raw_matrix: &Matrix,
    theta_raw: usize,
    l_total: u64,
    ctx: &FieldContext,
    cfg: &RetrievalConfig,
    transport: &Transport,
) -> Result<(Vec<u64>, Transcript), ClientError> {
    let (matrix, change) = normalize(raw_matrix, ctx)?;
    let m = matrix.message_count();
    let k = matrix.dataset_count();
    if theta_raw == 0 || theta_raw > m {
        return Err(ClientError::InvalidArgument(format!(
            "desired index {theta_raw} out of range 1..={m}"
        )));
    }
    let n = match transport {
        Transport::InProcess(engines) => engines.len(),
        Transport::Socket(endpoints) => endpoints.len(),
    };
    if n == 0 {
        return Err(ClientError::InvalidArgument("no servers configured".into()));
    }
    if cfg.uncompressed && n == 1 {
        return Err(ClientError::InvalidArgument(
            "uncompressed mode is undefined for a single server".into(),
        ));
    }
    let theta = change.normalized_index(theta_raw);
    let spec = certified_compression_spec(&matrix, n, ctx)?;

    // Degenerate single-server deployment: privacy is vacuous; download the
    // effective datasets and combine.
    if n == 1 {
        return retrieve_degenerate(&matrix, theta, l_total, ctx, transport, &spec);
    }

    let plan = cached_plan(theta, n, m, ctx.modulus())?;
    let l = plan.l;
    if l_total == 0 || l_total % l != 0 {
        return Err(ClientError::InvalidArgument(format!(
            "store length {l_total} is not a positive multiple of the round size {l}"
        )));
    }
    let rounds = l_total / l;
    let decoder = Decoder::new(&matrix, theta, n, &spec, ctx)?;

    // Per-round randomizers, derived from the master seed.
    let mut seed_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let randomizers: Vec<Randomizer> = (0..rounds)
        .map(|_| {
            let sub = seed_rng.random::<u64>();
            if cfg.identity_randomizer {
                Randomizer::identity(l)
            } else {
                Randomizer::sample(sub, l, ctx.modulus())
            }
        })
        .collect();

    // Assemble each server's full request (all rounds, absolute positions).
    let mut per_server: Vec<Vec<WireQuery>> = vec![Vec::new(); n];
    for (round, randomizer) in randomizers.iter().enumerate() {
        let wire = plan.to_wire(randomizer, cfg.mutation);
        let base = round as u64 * l;
        for (s, queries) in wire.into_iter().enumerate() {
            per_server[s].extend(queries.into_iter().map(|mut q| {
                for t in &mut q.terms {
                    t.1 += base;
                }
                q
            }));
        }
    }
    let queries_sent_total: u64 = per_server.iter().map(|q| q.len() as u64).sum();
    let requests: Vec<Request> = per_server
        .into_iter()
        .map(|queries| Request {
            p_low: ctx.modulus() as u32,
            n: n as u16,
            k: k as u16,
            m: m as u16,
            l: l_total,
            queries,
        })
        .collect();

    let (responses, transport_name) = exchange(&requests, transport, cfg.uncompressed)?;

    // Validate sizes and decode round by round.
    let per_round: usize = if cfg.uncompressed {
        (requests[0].queries.len() / rounds as usize) as usize
    } else {
        spec.per_server_download() as usize
    };
    for (s, resp) in responses.iter().enumerate() {
        if resp.values.len() != per_round * rounds as usize {
            return Err(ClientError::Decode(format!(
                "server {} returned {} values, expected {}",
                s + 1,
                resp.values.len(),
                per_round * rounds as usize
            )));
        }
    }
    let mut out = Vec::with_capacity(l_total as usize);
    for (round, randomizer) in randomizers.iter().enumerate() {
        let payloads: Vec<Vec<u64>> = responses
            .iter()
            .map(|r| r.values[round * per_round..(round + 1) * per_round].to_vec())
            .collect();
        out.extend(decoder.decode_round(&payloads, randomizer, cfg.uncompressed, ctx)?);
    }
    let download_total: u64 = responses.iter().map(|r| r.values.len() as u64).sum();
    let transcript = Transcript {
        n,
        k,
        m,
        p: ctx.modulus(),
        l_total,
        rounds,
        queries_sent_total,
        download_total,
        per_server_download: download_total / n as u64,
        uncompressed: cfg.uncompressed,
        transport: transport_name,
    };
    Ok((out, transcript))
}

/// Sends every request before reading any response.
fn exchange(
    requests: &[Request],
    transport: &Transport,
    uncompressed: bool,
) -> Result<(Vec<Response>, String), ClientError> {
    match transport {
        Transport::InProcess(engines) => {
            let mut responses = Vec::with_capacity(requests.len());
            for (req, engine) in requests.iter().zip(engines.iter()) {
                responses.push(if uncompressed {
                    Response {
                        values: engine.evaluate_all(&req.queries)?,
                    }
                } else {
                    engine.answer(req)?
                });
            }
            Ok((responses, "in-process".into()))
        }
        Transport::Socket(endpoints) => {
            if uncompressed {
                return Err(ClientError::InvalidArgument(
                    "uncompressed retrieval requires the in-process transport".into(),
                ));
            }
            let mut streams = Vec::with_capacity(endpoints.len());
            for ep in endpoints {
                streams.push(TcpStream::connect(ep)?);
            }
            for (stream, req) in streams.iter_mut().zip(requests.iter()) {
                write_request(stream, req)?;
                stream.flush()?;
            }
            let mut responses = Vec::with_capacity(streams.len());
            for stream in streams.iter_mut() {
                responses.push(read_response(stream)?);
            }
            Ok((responses, "socket".into()))
        }
    }
}

fn retrieve_degenerate(
    matrix: &CombinationMatrix,
    theta: usize,
    l_total: u64,
    ctx: &FieldContext,
    transport: &Transport,
    spec: &CompressionSpec,
) -> Result<(Vec<u64>, Transcript), ClientError> {
    let m = matrix.message_count();
    let k = matrix.dataset_count();
    if l_total == 0 {
        return Err(ClientError::InvalidArgument("empty store".into()));
    }
    let mut queries = Vec::with_capacity((k as u64 * l_total) as usize);
    for pos in 1..=l_total {
        for msg in 1..=k as u16 {
            queries.push(WireQuery {
                terms: vec![(msg, pos, 1)],
            });
        }
    }
    let queries_sent_total = queries.len() as u64;
    let requests = vec![Request {
        p_low: ctx.modulus() as u32,
        n: 1,
        k: k as u16,
        m: m as u16,
        l: l_total,
        queries,
    }];
    let (responses, transport_name) = exchange(&requests, transport, false)?;
    let values = &responses[0].values;
    if values.len() as u64 != k as u64 * l_total {
        return Err(ClientError::Decode(format!(
            "expected {} values, got {}",
            k as u64 * l_total,
            values.len()
        )));
    }
    let row = matrix.row(theta);
    let mut out = Vec::with_capacity(l_total as usize);
    for pos in 0..l_total as usize {
        let base = pos * k;
        let mut acc = 0u64;
        for (j, &coef) in row.iter().enumerate() {
            acc = ctx.add(acc, ctx.mul(coef, values[base + j]));
        }
        out.push(acc);
    }
    let transcript = Transcript {
        n: 1,
        k,
        m,
        p: ctx.modulus(),
        l_total,
        rounds: l_total,
        queries_sent_total,
        download_total: values.len() as u64,
        per_server_download: values.len() as u64,
        uncompressed: false,
        transport: transport_name,
    };
    let _ = spec;
    Ok((out, transcript))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_datasets, MessageView};

    fn random_raw_matrix(seed: u64, m: usize, k: usize, ctx: &FieldContext) -> Matrix {
        crate::model::generate_matrix(seed, m, k, ctx).unwrap()
    }

    fn expected_message(
        raw: &Matrix,
        theta_raw: usize,
        store: &crate::model::DatasetStore,
        ctx: &FieldContext,
    ) -> Vec<u64> {
        let l = store.symbols_per_message();
        (1..=l)
            .map(|pos| {
                let mut acc = 0u64;
                for k in 1..=store.dataset_count() {
                    acc = ctx.add(
                        acc,
                        ctx.mul(raw.get(theta_raw - 1, k - 1), store.symbol(k, pos)),
                    );
                }
                acc
            })
            .collect()
    }

    fn run_case(n: usize, m: usize, k: usize, rounds: u64, seed: u64, cfg: &RetrievalConfig) {
        let ctx = FieldContext::new(65537).unwrap();
        let raw = random_raw_matrix(seed, m, k, &ctx);
        let l_total = if n == 1 {
            rounds
        } else {
            (n as u64).pow(m as u32) * rounds
        };
        let store = generate_datasets(seed ^ 0x5eed, k, l_total, &ctx).unwrap();
        let engines: Vec<Arc<ServerEngine>> = (0..n)
            .map(|_| Arc::new(ServerEngine::new(&raw, &store, n, ctx).unwrap()))
            .collect();
        let transport = Transport::InProcess(engines);
        for theta_raw in 1..=m {
            let (got, transcript) =
                retrieve(&raw, theta_raw, l_total, &ctx, cfg, &transport).unwrap();
            assert_eq!(got, expected_message(&raw, theta_raw, &store, &ctx));
            assert_eq!(transcript.l_total, l_total);
            if !cfg.uncompressed && n > 1 {
                assert_eq!(
                    transcript.download_total,
                    rounds * crate::redundancy::download_count(n, m, k)
                );
            }
        }
    }

    #[test]
    fn retrieves_correctly_small() {
        run_case(2, 4, 2, 1, 42, &RetrievalConfig::default());
        run_case(2, 3, 2, 2, 43, &RetrievalConfig::default());
        run_case(3, 3, 2, 1, 44, &RetrievalConfig::default());
        run_case(2, 2, 1, 1, 45, &RetrievalConfig::default());
    }

    #[test]
    fn retrieves_with_identity_randomizer() {
        let cfg = RetrievalConfig {
            identity_randomizer: true,
            ..Default::default()
        };
        run_case(2, 4, 2, 1, 46, &cfg);
    }

    #[test]
    fn retrieves_uncompressed() {
        let cfg = RetrievalConfig {
            uncompressed: true,
            ..Default::default()
        };
        run_case(2, 4, 2, 1, 47, &cfg);
        run_case(2, 4, 4, 1, 48, &cfg);
    }

    #[test]
    fn degenerate_single_server_round_trips() {
        run_case(1, 3, 2, 5, 49, &RetrievalConfig::default());
    }

    #[test]
    fn store_length_must_divide_into_rounds() {
        let ctx = FieldContext::new(65537).unwrap();
        let raw = random_raw_matrix(50, 4, 2, &ctx);
        let store = generate_datasets(51, 2, 10, &ctx).unwrap();
        let engines: Vec<Arc<ServerEngine>> = (0..2)
            .map(|_| Arc::new(ServerEngine::new(&raw, &store, 2, ctx).unwrap()))
            .collect();
        let transport = Transport::InProcess(engines);
        let err = retrieve(&raw, 1, 10, &ctx, &RetrievalConfig::default(), &transport);
        assert!(matches!(err, Err(ClientError::InvalidArgument(_))));
    }

    #[test]
    fn normalization_maps_raw_indices() {
        // A raw matrix whose first rows are dependent exercises the row
        // permutation; every raw index must still come back verbatim.
        let ctx = FieldContext::new(65537).unwrap();
        let raw = Matrix::from_rows(&[
            vec![3, 6],
            vec![1, 2],
            vec![0, 5],
            vec![7, 11],
        ])
        .unwrap();
        let store = generate_datasets(52, 2, 16, &ctx).unwrap();
        let engines: Vec<Arc<ServerEngine>> = (0..2)
            .map(|_| Arc::new(ServerEngine::new(&raw, &store, 2, ctx).unwrap()))
            .collect();
        let transport = Transport::InProcess(engines);
        for theta_raw in 1..=4usize {
            let (got, _) = retrieve(
                &raw,
                theta_raw,
                16,
                &ctx,
                &RetrievalConfig::default(),
                &transport,
            )
            .unwrap();
            assert_eq!(got, expected_message(&raw, theta_raw, &store, &ctx));
        }
        // Sanity: the view through the normalized pair matches too.
        let (matrix, change) = normalize(&raw, &ctx).unwrap();
        let eff = store.transform(&change.b, &ctx).unwrap();
        let view = MessageView {
            store: &eff,
            matrix: &matrix,
            ctx: &ctx,
        };
        for raw_idx in 1..=4usize {
            let norm = change.normalized_index(raw_idx);
            for pos in 1..=16u64 {
                assert_eq!(
                    view.symbol(norm, pos).unwrap(),
                    expected_message(&raw, raw_idx, &store, &ctx)[(pos - 1) as usize]
                );
            }
        }
    }
}
