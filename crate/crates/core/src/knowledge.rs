//! Commonsense knowledge per turn: retrieve events from a small in-memory
//! knowledge base, generate events from a deterministic template provider,
//! pick a source per turn through a learned pointer gate, and pool each
//! source's events into a single vector with query attention.
//!
//! Three mental-state relations are carried per event: the subject's
//! intention, the subject's reaction, and the reaction of others. The
//! knowledge base is a JSON file of `{"text", "xIntent": [..], "xReact":
//! [..], "oReact": [..]}` records; an adapter ingests three-column
//! `event<TAB>relation<TAB>tail` TSV exports into the same shape. Event
//! vectors come from the hashed text encoder, unit-normalized for cosine
//! retrieval.

use crate::error::{Error, Result};
use crate::features::EmbeddingProvider;
use crate::nn::{Binder, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

// ---------------------------------------------------------------------------
// Relations and events
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KnowledgeRelation {
    #[serde(rename = "xIntent")]
    SubjectIntent,
    #[serde(rename = "xReact")]
    SubjectReaction,
    #[serde(rename = "oReact")]
    OthersReaction,
}

impl KnowledgeRelation {
    pub const ALL: [KnowledgeRelation; 3] = [
        KnowledgeRelation::SubjectIntent,
        KnowledgeRelation::SubjectReaction,
        KnowledgeRelation::OthersReaction,
    ];

    pub fn index(self) -> usize {
        match self {
            KnowledgeRelation::SubjectIntent => 0,
            KnowledgeRelation::SubjectReaction => 1,
            KnowledgeRelation::OthersReaction => 2,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            KnowledgeRelation::SubjectIntent => "xIntent",
            KnowledgeRelation::SubjectReaction => "xReact",
            KnowledgeRelation::OthersReaction => "oReact",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventSource {
    Retrieved,
    Generated,
}

#[derive(Debug, Clone)]
pub struct KnowledgeEvent<T: Scalar> {
    pub text: String,
    pub relation: KnowledgeRelation,
    pub vector: Vec<T>,
    pub source: EventSource,
}

/// K events per relation for one source.
pub type RelationEvents<T> = [Vec<KnowledgeEvent<T>>; 3];

/// Retrieved and generated halves for one turn, plus the fused vector once
/// the pointer gate has run.
#[derive(Debug, Clone)]
pub struct KnowledgeBundle<T: Scalar> {
    pub retrieved: RelationEvents<T>,
    pub generated: RelationEvents<T>,
    pub fused: Option<Vec<T>>,
}

/// Stack one relation's event vectors into a K x d matrix.
pub fn relation_matrix<T: Scalar>(events: &[KnowledgeEvent<T>]) -> Array2<T> {
    let k = events.len();
    let d = events.first().map_or(0, |e| e.vector.len());
    let mut out = Array2::zeros((k, d));
    for (i, e) in events.iter().enumerate() {
        for (j, &v) in e.vector.iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Knowledge base
// ---------------------------------------------------------------------------

/// One knowledge-base record as stored on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KbRecord {
    pub text: String,
    #[serde(rename = "xIntent", default)]
    pub subject_intent: Vec<String>,
    #[serde(rename = "xReact", default)]
    pub subject_reaction: Vec<String>,
    #[serde(rename = "oReact", default)]
    pub others_reaction: Vec<String>,
}

impl KbRecord {
    fn neighbors(&self, relation: KnowledgeRelation) -> &[String] {
        match relation {
            KnowledgeRelation::SubjectIntent => &self.subject_intent,
            KnowledgeRelation::SubjectReaction => &self.subject_reaction,
            KnowledgeRelation::OthersReaction => &self.others_reaction,
        }
    }
}

/// In-memory event table with unit-normalized vectors for cosine retrieval.
/// All free-text embedding (node vectors, neighbor vectors, queries) goes
/// through one hashed encoder so query and key live in the same space.
#[derive(Debug)]
pub struct KnowledgeBase<T: Scalar> {
    records: Vec<KbRecord>,
    vectors: Vec<Vec<T>>,
    embedder: EmbeddingProvider,
}

fn normalize<T: Scalar>(v: &mut [T]) {
    let norm = v
        .iter()
        .fold(T::zero(), |acc, &x| acc + x * x)
        .sqrt();
    if norm > T::of(1e-12) {
        for x in v.iter_mut() {
            *x = *x / norm;
        }
    }
}

impl<T: Scalar> KnowledgeBase<T> {
    pub fn from_records(records: Vec<KbRecord>, embedder: EmbeddingProvider) -> Result<Self> {
        if !embedder.is_hashed() {
            return Err(Error::Config(
                "the knowledge base needs a hashed text encoder; precomputed turn vectors \
                 cannot embed event text"
                    .into(),
            ));
        }
        let mut vectors = Vec::with_capacity(records.len());
        for rec in &records {
            let mut v: Vec<T> = embedder.embed_free_text(&rec.text)?;
            normalize(&mut v);
            vectors.push(v);
        }
        Ok(KnowledgeBase {
            records,
            vectors,
            embedder,
        })
    }

    /// Load the JSON array format.
    pub fn load(path: &Path, embedder: EmbeddingProvider) -> Result<Self> {
        if !path.exists() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        let raw = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let records: Vec<KbRecord> = serde_json::from_str(&raw).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_records(records, embedder)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embedder.dim()
    }

    pub fn records(&self) -> &[KbRecord] {
        &self.records
    }

    /// Unit-normalized query vector for a turn text, in the same space as
    /// the stored node vectors.
    pub fn embed_query(&self, text: &str) -> Result<Vec<T>> {
        let mut v: Vec<T> = self.embedder.embed_free_text(text)?;
        normalize(&mut v);
        Ok(v)
    }

    /// Event-atom vector for a neighbor text.
    fn embed_atom(&self, text: &str) -> Result<Vec<T>> {
        self.embedder.embed_free_text(text)
    }
}

/// Ingest a three-column `event<TAB>relation<TAB>tail` TSV into KB records,
/// grouping tails by event and keeping only the three mental-state
/// relations. Unknown relations are skipped.
pub fn ingest_atomic_tsv(path: &Path) -> Result<Vec<KbRecord>> {
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    let raw = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut grouped: BTreeMap<String, KbRecord> = BTreeMap::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let (event, relation, tail) = match (parts.next(), parts.next(), parts.next()) {
            (Some(e), Some(r), Some(t)) => (e.trim(), r.trim(), t.trim()),
            _ => {
                return Err(Error::Data(format!(
                    "line {} of {} is not event<TAB>relation<TAB>tail",
                    lineno + 1,
                    path.display()
                )))
            }
        };
        if event.is_empty() || tail.is_empty() || tail == "none" {
            continue;
        }
        let rec = grouped.entry(event.to_string()).or_insert_with(|| KbRecord {
            text: event.to_string(),
            subject_intent: vec![],
            subject_reaction: vec![],
            others_reaction: vec![],
        });
        match relation {
            "xIntent" => rec.subject_intent.push(tail.to_string()),
            "xReact" => rec.subject_reaction.push(tail.to_string()),
            "oReact" => rec.others_reaction.push(tail.to_string()),
            _ => {}
        }
    }
    Ok(grouped.into_values().collect())
}

// ---------------------------------------------------------------------------
// Retrieval
// ---------------------------------------------------------------------------

/// Top-K knowledge-base nodes by cosine similarity against `turn_vector`
/// (ties broken by stable record index), expanded into the retrieved half of
/// a bundle: for each ranked node and each relation, the node's first
/// neighbor text (falling back to the tagged node text when a relation has
/// no neighbors).
pub fn retrieve_events<T: Scalar>(
    kb: &KnowledgeBase<T>,
    turn_vector: &[T],
    k: usize,
) -> Result<RelationEvents<T>> {
    if kb.is_empty() {
        return Err(Error::Data("knowledge base is empty".into()));
    }
    if k == 0 {
        return Err(Error::Config("retrieval needs K >= 1".into()));
    }
    if k > kb.len() {
        return Err(Error::Config(format!(
            "K = {k} exceeds knowledge base size {}",
            kb.len()
        )));
    }
    if turn_vector.len() != kb.dim() {
        return Err(Error::Dimension(format!(
            "query dim {} does not match knowledge base dim {}",
            turn_vector.len(),
            kb.dim()
        )));
    }

    let mut ranked: Vec<(usize, T)> = kb
        .vectors
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let sim = v
                .iter()
                .zip(turn_vector)
                .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            (i, sim)
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });

    let mut out: RelationEvents<T> = [vec![], vec![], vec![]];
    for &(idx, _) in ranked.iter().take(k) {
        let rec = &kb.records[idx];
        for relation in KnowledgeRelation::ALL {
            let text = rec
                .neighbors(relation)
                .first()
                .cloned()
                .unwrap_or_else(|| format!("{}: {}", relation.tag(), rec.text));
            let vector = kb.embed_atom(&text)?;
            out[relation.index()].push(KnowledgeEvent {
                text,
                relation,
                vector,
                source: EventSource::Retrieved,
            });
        }
    }
    Ok(out)
}

/// Ranked (index, similarity) pairs; exposed for tests and inspection.
pub fn rank_by_similarity<T: Scalar>(kb: &KnowledgeBase<T>, turn_vector: &[T]) -> Vec<(usize, T)> {
    let mut ranked: Vec<(usize, T)> = kb
        .vectors
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let sim = v
                .iter()
                .zip(turn_vector)
                .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            (i, sim)
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    ranked
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// Generative knowledge provider. The stub is a pure function of
/// (text, relation, k): `<relation>: <first five tokens>` with a ` #k`
/// suffix for k > 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Stub,
}

fn stub_event_text(text: &str, relation: KnowledgeRelation, k: usize) -> String {
    let head: Vec<&str> = text.split_whitespace().take(5).collect();
    let base = format!("{}: {}", relation.tag(), head.join(" "));
    if k == 0 {
        base
    } else {
        format!("{base} #{k}")
    }
}

/// Generate K events per relation for a turn.
pub fn generate_events<T: Scalar>(
    generator: Generator,
    embedder: &EmbeddingProvider,
    turn_id: &str,
    turn_text: &str,
    k: usize,
) -> Result<RelationEvents<T>> {
    if k == 0 {
        return Err(Error::Config("generation needs K >= 1".into()));
    }
    let Generator::Stub = generator;
    let mut out: RelationEvents<T> = [vec![], vec![], vec![]];
    for relation in KnowledgeRelation::ALL {
        for i in 0..k {
            let text = stub_event_text(turn_text, relation, i);
            let vector = embedder
                .embed_free_text(&text)
                .map_err(|e| Error::Provider {
                    turn_id: turn_id.to_string(),
                    message: e.to_string(),
                })?;
            out[relation.index()].push(KnowledgeEvent {
                text,
                relation,
                vector,
                source: EventSource::Generated,
            });
        }
    }
    Ok(out)
}

/// Both halves of a turn's knowledge, as stacked matrices ready for pooling.
#[derive(Debug, Clone)]
pub struct TurnKnowledge<T: Scalar> {
    pub retrieved: [Array2<T>; 3],
    pub generated: [Array2<T>; 3],
}

/// Retrieve + generate for one turn and stack the vectors.
pub fn gather_turn_knowledge<T: Scalar>(
    kb: &KnowledgeBase<T>,
    generator: Generator,
    turn_id: &str,
    turn_text: &str,
    k: usize,
) -> Result<TurnKnowledge<T>> {
    let query = kb.embed_query(turn_text)?;
    let retrieved = retrieve_events(kb, &query, k)?;
    let generated = generate_events(generator, kb_embedder(kb), turn_id, turn_text, k)?;
    Ok(TurnKnowledge {
        retrieved: [
            relation_matrix(&retrieved[0]),
            relation_matrix(&retrieved[1]),
            relation_matrix(&retrieved[2]),
        ],
        generated: [
            relation_matrix(&generated[0]),
            relation_matrix(&generated[1]),
            relation_matrix(&generated[2]),
        ],
    })
}

fn kb_embedder<T: Scalar>(kb: &KnowledgeBase<T>) -> &EmbeddingProvider {
    &kb.embedder
}

// ---------------------------------------------------------------------------
// Attention pooling and aggregation
// ---------------------------------------------------------------------------

/// Register aggregation parameters: a query projection into event space, and
/// the output projection applied to the three concatenated pooled vectors.
pub fn register_aggregator<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    query_dim: usize,
    event_dim: usize,
    seed: u64,
) {
    store.insert_init(&format!("{prefix}.w_query"), query_dim, event_dim, query_dim, seed);
    store.insert_init(
        &format!("{prefix}.w_out"),
        3 * event_dim,
        event_dim,
        3 * event_dim,
        seed,
    );
    store.insert_zeros(&format!("{prefix}.b_out"), 1, event_dim);
}

/// Attention-pool one relation's K x d event matrix with a projected query
/// (1 x d): softmax over scaled dot products, convex combination of rows.
pub fn pool_relation_vars<T: Scalar>(tape: &Tape<T>, events: Var, q_proj: Var) -> (Var, Var) {
    let d = tape.shape(events).1;
    let logits = tape.scale(
        tape.matmul(q_proj, tape.transpose(events)),
        1.0 / (d as f64).sqrt(),
    );
    let weights = tape.row_softmax(logits, None);
    let pooled = tape.matmul(weights, events);
    (weights, pooled)
}

/// Full aggregation for one source: pool each relation with the projected
/// query, concatenate the three pooled vectors, and project to the
/// knowledge dimension.
pub fn aggregate_vars<T: Scalar>(
    binder: &Binder<T>,
    prefix: &str,
    events: &[Var; 3],
    query: Var,
) -> Var {
    let t = binder.tape();
    let q_proj = t.matmul(query, binder.var(&format!("{prefix}.w_query")));
    let pooled: Vec<Var> = events
        .iter()
        .map(|&e| pool_relation_vars(t, e, q_proj).1)
        .collect();
    let merged = t.concat_cols(&pooled);
    t.add_row(
        t.matmul(merged, binder.var(&format!("{prefix}.w_out"))),
        binder.var(&format!("{prefix}.b_out")),
    )
}

/// Standalone aggregator owning its parameters.
#[derive(Debug, Clone)]
pub struct KnowledgeAggregator<T: Scalar> {
    query_dim: usize,
    event_dim: usize,
    store: ParamStore<T>,
}

impl<T: Scalar> KnowledgeAggregator<T> {
    pub fn new(query_dim: usize, event_dim: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        register_aggregator(&mut store, "agg", query_dim, event_dim, seed);
        KnowledgeAggregator {
            query_dim,
            event_dim,
            store,
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Aggregate one source's event matrices with the turn query.
    pub fn aggregate(&self, events: &[Array2<T>; 3], query: &[T]) -> Result<Vec<T>> {
        if query.len() != self.query_dim {
            return Err(Error::Dimension(format!(
                "query dim {} != {}",
                query.len(),
                self.query_dim
            )));
        }
        for e in events {
            if e.nrows() == 0 {
                return Err(Error::Data("aggregation needs K >= 1 events".into()));
            }
            if e.ncols() != self.event_dim {
                return Err(Error::Dimension(format!(
                    "event dim {} != {}",
                    e.ncols(),
                    self.event_dim
                )));
            }
        }
        let tape = Tape::new();
        let binder = Binder::new(&tape, &self.store);
        let ev = [
            tape.leaf(events[0].clone()),
            tape.leaf(events[1].clone()),
            tape.leaf(events[2].clone()),
        ];
        let q = tape.leaf(Array2::from_shape_vec((1, query.len()), query.to_vec()).unwrap());
        let out = aggregate_vars(&binder, "agg", &ev, q);
        Ok(tape.value(out).row(0).to_vec())
    }
}

/// Plain attention pooling of one relation (weights and pooled vector), for
/// inspection and oracle tests.
pub fn attention_pool<T: Scalar>(events: &Array2<T>, q_proj: &[T]) -> (Vec<T>, Vec<T>) {
    let tape: Tape<T> = Tape::new();
    let e = tape.leaf(events.clone());
    let q = tape.leaf(Array2::from_shape_vec((1, q_proj.len()), q_proj.to_vec()).unwrap());
    let (w, p) = pool_relation_vars(&tape, e, q);
    (tape.value(w).row(0).to_vec(), tape.value(p).row(0).to_vec())
}

// ---------------------------------------------------------------------------
// Pointer gate
// ---------------------------------------------------------------------------

/// Sample a pair of standard Gumbel noises.
pub fn gumbel_pair(rng: &mut impl rand::Rng) -> (f64, f64) {
    let mut draw = || -> f64 {
        let u: f64 = rng.gen_range(f64::EPSILON..1.0);
        -(-u.ln()).ln()
    };
    (draw(), draw())
}

pub fn register_gate<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    text_dim: usize,
    knowledge_dim: usize,
    seed: u64,
) {
    let d = text_dim + 2 * knowledge_dim;
    store.insert_init(&format!("{prefix}.w"), d, 1, d, seed);
}

/// Gate logit on the tape: `[t, e, g] . w`.
pub fn gate_logit_vars<T: Scalar>(binder: &Binder<T>, prefix: &str, t: Var, e: Var, g: Var) -> Var {
    let tape = binder.tape();
    let cat = tape.concat_cols(&[t, e, g]);
    tape.matmul(cat, binder.var(&format!("{prefix}.w")))
}

/// Hard straight-through fusion on the tape, given a tempered selection
/// probability `soft` (1x1) and the already-decided branch. Forward copies
/// the chosen branch bit-exactly.
pub fn fuse_hard_vars<T: Scalar>(tape: &Tape<T>, soft: Var, e: Var, g: Var, pick_retrieved: bool) -> Var {
    tape.gate_select(soft, e, g, pick_retrieved)
}

/// Soft fusion on the tape: `pi * e + (1 - pi) * g`.
pub fn fuse_soft_vars<T: Scalar>(tape: &Tape<T>, pi: Var, e: Var, g: Var) -> Var {
    let one = tape.scalar(T::one());
    let complement = tape.sub(one, pi);
    tape.add(tape.scalar_mul(pi, e), tape.scalar_mul(complement, g))
}

/// Which source a hard gate picked, or the soft mixing weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GateSelection<T> {
    /// Hard selection; true means the retrieved source was chosen.
    Hard(bool),
    /// Soft mixing probability of the retrieved source.
    Soft(T),
}

/// Standalone pointer gate owning its weight vector.
#[derive(Debug, Clone)]
pub struct PointerGate<T: Scalar> {
    text_dim: usize,
    knowledge_dim: usize,
    pub temperature: f64,
    store: ParamStore<T>,
}

impl<T: Scalar> PointerGate<T> {
    pub fn new(text_dim: usize, knowledge_dim: usize, temperature: f64, seed: u64) -> Self {
        assert!(temperature > 0.0, "temperature must be positive");
        let mut store = ParamStore::new();
        register_gate(&mut store, "gate", text_dim, knowledge_dim, seed);
        PointerGate {
            text_dim,
            knowledge_dim,
            temperature,
            store,
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn logit(&self, t: &[T], e: &[T], g: &[T]) -> Result<T> {
        if t.len() != self.text_dim || e.len() != self.knowledge_dim || g.len() != self.knowledge_dim
        {
            return Err(Error::Dimension(format!(
                "gate expects dims ({}, {}, {}), got ({}, {}, {})",
                self.text_dim,
                self.knowledge_dim,
                self.knowledge_dim,
                t.len(),
                e.len(),
                g.len()
            )));
        }
        for (name, v) in [("t", t), ("e", e), ("g", g)] {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gate input `{name}`")));
            }
        }
        let w = self.store.get("gate.w");
        let mut acc = T::zero();
        for (i, &x) in t.iter().chain(e).chain(g).enumerate() {
            acc = acc + x * w[(i, 0)];
        }
        Ok(acc)
    }
}

/// Select between the retrieved vector `e` and the generated vector `g`.
///
/// Hard mode picks by the sign of the logit (argmax of the two-way softmax,
/// noise-free as used at inference) and copies the winner bit-exactly. Soft
/// mode returns the convex combination with `pi = sigmoid(logit)`.
pub fn pointer_select<T: Scalar>(
    gate: &PointerGate<T>,
    t: &[T],
    e: &[T],
    g: &[T],
    hard: bool,
) -> Result<(GateSelection<T>, Vec<T>)> {
    let logit = gate.logit(t, e, g)?;
    if hard {
        let pick_retrieved = logit > T::zero();
        let fused = if pick_retrieved { e.to_vec() } else { g.to_vec() };
        Ok((GateSelection::Hard(pick_retrieved), fused))
    } else {
        let pi = T::one() / (T::one() + (-logit).exp());
        let one = T::one();
        let fused = e
            .iter()
            .zip(g)
            .map(|(&ev, &gv)| pi * ev + (one - pi) * gv)
            .collect();
        Ok((GateSelection::Soft(pi), fused))
    }
}

/// Tempered two-way Gumbel-softmax probability of picking the retrieved
/// source, given the gate logit and a fixed noise pair. The hard argmax
/// under the same noise is `logit + g1 - g2 > 0`.
pub fn tempered_selection_prob(logit: f64, noise: (f64, f64), temperature: f64) -> f64 {
    let z = (logit + noise.0 - noise.1) / temperature;
    1.0 / (1.0 + (-z).exp())
}
