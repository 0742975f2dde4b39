//! Turn-level sequential encoding of the four input channels: text, user id,
//! perception score, and (downstream) commonsense knowledge.
//!
//! Text has two modes: a deterministic hashed bag-of-tokens encoder that
//! works with zero external artifacts, and a precomputed-vector lookup for
//! pipelines that extracted contextual embeddings offline. User ids map to
//! fixed random vectors (never trained, so no real identity enters the
//! model); scores map through the fitted binning into a learnable 7-row
//! table; sequences then pass through a bidirectional recurrent encoder.

use crate::corpus::{ScoreBinning, Turn, SCORE_BIN_COUNT};
use crate::error::{Error, Result};
use crate::hashing::{derive_seed, fnv1a64};
use crate::nn::{self, Binder, LstmSpec, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::RwLock;

// ---------------------------------------------------------------------------
// Text embedding provider
// ---------------------------------------------------------------------------

/// Deterministic pseudo-random vector for one token. Seeded by the token's
/// own hash so the result is independent of call order.
pub fn token_vector<T: Scalar>(token: &str, seed: u64, dim: usize) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(token.as_bytes()) ^ seed.rotate_left(32));
    (0..dim).map(|_| T::of(rng.gen_range(-1.0..1.0))).collect()
}

/// Source of per-turn text vectors.
#[derive(Debug)]
pub enum EmbeddingProvider {
    /// Bag-of-hashed-tokens average; pure function of (text, seed).
    Hashed { seed: u64, dim: usize },
    /// Vectors extracted offline, keyed by (conv_id, turn_id).
    Precomputed {
        dim: usize,
        vectors: HashMap<(String, String), Vec<f64>>,
    },
}

impl EmbeddingProvider {
    pub fn hashed(seed: u64, dim: usize) -> Self {
        EmbeddingProvider::Hashed { seed, dim }
    }

    pub fn dim(&self) -> usize {
        match self {
            EmbeddingProvider::Hashed { dim, .. } => *dim,
            EmbeddingProvider::Precomputed { dim, .. } => *dim,
        }
    }

    pub fn is_hashed(&self) -> bool {
        matches!(self, EmbeddingProvider::Hashed { .. })
    }

    /// Embed free text. Only the hashed mode can do this; the precomputed
    /// mode knows nothing beyond the turns it was extracted for.
    pub fn embed_free_text<T: Scalar>(&self, text: &str) -> Result<Vec<T>> {
        match self {
            EmbeddingProvider::Hashed { seed, dim } => {
                let tokens: Vec<String> =
                    text.split_whitespace().map(|t| t.to_lowercase()).collect();
                if tokens.is_empty() {
                    return Err(Error::Data(format!("cannot embed empty text: {text:?}")));
                }
                let mut acc = vec![T::zero(); *dim];
                for tok in &tokens {
                    for (a, v) in acc.iter_mut().zip(token_vector::<T>(tok, *seed, *dim)) {
                        *a = *a + v;
                    }
                }
                let n = T::of(tokens.len() as f64);
                for a in &mut acc {
                    *a = *a / n;
                }
                Ok(acc)
            }
            EmbeddingProvider::Precomputed { .. } => Err(Error::Config(
                "precomputed provider cannot embed free text; use the hashed mode".into(),
            )),
        }
    }

    /// One vector per turn, stacked row-wise.
    pub fn embed_turns<T: Scalar>(&self, conv_id: &str, turns: &[Turn]) -> Result<Array2<T>> {
        let mut out = Array2::zeros((turns.len(), self.dim()));
        for (i, turn) in turns.iter().enumerate() {
            let row: Vec<T> = match self {
                EmbeddingProvider::Hashed { .. } => self.embed_free_text(&turn.text)?,
                EmbeddingProvider::Precomputed { dim, vectors } => {
                    let key = (conv_id.to_string(), turn.turn_id.clone());
                    let v = vectors.get(&key).ok_or_else(|| Error::Provider {
                        turn_id: turn.turn_id.clone(),
                        message: format!(
                            "no precomputed vector for conversation `{conv_id}` turn `{}`",
                            turn.turn_id
                        ),
                    })?;
                    if v.len() != *dim {
                        return Err(Error::Dimension(format!(
                            "precomputed vector for `{conv_id}/{}` has dim {}, expected {dim}",
                            turn.turn_id,
                            v.len()
                        )));
                    }
                    v.iter().map(|&x| T::of(x)).collect()
                }
            };
            for (j, v) in row.into_iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        Ok(out)
    }

    /// Load a precomputed-vector file: one JSON object per line with
    /// `{"conv_id", "turn_id", "vector": [..]}`.
    pub fn load_precomputed(path: &Path, dim: usize) -> Result<Self> {
        #[derive(serde::Deserialize)]
        struct Record {
            conv_id: String,
            turn_id: String,
            vector: Vec<f64>,
        }
        if !path.exists() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        let file = File::open(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut vectors = HashMap::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Json {
                path: path.to_path_buf(),
                source: e,
            })?;
            if rec.vector.len() != dim {
                return Err(Error::Dimension(format!(
                    "vector for `{}/{}` has dim {}, expected {dim}",
                    rec.conv_id,
                    rec.turn_id,
                    rec.vector.len()
                )));
            }
            vectors.insert((rec.conv_id, rec.turn_id), rec.vector);
        }
        Ok(EmbeddingProvider::Precomputed { dim, vectors })
    }
}

// ---------------------------------------------------------------------------
// User embedding table
// ---------------------------------------------------------------------------

/// Fixed random per-user vectors, uniform in (-0.1, 0.1). Each vector is a
/// pure function of (user_id, seed), so the lazily grown table is only a
/// memo and two runs with the same seed agree regardless of arrival order.
#[derive(Debug)]
pub struct UserEmbeddingTable<T: Scalar> {
    seed: u64,
    dim: usize,
    table: RwLock<HashMap<String, Vec<T>>>,
}

impl<T: Scalar> UserEmbeddingTable<T> {
    pub fn new(seed: u64, dim: usize) -> Self {
        UserEmbeddingTable {
            seed,
            dim,
            table: RwLock::new(HashMap::new()),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.table.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn vector(&self, user_id: &str) -> Vec<T> {
        if let Some(v) = self.table.read().unwrap().get(user_id) {
            return v.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, user_id) ^ 0x75736572);
        let v: Vec<T> = (0..self.dim)
            .map(|_| T::of(rng.gen_range(-0.1..0.1)))
            .collect();
        self.table
            .write()
            .unwrap()
            .insert(user_id.to_string(), v.clone());
        v
    }
}

/// One user vector per turn; same user, same vector.
pub fn embed_users<T: Scalar>(table: &UserEmbeddingTable<T>, turns: &[Turn]) -> Array2<T> {
    let mut out = Array2::zeros((turns.len(), table.dim()));
    for (i, turn) in turns.iter().enumerate() {
        for (j, v) in table.vector(&turn.user_id).into_iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Score embedding
// ---------------------------------------------------------------------------

/// Look up each turn's bin row in the learnable 7-row score table.
pub fn embed_scores<T: Scalar>(
    binning: &ScoreBinning,
    turns: &[Turn],
    score_table: &Array2<T>,
) -> Array2<T> {
    assert_eq!(
        score_table.nrows(),
        SCORE_BIN_COUNT,
        "score table must have 7 rows"
    );
    let mut out = Array2::zeros((turns.len(), score_table.ncols()));
    for (i, turn) in turns.iter().enumerate() {
        out.row_mut(i)
            .assign(&score_table.row(binning.bin(turn.score)));
    }
    out
}

/// Bin indices used by the tape path to gather rows from the score table.
pub fn score_bin_indices(binning: &ScoreBinning, turns: &[Turn]) -> Vec<usize> {
    turns.iter().map(|t| binning.bin(t.score)).collect()
}

// ---------------------------------------------------------------------------
// Sequence encoder
// ---------------------------------------------------------------------------

/// Standalone bidirectional recurrent encoder: input dim D in, 2H out per
/// position. The training pipeline drives the same forward through its own
/// parameter store; this type owns parameters for direct use and testing.
#[derive(Debug)]
pub struct SequenceEncoder<T: Scalar> {
    spec: LstmSpec,
    store: ParamStore<T>,
}

impl<T: Scalar> SequenceEncoder<T> {
    pub fn new(input_dim: usize, hidden: usize, seed: u64) -> Self {
        let spec = LstmSpec { input_dim, hidden };
        let mut store = ParamStore::new();
        nn::register_bilstm(&mut store, "seq", spec, seed);
        SequenceEncoder { spec, store }
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Encode a row-major sequence (one row per position).
    pub fn encode(&self, xs: &Array2<T>) -> Result<Array2<T>> {
        if xs.nrows() == 0 {
            return Err(Error::Data("cannot encode an empty sequence".into()));
        }
        if xs.ncols() != self.spec.input_dim {
            return Err(Error::Dimension(format!(
                "sequence encoder expects input dim {}, got {}",
                self.spec.input_dim,
                xs.ncols()
            )));
        }
        let tape = Tape::new();
        let binder = Binder::new(&tape, &self.store);
        let rows: Vec<Var> = (0..xs.nrows())
            .map(|i| tape.leaf(xs.row(i).insert_axis(ndarray::Axis(0)).to_owned()))
            .collect();
        let outs = nn::bilstm_forward(&binder, "seq", self.spec, &rows);
        let stacked = tape.concat_rows(&outs);
        Ok(tape.value(stacked))
    }
}

/// Per-channel sequential encodings for one conversation prefix; all present
/// channels have one row per visible turn.
#[derive(Debug, Clone)]
pub struct SequentialFeatures<T: Scalar> {
    pub text: Array2<T>,
    pub user: Option<Array2<T>>,
    pub score: Option<Array2<T>>,
    pub knowledge: Option<Array2<T>>,
}

impl<T: Scalar> SequentialFeatures<T> {
    pub fn validate(&self) -> Result<()> {
        let n = self.text.nrows();
        for (name, ch) in [
            ("user", &self.user),
            ("score", &self.score),
            ("knowledge", &self.knowledge),
        ] {
            if let Some(m) = ch {
                if m.nrows() != n {
                    return Err(Error::Dimension(format!(
                        "channel `{name}` has {} rows, text has {n}",
                        m.nrows()
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn turn(id: &str, text: &str, user: &str, score: Option<i64>) -> Turn {
        Turn {
            turn_id: id.into(),
            text: text.into(),
            user_id: user.into(),
            score,
            parent_id: None,
        }
    }

    #[test]
    fn hashed_embedding_is_deterministic() {
        let p = EmbeddingProvider::hashed(11, 8);
        let a: Vec<f64> = p.embed_free_text("some words here").unwrap();
        let b: Vec<f64> = p.embed_free_text("some words here").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hashed_embedding_is_mean_of_token_vectors() {
        // Independent token-hash oracle for the text "a b".
        let p = EmbeddingProvider::hashed(5, 6);
        let got: Vec<f64> = p.embed_free_text("a b").unwrap();
        let va = token_vector::<f64>("a", 5, 6);
        let vb = token_vector::<f64>("b", 5, 6);
        for j in 0..6 {
            let expect = (va[j] + vb[j]) / 2.0;
            assert!((got[j] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn one_vector_per_turn_with_provider_dim() {
        let p = EmbeddingProvider::hashed(1, 16);
        let turns = vec![
            turn("t1", "hello there", "a", None),
            turn("t2", "general kenobi", "b", None),
            turn("t3", "indeed", "a", None),
        ];
        let m = p.embed_turns::<f64>("c", &turns).unwrap();
        assert_eq!(m.dim(), (3, 16));
    }

    #[test]
    fn user_table_repeats_vectors_for_repeat_users() {
        let table = UserEmbeddingTable::<f64>::new(3, 4);
        let turns = vec![
            turn("t1", "x", "A", None),
            turn("t2", "y", "B", None),
            turn("t3", "z", "A", None),
        ];
        let m = embed_users(&table, &turns);
        assert_eq!(m.row(0), m.row(2));
        assert_ne!(m.row(0), m.row(1));
        assert_eq!(table.len(), 2);
    }

    #[test]
    fn user_table_same_seed_same_vectors() {
        let t1 = UserEmbeddingTable::<f64>::new(9, 8);
        let t2 = UserEmbeddingTable::<f64>::new(9, 8);
        // Different query order must not matter.
        let a1 = t1.vector("alpha");
        let _ = t2.vector("beta");
        let a2 = t2.vector("alpha");
        assert_eq!(a1, a2);
    }

    #[test]
    fn hundred_distinct_users_get_distinct_vectors() {
        let table = UserEmbeddingTable::<f64>::new(17, 16);
        let vecs: Vec<Vec<f64>> = (0..100)
            .map(|i| table.vector(&format!("user{i}")))
            .collect();
        for i in 0..vecs.len() {
            for j in i + 1..vecs.len() {
                assert_ne!(vecs[i], vecs[j], "users {i} and {j} collided");
            }
        }
    }

    fn binning() -> ScoreBinning {
        ScoreBinning {
            positive_boundaries: vec![1, 3],
            negative_boundaries: vec![-3, -1],
        }
    }

    #[test]
    fn equal_scores_share_embedding_rows() {
        let table = Array2::from_shape_fn((SCORE_BIN_COUNT, 3), |(i, j)| (i * 3 + j) as f64);
        let turns = vec![
            turn("t1", "x", "u", Some(2)),
            turn("t2", "y", "u", Some(2)),
            turn("t3", "z", "u", Some(9)),
        ];
        let m = embed_scores(&binning(), &turns, &table);
        assert_eq!(m.row(0), m.row(1));
        assert_ne!(m.row(0), m.row(2));
    }

    #[test]
    fn zero_and_missing_scores_share_the_neutral_row() {
        let table = Array2::from_shape_fn((SCORE_BIN_COUNT, 2), |(i, j)| (i + j) as f64);
        let turns = vec![turn("t1", "x", "u", Some(0)), turn("t2", "y", "u", None)];
        let m = embed_scores(&binning(), &turns, &table);
        assert_eq!(m.row(0), m.row(1));
    }

    #[test]
    fn five_turns_five_score_rows() {
        let table = Array2::<f64>::zeros((SCORE_BIN_COUNT, 5));
        let turns: Vec<Turn> = (0..5)
            .map(|i| turn(&format!("t{i}"), "x", "u", Some(i as i64)))
            .collect();
        assert_eq!(embed_scores(&binning(), &turns, &table).dim(), (5, 5));
    }

    #[test]
    fn encoder_shapes_and_errors() {
        let enc = SequenceEncoder::<f64>::new(4, 3, 7);
        let one = Array2::from_elem((1, 4), 0.3);
        let out = enc.encode(&one).unwrap();
        assert_eq!(out.dim(), (1, 6));

        let bad = Array2::from_elem((2, 5), 0.0);
        assert!(matches!(enc.encode(&bad), Err(Error::Dimension(_))));
        let empty = Array2::zeros((0, 4));
        assert!(enc.encode(&empty).is_err());
    }

    #[test]
    fn encoder_is_bidirectional() {
        // Permuting later inputs changes earlier outputs.
        let enc = SequenceEncoder::<f64>::new(2, 2, 13);
        let base = ndarray::array![[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]];
        let swapped = ndarray::array![[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]];
        let a = enc.encode(&base).unwrap();
        let b = enc.encode(&swapped).unwrap();
        let first_row_delta: f64 = a
            .row(0)
            .iter()
            .zip(b.row(0).iter())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(first_row_delta > 1e-9);
    }

    #[test]
    fn zero_weight_encoder_emits_zeros() {
        let mut enc = SequenceEncoder::<f64>::new(3, 2, 1);
        let store = enc.store_mut();
        for name in [
            "seq.fwd.w_input",
            "seq.fwd.w_hidden",
            "seq.bwd.w_input",
            "seq.bwd.w_hidden",
        ] {
            let dim = store.get(name).dim();
            store.set(name, Array2::zeros(dim));
        }
        let xs = Array2::from_elem((3, 3), 1.7);
        let out = enc.encode(&xs).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn precomputed_provider_round_trip_and_missing_key() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vectors.jsonl");
        std::fs::write(
            &path,
            "{\"conv_id\":\"c1\",\"turn_id\":\"t1\",\"vector\":[1.0,2.0]}\n\
             {\"conv_id\":\"c1\",\"turn_id\":\"t2\",\"vector\":[3.0,4.0]}\n",
        )
        .unwrap();
        let p = EmbeddingProvider::load_precomputed(&path, 2).unwrap();
        let turns = vec![turn("t1", "x", "u", None), turn("t2", "y", "u", None)];
        let m = p.embed_turns::<f64>("c1", &turns).unwrap();
        assert_eq!(m[(0, 0)], 1.0);
        assert_eq!(m[(1, 1)], 4.0);

        let missing = vec![turn("t9", "x", "u", None)];
        assert!(p.embed_turns::<f64>("c1", &missing).is_err());
    }
}
