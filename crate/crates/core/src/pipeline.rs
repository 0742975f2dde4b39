//! The full forecasting model: construction, the tape forward pass over a
//! conversation prefix, training (static and dynamic paradigms), dynamic
//! inference with the max rule, and checkpoint I/O.
//!
//! Static training uses one instance per conversation (all visible turns);
//! dynamic training expands every conversation into its N-1 prefixes.
//! Inference is always dynamic: the model runs on each prefix, the final
//! label is the max over prefix labels, and the first detection index
//! yields the forecast horizon `N - first_detection`.

use crate::corpus::{
    Conversation, Label, ScoreBinning, Turn, SCORE_BIN_COUNT,
};
use crate::error::{Error, Result};
use crate::features::{
    embed_users, score_bin_indices, EmbeddingProvider, UserEmbeddingTable,
};
use crate::gcn::{register_rgcn, transform_channel_vars, RgcnDims};
use crate::graph::{attention_alpha_vars, build_graph, ConversationGraph, WeightedGraph};
use crate::hashing::derive_seed;
use crate::knowledge::{
    aggregate_vars, gate_logit_vars, gather_turn_knowledge, gumbel_pair, register_aggregator,
    register_gate, Generator, KnowledgeBase, TurnKnowledge,
};
use crate::metrics::confusion_metrics;
use crate::model::{
    assemble_capsule_vars, ed_head_logit_vars, encoder_head_logit_vars, majority_label,
    prob_to_label, register_head, simple_head_logit_vars, CapsuleConfig, CapsuleVariant, Channel,
    ChannelDims, ClassifierKind, HeadConfig,
};
use crate::nn::{self, clip_global_norm, Adam, Binder, LstmSpec, ParamStore, PortableParams};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    Static,
    Dynamic,
}

impl Paradigm {
    /// Dynamically trained models carry a "+" suffix in reports.
    pub fn suffix(self) -> &'static str {
        match self {
            Paradigm::Static => "",
            Paradigm::Dynamic => "+",
        }
    }
}

/// Gumbel temperature schedule: starts at `initial`, multiplied by `anneal`
/// each epoch, clamped at `floor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperatureSchedule {
    #[serde(default = "TemperatureSchedule::default_initial")]
    pub initial: f64,
    #[serde(default = "TemperatureSchedule::default_anneal")]
    pub anneal: f64,
    #[serde(default = "TemperatureSchedule::default_floor")]
    pub floor: f64,
}

impl TemperatureSchedule {
    fn default_initial() -> f64 {
        1.0
    }
    fn default_anneal() -> f64 {
        0.95
    }
    fn default_floor() -> f64 {
        0.1
    }

    pub fn at_epoch(&self, epoch: usize) -> f64 {
        (self.initial * self.anneal.powi(epoch as i32)).max(self.floor)
    }
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        TemperatureSchedule {
            initial: 1.0,
            anneal: 0.95,
            floor: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub paradigm: Paradigm,
    #[serde(default = "TrainConfig::default_epochs")]
    pub epochs: usize,
    #[serde(default = "TrainConfig::default_lr")]
    pub learning_rate: f64,
    #[serde(default = "TrainConfig::default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Early-stopping patience on validation F1 (epochs without improvement).
    #[serde(default = "TrainConfig::default_patience")]
    pub patience: usize,
    #[serde(default = "TrainConfig::default_clip")]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub temperature: TemperatureSchedule,
    /// Track per-epoch training accuracy (implied by
    /// `stop_at_train_accuracy`).
    #[serde(default)]
    pub track_train_accuracy: bool,
    /// Stop as soon as training accuracy reaches this level.
    #[serde(default)]
    pub stop_at_train_accuracy: Option<f64>,
}

impl TrainConfig {
    fn default_epochs() -> usize {
        50
    }
    fn default_lr() -> f64 {
        1e-3
    }
    fn default_batch() -> usize {
        8
    }
    fn default_patience() -> usize {
        10
    }
    fn default_clip() -> Option<f64> {
        Some(5.0)
    }

    pub fn new(paradigm: Paradigm) -> Self {
        TrainConfig {
            paradigm,
            epochs: Self::default_epochs(),
            learning_rate: Self::default_lr(),
            batch_size: Self::default_batch(),
            seed: 0,
            patience: Self::default_patience(),
            clip_norm: Self::default_clip(),
            temperature: TemperatureSchedule::default(),
            track_train_accuracy: false,
            stop_at_train_accuracy: None,
        }
    }
}

/// How turn text becomes the text-channel vectors: contextual embeddings are
/// used directly as x'; recurrent mode passes static embeddings through the
/// bidirectional encoder first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextMode {
    Contextual,
    Recurrent,
}

impl Default for TextMode {
    fn default() -> Self {
        TextMode::Contextual
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: CapsuleVariant,
    pub head: ClassifierKind,
    #[serde(default)]
    pub text_mode: TextMode,
    #[serde(default)]
    pub dims: ChannelDims,
    #[serde(default = "ModelConfig::default_buckets")]
    pub relation_buckets: usize,
    #[serde(default = "ModelConfig::default_top_k")]
    pub top_k: usize,
    #[serde(default)]
    pub head_config: HeadConfig,
}

impl ModelConfig {
    fn default_buckets() -> usize {
        8
    }
    fn default_top_k() -> usize {
        3
    }

    pub fn new(variant: CapsuleVariant, head: ClassifierKind) -> Self {
        ModelConfig {
            variant,
            head,
            text_mode: TextMode::default(),
            dims: ChannelDims::default(),
            relation_buckets: 8,
            top_k: 3,
            head_config: HeadConfig::default(),
        }
    }

    pub fn capsule(&self) -> CapsuleConfig {
        CapsuleConfig {
            variant: self.variant,
            dims: self.dims,
        }
    }

    /// Model name for manifests and reports, e.g. `TCNSU-E+`.
    pub fn model_name(&self, paradigm: Paradigm) -> String {
        format!("{}-{}{}", self.variant, self.head, paradigm.suffix())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextProviderMode {
    Hashed,
    Precomputed,
}

impl Default for TextProviderMode {
    fn default() -> Self {
        TextProviderMode::Hashed
    }
}

/// External resources the model is built from: the text provider, the
/// knowledge base, and the fixed seeds for the non-trained embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourcesConfig {
    pub kb_path: PathBuf,
    #[serde(default)]
    pub provider_mode: TextProviderMode,
    #[serde(default = "ResourcesConfig::default_provider_dim")]
    pub provider_dim: usize,
    #[serde(default)]
    pub vectors_path: Option<PathBuf>,
    #[serde(default = "ResourcesConfig::default_provider_seed")]
    pub provider_seed: u64,
    #[serde(default = "ResourcesConfig::default_knowledge_seed")]
    pub knowledge_seed: u64,
    #[serde(default = "ResourcesConfig::default_user_seed")]
    pub user_seed: u64,
    #[serde(default = "ResourcesConfig::default_generator")]
    pub generator: Generator,
}

impl ResourcesConfig {
    fn default_provider_dim() -> usize {
        64
    }
    fn default_provider_seed() -> u64 {
        11
    }
    fn default_knowledge_seed() -> u64 {
        13
    }
    fn default_user_seed() -> u64 {
        17
    }
    fn default_generator() -> Generator {
        Generator::Stub
    }

    pub fn hashed(kb_path: PathBuf, provider_dim: usize) -> Self {
        ResourcesConfig {
            kb_path,
            provider_mode: TextProviderMode::Hashed,
            provider_dim,
            vectors_path: None,
            provider_seed: Self::default_provider_seed(),
            knowledge_seed: Self::default_knowledge_seed(),
            user_seed: Self::default_user_seed(),
            generator: Generator::Stub,
        }
    }
}

// ---------------------------------------------------------------------------
// Prediction traces
// ---------------------------------------------------------------------------

/// Per-prefix predictions for one conversation plus the aggregated verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionTrace {
    pub conv_id: String,
    /// N, the full turn count including the forecast target turn.
    pub turn_count: usize,
    /// Labels for prefixes 1..=N-1, in order.
    pub prefix_labels: Vec<Label>,
    /// Max rule: attack if any prefix said attack.
    pub final_label: Label,
    /// 1-based prefix length of the first attack prediction.
    pub first_detection: Option<usize>,
    /// `turn_count - first_detection`, when detected.
    pub horizon: Option<usize>,
}

impl PredictionTrace {
    /// Derive the aggregate fields from per-prefix labels.
    pub fn from_prefix_labels(
        conv_id: String,
        turn_count: usize,
        prefix_labels: Vec<Label>,
    ) -> Self {
        assert_eq!(
            prefix_labels.len(),
            turn_count - 1,
            "expected one label per prefix"
        );
        let first_detection = prefix_labels
            .iter()
            .position(|l| l.is_attack())
            .map(|i| i + 1);
        let final_label = Label::from_attack_flag(first_detection.is_some());
        let horizon = first_detection.map(|fd| turn_count - fd);
        PredictionTrace {
            conv_id,
            turn_count,
            prefix_labels,
            final_label,
            first_detection,
            horizon,
        }
    }
}

// ---------------------------------------------------------------------------
// Encoded conversations (pre-model caches)
// ---------------------------------------------------------------------------

/// Everything about a conversation that does not depend on trainable
/// parameters: provider embeddings, user vectors, score bins, and the
/// retrieved/generated knowledge matrices per turn. Prefix instances slice
/// this cache.
#[derive(Debug, Clone)]
pub struct EncodedConversation<T: Scalar> {
    pub conv_id: String,
    pub label: Label,
    /// N, including the final (hidden) turn.
    pub turn_count: usize,
    /// The visible turns 1..N-1.
    pub turns: Vec<Turn>,
    pub text_raw: Array2<T>,
    pub user_raw: Option<Array2<T>>,
    pub score_bins: Option<Vec<usize>>,
    pub knowledge: Vec<TurnKnowledge<T>>,
}

impl<T: Scalar> EncodedConversation<T> {
    pub fn visible_len(&self) -> usize {
        self.turns.len()
    }
}

/// Does any visible turn in the corpus carry a score?
pub fn corpus_has_scores(convs: &[Conversation]) -> bool {
    convs
        .iter()
        .any(|c| c.visible_turns().iter().any(|t| t.score.is_some()))
}

// ---------------------------------------------------------------------------
// The model bundle
// ---------------------------------------------------------------------------

pub struct ForecastModel<T: Scalar> {
    pub config: ModelConfig,
    pub resources: ResourcesConfig,
    pub binning: ScoreBinning,
    pub params: ParamStore<T>,
    provider: EmbeddingProvider,
    user_table: UserEmbeddingTable<T>,
    kb: KnowledgeBase<T>,
}

impl<T: Scalar> std::fmt::Debug for ForecastModel<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ForecastModel")
            .field("config", &self.config)
            .field("parameters", &self.params.len())
            .finish()
    }
}

/// Forward-pass context: evaluation, or training with a temperature and an
/// RNG for Gumbel noise and dropout.
pub struct ForwardCtx<'r> {
    pub tau: f64,
    pub rng: Option<&'r RefCell<ChaCha8Rng>>,
}

impl ForwardCtx<'static> {
    pub fn eval() -> Self {
        ForwardCtx { tau: 1.0, rng: None }
    }
}

struct BuiltForward<'a, T: Scalar> {
    binder: Binder<'a, T>,
    logits: Var,
    topology: ConversationGraph,
    channel_alphas: Vec<(Channel, Vec<Var>)>,
}

impl<T: Scalar> ForecastModel<T> {
    /// Build a fresh model with newly initialized parameters.
    pub fn build(
        config: ModelConfig,
        resources: ResourcesConfig,
        binning: ScoreBinning,
        param_seed: u64,
    ) -> Result<Self> {
        config.dims.validate()?;
        if config.relation_buckets == 0 {
            return Err(Error::Config("relation_buckets must be >= 1".into()));
        }
        if config.top_k == 0 {
            return Err(Error::Config("top_k must be >= 1".into()));
        }

        let provider = match resources.provider_mode {
            TextProviderMode::Hashed => {
                EmbeddingProvider::hashed(resources.provider_seed, resources.provider_dim)
            }
            TextProviderMode::Precomputed => {
                let path = resources.vectors_path.as_ref().ok_or_else(|| {
                    Error::Config("precomputed provider needs vectors_path".into())
                })?;
                EmbeddingProvider::load_precomputed(path, resources.provider_dim)?
            }
        };
        if config.text_mode == TextMode::Contextual && provider.dim() != config.dims.text {
            return Err(Error::Config(format!(
                "contextual text mode uses provider vectors directly: provider dim {} must \
                 equal the text channel dim {}",
                provider.dim(),
                config.dims.text
            )));
        }

        let kb = KnowledgeBase::load(
            &resources.kb_path,
            EmbeddingProvider::hashed(resources.knowledge_seed, config.dims.knowledge),
        )?;
        if kb.is_empty() {
            return Err(Error::Config(format!(
                "knowledge base `{}` has no events",
                resources.kb_path.display()
            )));
        }
        if config.top_k > kb.len() {
            return Err(Error::Config(format!(
                "top_k = {} exceeds knowledge base size {}",
                config.top_k,
                kb.len()
            )));
        }

        let user_table = UserEmbeddingTable::new(resources.user_seed, config.dims.user);
        let mut params = ParamStore::new();
        Self::register_params(&mut params, &config, provider.dim(), param_seed)?;

        Ok(ForecastModel {
            config,
            resources,
            binning,
            params,
            provider,
            user_table,
            kb,
        })
    }

    fn register_params(
        store: &mut ParamStore<T>,
        config: &ModelConfig,
        provider_dim: usize,
        seed: u64,
    ) -> Result<()> {
        let dims = &config.dims;
        if config.text_mode == TextMode::Recurrent {
            nn::register_bilstm(
                store,
                "text.lstm",
                LstmSpec {
                    input_dim: provider_dim,
                    hidden: dims.text / 2,
                },
                seed,
            );
        }
        if config.variant.uses_user() {
            nn::register_bilstm(
                store,
                "user.lstm",
                LstmSpec {
                    input_dim: dims.user,
                    hidden: dims.user / 2,
                },
                seed,
            );
        }
        if config.variant.uses_score() {
            store.insert_init("score.table", SCORE_BIN_COUNT, dims.score, dims.score, seed);
            nn::register_bilstm(
                store,
                "score.lstm",
                LstmSpec {
                    input_dim: dims.score,
                    hidden: dims.score / 2,
                },
                seed,
            );
        }
        register_aggregator(store, "knowledge.agg", dims.text, dims.knowledge, seed);
        register_gate(store, "knowledge.gate", dims.text, dims.knowledge, seed);
        nn::register_bilstm(
            store,
            "knowledge.lstm",
            LstmSpec {
                input_dim: dims.knowledge,
                hidden: dims.knowledge / 2,
            },
            seed,
        );
        for ch in config.variant.channels() {
            let d = dims.of(ch);
            store.insert_init(&format!("graph.{}.w_edge", ch.key()), d, d, d, seed);
            register_rgcn(
                store,
                &format!("gcn.{}", ch.key()),
                RgcnDims {
                    feature_dim: d,
                    buckets: config.relation_buckets,
                },
                seed,
            );
        }
        register_head(
            store,
            "head",
            config.head,
            config.capsule().capsule_dim(),
            &config.head_config,
            seed,
        )?;
        Ok(())
    }

    pub fn knowledge_base(&self) -> &KnowledgeBase<T> {
        &self.kb
    }

    /// Cache everything parameter-independent about one conversation.
    pub fn encode_conversation(&self, conv: &Conversation) -> Result<EncodedConversation<T>> {
        conv.validate()?;
        let visible = conv.visible_turns();
        let text_raw = self.provider.embed_turns(&conv.conv_id, visible)?;
        let user_raw = if self.config.variant.uses_user() {
            Some(embed_users(&self.user_table, visible))
        } else {
            None
        };
        let score_bins = if self.config.variant.uses_score() {
            Some(score_bin_indices(&self.binning, visible))
        } else {
            None
        };
        let knowledge = visible
            .iter()
            .map(|t| {
                gather_turn_knowledge(
                    &self.kb,
                    self.resources.generator,
                    &t.turn_id,
                    &t.text,
                    self.config.top_k,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncodedConversation {
            conv_id: conv.conv_id.clone(),
            label: conv.label,
            turn_count: conv.turn_count(),
            turns: visible.to_vec(),
            text_raw,
            user_raw,
            score_bins,
            knowledge,
        })
    }

    fn forward_internal<'a>(
        &'a self,
        tape: &'a Tape<T>,
        enc: &EncodedConversation<T>,
        prefix_len: usize,
        ctx: &ForwardCtx<'_>,
    ) -> Result<BuiltForward<'a, T>> {
        if prefix_len == 0 || prefix_len > enc.visible_len() {
            return Err(Error::Data(format!(
                "prefix length {prefix_len} out of range 1..={}",
                enc.visible_len()
            )));
        }
        let k = prefix_len;
        let binder = Binder::new(tape, &self.params);
        let dims = &self.config.dims;

        // Text channel x'.
        let text_rows: Vec<Var> = (0..k)
            .map(|i| {
                tape.leaf(
                    enc.text_raw
                        .row(i)
                        .insert_axis(ndarray::Axis(0))
                        .to_owned(),
                )
            })
            .collect();
        let text_prime_rows: Vec<Var> = match self.config.text_mode {
            TextMode::Contextual => text_rows,
            TextMode::Recurrent => nn::bilstm_forward(
                &binder,
                "text.lstm",
                LstmSpec {
                    input_dim: self.provider.dim(),
                    hidden: dims.text / 2,
                },
                &text_rows,
            ),
        };
        let text_prime = tape.concat_rows(&text_prime_rows);

        // User channel x'.
        let user_prime = if self.config.variant.uses_user() {
            let raw = enc
                .user_raw
                .as_ref()
                .expect("user channel active but not encoded");
            let rows: Vec<Var> = (0..k)
                .map(|i| tape.leaf(raw.row(i).insert_axis(ndarray::Axis(0)).to_owned()))
                .collect();
            let out = nn::bilstm_forward(
                &binder,
                "user.lstm",
                LstmSpec {
                    input_dim: dims.user,
                    hidden: dims.user / 2,
                },
                &rows,
            );
            Some(tape.concat_rows(&out))
        } else {
            None
        };

        // Score channel x'.
        let score_prime = if self.config.variant.uses_score() {
            let bins = enc
                .score_bins
                .as_ref()
                .expect("score channel active but not encoded");
            let table = binder.var("score.table");
            let rows: Vec<Var> = (0..k).map(|i| tape.row(table, bins[i])).collect();
            let out = nn::bilstm_forward(
                &binder,
                "score.lstm",
                LstmSpec {
                    input_dim: dims.score,
                    hidden: dims.score / 2,
                },
                &rows,
            );
            Some(tape.concat_rows(&out))
        } else {
            None
        };

        // Knowledge channel: aggregate both sources per turn, gate, encode.
        let mut fused_rows = Vec::with_capacity(k);
        for i in 0..k {
            let knowledge = &enc.knowledge[i];
            let query = tape.row(text_prime, i);
            let retrieved = [
                tape.leaf(knowledge.retrieved[0].clone()),
                tape.leaf(knowledge.retrieved[1].clone()),
                tape.leaf(knowledge.retrieved[2].clone()),
            ];
            let generated = [
                tape.leaf(knowledge.generated[0].clone()),
                tape.leaf(knowledge.generated[1].clone()),
                tape.leaf(knowledge.generated[2].clone()),
            ];
            let e = aggregate_vars(&binder, "knowledge.agg", &retrieved, query);
            let g = aggregate_vars(&binder, "knowledge.agg", &generated, query);
            let logit = gate_logit_vars(&binder, "knowledge.gate", query, e, g);
            let logit_value = tape.value(logit)[(0, 0)].to_f64_lossy();
            if !logit_value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "pointer gate logit for conv `{}` turn {i}",
                    enc.conv_id
                )));
            }
            let fused = match ctx.rng {
                Some(rng) => {
                    // Straight-through tempered selection with fresh noise.
                    let noise = gumbel_pair(&mut *rng.borrow_mut());
                    let shift = tape.scalar(T::of(noise.0 - noise.1));
                    let tempered = tape.sigmoid(tape.scale(tape.add(logit, shift), 1.0 / ctx.tau));
                    let pick_retrieved = logit_value + noise.0 - noise.1 > 0.0;
                    tape.gate_select(tempered, e, g, pick_retrieved)
                }
                None => {
                    // Hard argmax, noise free.
                    let soft = tape.sigmoid(logit);
                    tape.gate_select(soft, e, g, logit_value > 0.0)
                }
            };
            fused_rows.push(fused);
        }
        let knowledge_encoded = nn::bilstm_forward(
            &binder,
            "knowledge.lstm",
            LstmSpec {
                input_dim: dims.knowledge,
                hidden: dims.knowledge / 2,
            },
            &fused_rows,
        );
        let knowledge_prime = tape.concat_rows(&knowledge_encoded);

        // One shared topology; per-channel attention weights and transforms.
        let topology = build_graph(&enc.turns[..k], self.config.relation_buckets);
        let mut seq_pairs: Vec<(Channel, Var)> = vec![(Channel::Text, text_prime)];
        if let Some(u) = user_prime {
            seq_pairs.push((Channel::User, u));
        }
        if let Some(s) = score_prime {
            seq_pairs.push((Channel::Score, s));
        }
        seq_pairs.push((Channel::Knowledge, knowledge_prime));

        let mut graph_pairs: Vec<(Channel, Var)> = Vec::with_capacity(seq_pairs.len());
        let mut channel_alphas = Vec::with_capacity(seq_pairs.len());
        for &(ch, x_prime) in &seq_pairs {
            let w_edge = binder.var(&format!("graph.{}.w_edge", ch.key()));
            let alphas = attention_alpha_vars(tape, &topology, x_prime, w_edge);
            let transformed = transform_channel_vars(
                &binder,
                &format!("gcn.{}", ch.key()),
                &topology,
                &alphas.rows,
                x_prime,
            );
            graph_pairs.push((ch, transformed));
            channel_alphas.push((ch, alphas.rows));
        }

        let capsules = assemble_capsule_vars(tape, self.config.variant, &seq_pairs, &graph_pairs);

        let logits = match self.config.head {
            ClassifierKind::Simple => simple_head_logit_vars(&binder, "head", capsules),
            ClassifierKind::Encoder => encoder_head_logit_vars(
                &binder,
                "head",
                capsules,
                &self.config.head_config,
                ctx.rng,
            ),
            ClassifierKind::EncoderDecoder => {
                ed_head_logit_vars(&binder, "head", capsules, &self.config.head_config, ctx.rng)
            }
        };

        Ok(BuiltForward {
            binder,
            logits,
            topology,
            channel_alphas,
        })
    }

    /// Build the forward graph for one prefix; returns the parameter binder
    /// (for gradient collection) and the head logits (1x1, or Lx1 for the
    /// ED head).
    pub fn build_forward<'a>(
        &'a self,
        tape: &'a Tape<T>,
        enc: &EncodedConversation<T>,
        prefix_len: usize,
        ctx: &ForwardCtx<'_>,
    ) -> Result<(Binder<'a, T>, Var)> {
        let built = self.forward_internal(tape, enc, prefix_len, ctx)?;
        Ok((built.binder, built.logits))
    }

    /// The per-channel weighted graphs a forward pass would use; exposed for
    /// inspection and property tests. All channels share one topology.
    pub fn weighted_channel_graphs(
        &self,
        enc: &EncodedConversation<T>,
        prefix_len: usize,
    ) -> Result<Vec<(Channel, WeightedGraph<T>)>> {
        let tape = Tape::new();
        let built = self.forward_internal(&tape, enc, prefix_len, &ForwardCtx::eval())?;
        let mut out = Vec::with_capacity(built.channel_alphas.len());
        for (ch, rows) in built.channel_alphas {
            let mut self_weight = Vec::new();
            let mut in_weights = Vec::new();
            for row in rows {
                let values = tape.value(row);
                self_weight.push(values[(0, 0)]);
                in_weights.push((1..values.ncols()).map(|j| values[(0, j)]).collect());
            }
            out.push((
                ch,
                WeightedGraph {
                    topology: built.topology.clone(),
                    self_weight,
                    in_weights,
                },
            ));
        }
        Ok(out)
    }

    /// Evaluation-mode label for one prefix.
    pub fn predict_prefix(&self, enc: &EncodedConversation<T>, prefix_len: usize) -> Result<Label> {
        let tape = Tape::new();
        let (_binder, logits) = self.build_forward(&tape, enc, prefix_len, &ForwardCtx::eval())?;
        match self.config.head {
            ClassifierKind::Simple | ClassifierKind::Encoder => {
                let p = tape.value(tape.sigmoid(logits))[(0, 0)];
                Ok(prob_to_label(p))
            }
            ClassifierKind::EncoderDecoder => {
                let probs = tape.value(tape.sigmoid(logits));
                let labels: Vec<Label> = (0..probs.nrows())
                    .map(|i| prob_to_label(probs[(i, 0)]))
                    .collect();
                Ok(majority_label(&labels))
            }
        }
    }

    /// Dynamic inference: independent predictions on prefixes 1..=N-1, then
    /// the max rule.
    pub fn infer_dynamic_encoded(&self, enc: &EncodedConversation<T>) -> Result<PredictionTrace> {
        let labels: Result<Vec<Label>> = (1..=enc.visible_len())
            .map(|k| self.predict_prefix(enc, k))
            .collect();
        Ok(PredictionTrace::from_prefix_labels(
            enc.conv_id.clone(),
            enc.turn_count,
            labels?,
        ))
    }

    pub fn infer_dynamic(&self, conv: &Conversation) -> Result<PredictionTrace> {
        let enc = self.encode_conversation(conv)?;
        self.infer_dynamic_encoded(&enc)
    }

    // -- checkpointing ------------------------------------------------------

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            format_version: CHECKPOINT_FORMAT_VERSION,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.config.clone(),
            resources: self.resources.clone(),
            binning: self.binning.clone(),
            params: self.params.to_portable(),
        };
        let json = serde_json::to_string(&file).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        fs::write(path, json).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::load_checkpoint_with(path, None, None)
    }

    /// Load a checkpoint, optionally overriding where the knowledge base and
    /// precomputed-vector files live now.
    pub fn load_checkpoint_with(
        path: &Path,
        kb_path: Option<&Path>,
        vectors_path: Option<&Path>,
    ) -> Result<Self> {
        if !path.exists() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        let raw = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let file: CheckpointFile = serde_json::from_str(&raw).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        if file.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Incompatible(format!(
                "checkpoint format {} (expected {CHECKPOINT_FORMAT_VERSION})",
                file.format_version
            )));
        }
        let mut resources = file.resources;
        if let Some(kb) = kb_path {
            resources.kb_path = kb.to_path_buf();
        }
        if let Some(v) = vectors_path {
            resources.vectors_path = Some(v.to_path_buf());
        }
        let mut model = Self::build(file.config, resources, file.binning, 0)?;
        let loaded = ParamStore::from_portable(&file.params)?;
        if loaded.len() != model.params.len() {
            return Err(Error::Incompatible(format!(
                "checkpoint has {} parameters, model expects {}",
                loaded.len(),
                model.params.len()
            )));
        }
        for (name, value) in loaded.iter() {
            if !model.params.contains(name) {
                return Err(Error::Incompatible(format!(
                    "unexpected parameter `{name}` in checkpoint"
                )));
            }
            if model.params.get(name).dim() != value.dim() {
                return Err(Error::Incompatible(format!(
                    "parameter `{name}` has shape {:?}, model expects {:?}",
                    value.dim(),
                    model.params.get(name).dim()
                )));
            }
            model.params.set(name, value.clone());
        }
        Ok(model)
    }
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    crate_version: String,
    config: ModelConfig,
    resources: ResourcesConfig,
    binning: ScoreBinning,
    params: PortableParams,
}

/// Marker alias so callers can talk about checkpoints at a given precision.
pub type Checkpoint<T> = ForecastModel<T>;

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: Option<f64>,
    pub val_f1: Option<f64>,
    pub temperature: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochStats>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

/// Training instances as (conversation index, prefix length).
pub fn build_instances<T: Scalar>(
    paradigm: Paradigm,
    encoded: &[EncodedConversation<T>],
) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (ci, enc) in encoded.iter().enumerate() {
        match paradigm {
            Paradigm::Static => out.push((ci, enc.visible_len())),
            Paradigm::Dynamic => {
                for k in 1..=enc.visible_len() {
                    out.push((ci, k));
                }
            }
        }
    }
    out
}

/// Sum of per-entry binary cross-entropies against a constant target, built
/// from logits: softplus(z) - z*y.
fn bce_loss_var<T: Scalar>(tape: &Tape<T>, logits: Var, target: f64) -> Var {
    let shape = tape.shape(logits);
    let y = tape.leaf(Array2::from_elem(shape, T::of(target)));
    tape.sum_all(tape.sub(tape.softplus(logits), tape.mul(logits, y)))
}

/// Train the model in place. Validation conversations drive early stopping
/// on F1 (dynamic inference); the best parameters are restored at the end.
pub fn train<T: Scalar>(
    model: &mut ForecastModel<T>,
    train_convs: &[Conversation],
    val_convs: Option<&[Conversation]>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if train_convs.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    model
        .config
        .capsule()
        .check_corpus_support(corpus_has_scores(train_convs))?;

    let encoded: Vec<EncodedConversation<T>> = train_convs
        .iter()
        .map(|c| model.encode_conversation(c))
        .collect::<Result<_>>()?;
    let encoded_val: Option<Vec<EncodedConversation<T>>> = match val_convs {
        Some(vs) => Some(
            vs.iter()
                .map(|c| model.encode_conversation(c))
                .collect::<Result<_>>()?,
        ),
        None => None,
    };

    let instances = build_instances(cfg.paradigm, &encoded);
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let rng = RefCell::new(ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "train")));
    let mut adam = Adam::new(&model.params, cfg.learning_rate);

    let track_accuracy = cfg.track_train_accuracy || cfg.stop_at_train_accuracy.is_some();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<Array2<T>>)> = None;
    let mut epochs_since_best = 0usize;
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        let tau = cfg.temperature.at_epoch(epoch);
        order.shuffle(&mut *rng.borrow_mut());

        let mut loss_sum = 0.0f64;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut grad_acc: Vec<Option<Array2<T>>> = vec![None; model.params.len()];
            for &oi in batch {
                let (ci, k) = instances[oi];
                let enc = &encoded[ci];
                let tape = Tape::new();
                let ctx = ForwardCtx {
                    tau,
                    rng: Some(&rng),
                };
                let (binder, logits) = model.build_forward(&tape, enc, k, &ctx)?;
                let target = if enc.label.is_attack() { 1.0 } else { 0.0 };
                let loss = bce_loss_var(&tape, logits, target);
                let loss_value = tape.value(loss)[(0, 0)].to_f64_lossy();
                if !loss_value.is_finite() {
                    return Err(Error::Diverged(format!(
                        "non-finite loss at epoch {epoch}, conv `{}`, prefix {k}",
                        enc.conv_id
                    )));
                }
                loss_sum += loss_value;
                let grads = tape.backward(loss);
                for (idx, g) in binder.collect(&grads) {
                    match &mut grad_acc[idx] {
                        Some(acc) => *acc = &*acc + &g,
                        slot => *slot = Some(g),
                    }
                }
            }
            let scale = T::of(1.0 / batch.len() as f64);
            let mut grads: Vec<(usize, Array2<T>)> = grad_acc
                .into_iter()
                .enumerate()
                .filter_map(|(idx, g)| g.map(|g| (idx, g.mapv(|e| e * scale))))
                .collect();
            if let Some(max_norm) = cfg.clip_norm {
                clip_global_norm(&mut grads, max_norm);
            }
            adam.step(&mut model.params, &grads);
        }
        let train_loss = loss_sum / instances.len() as f64;

        let train_accuracy = if track_accuracy {
            let mut correct = 0usize;
            for &(ci, k) in &instances {
                let enc = &encoded[ci];
                if model.predict_prefix(enc, k)? == enc.label {
                    correct += 1;
                }
            }
            Some(correct as f64 / instances.len() as f64)
        } else {
            None
        };

        let val_f1 = match &encoded_val {
            Some(vals) if !vals.is_empty() => {
                let traces: Vec<PredictionTrace> = vals
                    .iter()
                    .map(|enc| model.infer_dynamic_encoded(enc))
                    .collect::<Result<_>>()?;
                let gold: Vec<(String, Label)> = vals
                    .iter()
                    .map(|enc| (enc.conv_id.clone(), enc.label))
                    .collect();
                Some(confusion_metrics(&traces, &gold)?.f1)
            }
            _ => None,
        };

        history.push(EpochStats {
            epoch,
            train_loss,
            train_accuracy,
            val_f1,
            temperature: tau,
        });

        if let Some(f1) = val_f1 {
            let improved = best.as_ref().map_or(true, |(b, _, _)| f1 > *b);
            if improved {
                let snapshot = model.params.iter().map(|(_, v)| v.clone()).collect();
                best = Some((f1, epoch, snapshot));
                epochs_since_best = 0;
            } else {
                epochs_since_best += 1;
                if epochs_since_best >= cfg.patience {
                    stopped_early = true;
                    break;
                }
            }
        }

        if let (Some(target), Some(acc)) = (cfg.stop_at_train_accuracy, train_accuracy) {
            if acc >= target {
                stopped_early = true;
                break;
            }
        }
    }

    let best_epoch = best.as_ref().map(|(_, e, _)| *e);
    if let Some((_, _, snapshot)) = best {
        for (idx, value) in snapshot.into_iter().enumerate() {
            *model.params.get_mut_by_idx(idx) = value;
        }
    }

    Ok(TrainReport {
        history,
        best_epoch,
        stopped_early,
    })
}

/// Write the per-epoch loss curve as CSV.
pub fn write_loss_csv(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut out = String::from("epoch,train_loss,train_accuracy,val_f1,temperature\n");
    for s in history {
        let acc = s
            .train_accuracy
            .map_or(String::new(), |v| format!("{v}"));
        let f1 = s.val_f1.map_or(String::new(), |v| format!("{v}"));
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            s.epoch, s.train_loss, acc, f1, s.temperature
        ));
    }
    let mut file = fs::File::create(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    file.write_all(out.as_bytes()).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
