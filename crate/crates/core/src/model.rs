//! Capsule assembly and the three classifier heads.
//!
//! Each turn's capsule concatenates the sequential encodings x' and the
//! graph-transformed encodings x'' of the active channels, in a fixed
//! order: primes first (text, user, score, knowledge), then double-primes
//! in the same channel order. The capsule matrix feeds one of three heads:
//!
//! - S: mean-pool over turns, linear, hidden ReLU layer, sigmoid.
//! - E: transformer encoder over a `[CLS] d_1 [SEP] d_2 [SEP] .. [SEP]`
//!   framing; the prediction reads from the CLS position.
//! - ED: causal transformer encoder plus a decoder driven by learned
//!   position queries; one label per prefix position, final label by
//!   majority vote (ties resolve to the attack class, the safer call for
//!   a moderation tool).

use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::nn::{
    self, causal_mask, dropout, encoder_stack, layer_norm, linear, multi_head_attention,
    register_encoder_stack, register_linear, sinusoidal_positions, Binder, ParamStore,
    TransformerConfig,
};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cell::RefCell;

/// Sigmoid decision threshold shared by all heads.
pub const DECISION_THRESHOLD: f64 = 0.5;

// ---------------------------------------------------------------------------
// Channels and capsule configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channel {
    Text,
    User,
    Score,
    Knowledge,
}

impl Channel {
    pub fn key(self) -> &'static str {
        match self {
            Channel::Text => "text",
            Channel::User => "user",
            Channel::Score => "score",
            Channel::Knowledge => "knowledge",
        }
    }
}

/// Which channels enter the capsules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CapsuleVariant {
    #[serde(rename = "TCN")]
    Tcn,
    #[serde(rename = "TCNU")]
    Tcnu,
    #[serde(rename = "TCNS")]
    Tcns,
    #[serde(rename = "TCNSU")]
    Tcnsu,
}

impl CapsuleVariant {
    pub const ALL: [CapsuleVariant; 4] = [
        CapsuleVariant::Tcn,
        CapsuleVariant::Tcnu,
        CapsuleVariant::Tcns,
        CapsuleVariant::Tcnsu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CapsuleVariant::Tcn => "TCN",
            CapsuleVariant::Tcnu => "TCNU",
            CapsuleVariant::Tcns => "TCNS",
            CapsuleVariant::Tcnsu => "TCNSU",
        }
    }

    pub fn uses_user(self) -> bool {
        matches!(self, CapsuleVariant::Tcnu | CapsuleVariant::Tcnsu)
    }

    pub fn uses_score(self) -> bool {
        matches!(self, CapsuleVariant::Tcns | CapsuleVariant::Tcnsu)
    }

    /// Active channels in capsule concatenation order.
    pub fn channels(self) -> Vec<Channel> {
        let mut out = vec![Channel::Text];
        if self.uses_user() {
            out.push(Channel::User);
        }
        if self.uses_score() {
            out.push(Channel::Score);
        }
        out.push(Channel::Knowledge);
        out
    }
}

impl std::fmt::Display for CapsuleVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-channel feature dimensions (the x' widths entering the graphs; the
/// graph transform preserves them). Dims must be even so the bidirectional
/// encoders can split their hidden state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelDims {
    #[serde(default = "ChannelDims::default_text")]
    pub text: usize,
    #[serde(default = "ChannelDims::default_user")]
    pub user: usize,
    #[serde(default = "ChannelDims::default_user")]
    pub score: usize,
    #[serde(default = "ChannelDims::default_text")]
    pub knowledge: usize,
}

impl ChannelDims {
    fn default_text() -> usize {
        64
    }
    fn default_user() -> usize {
        16
    }

    pub fn of(&self, channel: Channel) -> usize {
        match channel {
            Channel::Text => self.text,
            Channel::User => self.user,
            Channel::Score => self.score,
            Channel::Knowledge => self.knowledge,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for ch in [Channel::Text, Channel::User, Channel::Score, Channel::Knowledge] {
            let d = self.of(ch);
            if d < 2 || d % 2 != 0 {
                return Err(Error::Config(format!(
                    "channel `{}` dim must be even and >= 2, got {d}",
                    ch.key()
                )));
            }
        }
        Ok(())
    }
}

impl Default for ChannelDims {
    fn default() -> Self {
        ChannelDims {
            text: 64,
            user: 16,
            score: 16,
            knowledge: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CapsuleConfig {
    pub variant: CapsuleVariant,
    pub dims: ChannelDims,
}

impl CapsuleConfig {
    /// Capsule width: sum over active channels of (x' dim + x'' dim).
    pub fn capsule_dim(&self) -> usize {
        self.variant
            .channels()
            .iter()
            .map(|&c| 2 * self.dims.of(c))
            .sum()
    }

    /// Fail fast when the variant needs scores but the corpus has none.
    pub fn check_corpus_support(&self, corpus_has_scores: bool) -> Result<()> {
        if self.variant.uses_score() && !corpus_has_scores {
            return Err(Error::Config(format!(
                "variant {} needs score data but the corpus has no scores",
                self.variant
            )));
        }
        Ok(())
    }
}

/// Graph-transformed features per channel (the x'' side of the capsules).
#[derive(Debug, Clone)]
pub struct GraphFeatures<T: Scalar> {
    pub text: Array2<T>,
    pub user: Option<Array2<T>>,
    pub score: Option<Array2<T>>,
    pub knowledge: Option<Array2<T>>,
}

fn channel_of<'a, T: Scalar>(
    channel: Channel,
    text: &'a Array2<T>,
    user: &'a Option<Array2<T>>,
    score: &'a Option<Array2<T>>,
    knowledge: &'a Option<Array2<T>>,
) -> Option<&'a Array2<T>> {
    match channel {
        Channel::Text => Some(text),
        Channel::User => user.as_ref(),
        Channel::Score => score.as_ref(),
        Channel::Knowledge => knowledge.as_ref(),
    }
}

/// Concatenate x' and x'' channels into the capsule matrix
/// `C' = [d_1; ..; d_L]` (one capsule row per turn).
pub fn assemble_capsules<T: Scalar>(
    cfg: &CapsuleConfig,
    seq: &crate::features::SequentialFeatures<T>,
    graph: &GraphFeatures<T>,
) -> Result<Array2<T>> {
    seq.validate()?;
    let rows = seq.text.nrows();
    let mut parts: Vec<&Array2<T>> = Vec::new();
    for &ch in &cfg.variant.channels() {
        let m = channel_of(ch, &seq.text, &seq.user, &seq.score, &seq.knowledge)
            .ok_or_else(|| {
                Error::Config(format!(
                    "variant {} needs sequential channel `{}` which is absent",
                    cfg.variant,
                    ch.key()
                ))
            })?;
        parts.push(m);
    }
    for &ch in &cfg.variant.channels() {
        let m = channel_of(ch, &graph.text, &graph.user, &graph.score, &graph.knowledge)
            .ok_or_else(|| {
                Error::Config(format!(
                    "variant {} needs graph channel `{}` which is absent",
                    cfg.variant,
                    ch.key()
                ))
            })?;
        parts.push(m);
    }
    let total: usize = parts.iter().map(|m| m.ncols()).sum();
    if total != cfg.capsule_dim() {
        return Err(Error::Dimension(format!(
            "capsule dim {} does not match configured {}",
            total,
            cfg.capsule_dim()
        )));
    }
    let mut out = Array2::zeros((rows, total));
    for i in 0..rows {
        let mut at = 0;
        for m in &parts {
            if m.nrows() != rows {
                return Err(Error::Dimension(format!(
                    "channel with {} rows in a {rows}-turn capsule matrix",
                    m.nrows()
                )));
            }
            for j in 0..m.ncols() {
                out[(i, at + j)] = m[(i, j)];
            }
            at += m.ncols();
        }
    }
    Ok(out)
}

/// Tape-side capsule assembly from per-channel x' and x'' variables, in the
/// same order as [`assemble_capsules`].
pub fn assemble_capsule_vars<T: Scalar>(
    tape: &Tape<T>,
    variant: CapsuleVariant,
    seq: &[(Channel, Var)],
    graph: &[(Channel, Var)],
) -> Var {
    let pick = |list: &[(Channel, Var)], ch: Channel| -> Var {
        list.iter()
            .find(|(c, _)| *c == ch)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("channel {} missing from tape assembly", ch.key()))
    };
    let mut parts = Vec::new();
    for &ch in &variant.channels() {
        parts.push(pick(seq, ch));
    }
    for &ch in &variant.channels() {
        parts.push(pick(graph, ch));
    }
    tape.concat_cols(&parts)
}

// ---------------------------------------------------------------------------
// Heads
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassifierKind {
    #[serde(rename = "S")]
    Simple,
    #[serde(rename = "E")]
    Encoder,
    #[serde(rename = "ED")]
    EncoderDecoder,
}

impl ClassifierKind {
    pub const ALL: [ClassifierKind; 3] = [
        ClassifierKind::Simple,
        ClassifierKind::Encoder,
        ClassifierKind::EncoderDecoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ClassifierKind::Simple => "S",
            ClassifierKind::Encoder => "E",
            ClassifierKind::EncoderDecoder => "ED",
        }
    }
}

impl std::fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    #[serde(default)]
    pub transformer: TransformerConfig,
    #[serde(default = "HeadConfig::default_simple_hidden")]
    pub simple_hidden: usize,
}

impl HeadConfig {
    fn default_simple_hidden() -> usize {
        64
    }
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            transformer: TransformerConfig::default(),
            simple_hidden: 64,
        }
    }
}

/// Framed sequence length for the encoder head: CLS + L capsules + L SEPs.
pub fn framed_length(turns: usize) -> usize {
    2 * turns + 1
}

pub fn register_head<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    kind: ClassifierKind,
    capsule_dim: usize,
    cfg: &HeadConfig,
    seed: u64,
) -> Result<()> {
    match kind {
        ClassifierKind::Simple => {
            register_linear(store, &format!("{prefix}.fc1"), capsule_dim, cfg.simple_hidden, seed);
            register_linear(store, &format!("{prefix}.fc2"), cfg.simple_hidden, 1, seed);
        }
        ClassifierKind::Encoder => {
            cfg.transformer.validate(capsule_dim)?;
            store.insert_init(&format!("{prefix}.cls"), 1, capsule_dim, capsule_dim, seed);
            store.insert_init(&format!("{prefix}.sep"), 1, capsule_dim, capsule_dim, seed);
            register_encoder_stack(store, &format!("{prefix}.enc"), capsule_dim, &cfg.transformer, seed);
            register_linear(store, &format!("{prefix}.out"), capsule_dim, 1, seed);
        }
        ClassifierKind::EncoderDecoder => {
            cfg.transformer.validate(capsule_dim)?;
            register_encoder_stack(store, &format!("{prefix}.enc"), capsule_dim, &cfg.transformer, seed);
            register_linear(store, &format!("{prefix}.qpos"), capsule_dim, capsule_dim, seed);
            for layer in 0..cfg.transformer.layers {
                // Decoder layers share the encoder layer layout; the
                // attention inside runs as cross-attention.
                nn::register_encoder_layer(
                    store,
                    &format!("{prefix}.dec.layer{layer}"),
                    capsule_dim,
                    &cfg.transformer,
                    seed,
                );
            }
            register_linear(store, &format!("{prefix}.out"), capsule_dim, 1, seed);
        }
    }
    Ok(())
}

/// Simple head: mean-pool capsules over turns, linear, hidden ReLU, logit.
pub fn simple_head_logit_vars<T: Scalar>(binder: &Binder<T>, prefix: &str, capsules: Var) -> Var {
    let t = binder.tape();
    let pooled = t.mean_rows(capsules);
    let hidden = t.relu(linear(binder, &format!("{prefix}.fc1"), pooled));
    linear(binder, &format!("{prefix}.fc2"), hidden)
}

/// Encoder head: frame with CLS/SEP vectors, add positions, run the
/// bidirectional encoder, read the CLS position.
pub fn encoder_head_logit_vars<T: Scalar>(
    binder: &Binder<T>,
    prefix: &str,
    capsules: Var,
    cfg: &HeadConfig,
    rng: Option<&RefCell<ChaCha8Rng>>,
) -> Var {
    let t = binder.tape();
    let (turns, dim) = t.shape(capsules);
    let cls = binder.var(&format!("{prefix}.cls"));
    let sep = binder.var(&format!("{prefix}.sep"));
    let mut rows = Vec::with_capacity(framed_length(turns));
    rows.push(cls);
    for i in 0..turns {
        rows.push(t.row(capsules, i));
        rows.push(sep);
    }
    let framed = t.concat_rows(&rows);
    let pos = t.leaf(sinusoidal_positions::<T>(framed_length(turns), dim));
    let x = t.add(framed, pos);
    let encoded = encoder_stack(binder, &format!("{prefix}.enc"), x, &cfg.transformer, None, rng);
    linear(binder, &format!("{prefix}.out"), t.row(encoded, 0))
}

fn decoder_layer<T: Scalar>(
    binder: &Binder<T>,
    prefix: &str,
    queries: Var,
    memory: Var,
    cfg: &TransformerConfig,
    mask: &Array2<bool>,
    rng: Option<&RefCell<ChaCha8Rng>>,
) -> Var {
    let t = binder.tape();
    let attn = multi_head_attention(
        binder,
        &format!("{prefix}.attn"),
        queries,
        memory,
        cfg.heads,
        Some(mask),
    );
    let attn = dropout(t, attn, cfg.dropout, rng);
    let x = layer_norm(binder, &format!("{prefix}.ln1"), t.add(queries, attn));
    let ff = linear(
        binder,
        &format!("{prefix}.ff2"),
        t.relu(linear(binder, &format!("{prefix}.ff1"), x)),
    );
    let ff = dropout(t, ff, cfg.dropout, rng);
    layer_norm(binder, &format!("{prefix}.ln2"), t.add(x, ff))
}

/// Encoder-decoder head: causal encoder over capsules; decoder queries start
/// from projected position features and attend causally over the encoder
/// states, each following block fed by the previous block's output. One
/// logit per prefix position.
pub fn ed_head_logit_vars<T: Scalar>(
    binder: &Binder<T>,
    prefix: &str,
    capsules: Var,
    cfg: &HeadConfig,
    rng: Option<&RefCell<ChaCha8Rng>>,
) -> Var {
    let t = binder.tape();
    let (turns, dim) = t.shape(capsules);
    let mask = causal_mask(turns, turns);

    let pos = t.leaf(sinusoidal_positions::<T>(turns, dim));
    let x = t.add(capsules, pos);
    let encoded = encoder_stack(
        binder,
        &format!("{prefix}.enc"),
        x,
        &cfg.transformer,
        Some(&mask),
        rng,
    );

    let mut queries = linear(binder, &format!("{prefix}.qpos"), t.leaf(sinusoidal_positions::<T>(turns, dim)));
    for layer in 0..cfg.transformer.layers {
        queries = decoder_layer(
            binder,
            &format!("{prefix}.dec.layer{layer}"),
            queries,
            encoded,
            &cfg.transformer,
            &mask,
            rng,
        );
    }
    linear(binder, &format!("{prefix}.out"), queries)
}

/// Majority vote over a label sequence; ties go to the attack class.
pub fn majority_label(labels: &[Label]) -> Label {
    let attacks = labels.iter().filter(|l| l.is_attack()).count();
    Label::from_attack_flag(2 * attacks >= labels.len())
}

pub fn prob_to_label<T: Scalar>(prob: T) -> Label {
    Label::from_attack_flag(prob > T::of(DECISION_THRESHOLD))
}

// ---------------------------------------------------------------------------
// Standalone head
// ---------------------------------------------------------------------------

/// A classifier head owning its parameters, for direct use on capsule
/// matrices. Training binds the same registration into the shared store.
#[derive(Debug, Clone)]
pub struct ClassifierHead<T: Scalar> {
    pub kind: ClassifierKind,
    capsule_dim: usize,
    cfg: HeadConfig,
    store: ParamStore<T>,
}

impl<T: Scalar> ClassifierHead<T> {
    pub fn new(kind: ClassifierKind, capsule_dim: usize, cfg: HeadConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        register_head(&mut store, "head", kind, capsule_dim, &cfg, seed)?;
        Ok(ClassifierHead {
            kind,
            capsule_dim,
            cfg,
            store,
        })
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn check_input(&self, capsules: &Array2<T>) -> Result<()> {
        if capsules.nrows() == 0 {
            return Err(Error::Data("empty capsule matrix".into()));
        }
        if capsules.ncols() != self.capsule_dim {
            return Err(Error::Dimension(format!(
                "capsule dim {} != head dim {}",
                capsules.ncols(),
                self.capsule_dim
            )));
        }
        Ok(())
    }

    /// Conversation-level probability of the attack class (S and E heads).
    pub fn classify_probability(&self, capsules: &Array2<T>) -> Result<T> {
        self.check_input(capsules)?;
        let tape = Tape::new();
        let binder = Binder::new(&tape, &self.store);
        let c = tape.leaf(capsules.clone());
        let logit = match self.kind {
            ClassifierKind::Simple => simple_head_logit_vars(&binder, "head", c),
            ClassifierKind::Encoder => encoder_head_logit_vars(&binder, "head", c, &self.cfg, None),
            ClassifierKind::EncoderDecoder => {
                return Err(Error::Config(
                    "the encoder-decoder head emits per-position labels; use classify_sequence"
                        .into(),
                ))
            }
        };
        Ok(tape.value(tape.sigmoid(logit))[(0, 0)])
    }

    /// Per-position probabilities for the ED head.
    pub fn position_probabilities(&self, capsules: &Array2<T>) -> Result<Vec<T>> {
        self.check_input(capsules)?;
        if self.kind != ClassifierKind::EncoderDecoder {
            return Err(Error::Config("only the ED head emits per-position labels".into()));
        }
        let tape = Tape::new();
        let binder = Binder::new(&tape, &self.store);
        let c = tape.leaf(capsules.clone());
        let logits = ed_head_logit_vars(&binder, "head", c, &self.cfg, None);
        let probs = tape.value(tape.sigmoid(logits));
        Ok((0..probs.nrows()).map(|i| probs[(i, 0)]).collect())
    }

    /// ED classification: per-position labels plus the majority-vote final
    /// label.
    pub fn classify_sequence(&self, capsules: &Array2<T>) -> Result<(Vec<Label>, Label)> {
        let probs = self.position_probabilities(capsules)?;
        let labels: Vec<Label> = probs.iter().map(|&p| prob_to_label(p)).collect();
        let final_label = majority_label(&labels);
        Ok((labels, final_label))
    }
}
