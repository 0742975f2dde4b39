//! Deterministic synthetic corpora and a small demo knowledge base, used by
//! tests, the acceptance suite, and the bundled demo data.

use crate::corpus::{Conversation, Label, Turn};
use crate::error::{Error, Result};
use crate::knowledge::KbRecord;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Lexical derailment marker planted in the prefix of attack conversations;
/// makes the synthetic task separable from bag-of-token features.
pub const MARKER: &str = "vexing";

const WORDS: &[&str] = &[
    "thanks", "for", "sharing", "that", "point", "see", "your", "view", "maybe", "we", "could",
    "check", "the", "sources", "again", "this", "seems", "reasonable", "indeed", "interesting",
];

fn synth_text(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(3..=5);
    (0..len)
        .map(|_| WORDS[rng.gen_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

fn build_corpus(
    n_convs: usize,
    turns_per_conv: usize,
    seed: u64,
    with_scores: bool,
) -> Vec<Conversation> {
    assert!(turns_per_conv >= 2, "conversations need at least 2 turns");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_convs)
        .map(|ci| {
            let label = if ci % 2 == 0 {
                Label::Civil
            } else {
                Label::PersonalAttack
            };
            let user_count = rng.gen_range(2..=3usize);
            let turns: Vec<Turn> = (0..turns_per_conv)
                .map(|ti| {
                    let mut text = synth_text(&mut rng);
                    // Plant the marker in every *visible* turn of attack
                    // conversations so each prefix (and each causal position)
                    // is separable; the final turn itself stays hidden from
                    // the model.
                    if label.is_attack() && ti < turns_per_conv - 1 {
                        text = format!("{text} {MARKER} {MARKER}");
                    }
                    let parent_id = if ti == 0 {
                        None
                    } else if rng.gen_bool(0.3) && ti >= 2 {
                        Some(format!("t{}", rng.gen_range(0..ti - 1)))
                    } else {
                        Some(format!("t{}", ti - 1))
                    };
                    let score = if with_scores && rng.gen_bool(0.8) {
                        Some(rng.gen_range(-5..=5))
                    } else {
                        None
                    };
                    Turn {
                        turn_id: format!("t{ti}"),
                        text,
                        user_id: format!("user{}", ti % user_count),
                        score,
                        parent_id,
                    }
                })
                .collect();
            Conversation {
                conv_id: format!("synth-{ci}"),
                label,
                turns,
            }
        })
        .collect()
}

/// Balanced corpus with vote scores (half civil, half attack); attack
/// conversations carry [`MARKER`] in their last visible turn.
pub fn marker_corpus(n_convs: usize, turns_per_conv: usize, seed: u64) -> Vec<Conversation> {
    build_corpus(n_convs, turns_per_conv, seed, true)
}

/// Same corpus shape with no scores anywhere.
pub fn marker_corpus_without_scores(
    n_convs: usize,
    turns_per_conv: usize,
    seed: u64,
) -> Vec<Conversation> {
    build_corpus(n_convs, turns_per_conv, seed, false)
}

/// Random conversations with varying turn and user counts, no marker; for
/// structural property tests.
pub fn random_corpus(n_convs: usize, max_turns: usize, max_users: usize, seed: u64) -> Vec<Conversation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_convs)
        .map(|ci| {
            let n = rng.gen_range(2..=max_turns.max(2));
            let users = rng.gen_range(1..=max_users.max(1));
            let turns: Vec<Turn> = (0..n)
                .map(|ti| Turn {
                    turn_id: format!("t{ti}"),
                    text: synth_text(&mut rng),
                    user_id: format!("user{}", rng.gen_range(0..users)),
                    score: rng.gen_bool(0.5).then(|| rng.gen_range(-4..=4)),
                    parent_id: (ti > 0).then(|| format!("t{}", rng.gen_range(0..ti))),
                })
                .collect();
            Conversation {
                conv_id: format!("rand-{ci}"),
                label: Label::from_attack_flag(rng.gen_bool(0.5)),
                turns,
            }
        })
        .collect()
}

/// A handful of everyday-event records with all three relations filled.
pub fn demo_kb_records() -> Vec<KbRecord> {
    let mk = |text: &str, intent: &str, react: &str, others: &str| KbRecord {
        text: text.into(),
        subject_intent: vec![intent.into()],
        subject_reaction: vec![react.into()],
        others_reaction: vec![others.into()],
    };
    vec![
        mk(
            "person shares an interesting article",
            "to inform others",
            "helpful",
            "curious",
        ),
        mk(
            "person disagrees with a statement",
            "to correct the record",
            "firm",
            "defensive",
        ),
        mk(
            "person asks for a source",
            "to verify claims",
            "skeptical",
            "pressed",
        ),
        mk(
            "person thanks the commenter",
            "to be polite",
            "grateful",
            "appreciated",
        ),
        mk(
            "person repeats their point loudly",
            "to win the argument",
            "frustrated",
            "annoyed",
        ),
        mk("person mocks a reply", "to belittle", "smug", "hurt"),
        mk(
            "person changes the topic",
            "to avoid conflict",
            "relieved",
            "confused",
        ),
        mk(
            "person posts a long explanation",
            "to clarify",
            "thorough",
            "informed",
        ),
    ]
}

/// Write the demo knowledge base as the standard JSON array format.
pub fn write_demo_kb(path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(&demo_kb_records()).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    std::fs::write(path, json).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpora_are_valid_and_balanced() {
        let convs = marker_corpus(10, 5, 1);
        assert_eq!(convs.len(), 10);
        let attacks = convs.iter().filter(|c| c.label.is_attack()).count();
        assert_eq!(attacks, 5);
        for c in &convs {
            c.validate().unwrap();
            assert_eq!(c.turn_count(), 5);
            let marker_in_prefix = c
                .visible_turns()
                .iter()
                .any(|t| t.text.contains(MARKER));
            assert_eq!(marker_in_prefix, c.label.is_attack());
        }
    }

    #[test]
    fn random_corpus_is_valid() {
        for c in random_corpus(20, 8, 4, 2) {
            c.validate().unwrap();
        }
    }

    #[test]
    fn corpora_are_deterministic() {
        assert_eq!(marker_corpus(4, 4, 9), marker_corpus(4, 4, 9));
    }
}
