//! LLM-guided adversarial text purification harness.
//!
//! The pipeline has four stages, each of which reads and writes plain JSONL
//! artifacts so that runs are resumable and replayable:
//!
//! 1. [`classifier`] — train a smoothed multinomial bag-of-words classifier
//!    and expose per-class confidence.
//! 2. [`attack`] — a greedy black-box word-substitution attack that ranks
//!    words by importance and swaps in synonyms until the label flips.
//! 3. [`purifier`] — send each attacked sentence through a fixed grading
//!    prompt ([`prompt`]) to a chat-completion backend ([`llm_client`]) and
//!    classify the purified output.
//! 4. [`eval`] — report accuracy before the attack, under the attack, and
//!    after purification, plus ablation tables and case studies.
//!
//! Everything except the optional HTTP backend is deterministic: identical
//! inputs and seeds produce byte-identical artifacts.

pub mod attack;
pub mod classifier;
pub mod corpus;
pub mod eval;
pub mod llm_client;
pub mod prompt;
pub mod purifier;
