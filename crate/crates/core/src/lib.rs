//! Set embeddings for compositional queries over a knowledge base.
//!
//! A set is represented by a centroid in embedding space plus a count-min
//! sketch of its members. Set operators act on both parts; relation following
//! and filtering retrieve triples by maximum inner-product search.

pub mod cms;
pub mod error;
pub mod eval;
pub mod kbstore;
pub mod mips;
pub mod query;
pub mod relops;
pub mod setrep;
pub mod trainer;

pub use cms::{CountMinSketch, HashFamily, WeightedSet};
pub use error::{KbqError, Result};
pub use eval::{EvalConfig, Evaluator};
pub use kbstore::{Embeddings, KbIndex, KbSplit, Triple, TripleStore, Vocab};
pub use mips::{top_k, ExactScan, Matrix, MipsBackend, TopKResult};
pub use query::{parse_query, symbolic_evaluate, Query, Template};
pub use relops::RelOpConfig;
pub use setrep::{Families, SetRep, SketchMode, SketchParams, Universe};
pub use trainer::{train, TrainConfig, TrainMode, Trainer};
