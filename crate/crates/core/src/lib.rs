//! Extraction of interventions, outcomes and outcome measures from
//! randomised-controlled-trial result sentences, relation classification
//! between them, and assembly into (outcome, arm 1, arm 2) evidence tables.
//!
//! The pipeline stages live in [`ner`], [`relex`] and [`tabulate`]; both
//! classifiers read their inputs through [`features`]. [`corpus`] handles
//! ingestion, annotation files and splits; [`evaluate`] scores every stage.

pub mod corpus;
pub mod error;
pub mod evaluate;
pub mod features;
pub mod linear;
pub mod ner;
pub mod relex;
pub mod tabulate;
pub mod train;

pub use corpus::{
    Answer, Doc, EntityLabel, EntitySpan, Meta, RelationEdge, RelationLabel, SpanId, Token,
};
pub use error::{Error, Result};
pub use evaluate::{MetricCounts, MetricsReport, Task};
pub use features::{BackendKind, EmbeddingStore, FeatureSource, TokenVector};
pub use ner::NerModel;
pub use relex::{RelationMatrix, RelexModel};
pub use tabulate::{EvidenceTable, EvidenceTuple, Pipeline};
pub use train::{TrainConfig, TrainingLog};
