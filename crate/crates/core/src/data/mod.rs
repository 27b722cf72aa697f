//! Raw logs to training and ranking instances.

pub mod instances;
pub mod parse;
pub mod prepared;
pub mod sequence;
pub mod split;

pub use instances::{
    make_eval_instances, make_training_instances, EvalInstance, History, TrainingInstance, TrainingSet, EVAL_NEGATIVES,
};
pub use parse::{parse_dataset, DatasetFormat, ParseOutcome, RawInteraction};
pub use prepared::{load_prepared, prepare, write_prepared, PrepareOptions, PreparedDataset, DEFAULT_THRESHOLD};
pub use sequence::{binarize_and_sequence, Event, IdMap, SequencedData, UserSequence};
pub use split::{leave_one_out_split, SplitDataset, SplitKind, GUARANTEED_TRAIN};
