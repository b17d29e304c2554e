//! Training recipe, checkpoints and model selection.

mod checkpoint;
mod selection;
mod trainer;

pub use checkpoint::{
    average_checkpoints, copy_params, lm_checkpoint, load_lm, load_tm, tm_checkpoint, Checkpoint, MAGIC,
};
pub use selection::{lambda_grid, rank_runs, select_models, tune_lambda, LambdaSearch, Selection};
pub use trainer::{
    evaluate_loss, label_smoothed_loss, make_batches, prepare_examples, sgd_step, train, EpochLog, Hooks,
    TmExample, TmObjective, TrainConfig, TrainReport, Trainable, LOG_HEADER,
};

#[cfg(test)]
mod tests;
