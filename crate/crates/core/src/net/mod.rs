//! Learnable CPCANet heads, loss assembly and the toy trainer.
//!
//! A forward pass runs backbone → bottleneck → per-domain covariances →
//! step-size hypernetwork → unfolded solver → invariant coordinates →
//! feature modulation → classifier, all on one [`tape`](crate::tape) graph.
//! With the modulation output layers at zero the logits are those of the
//! plain backbone + classifier pipeline, which [`train_erm`] trains on the
//! same random streams.

mod checkpoint;
mod forward;
mod naive;
mod optim;
mod params;
mod sweep;
mod toy;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry};
pub use forward::{
    accuracy, argmax_rows, build_cpcanet_graph, build_erm_graph, cpcanet_forward, hypernet_step_sizes,
    modulate, predict_logits, smoothed_targets, task_loss, total_loss, CpcaNetNodes, DropoutMasks,
    ErmNodes, ForwardOutput, LossConfig, NetGraph,
};
pub use naive::{naive_subspace_classifier, NaiveReport};
pub use optim::Adam;
pub use params::{
    Architecture, Dense, ErmParams, Mlp, ModelParams, ParamGroup, ParamSet, BACKBONE_HIDDEN, HYPERNET_HIDDEN,
};
pub use sweep::{run_sweep, write_sweep_csv, MeanStd, SweepCell, SweepConfig, SWEEP_HEADER};
pub use toy::{
    benchmark_params, evaluate_on_split, median, run_toy, toy_split, ToyRun, ToySplit, BENCHMARK_ROWS_PER_DOMAIN,
    BENCHMARK_TEST_ROWS,
};
pub use train::{
    init_cpcanet, init_erm, stream_rng, train, train_cpcanet, train_erm, MetricsLog, MetricsRow, Pipeline, Stream,
    TrainOutcome, TrainedModel, TrainerConfig,
};
