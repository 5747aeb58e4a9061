//! Localized multiple kernel learning with a gating network over
//! precomputed Gaussian kernel stacks.
//!
//! The pipeline: parse sparse labeled data ([`dataio`]), build a stack of
//! RBF kernel matrices at data-scaled bandwidths ([`kernels`]), and train a
//! network ([`network`], [`grads`], [`optim`]) that weights every
//! (kernel, training point) pair per query example via a joint softmax,
//! pools the weighted kernel rows, and classifies the pooled vector with a
//! small batch-normalized head. [`analysis`] evaluates trained models and
//! summarizes where the gating mass goes; [`synth`] provides seeded toy
//! datasets.
//!
//! Everything is deterministic given the seeds: single-threaded `f64`
//! algebra, counter-based RNG, and fixed traversal orders.

pub mod analysis;
pub mod dataio;
pub mod grads;
pub mod kernels;
pub mod network;
pub mod optim;
pub mod synth;

pub use analysis::{
    accuracy, class_mean_gating, evaluate, export_gating, gating_for, gating_report, l1_distance,
    marginalize_gating, parse_gating, predict, read_gating, write_gating, AnalysisError,
    ClassGatingStats, GatingExport, SampleGating,
};
pub use dataio::{
    format_libsvm_line, load_dataset, load_raw_examples, parse_libsvm_line, read_kernel_file,
    read_labels, remap_labels, subsample, write_kernel_file, write_labels, write_libsvm, DataError,
    Dataset, Dtype, KernelFileHeader, LabelMap, LabeledExample, ParseLineError,
};
pub use grads::{
    backward, cross_entropy_loss, finite_diff_grad, grad_check, training_loss, GradCheckFailure,
    GradCheckReport, GradError, Gradients,
};
pub use kernels::{
    bandwidth_grid, build_cross_kernels, build_train_kernels, max_pairwise_distance, rbf_entry,
    sparse_sq_dist, CrossKernelStack, KernelError, KernelSource, KernelStack,
};
pub use network::{
    an_forward, forward, fuse, gather_batch, softmax, softmax_inplace, AnForward, Architecture,
    BatchNormState, Checkpoint, ForwardTrace, GatingMatrix, Mode, ModelParams, NetworkError,
    PoolMode,
};
pub use optim::{
    adam_step, metrics_to_csv, partition_batches, shuffle_indices, train, write_metrics_csv,
    AdamState, Metrics, TrainConfig, TrainError, TrainRun,
};
pub use synth::{generate, train_test, SynthKind};
