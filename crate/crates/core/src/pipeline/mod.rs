//! End-to-end stages driven by the `binpick` command line.

mod commands;
mod config;
mod dataset;
mod model;

pub use commands::{
    cmd_eval, cmd_gen, cmd_infer, cmd_report, cmd_train, eval_dir, evaluation_frames, load_annotations, load_heads,
    Source, Stage, DATASET_DIR, HEADS_CKPT, HEADS_LOSS, JOINTREG_CKPT, JOINTREG_LOSS,
};
pub use config::{DatasetConfig, ModelConfig, PoseHypConfig, RunConfig, TrainConfig};
pub use dataset::{
    frame_id, generate_dataset, generate_frames, generate_scene_frames, load_frames, load_manifest, DatasetManifest,
    Frame, FrameEntry, SceneEntry, Split, MANIFEST,
};
pub use model::{
    decode_targets, detect_frame, detection_recall, frame_assignments, head_accuracy, head_targets, heads_loss_grad,
    infer_frame, new_registration_net, register_frame, registration_checkpoint, registration_from_checkpoint,
    registration_input, registration_samples, targets, train_heads, train_registration, training_rois,
    FrameInference, HeadAccuracy, HeadTargets, HeadsLoss, PoseNet, RegistrationSample,
};
