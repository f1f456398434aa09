//! Orchestration: pose sampling, per-view refinement through a generator,
//! level-up through a reconstructor, and the run manifest.

mod backend;
mod config;
pub mod fixture;
mod manifest;
mod poses;
mod run;

pub use self::backend::{
    dedup_views, onion_peel_fill, read_generator_request, read_recon_request,
    serve_pending_reconstructions, serve_pending_requests, write_generator_request,
    write_recon_request, DirGenerator, DirReconstructor, Generator, GeneratorRequest,
    HttpGenerator, HttpReconstructor, PollSettings, ReconView, Reconstructor, StubGenerator,
    StubReconstructor, GENERATOR_URL_ENV, RECONSTRUCTOR_URL_ENV, STUB_FILL, STUB_OPACITY,
    STUB_SCALE_FACTOR, STUB_STRIDE,
};
pub use self::config::{BackendConfig, InputsConfig, MaskConfig, PipelineConfig, RunConfig};
pub use self::manifest::{
    EvalReport, InputEval, InputRecord, LevelUpRecord, PipelineManifest, PoseRecord, StageStamp,
    ViewArtifacts, ViewRecord, ViewStatus, MANIFEST_FILE,
};
pub use self::poses::{interpolate_pose, sample_extrapolated_poses, slerp, PoseSampling};
pub use self::run::{
    complete_depth, composite, config_key, evaluate, level_up, level_up_from_manifest,
    load_input_views, prepare_view, refine_views, run_alg1, run_level_up, run_refine,
    view_dir_name, LevelUpStats, PreparedView, RefineSettings, RefineStage, RefinedView,
    RunOutcome, COARSE_SCENE_FILE, EXIT_BACKEND, EXIT_OK, EXIT_PARTIAL, LEVELED_SCENE_FILE,
};
