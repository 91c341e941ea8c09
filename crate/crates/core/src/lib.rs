//! Object-level SLAM back end with dual-quadric landmarks.
//!
//! Detections are associated to map objects through bag-of-words appearance
//! scores under geometric gating, objects are initialized from bounding
//! boxes by a constrained quadratic program, and keyframe poses and object
//! ellipsoids are refined jointly by Levenberg-Marquardt. A seeded simulator
//! and ground-truth metrics close the loop.

pub mod association;
pub mod bundle_adjustment;
pub mod evaluation;
pub mod geometry;
pub mod initializer;
pub mod pipeline;
pub mod simulator;
pub mod vocabulary;

pub use association::{associate_frame, solve_assignment, AssociationOutcome, ScoreMatrix, SemanticMeasurement};
pub use bundle_adjustment::{optimize, BaReport, BaState, CancelToken, FactorGraph, LmConfig, Termination};
pub use geometry::{BBox, CameraIntrinsics, DualConic, DualQuadric, Ellipsoid, GeometryError, Plane, Pose};
pub use initializer::{initialize_object, InitError, InitMethod, InitializerConfig, Observation, ObservationSet};
pub use pipeline::{
    run_dataset, AssociationRecord, MapDatabase, MapObject, ObjectId, Pipeline, PipelineConfig, PipelineError,
    RunResult, SemanticKeyframe, Vocabularies,
};
pub use simulator::{Dataset, Detection, FrameRecord, SceneSpec};
pub use vocabulary::{BinaryDescriptor, BowVector, VocabularyTree};
