//! Deterministic multi-domain synthetic detection data.
//!
//! A scene is a seeded layout of simple shapes with integer pixel boxes; a
//! style is a parametric, geometry-preserving appearance transform. Rendering
//! the same scene under different styles yields scene-aligned cross-domain
//! pairs, which stand in for a learned style-transfer model: same layout,
//! different domain-specific appearance.

mod manifest;
mod render;
mod scene;
mod style;

pub use manifest::{load_png, read_labels, save_png, write_labels, 
    build_auxiliary_domain, build_dataset, read_manifest, split_protocol, write_manifest,
    BuiltDataset, DatasetManifest, ManifestRecord, ProtocolConfig, ProtocolMode, Role,
};
pub use render::{render, DomainGenerator, RenderedSample};
pub use scene::{sample_scene, GeneratorConfig, ObjectInstance, SceneSpec};
pub use style::{default_styles, StyleParams, StyleSpec, TextureKind};
