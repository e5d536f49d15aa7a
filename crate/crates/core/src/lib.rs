//! Non-invasive quantification of dynamic FDG-PET brain scans.
//!
//! The pipeline selects the frame where the carotids are most visible,
//! segments them, extracts an image-derived input function (IDIF), corrects
//! it into a model-corrected input function (MCIF) by fitting a two-tissue
//! compartment and measurement model, computes voxelwise Patlak Ki maps and
//! flags hypometabolic atlas regions by Z-score. [`phantom`] generates
//! synthetic scans with known ground truth for every stage.

pub mod frame_select;
pub mod kinetics;
pub mod metrics;
pub mod parametric;
pub mod phantom;
pub mod pipeline;
pub mod segment;
pub mod volume;
