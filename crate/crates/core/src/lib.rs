//! Intra-retinal cyst segmentation for SD-OCT B-scans.
//!
//! The pipeline runs bilateral denoising ([`preprocess`]), graph-based
//! ILM/ISM boundary extraction ([`retinagraph`]), two-channel sample
//! assembly in a fixed reference frame ([`samplekit`]), and a U-Net with
//! attention-gated skips and an ASPP bottleneck ([`tensornet`]) trained
//! with BCE and Adam ([`trainer`]). [`metrics`] scores predictions against
//! one or more graders.

pub mod dataio;
pub mod metrics;
pub mod preprocess;
pub mod retinagraph;
pub mod rng;
pub mod samplekit;
pub mod tensornet;
pub mod trainer;
