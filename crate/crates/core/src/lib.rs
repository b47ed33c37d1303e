//! Multi-domain semantic segmentation for multispectral rasters.
//!
//! Three feature domains are extracted from a tile and fused per pixel:
//!
//! * an **index** domain built from normalized-difference band indices at
//!   native resolution,
//! * a **space** domain from a small multi-head self-attention encoder,
//! * a **wave** domain from amplitude/phase token mixing.
//!
//! Both learned encoders run on the coarse low-pass band of a Haar wavelet
//! pyramid and are restored to full resolution by inverting that pyramid
//! with the stored detail coefficients, so no information is lost to
//! downsampling. Each domain is gated by channel attention, turned into a
//! class distribution, and the distributions are fused with learned convex
//! weights.
//!
//! Everything runs on the small reverse-mode engine in [`autodiff`].

pub mod autodiff;
pub mod config;
pub mod element;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod index;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod raster;
pub mod space;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod wave;
pub mod wavelet;

pub use element::Element;
pub use error::{Error, Result};
pub use tensor::Tensor;
