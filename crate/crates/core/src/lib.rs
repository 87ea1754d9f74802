//! Abstract geometric scene representation for operating-room video.
//!
//! The pipeline stages are:
//!
//! 1. **Abstraction** – instance masks and depth maps become per-frame
//!    ellipse nodes ([`abstraction`]).
//! 2. **Rendering** – nodes are rasterized into class/depth-coded
//!    conditioning images ([`render`]).
//! 3. **Conditioning** – template sequences or user-edited trajectories are
//!    rendered into bundles for a video-diffusion backend ([`conditioning`]).
//! 4. **Near-miss data** – geometric labeling and scripted scenarios for
//!    sterile-field near misses ([`nearmiss`]).
//! 5. **Metrics** – structural alignment and reference quality between
//!    conditioning and generated frames ([`metrics`]).

pub mod abstraction;
pub mod conditioning;
pub mod error;
pub mod io;
pub mod metrics;
pub mod nearmiss;
pub mod render;
pub mod scene;
pub mod synth;

pub use error::{Error, ErrorKind, Result};
pub use scene::{ClassPalette, EllipsoidNode, Resolution, SceneFrame, SceneSequence};
