//! Training-free 3D object grouping and open-vocabulary lookup over Gaussian
//! splatting scenes.
//!
//! Multi-view 2D instance masks are lifted onto the Gaussians of a trained
//! scene by accumulating each Gaussian's rendering weight inside and outside
//! the mask ([`grouping`]). Gaussians whose centre lands on both sides of the
//! mask boundary across views and that are not opaque are dropped as neutral
//! ([`neutral`]). Objects are then named by a captioning model and the names
//! embedded ([`distill`]), which lets free-text queries pick objects by
//! cosine similarity ([`query`]).

pub mod config;
pub mod distill;
pub mod eval;
pub mod fixture;
pub mod grouping;
pub mod masks;
pub mod neutral;
pub mod pipeline;
pub mod query;
pub mod render;
pub mod scene;
