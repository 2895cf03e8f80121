//! Image I/O, LR synthesis, metrics and the single-patch training loop.

pub mod image;
pub mod metrics;
pub mod patches;
pub mod resize;
pub mod train;

pub use image::{load_image, save_image, Image};
pub use metrics::{psnr, psnr_y};
pub use patches::{extract_patches, synthetic_texture};
pub use resize::bicubic_resize;
pub use train::{overfit_run, EvalReport, OverfitOptions};
