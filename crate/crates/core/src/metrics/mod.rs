//! Full-reference (PSNR, SSIM) and no-reference (UIQM) quality metrics,
//! the histogram-equalization baseline and dataset evaluation.

mod histeq;
mod psnr;
pub mod report;
pub mod ssim;
pub mod uiqm;

pub use histeq::hist_equalize;
pub use psnr::psnr;
pub use report::{evaluate_dataset, Baseline, Enhancer, MetricReport};
pub use ssim::ssim;
pub use uiqm::{uiqm, Uiqm};
