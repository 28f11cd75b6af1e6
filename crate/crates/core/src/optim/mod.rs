//! Optimizers, the joint training loop, pixel-space CAL descent and the
//! finite-difference gradient checker.

mod adam;
pub mod gradcheck;
mod pixels;
mod train;

pub use adam::{adam_step, Method, OptimizerState};
pub use gradcheck::{grad_check, grad_check_filtered, GradCheckReport};
pub use pixels::{optimize_pixels_cal, write_trajectory_csv, PixelDescent, PixelDescentConfig};
pub use train::{save_curve_csv, train_flow, write_curve_csv, CurvePoint, TrainConfig, DEQUANTIZATION};
