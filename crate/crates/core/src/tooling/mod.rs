//! Engineering around the model: synthetic data and file formats, the
//! trainer, the error-rate scorer and the model container.

pub mod container;
pub mod data;
pub mod recipe;
pub mod train;
pub mod wer;
