//! Desk-scale benchmark of self-supervised pretraining objectives for a shared
//! 3-D windowed-attention encoder, with few-shot segmentation transfer across
//! two synthetic imaging modalities.

pub mod cka;
pub mod cli;
pub mod encoder;
pub mod finetune;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod phantom;
pub mod pretext;
pub mod rng;
