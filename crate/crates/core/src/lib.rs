pub mod autodiff;
pub mod experiment;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod policy;
pub mod ppo;
pub mod reward;
pub mod seed;
pub mod sft;
pub mod task;
