pub mod analysis;
pub mod driving_sim;
pub mod factor_space;
pub mod policies;
pub mod rollout_eval;
pub mod split_builder;
pub mod study_harness;
pub mod trainer;
