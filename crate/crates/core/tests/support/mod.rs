pub mod fixtures;
pub mod reference_eval;
