pub mod evaluation;
pub mod io;
pub mod mci;
pub mod pipeline;
pub mod selector;
pub mod sfm;
pub mod simulator;
pub mod slam;
pub mod types;
pub mod vision;
