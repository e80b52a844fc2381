//! Dataset readers and writers, synthetic problem generation, result tables.

pub mod g2o;
pub mod results;
pub mod synthetic;

pub use g2o::{format_g2o, parse_g2o, parse_g2o_str, write_g2o, G2oFile, KappaPolicy};
pub use results::{format_results, parse_results, read_results, write_results, ResultFormat, ResultRecord};
pub use synthetic::{aligned_errors, generate_synthetic, random_init, InitMode, SyntheticSpec};
