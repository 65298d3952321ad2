pub mod lgssm;
pub mod spatial;
