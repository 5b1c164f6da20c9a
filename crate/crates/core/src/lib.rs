pub mod balancing;
pub mod cavit;
pub mod cohort_attention;
pub mod dataset;
pub mod diffcore;
pub mod error;
pub mod mi_adversary;
pub mod mil;
pub mod cli;
pub mod trainer;
pub mod verify;
pub mod init;
