pub mod audit;
pub mod flops;
pub mod infer;
pub mod oracle;
pub mod selftest;
pub mod train;
