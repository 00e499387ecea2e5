pub mod evaluate;
pub mod generate;
pub mod report;
pub mod sample;
pub mod study;
pub mod train;
