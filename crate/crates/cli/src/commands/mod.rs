pub mod evaluate;
pub mod export;
pub mod phantom;
pub mod preprocess;
pub mod report;
pub mod train;
