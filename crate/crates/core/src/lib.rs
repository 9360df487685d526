pub mod backend;
pub mod corpus;
pub mod denoise;
pub mod metrics;
pub mod pipeline;
pub mod record;
pub mod seed;
pub mod seqlabel;
