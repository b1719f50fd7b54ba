pub mod checkpoint;
pub mod corpus;
pub mod decode_eval;
pub mod exec;
pub mod format;
pub mod grid;
pub mod model;
pub mod objective;
pub mod pipeline;
pub mod preprocess;
pub mod schema;
pub mod tensor;
