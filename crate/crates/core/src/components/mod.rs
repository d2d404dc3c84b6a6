pub mod energy;
pub mod intersect;
pub mod merger;
pub mod model;
pub mod storage;

pub use energy::EnergyTable;
pub use model::{model_cascade, model_einsum, ComponentReport, EinsumReport, ModelReport, Traffic};
