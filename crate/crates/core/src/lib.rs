pub mod aggregation;
pub mod analysis;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod model_zoo;
pub mod params;
pub mod tensor;
pub mod timeseries;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use params::{ParamId, ParamKind, ParamStore, StateId};
pub use tensor::{Scalar, Shape, Tensor};
pub use exec::{Feeds, Mode, Session};
pub use graph::{Graph, Init, Net, NodeId, Op, Role, Var};
