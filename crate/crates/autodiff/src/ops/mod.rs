mod conv;
mod elementwise;
mod layout;
mod loss;
mod norm;
mod pool;
mod warp;

pub use loss::{sigmoid, smooth_l1_derivative, smooth_l1_value};
pub use norm::L2NORM_EPS;
pub use warp::WarpRegion;
