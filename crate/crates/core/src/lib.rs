//! Variational optical flow with an illumination multiplier, solved by P1
//! finite elements on the pixel grid.

pub mod adapt;
pub mod assembly;
pub mod imaging;
pub mod linsolve;
pub mod mesh;
pub mod metrics;
pub mod pipeline;
pub mod schwarz;
pub mod synthetic;
