//! Forward measurement model: blur, tilt, additive Gaussian noise.

mod conv;
mod generate;
pub mod pfm;
mod warp;

pub use conv::{convolve, convolve_adjoint, convolve_adjoint_kernel};
pub(crate) use conv::{fft2, kernel_center};
pub use generate::{gen_gaussian_kernel, gen_motion_kernel, gen_tilt_field};
pub use warp::{tilt_warp, tilt_warp_adjoint, tilt_warp_vjp_field};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::SignalGrid;
use crate::rng::normal;

/// A blur kernel, `h × w`.
pub type Kernel = SignalGrid;
/// Per-pixel displacements, `H × W × 2` with channels `(dx, dy)`.
pub type TiltField = SignalGrid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub grid: SignalGrid,
    pub noise_std: f64,
}

/// `y = k * T_phi(x) + n` (or `k * x + n` without a field), `n ~ N(0, sigma^2 I)`.
pub fn degrade<R: Rng + ?Sized>(
    x: &SignalGrid,
    k: &Kernel,
    phi: Option<&TiltField>,
    sigma: f64,
    rng: &mut R,
) -> Result<Measurement> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::param(format!("noise std must be nonnegative, got {sigma}")));
    }
    let warped;
    let src = match phi {
        Some(phi) => {
            warped = tilt_warp(x, phi)?;
            &warped
        }
        None => x,
    };
    let mut y = convolve(src, k)?;
    if sigma > 0.0 {
        y.data_mut().iter_mut().for_each(|v| *v += sigma * normal(rng));
    }
    Ok(Measurement { grid: y, noise_std: sigma })
}
