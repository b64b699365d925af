//! The unrolled de-aliasing network: parameters, layers, forward/backward
//! passes and parameter files.

pub mod io;
pub mod layers;
pub mod model;
pub mod params;

pub use io::{load_params, load_params_expecting, read_params, save_params, write_params, ParamsHeader};
pub use layers::{addition_layer, conv3_forward, conv3_fuse, multiplier_layer, plf_forward, recon_layer};
pub use model::{model_backward, model_forward, TapeCache};
pub use params::{
    init_params, ConvKernelBank, Kernel, ModelParameters, NetworkConfig, ParamClass, ParamRef, ParameterGradients,
    PiecewiseLinearFunction, StageParameters, SubstageParameters,
};
