use std::str::FromStr;

use super::{LayerSpec, NetworkSpec, Padding};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnvFamily {
    MinAtar,
    Chain,
}

impl FromStr for EnvFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minatar" => Ok(EnvFamily::MinAtar),
            "chain" => Ok(EnvFamily::Chain),
            other => Err(Error::config("env_family", format!("unknown family `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Encoder,
    QHead,
    /// Auxiliary TD-error estimator of QRC; same layout as the Q head.
    AuxHead,
    Dynamics,
    Projection,
    Prediction,
}

/// Sizes that parameterize the fixed architectures.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchDims {
    pub obs_shape: Vec<usize>,
    pub n_actions: usize,
    pub conv_channels: usize,
    pub hidden: usize,
}

impl ArchDims {
    /// The MinAtar column: 16-channel 3x3 encoder, 128-unit heads.
    pub fn minatar(in_channels: usize, n_actions: usize) -> Self {
        Self {
            obs_shape: vec![in_channels, 10, 10],
            n_actions,
            conv_channels: 16,
            hidden: 128,
        }
    }

    pub fn chain(n_states: usize, n_actions: usize) -> Self {
        Self {
            obs_shape: vec![n_states],
            n_actions,
            conv_channels: 0,
            hidden: 0,
        }
    }
}

pub fn build_network(family: EnvFamily, head: HeadKind, dims: &ArchDims) -> Result<NetworkSpec> {
    let a = dims.n_actions;
    if a == 0 {
        return Err(Error::config("n_actions", "must be positive"));
    }
    match family {
        EnvFamily::MinAtar => {
            if dims.obs_shape.len() != 3 {
                return Err(Error::ShapeMismatch {
                    layer: "minatar observation".into(),
                    expected: vec![0, 10, 10],
                    got: dims.obs_shape.clone(),
                });
            }
            let ch = dims.conv_channels;
            let encoder = NetworkSpec::new(
                &dims.obs_shape,
                vec![
                    LayerSpec::conv(ch, 3, 1, Padding::Valid),
                    LayerSpec::LayerNorm,
                    LayerSpec::leaky_relu(),
                ],
            )?;
            let latent = encoder.output_shape().to_vec();
            match head {
                HeadKind::Encoder => Ok(encoder),
                HeadKind::QHead | HeadKind::AuxHead => NetworkSpec::new(
                    &latent,
                    vec![
                        LayerSpec::dense(dims.hidden),
                        LayerSpec::LayerNorm,
                        LayerSpec::leaky_relu(),
                        LayerSpec::dense_no_bias(a),
                    ],
                ),
                HeadKind::Dynamics => NetworkSpec::new(
                    &[latent[0] + a, latent[1], latent[2]],
                    vec![
                        LayerSpec::conv(ch, 3, 1, Padding::SameReflect),
                        LayerSpec::LayerNorm,
                        LayerSpec::leaky_relu(),
                        LayerSpec::conv(ch, 3, 1, Padding::SameReflect),
                        LayerSpec::LayerNorm,
                        LayerSpec::leaky_relu(),
                    ],
                ),
                HeadKind::Projection => NetworkSpec::new(&latent, vec![LayerSpec::dense(dims.hidden)]),
                HeadKind::Prediction => NetworkSpec::new(&[dims.hidden], vec![LayerSpec::dense(dims.hidden)]),
            }
        }
        EnvFamily::Chain => {
            if dims.obs_shape.len() != 1 {
                return Err(Error::ShapeMismatch {
                    layer: "chain observation".into(),
                    expected: vec![0],
                    got: dims.obs_shape.clone(),
                });
            }
            let n = dims.obs_shape[0];
            match head {
                HeadKind::Encoder => NetworkSpec::new(&dims.obs_shape, vec![]),
                HeadKind::QHead | HeadKind::AuxHead | HeadKind::Projection => {
                    NetworkSpec::new(&[n], vec![LayerSpec::dense(a)])
                }
                HeadKind::Dynamics => NetworkSpec::new(
                    &[n + a],
                    vec![LayerSpec::dense(n), LayerSpec::LayerNorm, LayerSpec::leaky_relu()],
                ),
                HeadKind::Prediction => NetworkSpec::new(&[a], vec![LayerSpec::dense(a)]),
            }
        }
    }
}
