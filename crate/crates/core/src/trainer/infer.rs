use crate::error::Result;
use crate::image::Image;
use crate::network::{forward, Mode, NetworkConfig, NetworkParams};
use crate::tensor::{Tape, Tensor};

use super::data::{image_to_tensor, ratio_input, tensor_to_image};

/// Evaluation-mode outputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub reflectance: Image,
    pub shading: Image,
    pub unrefined_reflectance: Image,
    pub unrefined_shading: Image,
    /// `(name, map)` for each edge output, full scale first; empty when the
    /// edge decoders are ablated.
    pub edges: Vec<(&'static str, Image)>,
}

/// Runs the network in evaluation mode over `images` as one batch.
pub fn decompose(params: &NetworkParams, cfg: &NetworkConfig, images: &[Image]) -> Result<Vec<Decomposition>> {
    let image = Tensor::stack(&images.iter().map(image_to_tensor).collect::<Vec<_>>())?;
    let ratio = Tensor::stack(&images.iter().map(|im| ratio_input(im, cfg)).collect::<Result<Vec<_>>>()?)?;
    let mut tape = Tape::new();
    let out = forward(&mut tape, params, cfg, &image, &ratio, Mode::Eval)?;
    let b = out.bundle;
    let edge_vars = [
        ("reflectance_edges", b.reflectance_edge),
        ("shading_edges", b.shading_edge),
        ("reflectance_edges_half", b.reflectance_edge_half),
        ("shading_edges_half", b.shading_edge_half),
        ("reflectance_edges_quarter", b.reflectance_edge_quarter),
        ("shading_edges_quarter", b.shading_edge_quarter),
    ];
    (0..images.len())
        .map(|i| {
            let get = |v| tensor_to_image(tape.value(v), i);
            let mut edges = Vec::new();
            for (name, v) in edge_vars {
                if let Some(v) = v {
                    edges.push((name, get(v)?));
                }
            }
            Ok(Decomposition {
                reflectance: get(b.refined_reflectance)?,
                shading: get(b.refined_shading)?,
                unrefined_reflectance: get(b.unrefined_reflectance)?,
                unrefined_shading: get(b.unrefined_shading)?,
                edges,
            })
        })
        .collect()
}
