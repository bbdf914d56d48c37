use crate::ccr::{log_ccr_map, DEFAULT_EPSILON};
use crate::edges::{canny_default, derive_gt_edges, edge_pyramid};
use crate::error::{Error, Result};
use crate::image::{Image, IntrinsicTriple};
use crate::losses::Targets;
use crate::network::NetworkConfig;
use crate::tensor::Tensor;

/// One training example in network layout (`[C,H,W]` tensors).
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor,
    pub reflectance: Tensor,
    pub shading: Tensor,
    /// Ratio-encoder input: 6 log cross color ratio planes, or one Canny plane.
    pub ratio_input: Tensor,
    pub reflectance_edges: [Tensor; 3],
    pub shading_edges: [Tensor; 3],
}

/// Channel-major copy of an image.
pub fn image_to_tensor(img: &Image) -> Tensor {
    let data = (0..img.channels()).flat_map(|c| img.plane(c)).collect();
    Tensor::new(vec![img.channels(), img.height(), img.width()], data).expect("image data is finite")
}

/// Image view of sample `b` of a `[B,C,H,W]` tensor.
pub fn tensor_to_image(t: &Tensor, b: usize) -> Result<Image> {
    let (_, c, h, w) = t.dims4()?;
    let plane = h * w;
    let src = &t.data()[b * c * plane..(b + 1) * c * plane];
    let mut data = vec![0.0; c * plane];
    for ch in 0..c {
        for i in 0..plane {
            data[i * c + ch] = src[ch * plane + i];
        }
    }
    Image::new(h, w, c, data)
}

/// Network input for the second encoder, as selected by the config.
pub fn ratio_input(image: &Image, cfg: &NetworkConfig) -> Result<Tensor> {
    if cfg.ablations.canny_input {
        return Ok(image_to_tensor(&canny_default(image)?));
    }
    let map = log_ccr_map(image, DEFAULT_EPSILON)?;
    Tensor::new(vec![crate::ccr::CCR_CHANNELS, map.height(), map.width()], map.to_planar())
}

fn edge_levels(edges: &Image, size: usize) -> Result<[Tensor; 3]> {
    let (half, quarter) = edge_pyramid(edges, size)?;
    Ok([
        image_to_tensor(&edges.to_rgb()?),
        image_to_tensor(&half.to_rgb()?),
        image_to_tensor(&quarter.to_rgb()?),
    ])
}

pub fn prepare_sample(triple: &IntrinsicTriple, cfg: &NetworkConfig) -> Result<Sample> {
    let (h, w) = triple.size();
    if h != cfg.input_size || w != cfg.input_size {
        return Err(Error::Size(format!("scene is {h}x{w}, network expects {0}x{0}", cfg.input_size)));
    }
    let (r_edges, s_edges) = derive_gt_edges(triple)?;
    Ok(Sample {
        image: image_to_tensor(&triple.image),
        reflectance: image_to_tensor(&triple.reflectance),
        shading: image_to_tensor(&triple.shading),
        ratio_input: ratio_input(&triple.image, cfg)?,
        reflectance_edges: edge_levels(&r_edges, h)?,
        shading_edges: edge_levels(&s_edges, h)?,
    })
}

/// A stacked minibatch: network inputs and loss targets.
#[derive(Clone, Debug)]
pub struct Batch {
    pub image: Tensor,
    pub ratio_input: Tensor,
    pub targets: Targets,
}

pub fn make_batch(samples: &[&Sample]) -> Result<Batch> {
    let stack = |f: &dyn Fn(&Sample) -> &Tensor| -> Result<Tensor> {
        let items: Vec<Tensor> = samples.iter().map(|s| f(s).clone()).collect();
        Tensor::stack(&items)
    };
    let image = stack(&|s| &s.image)?;
    Ok(Batch {
        ratio_input: stack(&|s| &s.ratio_input)?,
        targets: Targets {
            image: image.clone(),
            reflectance: stack(&|s| &s.reflectance)?,
            shading: stack(&|s| &s.shading)?,
            reflectance_edges: [
                stack(&|s| &s.reflectance_edges[0])?,
                stack(&|s| &s.reflectance_edges[1])?,
                stack(&|s| &s.reflectance_edges[2])?,
            ],
            shading_edges: [
                stack(&|s| &s.shading_edges[0])?,
                stack(&|s| &s.shading_edges[1])?,
                stack(&|s| &s.shading_edges[2])?,
            ],
        },
        image,
    })
}
