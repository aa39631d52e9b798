use super::prompt::{PromptEmbedding, PromptTable};
use crate::codec::{pool_mask, CodecParams, LatentGrid, LatentNorm, MaskPooling};
use crate::error::{Error, Result};
use crate::flow::{warp_first_frame, ConsistencyParams, FirstFrameFlows, FlowParams};
use crate::media::Frame;
use crate::spatialcond::ConditionImage;
use crate::tensorad::Tensor;

/// Per-frame conditioning of one clip, all at latent resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle {
    /// Spatial condition latents `c`.
    pub spatial: Vec<LatentGrid>,
    /// Latents of the flow-warped first frame.
    pub flow: Vec<LatentGrid>,
    /// Latent of the first frame, repeated.
    pub first: Vec<LatentGrid>,
    /// One-channel occlusion grids in [0,1].
    pub occlusion: Vec<LatentGrid>,
    pub prompt: PromptEmbedding,
    /// Input-clip frame indices the flows and conditions were computed
    /// from. Generated frames never appear here.
    pub source_frames: Vec<usize>,
}

impl ConditionBundle {
    pub fn len(&self) -> usize {
        self.spatial.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spatial.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.spatial.len();
        if n == 0 {
            return Err(Error::Contract("empty condition bundle".into()));
        }
        for (what, len) in [
            ("flow", self.flow.len()),
            ("first", self.first.len()),
            ("occlusion", self.occlusion.len()),
            ("source", self.source_frames.len()),
        ] {
            if len != n {
                return Err(Error::Shape(format!("{what} has {len} frames, expected {n}")));
            }
        }
        Ok(())
    }

    pub fn with_prompt(&self, prompt: PromptEmbedding) -> Self {
        Self {
            prompt,
            ..self.clone()
        }
    }
}

/// Everything needed to turn frames into latents and condition bundles.
#[derive(Debug, Clone)]
pub struct Conditioner {
    pub codec: CodecParams,
    pub norm: LatentNorm,
    pub flow: FlowParams,
    pub consistency: ConsistencyParams,
    pub fill: f32,
    pub pooling: MaskPooling,
    pub prompts: PromptTable,
}

impl Conditioner {
    pub fn new(codec: CodecParams, d_txt: usize, seed: u64) -> Self {
        Self {
            codec,
            norm: LatentNorm::default(),
            flow: FlowParams::default(),
            consistency: ConsistencyParams::default(),
            fill: 0.5,
            pooling: MaskPooling::default(),
            prompts: PromptTable::new(d_txt, seed),
        }
    }

    /// Diffusion-space latent of a frame.
    pub fn encode(&self, frame: &Frame) -> Result<LatentGrid> {
        Ok(self.norm.apply(&self.codec.encode(frame)?))
    }

    pub fn decode(&self, z: &LatentGrid) -> Result<Frame> {
        self.codec.decode(&self.norm.invert(z))
    }

    pub fn decode_raw(&self, z: &LatentGrid) -> Result<Vec<f64>> {
        self.codec.decode_raw(&self.norm.invert(z))
    }

    pub fn encode_all(&self, frames: &[Frame]) -> Result<Vec<LatentGrid>> {
        frames.iter().map(|f| self.encode(f)).collect()
    }

    pub fn first_frame_flows(&self, frames: &[Frame]) -> Result<FirstFrameFlows> {
        let clip = crate::media::VideoClip::new(frames.to_vec(), 30, 1)?;
        FirstFrameFlows::estimate(&clip, &self.flow, &self.consistency)
    }

    /// Builds the bundle from input-clip flows, `first` (possibly edited)
    /// and the input clip's condition images.
    pub fn bundle(
        &self,
        first: &Frame,
        flows: &FirstFrameFlows,
        conditions: &[ConditionImage],
        prompt: &str,
        source_frames: Vec<usize>,
    ) -> Result<ConditionBundle> {
        let n = conditions.len();
        if flows.len() != n || source_frames.len() != n {
            return Err(Error::Shape(format!(
                "{} flows and {} source indices for {n} conditions",
                flows.len(),
                source_frames.len()
            )));
        }
        let first_latent = self.encode(first)?;
        let mut flow = Vec::with_capacity(n);
        let mut occlusion = Vec::with_capacity(n);
        for i in 0..n {
            let w = warp_first_frame(first, &flows.bwd[i], &flows.bwd_occ[i], self.fill)?;
            flow.push(self.encode(&w.frame)?);
            occlusion.push(pool_mask(&flows.bwd_occ[i], self.pooling)?);
        }
        let spatial = conditions
            .iter()
            .map(|c| self.encode(&c.frame))
            .collect::<Result<Vec<_>>>()?;
        let b = ConditionBundle {
            spatial,
            flow,
            first: vec![first_latent; n],
            occlusion,
            prompt: self.prompts.embed(prompt),
            source_frames,
        };
        b.validate()?;
        Ok(b)
    }
}

/// `[N, C, h, w]` tensor from channel-last grids.
pub fn grids_to_tensor(grids: &[LatentGrid]) -> Result<Tensor> {
    let g0 = grids.first().ok_or_else(|| Error::Contract("no latents".into()))?;
    let (h, w, c) = g0.dims();
    let mut data = Vec::with_capacity(grids.len() * h * w * c);
    for g in grids {
        g0.same_shape(g)?;
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(g.get(y, x, ch));
                }
            }
        }
    }
    Tensor::new(vec![grids.len(), c, h, w], data)
}

pub fn tensor_to_grids(t: &Tensor) -> Result<Vec<LatentGrid>> {
    let &[n, c, h, w] = t.dims() else {
        return Err(Error::Shape(format!("expected [N,C,h,w], got {:?}", t.dims())));
    };
    let d = t.data();
    (0..n)
        .map(|i| {
            let mut data = vec![0.0; h * w * c];
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data[(y * w + x) * c + ch] = d[((i * c + ch) * h + y) * w + x];
                    }
                }
            }
            LatentGrid::new(h, w, c, data)
        })
        .collect()
}
