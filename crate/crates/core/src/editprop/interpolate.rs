use crate::error::{Error, Result};
use crate::flow::{warp_frame, AdjacentFlows};
use crate::media::Frame;

#[derive(Debug, Clone, PartialEq)]
pub struct Interpolated {
    pub frames: Vec<Frame>,
    /// True when no flows were given and pairs were cross-faded.
    pub crossfade: bool,
}

fn blend(a: &Frame, b: &Frame, tau: f32) -> Result<Frame> {
    a.same_dims(b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (1.0 - tau) * x + tau * y)
        .collect();
    let (h, w) = a.dims();
    Frame::new(h, w, data)
}

/// Fills `interval − 1` frames between each pair of adjacent keys.
///
/// With flows, the frame at fraction `τ` blends key `a` pulled along
/// `τ·F(b→a)` with key `b` pulled along `(1−τ)·F(a→b)`. Output length is
/// `(K − 1)·interval + 1`.
pub fn interpolate_nonkeys(keys: &[Frame], interval: usize, flows: Option<&AdjacentFlows>) -> Result<Interpolated> {
    if interval == 0 {
        return Err(Error::Config("interpolation interval must be at least 1".into()));
    }
    if keys.is_empty() {
        return Err(Error::Contract("no key frames to interpolate".into()));
    }
    if let Some(f) = flows {
        if f.fwd.len() != keys.len() - 1 || f.bwd.len() != keys.len() - 1 {
            return Err(Error::Shape(format!(
                "{} keys need {} flow pairs, got {}",
                keys.len(),
                keys.len() - 1,
                f.fwd.len()
            )));
        }
    }
    let mut frames = Vec::with_capacity((keys.len() - 1) * interval + 1);
    for (k, pair) in keys.windows(2).enumerate() {
        let (a, b) = (&pair[0], &pair[1]);
        frames.push(a.clone());
        for j in 1..interval {
            let tau = j as f32 / interval as f32;
            let f = match flows {
                Some(fl) => {
                    let from_a = warp_frame(a, &fl.bwd[k].scaled(tau), None, 0.0)?;
                    let from_b = warp_frame(b, &fl.fwd[k].scaled(1.0 - tau), None, 0.0)?;
                    blend(&from_a, &from_b, tau)?
                }
                None => blend(a, b, tau)?,
            };
            frames.push(f);
        }
    }
    frames.push(keys.last().unwrap().clone());
    Ok(Interpolated {
        frames,
        crossfade: flows.is_none() && interval > 1 && keys.len() > 1,
    })
}
