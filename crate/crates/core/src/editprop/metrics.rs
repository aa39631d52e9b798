use crate::error::{Error, Result};
use crate::flow::AdjacentFlows;
use crate::imgproc::sample_frame;
use crate::media::Frame;

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyScore {
    /// Mean squared difference per channel over non-occluded pixels.
    pub score: f64,
    pub pixels: usize,
    /// Pairs with every pixel occluded.
    pub skipped: Vec<usize>,
}

/// Warping error between consecutive frames: frame `i` pulled onto frame
/// `i+1` by `bwd[i]`, compared where `bwd_occ[i]` is clear. Lower is
/// better. The flows should come from the input video.
pub fn temporal_consistency(frames: &[Frame], flows: &AdjacentFlows) -> Result<ConsistencyScore> {
    let pairs = frames.len().saturating_sub(1);
    if pairs == 0 {
        return Err(Error::Contract("temporal consistency needs at least two frames".into()));
    }
    if flows.bwd.len() != pairs || flows.bwd_occ.len() != pairs {
        return Err(Error::Shape(format!("{pairs} frame pairs but {} flows", flows.bwd.len())));
    }
    let (mut sum, mut count, mut skipped) = (0.0f64, 0usize, Vec::new());
    for i in 0..pairs {
        let (a, b) = (&frames[i], &frames[i + 1]);
        let (flow, occ) = (&flows.bwd[i], &flows.bwd_occ[i]);
        flow.matches_frame(b)?;
        occ.matches_flow(flow)?;
        a.same_dims(b)?;
        let before = count;
        for y in 0..b.height() {
            for x in 0..b.width() {
                if occ.get(x, y) {
                    continue;
                }
                let (u, v) = flow.get(x, y);
                let w = sample_frame(a, x as f32 + u, y as f32 + v);
                for (c, wc) in w.iter().enumerate() {
                    let d = (b.get(y, x, c) - wc) as f64;
                    sum += d * d;
                }
                count += 3;
            }
        }
        if count == before {
            skipped.push(i);
        }
    }
    if count == 0 {
        return Err(Error::Contract("every frame pair is fully occluded".into()));
    }
    Ok(ConsistencyScore {
        score: sum / count as f64,
        pixels: count / 3,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{ConsistencyParams, FlowField, FlowParams, OcclusionMask};
    use crate::media::VideoClip;
    use crate::rng::SeededRng;
    use crate::synth::{generate, SceneKind, SceneSpec};

    fn zero_flows(n: usize, w: usize, h: usize) -> AdjacentFlows {
        AdjacentFlows {
            fwd: vec![FlowField::zeros(w, h); n],
            bwd: vec![FlowField::zeros(w, h); n],
            bwd_occ: vec![OcclusionMask::empty(w, h); n],
        }
    }

    #[test]
    fn constant_clip_scores_zero() {
        let frames = vec![Frame::filled(16, 16, 0.3).unwrap(); 4];
        let s = temporal_consistency(&frames, &zero_flows(3, 16, 16)).unwrap();
        assert_eq!(s.score, 0.0);
        assert_eq!(s.pixels, 3 * 256);
    }

    #[test]
    fn noise_frames_score_twice_the_variance() {
        let mut rng = SeededRng::new(9);
        let frames: Vec<Frame> = (0..6)
            .map(|_| Frame::from_fn(32, 32, |_, _, _| rng.uniform(0.0, 1.0) as f32).unwrap())
            .collect();
        let s = temporal_consistency(&frames, &zero_flows(5, 32, 32)).unwrap();
        assert!((s.score - 1.0 / 6.0).abs() < 0.01, "{}", s.score);
    }

    #[test]
    fn occluded_pairs_are_skipped() {
        let frames = vec![Frame::filled(16, 16, 0.3).unwrap(); 3];
        let mut flows = zero_flows(2, 16, 16);
        flows.bwd_occ[0] = OcclusionMask::full(16, 16);
        let s = temporal_consistency(&frames, &flows).unwrap();
        assert_eq!(s.skipped, vec![0]);
        flows.bwd_occ[1] = OcclusionMask::full(16, 16);
        assert!(temporal_consistency(&frames, &flows).is_err());
    }

    #[test]
    fn input_against_its_own_flows() {
        for kind in [SceneKind::TranslatingSquare, SceneKind::Panning] {
            let s = generate(&SceneSpec::new(kind, 5, 3)).unwrap();
            let clip: &VideoClip = &s.clip;
            let flows =
                AdjacentFlows::estimate(clip, &FlowParams::default(), &ConsistencyParams::default()).unwrap();
            let score = temporal_consistency(&clip.frames, &flows).unwrap().score;
            assert!(score < 5e-3, "{kind}: {score}");
        }
    }
}
