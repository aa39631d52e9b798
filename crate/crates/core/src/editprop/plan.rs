use crate::error::{Error, Result};

/// Key frame layout of an autoregressive run. Consecutive batches share
/// one key frame: the last of batch `m` is the first of batch `m + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPlan {
    pub keyframe_interval: usize,
    pub frames_per_batch: usize,
    pub num_batches: usize,
}

impl Default for BatchPlan {
    fn default() -> Self {
        Self {
            keyframe_interval: 4,
            frames_per_batch: 16,
            num_batches: 1,
        }
    }
}

/// How a plan was fitted to a concrete input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanLayout {
    /// The plan actually run; `num_batches` may be lower than requested.
    pub plan: BatchPlan,
    /// Input frame index of every key frame.
    pub key_indices: Vec<usize>,
    /// Requested index of the final key when it was pulled back onto the
    /// last input frame.
    pub clamped_last: Option<usize>,
    pub truncated_from: Option<usize>,
}

impl PlanLayout {
    pub fn batch_keys(&self, batch: usize) -> &[usize] {
        let n = self.plan.frames_per_batch;
        let start = batch * (n - 1);
        &self.key_indices[start..start + n]
    }

    /// Human-readable notes on clamping and truncation, empty if none.
    pub fn notes(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(req) = self.clamped_last {
            out.push(format!(
                "final key frame {req} lies past the input; clamped to {}",
                self.key_indices.last().unwrap()
            ));
        }
        if let Some(m) = self.truncated_from {
            out.push(format!(
                "plan asked for {m} batches; input only covers {}",
                self.plan.num_batches
            ));
        }
        out
    }
}

impl BatchPlan {
    pub fn new(keyframe_interval: usize, frames_per_batch: usize, num_batches: usize) -> Result<Self> {
        let p = Self {
            keyframe_interval,
            frames_per_batch,
            num_batches,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.keyframe_interval == 0 || self.frames_per_batch < 2 || self.num_batches == 0 {
            return Err(Error::Config(format!(
                "plan needs interval ≥ 1, at least 2 frames per batch and 1 batch, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn total_keys(&self) -> usize {
        self.num_batches * (self.frames_per_batch - 1) + 1
    }

    /// Frames after interpolating between keys.
    pub fn output_frames(&self) -> usize {
        (self.total_keys() - 1) * self.keyframe_interval + 1
    }

    /// Input frames spanned by the keys.
    pub fn input_span(&self) -> usize {
        self.output_frames()
    }

    /// Places the keys on an input of `len` frames. A final key that
    /// overshoots by less than one interval is clamped onto the last
    /// frame; otherwise whole batches are dropped until the plan fits.
    pub fn layout(&self, len: usize) -> Result<PlanLayout> {
        self.validate()?;
        let mut plan = *self;
        while plan.num_batches > 0 {
            let last = (plan.total_keys() - 1) * plan.keyframe_interval;
            if last < len + plan.keyframe_interval - 1 {
                let mut key_indices: Vec<usize> =
                    (0..plan.total_keys()).map(|k| k * plan.keyframe_interval).collect();
                let mut clamped_last = None;
                if last >= len {
                    clamped_last = Some(last);
                    *key_indices.last_mut().unwrap() = len - 1;
                }
                return Ok(PlanLayout {
                    plan,
                    key_indices,
                    clamped_last,
                    truncated_from: (plan.num_batches != self.num_batches).then_some(self.num_batches),
                });
            }
            plan.num_batches -= 1;
        }
        Err(Error::Config(format!(
            "input of {len} frames is too short for one batch of {} keys at interval {}",
            self.frames_per_batch, self.keyframe_interval
        )))
    }
}
