//! Wall-clock accounting per pipeline stage.

use std::fmt;
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Flow,
    Warping,
    Inversion,
    Sampling,
    Interpolation,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Flow,
        Stage::Warping,
        Stage::Inversion,
        Stage::Sampling,
        Stage::Interpolation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Flow => "flow",
            Stage::Warping => "warping",
            Stage::Inversion => "inversion",
            Stage::Sampling => "keyframe_sampling",
            Stage::Interpolation => "interpolation",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Accumulated time per stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageTimes {
    totals: [Duration; 5],
}

impl StageTimes {
    pub fn time<T>(&mut self, stage: Stage, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.add(stage, start.elapsed());
        out
    }

    pub fn add(&mut self, stage: Stage, d: Duration) {
        self.totals[stage as usize] += d;
    }

    pub fn get(&self, stage: Stage) -> Duration {
        self.totals[stage as usize]
    }

    pub fn total(&self) -> Duration {
        self.totals.iter().sum()
    }

    pub fn merge(&mut self, other: &StageTimes) {
        for s in Stage::ALL {
            self.add(s, other.get(s));
        }
    }

    /// Time accumulated after `earlier` was taken.
    pub fn since(&self, earlier: &StageTimes) -> StageTimes {
        let mut out = StageTimes::default();
        for s in Stage::ALL {
            out.add(s, self.get(s).saturating_sub(earlier.get(s)));
        }
        out
    }

    /// `stage,seconds` rows, one per stage.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,seconds\n");
        for st in Stage::ALL {
            s.push_str(&format!("{},{:.6}\n", st, self.get(st).as_secs_f64()));
        }
        s
    }
}
