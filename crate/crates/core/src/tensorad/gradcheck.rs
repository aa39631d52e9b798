use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Central finite-difference check of tape gradients.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub h: f64,
    /// Denominator floor of the relative error; gradients smaller than this
    /// are judged by absolute error.
    pub floor: f64,
    /// Check at most this many randomly chosen scalar inputs.
    pub max_samples: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            h: 1e-3,
            floor: 1e-3,
            max_samples: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(input, element, analytic, numeric)` of the worst entry.
    pub worst: (usize, usize, f64, f64),
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Compares the reverse-mode gradient of `f` against central differences
/// with step `cfg.h` at every (or a sample of) input element.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], cfg: &GradCheck) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let loss = f(&mut tape, &vars)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::Contract("gradient check needs a scalar function".into()));
    }
    let grads = tape.backward(loss)?;

    let mut positions: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    if let Some(n) = cfg.max_samples {
        if n < positions.len() {
            let mut rng = SeededRng::derive(cfg.seed, "gradcheck");
            // Partial Fisher–Yates.
            for k in 0..n {
                let r = k + rng.below(positions.len() - k);
                positions.swap(k, r);
            }
            positions.truncate(n);
        }
    }

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: (0, 0, 0.0, 0.0),
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, j) in positions {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + cfg.h;
        let plus = eval(&f, &work)?;
        work[i].data_mut()[j] = orig - cfg.h;
        let minus = eval(&f, &work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * cfg.h);
        let analytic = grads.get(vars[i]).expect("leaf gradient").data()[j];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(cfg.floor);
        if rel > report.max_rel_err || report.checked == 0 {
            report.max_rel_err = rel;
            report.worst = (i, j, analytic, numeric);
        }
        report.checked += 1;
    }
    Ok(report)
}
