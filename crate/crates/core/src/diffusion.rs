//! Zero-terminal-SNR noise schedule, v-parameterisation algebra,
//! deterministic DDIM sampling and inversion, classifier-free guidance.

use std::collections::BTreeMap;
use std::path::Path;

use crate::codec::LatentGrid;
use crate::error::{Error, Result};
use crate::manifest::KeyValues;
use crate::media;
use crate::tensorad::Tensor;

pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_STEPS: usize = 20;
pub const DEFAULT_CFG_SCALE: f64 = 7.5;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    t_max: usize,
    /// `ᾱ_0 ..= ᾱ_T`, with `ᾱ_0 = 1` and `ᾱ_T = 0`.
    alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::build(DEFAULT_T, 1e-4, 0.02).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    /// Linear betas over `1..=T`, then the terminal rescale
    /// `√ᾱ ← (√ᾱ − √ᾱ_T)·√ᾱ_1/(√ᾱ_1 − √ᾱ_T)`.
    pub fn build(t_max: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        let raw = Self::raw_alpha_bar(t_max, beta_min, beta_max)?;
        let s: Vec<f64> = raw.iter().map(|a| a.sqrt()).collect();
        let (s1, st) = (s[1], s[t_max]);
        let mut alpha_bar = vec![1.0];
        for &si in &s[1..] {
            // Written as s1·(ratio) so that t=1 and t=T land exactly.
            let r = s1 * ((si - st) / (s1 - st));
            alpha_bar.push(r * r);
        }
        Ok(Self { t_max, alpha_bar })
    }

    /// Cumulative products before the terminal rescale.
    pub fn raw_alpha_bar(t_max: usize, beta_min: f64, beta_max: f64) -> Result<Vec<f64>> {
        if t_max < 2 {
            return Err(Error::Config(format!("schedule needs T >= 2, got {t_max}")));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < min <= max < 1, got {beta_min}, {beta_max}"
            )));
        }
        let mut out = vec![1.0];
        let mut prod = 1.0;
        for t in 1..=t_max {
            let beta = beta_min + (beta_max - beta_min) * (t - 1) as f64 / (t_max - 1) as f64;
            prod *= 1.0 - beta;
            out.push(prod);
        }
        Ok(out)
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.t_max {
            return Err(Error::Contract(format!("step {t} beyond T={}", self.t_max)));
        }
        Ok(())
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha_bar[t].sqrt()
    }

    pub fn sigma(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar[t]).sqrt()
    }

    pub fn snr(&self, t: usize) -> f64 {
        self.alpha_bar[t] / (1.0 - self.alpha_bar[t])
    }

    /// `z_t = α_t·z0 + σ_t·ε`.
    pub fn add_noise(&self, z0: &LatentGrid, eps: &LatentGrid, t: usize) -> Result<LatentGrid> {
        self.check(t)?;
        z0.axpby(self.alpha(t), eps, self.sigma(t))
    }

    /// `v = α_t·ε − σ_t·z0`.
    pub fn v_target(&self, z0: &LatentGrid, eps: &LatentGrid, t: usize) -> Result<LatentGrid> {
        self.check(t)?;
        eps.axpby(self.alpha(t), z0, -self.sigma(t))
    }

    /// `(x0, ε) = (α_t·z_t − σ_t·v, σ_t·z_t + α_t·v)`.
    pub fn recover_x0_eps(
        &self,
        z_t: &LatentGrid,
        v: &LatentGrid,
        t: usize,
    ) -> Result<(LatentGrid, LatentGrid)> {
        self.check(t)?;
        let (a, s) = (self.alpha(t), self.sigma(t));
        Ok((z_t.axpby(a, v, -s)?, z_t.axpby(s, v, a)?))
    }

    /// Deterministic (η = 0) update from `t` down to `t_prev`.
    pub fn ddim_step(
        &self,
        z_t: &LatentGrid,
        v: &LatentGrid,
        t: usize,
        t_prev: usize,
    ) -> Result<LatentGrid> {
        if t <= t_prev {
            return Err(Error::Contract(format!("ddim step needs t > t_prev, got {t} -> {t_prev}")));
        }
        let (x0, eps) = self.recover_x0_eps(z_t, v, t)?;
        self.add_noise(&x0, &eps, t_prev)
    }

    /// Moves one interval up: the model output `v` was evaluated at the
    /// lower step `s`, and the result is the latent at `t > s`.
    pub fn ddim_invert_step(
        &self,
        z_s: &LatentGrid,
        v: &LatentGrid,
        s: usize,
        t: usize,
    ) -> Result<LatentGrid> {
        if t <= s {
            return Err(Error::Contract(format!("inversion step needs t > s, got {s} -> {t}")));
        }
        let (x0, eps) = self.recover_x0_eps(z_s, v, s)?;
        self.add_noise(&x0, &eps, t)
    }
}

/// Descending uniform grid from `T` to 0 with `steps + 1` entries.
pub fn step_grid(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_max {
        return Err(Error::Config(format!("steps must be in 1..={t_max}, got {steps}")));
    }
    Ok((0..=steps)
        .map(|k| ((t_max * (steps - k)) as f64 / steps as f64).round() as usize)
        .collect())
}

/// `v_uncond + scale·(v_cond − v_uncond)`.
pub fn cfg_combine(v_cond: &LatentGrid, v_uncond: &LatentGrid, scale: f64) -> Result<LatentGrid> {
    if !scale.is_finite() {
        return Err(Error::Config(format!("guidance scale {scale} is not finite")));
    }
    if scale == 1.0 {
        v_cond.same_shape(v_uncond)?;
        return Ok(v_cond.clone());
    }
    v_uncond.axpby(1.0 - scale, v_cond, scale)
}

/// Guidance strength; the unconditional branch always uses the empty prompt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub scale: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            scale: DEFAULT_CFG_SCALE,
        }
    }
}

impl GuidanceConfig {
    pub fn new(scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale >= 1.0) {
            return Err(Error::Config(format!("guidance scale must be finite and >= 1, got {scale}")));
        }
        Ok(Self { scale })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum KvKind {
    K,
    V,
}

pub fn attention_key(layer: usize, step: usize, kind: KvKind) -> String {
    let k = match kind {
        KvKind::K => 'k',
        KvKind::V => 'v',
    };
    format!("layer{layer}_step{step}_{k}")
}

/// Key/value maps recorded during inversion, indexed by generation step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionStore {
    maps: BTreeMap<String, Tensor>,
}

impl AttentionStore {
    pub fn insert(&mut self, layer: usize, step: usize, kind: KvKind, t: Tensor) {
        self.maps.insert(attention_key(layer, step, kind), t);
    }

    pub fn get(&self, layer: usize, step: usize, kind: KvKind) -> Option<&Tensor> {
        self.maps.get(&attention_key(layer, step, kind))
    }

    /// Number of (layer, step) entries with both maps present.
    pub fn pairs(&self) -> usize {
        self.maps
            .keys()
            .filter(|k| k.ends_with("_k"))
            .filter(|k| self.maps.contains_key(&format!("{}_v", &k[..k.len() - 2])))
            .count()
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.maps.keys().map(String::as_str)
    }

    /// One FVT1 file per map plus `index.txt`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = KeyValues::default();
        for (k, t) in &self.maps {
            let file = format!("{k}.fvt");
            media::save_fvt1(&t.to_raw(), dir.join(&file))?;
            index.set(k, file);
        }
        index.save(dir.join("index.txt"))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let index = KeyValues::load(dir.join("index.txt"))?;
        let mut maps = BTreeMap::new();
        for (k, file) in index.iter() {
            let raw = media::load_fvt1(dir.join(file))?;
            maps.insert(k.to_string(), Tensor::from_raw(&raw)?);
        }
        Ok(Self { maps })
    }
}

/// What a single model evaluation should do besides predicting `v`.
pub struct ModelCall<'a> {
    /// Use the empty prompt instead of the conditioning prompt.
    pub unconditional: bool,
    /// Index into the generation step grid.
    pub step: usize,
    pub record: Option<&'a mut AttentionStore>,
    pub inject: Option<&'a AttentionStore>,
}

/// A denoiser over a whole clip of latents.
pub trait VPredictor {
    fn predict(&mut self, z: &[LatentGrid], t: usize, call: ModelCall<'_>) -> Result<Vec<LatentGrid>>;

    /// Number of attention layers whose maps are recorded.
    fn attention_layers(&self) -> usize {
        0
    }
}

fn map_frames(
    a: &[LatentGrid],
    b: &[LatentGrid],
    f: impl Fn(&LatentGrid, &LatentGrid) -> Result<LatentGrid>,
) -> Result<Vec<LatentGrid>> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} latents vs {}", a.len(), b.len())));
    }
    a.iter().zip(b).map(|(x, y)| f(x, y)).collect()
}

fn check_finite(z: &[LatentGrid], what: &str) -> Result<()> {
    if z.iter().all(LatentGrid::all_finite) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite latent during {what}")))
    }
}

/// Runs the conditional inversion trajectory `z_0 → z_T`. Maps recorded
/// while moving across interval `j` of the generation grid are stored
/// under step `j`, so sampling step `j` finds the matching maps.
pub fn ddim_invert(
    schedule: &NoiseSchedule,
    model: &mut dyn VPredictor,
    z0: &[LatentGrid],
    steps: usize,
) -> Result<(Vec<LatentGrid>, AttentionStore)> {
    let grid = step_grid(schedule.t_max(), steps)?;
    let mut store = AttentionStore::default();
    let mut z = z0.to_vec();
    for j in (0..steps).rev() {
        let (t, s) = (grid[j], grid[j + 1]);
        let v = model.predict(
            &z,
            s,
            ModelCall {
                unconditional: false,
                step: j,
                record: Some(&mut store),
                inject: None,
            },
        )?;
        z = map_frames(&z, &v, |zs, v| schedule.ddim_invert_step(zs, v, s, t))?;
        check_finite(&z, "inversion")?;
    }
    Ok((z, store))
}

/// DDIM sampling from `z_T` with optional guidance and key/value injection.
pub fn ddim_sample(
    schedule: &NoiseSchedule,
    model: &mut dyn VPredictor,
    z_t: &[LatentGrid],
    steps: usize,
    guidance: GuidanceConfig,
    inject: Option<&AttentionStore>,
) -> Result<Vec<LatentGrid>> {
    let grid = step_grid(schedule.t_max(), steps)?;
    let mut z = z_t.to_vec();
    for j in 0..steps {
        let (t, t_prev) = (grid[j], grid[j + 1]);
        let call = |unconditional| ModelCall {
            unconditional,
            step: j,
            record: None,
            inject,
        };
        let v_cond = model.predict(&z, t, call(false))?;
        let v = if guidance.scale == 1.0 {
            v_cond
        } else {
            let v_uncond = model.predict(&z, t, call(true))?;
            map_frames(&v_cond, &v_uncond, |c, u| cfg_combine(c, u, guidance.scale))?
        };
        z = map_frames(&z, &v, |zt, v| schedule.ddim_step(zt, v, t, t_prev))?;
        check_finite(&z, "sampling")?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn grid(seed: u64) -> LatentGrid {
        LatentGrid::gaussian(4, 4, 4, &mut SeededRng::new(seed))
    }

    /// Returns the exact `v` of a fixed `(z0, ε)` pair; since `z_t` lies on
    /// that pair's trajectory, the sampler must recover `z0`.
    struct Oracle<'a> {
        schedule: &'a NoiseSchedule,
        z0: Vec<LatentGrid>,
        eps: Vec<LatentGrid>,
    }

    impl VPredictor for Oracle<'_> {
        fn predict(&mut self, _z: &[LatentGrid], t: usize, _c: ModelCall<'_>) -> Result<Vec<LatentGrid>> {
            self.z0
                .iter()
                .zip(&self.eps)
                .map(|(z0, e)| self.schedule.v_target(z0, e, t))
                .collect()
        }
    }

    #[test]
    fn schedule_endpoints() {
        let s = NoiseSchedule::default();
        let raw = NoiseSchedule::raw_alpha_bar(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bar()[1000], 0.0);
        assert_eq!(s.alpha_bar()[1], raw[1]);
        assert_eq!(s.alpha_bar()[0], 1.0);
        assert_eq!(s.snr(1000), 0.0);
        // Independent product in log space.
        let log: f64 = (1..=1000)
            .map(|t| (1.0 - (1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 999.0)).ln())
            .sum();
        let pre = (0.5 * log).exp();
        assert!((pre - 0.0064).abs() < 1e-4, "{pre}");
        assert!((raw[1000].sqrt() - pre).abs() < 1e-12);
        assert!(s.alpha_bar().windows(2).all(|w| w[1] < w[0]));
        for t in 0..=1000 {
            assert!((s.alpha(t).powi(2) + s.sigma(t).powi(2) - 1.0).abs() < 1e-6);
        }
        assert!(NoiseSchedule::build(1, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::build(10, 0.0, 0.02).is_err());
    }

    #[test]
    fn add_noise_cases() {
        let s = NoiseSchedule::default();
        let z0 = grid(1);
        let eps = grid(2);
        assert_eq!(s.add_noise(&z0, &eps, 0).unwrap(), z0);
        assert_eq!(s.add_noise(&z0, &eps, 1000).unwrap(), eps);
        assert!(s.add_noise(&z0, &eps, 1001).is_err());
        // ᾱ = 0.25 via a two-step hand-built schedule.
        let quarter = NoiseSchedule { t_max: 2, alpha_bar: vec![1.0, 0.25, 0.0] };
        let z = quarter
            .add_noise(&LatentGrid::zeros(2, 2, 4), &LatentGrid::filled(2, 2, 4, 1.0), 1)
            .unwrap();
        assert!(z.data.iter().all(|&v| (v - 0.75f64.sqrt()).abs() < 1e-12));
        assert!((z.data[0] - 0.8660).abs() < 1e-4);
    }

    #[test]
    fn v_endpoints_and_round_trip() {
        let s = NoiseSchedule::default();
        let (z0, eps) = (grid(3), grid(4));
        assert_eq!(s.v_target(&z0, &eps, 0).unwrap(), eps);
        assert_eq!(s.v_target(&z0, &eps, 1000).unwrap(), z0.map(|v| -v));
        for t in [0, 1, 37, 500, 999, 1000] {
            let zt = s.add_noise(&z0, &eps, t).unwrap();
            let v = s.v_target(&z0, &eps, t).unwrap();
            let (x, e) = s.recover_x0_eps(&zt, &v, t).unwrap();
            assert!(x.max_abs_diff(&z0).unwrap() < 1e-5);
            assert!(e.max_abs_diff(&eps).unwrap() < 1e-5);
        }
    }

    #[test]
    fn ddim_step_cases() {
        let s = NoiseSchedule::default();
        let (z0, eps) = (grid(5), grid(6));
        let zt = s.add_noise(&z0, &eps, 300).unwrap();
        let v = s.v_target(&z0, &eps, 300).unwrap();
        let (x0, _) = s.recover_x0_eps(&zt, &v, 300).unwrap();
        assert_eq!(s.ddim_step(&zt, &v, 300, 0).unwrap(), x0);
        let down = s.ddim_step(&zt, &v, 300, 250).unwrap();
        assert!(down.max_abs_diff(&s.add_noise(&z0, &eps, 250).unwrap()).unwrap() < 1e-12);
        assert!(s.ddim_step(&zt, &v, 250, 300).is_err());
        assert!(s.ddim_step(&zt, &v, 250, 250).is_err());
    }

    #[test]
    fn grid_shape() {
        let g = step_grid(1000, 20).unwrap();
        assert_eq!(g.len(), 21);
        assert_eq!(g[0], 1000);
        assert_eq!(g[1], 950);
        assert_eq!(*g.last().unwrap(), 0);
        assert_eq!(step_grid(1000, 1).unwrap(), vec![1000, 0]);
        assert!(step_grid(1000, 0).is_err());
    }

    #[test]
    fn oracle_sampler_recovers_z0() {
        let s = NoiseSchedule::default();
        for steps in [1, 3, 20, 50] {
            let z0 = vec![grid(7), grid(8)];
            let eps = vec![grid(9), grid(10)];
            let mut oracle = Oracle { schedule: &s, z0: z0.clone(), eps: eps.clone() };
            let out = ddim_sample(&s, &mut oracle, &eps, steps, GuidanceConfig::new(1.0).unwrap(), None)
                .unwrap();
            for (a, b) in out.iter().zip(&z0) {
                assert!(a.max_abs_diff(b).unwrap() < 1e-4);
            }
        }
    }

    #[test]
    fn single_step_inversion_by_hand() {
        let s = NoiseSchedule::default();
        struct Const(LatentGrid);
        impl VPredictor for Const {
            fn predict(&mut self, z: &[LatentGrid], t: usize, _c: ModelCall<'_>) -> Result<Vec<LatentGrid>> {
                assert_eq!(t, 0);
                Ok(vec![self.0.clone(); z.len()])
            }
        }
        let z0 = grid(11);
        let v = grid(12);
        let (zt, store) = ddim_invert(&s, &mut Const(v.clone()), &[z0.clone()], 1).unwrap();
        // At s = 0: x0̂ = z0, ε̂ = v, and z_T = ε̂ since ᾱ_T = 0.
        assert_eq!(zt[0], v);
        assert!(store.is_empty());
    }

    #[test]
    fn guidance_cases() {
        let a = grid(13);
        let b = grid(14);
        assert_eq!(cfg_combine(&a, &b, 1.0).unwrap(), a);
        assert!(cfg_combine(&a, &a, 7.5).unwrap().max_abs_diff(&a).unwrap() < 1e-12);
        let g = cfg_combine(&LatentGrid::filled(2, 2, 4, 1.0), &LatentGrid::zeros(2, 2, 4), 7.5).unwrap();
        assert!(g.data.iter().all(|&v| v == 7.5));
        assert!(GuidanceConfig::new(0.5).is_err());
    }

    #[test]
    fn store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut st = AttentionStore::default();
        for l in 0..2 {
            for j in 0..3 {
                st.insert(l, j, KvKind::K, Tensor::full(&[2, 3], (l * 10 + j) as f64));
                st.insert(l, j, KvKind::V, Tensor::full(&[2, 3], -((l * 10 + j) as f64)));
            }
        }
        assert_eq!(st.pairs(), 6);
        assert!(st.keys().any(|k| k == "layer1_step2_v"));
        st.save(dir.path()).unwrap();
        assert_eq!(AttentionStore::load(dir.path()).unwrap(), st);
    }

    proptest::proptest! {
        #[test]
        fn conversions_invert(seed in 0u64..500, t in 0usize..=1000) {
            let s = NoiseSchedule::default();
            let (z0, eps) = (grid(seed), grid(seed + 1000));
            let zt = s.add_noise(&z0, &eps, t).unwrap();
            let v = s.v_target(&z0, &eps, t).unwrap();
            let (x, e) = s.recover_x0_eps(&zt, &v, t).unwrap();
            proptest::prop_assert!(x.max_abs_diff(&z0).unwrap() < 1e-5);
            proptest::prop_assert!(e.max_abs_diff(&eps).unwrap() < 1e-5);
        }
    }
}
