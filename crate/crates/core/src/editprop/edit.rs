use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::media::{load_frame, Frame};

/// First-frame editor. Real image-to-image models are out of scope, so
/// these stand in for them.
#[derive(Debug, Clone, PartialEq)]
pub enum Editor {
    Identity,
    /// Hue rotation about the gray axis followed by a per-channel affine.
    ColorMap,
    /// An edited first frame produced elsewhere.
    File(PathBuf),
}

impl FromStr for Editor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Editor::Identity),
            "colormap" | "color-map" => Ok(Editor::ColorMap),
            _ => match s.strip_prefix("file:") {
                Some(p) if !p.is_empty() => Ok(Editor::File(PathBuf::from(p))),
                _ => Err(Error::Config(format!(
                    "unknown editor {s:?}; expected identity, colormap or file:<path>"
                ))),
            },
        }
    }
}

impl fmt::Display for Editor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Editor::Identity => f.write_str("identity"),
            Editor::ColorMap => f.write_str("colormap"),
            Editor::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

const COLORMAP_KEYS: [&str; 7] = ["hue", "gain_r", "gain_g", "gain_b", "bias_r", "bias_g", "bias_b"];
const DEFAULT_HUE: f64 = 120.0;

#[derive(Debug, Clone, PartialEq)]
pub struct EditSpec {
    pub editor: Editor,
    pub target_prompt: String,
    pub params: BTreeMap<String, f64>,
}

impl EditSpec {
    pub fn new(editor: Editor, target_prompt: impl Into<String>) -> Self {
        Self {
            editor,
            target_prompt: target_prompt.into(),
            params: BTreeMap::new(),
        }
    }

    pub fn identity(target_prompt: impl Into<String>) -> Self {
        Self::new(Editor::Identity, target_prompt)
    }

    pub fn with_param(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let allowed: &[&str] = match self.editor {
            Editor::ColorMap => &COLORMAP_KEYS,
            _ => &[],
        };
        for (k, v) in &self.params {
            if !allowed.contains(&k.as_str()) {
                return Err(Error::Config(format!("editor {} has no parameter {k:?}", self.editor)));
            }
            if !v.is_finite() {
                return Err(Error::Config(format!("editor parameter {k} is {v}")));
            }
        }
        Ok(())
    }

    fn param(&self, key: &str, default: f64) -> f64 {
        self.params.get(key).copied().unwrap_or(default)
    }

    /// Edits the first input frame.
    pub fn apply(&self, first: &Frame) -> Result<Frame> {
        self.validate()?;
        match &self.editor {
            Editor::Identity => Ok(first.clone()),
            Editor::ColorMap => Ok(self.color_map(first)),
            Editor::File(path) => {
                let edited = load_frame(path)?;
                if edited.dims() != first.dims() {
                    return Err(Error::Dimension(format!(
                        "edited frame {} is {:?}, input is {:?}",
                        path.display(),
                        edited.dims(),
                        first.dims()
                    )));
                }
                Ok(edited)
            }
        }
    }

    fn color_map(&self, frame: &Frame) -> Frame {
        let a = self.param("hue", DEFAULT_HUE).to_radians();
        let (c, s) = (a.cos(), a.sin());
        let k = (1.0 - c) / 3.0;
        let r = (1.0f64 / 3.0).sqrt() * s;
        let m = [[c + k, k - r, k + r], [k + r, c + k, k - r], [k - r, k + r, c + k]];
        let gain = [self.param("gain_r", 1.0), self.param("gain_g", 1.0), self.param("gain_b", 1.0)];
        let bias = [self.param("bias_r", 0.0), self.param("bias_g", 0.0), self.param("bias_b", 0.0)];
        let mut data = Vec::with_capacity(frame.data().len());
        for p in frame.data().chunks_exact(3) {
            for ch in 0..3 {
                let rot: f64 = (0..3).map(|j| m[ch][j] * p[j] as f64).sum();
                data.push((rot * gain[ch] + bias[ch]).clamp(0.0, 1.0) as f32);
            }
        }
        let (h, w) = frame.dims();
        Frame::new(h, w, data).expect("same dims")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame() -> Frame {
        Frame::from_fn(16, 24, |y, x, c| [y as f32 / 16.0, x as f32 / 24.0, 0.5][c]).unwrap()
    }

    #[test]
    fn parses_editors() {
        assert_eq!("identity".parse::<Editor>().unwrap(), Editor::Identity);
        assert_eq!("color-map".parse::<Editor>().unwrap(), Editor::ColorMap);
        assert_eq!("file:/a/b.ppm".parse::<Editor>().unwrap(), Editor::File("/a/b.ppm".into()));
        assert!("file:".parse::<Editor>().is_err());
        assert!("sharpen".parse::<Editor>().is_err());
    }

    #[test]
    fn identity_and_full_turn_leave_frame() {
        let f = frame();
        assert_eq!(EditSpec::identity("x").apply(&f).unwrap(), f);
        let spin = EditSpec::new(Editor::ColorMap, "x").with_param("hue", 360.0);
        let out = spin.apply(&f).unwrap();
        for (a, b) in out.data().iter().zip(f.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn hue_rotation_keeps_gray() {
        let g = Frame::filled(16, 16, 0.4).unwrap();
        let out = EditSpec::new(Editor::ColorMap, "x").apply(&g).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.4).abs() < 1e-6));
        // A third of a turn maps red to green.
        let red = Frame::from_fn(16, 16, |_, _, c| (c == 0) as u8 as f32).unwrap();
        let out = EditSpec::new(Editor::ColorMap, "x").apply(&red).unwrap();
        assert!((out.pixel(0, 0)[1] - 1.0).abs() < 1e-6, "{:?}", out.pixel(0, 0));
    }

    #[test]
    fn rejects_bad_params_and_mismatched_file() {
        let spec = EditSpec::identity("x").with_param("hue", 3.0);
        assert!(spec.apply(&frame()).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("edit.ppm");
        crate::media::save_frame(&Frame::filled(32, 32, 0.2).unwrap(), &p).unwrap();
        let spec = EditSpec::new(Editor::File(p), "x");
        assert!(matches!(spec.apply(&frame()), Err(Error::Dimension(_))));
    }
}
