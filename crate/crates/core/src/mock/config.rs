use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Piecewise-linear, non-decreasing curve on relative position `[0, 1]`.
/// Repeated x values encode a step; evaluation is right-continuous.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateCurve {
    pub points: Vec<(f64, f64)>,
}

impl RateCurve {
    pub fn constant(rate: f64) -> Self {
        Self {
            points: vec![(0.0, rate), (1.0, rate)],
        }
    }

    /// `low` before `at`, `high` from `at` on.
    pub fn step(at: f64, low: f64, high: f64) -> Self {
        Self {
            points: vec![(0.0, low), (at, low), (at, high), (1.0, high)],
        }
    }

    pub fn linear(start: f64, end: f64) -> Self {
        Self {
            points: vec![(0.0, start), (1.0, end)],
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.points.is_empty() {
            return Err("rate curve needs at least one point".into());
        }
        for &(x, y) in &self.points {
            if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                return Err(format!("rate curve point ({x}, {y}) outside [0,1]^2"));
            }
        }
        for w in self.points.windows(2) {
            if w[1].0 < w[0].0 {
                return Err("rate curve x values must be non-decreasing".into());
            }
            if w[1].1 < w[0].1 {
                return Err("rate curve must be non-decreasing".into());
            }
        }
        Ok(())
    }

    pub fn eval(&self, x: f64) -> f64 {
        let pts = &self.points;
        if x < pts[0].0 {
            return pts[0].1;
        }
        for w in pts.windows(2) {
            let ((x0, y0), (x1, y1)) = (w[0], w[1]);
            if x0 <= x && x < x1 {
                return y0 + (y1 - y0) * (x - x0) / (x1 - x0);
            }
        }
        pts[pts.len() - 1].1
    }
}

/// One simulated image: the objects truly present and the seed driving
/// every injection decision for it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub scene_id: String,
    pub true_objects: BTreeSet<String>,
    pub seed: u64,
}

impl SceneSpec {
    pub fn new<I, S>(scene_id: impl Into<String>, objects: I, seed: u64) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            scene_id: scene_id.into(),
            true_objects: objects.into_iter().map(Into::into).collect(),
            seed,
        }
    }
}

/// Generation knobs for the simulated model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockBehavior {
    /// Injection probability per object slot, by relative sentence position.
    pub hallucination_rate: RateCurve,
    pub grounded_signal_magnitude: f64,
    pub hidden_dim: usize,
    /// Sentence skeletons; the first word keys the template and `{obj}`
    /// marks an object slot.
    pub templates: Vec<String>,
    pub sentences_per_caption: usize,
    /// First-token weights for the first sentence.
    pub opening: Vec<(String, f64)>,
    /// First-token weights for sentences 1..sentences_per_caption.
    pub continuation: Vec<(String, f64)>,
    /// First-token weights once the planned sentences are done.
    pub closing: Vec<(String, f64)>,
    /// Probability of the template token inside a sentence.
    pub target_mass: f64,
    /// Exponent relating the with-image distribution `p` to the
    /// without-image one, `q ∝ p^(1/sharpening)`, at grounded targets.
    pub image_sharpening: f64,
    /// Seed for image-independent model parameters (base hidden vectors,
    /// signal directions, distractor tokens).
    pub model_seed: u64,
    /// Probability that a synthetic detector score lands on the wrong side.
    pub detector_noise: f64,
    pub objects: Vec<String>,
    pub fillers: Vec<String>,
}

fn weights(items: &[(&str, f64)]) -> Vec<(String, f64)> {
    items.iter().map(|&(w, p)| (w.to_string(), p)).collect()
}

pub const DEFAULT_TEMPLATES: &[&str] = &[
    "This image features a {obj} , with a {obj} in the background .",
    "In addition to the {obj} , there is a {obj} .",
    "The {obj} is placed near the {obj} .",
    "A {obj} can be seen on the left side .",
    "There is also a {obj} , next to a {obj} .",
    "Overall , the scene contains a {obj} .",
];

pub const DEFAULT_OBJECTS: &[&str] = &[
    "dog", "cat", "bench", "car", "bicycle", "truck", "bus", "train", "boat", "bird", "horse",
    "sheep", "cow", "bear", "zebra", "giraffe", "backpack", "handbag", "tie", "suitcase",
    "frisbee", "kite", "bottle", "cup", "fork", "knife", "spoon", "bowl", "banana", "sandwich",
    "pizza", "donut", "cake", "chair", "couch", "bed", "table", "toilet", "laptop", "mouse",
    "keyboard", "phone", "microwave", "toaster", "sink", "refrigerator", "book", "clock", "vase",
    "lamp", "window", "plant", "tree", "fence", "pillow", "curtain", "painting", "mirror",
    "basket", "man", "woman",
];

pub const DEFAULT_FILLERS: &[&str] = &[
    "small", "large", "red", "white", "black", "blue", "green", "brown", "wooden", "metal",
    "old", "new", "bright", "dark", "several", "two", "three", "some", "many", "nearby", "very",
    "on", "of", "with", "and", "its", "their", "is", "are", "sitting", "standing", "parked",
    "lying", "hanging", "resting", "open", "closed", "tall", "short", "round", "square",
    "colorful", "empty", "full", "clean", "busy", "quiet", "sunny", "cloudy", "indoor",
    "outdoor", "modern", "vintage", "large-scale", "cozy", "spacious", "narrow", "wide", "soft",
    "shiny",
];

impl Default for MockBehavior {
    fn default() -> Self {
        Self {
            hallucination_rate: RateCurve::linear(0.1, 0.5),
            grounded_signal_magnitude: 4.0,
            hidden_dim: 64,
            templates: DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect(),
            sentences_per_caption: 6,
            opening: weights(&[("This", 0.6), ("The", 0.25), ("A", 0.15)]),
            continuation: weights(&[
                ("In", 0.4),
                ("There", 0.25),
                ("The", 0.2),
                ("A", 0.1),
                ("Overall", 0.05),
            ]),
            closing: weights(&[("<eos>", 0.9), ("Overall", 0.06), ("The", 0.04)]),
            target_mass: 0.8,
            image_sharpening: 2.0,
            model_seed: 0x5eed,
            detector_noise: 0.0,
            objects: DEFAULT_OBJECTS.iter().map(|s| s.to_string()).collect(),
            fillers: DEFAULT_FILLERS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// How to generate a batch of random scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneGenerator {
    pub count: usize,
    pub seed: u64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub id_prefix: String,
}

impl Default for SceneGenerator {
    fn default() -> Self {
        Self {
            count: 0,
            seed: 1,
            min_objects: 3,
            max_objects: 6,
            id_prefix: "scene".into(),
        }
    }
}

/// File form of a mock backend: behavior plus explicit and/or generated
/// scenes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockConfig {
    pub behavior: MockBehavior,
    pub scenes: Vec<SceneSpec>,
    pub generate: Option<SceneGenerator>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_curve_is_right_continuous() {
        let c = RateCurve::step(0.5, 0.0, 1.0);
        assert!(c.validate().is_ok());
        assert_eq!(c.eval(0.49), 0.0);
        assert_eq!(c.eval(0.5), 1.0);
        assert_eq!(c.eval(1.0), 1.0);
        assert_eq!(c.eval(7.0), 1.0);
    }

    #[test]
    fn linear_curve_interpolates() {
        let c = RateCurve::linear(0.1, 0.5);
        assert!((c.eval(0.5) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn decreasing_curve_rejected() {
        assert!(RateCurve::linear(0.5, 0.1).validate().is_err());
        assert!(RateCurve::constant(1.5).validate().is_err());
    }
}
