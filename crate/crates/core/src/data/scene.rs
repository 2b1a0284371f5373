//! Procedural scenes of colored shapes on a black canvas.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RngState, Tensor};

use super::vocab;

/// Placement attempts per object before the scene is retried with one
/// object fewer.
pub const MAX_ATTEMPTS: usize = 100;

pub const CHANNELS: usize = 3;
pub const BACKGROUND: f32 = -1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn singular(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    pub fn plural(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circles",
            ShapeKind::Square => "squares",
            ShapeKind::Triangle => "triangles",
        }
    }

    pub fn from_word(word: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|s| s.singular() == word || s.plural() == word)
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    /// Whether pixel `(dx, dy)` of a `size`-wide bounding box is covered.
    pub fn covers(self, dx: usize, dy: usize, size: usize) -> bool {
        let s = size as f64;
        let (px, py) = (dx as f64 + 0.5, dy as f64 + 0.5);
        match self {
            ShapeKind::Square => true,
            ShapeKind::Circle => {
                let r = s / 2.0;
                (px - r).powi(2) + (py - r).powi(2) <= r * r
            }
            ShapeKind::Triangle => {
                // apex up; each row is a centered run that widens downwards
                let half = ((dy as f64 + 1.0) / s * s / 2.0).max(0.5);
                (px - s / 2.0).abs() <= half
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn from_word(word: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == word)
    }

    /// Pixel value in `[-1, 1]` per channel.
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, -1.0, -1.0],
            Color::Green => [-1.0, 1.0, -1.0],
            Color::Blue => [-1.0, -1.0, 1.0],
            Color::Yellow => [1.0, 1.0, -1.0],
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

/// Generation parameters for one dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub canvas: usize,
    pub min_count: usize,
    pub max_count: usize,
    pub min_size: usize,
    pub max_size: usize,
    /// Empty pixels required between any two bounding boxes.
    pub margin: usize,
    pub text_len: usize,
}

impl SceneSpec {
    /// Defaults for a square canvas: sizes scale with the canvas, never
    /// below 3 px.
    pub fn for_canvas(canvas: usize, text_len: usize) -> Self {
        let min_size = (canvas / 8).max(3);
        SceneSpec {
            canvas,
            min_count: 1,
            max_count: 5,
            min_size,
            max_size: (canvas / 5).max(min_size),
            margin: 1,
            text_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.min_count == 0 || self.min_count > self.max_count {
            return bad(format!(
                "count range [{}, {}] must be nonempty and start at 1 or more",
                self.min_count, self.max_count
            ));
        }
        if vocab::count_word(self.max_count).is_none() {
            return bad(format!("max_count {} has no caption word", self.max_count));
        }
        if self.min_size < 2 || self.min_size > self.max_size {
            return bad(format!(
                "size range [{}, {}] must satisfy 2 <= min <= max",
                self.min_size, self.max_size
            ));
        }
        if self.max_size > self.canvas {
            return bad(format!(
                "max_size {} exceeds canvas {}",
                self.max_size, self.canvas
            ));
        }
        if self.text_len < 3 {
            return bad(format!("text_len {} cannot hold a caption", self.text_len));
        }
        if self.canvas > u16::MAX as usize {
            return bad(format!("canvas {} too large", self.canvas));
        }
        Ok(())
    }

    pub fn pixels_per_image(&self) -> usize {
        CHANNELS * self.canvas * self.canvas
    }
}

/// One placed object: top-left corner and bounding-box side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: ShapeKind,
    pub color: Color,
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

impl SceneObject {
    fn clear_of(&self, other: &SceneObject, margin: usize) -> bool {
        self.x + self.size + margin <= other.x
            || other.x + other.size + margin <= self.x
            || self.y + self.size + margin <= other.y
            || other.y + other.size + margin <= self.y
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub objects: Vec<SceneObject>,
}

impl GroundTruth {
    pub fn count(&self) -> usize {
        self.objects.len()
    }

    pub fn count_of(&self, shape: ShapeKind, color: Color) -> usize {
        self.objects
            .iter()
            .filter(|o| o.shape == shape && o.color == color)
            .count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionedImage {
    /// `[3, S, S]` in `[-1, 1]`.
    pub pixels: Tensor<f32>,
    pub tokens: Vec<u32>,
    pub truth: GroundTruth,
}

impl CaptionedImage {
    pub fn caption(&self) -> Result<String> {
        vocab::detokenize(&self.tokens)
    }
}

/// Parses a grammar caption into `(count, color, shape)`.
pub fn parse_caption(caption: &str) -> Result<(usize, Color, ShapeKind)> {
    let words: Vec<&str> = caption.split_whitespace().collect();
    let err = || Error::Data(format!("caption {caption:?} does not follow <count> <color> <shape>"));
    let [c, col, sh] = words.as_slice() else {
        return Err(err());
    };
    let count = vocab::word_count(c).ok_or_else(err)?;
    let color = Color::from_word(col).ok_or_else(err)?;
    let shape = ShapeKind::from_word(sh).ok_or_else(err)?;
    let noun_ok = if count == 1 { *sh == shape.singular() } else { *sh == shape.plural() };
    if !noun_ok {
        return Err(err());
    }
    Ok((count, color, shape))
}

pub fn render(spec: &SceneSpec, objects: &[SceneObject]) -> Tensor<f32> {
    let s = spec.canvas;
    let mut px = Tensor::full(&[CHANNELS, s, s], BACKGROUND);
    let data = px.data_mut();
    for o in objects {
        let rgb = o.color.rgb();
        for dy in 0..o.size {
            for dx in 0..o.size {
                if o.shape.covers(dx, dy, o.size) {
                    let (x, y) = (o.x + dx, o.y + dy);
                    for (c, v) in rgb.iter().enumerate() {
                        data[(c * s + y) * s + x] = *v;
                    }
                }
            }
        }
    }
    px
}

/// Rejection-samples `count` non-overlapping boxes. Returns fewer when a
/// box cannot be placed within [`MAX_ATTEMPTS`].
fn place(
    spec: &SceneSpec,
    count: usize,
    shape: ShapeKind,
    color: Color,
    rng: &mut RngState,
) -> Option<Vec<SceneObject>> {
    let mut placed: Vec<SceneObject> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut ok = false;
        for _ in 0..MAX_ATTEMPTS {
            let size = rng.int_inclusive(spec.min_size, spec.max_size);
            let x = rng.int_inclusive(0, spec.canvas - size);
            let y = rng.int_inclusive(0, spec.canvas - size);
            let cand = SceneObject {
                shape,
                color,
                x,
                y,
                size,
            };
            if placed.iter().all(|o| o.clear_of(&cand, spec.margin)) {
                placed.push(cand);
                ok = true;
                break;
            }
        }
        if !ok {
            return None;
        }
    }
    Some(placed)
}

/// One record drawn from `rng`.
pub fn generate_one(spec: &SceneSpec, rng: &mut RngState) -> Result<CaptionedImage> {
    let mut count = rng.int_inclusive(spec.min_count, spec.max_count);
    let color = Color::ALL[rng.int_inclusive(0, Color::ALL.len() - 1)];
    let shape = ShapeKind::ALL[rng.int_inclusive(0, ShapeKind::ALL.len() - 1)];
    let objects = loop {
        if let Some(o) = place(spec, count, shape, color, rng) {
            break o;
        }
        if count == 1 {
            return Err(Error::Data(format!(
                "cannot place a single object on a {} px canvas",
                spec.canvas
            )));
        }
        log::warn!("scene with {count} objects unplaceable, retrying with {}", count - 1);
        count -= 1;
    };
    let caption = vocab::caption(objects.len(), color, shape)?;
    Ok(CaptionedImage {
        pixels: render(spec, &objects),
        tokens: vocab::tokenize(&caption, spec.text_len)?,
        truth: GroundTruth { objects },
    })
}

/// `n` records; record `i` draws from its own substream of `seed`, so the
/// result depends only on `(spec, n, seed)`.
pub fn generate_dataset(spec: &SceneSpec, n: usize, seed: u64) -> Result<Vec<CaptionedImage>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Argument("dataset size must be at least 1".into()));
    }
    let root = RngState::new(seed);
    (0..n)
        .map(|i| generate_one(spec, &mut root.derive(i as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SceneSpec {
        SceneSpec::for_canvas(32, 8)
    }

    #[test]
    fn deterministic_under_seed() {
        let a = generate_dataset(&spec(), 20, 5).unwrap();
        let b = generate_dataset(&spec(), 20, 5).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&spec(), 20, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn caption_matches_truth() {
        for rec in generate_dataset(&spec(), 200, 1).unwrap() {
            let (count, color, shape) = parse_caption(&rec.caption().unwrap()).unwrap();
            assert_eq!(rec.truth.count(), count);
            assert_eq!(rec.truth.count_of(shape, color), count);
        }
    }

    #[test]
    fn objects_are_disjoint_and_inside() {
        let s = spec();
        for rec in generate_dataset(&s, 200, 2).unwrap() {
            let objs = &rec.truth.objects;
            for (i, a) in objs.iter().enumerate() {
                assert!(a.x + a.size <= s.canvas && a.y + a.size <= s.canvas);
                for b in &objs[i + 1..] {
                    assert!(a.clear_of(b, 1));
                }
            }
            assert!(rec.pixels.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn smallest_shapes_cover_at_least_four_pixels() {
        for shape in ShapeKind::ALL {
            let covered = (0..3)
                .flat_map(|y| (0..3).map(move |x| (x, y)))
                .filter(|&(x, y)| shape.covers(x, y, 3))
                .count();
            assert!(covered >= 4, "{shape:?} covers {covered}");
        }
    }

    #[test]
    fn crowded_canvas_falls_back_to_fewer_objects() {
        let s = SceneSpec {
            canvas: 6,
            min_count: 5,
            max_count: 5,
            min_size: 3,
            max_size: 3,
            margin: 1,
            text_len: 3,
        };
        let rec = generate_one(&s, &mut RngState::new(0)).unwrap();
        assert!(rec.truth.count() < 5);
        let (count, _, _) = parse_caption(&rec.caption().unwrap()).unwrap();
        assert_eq!(count, rec.truth.count());
    }

    #[test]
    fn caption_grammar_is_strict() {
        assert!(parse_caption("one red circles").is_err());
        assert!(parse_caption("two red circle").is_err());
        assert_eq!(
            parse_caption("one red circle").unwrap(),
            (1, Color::Red, ShapeKind::Circle)
        );
    }
}
