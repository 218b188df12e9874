//! Day setup: ground-truth draw and the stimulus sent to the client.
//!
//! The server never renders anything. For the counting task it sends an
//! explicit list of shapes; the client draws them, flashes the field, and
//! asks for a count range. The truth is the number of shapes of the target
//! kind and is never sent as a field of its own.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use tandem_core::protocol::LabelSpace;
use tandem_core::AgentRng;

use crate::config::TaskSpec;

pub const FIELD_WIDTH: u32 = 640;
pub const FIELD_HEIGHT: u32 = 480;
/// Exposure of the first and later looks, in milliseconds.
pub const EXPOSURES_MS: [u32; 2] = [1000, 500];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: String,
    pub x: f64,
    pub y: f64,
    pub size: f64,
    /// Hue in degrees.
    pub hue: f64,
    /// Rotation in radians.
    pub rotation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stimulus {
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub target_shape: String,
    pub exposures_ms: Vec<u32>,
    pub shapes: Vec<Shape>,
}

/// Index of the day's true label.
pub fn draw_truth(space: &LabelSpace, rng: &mut AgentRng) -> usize {
    rng.random_range(0..space.len())
}

/// Builds the stimulus for a day whose true label is `truth`, or `None` for
/// tasks without one.
pub fn stimulus(
    task: &TaskSpec,
    space: &LabelSpace,
    truth: usize,
    seed: u64,
    rng: &mut AgentRng,
) -> Option<Stimulus> {
    let TaskSpec::Counting {
        max_count, shapes, ..
    } = task
    else {
        return None;
    };
    let count: usize = space.label(truth)?.parse().ok()?;
    let mut kinds: Vec<&String> = shapes.choose_multiple(rng, 2).collect();
    kinds.shuffle(rng);
    let (target, distractor) = (kinds[0].clone(), kinds[1].clone());
    let distractors = rng.random_range(0..=(*max_count as usize / 2).max(1));

    // Size shrinks as the field fills so shapes stay mostly separate.
    let total = (count + distractors).max(1) as f64;
    let area = f64::from(FIELD_WIDTH * FIELD_HEIGHT);
    let size = (0.35 * (area / total).sqrt()).clamp(6.0, 28.0);
    let mut make = |kind: &String| Shape {
        kind: kind.clone(),
        x: rng.random_range(size..f64::from(FIELD_WIDTH) - size),
        y: rng.random_range(size..f64::from(FIELD_HEIGHT) - size),
        size: size * rng.random_range(0.8..1.2),
        hue: rng.random_range(0.0..360.0),
        rotation: rng.random_range(0.0..std::f64::consts::TAU),
    };
    let mut field: Vec<Shape> = Vec::with_capacity(count + distractors);
    for i in 0..count + distractors {
        field.push(make(if i < count { &target } else { &distractor }));
    }
    field.shuffle(rng);
    Some(Stimulus {
        seed,
        width: FIELD_WIDTH,
        height: FIELD_HEIGHT,
        target_shape: target,
        exposures_ms: EXPOSURES_MS.to_vec(),
        shapes: field,
    })
}

/// Whether the labels at `indices` are consecutive positions in the space.
/// Integer label spaces are ordered, so this is "contiguous counts".
pub fn is_contiguous(indices: &[usize]) -> bool {
    indices.windows(2).all(|w| w[1] == w[0] + 1)
}
