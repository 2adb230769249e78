//! Conditional contrastive action-alignment reward.
//!
//! Continuous speed and control signals are discretized into a 4-bin speed
//! context, 6 longitudinal and 5 lateral semantic actions. Every
//! (command, speed bin, longitudinal, lateral) tuple gets a caption, giving a
//! 720-entry prompt library. At each step only the 30 captions of the current
//! context are scored against the image embedding, the executed action's
//! probability is compared with the best non-neighbor, and the resulting margin
//! is standardized by a running mean/std filter into a bounded bonus.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action2D, Command, SpeedBin};

pub const NUM_CONTEXTS: usize = 24;
pub const NUM_ACTIONS: usize = 30;
pub const LIBRARY_SIZE: usize = NUM_CONTEXTS * NUM_ACTIONS;

#[derive(Debug, Error, PartialEq)]
pub enum ShapingError {
    #[error("speed must be non-negative, got {0}")]
    NegativeSpeed(f64),
    #[error("{name} must lie in [{lo}, {hi}], got {value}")]
    OutOfRange { name: &'static str, value: f64, lo: f64, hi: f64 },
    #[error("neighbor set of {0:?} covers every anchor; no negatives left")]
    NoNegatives(SemanticAction),
    #[error("probability vector has {0} entries, expected 30")]
    BadProbabilities(usize),
    #[error("embedding dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("text embedder failed: {0}")]
    Embedder(String),
    #[error("neighbor sets must be reflexive and symmetric")]
    InvalidNeighbors,
    #[error("invalid shaping config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Longitudinal {
    BrakingHard,
    Braking,
    AcceleratingFast,
    Accelerating,
    AcceleratingGently,
    Idling,
}

impl Longitudinal {
    pub const ALL: [Longitudinal; 6] = [
        Self::BrakingHard,
        Self::Braking,
        Self::AcceleratingFast,
        Self::Accelerating,
        Self::AcceleratingGently,
        Self::Idling,
    ];

    pub fn phrase(self) -> &'static str {
        match self {
            Self::BrakingHard => "braking hard",
            Self::Braking => "braking",
            Self::AcceleratingFast => "accelerating fast",
            Self::Accelerating => "accelerating",
            Self::AcceleratingGently => "accelerating gently",
            Self::Idling => "idling",
        }
    }

    /// Intensity family: variants of the same maneuver share a family.
    pub fn family(self) -> u8 {
        match self {
            Self::BrakingHard | Self::Braking => 0,
            Self::AcceleratingFast | Self::Accelerating | Self::AcceleratingGently => 1,
            Self::Idling => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Lateral {
    GoingStraight,
    TurningRightSharply,
    TurningRight,
    TurningLeftSharply,
    TurningLeft,
}

impl Lateral {
    pub const ALL: [Lateral; 5] = [
        Self::GoingStraight,
        Self::TurningRightSharply,
        Self::TurningRight,
        Self::TurningLeftSharply,
        Self::TurningLeft,
    ];

    pub fn phrase(self) -> &'static str {
        match self {
            Self::GoingStraight => "going straight",
            Self::TurningRightSharply => "turning right sharply",
            Self::TurningRight => "turning right",
            Self::TurningLeftSharply => "turning left sharply",
            Self::TurningLeft => "turning left",
        }
    }

    pub fn family(self) -> u8 {
        match self {
            Self::GoingStraight => 0,
            Self::TurningRightSharply | Self::TurningRight => 1,
            Self::TurningLeftSharply | Self::TurningLeft => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SemanticAction {
    pub longitudinal: Longitudinal,
    pub lateral: Lateral,
}

impl SemanticAction {
    pub fn new(longitudinal: Longitudinal, lateral: Lateral) -> Self {
        Self { longitudinal, lateral }
    }

    /// Anchor index within a context slice, in `0..30`.
    pub fn index(self) -> usize {
        self.longitudinal as usize * Lateral::ALL.len() + self.lateral as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::new(Longitudinal::ALL[i / 5], Lateral::ALL[i % 5])
    }

    pub fn all() -> impl Iterator<Item = SemanticAction> {
        (0..NUM_ACTIONS).map(Self::from_index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Context {
    pub command: Command,
    pub speed_bin: SpeedBin,
}

impl Context {
    pub fn new(command: Command, speed_bin: SpeedBin) -> Self {
        Self { command, speed_bin }
    }

    pub fn index(self) -> usize {
        self.command as usize * SpeedBin::ALL.len() + self.speed_bin as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::new(Command::ALL[i / 4], SpeedBin::ALL[i % 4])
    }

    pub fn all() -> impl Iterator<Item = Context> {
        (0..NUM_CONTEXTS).map(Self::from_index)
    }
}

pub fn discretize_speed(v: f64) -> Result<SpeedBin, ShapingError> {
    if !(v >= 0.0) {
        return Err(ShapingError::NegativeSpeed(v));
    }
    Ok(if v < 0.1 {
        SpeedBin::Stopped
    } else if v < 2.0 {
        SpeedBin::Slow
    } else if v < 4.5 {
        SpeedBin::Moderate
    } else {
        SpeedBin::High
    })
}

fn check_range(name: &'static str, value: f64, lo: f64, hi: f64) -> Result<(), ShapingError> {
    if (lo..=hi).contains(&value) {
        Ok(())
    } else {
        Err(ShapingError::OutOfRange { name, value, lo, hi })
    }
}

/// Brake rows are checked before throttle rows.
pub fn discretize_longitudinal(throttle: f64, brake: f64) -> Result<Longitudinal, ShapingError> {
    check_range("throttle", throttle, 0.0, 1.0)?;
    check_range("brake", brake, 0.0, 1.0)?;
    Ok(if brake > 0.5 {
        Longitudinal::BrakingHard
    } else if brake > 0.05 {
        Longitudinal::Braking
    } else if throttle > 0.8 {
        Longitudinal::AcceleratingFast
    } else if throttle > 0.3 {
        Longitudinal::Accelerating
    } else if throttle > 0.05 {
        Longitudinal::AcceleratingGently
    } else {
        Longitudinal::Idling
    })
}

/// Positive steer is to the right. The left side mirrors the right side.
pub fn discretize_lateral(steer: f64) -> Result<Lateral, ShapingError> {
    check_range("steer", steer, -1.0, 1.0)?;
    Ok(if steer > -0.05 && steer < 0.05 {
        Lateral::GoingStraight
    } else if steer > 0.3 {
        Lateral::TurningRightSharply
    } else if steer >= 0.05 {
        Lateral::TurningRight
    } else if steer < -0.3 {
        Lateral::TurningLeftSharply
    } else {
        Lateral::TurningLeft
    })
}

/// Semantic label of a signed 2D action: throttle = max(x, 0), brake = max(-x, 0).
pub fn executed_action(a: Action2D) -> SemanticAction {
    let a = a.clamped();
    let lon = discretize_longitudinal(a.longitudinal.max(0.0), (-a.longitudinal).max(0.0))
        .expect("clamped action is in range");
    let lat = discretize_lateral(a.steer).expect("clamped action is in range");
    SemanticAction::new(lon, lat)
}

pub fn speed_phrase(b: SpeedBin) -> &'static str {
    match b {
        SpeedBin::Stopped => "The car is currently stopped",
        SpeedBin::Slow => "The car is moving slowly",
        SpeedBin::Moderate => "The car is driving at a moderate speed",
        SpeedBin::High => "The car is driving at a high speed",
    }
}

pub fn command_phrase(c: Command) -> &'static str {
    match c {
        Command::TurnLeft => "turn left at the intersection",
        Command::TurnRight => "turn right at the intersection",
        Command::GoStraight => "go straight at the intersection",
        Command::FollowLane => "follow the current lane",
        Command::ChangeLeft => "change to the left lane",
        Command::ChangeRight => "change to the right lane",
    }
}

/// Caption template shared by every library entry.
pub const PROMPT_TEMPLATE: &str = "{speed}; the navigation command is to {command}; the car is {longitudinal} and {lateral}.";

pub fn prompt_text(ctx: Context, action: SemanticAction) -> String {
    format!(
        "{}; the navigation command is to {}; the car is {} and {}.",
        speed_phrase(ctx.speed_bin),
        command_phrase(ctx.command),
        action.longitudinal.phrase(),
        action.lateral.phrase()
    )
}

/// Source of text embeddings for the prompt library.
pub trait TextEmbedder {
    fn embed_text(&self, prompt: &str) -> Result<Vec<f64>, ShapingError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEntry {
    pub context: Context,
    pub action: SemanticAction,
    pub text: String,
    pub embedding: Vec<f64>,
}

/// All 720 context-conditioned captions with cached embeddings, stored so the
/// 30 anchors of a context form a contiguous slice.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptLibrary {
    entries: Vec<PromptEntry>,
    dim: usize,
}

impl PromptLibrary {
    pub fn build(embedder: &dyn TextEmbedder) -> Result<Self, ShapingError> {
        let mut entries = Vec::with_capacity(LIBRARY_SIZE);
        let mut dim = None;
        for ctx in Context::all() {
            for action in SemanticAction::all() {
                let text = prompt_text(ctx, action);
                let embedding = embedder.embed_text(&text)?;
                match dim {
                    None => dim = Some(embedding.len()),
                    Some(d) if d != embedding.len() => {
                        return Err(ShapingError::DimensionMismatch(d, embedding.len()))
                    }
                    _ => {}
                }
                entries.push(PromptEntry { context: ctx, action, text, embedding });
            }
        }
        Ok(Self { entries, dim: dim.unwrap_or(0) })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[PromptEntry] {
        &self.entries
    }

    /// The 30 anchors of one context, ordered by [`SemanticAction::index`].
    pub fn slice(&self, ctx: Context) -> &[PromptEntry] {
        let i = ctx.index() * NUM_ACTIONS;
        &self.entries[i..i + NUM_ACTIONS]
    }

    pub fn entry(&self, ctx: Context, action: SemanticAction) -> &PromptEntry {
        &self.slice(ctx)[action.index()]
    }

    /// Text dump: one `context-index action-index caption` line per entry.
    pub fn dump(&self) -> String {
        let mut out = format!("# template: {PROMPT_TEMPLATE}\n");
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}\n", e.context.index(), e.action.index(), e.text));
        }
        out
    }
}

/// For every action, the set of semantically similar actions (itself
/// included) excluded from the negative pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborSets {
    masks: [u32; NUM_ACTIONS],
}

impl NeighborSets {
    /// Intensity variants of the same maneuver are neighbors: actions sharing
    /// the lateral label with a longitudinal label from the same family, and
    /// actions sharing the longitudinal label with a lateral label from the same
    /// family.
    pub fn intensity_variants() -> Self {
        let mut masks = [0u32; NUM_ACTIONS];
        for a in SemanticAction::all() {
            for b in SemanticAction::all() {
                let lon_variant = a.lateral == b.lateral && a.longitudinal.family() == b.longitudinal.family();
                let lat_variant = a.longitudinal == b.longitudinal && a.lateral.family() == b.lateral.family();
                if lon_variant || lat_variant {
                    masks[a.index()] |= 1 << b.index();
                }
            }
        }
        Self { masks }
    }

    /// Builds sets from explicit membership masks; reflexivity and symmetry are
    /// enforced.
    pub fn from_masks(masks: [u32; NUM_ACTIONS]) -> Result<Self, ShapingError> {
        let all = (1u32 << NUM_ACTIONS) - 1;
        for i in 0..NUM_ACTIONS {
            if masks[i] & !all != 0 || masks[i] & (1 << i) == 0 {
                return Err(ShapingError::InvalidNeighbors);
            }
            for j in 0..NUM_ACTIONS {
                if (masks[i] >> j) & 1 != (masks[j] >> i) & 1 {
                    return Err(ShapingError::InvalidNeighbors);
                }
            }
        }
        Ok(Self { masks })
    }

    pub fn contains(&self, a: SemanticAction, b: SemanticAction) -> bool {
        self.masks[a.index()] & (1 << b.index()) != 0
    }

    pub fn mask(&self, a: SemanticAction) -> u32 {
        self.masks[a.index()]
    }

    pub fn neighbors(&self, a: SemanticAction) -> Vec<SemanticAction> {
        SemanticAction::all().filter(|b| self.contains(a, *b)).collect()
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Temperature softmax over cosine similarities between the image embedding
/// and the 30 anchors of `ctx`.
pub fn score(
    library: &PromptLibrary,
    image_embedding: &[f64],
    ctx: Context,
    temperature: f64,
) -> Result<[f64; NUM_ACTIONS], ShapingError> {
    if image_embedding.len() != library.dim() {
        return Err(ShapingError::DimensionMismatch(library.dim(), image_embedding.len()));
    }
    let mut logits = [0.0; NUM_ACTIONS];
    for (l, e) in logits.iter_mut().zip(library.slice(ctx)) {
        *l = temperature * cosine(image_embedding, &e.embedding);
    }
    Ok(softmax(&logits))
}

pub(crate) fn softmax(logits: &[f64; NUM_ACTIONS]) -> [f64; NUM_ACTIONS] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = [0.0; NUM_ACTIONS];
    let mut sum = 0.0;
    for (o, l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in &mut out {
        *o /= sum;
    }
    out
}

/// Probability of the executed action minus the best non-neighbor
/// probability, floored at zero.
pub fn margin(probs: &[f64], executed: SemanticAction, neighbors: &NeighborSets) -> Result<f64, ShapingError> {
    if probs.len() != NUM_ACTIONS {
        return Err(ShapingError::BadProbabilities(probs.len()));
    }
    let mask = neighbors.mask(executed);
    let best_negative = probs
        .iter()
        .enumerate()
        .filter(|(i, _)| mask & (1 << i) == 0)
        .map(|(_, p)| *p)
        .fold(None, |acc: Option<f64>, p| Some(acc.map_or(p, |a| a.max(p))))
        .ok_or(ShapingError::NoNegatives(executed))?;
    Ok((probs[executed.index()] - best_negative).max(0.0))
}

/// Streaming mean and (population) standard deviation with a floor on the
/// standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmsFilter {
    count: u64,
    mean: f64,
    m2: f64,
    eps: f64,
}

impl RmsFilter {
    pub fn new(eps: f64) -> Self {
        assert!(eps > 0.0, "RMS floor must be positive");
        Self { count: 0, mean: 0.0, m2: 0.0, eps }
    }

    pub fn update(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).max(0.0)
        }
    }

    pub fn std(&self) -> f64 {
        self.variance().sqrt().max(self.eps)
    }

    pub fn normalize(&self, x: f64) -> f64 {
        ((x - self.mean) / self.std()).clamp(-1.0, 1.0)
    }
}

/// Updates the filter with `r_raw`, then standardizes the same value.
/// Returns `(r_vlm, r_final)`.
pub fn normalize_and_shape(r_raw: f64, r_env: f64, filter: &mut RmsFilter, weight: f64) -> (f64, f64) {
    filter.update(r_raw);
    let r_vlm = filter.normalize(r_raw);
    (r_vlm, r_env + weight * r_vlm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapingConfig {
    pub enabled: bool,
    /// Logit scale applied to cosine similarities.
    pub temperature: f64,
    /// Weight of the normalized bonus in the final reward.
    pub weight: f64,
    /// Noise of the mock image embedder.
    pub image_noise: f64,
    pub rms_eps: f64,
}

impl Default for ShapingConfig {
    fn default() -> Self {
        Self { enabled: false, temperature: 100.0, weight: 0.1, image_noise: 0.2, rms_eps: 1e-4 }
    }
}

impl ShapingConfig {
    pub fn validate(&self) -> Result<(), ShapingError> {
        if !(self.temperature > 0.0) {
            return Err(ShapingError::InvalidConfig("temperature must be positive".into()));
        }
        if !(self.weight >= 0.0) {
            return Err(ShapingError::InvalidConfig("weight must be non-negative".into()));
        }
        if !(self.rms_eps > 0.0) {
            return Err(ShapingError::InvalidConfig("rms_eps must be positive".into()));
        }
        if !(self.image_noise >= 0.0) {
            return Err(ShapingError::InvalidConfig("image_noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-transition shaping result stored alongside the transition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapingRecord {
    pub r_raw: f64,
    pub r_vlm: f64,
    pub bonus: f64,
}
