//! The synthetic 2-D world: squares with digit textures, circles, borders and
//! walls; elastic dynamics, rendering, labeling and perturbations.
//!
//! Label ids: 0 background, 1 border or wall, 2 static square, 3 circle,
//! `4 + d` dynamic square carrying digit `d`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::SceneError;
use crate::mnist::{GlyphBank, GlyphSplit, DEFAULT_MASK_THRESHOLD};

pub const N_CLASSES: usize = 14;
pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_WALL: u8 = 1;
pub const CLASS_STATIC: u8 = 2;
pub const CLASS_CIRCLE: u8 = 3;
pub const CLASS_DIGIT0: u8 = 4;

/// Rejection-sampling attempts per object before giving up.
pub const PLACEMENT_ATTEMPTS: usize = 1000;
/// Whole-scene redraws before a placement failure is reported.
pub const SCENE_REDRAWS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub image_size: usize,
    /// Intensity channels per frame. Only 1 is implemented.
    pub channels: usize,
    pub sequence_length: usize,
    pub n_dynamic_squares: [usize; 2],
    pub n_static_squares: [usize; 2],
    pub n_circles: [usize; 2],
    pub square_size: [usize; 2],
    pub circle_radius: [f64; 2],
    pub border_thickness: usize,
    pub n_walls: [usize; 2],
    pub wall_thickness: [usize; 2],
    pub wall_length: [usize; 2],
    /// Per-axis speed magnitude; the sign is drawn separately.
    pub speed_range: [f64; 2],
    pub noise_sigma_range: [f64; 2],
    pub offset_amplitude_range: [f64; 2],
    pub offset_decay_range: [f64; 2],
    pub region_min_size: usize,
    /// Minimum gray-level distance between touching colors (object vs
    /// background, digit vs its square).
    pub min_contrast: f64,
    pub mask_threshold: f32,
    /// When false the frames equal their clean twins.
    pub perturb: bool,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: 1,
            sequence_length: 5,
            n_dynamic_squares: [2, 4],
            n_static_squares: [1, 3],
            n_circles: [1, 3],
            square_size: [10, 16],
            circle_radius: [4.0, 8.0],
            border_thickness: 2,
            n_walls: [0, 2],
            wall_thickness: [2, 4],
            wall_length: [10, 24],
            speed_range: [0.5, 3.0],
            noise_sigma_range: [0.02, 0.10],
            offset_amplitude_range: [-0.5, 0.5],
            offset_decay_range: [0.5, 0.9],
            region_min_size: 8,
            min_contrast: 0.25,
            mask_threshold: DEFAULT_MASK_THRESHOLD,
            perturb: true,
            seed: 0,
        }
    }
}

fn check_range<T: PartialOrd + std::fmt::Debug>(name: &str, r: &[T; 2]) -> Result<(), SceneError> {
    if r[0] > r[1] {
        return Err(SceneError::InvalidConfig(format!("{name}: empty range {r:?}")));
    }
    Ok(())
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::InvalidConfig(m));
        if self.image_size < 32 {
            return bad(format!("image_size {} < 32", self.image_size));
        }
        if self.channels != 1 {
            return bad(format!("only single-channel scenes are supported, got {}", self.channels));
        }
        if self.sequence_length < 2 {
            return bad(format!("sequence_length {} < 2", self.sequence_length));
        }
        check_range("n_dynamic_squares", &self.n_dynamic_squares)?;
        check_range("n_static_squares", &self.n_static_squares)?;
        check_range("n_circles", &self.n_circles)?;
        check_range("square_size", &self.square_size)?;
        check_range("circle_radius", &self.circle_radius)?;
        check_range("n_walls", &self.n_walls)?;
        check_range("wall_thickness", &self.wall_thickness)?;
        check_range("wall_length", &self.wall_length)?;
        check_range("speed_range", &self.speed_range)?;
        check_range("noise_sigma_range", &self.noise_sigma_range)?;
        check_range("offset_amplitude_range", &self.offset_amplitude_range)?;
        check_range("offset_decay_range", &self.offset_decay_range)?;
        let interior = self.image_size.saturating_sub(2 * self.border_thickness);
        if self.square_size[0] < 3 || self.square_size[1] > interior {
            return bad(format!("square_size {:?} must lie in [3, {interior}]", self.square_size));
        }
        if self.circle_radius[0] <= 0.0 || 2.0 * self.circle_radius[1] > self.image_size as f64 {
            return bad(format!("circle_radius {:?} out of bounds", self.circle_radius));
        }
        if self.wall_thickness[0] == 0 || self.wall_length[1] > interior || self.wall_thickness[1] > interior {
            return bad("wall dimensions must be positive and fit inside the border".into());
        }
        if self.speed_range[0] <= 0.0 || !self.speed_range[1].is_finite() {
            return bad(format!("speed_range {:?} must be positive and finite", self.speed_range));
        }
        if self.noise_sigma_range[0] < 0.0 {
            return bad("noise sigma must be non-negative".into());
        }
        if self.offset_decay_range[0] < 0.0 || self.offset_decay_range[1] > 1.0 {
            return bad(format!("offset_decay_range {:?} must lie in [0, 1]", self.offset_decay_range));
        }
        if self.region_min_size == 0 || self.region_min_size > self.image_size {
            return bad(format!("region_min_size {} out of bounds", self.region_min_size));
        }
        if !(0.0..=0.5).contains(&self.min_contrast) {
            return bad(format!("min_contrast {} must lie in [0, 0.5]", self.min_contrast));
        }
        Ok(())
    }

    /// The same scenes without any perturbation.
    pub fn clean(&self) -> Self {
        Self {
            perturb: false,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    DynamicSquare,
    StaticSquare,
    Circle,
}

/// Digit drawn inside a square: a binary stroke mask of side `size - 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    pub digit: u8,
    pub color: f32,
    pub side: usize,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub kind: ObjectKind,
    /// Center, pixels.
    pub position: [f64; 2],
    /// Pixels per frame.
    pub velocity: [f64; 2],
    /// Side of a square or radius of a circle.
    pub size: f64,
    pub body_color: f32,
    pub texture: Option<Texture>,
}

impl SceneObject {
    fn half(&self) -> f64 {
        match self.kind {
            ObjectKind::Circle => self.size,
            _ => self.size / 2.0,
        }
    }

    fn bounds(&self) -> Rect {
        let h = self.half();
        Rect {
            x0: self.position[0] - h,
            y0: self.position[1] - h,
            x1: self.position[0] + h,
            y1: self.position[1] + h,
        }
    }

    pub fn class(&self) -> u8 {
        match self.kind {
            ObjectKind::StaticSquare => CLASS_STATIC,
            ObjectKind::Circle => CLASS_CIRCLE,
            ObjectKind::DynamicSquare => CLASS_DIGIT0 + self.texture.as_ref().map_or(0, |t| t.digit),
        }
    }
}

/// Axis-aligned rectangle `[x0, x1) x [y0, y1)` in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    /// Overlap depth along x and y, or `None` if the interiors are disjoint.
    fn penetration(&self, o: &Rect) -> Option<(f64, f64)> {
        let px = self.x1.min(o.x1) - self.x0.max(o.x0);
        let py = self.y1.min(o.y1) - self.y0.max(o.y0);
        (px > 0.0 && py > 0.0).then_some((px, py))
    }

    fn covers(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneState {
    pub size: usize,
    pub border: usize,
    pub background: f32,
    pub wall_color: f32,
    /// Interior walls; the border frame is implicit.
    pub walls: Vec<Rect>,
    pub objects: Vec<SceneObject>,
}

impl SceneState {
    pub fn empty(size: usize) -> Self {
        Self {
            size,
            border: 0,
            background: 0.0,
            wall_color: 1.0,
            walls: Vec::new(),
            objects: Vec::new(),
        }
    }

    /// Sum of squared speeds of the dynamic squares (equal masses).
    pub fn kinetic_energy(&self) -> f64 {
        self.objects
            .iter()
            .filter(|o| o.kind == ObjectKind::DynamicSquare)
            .map(|o| o.velocity[0] * o.velocity[0] + o.velocity[1] * o.velocity[1])
            .sum()
    }

    fn interior(&self) -> Rect {
        let b = self.border as f64;
        let s = self.size as f64;
        Rect {
            x0: b,
            y0: b,
            x1: s - b,
            y1: s - b,
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..=r[1])
    }
}

fn uniform_int<R: Rng + ?Sized>(rng: &mut R, r: [usize; 2]) -> usize {
    rng.gen_range(r[0]..=r[1])
}

/// Gray level at least `contrast` away from every value in `avoid`.
fn contrasting<R: Rng + ?Sized>(rng: &mut R, avoid: &[f32], contrast: f64) -> f32 {
    for _ in 0..PLACEMENT_ATTEMPTS {
        let c: f32 = rng.gen();
        if avoid.iter().all(|&a| ((c - a).abs() as f64) >= contrast) {
            return c;
        }
    }
    // contrast <= 0.5 with at most two values to avoid always leaves room;
    // fall back to the farthest extreme
    let far = |c: f32| avoid.iter().map(|&a| (c - a).abs()).fold(f32::MAX, f32::min);
    if far(0.0) >= far(1.0) {
        0.0
    } else {
        1.0
    }
}

fn signed_speed<R: Rng + ?Sized>(rng: &mut R, range: [f64; 2]) -> f64 {
    let v = uniform(rng, range);
    if rng.gen::<bool>() {
        v
    } else {
        -v
    }
}

/// Draws a scene: walls, non-overlapping squares, then free circles.
///
/// A draw whose squares jam (no free spot within [`PLACEMENT_ATTEMPTS`]) is
/// discarded and the whole scene redrawn, up to [`SCENE_REDRAWS`] times.
pub fn sample_scene<R: Rng + ?Sized>(
    cfg: &SceneConfig,
    glyphs: &GlyphBank,
    split: GlyphSplit,
    rng: &mut R,
) -> Result<SceneState, SceneError> {
    cfg.validate()?;
    let mut last = None;
    for _ in 0..SCENE_REDRAWS {
        match draw_scene(cfg, glyphs, split, rng) {
            Err(e @ SceneError::PlacementFailure { .. }) => last = Some(e),
            other => return other,
        }
    }
    Err(last.expect("at least one draw"))
}

fn draw_scene<R: Rng + ?Sized>(
    cfg: &SceneConfig,
    glyphs: &GlyphBank,
    split: GlyphSplit,
    rng: &mut R,
) -> Result<SceneState, SceneError> {
    let size = cfg.image_size;
    let background: f32 = rng.gen();
    let wall_color = contrasting(rng, &[background], cfg.min_contrast);
    let mut state = SceneState {
        size,
        border: cfg.border_thickness,
        background,
        wall_color,
        walls: Vec::new(),
        objects: Vec::new(),
    };
    let inner = state.interior();

    for _ in 0..uniform_int(rng, cfg.n_walls) {
        let t = uniform_int(rng, cfg.wall_thickness) as f64;
        let l = uniform_int(rng, cfg.wall_length) as f64;
        let (w, h) = if rng.gen::<bool>() { (l, t) } else { (t, l) };
        let x0 = rng.gen_range(0..=(inner.x1 - inner.x0 - w) as usize) as f64 + inner.x0;
        let y0 = rng.gen_range(0..=(inner.y1 - inner.y0 - h) as usize) as f64 + inner.y0;
        state.walls.push(Rect {
            x0,
            y0,
            x1: x0 + w,
            y1: y0 + h,
        });
    }

    let n_dyn = uniform_int(rng, cfg.n_dynamic_squares);
    let n_static = uniform_int(rng, cfg.n_static_squares);
    let kinds = std::iter::repeat(ObjectKind::DynamicSquare)
        .take(n_dyn)
        .chain(std::iter::repeat(ObjectKind::StaticSquare).take(n_static));
    for kind in kinds {
        let side = uniform_int(rng, cfg.square_size);
        let s = side as f64;
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            // integer corners keep edges on the pixel grid at t = 0
            let x0 = rng.gen_range(0..=(inner.x1 - inner.x0 - s) as usize) as f64 + inner.x0;
            let y0 = rng.gen_range(0..=(inner.y1 - inner.y0 - s) as usize) as f64 + inner.y0;
            let r = Rect {
                x0,
                y0,
                x1: x0 + s,
                y1: y0 + s,
            };
            let clear = state.walls.iter().all(|w| r.penetration(w).is_none())
                && state.objects.iter().all(|o| r.penetration(&o.bounds()).is_none());
            if clear {
                placed = Some([x0 + s / 2.0, y0 + s / 2.0]);
                break;
            }
        }
        let Some(position) = placed else {
            return Err(SceneError::PlacementFailure {
                kind: match kind {
                    ObjectKind::DynamicSquare => "dynamic square",
                    _ => "static square",
                },
                attempts: PLACEMENT_ATTEMPTS,
            });
        };
        let velocity = match kind {
            ObjectKind::DynamicSquare => [signed_speed(rng, cfg.speed_range), signed_speed(rng, cfg.speed_range)],
            _ => [0.0, 0.0],
        };
        let body_color = contrasting(rng, &[background], cfg.min_contrast);
        let digit_color = contrasting(rng, &[body_color], cfg.min_contrast);
        let glyph = glyphs.sample_glyph(rng, split)?.fit(side - 2);
        state.objects.push(SceneObject {
            kind,
            position,
            velocity,
            size: s,
            body_color,
            texture: Some(Texture {
                digit: glyph.digit,
                color: digit_color,
                side: glyph.side,
                mask: glyph.mask(cfg.mask_threshold),
            }),
        });
    }

    for _ in 0..uniform_int(rng, cfg.n_circles) {
        let r = uniform(rng, cfg.circle_radius);
        let x = rng.gen_range(r..=size as f64 - r);
        let y = rng.gen_range(r..=size as f64 - r);
        let velocity = [signed_speed(rng, cfg.speed_range), signed_speed(rng, cfg.speed_range)];
        let body_color = contrasting(rng, &[background], cfg.min_contrast);
        state.objects.push(SceneObject {
            kind: ObjectKind::Circle,
            position: [x, y],
            velocity,
            size: r,
            body_color,
            texture: None,
        });
    }
    Ok(state)
}

/// Reflects `pos` into `[lo, hi]` and flips `vel` if it was outside.
fn reflect(pos: &mut f64, vel: &mut f64, lo: f64, hi: f64) {
    if *pos < lo {
        *pos = 2.0 * lo - *pos;
        *vel = vel.abs();
    } else if *pos > hi {
        *pos = 2.0 * hi - *pos;
        *vel = -vel.abs();
    }
    *pos = pos.clamp(lo, hi);
}

/// Pushes dynamic square `o` out of the immovable rectangle `fixed`.
fn bounce_off_fixed(o: &mut SceneObject, fixed: &Rect) {
    let b = o.bounds();
    let Some((px, py)) = b.penetration(fixed) else {
        return;
    };
    let axis = usize::from(py < px);
    let (depth, own_mid, fixed_mid) = if axis == 0 {
        (px, (b.x0 + b.x1) / 2.0, (fixed.x0 + fixed.x1) / 2.0)
    } else {
        (py, (b.y0 + b.y1) / 2.0, (fixed.y0 + fixed.y1) / 2.0)
    };
    let dir = if own_mid < fixed_mid { -1.0 } else { 1.0 };
    o.position[axis] += dir * depth;
    if o.velocity[axis] * dir < 0.0 {
        o.velocity[axis] = -o.velocity[axis];
    }
}

/// Advances the scene by one frame.
///
/// Dynamic squares collide elastically with each other (equal masses, resolved
/// on the axis of least penetration) and reflect off borders, walls and static
/// squares. Circles fly freely and reflect only at the image edges. Each frame
/// is split into substeps short enough that no square can cross half of
/// another square or wall in one substep.
pub fn step(state: &mut SceneState) {
    let max_speed = state
        .objects
        .iter()
        .flat_map(|o| o.velocity.iter().map(|v| v.abs()))
        .fold(0.0, f64::max);
    let min_extent = state
        .objects
        .iter()
        .filter(|o| o.kind != ObjectKind::Circle)
        .map(|o| o.size)
        .chain(state.walls.iter().map(|w| (w.x1 - w.x0).min(w.y1 - w.y0)))
        .fold(f64::INFINITY, f64::min);
    // two squares closing at 2 * max_speed must not pass each other's midlines
    // within one substep
    let substeps = if min_extent.is_finite() && max_speed > 0.0 {
        (4.0 * max_speed / min_extent).ceil().max(1.0) as usize
    } else {
        1
    };
    let dt = 1.0 / substeps as f64;
    let size = state.size as f64;
    let inner = state.interior();
    for _ in 0..substeps {
        for o in &mut state.objects {
            if o.kind == ObjectKind::StaticSquare {
                continue;
            }
            o.position[0] += o.velocity[0] * dt;
            o.position[1] += o.velocity[1] * dt;
            let h = o.half();
            let (xr, yr) = match o.kind {
                ObjectKind::Circle => ((h, size - h), (h, size - h)),
                _ => ((inner.x0 + h, inner.x1 - h), (inner.y0 + h, inner.y1 - h)),
            };
            let [px, py] = &mut o.position;
            let [vx, vy] = &mut o.velocity;
            reflect(px, vx, xr.0, xr.1);
            reflect(py, vy, yr.0, yr.1);
        }
        let fixed: Vec<Rect> = state
            .walls
            .iter()
            .copied()
            .chain(
                state
                    .objects
                    .iter()
                    .filter(|o| o.kind == ObjectKind::StaticSquare)
                    .map(SceneObject::bounds),
            )
            .collect();
        let dynamic: Vec<usize> = (0..state.objects.len())
            .filter(|&i| state.objects[i].kind == ObjectKind::DynamicSquare)
            .collect();
        for (n, &i) in dynamic.iter().enumerate() {
            for &j in &dynamic[n + 1..] {
                let (a, b) = pair_mut(&mut state.objects, i, j);
                collide(a, b);
            }
        }
        for &i in &dynamic {
            for f in &fixed {
                bounce_off_fixed(&mut state.objects[i], f);
            }
        }
    }
}

fn pair_mut<T>(v: &mut [T], i: usize, j: usize) -> (&mut T, &mut T) {
    debug_assert!(i < j);
    let (lo, hi) = v.split_at_mut(j);
    (&mut lo[i], &mut hi[0])
}

/// Equal-mass elastic collision of two overlapping squares.
fn collide(a: &mut SceneObject, b: &mut SceneObject) {
    let Some((px, py)) = a.bounds().penetration(&b.bounds()) else {
        return;
    };
    let axis = usize::from(py < px);
    let depth = if axis == 0 { px } else { py };
    let dir = if a.position[axis] < b.position[axis] { -1.0 } else { 1.0 };
    a.position[axis] += dir * depth / 2.0;
    b.position[axis] -= dir * depth / 2.0;
    // approaching along the contact normal
    if (a.velocity[axis] - b.velocity[axis]) * dir < 0.0 {
        std::mem::swap(&mut a.velocity[axis], &mut b.velocity[axis]);
    }
}

/// Rasterizes the scene. Returns the image and the label map, both row-major.
pub fn render(state: &SceneState) -> (Vec<f32>, Vec<u8>) {
    let n = state.size;
    let mut image = vec![state.background; n * n];
    let mut label = vec![CLASS_BACKGROUND; n * n];
    let mut paint = |x: usize, y: usize, v: f32, c: u8| {
        image[y * n + x] = v;
        label[y * n + x] = c;
    };
    let inner = state.interior();
    for y in 0..n {
        for x in 0..n {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            if !inner.covers(cx, cy) || state.walls.iter().any(|w| w.covers(cx, cy)) {
                paint(x, y, state.wall_color, CLASS_WALL);
            }
        }
    }
    let order = [ObjectKind::StaticSquare, ObjectKind::DynamicSquare, ObjectKind::Circle];
    for kind in order {
        for o in state.objects.iter().filter(|o| o.kind == kind) {
            let b = o.bounds();
            let class = o.class();
            let ys = (b.y0 - 0.5).ceil().max(0.0) as usize..((b.y1 - 0.5).ceil().max(0.0) as usize).min(n);
            let xs = (b.x0 - 0.5).ceil().max(0.0) as usize..((b.x1 - 0.5).ceil().max(0.0) as usize).min(n);
            let (x_first, y_first) = ((b.x0 - 0.5).ceil() as i64, (b.y0 - 0.5).ceil() as i64);
            for y in ys {
                for x in xs.clone() {
                    let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                    let color = if kind == ObjectKind::Circle {
                        let (dx, dy) = (cx - o.position[0], cy - o.position[1]);
                        if dx * dx + dy * dy > o.size * o.size {
                            continue;
                        }
                        o.body_color
                    } else {
                        let (lx, ly) = (x as i64 - x_first - 1, y as i64 - y_first - 1);
                        match &o.texture {
                            Some(t)
                                if lx >= 0
                                    && ly >= 0
                                    && (lx as usize) < t.side
                                    && (ly as usize) < t.side
                                    && t.mask[ly as usize * t.side + lx as usize] =>
                            {
                                t.color
                            }
                            _ => o.body_color,
                        }
                    };
                    paint(x, y, color, class);
                }
            }
        }
    }
    (image, label)
}

/// Per-sequence perturbation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub sigma: f64,
    pub amplitude: f64,
    pub decay: f64,
    pub region: Option<RegionOffset>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionOffset {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub amplitude: f64,
    pub decay: f64,
}

impl Perturbation {
    pub fn none() -> Self {
        Self {
            sigma: 0.0,
            amplitude: 0.0,
            decay: 1.0,
            region: None,
        }
    }

    /// Intensity offset at pixel `(x, y)` of frame `t`.
    pub fn offset(&self, t: usize, x: usize, y: usize) -> f64 {
        let mut v = self.amplitude * self.decay.powi(t as i32);
        if let Some(r) = &self.region {
            if x >= r.x0 && x < r.x1 && y >= r.y0 && y < r.y1 {
                v += r.amplitude * r.decay.powi(t as i32);
            }
        }
        v
    }
}

pub fn sample_perturbation<R: Rng + ?Sized>(cfg: &SceneConfig, rng: &mut R) -> Perturbation {
    let n = cfg.image_size;
    let m = cfg.region_min_size;
    let sigma = uniform(rng, cfg.noise_sigma_range);
    let amplitude = uniform(rng, cfg.offset_amplitude_range);
    let decay = uniform(rng, cfg.offset_decay_range);
    let w = rng.gen_range(m..=n);
    let h = rng.gen_range(m..=n);
    let x0 = rng.gen_range(0..=n - w);
    let y0 = rng.gen_range(0..=n - h);
    let region = RegionOffset {
        x0,
        y0,
        x1: x0 + w,
        y1: y0 + h,
        amplitude: uniform(rng, cfg.offset_amplitude_range),
        decay: uniform(rng, cfg.offset_decay_range),
    };
    Perturbation {
        sigma,
        amplitude,
        decay,
        region: Some(region),
    }
}

/// Adds offsets and Gaussian noise to `T` frames of `size x size`, then clips to `[0, 1]`.
pub fn apply_perturbation<R: Rng + ?Sized>(frames: &[f32], size: usize, p: &Perturbation, rng: &mut R) -> Vec<f32> {
    let noise = (p.sigma > 0.0).then(|| Normal::new(0.0, p.sigma).expect("finite sigma"));
    frames
        .chunks(size * size)
        .enumerate()
        .flat_map(|(t, frame)| {
            let noise = noise.as_ref();
            let mut out = Vec::with_capacity(frame.len());
            for (i, &v) in frame.iter().enumerate() {
                let mut v = v as f64 + p.offset(t, i % size, i / size);
                if let Some(dist) = noise {
                    v += dist.sample(rng);
                }
                out.push(v.clamp(0.0, 1.0) as f32);
            }
            out
        })
        .collect()
}

/// Samples perturbation parameters and applies them.
pub fn perturb<R: Rng + ?Sized>(frames: &[f32], cfg: &SceneConfig, rng: &mut R) -> Vec<f32> {
    let p = sample_perturbation(cfg, rng);
    apply_perturbation(frames, cfg.image_size, &p, rng)
}

/// `T` perturbed frames, their clean twins and the label of the last frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub steps: usize,
    pub size: usize,
    /// `steps * size * size`, frame-major.
    pub frames: Vec<f32>,
    pub clean_frames: Vec<f32>,
    /// `size * size` class ids for the last frame.
    pub label: Vec<u8>,
}

impl SequenceSample {
    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.size * self.size;
        &self.frames[t * n..(t + 1) * n]
    }

    pub fn clean_frame(&self, t: usize) -> &[f32] {
        let n = self.size * self.size;
        &self.clean_frames[t * n..(t + 1) * n]
    }
}

/// Scene, `T` rounds of (step, render), then perturbation. The scene is drawn
/// before anything else, so `cfg.clean()` with the same rng yields the clean twin.
pub fn generate_sequence<R: Rng + ?Sized>(
    cfg: &SceneConfig,
    glyphs: &GlyphBank,
    split: GlyphSplit,
    rng: &mut R,
) -> Result<SequenceSample, SceneError> {
    let mut state = sample_scene(cfg, glyphs, split, rng)?;
    let n = cfg.image_size;
    let mut clean = Vec::with_capacity(cfg.sequence_length * n * n);
    let mut label = Vec::new();
    for _ in 0..cfg.sequence_length {
        step(&mut state);
        let (img, lab) = render(&state);
        clean.extend_from_slice(&img);
        label = lab;
    }
    let frames = if cfg.perturb {
        perturb(&clean, cfg, rng)
    } else {
        clean.clone()
    };
    Ok(SequenceSample {
        steps: cfg.sequence_length,
        size: n,
        frames,
        clean_frames: clean,
        label,
    })
}

#[cfg(test)]
mod tests;
