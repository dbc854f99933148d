//! Procedural source and target datasets.
//!
//! Source samples show one large centered shape per class on a plain
//! background. Target samples are 32×32 road scenes under one of five
//! weather/lighting conditions with 1–4 small vehicles and their boxes.
//! Images are row-major `[height × width × 3]` with values in `[0, 1]`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const IMAGE_LEN: usize = IMAGE_SIZE * IMAGE_SIZE * CHANNELS;
pub const SOURCE_CLASSES: usize = 10;
pub const TARGET_CONDITIONS: usize = 5;
pub const MAX_VEHICLES: usize = 4;

/// Axis-aligned box in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x: u8,
    pub y: u8,
    pub w: u8,
    pub h: u8,
}

impl BBox {
    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.w >= 1
            && self.h >= 1
            && self.x as usize + self.w as usize <= width
            && self.y as usize + self.h as usize <= height
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        let (bx, by) = (self.x as usize, self.y as usize);
        x >= bx && x < bx + self.w as usize && y >= by && y < by + self.h as usize
    }

    pub fn area(&self) -> usize {
        self.w as usize * self.h as usize
    }

    /// Linear size used for bucketing: the longer side.
    pub fn size(&self) -> usize {
        self.w.max(self.h) as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Condition {
    Sunny = 0,
    Cloudy = 1,
    Rainy = 2,
    Snowy = 3,
    Night = 4,
}

impl Condition {
    pub const ALL: [Condition; TARGET_CONDITIONS] = [
        Condition::Sunny,
        Condition::Cloudy,
        Condition::Rainy,
        Condition::Snowy,
        Condition::Night,
    ];

    pub fn from_id(id: u8) -> Result<Self> {
        Self::ALL
            .get(id as usize)
            .copied()
            .ok_or_else(|| Error::Input(format!("condition id {id} not in 0..{TARGET_CONDITIONS}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Condition::Sunny => "sunny",
            Condition::Cloudy => "cloudy",
            Condition::Rainy => "rainy",
            Condition::Snowy => "snowy",
            Condition::Night => "night",
        }
    }
}

/// One image with its label and vehicle boxes. For source samples `label`
/// is the class id and `boxes` is empty.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub image: Vec<f32>,
    pub label: u8,
    pub boxes: Vec<BBox>,
}

impl SceneSample {
    pub fn validate(&self) -> Result<()> {
        if self.image.len() != IMAGE_LEN {
            return Err(Error::Input(format!(
                "image has {} values, expected {IMAGE_LEN}",
                self.image.len()
            )));
        }
        if let Some(b) = self.boxes.iter().find(|b| !b.fits(IMAGE_SIZE, IMAGE_SIZE)) {
            return Err(Error::Input(format!("box {b:?} outside the image")));
        }
        Ok(())
    }

    /// The image mapped to the model's `[-1, 1]` range as a `[32, 32, 3]` tensor.
    pub fn model_input<F: Scalar>(&self) -> Tensor<F> {
        Tensor::new(
            &[IMAGE_SIZE, IMAGE_SIZE, CHANNELS],
            self.image.iter().map(|&v| F::of(2.0 * v as f64 - 1.0)).collect(),
        )
        .expect("image extents are fixed")
    }
}

/// Maps a model-space `[-1, 1]` tensor back to clamped `[0, 1]` pixels.
pub fn to_pixels<F: Scalar>(x: &Tensor<F>) -> Vec<f32> {
    x.data()
        .iter()
        .map(|v| ((v.as_f64() + 1.0) * 0.5).clamp(0.0, 1.0) as f32)
        .collect()
}

type Rgb = [f32; 3];

fn luminance(c: Rgb) -> f32 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn jitter<R: Rng>(rng: &mut R, c: Rgb, amount: f32) -> Rgb {
    let mut out = c;
    for v in &mut out {
        *v = (*v + rng.random_range(-amount..=amount)).clamp(0.0, 1.0);
    }
    out
}

struct Canvas {
    px: Vec<f32>,
}

impl Canvas {
    fn filled(c: Rgb) -> Self {
        let mut px = Vec::with_capacity(IMAGE_LEN);
        for _ in 0..IMAGE_SIZE * IMAGE_SIZE {
            px.extend_from_slice(&c);
        }
        Self { px }
    }

    fn get(&self, x: usize, y: usize) -> Rgb {
        let i = (y * IMAGE_SIZE + x) * CHANNELS;
        [self.px[i], self.px[i + 1], self.px[i + 2]]
    }

    fn set(&mut self, x: usize, y: usize, c: Rgb) {
        let i = (y * IMAGE_SIZE + x) * CHANNELS;
        self.px[i..i + 3].copy_from_slice(&c);
    }

    fn blend(&mut self, x: usize, y: usize, c: Rgb, a: f32) {
        let old = self.get(x, y);
        let mixed = [
            old[0] * (1.0 - a) + c[0] * a,
            old[1] * (1.0 - a) + c[1] * a,
            old[2] * (1.0 - a) + c[2] * a,
        ];
        self.set(x, y, mixed);
    }
}

#[derive(Clone, Copy)]
enum Shape {
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
    Diamond,
    WideBar,
    Frame,
    TallBar,
    Ellipse,
}

/// Shape, foreground and background of each source class.
const SOURCE_TEMPLATES: [(Shape, Rgb, Rgb); SOURCE_CLASSES] = [
    (Shape::Disk, [0.85, 0.15, 0.12], [0.50, 0.72, 0.95]),
    (Shape::Square, [0.15, 0.25, 0.80], [0.55, 0.55, 0.56]),
    (Shape::Triangle, [0.95, 0.85, 0.20], [0.12, 0.14, 0.26]),
    (Shape::Cross, [0.15, 0.60, 0.20], [0.93, 0.93, 0.95]),
    (Shape::Ring, [0.95, 0.55, 0.10], [0.03, 0.03, 0.05]),
    (Shape::Diamond, [0.55, 0.20, 0.65], [0.86, 0.80, 0.64]),
    (Shape::WideBar, [0.30, 0.30, 0.32], [0.58, 0.80, 0.48]),
    (Shape::Frame, [0.95, 0.95, 0.92], [0.26, 0.26, 0.28]),
    (Shape::TallBar, [0.20, 0.85, 0.90], [0.45, 0.30, 0.18]),
    (Shape::Ellipse, [0.95, 0.55, 0.70], [0.10, 0.45, 0.45]),
];

fn in_shape(shape: Shape, dx: i32, dy: i32) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    match shape {
        Shape::Disk => dx * dx + dy * dy <= 100,
        Shape::Square => (-9..9).contains(&dx) && (-9..9).contains(&dy),
        // Apex at the top, base 24 px wide at the bottom.
        Shape::Triangle => (-12..12).contains(&dy) && 2 * ax <= dy + 12,
        Shape::Cross => (ax < 4 && ay < 12) || (ay < 4 && ax < 12),
        Shape::Ring => {
            let r2 = dx * dx + dy * dy;
            (49..=169).contains(&r2)
        }
        Shape::Diamond => ax + ay <= 12,
        Shape::WideBar => ax < 14 && ay < 6,
        Shape::Frame => ax < 11 && ay < 11 && !(ax < 6 && ay < 6),
        Shape::TallBar => ax < 6 && ay < 14,
        Shape::Ellipse => 64 * dx * dx + 169 * dy * dy <= 64 * 169,
    }
}

/// Pixel mask of a class template centred at `(cx, cy)`.
pub fn source_mask(class_id: u8, cx: i32, cy: i32) -> Result<Vec<bool>> {
    let (shape, _, _) = *SOURCE_TEMPLATES
        .get(class_id as usize)
        .ok_or_else(|| Error::Input(format!("class id {class_id} not in 0..{SOURCE_CLASSES}")))?;
    let mut mask = vec![false; IMAGE_SIZE * IMAGE_SIZE];
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            mask[y * IMAGE_SIZE + x] = in_shape(shape, x as i32 - cx, y as i32 - cy);
        }
    }
    Ok(mask)
}

pub fn gen_source_sample<R: Rng>(class_id: u8, rng: &mut R) -> Result<SceneSample> {
    let (_, fg, bg) = *SOURCE_TEMPLATES
        .get(class_id as usize)
        .ok_or_else(|| Error::Input(format!("class id {class_id} not in 0..{SOURCE_CLASSES}")))?;
    let cx = 16 + rng.random_range(-2..=2);
    let cy = 16 + rng.random_range(-2..=2);
    let fg = jitter(rng, fg, 0.06);
    let bg = jitter(rng, bg, 0.04);
    let mask = source_mask(class_id, cx, cy)?;
    let mut canvas = Canvas::filled(bg);
    for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        canvas.set(i % IMAGE_SIZE, i / IMAGE_SIZE, fg);
    }
    Ok(SceneSample {
        image: canvas.px,
        label: class_id,
        boxes: Vec::new(),
    })
}

struct Palette {
    sky: Rgb,
    ground: Rgb,
}

fn palette(c: Condition) -> Palette {
    match c {
        Condition::Sunny => Palette {
            sky: [0.45, 0.70, 0.98],
            ground: [0.46, 0.46, 0.43],
        },
        Condition::Cloudy => Palette {
            sky: [0.64, 0.66, 0.68],
            ground: [0.40, 0.40, 0.41],
        },
        Condition::Rainy => Palette {
            sky: [0.24, 0.26, 0.31],
            ground: [0.20, 0.21, 0.24],
        },
        Condition::Snowy => Palette {
            sky: [0.80, 0.82, 0.87],
            ground: [0.93, 0.94, 0.96],
        },
        Condition::Night => Palette {
            sky: [0.02, 0.02, 0.06],
            ground: [0.06, 0.06, 0.07],
        },
    }
}

const VEHICLE_COLORS: [Rgb; 7] = [
    [0.85, 0.10, 0.10],
    [0.10, 0.20, 0.75],
    [0.95, 0.95, 0.95],
    [0.05, 0.05, 0.05],
    [0.95, 0.80, 0.10],
    [0.62, 0.64, 0.66],
    [0.10, 0.55, 0.25],
];

const HEADLIGHT: Rgb = [1.0, 0.95, 0.70];

fn color_distance(a: Rgb, b: Rgb) -> f32 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

fn overlaps(a: &BBox, b: &BBox) -> bool {
    let (ax, ay, bx, by) = (a.x as i32, a.y as i32, b.x as i32, b.y as i32);
    ax < bx + b.w as i32 && bx < ax + a.w as i32 && ay < by + b.h as i32 && by < ay + a.h as i32
}

pub fn gen_target_sample<R: Rng>(condition_id: u8, rng: &mut R) -> Result<SceneSample> {
    let cond = Condition::from_id(condition_id)?;
    let pal = palette(cond);
    let sky = jitter(rng, pal.sky, 0.03);
    let ground = jitter(rng, pal.ground, 0.03);
    let horizon = rng.random_range(12..=15usize);
    let mut canvas = Canvas::filled(ground);
    for y in 0..horizon {
        for x in 0..IMAGE_SIZE {
            canvas.set(x, y, sky);
        }
    }
    // Lane markings.
    let lane_color = if cond == Condition::Snowy {
        [0.75, 0.76, 0.78]
    } else {
        [0.85, 0.85, 0.80]
    };
    let lane_x = rng.random_range(12..20usize);
    for y in (horizon + 1..IMAGE_SIZE).step_by(3) {
        canvas.blend(lane_x, y, lane_color, if cond == Condition::Night { 0.15 } else { 0.6 });
    }
    if cond == Condition::Snowy {
        for _ in 0..40 {
            let (x, y) = (rng.random_range(0..IMAGE_SIZE), rng.random_range(0..IMAGE_SIZE));
            canvas.blend(x, y, [1.0, 1.0, 1.0], 0.7);
        }
    }

    let count = rng.random_range(1..=MAX_VEHICLES);
    let mut boxes: Vec<BBox> = Vec::with_capacity(count);
    for _ in 0..count {
        // Rejection-sample a non-overlapping placement on the road.
        for _attempt in 0..30 {
            let w = rng.random_range(3..=8u8);
            let h = w.saturating_sub(rng.random_range(0..=2u8)).max(3);
            let y_lo = horizon as u8;
            let y_hi = IMAGE_SIZE as u8 - h;
            if y_lo > y_hi {
                continue;
            }
            let b = BBox {
                x: rng.random_range(0..=(IMAGE_SIZE as u8 - w)),
                y: rng.random_range(y_lo..=y_hi),
                w,
                h,
            };
            if boxes.iter().all(|o| !overlaps(o, &b)) {
                boxes.push(b);
                break;
            }
        }
    }
    if boxes.is_empty() {
        boxes.push(BBox {
            x: 12,
            y: (IMAGE_SIZE - 6) as u8,
            w: 5,
            h: 4,
        });
    }

    for b in &boxes {
        let mut body = VEHICLE_COLORS[rng.random_range(0..VEHICLE_COLORS.len())];
        if cond == Condition::Night {
            body = [body[0] * 0.35 + 0.05, body[1] * 0.35 + 0.05, body[2] * 0.35 + 0.05];
        }
        // Keep the body visibly distinct from the road surface.
        if color_distance(body, ground) < 0.08 {
            body = if luminance(ground) > 0.5 {
                [0.08, 0.08, 0.10]
            } else {
                [0.92, 0.92, 0.90]
            };
            if cond == Condition::Night {
                body = [0.40, 0.40, 0.42];
            }
        }
        draw_vehicle(&mut canvas, b, body, cond);
    }

    if cond == Condition::Rainy {
        for _ in 0..14 {
            let x = rng.random_range(0..IMAGE_SIZE);
            let y0 = rng.random_range(0..IMAGE_SIZE);
            let len = rng.random_range(3..=6usize);
            for y in y0..(y0 + len).min(IMAGE_SIZE) {
                if boxes.iter().all(|b| !b.contains(x, y)) {
                    canvas.blend(x, y, [0.75, 0.78, 0.85], 0.35);
                }
            }
        }
    }

    Ok(SceneSample {
        image: canvas.px,
        label: condition_id,
        boxes,
    })
}

/// Body with a one-pixel anti-aliased rim (half coverage), plus condition
/// specific details.
fn draw_vehicle(canvas: &mut Canvas, b: &BBox, body: Rgb, cond: Condition) {
    let (x0, y0, w, h) = (b.x as usize, b.y as usize, b.w as usize, b.h as usize);
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            let rim = x == x0 || y == y0 || x == x0 + w - 1 || y == y0 + h - 1;
            canvas.blend(x, y, body, if rim { 0.5 } else { 1.0 });
        }
    }
    match cond {
        Condition::Night if w >= 4 => {
            let y = y0 + h - 2;
            canvas.set(x0 + 1, y, HEADLIGHT);
            canvas.set(x0 + w - 2, y, HEADLIGHT);
        }
        Condition::Rainy => {
            // Reflection on the wet road below the vehicle.
            for y in y0 + h..(y0 + h + h / 2).min(IMAGE_SIZE) {
                for x in x0 + 1..x0 + w - 1 {
                    canvas.blend(x, y, body, 0.3);
                }
            }
        }
        _ => {}
    }
}

/// `count` source samples cycling through the classes, from one seeded stream.
pub fn source_dataset(count: usize, seed: u64) -> Vec<SceneSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| gen_source_sample((i % SOURCE_CLASSES) as u8, &mut rng).expect("valid class"))
        .collect()
}

/// `count` target scenes cycling through the conditions, from one seeded stream.
pub fn target_dataset(count: usize, seed: u64) -> Vec<SceneSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| gen_target_sample((i % TARGET_CONDITIONS) as u8, &mut rng).expect("valid condition"))
        .collect()
}

/// Mean Rec. 601 luminance over rows `[row_start, row_end)`.
pub fn mean_luminance(image: &[f32], row_start: usize, row_end: usize) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for y in row_start..row_end {
        for x in 0..IMAGE_SIZE {
            let i = (y * IMAGE_SIZE + x) * CHANNELS;
            total += luminance([image[i], image[i + 1], image[i + 2]]) as f64;
            n += 1;
        }
    }
    total / n as f64
}
