//! Synthetic motion: a grey sinusoidal texture translating behind a reddish
//! textured square with soft edges. Frames are rendered analytically at any
//! time in `[0, 1]`, so intermediate ground truth and flow are exact.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::io::{read_flow, read_image, write_flow, write_image};
use crate::metrics::OcclusionMask;
use crate::sampling::FlowField;
use crate::tensor::{Shape, Tensor};

/// Intermediate target times used for multi-time training.
pub const TRAIN_TIMES: [f64; 5] = [0.167, 0.333, 0.5, 0.667, 0.833];

/// Red minus blue of every object pixel; the background has none.
pub const OBJECT_CHROMA: f64 = 0.7;

#[derive(Debug, Clone, PartialEq)]
struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: f64,
}

/// A smooth random texture on the plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Texture {
    waves: Vec<Wave>,
}

impl Texture {
    /// Sum of `count` plane waves with wavelengths between `min_wl` and
    /// `max_wl` pixels, scaled to lie in `[-1, 1]`.
    pub fn random(rng: &mut impl Rng, count: usize, min_wl: f64, max_wl: f64) -> Self {
        let mut waves: Vec<Wave> = (0..count)
            .map(|_| {
                let wl = rng.gen_range(min_wl..max_wl);
                let th = rng.gen_range(0.0..PI);
                let k = 2.0 * PI / wl;
                Wave {
                    fx: k * th.cos(),
                    fy: k * th.sin(),
                    phase: rng.gen_range(0.0..2.0 * PI),
                    amp: rng.gen_range(0.5..1.0),
                }
            })
            .collect();
        let total: f64 = waves.iter().map(|w| w.amp).sum();
        for w in &mut waves {
            w.amp /= total.max(1e-12);
        }
        Texture { waves }
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.waves
            .iter()
            .map(|w| w.amp * (w.fx * x + w.fy * y + w.phase).sin())
            .sum()
    }
}

/// Everything needed to render one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSpec {
    pub width: usize,
    pub height: usize,
    /// Interior times; the endpoints 0 and 1 are always rendered.
    pub times: Vec<f64>,
    /// Object centre at time 0, in pixels.
    pub object_start: (f64, f64),
    /// Object displacement from time 0 to time 1, `(u, v)`.
    pub object_velocity: (f64, f64),
    /// Object rotation from time 0 to time 1, radians.
    pub object_rotation: f64,
    pub background_velocity: (f64, f64),
    /// Side length of the square occluder.
    pub object_size: f64,
    /// Width of the edge ramp in pixels.
    pub edge_softness: f64,
    pub texture_seed: u64,
}

impl MotionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("empty frame size"));
        }
        let diag = self.object_size * std::f64::consts::SQRT_2;
        let reach = if self.object_rotation != 0.0 { diag } else { self.object_size };
        if !(self.object_size > 0.0) || reach > self.width.min(self.height) as f64 {
            return Err(Error::invalid(format!(
                "occluder of size {} does not fit a {}x{} frame",
                self.object_size, self.width, self.height
            )));
        }
        if self.times.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
            return Err(Error::invalid("interior times must lie in (0, 1)"));
        }
        if !(self.edge_softness > 0.0) {
            return Err(Error::invalid("edge softness must be positive"));
        }
        Ok(())
    }

    pub fn object_center(&self, t: f64) -> (f64, f64) {
        (
            self.object_start.0 + t * self.object_velocity.0,
            self.object_start.1 + t * self.object_velocity.1,
        )
    }

    /// Maps a frame point at time `t` into object coordinates.
    fn to_object(&self, x: f64, y: f64, t: f64) -> (f64, f64) {
        let (cx, cy) = self.object_center(t);
        let (s, c) = (-self.object_rotation * t).sin_cos();
        let (dx, dy) = (x - cx, y - cy);
        (c * dx - s * dy, s * dx + c * dy)
    }

    /// Object coverage in `[0, 1]` at pixel `(x, y)` and time `t`.
    pub fn alpha(&self, x: f64, y: f64, t: f64) -> f64 {
        let (ox, oy) = self.to_object(x, y, t);
        let half = self.object_size / 2.0;
        let ramp = |d: f64| ((half - d.abs()) / self.edge_softness + 0.5).clamp(0.0, 1.0);
        ramp(ox) * ramp(oy)
    }
}

/// A rendered sequence with exact intermediate frames and flow.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub spec: MotionSpec,
    /// 0, the interior times in increasing order, 1.
    pub times: Vec<f64>,
    pub frames: Vec<Frame>,
    /// Frame-0 to frame-1 flow: `I0(x) = I1(x + flow(x))`.
    pub flow_1to2: FlowField<f64>,
}

struct Scene {
    background: Texture,
    object: Texture,
}

impl Scene {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Scene {
            background: Texture::random(&mut rng, 6, 5.0, 18.0),
            object: Texture::random(&mut rng, 4, 4.0, 12.0),
        }
    }

    fn render(&self, spec: &MotionSpec, t: f64) -> Frame {
        let (bu, bv) = spec.background_velocity;
        Frame::from_fn(spec.width, spec.height, |x, y| {
            let (x, y) = (x as f64, y as f64);
            let g = 0.5 + 0.4 * self.background.eval(x - bu * t, y - bv * t);
            let a = spec.alpha(x, y, t);
            if a == 0.0 {
                return [g; 3];
            }
            let (ox, oy) = spec.to_object(x, y, t);
            let base = 0.5 + 0.15 * self.object.eval(ox, oy);
            let obj = [
                base + OBJECT_CHROMA / 2.0,
                base,
                base - OBJECT_CHROMA / 2.0,
            ];
            obj.map(|o| a * o + (1.0 - a) * g)
        })
    }
}

/// Renders `spec` deterministically.
pub fn gen_sequence(spec: &MotionSpec) -> Result<SyntheticSequence> {
    spec.validate()?;
    let scene = Scene::new(spec.texture_seed);
    let mut times = spec.times.clone();
    times.sort_by(|a, b| a.total_cmp(b));
    times.dedup();
    times.insert(0, 0.0);
    times.push(1.0);
    let frames = times.iter().map(|&t| scene.render(spec, t)).collect();
    Ok(SyntheticSequence {
        flow_1to2: gt_flow(spec),
        spec: spec.clone(),
        times,
        frames,
    })
}

fn gt_flow(spec: &MotionSpec) -> FlowField<f64> {
    let (w, h) = (spec.width, spec.height);
    let (s, c) = spec.object_rotation.sin_cos();
    let (c0x, c0y) = spec.object_center(0.0);
    let (c1x, c1y) = spec.object_center(1.0);
    let mut t = Tensor::zeros(Shape::new(1, 2, h, w));
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let (u, v) = if spec.alpha(xf, yf, 0.0) >= 0.5 {
                let (dx, dy) = (xf - c0x, yf - c0y);
                (c1x + c * dx - s * dy - xf, c1y + s * dx + c * dy - yf)
            } else {
                spec.background_velocity
            };
            t.set(0, 0, y, x, u);
            t.set(0, 1, y, x, v);
        }
    }
    FlowField::new(t).expect("finite flow")
}

impl SyntheticSequence {
    pub fn first(&self) -> &Frame {
        &self.frames[0]
    }

    pub fn last(&self) -> &Frame {
        self.frames.last().expect("at least two frames")
    }

    /// Ground truth at an interior time, if rendered.
    pub fn at(&self, t: f64) -> Option<&Frame> {
        self.times
            .iter()
            .position(|&s| (s - t).abs() < 1e-12)
            .map(|i| &self.frames[i])
    }

    /// Renders ground truth at any time in `[0, 1]`.
    pub fn render(&self, t: f64) -> Frame {
        Scene::new(self.spec.texture_seed).render(&self.spec, t)
    }

    /// Pixels whose object coverage at `t` differs from either endpoint:
    /// regions visible in only one input or occluded at the target.
    pub fn occlusion_band(&self, t: f64) -> OcclusionMask {
        let s = &self.spec;
        OcclusionMask::from_fn(s.width, s.height, |x, y| {
            let on = |tt: f64| s.alpha(x as f64, y as f64, tt) >= 0.5;
            let mid = on(t);
            mid != on(0.0) || mid != on(1.0)
        })
    }
}

/// Weighted centroid of object-coloured pixels.
pub fn object_centroid(frame: &Frame) -> Option<(f64, f64)> {
    let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for y in 0..frame.height() {
        for x in 0..frame.width() {
            let w = ((frame.get(x, y, 0) - frame.get(x, y, 2)) / OBJECT_CHROMA).clamp(0.0, 1.0);
            sw += w;
            sx += w * x as f64;
            sy += w * y as f64;
        }
    }
    (sw > 1e-9).then(|| (sx / sw, sy / sw))
}

/// Parameters of a random family of sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub size: usize,
    pub count: usize,
    /// Largest object displacement per axis between the endpoints.
    pub max_velocity: f64,
    /// Largest background displacement per axis.
    pub max_background_velocity: f64,
    pub object_size: (f64, f64),
    pub times: Vec<f64>,
    pub seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            size: 64,
            count: 48,
            max_velocity: 8.0,
            max_background_velocity: 4.0,
            object_size: (12.0, 24.0),
            times: TRAIN_TIMES.to_vec(),
            seed: 0,
        }
    }
}

impl DataSpec {
    /// Draws the `index`-th motion of the family; independent of `count`.
    pub fn motion(&self, index: usize) -> Result<MotionSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let (lo, hi) = self.object_size;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::invalid("object size range must be positive and ordered"));
        }
        let side = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let vm = self.max_velocity;
        let bm = self.max_background_velocity;
        let draw = |rng: &mut ChaCha8Rng, m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
        let vel = (draw(&mut rng, vm), draw(&mut rng, vm));
        let bg = (draw(&mut rng, bm), draw(&mut rng, bm));
        let size = self.size as f64;
        // keep the whole object inside the frame over the interval
        let margin = side / 2.0 + 1.0;
        let range = |v: f64| {
            let lo = margin + (-v).max(0.0);
            let hi = size - 1.0 - margin - v.max(0.0);
            (lo, hi)
        };
        let (xl, xh) = range(vel.0);
        let (yl, yh) = range(vel.1);
        if xl > xh || yl > yh {
            return Err(Error::invalid(format!(
                "occluder of size {:.1} moving {:.1} px does not fit a {} px frame",
                side,
                vel.0.abs().max(vel.1.abs()),
                self.size
            )));
        }
        let start = (rng.gen_range(xl..=xh), rng.gen_range(yl..=yh));
        Ok(MotionSpec {
            width: self.size,
            height: self.size,
            times: self.times.clone(),
            object_start: start,
            object_velocity: vel,
            object_rotation: 0.0,
            background_velocity: bg,
            object_size: side,
            edge_softness: 1.0,
            texture_seed: rng.gen(),
        })
    }

    pub fn generate(&self) -> Result<Vec<SyntheticSequence>> {
        (0..self.count).map(|i| gen_sequence(&self.motion(i)?)).collect()
    }
}

const MANIFEST: &str = "manifest.txt";

/// Writes `frame_XX.ppm`, `flow.flo` and a manifest listing each time.
pub fn write_sequence(dir: impl AsRef<Path>, seq: &SyntheticSequence) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    manifest.push_str(&format!("size {} {}\n", seq.spec.width, seq.spec.height));
    manifest.push_str(&format!(
        "object_velocity {} {}\nbackground_velocity {} {}\n",
        seq.spec.object_velocity.0,
        seq.spec.object_velocity.1,
        seq.spec.background_velocity.0,
        seq.spec.background_velocity.1
    ));
    for (i, (t, f)) in seq.times.iter().zip(&seq.frames).enumerate() {
        let name = format!("frame_{:02}.ppm", i);
        write_image(dir.join(&name), f)?;
        manifest.push_str(&format!("frame {} {}\n", t, name));
    }
    write_flow(dir.join("flow.flo"), &seq.flow_1to2)?;
    manifest.push_str("flow flow.flo\n");
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// Frames and times listed in a sequence manifest, plus the flow if present.
pub fn read_sequence(dir: impl AsRef<Path>) -> Result<(Vec<(f64, Frame)>, Option<FlowField<f64>>)> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let mut frames = Vec::new();
    let mut flow = None;
    for line in text.lines() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["frame", t, name] => {
                let t: f64 = t
                    .parse()
                    .map_err(|_| Error::format("manifest", format!("bad time {:?}", t)))?;
                frames.push((t, read_image(dir.join(name))?));
            }
            ["flow", name] => flow = Some(read_flow(dir.join(name))?),
            _ => {}
        }
    }
    Ok((frames, flow))
}
