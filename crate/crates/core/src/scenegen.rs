//! Procedural road scenes for a labeled source domain and a visually shifted
//! target domain.
//!
//! Geometry is a handful of planes ray-cast analytically: a road strip, two
//! raised sidewalks with curbs, a per-scene background (side walls, grass, or
//! railings), a backdrop wall, and optional box obstacles. Labels come from
//! geometry alone. Domains differ only in appearance (palettes, noise,
//! shadows, background mix), so the derived normals are alike across domains
//! while the RGB statistics are not.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::layout::{write_intrinsics, Manifest, ManifestEntry, Sample, SplitRole};
use crate::dataio::png;
use crate::error::{Error, Result};
use crate::geometry::{self, CameraIntrinsics, DepthMap};
use crate::rng;

/// Surface category of a rendered pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Region {
    Sky,
    Road,
    Sidewalk,
    Curb,
    Grass,
    Wall,
    Railing,
    Backdrop,
    Obstacle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackgroundKind {
    Wall,
    Grass,
    Railing,
}

pub type Rgb = [f32; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub name: String,
    pub road: Rgb,
    pub sidewalk: Rgb,
    pub curb: Rgb,
    pub grass: Rgb,
    pub wall: Rgb,
    pub railing: Rgb,
    pub backdrop: Rgb,
    pub sky: Rgb,
    pub obstacle: Rgb,
}

impl Palette {
    pub fn color(&self, region: Region) -> Rgb {
        match region {
            Region::Sky => self.sky,
            Region::Road => self.road,
            Region::Sidewalk => self.sidewalk,
            Region::Curb => self.curb,
            Region::Grass => self.grass,
            Region::Wall => self.wall,
            Region::Railing => self.railing,
            Region::Backdrop => self.backdrop,
            Region::Obstacle => self.obstacle,
        }
    }

    /// Built-in palettes, by name.
    pub fn builtin(name: &str) -> Result<Palette> {
        let p = |road, sidewalk, curb, grass, wall, railing, backdrop, sky, obstacle| Palette {
            name: name.to_string(),
            road,
            sidewalk,
            curb,
            grass,
            wall,
            railing,
            backdrop,
            sky,
            obstacle,
        };
        Ok(match name {
            // source-style palettes
            "asphalt-gray" => p(
                [0.32, 0.32, 0.34], [0.62, 0.60, 0.56], [0.76, 0.76, 0.74], [0.25, 0.52, 0.22],
                [0.62, 0.33, 0.27], [0.50, 0.50, 0.56], [0.45, 0.50, 0.60], [0.60, 0.78, 0.95],
                [0.80, 0.20, 0.20],
            ),
            "uniform-gray" => p(
                [0.45, 0.45, 0.46], [0.45, 0.45, 0.46], [0.58, 0.58, 0.58], [0.30, 0.55, 0.25],
                [0.55, 0.45, 0.35], [0.40, 0.40, 0.46], [0.50, 0.50, 0.56], [0.70, 0.80, 0.92],
                [0.20, 0.30, 0.80],
            ),
            "dark-tar" => p(
                [0.20, 0.21, 0.24], [0.52, 0.47, 0.40], [0.66, 0.64, 0.60], [0.20, 0.46, 0.20],
                [0.72, 0.66, 0.56], [0.35, 0.35, 0.40], [0.40, 0.42, 0.50], [0.55, 0.70, 0.90],
                [0.85, 0.75, 0.15],
            ),
            // target-style palettes
            "sunlit-sand" => p(
                [0.66, 0.58, 0.44], [0.34, 0.34, 0.36], [0.50, 0.50, 0.50], [0.55, 0.55, 0.30],
                [0.33, 0.33, 0.35], [0.72, 0.72, 0.70], [0.55, 0.50, 0.45], [0.86, 0.80, 0.70],
                [0.20, 0.60, 0.30],
            ),
            "rust-dusk" => p(
                [0.48, 0.32, 0.28], [0.30, 0.30, 0.33], [0.42, 0.40, 0.40], [0.36, 0.36, 0.20],
                [0.28, 0.28, 0.31], [0.62, 0.52, 0.42], [0.35, 0.26, 0.35], [0.80, 0.52, 0.42],
                [0.25, 0.55, 0.65],
            ),
            "pale-concrete" => p(
                [0.70, 0.70, 0.66], [0.70, 0.70, 0.66], [0.82, 0.82, 0.80], [0.42, 0.50, 0.28],
                [0.30, 0.32, 0.30], [0.25, 0.25, 0.25], [0.62, 0.64, 0.66], [0.88, 0.90, 0.92],
                [0.60, 0.15, 0.45],
            ),
            other => return Err(Error::Config(format!("unknown palette '{other}'"))),
        })
    }
}

/// Darkens ground-level surfaces whose world depth falls in a band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShadowBand {
    pub z_start: f64,
    pub length: f64,
    /// Multiplicative luminance factor in `(0, 1]`.
    pub factor: f32,
}

/// Axis-aligned box standing on the road.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxObstacle {
    pub x_center: f64,
    pub z_near: f64,
    pub width: f64,
    pub depth: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    /// Focal length as a fraction of the image width.
    pub focal_scale: f64,
    pub camera_height: f64,
    /// Downward tilt in radians.
    pub pitch: f64,
    pub road_half_width: f64,
    pub sidewalk_height: f64,
    pub sidewalk_width: f64,
    /// Distance of the backdrop wall.
    pub wall_distance: f64,
    pub side_wall_height: f64,
    pub backdrop_height: f64,
    pub background: BackgroundKind,
    pub palette: Palette,
    pub noise_std: f64,
    pub depth_noise_std: f64,
    pub shadow: Option<ShadowBand>,
    pub obstacles: Vec<BoxObstacle>,
    pub seed: u64,
}

const RAILING_HEIGHT: f64 = 1.0;

impl SceneParams {
    /// A plain scene: flat-ish street, walls, default palette.
    pub fn basic(height: usize, width: usize, seed: u64) -> Self {
        Self {
            height,
            width,
            focal_scale: 0.8,
            camera_height: 1.5,
            pitch: 0.1,
            road_half_width: 3.0,
            sidewalk_height: 0.25,
            sidewalk_width: 2.5,
            wall_distance: 40.0,
            side_wall_height: 4.0,
            backdrop_height: 8.0,
            background: BackgroundKind::Wall,
            palette: Palette::builtin("asphalt-gray").expect("builtin"),
            noise_std: 0.02,
            depth_noise_std: 0.0,
            shadow: None,
            obstacles: Vec::new(),
            seed,
        }
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        intrinsics_for(self.height, self.width, self.focal_scale)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 32 || self.width < 32 {
            return Err(Error::Config(format!(
                "scene must be at least 32x32, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.road_half_width > 0.0) {
            return Err(Error::Config("road half-width must be positive".into()));
        }
        if !(self.sidewalk_height >= 0.0) || self.sidewalk_height >= self.camera_height {
            return Err(Error::Config(
                "sidewalk height must be >= 0 and below the camera".into(),
            ));
        }
        let positive = [
            ("focal_scale", self.focal_scale),
            ("camera_height", self.camera_height),
            ("wall_distance", self.wall_distance),
            ("sidewalk_width", self.sidewalk_width),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.noise_std >= 0.0 && self.depth_noise_std >= 0.0) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        Ok(())
    }
}

pub fn intrinsics_for(height: usize, width: usize, focal_scale: f64) -> CameraIntrinsics {
    let f = focal_scale * width as f64;
    CameraIntrinsics {
        fx: f,
        fy: f,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
    }
}

/// A rendered scene together with its per-pixel surface categories.
#[derive(Debug, Clone)]
pub struct RenderedScene {
    pub sample: Sample,
    pub regions: Array2<Region>,
}

struct Hit {
    t: f64,
    region: Region,
    ground: bool,
}

struct Tracer<'a> {
    p: &'a SceneParams,
}

impl Tracer<'_> {
    fn nearest(&self, d: [f64; 3]) -> Option<(Hit, [f64; 3])> {
        let p = self.p;
        let ground_y = p.camera_height;
        let top_y = p.camera_height - p.sidewalk_height;
        let r = p.road_half_width;
        let outer = r + p.sidewalk_width;
        let far = p.wall_distance;
        let mut best: Option<Hit> = None;
        let mut consider = |t: f64, region: Region, ground: bool| {
            if t > 1e-9 && best.as_ref().is_none_or(|b| t < b.t) {
                best = Some(Hit { t, region, ground });
            }
        };

        // horizontal planes
        if d[1] > 0.0 {
            let t = ground_y / d[1];
            let (x, z) = (t * d[0], t * d[2]);
            if z < far {
                if x.abs() <= r {
                    consider(t, Region::Road, true);
                } else if x.abs() >= outer {
                    consider(t, Region::Grass, true);
                }
            }
            let t = top_y / d[1];
            let (x, z) = (t * d[0], t * d[2]);
            if z < far && x.abs() > r && x.abs() < outer {
                consider(t, Region::Sidewalk, true);
            }
        }

        // vertical planes x = const
        if d[0].abs() > 1e-12 {
            let side = d[0].signum();
            let mut vertical = |x_plane: f64, y_lo: f64, y_hi: f64, region: Region| {
                let t = side * x_plane / d[0];
                let (y, z) = (t * d[1], t * d[2]);
                if z < far && y >= y_lo && y <= y_hi {
                    consider(t, region, false);
                }
            };
            if p.sidewalk_height > 0.0 {
                vertical(r, top_y, ground_y, Region::Curb);
                vertical(outer, top_y, ground_y, Region::Curb);
            }
            match p.background {
                BackgroundKind::Wall => vertical(outer, top_y - p.side_wall_height, top_y, Region::Wall),
                BackgroundKind::Railing => vertical(outer, top_y - RAILING_HEIGHT, top_y, Region::Railing),
                BackgroundKind::Grass => {}
            }
        }

        // backdrop
        if d[2] > 0.0 {
            let t = far / d[2];
            let y = t * d[1];
            if y >= ground_y - p.backdrop_height {
                consider(t, Region::Backdrop, false);
            }
        }

        for b in &p.obstacles {
            if let Some(t) = slab(d, b, ground_y) {
                consider(t, Region::Obstacle, false);
            }
        }

        best.map(|h| {
            let point = [h.t * d[0], h.t * d[1], h.t * d[2]];
            (h, point)
        })
    }
}

/// Ray/box intersection by the slab method; returns the entry distance.
fn slab(d: [f64; 3], b: &BoxObstacle, ground_y: f64) -> Option<f64> {
    let lo = [b.x_center - b.width / 2.0, ground_y - b.height, b.z_near];
    let hi = [b.x_center + b.width / 2.0, ground_y, b.z_near + b.depth];
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        if d[a].abs() < 1e-12 {
            if 0.0 < lo[a] || 0.0 > hi[a] {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = (lo[a] / d[a], hi[a] / d[a]);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 > t1 {
            return None;
        }
    }
    (t0 > 0.0).then_some(t0)
}

/// Renders depth, label, normals and RGB for one parameter set.
pub fn render_scene(params: &SceneParams) -> Result<RenderedScene> {
    params.validate()?;
    let k = params.intrinsics();
    let (h, w) = (params.height, params.width);
    let (sin_p, cos_p) = params.pitch.sin_cos();
    let mut depth = Array2::<f64>::zeros((h, w));
    let mut regions = Array2::from_elem((h, w), Region::Sky);
    let mut shade = Array2::<f32>::from_elem((h, w), 1.0);
    let tracer = Tracer { p: params };
    for row in 0..h {
        for col in 0..w {
            let c = k.ray(col as f64, row as f64);
            // camera frame -> world frame (y down, level with the ground)
            let d = [c[0], cos_p * c[1] + sin_p * c[2], -sin_p * c[1] + cos_p * c[2]];
            if let Some((hit, point)) = tracer.nearest(d) {
                // camera rays have unit z, so the ray parameter is the depth
                depth[[row, col]] = hit.t;
                regions[[row, col]] = hit.region;
                if let (Some(s), true) = (params.shadow, hit.ground) {
                    if point[2] >= s.z_start && point[2] <= s.z_start + s.length {
                        shade[[row, col]] = s.factor;
                    }
                }
            }
        }
    }
    if !regions.iter().any(|&r| r == Region::Road) {
        return Err(Error::Generation(format!(
            "no road visible (pitch {:.3} rad, camera height {:.2} m)",
            params.pitch, params.camera_height
        )));
    }

    let mut noise_rng = rng::stream(params.seed, 0);
    if params.depth_noise_std > 0.0 {
        let n = Normal::new(0.0, params.depth_noise_std).map_err(|e| Error::Config(e.to_string()))?;
        for d in depth.iter_mut().filter(|d| **d > 0.0) {
            *d = (*d + n.sample(&mut noise_rng)).max(1e-3);
        }
    }
    let pixel_noise = Normal::new(0.0, params.noise_std as f32).map_err(|e| Error::Config(e.to_string()))?;
    let mut rgb = Array3::<f32>::zeros((3, h, w));
    for row in 0..h {
        for col in 0..w {
            let base = params.palette.color(regions[[row, col]]);
            let s = shade[[row, col]];
            for (ch, b) in base.iter().enumerate() {
                rgb[[ch, row, col]] = (b * s + pixel_noise.sample(&mut noise_rng)).clamp(0.0, 1.0);
            }
        }
    }

    let depth = DepthMap::from_meters(depth)?;
    let normals = geometry::surface_normals(&depth, &k)?;
    let label = regions.mapv(|r| u8::from(r == Region::Road));
    Ok(RenderedScene {
        sample: Sample {
            id: format!("scene-{:016x}", params.seed),
            rgb,
            depth,
            intrinsics: k,
            label: Some(label),
            normals: Some(normals),
        },
        regions,
    })
}

pub fn generate_scene(params: &SceneParams) -> Result<Sample> {
    render_scene(params).map(|r| r.sample)
}

/// Inclusive-exclusive sampling range, written `[min, max]` in JSON.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span(pub f64, pub f64);

impl Span {
    fn sample(self, rng: &mut impl Rng) -> f64 {
        if self.1 <= self.0 {
            self.0
        } else {
            rng.random_range(self.0..self.1)
        }
    }
}

/// A palette given either by built-in name or inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PaletteSpec {
    Named(String),
    Inline(Palette),
}

impl PaletteSpec {
    pub fn resolve(&self) -> Result<Palette> {
        match self {
            PaletteSpec::Named(n) => Palette::builtin(n),
            PaletteSpec::Inline(p) => Ok(p.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub role: SplitRole,
    pub count: usize,
}

fn default_true() -> bool {
    true
}

/// Distribution over scenes for one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub name: String,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub focal_scale: f64,
    pub camera_height: Span,
    pub pitch: Span,
    pub road_half_width: Span,
    pub sidewalk_height: Span,
    pub sidewalk_width: Span,
    pub wall_distance: Span,
    pub side_wall_height: Span,
    pub backdrop_height: Span,
    pub noise_std: Span,
    #[serde(default)]
    pub depth_noise_std: f64,
    pub palettes: Vec<PaletteSpec>,
    /// Per-scene uniform jitter added to every palette channel.
    #[serde(default)]
    pub color_jitter: f64,
    pub backgrounds: Vec<BackgroundKind>,
    #[serde(default)]
    pub shadow_probability: f64,
    #[serde(default)]
    pub obstacle_probability: f64,
    pub splits: Vec<SplitSpec>,
    /// Write target-train labels only to the held-out folder.
    #[serde(default = "default_true")]
    pub withhold_target_labels: bool,
    /// Also write the 8-bit normal cache.
    #[serde(default)]
    pub write_normals: bool,
}

impl DomainConfig {
    fn shared_geometry(name: &str, seed: u64, height: usize, width: usize) -> Self {
        Self {
            name: name.to_string(),
            seed,
            height,
            width,
            focal_scale: 0.8,
            camera_height: Span(1.4, 1.7),
            pitch: Span(0.06, 0.14),
            road_half_width: Span(2.0, 3.5),
            sidewalk_height: Span(0.18, 0.35),
            sidewalk_width: Span(1.5, 3.0),
            wall_distance: Span(30.0, 60.0),
            side_wall_height: Span(2.5, 6.0),
            backdrop_height: Span(4.0, 12.0),
            noise_std: Span(0.02, 0.04),
            depth_noise_std: 0.0,
            palettes: Vec::new(),
            color_jitter: 0.03,
            backgrounds: Vec::new(),
            shadow_probability: 0.0,
            obstacle_probability: 0.2,
            splits: Vec::new(),
            withhold_target_labels: true,
            write_normals: false,
        }
    }

    /// Labeled synthetic source domain.
    pub fn source(seed: u64, height: usize, width: usize, count: usize) -> Self {
        Self {
            palettes: ["asphalt-gray", "uniform-gray", "dark-tar"]
                .map(|n| PaletteSpec::Named(n.into()))
                .to_vec(),
            backgrounds: vec![BackgroundKind::Wall, BackgroundKind::Grass],
            splits: vec![SplitSpec { role: SplitRole::SourceTrain, count }],
            ..Self::shared_geometry("source", seed, height, width)
        }
    }

    /// Target domain: same camera and layout ranges, different appearance.
    pub fn target(seed: u64, height: usize, width: usize, train: usize, eval: usize) -> Self {
        Self {
            palettes: ["sunlit-sand", "rust-dusk", "pale-concrete"]
                .map(|n| PaletteSpec::Named(n.into()))
                .to_vec(),
            backgrounds: vec![BackgroundKind::Wall, BackgroundKind::Railing, BackgroundKind::Grass],
            noise_std: Span(0.04, 0.07),
            shadow_probability: 0.5,
            splits: vec![
                SplitSpec { role: SplitRole::TargetTrain, count: train },
                SplitSpec { role: SplitRole::TargetEval, count: eval },
            ],
            ..Self::shared_geometry("target", seed, height, width)
        }
    }

    pub fn total_count(&self) -> usize {
        self.splits.iter().map(|s| s.count).sum()
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        intrinsics_for(self.height, self.width, self.focal_scale)
    }

    /// Draws the parameters of one scene from this distribution.
    pub fn sample_params(&self, seed: u64) -> Result<SceneParams> {
        if self.palettes.is_empty() || self.backgrounds.is_empty() {
            return Err(Error::Config(format!(
                "domain '{}' needs at least one palette and one background",
                self.name
            )));
        }
        let mut rng = rng::stream(seed, 1);
        let mut palette = self
            .palettes
            .choose(&mut rng)
            .expect("non-empty")
            .resolve()?;
        if self.color_jitter > 0.0 {
            let j = self.color_jitter as f32;
            let shift: [f32; 3] = std::array::from_fn(|_| rng.random_range(-j..=j));
            for c in [
                &mut palette.road,
                &mut palette.sidewalk,
                &mut palette.curb,
                &mut palette.grass,
                &mut palette.wall,
                &mut palette.railing,
                &mut palette.backdrop,
                &mut palette.obstacle,
            ] {
                for ch in 0..3 {
                    c[ch] = (c[ch] + shift[ch]).clamp(0.0, 1.0);
                }
            }
        }
        let background = *self.backgrounds.choose(&mut rng).expect("non-empty");
        let road_half_width = self.road_half_width.sample(&mut rng);
        let shadow = (rng.random::<f64>() < self.shadow_probability).then(|| ShadowBand {
            z_start: rng.random_range(4.0..15.0),
            length: rng.random_range(2.0..6.0),
            factor: rng.random_range(0.35..0.6),
        });
        let obstacles = if rng.random::<f64>() < self.obstacle_probability {
            let width = rng.random_range(0.8..1.8);
            vec![BoxObstacle {
                x_center: rng.random_range(-road_half_width + width / 2.0..road_half_width - width / 2.0).clamp(-road_half_width, road_half_width),
                z_near: rng.random_range(8.0..20.0),
                width,
                depth: rng.random_range(1.0..3.0),
                height: rng.random_range(0.8..2.0),
            }]
        } else {
            Vec::new()
        };
        Ok(SceneParams {
            height: self.height,
            width: self.width,
            focal_scale: self.focal_scale,
            camera_height: self.camera_height.sample(&mut rng),
            pitch: self.pitch.sample(&mut rng),
            road_half_width,
            sidewalk_height: self.sidewalk_height.sample(&mut rng),
            sidewalk_width: self.sidewalk_width.sample(&mut rng),
            wall_distance: self.wall_distance.sample(&mut rng),
            side_wall_height: self.side_wall_height.sample(&mut rng),
            backdrop_height: self.backdrop_height.sample(&mut rng),
            background,
            palette,
            noise_std: self.noise_std.sample(&mut rng),
            depth_noise_std: self.depth_noise_std,
            shadow,
            obstacles,
            seed,
        })
    }

    /// Renders every sample of this domain in manifest order, without
    /// touching the disk. Each entry carries its split role and the seed it
    /// was drawn from.
    pub fn render_all(&self) -> Result<Vec<(SplitRole, u64, RenderedScene)>> {
        let mut out = Vec::with_capacity(self.total_count());
        let mut counter = 0u64;
        for split in &self.splits {
            for i in 0..split.count {
                let (seed, mut scene) = self.render_indexed(counter)?;
                scene.sample.id = format!("{}-{i:04}", split.role);
                out.push((split.role, seed, scene));
                counter += 1;
            }
        }
        Ok(out)
    }

    fn render_indexed(&self, counter: u64) -> Result<(u64, RenderedScene)> {
        // a few redraws cover parameter combinations that hide the road
        let mut last = None;
        for attempt in 0..8u64 {
            let seed = rng::derive_seed(rng::derive_seed(self.seed, counter), attempt);
            match render_scene(&self.sample_params(seed)?) {
                Ok(scene) => return Ok((seed, scene)),
                Err(e @ Error::Generation(_)) => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

/// Removes everything written so far if generation fails midway.
struct Cleanup {
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
    armed: bool,
}

impl Drop for Cleanup {
    fn drop(&mut self) {
        if !self.armed {
            return;
        }
        for f in &self.files {
            let _ = std::fs::remove_file(f);
        }
        for d in self.dirs.iter().rev() {
            let _ = std::fs::remove_dir(d);
        }
    }
}

/// Writes one domain as a dataset directory and returns its manifest.
pub fn generate_domain(cfg: &DomainConfig, out_dir: &Path) -> Result<Manifest> {
    let mut guard = Cleanup {
        files: Vec::new(),
        dirs: Vec::new(),
        armed: true,
    };
    let withheld = cfg.withhold_target_labels
        && cfg.splits.iter().any(|s| s.role == SplitRole::TargetTrain && s.count > 0);
    let dirs = [
        ("", true),
        ("rgb", true),
        ("depth", true),
        ("label", true),
        ("label_heldout", withheld),
        ("sn", cfg.write_normals),
    ];
    for d in dirs.iter().filter(|d| d.1).map(|d| d.0) {
        let dir = out_dir.join(d);
        if !dir.exists() {
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            guard.dirs.push(dir);
        }
    }
    let k = cfg.intrinsics();
    k.validate_for(cfg.height, cfg.width)?;

    let mut entries = Vec::with_capacity(cfg.total_count());
    for (role, seed, scene) in cfg.render_all()? {
        let s = &scene.sample;
        let rgb = format!("rgb/{}.png", s.id);
        let depth = format!("depth/{}.png", s.id);
        guard.files.push(out_dir.join(&rgb));
        png::write_rgb(&out_dir.join(&rgb), &s.rgb)?;
        guard.files.push(out_dir.join(&depth));
        png::write_gray16(&out_dir.join(&depth), &s.depth.to_millimeters())?;

        let label_rel = if role == SplitRole::TargetTrain && cfg.withhold_target_labels {
            format!("label_heldout/{}.png", s.id)
        } else {
            format!("label/{}.png", s.id)
        };
        guard.files.push(out_dir.join(&label_rel));
        png::write_mask(&out_dir.join(&label_rel), s.label.as_ref().expect("rendered label"))?;
        let (label, heldout_label) = if label_rel.starts_with("label_heldout") {
            (None, Some(label_rel))
        } else {
            (Some(label_rel), None)
        };

        let normals = if cfg.write_normals {
            // the cache must describe the depth that is on disk
            let stored = DepthMap::from_millimeters(&s.depth.to_millimeters());
            let sn = geometry::surface_normals(&stored, &k)?;
            let rel = format!("sn/{}.png", s.id);
            guard.files.push(out_dir.join(&rel));
            png::write_rgb8(&out_dir.join(&rel), &sn.to_rgb8())?;
            Some(rel)
        } else {
            None
        };
        entries.push(ManifestEntry {
            id: s.id.clone(),
            role,
            seed: Some(seed),
            rgb,
            depth,
            label,
            heldout_label,
            normals,
        });
    }

    let manifest = Manifest {
        domain: cfg.name.clone(),
        seed: cfg.seed,
        height: cfg.height,
        width: cfg.width,
        samples: entries,
    };
    guard.files.push(out_dir.join(crate::dataio::layout::INTRINSICS_FILE));
    write_intrinsics(out_dir, &k)?;
    guard.files.push(out_dir.join(crate::dataio::layout::MANIFEST_FILE));
    manifest.write(out_dir)?;
    guard.armed = false;
    Ok(manifest)
}

/// Top-level `gen-data` configuration: one entry per domain, each written to
/// `<out>/<name>/`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub domains: Vec<DomainConfig>,
}

impl GenConfig {
    /// Source and target domains with the given split sizes.
    pub fn two_domain(seed: u64, size: usize, source: usize, target_train: usize, target_eval: usize) -> Self {
        Self {
            domains: vec![
                DomainConfig::source(rng::derive_seed(seed, 0), size, size, source),
                DomainConfig::target(rng::derive_seed(seed, 1), size, size, target_train, target_eval),
            ],
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

pub fn generate_dataset(cfg: &GenConfig, out_dir: &Path) -> Result<Vec<Manifest>> {
    let mut names: Vec<&str> = cfg.domains.iter().map(|d| d.name.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    if names.len() != cfg.domains.len() {
        return Err(Error::Config("domain names must be unique".into()));
    }
    cfg.domains
        .iter()
        .map(|d| generate_domain(d, &out_dir.join(&d.name)))
        .collect()
}
