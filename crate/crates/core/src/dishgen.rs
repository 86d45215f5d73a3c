//! Procedural Petri-dish scenes with pixel-exact ground truth.
//!
//! Scenes reproduce the hard parts of real plates: strong class imbalance,
//! touching colonies, dark lysis halos around bvg+ colonies, and bright LED
//! reflections near the rim of the agar.
//!
//! Palette (8-bit RGB): outside the dish [`OUTSIDE_COLOR`], blood agar
//! [`AGAR_COLOR`] (per-scene jitter ±8), colony bodies [`COLONY_COLOR`]
//! (per-colony brightness jitter ±10 %), halos darken the agar by up to
//! [`HALO_DARKENING`], reflections blend towards white.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::{count_colonies, ColonyCounts};
use crate::mask::{Class, ColonyKind, LabelMask};
use crate::netpbm::{self, RgbImage};
use crate::seeds::derive_seed;

pub const REFERENCE_CANVAS: usize = 480;
pub const OUTSIDE_COLOR: [f64; 3] = [18.0, 18.0, 22.0];
pub const AGAR_COLOR: [f64; 3] = [150.0, 30.0, 34.0];
pub const COLONY_COLOR: [f64; 3] = [224.0, 206.0, 172.0];
pub const HALO_DARKENING: f64 = 0.5;
/// Minimum centre distance margin beyond `r1 + r2` that guarantees two
/// colonies produce no border pixels.
pub const SEPARATION_MARGIN: f64 = 3.0;
const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// No touching colonies, no reflections, low noise.
    Easy,
    Realistic,
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "easy" => Ok(Preset::Easy),
            "realistic" => Ok(Preset::Realistic),
            other => Err(format!("{other} (must be easy or realistic)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub canvas: usize,
    pub lambda_plus: f64,
    pub lambda_minus: f64,
    /// Colony radius range in pixels at the 480 px reference scale.
    pub radius_range: (f64, f64),
    /// Lower bound on the scaled radius.
    pub min_radius: f64,
    /// Halo radius as a multiple of the colony radius.
    pub halo_ratio: (f64, f64),
    pub p_touch: f64,
    /// Standard deviation of additive pixel noise, in 8-bit units.
    pub noise: f64,
    pub reflections: (usize, usize),
    pub preset: Preset,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self::realistic(REFERENCE_CANVAS)
    }
}

impl GeneratorParams {
    pub fn realistic(canvas: usize) -> Self {
        Self {
            canvas,
            lambda_plus: 20.357,
            lambda_minus: 4.726,
            radius_range: (4.0, 12.0),
            min_radius: 2.0,
            halo_ratio: (1.5, 2.0),
            p_touch: 0.3,
            noise: 6.0,
            reflections: (2, 4),
            preset: Preset::Realistic,
        }
    }

    pub fn easy(canvas: usize) -> Self {
        Self {
            p_touch: 0.0,
            noise: 2.0,
            reflections: (0, 0),
            preset: Preset::Easy,
            ..Self::realistic(canvas)
        }
    }

    pub fn for_preset(preset: Preset, canvas: usize) -> Self {
        match preset {
            Preset::Easy => Self::easy(canvas),
            Preset::Realistic => Self::realistic(canvas),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.canvas < 8 {
            return Err(Error::config("canvas", format!("{} (must be at least 8)", self.canvas)));
        }
        if !(self.lambda_plus > 0.0) || !(self.lambda_minus > 0.0) {
            return Err(Error::config("lambda", "expected colony counts must be positive"));
        }
        let (lo, hi) = self.radius_range;
        if !(lo > 0.0 && hi >= lo) || !(self.min_radius > 0.0) {
            return Err(Error::config("radius_range", format!("({lo}, {hi}) must be positive and ordered")));
        }
        if !(self.halo_ratio.0 > 1.0 && self.halo_ratio.1 >= self.halo_ratio.0) {
            return Err(Error::config("halo_ratio", "must exceed 1 and be ordered"));
        }
        if !(0.0..=1.0).contains(&self.p_touch) {
            return Err(Error::config("p_touch", "must lie in [0, 1]"));
        }
        if !(self.noise >= 0.0) || self.reflections.0 > self.reflections.1 {
            return Err(Error::config("noise", "noise must be nonnegative and reflection range ordered"));
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        self.canvas as f64 / REFERENCE_CANVAS as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Colony {
    /// Centre (x, y) in pixel coordinates; pixel `(col, row)` covers
    /// `[col, col + 1) x [row, row + 1)`.
    pub center: [f64; 2],
    pub radius: f64,
    pub kind: ColonyKind,
    pub halo_radius: Option<f64>,
    pub intensity_jitter: f64,
}

impl Colony {
    pub fn outer_radius(&self) -> f64 {
        self.halo_radius.unwrap_or(self.radius)
    }

    /// Whether the point `(px, py)` lies inside the colony disc.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - self.center[0], py - self.center[1]);
        dx * dx + dy * dy <= self.radius * self.radius
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reflection {
    pub start_angle: f64,
    pub span: f64,
    /// Distance of the arc from the dish centre.
    pub radial_position: f64,
    pub width: f64,
    pub brightness: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DishScene {
    pub height: usize,
    pub width: usize,
    pub dish_center: [f64; 2],
    pub dish_radius: f64,
    pub agar_color: [f64; 3],
    pub noise: f64,
    pub colonies: Vec<Colony>,
    pub reflections: Vec<Reflection>,
    pub seed: u64,
    /// Colonies that could not be placed.
    pub skipped: usize,
}

impl DishScene {
    pub fn count(&self, kind: ColonyKind) -> usize {
        self.colonies.iter().filter(|c| c.kind == kind).count()
    }

    /// Pairs of colonies close enough to produce border pixels.
    pub fn touching_pairs(&self) -> usize {
        let mut n = 0;
        for (i, a) in self.colonies.iter().enumerate() {
            for b in &self.colonies[i + 1..] {
                if distance(a.center, b.center) <= a.radius + b.radius + SEPARATION_MARGIN {
                    n += 1;
                }
            }
        }
        n
    }
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Samples a scene. Colony counts are Poisson; with probability `p_touch` a
/// colony is placed against an existing one (centre distance 0.8 to 1.1 times
/// the radius sum), otherwise it is rejection-sampled clear of all others.
pub fn sample_scene(params: &GeneratorParams, seed: u64) -> Result<DishScene> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = params.canvas as f64;
    let scale = params.scale();
    let dish_radius = 0.46 * size;
    let dish_center = [
        size / 2.0 + rng.random_range(-0.01..=0.01) * size,
        size / 2.0 + rng.random_range(-0.01..=0.01) * size,
    ];
    let agar_color = AGAR_COLOR.map(|c| c + rng.random_range(-8.0..=8.0));

    let n_plus = Poisson::new(params.lambda_plus).expect("positive rate").sample(&mut rng) as usize;
    let n_minus = Poisson::new(params.lambda_minus).expect("positive rate").sample(&mut rng) as usize;
    let mut kinds: Vec<ColonyKind> = std::iter::repeat_n(ColonyKind::BvgPlus, n_plus)
        .chain(std::iter::repeat_n(ColonyKind::BvgMinus, n_minus))
        .collect();
    kinds.shuffle(&mut rng);

    let inside = |c: [f64; 2], outer: f64| distance(c, dish_center) + outer <= dish_radius - 2.0;
    let mut colonies: Vec<Colony> = Vec::with_capacity(kinds.len());
    let mut skipped = 0;
    for kind in kinds {
        let (lo, hi) = params.radius_range;
        let radius = (rng.random_range(lo..=hi) * scale).max(params.min_radius);
        let halo_radius = match kind {
            ColonyKind::BvgPlus => Some(radius * rng.random_range(params.halo_ratio.0..=params.halo_ratio.1)),
            ColonyKind::BvgMinus => None,
        };
        let outer = halo_radius.unwrap_or(radius);
        let intensity_jitter = rng.random_range(-0.1..=0.1);
        let touch = !colonies.is_empty() && rng.random::<f64>() < params.p_touch;
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let (center, partner) = if touch {
                let p = rng.random_range(0..colonies.len());
                let d = rng.random_range(0.8..=1.1) * (radius + colonies[p].radius);
                let a = rng.random_range(0.0..TAU);
                let c = colonies[p].center;
                ([c[0] + d * a.cos(), c[1] + d * a.sin()], Some(p))
            } else {
                let r = dish_radius * rng.random::<f64>().sqrt();
                let a = rng.random_range(0.0..TAU);
                ([dish_center[0] + r * a.cos(), dish_center[1] + r * a.sin()], None)
            };
            if !inside(center, outer) {
                continue;
            }
            let clear = colonies.iter().enumerate().all(|(j, o)| {
                let d = distance(center, o.center);
                if Some(j) == partner {
                    true
                } else if touch {
                    d > radius + o.radius
                } else {
                    d > radius + o.radius + SEPARATION_MARGIN
                }
            });
            if clear {
                placed = Some(center);
                break;
            }
        }
        match placed {
            Some(center) => colonies.push(Colony {
                center,
                radius,
                kind,
                halo_radius,
                intensity_jitter,
            }),
            None => skipped += 1,
        }
    }

    let n_refl = rng.random_range(params.reflections.0..=params.reflections.1);
    let reflections = (0..n_refl)
        .map(|_| Reflection {
            start_angle: rng.random_range(0.0..TAU),
            span: rng.random_range(0.25..=0.7),
            radial_position: dish_radius * rng.random_range(0.90..=0.97),
            width: (0.008 * size).max(1.0),
            brightness: rng.random_range(0.5..=0.9),
        })
        .collect();

    Ok(DishScene {
        height: params.canvas,
        width: params.canvas,
        dish_center,
        dish_radius,
        agar_color,
        noise: params.noise,
        colonies,
        reflections,
        seed,
        skipped,
    })
}

fn coverage(radius: f64, d: f64) -> f64 {
    (radius - d + 0.5).clamp(0.0, 1.0)
}

fn bbox(center: [f64; 2], r: f64, h: usize, w: usize) -> (usize, usize, usize, usize) {
    let x0 = (center[0] - r - 1.0).floor().max(0.0) as usize;
    let y0 = (center[1] - r - 1.0).floor().max(0.0) as usize;
    let x1 = ((center[0] + r + 1.0).ceil().max(0.0) as usize).min(w);
    let y1 = ((center[1] + r + 1.0).ceil().max(0.0) as usize).min(h);
    (x0, y0, x1, y1)
}

/// Renders the scene to 8-bit RGB. Pixel noise is drawn from a stream derived
/// from the scene seed, so rendering is a pure function of the scene.
pub fn render_image(scene: &DishScene) -> RgbImage {
    let (h, w) = (scene.height, scene.width);
    let mut buf = vec![[0.0f64; 3]; h * w];
    let r_dish = scene.dish_radius;
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let d = distance([px, py], scene.dish_center);
            let a = coverage(r_dish, d);
            let shade = 1.0 - 0.12 * (d / r_dish).min(1.0).powi(2);
            buf[y * w + x] = std::array::from_fn(|c| OUTSIDE_COLOR[c] + a * (scene.agar_color[c] * shade - OUTSIDE_COLOR[c]));
        }
    }
    for col in &scene.colonies {
        let Some(halo) = col.halo_radius else { continue };
        let (x0, y0, x1, y1) = bbox(col.center, halo, h, w);
        for y in y0..y1 {
            for x in x0..x1 {
                let d = distance([x as f64 + 0.5, y as f64 + 0.5], col.center);
                let k = 1.0 - HALO_DARKENING * coverage(halo, d);
                for v in &mut buf[y * w + x] {
                    *v *= k;
                }
            }
        }
    }
    for col in &scene.colonies {
        let (x0, y0, x1, y1) = bbox(col.center, col.radius, h, w);
        for y in y0..y1 {
            for x in x0..x1 {
                let d = distance([x as f64 + 0.5, y as f64 + 0.5], col.center);
                let a = coverage(col.radius, d);
                if a == 0.0 {
                    continue;
                }
                let shade = (1.0 + col.intensity_jitter) * (1.0 - 0.12 * (d / col.radius).min(1.0).powi(2));
                let p = &mut buf[y * w + x];
                for c in 0..3 {
                    p[c] += a * (COLONY_COLOR[c] * shade - p[c]);
                }
            }
        }
    }
    for refl in &scene.reflections {
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 + 0.5 - scene.dish_center[0], y as f64 + 0.5 - scene.dish_center[1]);
                let radial = ((dx * dx + dy * dy).sqrt() - refl.radial_position) / refl.width;
                if radial.abs() > 3.0 {
                    continue;
                }
                let along = (dy.atan2(dx) - refl.start_angle).rem_euclid(TAU);
                if along > refl.span {
                    continue;
                }
                let taper = (PI * along / refl.span).sin();
                let k = refl.brightness * taper * (-radial * radial).exp();
                for v in &mut buf[y * w + x] {
                    *v += k * (255.0 - *v);
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    rng.set_stream(1);
    let noise = Normal::new(0.0, scene.noise.max(0.0)).expect("finite sigma");
    let data = buf
        .iter()
        .flat_map(|p| p.iter())
        .map(|&v| {
            let n = if scene.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (v + n).round().clamp(0.0, 255.0) as u8
        })
        .collect();
    RgbImage::new(h, w, data).expect("size")
}

/// Ground-truth labels. A pixel belongs to a colony when its centre lies in
/// the colony disc; it is `border` when it lies within Chebyshev distance 1 of
/// the discs of two or more colonies. Halos are background.
pub fn render_mask(scene: &DishScene) -> LabelMask {
    let (h, w) = (scene.height, scene.width);
    let mut mask = LabelMask::background(h, w);
    let mut cover = vec![0u8; h * w];
    for col in &scene.colonies {
        let (x0, y0, x1, y1) = bbox(col.center, col.radius + 1.0, h, w);
        let (bw, bh) = (x1 - x0, y1 - y0);
        let mut disc = vec![false; bw * bh];
        for y in y0..y1 {
            for x in x0..x1 {
                if col.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    disc[(y - y0) * bw + (x - x0)] = true;
                    mask.set(y, x, col.kind.class());
                }
            }
        }
        for y in y0..y1 {
            for x in x0..x1 {
                let (ly, lx) = (y - y0, x - x0);
                let near = (ly.saturating_sub(1)..(ly + 2).min(bh))
                    .any(|yy| (lx.saturating_sub(1)..(lx + 2).min(bw)).any(|xx| disc[yy * bw + xx]));
                if near {
                    cover[y * w + x] = cover[y * w + x].saturating_add(1);
                }
            }
        }
    }
    for (i, &c) in cover.iter().enumerate() {
        if c >= 2 {
            mask.set(i / w, i % w, Class::Border);
        }
    }
    mask
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneCounts {
    pub bvg_plus: usize,
    pub bvg_minus: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: usize,
    pub image: String,
    pub mask: String,
    pub scene: String,
    pub seed: u64,
    /// Connected-component counts of the mask (the counting ground truth).
    pub counts: ColonyCounts,
    pub scene_counts: SceneCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub params: GeneratorParams,
    pub canvas: [usize; 2],
    /// Aggregate fraction of background, bvg+, bvg-, border pixels.
    pub pixel_fractions: [f64; 4],
    pub images: Vec<ImageRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn image_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, &[index as u64])
}

/// Writes `image_NNN.ppm`, `mask_NNN.pgm`, `scene_NNN.json` for `n` scenes and
/// a `manifest.json` describing them.
pub fn generate_dataset(params: &GeneratorParams, n: usize, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::config("n", "must be at least 1"));
    }
    params.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut images = Vec::with_capacity(n);
    let mut hist = [0usize; 4];
    for id in 0..n {
        let s = image_seed(seed, id);
        let scene = sample_scene(params, s)?;
        let image = render_image(&scene);
        let mask = render_mask(&scene);
        for (acc, v) in hist.iter_mut().zip(mask.histogram()) {
            *acc += v;
        }
        let rec = ImageRecord {
            id,
            image: format!("image_{id:03}.ppm"),
            mask: format!("mask_{id:03}.pgm"),
            scene: format!("scene_{id:03}.json"),
            seed: s,
            counts: count_colonies(&mask),
            scene_counts: SceneCounts {
                bvg_plus: scene.count(ColonyKind::BvgPlus),
                bvg_minus: scene.count(ColonyKind::BvgMinus),
                skipped: scene.skipped,
            },
        };
        netpbm::write_ppm(&out_dir.join(&rec.image), &image)?;
        netpbm::write_pgm(&out_dir.join(&rec.mask), &mask)?;
        write_json(&out_dir.join(&rec.scene), &scene)?;
        images.push(rec);
    }
    let total: usize = hist.iter().sum();
    let manifest = DatasetManifest {
        seed,
        params: params.clone(),
        canvas: [params.canvas, params.canvas],
        pixel_fractions: hist.map(|v| v as f64 / total as f64),
        images,
    };
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}
