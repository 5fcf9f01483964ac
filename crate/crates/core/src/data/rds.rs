//! Random-dot stereograms over piecewise-planar layered scenes.
//!
//! Every layer carries its own dot texture defined in left-image coordinates
//! (extended past the right border so background is available wherever the
//! right view needs it). The left view shows, per pixel, the covering layer
//! with the largest disparity. The right view is produced by forward-warping
//! every layer sample `(u, v)` to column `u - round(d)` through a
//! disparity z-buffer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Image};

/// Planar disparity `d(u, v) = base + slope_u * u + slope_v * v` in left-image pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisparityPlane {
    pub base: f64,
    pub slope_u: f64,
    pub slope_v: f64,
}

impl DisparityPlane {
    pub fn flat(base: f64) -> Self {
        Self {
            base,
            slope_u: 0.0,
            slope_v: 0.0,
        }
    }

    #[inline]
    pub fn at(&self, u: f64, v: f64) -> f64 {
        self.base + self.slope_u * u + self.slope_v * v
    }
}

/// Support of a foreground layer, in left-image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerShape {
    /// Half-open box `[u0, u1) × [v0, v1)`.
    Rect { u0: i64, v0: i64, u1: i64, v1: i64 },
    Disc { cu: f64, cv: f64, radius: f64 },
}

impl LayerShape {
    #[inline]
    pub fn contains(&self, u: i64, v: i64) -> bool {
        match *self {
            LayerShape::Rect { u0, v0, u1, v1 } => u >= u0 && u < u1 && v >= v0 && v < v1,
            LayerShape::Disc { cu, cv, radius } => {
                let du = u as f64 - cu;
                let dv = v as f64 - cv;
                du * du + dv * dv <= radius * radius
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneLayer {
    pub shape: LayerShape,
    pub plane: DisparityPlane,
}

/// Layered scene description: a background plane covering everything plus
/// foreground layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub background: DisparityPlane,
    pub layers: Vec<SceneLayer>,
    /// Side of the square dots, in pixels.
    pub dot_size: usize,
}

impl SceneSpec {
    /// Zero-layer scene with constant disparity.
    pub fn flat(disparity: f64) -> Self {
        Self {
            background: DisparityPlane::flat(disparity),
            layers: Vec::new(),
            dot_size: 1,
        }
    }

    /// Draws a random layered scene with foreground layers separated from
    /// everything behind them by at least `params.min_layer_gap` pixels.
    pub fn random(
        rng: &mut impl Rng,
        width: usize,
        height: usize,
        max_disp: usize,
        params: &SceneParams,
    ) -> Self {
        let w = width as f64;
        let h = height as f64;
        let top = max_disp as f64 - 1.0;
        let slope = params.max_slope;
        let mut background = DisparityPlane {
            base: rng.random_range(0.0..=params.max_background_disp.min(top * 0.5)),
            slope_u: rng.random_range(-slope..=slope),
            slope_v: rng.random_range(-slope..=slope),
        };
        // Keep the plane non-negative over the extended texture domain.
        let min_bg = plane_extrema(&background, w + max_disp as f64, h).0;
        if min_bg < 0.0 {
            // Small margin: the shifted corners must not round below zero.
            background.base += 1e-9 - min_bg;
        }
        let ext_w = w + max_disp as f64;
        let mut floor = plane_extrema(&background, ext_w, h).1;
        let mut layers = Vec::new();
        let n_layers = rng.random_range(params.min_layers..=params.max_layers);
        for _ in 0..n_layers {
            let lo = floor + params.min_layer_gap;
            let hi = (lo + params.max_layer_step).min(top);
            if hi <= lo {
                break;
            }
            let mut plane = DisparityPlane {
                base: rng.random_range(lo..=hi),
                slope_u: rng.random_range(-slope..=slope) * 0.5,
                slope_v: rng.random_range(-slope..=slope) * 0.5,
            };
            let (pmin, _) = plane_extrema(&plane, ext_w, h);
            if pmin < lo {
                plane.base += lo - pmin;
            }
            if plane_extrema(&plane, ext_w, h).1 >= top {
                plane = DisparityPlane::flat(plane.base.min(top - 1.0));
                if plane.base < lo {
                    break;
                }
            }
            floor = plane_extrema(&plane, ext_w, h).1;
            layers.push(SceneLayer {
                shape: random_shape(rng, width, height, params),
                plane,
            });
        }
        Self {
            background,
            layers,
            dot_size: params.dot_size,
        }
    }

    fn planes(&self) -> impl Iterator<Item = &DisparityPlane> {
        std::iter::once(&self.background).chain(self.layers.iter().map(|l| &l.plane))
    }
}

fn random_shape(rng: &mut impl Rng, width: usize, height: usize, params: &SceneParams) -> LayerShape {
    let w = width as f64;
    let h = height as f64;
    let size_lo = params.min_shape_frac;
    let size_hi = params.max_shape_frac.max(size_lo);
    if rng.random_bool(0.5) {
        let sw = (rng.random_range(size_lo..=size_hi) * w).round().max(2.0) as i64;
        let sh = (rng.random_range(size_lo..=size_hi) * h).round().max(2.0) as i64;
        let u0 = rng.random_range(0..=(width as i64 - sw).max(0));
        let v0 = rng.random_range(0..=(height as i64 - sh).max(0));
        LayerShape::Rect {
            u0,
            v0,
            u1: u0 + sw,
            v1: v0 + sh,
        }
    } else {
        let radius = rng.random_range(size_lo..=size_hi) * 0.5 * w.min(h);
        LayerShape::Disc {
            cu: rng.random_range(0.0..w),
            cv: rng.random_range(0.0..h),
            radius: radius.max(1.5),
        }
    }
}

fn plane_extrema(plane: &DisparityPlane, w: f64, h: f64) -> (f64, f64) {
    let corners = [
        plane.at(0.0, 0.0),
        plane.at(w - 1.0, 0.0),
        plane.at(0.0, h - 1.0),
        plane.at(w - 1.0, h - 1.0),
    ];
    corners
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &d| (lo.min(d), hi.max(d)))
}

/// Parameters of the random scene sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    pub min_layers: usize,
    pub max_layers: usize,
    pub max_background_disp: f64,
    /// Minimum disparity jump between a layer and everything behind it.
    pub min_layer_gap: f64,
    pub max_layer_step: f64,
    pub max_slope: f64,
    pub min_shape_frac: f64,
    pub max_shape_frac: f64,
    pub dot_size: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            min_layers: 1,
            max_layers: 3,
            max_background_disp: 12.0,
            min_layer_gap: 4.0,
            max_layer_step: 12.0,
            max_slope: 0.02,
            min_shape_frac: 0.2,
            max_shape_frac: 0.5,
            dot_size: 1,
        }
    }
}

/// Rectified stereo pair with exact ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StereoSample {
    pub sample_id: String,
    pub left: Image,
    pub right: Image,
    pub disparity_left: Grid<f64>,
    pub disparity_right: Option<Grid<f64>>,
    /// `true` where the left pixel is visible in both views.
    pub occlusion_left: Grid<bool>,
    pub style_tag: String,
}

impl StereoSample {
    pub fn width(&self) -> usize {
        self.left.width()
    }

    pub fn height(&self) -> usize {
        self.left.height()
    }
}

/// Independent RNG stream for `(seed, index)`; serial and out-of-order
/// generation agree bit-exactly.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Renders `scene` as a random-dot stereogram.
pub fn generate_rds(
    seed: u64,
    height: usize,
    width: usize,
    max_disp: usize,
    scene: &SceneSpec,
) -> Result<StereoSample> {
    if height < 16 || width < 16 {
        return Err(Error::InvalidArgument(format!(
            "image must be at least 16x16, got {width}x{height}"
        )));
    }
    if max_disp >= width {
        return Err(Error::InvalidArgument(format!(
            "max_disp {max_disp} must be smaller than width {width}"
        )));
    }
    if scene.dot_size == 0 {
        return Err(Error::InvalidArgument("dot_size must be positive".into()));
    }
    let ext_width = width + max_disp;
    for plane in scene.planes() {
        let (lo, hi) = plane_extrema(plane, ext_width as f64, height as f64);
        if hi >= max_disp as f64 || !hi.is_finite() {
            return Err(Error::DisparityOutOfRange {
                requested: hi,
                max_disp: max_disp as f64,
            });
        }
        if lo < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "scene requests negative disparity {lo}"
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_layers = 1 + scene.layers.len();
    let dot = scene.dot_size;
    // Textures are attached to the surface in right-view coordinates, so a
    // left pixel always shows the color of the right pixel it warps onto.
    let tex_w = (width + 2 * max_disp).div_ceil(dot);
    let tex_h = height.div_ceil(dot);
    // Dot colors are multiples of 1/255 so the base pair survives 8-bit storage.
    let textures: Vec<Vec<[u8; 3]>> = (0..n_layers)
        .map(|_| {
            (0..tex_w * tex_h)
                .map(|_| [rng.random::<u8>(), rng.random::<u8>(), rng.random::<u8>()])
                .collect()
        })
        .collect();
    let color = |layer: usize, x: i64, v: usize| -> [f64; 3] {
        let tu = (x + max_disp as i64) as usize;
        let c = textures[layer][(v / dot) * tex_w + tu / dot];
        [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0]
    };
    let layer_plane = |layer: usize| -> &DisparityPlane {
        if layer == 0 {
            &scene.background
        } else {
            &scene.layers[layer - 1].plane
        }
    };
    let covers = |layer: usize, u: usize, v: usize| -> bool {
        layer == 0 || scene.layers[layer - 1].shape.contains(u as i64, v as i64)
    };

    let mut left = Image::zeros(width, height);
    let mut right = Image::zeros(width, height);
    let mut disparity_left = Grid::filled(width, height, 0.0);
    let mut disparity_right = Grid::filled(width, height, 0.0);
    let mut visible_layer = Grid::filled(width, height, 0usize);
    let mut occlusion_left = Grid::filled(width, height, false);

    for v in 0..height {
        for u in 0..width {
            let mut best = (0usize, layer_plane(0).at(u as f64, v as f64));
            for layer in 1..n_layers {
                if covers(layer, u, v) {
                    let d = layer_plane(layer).at(u as f64, v as f64);
                    if d >= best.1 {
                        best = (layer, d);
                    }
                }
            }
            visible_layer.set(u, v, best.0);
            disparity_left.set(u, v, best.1);
            left.set_pixel(u, v, color(best.0, u as i64 - best.1.round() as i64, v));
        }

        // Forward warp of every layer sample through a disparity z-buffer.
        let mut zbuf: Vec<Option<(f64, usize)>> = vec![None; width];
        for layer in 0..n_layers {
            let plane = layer_plane(layer);
            for u in 0..ext_width {
                if !covers(layer, u, v) {
                    continue;
                }
                let d = plane.at(u as f64, v as f64);
                let x = u as i64 - d.round() as i64;
                if x < 0 || x >= width as i64 {
                    continue;
                }
                let slot = &mut zbuf[x as usize];
                match slot {
                    Some((bd, _)) if d <= *bd => {}
                    _ => *slot = Some((d, layer)),
                }
            }
        }
        // Stretched sloped surfaces can leave columns without a source.
        for x in 0..width {
            if zbuf[x].is_none() {
                let fill = (0..x)
                    .rev()
                    .chain(x + 1..width)
                    .find_map(|k| zbuf[k]);
                zbuf[x] = fill;
            }
        }
        for x in 0..width {
            if let Some((d, layer)) = zbuf[x] {
                disparity_right.set(x, v, d);
                right.set_pixel(x, v, color(layer, x as i64, v));
            }
        }
        for u in 0..width {
            let x = u as i64 - disparity_left.get(u, v).round() as i64;
            let visible = x >= 0
                && zbuf[x as usize]
                    .map(|(_, layer)| layer == *visible_layer.get(u, v))
                    .unwrap_or(false);
            occlusion_left.set(u, v, visible);
        }
    }

    Ok(StereoSample {
        sample_id: format!("rds-{seed:016x}"),
        left,
        right,
        disparity_left,
        disparity_right: Some(disparity_right),
        occlusion_left,
        style_tag: "identity".to_string(),
    })
}

/// Generates sample `index` of a corpus: a random scene drawn from the
/// `(seed, index)` stream, rendered with a seed drawn from the same stream.
pub fn generate_corpus_sample(
    seed: u64,
    index: u64,
    height: usize,
    width: usize,
    max_disp: usize,
    params: &SceneParams,
) -> Result<StereoSample> {
    let mut rng = sample_rng(seed, index);
    let scene = SceneSpec::random(&mut rng, width, height, max_disp, params);
    let render_seed: u64 = rng.random();
    let mut sample = generate_rds(render_seed, height, width, max_disp, &scene)?;
    sample.sample_id = format!("s{seed}-{index:05}");
    Ok(sample)
}
