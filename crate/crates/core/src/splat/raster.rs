//! Tile-based front-to-back alpha blending of projected splats with a
//! matching reverse-mode pass.
//!
//! Every pixel blends, in depth order, the splats whose alpha reaches
//! [`ALPHA_MIN`]. Color, camera-frame normal and plane offset are blended with
//! weights `alpha_i * T_i`. The hard contributor count and a smooth surrogate
//! of it are recorded per pixel.

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use super::depth::compute_depth_map;
use super::gaussian::GaussianPrimitive;
use super::project::{project_backward, project_gaussian, PrimitiveGrad, ProjectedSplat, SplatGrad, ALPHA_MIN};
use crate::scene::ViewRecord;

pub const ALPHA_MAX: f64 = 0.99;
pub const TRANSMITTANCE_MIN: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RasterSettings {
    pub tile_size: usize,
    pub near: f64,
    pub low_pass: f64,
    pub background: [f64; 3],
    /// Slope `k` of the soft count `sigmoid(k * (alpha - ALPHA_MIN))`.
    pub soft_count_sharpness: f64,
}

impl Default for RasterSettings {
    fn default() -> Self {
        Self {
            tile_size: 16,
            near: 0.01,
            low_pass: 0.3,
            background: [0.0; 3],
            soft_count_sharpness: 100.0,
        }
    }
}

/// Per-pixel contributor list: `(primitive index, alpha was clamped)`.
pub type RenderPlan = Vec<Vec<(u32, bool)>>;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedBuffers {
    pub width: usize,
    pub height: usize,
    /// RGB, interleaved.
    pub color: Vec<f64>,
    /// Camera-frame blended normal, interleaved, unnormalized.
    pub normal: Vec<f64>,
    pub distance: Vec<f64>,
    /// Unbiased depth; [`crate::splat::INVALID_DEPTH`] where undefined.
    pub depth: Vec<f64>,
    pub transmittance: Vec<f64>,
    pub count: Vec<u32>,
    pub soft_count: Vec<f64>,
    /// Pixels with `g > 0` whose depth denominator was degenerate.
    pub degenerate_depth: usize,
    pub plan: Option<RenderPlan>,
}

impl RenderedBuffers {
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn normal_at(&self, i: usize) -> Vector3<f64> {
        Vector3::new(self.normal[3 * i], self.normal[3 * i + 1], self.normal[3 * i + 2])
    }

    #[inline]
    pub fn color_at(&self, i: usize) -> [f64; 3] {
        [self.color[3 * i], self.color[3 * i + 1], self.color[3 * i + 2]]
    }
}

/// Upstream gradients on the blended channels. Empty vectors mean zero.
#[derive(Debug, Clone, Default)]
pub struct PixelGrads {
    pub color: Vec<f64>,
    pub normal: Vec<f64>,
    pub distance: Vec<f64>,
    pub soft_count: Vec<f64>,
    pub transmittance: Vec<f64>,
}

impl PixelGrads {
    pub fn zeros(n_pixels: usize) -> Self {
        Self {
            color: vec![0.0; 3 * n_pixels],
            normal: vec![0.0; 3 * n_pixels],
            distance: vec![0.0; n_pixels],
            soft_count: vec![0.0; n_pixels],
            transmittance: vec![0.0; n_pixels],
        }
    }
}

struct Prepared {
    splats: Vec<Option<ProjectedSplat>>,
    /// Primitive indices per tile, front to back.
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
    tiles_y: usize,
}

fn prepare(prims: &[GaussianPrimitive], view: &ViewRecord, st: &RasterSettings) -> Prepared {
    let splats: Vec<Option<ProjectedSplat>> = prims
        .par_iter()
        .map(|p| project_gaussian(p, view, st.near, st.low_pass))
        .collect();
    let mut order: Vec<u32> = (0..prims.len() as u32)
        .filter(|&i| splats[i as usize].is_some())
        .collect();
    order.sort_by(|&a, &b| {
        let da = splats[a as usize].as_ref().unwrap().depth;
        let db = splats[b as usize].as_ref().unwrap().depth;
        da.total_cmp(&db).then(a.cmp(&b))
    });
    let ts = st.tile_size.max(1);
    let (w, h) = (view.width(), view.height());
    let tiles_x = w.div_ceil(ts);
    let tiles_y = h.div_ceil(ts);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for &i in &order {
        let s = splats[i as usize].as_ref().unwrap();
        let x0 = (s.mean.x - s.radius).ceil().max(0.0);
        let x1 = (s.mean.x + s.radius).floor().min(w as f64 - 1.0);
        let y0 = (s.mean.y - s.radius).ceil().max(0.0);
        let y1 = (s.mean.y + s.radius).floor().min(h as f64 - 1.0);
        if !(x0 <= x1 && y0 <= y1) {
            continue;
        }
        let (tx0, tx1) = (x0 as usize / ts, x1 as usize / ts);
        let (ty0, ty1) = (y0 as usize / ts, y1 as usize / ts);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                tiles[ty * tiles_x + tx].push(i);
            }
        }
    }
    Prepared {
        splats,
        tiles,
        tiles_x,
        tiles_y,
    }
}

#[derive(Debug, Clone, Copy)]
struct Contrib {
    prim: u32,
    alpha: f64,
    gauss: f64,
    clamped: bool,
    t_before: f64,
}

#[inline]
fn gaussian_at(s: &ProjectedSplat, px: f64, py: f64) -> (f64, Vector2<f64>) {
    let d = Vector2::new(px - s.mean.x, py - s.mean.y);
    let c = &s.conic;
    let q = c[(0, 0)] * d.x * d.x + 2.0 * c[(0, 1)] * d.x * d.y + c[(1, 1)] * d.y * d.y;
    ((-0.5 * q).exp(), d)
}

/// Collect the blended contributors of pixel `(px, py)`; returns final transmittance.
fn pixel_contribs<'a>(
    splats: &[Option<ProjectedSplat>],
    candidates: impl Iterator<Item = (u32, Option<bool>)>,
    px: f64,
    py: f64,
    out: &'a mut Vec<Contrib>,
) -> f64 {
    out.clear();
    let mut t = 1.0;
    for (i, forced) in candidates {
        let Some(s) = splats[i as usize].as_ref() else {
            continue;
        };
        let (g, _) = gaussian_at(s, px, py);
        let raw = s.opacity * g;
        let (alpha, clamped) = match forced {
            Some(true) => (ALPHA_MAX, true),
            Some(false) => (raw, false),
            None => {
                if raw < ALPHA_MIN {
                    continue;
                }
                if raw > ALPHA_MAX {
                    (ALPHA_MAX, true)
                } else {
                    (raw, false)
                }
            }
        };
        out.push(Contrib {
            prim: i,
            alpha,
            gauss: g,
            clamped,
            t_before: t,
        });
        t *= 1.0 - alpha;
        if forced.is_none() && t < TRANSMITTANCE_MIN {
            break;
        }
    }
    t
}

#[inline]
fn soft_unit(alpha: f64, k: f64) -> (f64, f64) {
    let s = 1.0 / (1.0 + (-k * (alpha - ALPHA_MIN)).exp());
    (s, k * s * (1.0 - s))
}

struct TileOut {
    pixels: Vec<(usize, [f64; 7], f64, u32, f64)>,
    plan: Vec<(usize, Vec<(u32, bool)>)>,
}

/// Pixel ranges of tile `t`.
fn tile_pixels(t: usize, tiles_x: usize, ts: usize, w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
    let (tx, ty) = (t % tiles_x, t / tiles_x);
    let xs = tx * ts..((tx + 1) * ts).min(w);
    let ys = ty * ts..((ty + 1) * ts).min(h);
    ys.flat_map(move |y| xs.clone().map(move |x| (x, y)))
}

fn render_impl(
    prims: &[GaussianPrimitive],
    view: &ViewRecord,
    st: &RasterSettings,
    plan: Option<&RenderPlan>,
    record_plan: bool,
) -> RenderedBuffers {
    let prep = prepare(prims, view, st);
    let (w, h) = (view.width(), view.height());
    let n = w * h;
    let ts = st.tile_size.max(1);
    let bg = st.background;
    let k = st.soft_count_sharpness;
    let outs: Vec<TileOut> = (0..prep.tiles_x * prep.tiles_y)
        .into_par_iter()
        .map(|t| {
            let mut buf = Vec::new();
            let mut out = TileOut {
                pixels: Vec::new(),
                plan: Vec::new(),
            };
            for (x, y) in tile_pixels(t, prep.tiles_x, ts, w, h) {
                let pix = y * w + x;
                let t_final = match plan {
                    Some(p) => pixel_contribs(
                        &prep.splats,
                        p[pix].iter().map(|&(i, c)| (i, Some(c))),
                        x as f64,
                        y as f64,
                        &mut buf,
                    ),
                    None => pixel_contribs(
                        &prep.splats,
                        prep.tiles[t].iter().map(|&i| (i, None)),
                        x as f64,
                        y as f64,
                        &mut buf,
                    ),
                };
                let mut acc = [0.0; 7];
                let mut soft = 0.0;
                for c in &buf {
                    let s = prep.splats[c.prim as usize].as_ref().unwrap();
                    let wgt = c.alpha * c.t_before;
                    let f = [
                        s.color.x,
                        s.color.y,
                        s.color.z,
                        s.normal_cam.x,
                        s.normal_cam.y,
                        s.normal_cam.z,
                        s.dist,
                    ];
                    for ch in 0..7 {
                        acc[ch] += f[ch] * wgt;
                    }
                    soft += if c.clamped { soft_unit(ALPHA_MAX, k).0 } else { soft_unit(c.alpha, k).0 };
                }
                for ch in 0..3 {
                    acc[ch] += t_final * bg[ch];
                }
                out.pixels.push((pix, acc, t_final, buf.len() as u32, soft));
                if record_plan {
                    out.plan.push((pix, buf.iter().map(|c| (c.prim, c.clamped)).collect()));
                }
            }
            out
        })
        .collect();

    let mut b = RenderedBuffers {
        width: w,
        height: h,
        color: vec![0.0; 3 * n],
        normal: vec![0.0; 3 * n],
        distance: vec![0.0; n],
        depth: vec![0.0; n],
        transmittance: vec![1.0; n],
        count: vec![0; n],
        soft_count: vec![0.0; n],
        degenerate_depth: 0,
        plan: record_plan.then(|| vec![Vec::new(); n]),
    };
    for o in outs {
        for (pix, acc, tf, cnt, soft) in o.pixels {
            b.color[3 * pix..3 * pix + 3].copy_from_slice(&acc[0..3]);
            b.normal[3 * pix..3 * pix + 3].copy_from_slice(&acc[3..6]);
            b.distance[pix] = acc[6];
            b.transmittance[pix] = tf;
            b.count[pix] = cnt;
            b.soft_count[pix] = soft;
        }
        if let Some(p) = b.plan.as_mut() {
            for (pix, list) in o.plan {
                p[pix] = list;
            }
        }
    }
    let (depth, degenerate) = compute_depth_map(&b, view);
    b.depth = depth;
    b.degenerate_depth = degenerate;
    b
}

/// Render color, normal, plane-offset, depth, transmittance and count buffers.
pub fn rasterize_forward(prims: &[GaussianPrimitive], view: &ViewRecord, st: &RasterSettings) -> RenderedBuffers {
    render_impl(prims, view, st, None, false)
}

/// Like [`rasterize_forward`], also recording the per-pixel contributor plan.
pub fn rasterize_forward_recorded(
    prims: &[GaussianPrimitive],
    view: &ViewRecord,
    st: &RasterSettings,
) -> RenderedBuffers {
    render_impl(prims, view, st, None, true)
}

/// Evaluate the blend with a fixed contributor plan: the sort order, the
/// alpha skip test and the alpha clamp are frozen. This is the function whose
/// exact derivative [`rasterize_backward`] returns.
pub fn rasterize_with_plan(
    prims: &[GaussianPrimitive],
    view: &ViewRecord,
    st: &RasterSettings,
    plan: &RenderPlan,
) -> RenderedBuffers {
    render_impl(prims, view, st, Some(plan), false)
}

fn backward_impl(
    prims: &[GaussianPrimitive],
    view: &ViewRecord,
    st: &RasterSettings,
    up: &PixelGrads,
    plan: Option<&RenderPlan>,
) -> Vec<PrimitiveGrad> {
    let prep = prepare(prims, view, st);
    let (w, h) = (view.width(), view.height());
    let ts = st.tile_size.max(1);
    let bg = st.background;
    let k = st.soft_count_sharpness;
    let get = |v: &Vec<f64>, i: usize| if v.is_empty() { 0.0 } else { v[i] };

    let tile_grads: Vec<Vec<(u32, SplatGrad)>> = (0..prep.tiles_x * prep.tiles_y)
        .into_par_iter()
        .map(|t| {
            let mut local: std::collections::HashMap<u32, SplatGrad> = std::collections::HashMap::new();
            let mut buf = Vec::new();
            for (x, y) in tile_pixels(t, prep.tiles_x, ts, w, h) {
                let pix = y * w + x;
                let gpix = [
                    get(&up.color, 3 * pix),
                    get(&up.color, 3 * pix + 1),
                    get(&up.color, 3 * pix + 2),
                    get(&up.normal, 3 * pix),
                    get(&up.normal, 3 * pix + 1),
                    get(&up.normal, 3 * pix + 2),
                    get(&up.distance, pix),
                ];
                let gsoft = get(&up.soft_count, pix);
                let gt = get(&up.transmittance, pix);
                if gpix.iter().all(|v| *v == 0.0) && gsoft == 0.0 && gt == 0.0 {
                    continue;
                }
                let (px, py) = (x as f64, y as f64);
                let t_final = match plan {
                    Some(p) => pixel_contribs(
                        &prep.splats,
                        p[pix].iter().map(|&(i, c)| (i, Some(c))),
                        px,
                        py,
                        &mut buf,
                    ),
                    None => pixel_contribs(
                        &prep.splats,
                        prep.tiles[t].iter().map(|&i| (i, None)),
                        px,
                        py,
                        &mut buf,
                    ),
                };
                // Suffix sum of everything behind the current contributor.
                let mut suffix = [bg[0] * t_final, bg[1] * t_final, bg[2] * t_final, 0.0, 0.0, 0.0, 0.0];
                for c in buf.iter().rev() {
                    let s = prep.splats[c.prim as usize].as_ref().unwrap();
                    let f = [
                        s.color.x,
                        s.color.y,
                        s.color.z,
                        s.normal_cam.x,
                        s.normal_cam.y,
                        s.normal_cam.z,
                        s.dist,
                    ];
                    let wgt = c.alpha * c.t_before;
                    let mut g_alpha = 0.0;
                    for ch in 0..7 {
                        g_alpha += gpix[ch] * (f[ch] * c.t_before - suffix[ch] / (1.0 - c.alpha));
                    }
                    let entry = local.entry(c.prim).or_default();
                    entry.color += Vector3::new(gpix[0], gpix[1], gpix[2]) * wgt;
                    entry.normal_cam += Vector3::new(gpix[3], gpix[4], gpix[5]) * wgt;
                    entry.dist += gpix[6] * wgt;
                    for ch in 0..7 {
                        suffix[ch] += f[ch] * wgt;
                    }
                    if c.clamped {
                        continue;
                    }
                    // T_final = prod(1 - alpha_j)
                    g_alpha -= gt * t_final / (1.0 - c.alpha);
                    let g_blend = g_alpha;
                    g_alpha += gsoft * soft_unit(c.alpha, k).1;
                    // alpha = o * exp(-q/2)
                    entry.opacity += g_alpha * c.gauss;
                    let g_q = -0.5 * g_alpha * s.opacity * c.gauss;
                    let (_, d) = gaussian_at(s, px, py);
                    let cn = &s.conic;
                    // q = a dx^2 + 2 b dx dy + c dy^2, d = p - mean
                    entry.conic[0] += g_q * d.x * d.x;
                    entry.conic[1] += g_q * 2.0 * d.x * d.y;
                    entry.conic[2] += g_q * d.y * d.y;
                    let dq_dd = Vector2::new(
                        2.0 * (cn[(0, 0)] * d.x + cn[(0, 1)] * d.y),
                        2.0 * (cn[(0, 1)] * d.x + cn[(1, 1)] * d.y),
                    );
                    entry.mean -= dq_dd * g_q;
                    entry.mean_blend += dq_dd * (0.5 * g_blend * s.opacity * c.gauss);
                }
            }
            let mut v: Vec<(u32, SplatGrad)> = local.into_iter().collect();
            v.sort_by_key(|(i, _)| *i);
            v
        })
        .collect();

    let mut splat_grads = vec![SplatGrad::default(); prims.len()];
    let mut touched = vec![false; prims.len()];
    for tg in tile_grads {
        for (i, g) in tg {
            splat_grads[i as usize].add(&g);
            touched[i as usize] = true;
        }
    }
    prims
        .par_iter()
        .enumerate()
        .map(|(i, p)| match (&prep.splats[i], touched[i]) {
            (Some(s), true) => project_backward(p, view, s, &splat_grads[i]),
            _ => PrimitiveGrad::zeros_like(p),
        })
        .collect()
}

/// Gradients of `sum(up . buffers)` w.r.t. every primitive parameter. Sort
/// order, the alpha skip test and the alpha clamp are treated as constants.
pub fn rasterize_backward(
    prims: &[GaussianPrimitive],
    view: &ViewRecord,
    st: &RasterSettings,
    up: &PixelGrads,
) -> Vec<PrimitiveGrad> {
    backward_impl(prims, view, st, up, None)
}

/// Backward of [`rasterize_with_plan`].
pub fn rasterize_backward_with_plan(
    prims: &[GaussianPrimitive],
    view: &ViewRecord,
    st: &RasterSettings,
    up: &PixelGrads,
    plan: &RenderPlan,
) -> Vec<PrimitiveGrad> {
    backward_impl(prims, view, st, up, Some(plan))
}
