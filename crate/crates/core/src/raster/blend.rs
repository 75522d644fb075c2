//! Tile-based front-to-back alpha blending of projected splats.
//!
//! Each pixel runs two chains over the same depth-sorted splat list: the mask
//! chain (opacity `a = alpha * G`, values `k`) and the color chain (opacity
//! `a * kappa`, values `c`), where `kappa = k` in label-modulated mode and 1
//! otherwise. The chains terminate independently.
//!
//! The forward pass records which splats touched each pixel and in which
//! chain. Backward and replay evaluate exactly that recorded set, so the
//! clamps and early exits behave as constants for the recorded pass.

use nalgebra::{Matrix2, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};

use super::{RasterSettings, RenderGrad, RenderMode, RenderOutput};

/// A splat ready for blending.
#[derive(Debug, Clone)]
pub(crate) struct Splat {
    pub mean2d: Vector2<f64>,
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub radius: f64,
    pub color: Vector3<f64>,
    pub opacity: f64,
    pub label: f64,
    /// Tie-breaker for equal depths.
    pub order: usize,
}

const IN_MASK: u8 = 1;
const IN_COLOR: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Contribution {
    local: u32,
    flags: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct TileTrace {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    /// Splat indices sorted front to back.
    splats: Vec<u32>,
    /// Per-pixel ranges into `entries`, row-major within the tile.
    offsets: Vec<u32>,
    entries: Vec<Contribution>,
}

/// Record of which splats contributed to which pixels in a forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterTrace {
    width: usize,
    height: usize,
    mode: RenderMode,
    num_splats: usize,
    tiles: Vec<TileTrace>,
}

impl RasterTrace {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn mode(&self) -> RenderMode {
        self.mode
    }

    /// Total number of recorded (pixel, splat) contributions.
    pub fn num_contributions(&self) -> usize {
        self.tiles.iter().map(|t| t.entries.len()).sum()
    }
}

/// Per-splat gradient of a scalar loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct SplatGrad {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub color: Vector3<f64>,
    pub opacity: f64,
    pub label: f64,
}

impl Default for SplatGrad {
    fn default() -> Self {
        Self {
            mean2d: Vector2::zeros(),
            cov2d: Matrix2::zeros(),
            color: Vector3::zeros(),
            opacity: 0.0,
            label: 0.0,
        }
    }
}

impl SplatGrad {
    fn accumulate(&mut self, o: &SplatGrad) {
        self.mean2d += o.mean2d;
        self.cov2d += o.cov2d;
        self.color += o.color;
        self.opacity += o.opacity;
        self.label += o.label;
    }
}

#[derive(Debug, Clone, Copy)]
struct PixelOut {
    color: Vector3<f64>,
    mask: f64,
    transmittance: f64,
}

#[inline]
fn footprint(s: &Splat, p: &Vector2<f64>) -> (f64, Vector2<f64>) {
    let d = p - s.mean2d;
    let power = -0.5 * (s.conic[(0, 0)] * d.x * d.x + 2.0 * s.conic[(0, 1)] * d.x * d.y + s.conic[(1, 1)] * d.y * d.y);
    (power.exp(), d)
}

#[inline]
fn pixel_center(x: usize, y: usize) -> Vector2<f64> {
    Vector2::new(x as f64 + 0.5, y as f64 + 0.5)
}

fn build_tiles(splats: &[Splat], width: usize, height: usize, tile: usize) -> Vec<TileTrace> {
    let tx = width.div_ceil(tile);
    let ty = height.div_ceil(tile);
    let mut lists: Vec<Vec<u32>> = vec![Vec::new(); tx * ty];
    for (i, s) in splats.iter().enumerate() {
        let lo_x = ((s.mean2d.x - s.radius) / tile as f64).floor().max(0.0) as usize;
        let lo_y = ((s.mean2d.y - s.radius) / tile as f64).floor().max(0.0) as usize;
        let hi_x = ((s.mean2d.x + s.radius) / tile as f64).floor();
        let hi_y = ((s.mean2d.y + s.radius) / tile as f64).floor();
        if hi_x < 0.0 || hi_y < 0.0 {
            continue;
        }
        let hi_x = (hi_x as usize).min(tx.saturating_sub(1));
        let hi_y = (hi_y as usize).min(ty.saturating_sub(1));
        for j in lo_y..=hi_y {
            for k in lo_x..=hi_x {
                lists[j * tx + k].push(i as u32);
            }
        }
    }
    lists
        .into_iter()
        .enumerate()
        .map(|(t, mut list)| {
            list.sort_by(|&a, &b| {
                let (sa, sb) = (&splats[a as usize], &splats[b as usize]);
                sa.depth.total_cmp(&sb.depth).then(sa.order.cmp(&sb.order))
            });
            let (x0, y0) = ((t % tx) * tile, (t / tx) * tile);
            TileTrace {
                x0,
                y0,
                x1: (x0 + tile).min(width),
                y1: (y0 + tile).min(height),
                splats: list,
                offsets: Vec::new(),
                entries: Vec::new(),
            }
        })
        .collect()
}

fn search_pixel(
    splats: &[Splat],
    list: &[u32],
    p: &Vector2<f64>,
    mode: RenderMode,
    settings: &RasterSettings,
    entries: &mut Vec<Contribution>,
) -> PixelOut {
    let (mut tm, mut tc) = (1.0, 1.0);
    let mut mask = 0.0;
    let mut color = Vector3::zeros();
    let mut mask_live = true;
    let mut color_live = mode != RenderMode::MaskOnly;
    for (local, &si) in list.iter().enumerate() {
        let s = &splats[si as usize];
        let (g, _) = footprint(s, p);
        let a = s.opacity * g;
        if a < settings.min_alpha {
            continue;
        }
        let mut flags = 0;
        if mask_live {
            mask += s.label * a * tm;
            tm *= 1.0 - a;
            flags |= IN_MASK;
            mask_live = tm >= settings.min_transmittance;
        }
        if color_live {
            let ac = a * kappa(mode, s);
            color += s.color * (ac * tc);
            tc *= 1.0 - ac;
            flags |= IN_COLOR;
            color_live = tc >= settings.min_transmittance;
        }
        entries.push(Contribution { local: local as u32, flags });
        if !mask_live && !color_live {
            break;
        }
    }
    finish(color, mask, tm, tc, mode, settings)
}

#[inline]
fn kappa(mode: RenderMode, s: &Splat) -> f64 {
    match mode {
        RenderMode::LabelModulated => s.label,
        _ => 1.0,
    }
}

fn finish(color: Vector3<f64>, mask: f64, tm: f64, tc: f64, mode: RenderMode, settings: &RasterSettings) -> PixelOut {
    let transmittance = if mode == RenderMode::MaskOnly { tm } else { tc };
    PixelOut {
        color: color + settings.background * tc,
        mask,
        transmittance,
    }
}

fn replay_pixel(
    splats: &[Splat],
    list: &[u32],
    entries: &[Contribution],
    p: &Vector2<f64>,
    mode: RenderMode,
    settings: &RasterSettings,
) -> PixelOut {
    let (mut tm, mut tc) = (1.0, 1.0);
    let mut mask = 0.0;
    let mut color = Vector3::zeros();
    for e in entries {
        let s = &splats[list[e.local as usize] as usize];
        let a = s.opacity * footprint(s, p).0;
        if e.flags & IN_MASK != 0 {
            mask += s.label * a * tm;
            tm *= 1.0 - a;
        }
        if e.flags & IN_COLOR != 0 {
            let ac = a * kappa(mode, s);
            color += s.color * (ac * tc);
            tc *= 1.0 - ac;
        }
    }
    finish(color, mask, tm, tc, mode, settings)
}

fn assemble(width: usize, height: usize, tiles: &[TileTrace], pixels: &[Vec<PixelOut>]) -> RenderOutput {
    let mut out = RenderOutput::empty(width, height);
    for (t, px) in tiles.iter().zip(pixels) {
        let tw = t.x1 - t.x0;
        for (i, o) in px.iter().enumerate() {
            let (x, y) = (t.x0 + i % tw, t.y0 + i / tw);
            for c in 0..3 {
                out.color.set(x, y, c, o.color[c]);
            }
            out.mask.set(x, y, 0, o.mask);
            out.final_transmittance.set(x, y, 0, o.transmittance);
        }
    }
    out
}

/// Forward pass that also records the contributing set.
pub(crate) fn rasterize(
    splats: &[Splat],
    width: usize,
    height: usize,
    mode: RenderMode,
    settings: &RasterSettings,
) -> (RenderOutput, RasterTrace) {
    let mut tiles = build_tiles(splats, width, height, settings.tile_size.max(1));
    let pixels: Vec<Vec<PixelOut>> = tiles
        .par_iter_mut()
        .map(|t| {
            let mut out = Vec::with_capacity((t.x1 - t.x0) * (t.y1 - t.y0));
            t.offsets.push(0);
            for y in t.y0..t.y1 {
                for x in t.x0..t.x1 {
                    let o = search_pixel(splats, &t.splats, &pixel_center(x, y), mode, settings, &mut t.entries);
                    t.offsets.push(t.entries.len() as u32);
                    out.push(o);
                }
            }
            out
        })
        .collect();
    let out = assemble(width, height, &tiles, &pixels);
    let trace = RasterTrace {
        width,
        height,
        mode,
        num_splats: splats.len(),
        tiles,
    };
    (out, trace)
}

fn check_trace(splats: &[Splat], trace: &RasterTrace) -> Result<()> {
    if splats.len() != trace.num_splats {
        return Err(Error::Usage(format!(
            "render context holds {} splats but {} were supplied",
            trace.num_splats,
            splats.len()
        )));
    }
    Ok(())
}

/// Re-evaluates the recorded contributions with new splat values.
pub(crate) fn rasterize_replay(splats: &[Splat], trace: &RasterTrace, settings: &RasterSettings) -> Result<RenderOutput> {
    check_trace(splats, trace)?;
    let pixels: Vec<Vec<PixelOut>> = trace
        .tiles
        .par_iter()
        .map(|t| {
            let tw = t.x1 - t.x0;
            (0..(t.offsets.len() - 1))
                .map(|i| {
                    let (x, y) = (t.x0 + i % tw, t.y0 + i / tw);
                    let range = t.offsets[i] as usize..t.offsets[i + 1] as usize;
                    replay_pixel(splats, &t.splats, &t.entries[range], &pixel_center(x, y), trace.mode, settings)
                })
                .collect()
        })
        .collect();
    Ok(assemble(trace.width, trace.height, &trace.tiles, &pixels))
}

struct Step {
    local: usize,
    flags: u8,
    g: f64,
    d: Vector2<f64>,
    a: f64,
    kap: f64,
    tm: f64,
    tc: f64,
}

/// Gradients of a scalar loss with respect to every splat, given the
/// per-pixel output gradients. Reduction is in fixed tile order.
pub(crate) fn rasterize_backward(
    splats: &[Splat],
    trace: &RasterTrace,
    settings: &RasterSettings,
    grad: &RenderGrad,
) -> Result<Vec<SplatGrad>> {
    check_trace(splats, trace)?;
    grad.check_shape(trace.width, trace.height)?;
    let mode = trace.mode;
    let partials: Vec<Vec<SplatGrad>> = trace
        .tiles
        .par_iter()
        .map(|t| {
            let tw = t.x1 - t.x0;
            let mut local = vec![SplatGrad::default(); t.splats.len()];
            let mut steps: Vec<Step> = Vec::new();
            for i in 0..(t.offsets.len() - 1) {
                let (x, y) = (t.x0 + i % tw, t.y0 + i / tw);
                let g_color = grad
                    .color
                    .as_ref()
                    .map(|b| Vector3::new(b.get(x, y, 0), b.get(x, y, 1), b.get(x, y, 2)))
                    .unwrap_or_else(Vector3::zeros);
                let g_mask = grad.mask.as_ref().map_or(0.0, |b| b.get(x, y, 0));
                let g_trans = grad.transmittance.as_ref().map_or(0.0, |b| b.get(x, y, 0));
                let p = pixel_center(x, y);
                let entries = &t.entries[t.offsets[i] as usize..t.offsets[i + 1] as usize];

                steps.clear();
                let (mut tm, mut tc) = (1.0, 1.0);
                for e in entries {
                    let s = &splats[t.splats[e.local as usize] as usize];
                    let (g, d) = footprint(s, &p);
                    let a = s.opacity * g;
                    let kap = kappa(mode, s);
                    steps.push(Step {
                        local: e.local as usize,
                        flags: e.flags,
                        g,
                        d,
                        a,
                        kap,
                        tm,
                        tc,
                    });
                    if e.flags & IN_MASK != 0 {
                        tm *= 1.0 - a;
                    }
                    if e.flags & IN_COLOR != 0 {
                        tc *= 1.0 - a * kap;
                    }
                }

                let (g_tm, g_tc) = if mode == RenderMode::MaskOnly { (g_trans, 0.0) } else { (0.0, g_trans) };
                // Values behind the current splat, normalized by the
                // transmittance just after it, and the product of (1 - a)
                // behind it.
                let mut behind_c = settings.background;
                let mut behind_k = 0.0;
                let mut prod_c = 1.0;
                let mut prod_m = 1.0;
                for st in steps.iter().rev() {
                    let s = &splats[t.splats[st.local] as usize];
                    let out = &mut local[st.local];
                    let mut g_a = 0.0;
                    let mut g_kappa = 0.0;
                    if st.flags & IN_COLOR != 0 {
                        let ac = st.a * st.kap;
                        out.color += g_color * (ac * st.tc);
                        let g_ac = st.tc * (g_color.dot(&(s.color - behind_c)) - g_tc * prod_c);
                        g_a += g_ac * st.kap;
                        g_kappa = g_ac * st.a;
                        behind_c = s.color * ac + behind_c * (1.0 - ac);
                        prod_c *= 1.0 - ac;
                    }
                    if st.flags & IN_MASK != 0 {
                        out.label += g_mask * st.a * st.tm;
                        g_a += st.tm * (g_mask * (s.label - behind_k) - g_tm * prod_m);
                        behind_k = s.label * st.a + behind_k * (1.0 - st.a);
                        prod_m *= 1.0 - st.a;
                    }
                    if mode == RenderMode::LabelModulated {
                        out.label += g_kappa;
                    }
                    out.opacity += g_a * st.g;
                    let g_g = g_a * s.opacity;
                    let qd = s.conic * st.d;
                    out.mean2d += qd * (g_g * st.g);
                    let g_conic = st.d * st.d.transpose() * (-0.5 * g_g * st.g);
                    out.cov2d -= s.conic * g_conic * s.conic;
                }
            }
            local
        })
        .collect();

    let mut total = vec![SplatGrad::default(); splats.len()];
    for (t, part) in trace.tiles.iter().zip(&partials) {
        for (si, g) in t.splats.iter().zip(part) {
            total[*si as usize].accumulate(g);
        }
    }
    Ok(total)
}
