//! Forward splatting rasterizer.
//!
//! Splats are binned into 16×16 tiles, depth-sorted per tile and
//! alpha-composited front to back. Besides colour and alpha images, the
//! rasterizer can stream every per-pixel contribution `(pixel, gaussian,
//! T·α)` into a [`WeightSink`]; that stream is what mask lifting folds into
//! per-Gaussian foreground/background weights.
//!
//! Tiles are shaded independently (in parallel when enabled) and their
//! outputs are merged in tile order, so sequential and parallel runs are
//! bit-identical.

mod project;

use rayon::prelude::*;

pub use self::project::{
    image_covariance, project, project_where, projection_jacobian, ProjectedGaussian, Projection, ProjectionStats,
};
use crate::masks::BinaryMask;
use crate::scene::{Camera, Gaussians};

pub const TILE_SIZE: u32 = 16;
pub const NEAR_PLANE: f64 = 0.01;
/// Added to both diagonal entries of every image-space covariance.
pub const LOW_PASS: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const TRANSMITTANCE_MIN: f64 = 1e-4;

/// One Gaussian's share of one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contribution {
    /// Row-major pixel index, `y * width + x`.
    pub pixel: u32,
    pub gaussian: u32,
    pub alpha: f64,
    /// Transmittance in front of this Gaussian.
    pub transmittance: f64,
    /// `transmittance * alpha`.
    pub weight: f64,
}

/// Folds per-tile contribution batches. `tile` runs concurrently across
/// tiles; `merge` is called sequentially in tile order.
pub trait WeightSink: Sync {
    type Partial: Send;
    fn tile(&self, contributions: &[Contribution]) -> Self::Partial;
    fn merge(&mut self, partial: Self::Partial);
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderImage {
    pub width: u32,
    pub height: u32,
    pub color: Vec<[f32; 3]>,
    pub alpha: Vec<f32>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RasterStats {
    pub projection: ProjectionStats,
    pub splats: usize,
    pub tile_entries: usize,
}

/// Splats binned into depth-sorted per-tile lists.
struct TileBins {
    tiles_x: u32,
    tiles_y: u32,
    /// `[start, end)` into `entries` for each tile.
    ranges: Vec<(u32, u32)>,
    entries: Vec<u32>,
}

impl TileBins {
    fn build(splats: &[ProjectedGaussian], width: u32, height: u32) -> TileBins {
        let tiles_x = width.div_ceil(TILE_SIZE);
        let tiles_y = height.div_ceil(TILE_SIZE);
        let mut keys: Vec<(u32, u32)> = Vec::new();
        for (k, s) in splats.iter().enumerate() {
            let [x0, y0, x1, y1] = s.bbox;
            for ty in y0 / TILE_SIZE..=y1 / TILE_SIZE {
                for tx in x0 / TILE_SIZE..=x1 / TILE_SIZE {
                    keys.push((ty * tiles_x + tx, k as u32));
                }
            }
        }
        let order = |a: &(u32, u32), b: &(u32, u32)| {
            let (sa, sb) = (&splats[a.1 as usize], &splats[b.1 as usize]);
            a.0.cmp(&b.0)
                .then(sa.depth.total_cmp(&sb.depth))
                .then(sa.source_index.cmp(&sb.source_index))
        };
        if keys.len() > 1 << 16 {
            keys.par_sort_unstable_by(order);
        } else {
            keys.sort_unstable_by(order);
        }
        let n_tiles = (tiles_x * tiles_y) as usize;
        let mut ranges = vec![(0u32, 0u32); n_tiles];
        let mut i = 0usize;
        while i < keys.len() {
            let tile = keys[i].0;
            let start = i;
            while i < keys.len() && keys[i].0 == tile {
                i += 1;
            }
            ranges[tile as usize] = (start as u32, i as u32);
        }
        TileBins { tiles_x, tiles_y, ranges, entries: keys.into_iter().map(|k| k.1).collect() }
    }

    fn tile_count(&self) -> usize {
        (self.tiles_x * self.tiles_y) as usize
    }

    fn list(&self, tile: usize) -> &[u32] {
        let (a, b) = self.ranges[tile];
        &self.entries[a as usize..b as usize]
    }

    fn pixel_bounds(&self, tile: usize, width: u32, height: u32) -> (u32, u32, u32, u32) {
        let tx = tile as u32 % self.tiles_x;
        let ty = tile as u32 / self.tiles_x;
        let x0 = tx * TILE_SIZE;
        let y0 = ty * TILE_SIZE;
        (x0, y0, (x0 + TILE_SIZE).min(width), (y0 + TILE_SIZE).min(height))
    }
}

/// Composites one pixel. Returns colour and final transmittance.
#[inline]
fn shade_pixel(
    splats: &[ProjectedGaussian],
    list: &[u32],
    x: u32,
    y: u32,
    mut visit: impl FnMut(u32, f64, f64),
) -> ([f64; 3], f64) {
    let mut t = 1.0f64;
    let mut c = [0.0f64; 3];
    for &k in list {
        let s = &splats[k as usize];
        if x < s.bbox[0] || x > s.bbox[2] || y < s.bbox[1] || y > s.bbox[3] {
            continue;
        }
        let dx = x as f64 - s.mean2d[0];
        let dy = y as f64 - s.mean2d[1];
        let power = -0.5 * (s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy);
        let alpha = ALPHA_MAX.min(s.base_opacity * power.exp());
        if alpha < ALPHA_MIN {
            continue;
        }
        let w = t * alpha;
        visit(s.source_index, alpha, t);
        for (acc, &col) in c.iter_mut().zip(&s.color) {
            *acc += col as f64 * w;
        }
        t *= 1.0 - alpha;
        if t < TRANSMITTANCE_MIN {
            break;
        }
    }
    (c, t)
}

/// Rasterizer configuration. Sequential mode is fully deterministic; the
/// parallel mode produces the same bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rasterizer {
    pub parallel: bool,
}

impl Default for Rasterizer {
    fn default() -> Self {
        Self { parallel: true }
    }
}

const TILES_PER_BATCH: usize = 256;

struct Batch<'a> {
    bins: &'a TileBins,
    tiles: std::ops::Range<usize>,
}

impl Rasterizer {
    pub fn sequential() -> Self {
        Self { parallel: false }
    }

    pub fn parallel() -> Self {
        Self { parallel: true }
    }

    fn map_tiles<T: Send>(&self, tiles: std::ops::Range<usize>, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
        if self.parallel {
            tiles.into_par_iter().map(f).collect()
        } else {
            tiles.map(f).collect()
        }
    }

    /// Colour and alpha over a black background.
    pub fn render(&self, gaussians: &Gaussians, camera: &Camera) -> RenderImage {
        self.render_projected(&project(gaussians, camera), camera)
    }

    pub fn render_projected(&self, projection: &Projection, camera: &Camera) -> RenderImage {
        let (w, h) = (camera.width, camera.height);
        let bins = TileBins::build(&projection.splats, w, h);
        let splats = &projection.splats;
        let tiles = self.map_tiles(0..bins.tile_count(), |tile| {
            let (x0, y0, x1, y1) = bins.pixel_bounds(tile, w, h);
            let list = bins.list(tile);
            let mut out = Vec::with_capacity(((x1 - x0) * (y1 - y0)) as usize);
            for y in y0..y1 {
                for x in x0..x1 {
                    let (c, t) = shade_pixel(splats, list, x, y, |_, _, _| {});
                    out.push(([c[0] as f32, c[1] as f32, c[2] as f32], (1.0 - t) as f32));
                }
            }
            out
        });
        let mut image = RenderImage {
            width: w,
            height: h,
            color: vec![[0.0; 3]; (w * h) as usize],
            alpha: vec![0.0; (w * h) as usize],
        };
        for (tile, pixels) in tiles.into_iter().enumerate() {
            let (x0, y0, x1, _) = bins.pixel_bounds(tile, w, h);
            let tw = (x1 - x0) as usize;
            for (k, (c, a)) in pixels.into_iter().enumerate() {
                let idx = (y0 as usize + k / tw) * w as usize + x0 as usize + k % tw;
                image.color[idx] = c;
                image.alpha[idx] = a;
            }
        }
        image
    }

    /// Streams every contribution of the projected scene into `sink`.
    pub fn fold_weights<S: WeightSink>(&self, gaussians: &Gaussians, camera: &Camera, sink: &mut S) -> RasterStats {
        self.fold_weights_projected(&project(gaussians, camera), camera, sink)
    }

    pub fn fold_weights_projected<S: WeightSink>(
        &self,
        projection: &Projection,
        camera: &Camera,
        sink: &mut S,
    ) -> RasterStats {
        self.fold_batches(projection, camera, |batch| {
            let shared: &S = sink;
            let partials = self.shade_batch(projection, camera, batch, &|c: &[Contribution]| shared.tile(c));
            for p in partials {
                sink.merge(p);
            }
        })
    }

    /// Sequential visit of every contribution, in tile then pixel order.
    pub fn for_each_contribution(&self, gaussians: &Gaussians, camera: &Camera, mut f: impl FnMut(&Contribution)) {
        let projection = project(gaussians, camera);
        self.fold_batches(&projection, camera, |batch| {
            let partials = self.shade_batch(&projection, camera, batch, &|c: &[Contribution]| c.to_vec());
            partials.iter().flatten().for_each(&mut f);
        });
    }

    fn fold_batches(
        &self,
        projection: &Projection,
        camera: &Camera,
        mut run: impl FnMut(&Batch<'_>),
    ) -> RasterStats {
        let bins = TileBins::build(&projection.splats, camera.width, camera.height);
        let n_tiles = bins.tile_count();
        let mut start = 0;
        while start < n_tiles {
            let end = (start + TILES_PER_BATCH).min(n_tiles);
            run(&Batch { bins: &bins, tiles: start..end });
            start = end;
        }
        RasterStats { projection: projection.stats, splats: projection.splats.len(), tile_entries: bins.entries.len() }
    }

    fn shade_batch<P: Send>(
        &self,
        projection: &Projection,
        camera: &Camera,
        batch: &Batch<'_>,
        tile_fn: &(impl Fn(&[Contribution]) -> P + Sync),
    ) -> Vec<P> {
        let (w, h) = (camera.width, camera.height);
        let splats = &projection.splats;
        let bins = batch.bins;
        self.map_tiles(batch.tiles.clone(), |tile| {
            let (x0, y0, x1, y1) = bins.pixel_bounds(tile, w, h);
            let list = bins.list(tile);
            let mut contributions = Vec::new();
            for y in y0..y1 {
                for x in x0..x1 {
                    let pixel = y * w + x;
                    shade_pixel(splats, list, x, y, |gaussian, alpha, transmittance| {
                        contributions.push(Contribution {
                            pixel,
                            gaussian,
                            alpha,
                            transmittance,
                            weight: transmittance * alpha,
                        });
                    });
                }
            }
            tile_fn(&contributions)
        })
    }

    /// Binary mask of the pixels covered (accumulated alpha > 0.5) when only
    /// `selected` Gaussians are rendered.
    pub fn render_selection(&self, gaussians: &Gaussians, camera: &Camera, selected: &[u32]) -> BinaryMask {
        let mut keep = vec![false; gaussians.len()];
        for &i in selected {
            if let Some(k) = keep.get_mut(i as usize) {
                *k = true;
            }
        }
        let projection = project_where(gaussians, camera, |i| keep[i]);
        let image = self.render_projected(&projection, camera);
        BinaryMask::from_fn(camera.width, camera.height, |x, y| image.alpha[(y * camera.width + x) as usize] > 0.5)
    }
}
