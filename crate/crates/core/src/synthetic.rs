//! Procedural slides with a known tile-level truth, for tests, demos and
//! the acceptance suite.
//!
//! Every class has its own texture. Pixel values are a pure function of the
//! slide seed and the pixel position, so slides can be rendered in parallel
//! and regenerated exactly.

use std::collections::{BTreeMap, BTreeSet};

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::class::TissueClass;
use crate::cluster::{AnnotationSession, Decision, SessionConfig, SessionError};
use crate::embedder::{embed_batch, BaselineTexture, EmbedError, Embedding};
use crate::event::{EventMeta, Timestamp};
use crate::labels::LabeledSlide;
use crate::tiler::{build_tile_grid, extract_patches, RasterSlide, SlideRef, TileAddress, TileGrid, TilerError, WhiteRule};

/// What a tile of a synthetic slide shows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Content {
    Background,
    Tissue(TissueClass),
    /// A texture that belongs to none of the six classes.
    Unseen,
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform [0, 1) from a seed and two coordinates.
fn unit(seed: u64, a: i64, b: i64) -> f64 {
    let h = mix64(seed ^ mix64((a as u64).wrapping_mul(0x1000_0000_01b3) ^ mix64(b as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    std::array::from_fn(|i| a[i] + (b[i] - a[i]) * t)
}

/// Jittered-grid blobs: is (x, y) inside the blob of its cell?
fn in_blob(seed: u64, x: f64, y: f64, spacing: f64, radius: f64, jitter: f64) -> bool {
    let (cx, cy) = ((x / spacing).floor(), (y / spacing).floor());
    let jx = (unit(seed, cx as i64, cy as i64) - 0.5) * 2.0 * jitter;
    let jy = (unit(seed ^ 1, cx as i64, cy as i64) - 0.5) * 2.0 * jitter;
    let dx = x - (cx + 0.5) * spacing - jx;
    let dy = y - (cy + 0.5) * spacing - jy;
    dx * dx + dy * dy < radius * radius
}

/// Noise-free texture color at slide pixel (x, y).
fn texture(content: Content, seed: u64, x: f64, y: f64) -> [f64; 3] {
    match content {
        Content::Background => [246.0, 246.0, 246.0],
        Content::Tissue(TissueClass::Epithelium) => {
            if in_blob(seed, x, y, 14.0, 5.0, 2.0) { [120.0, 60.0, 150.0] } else { [230.0, 150.0, 190.0] }
        }
        Content::Tissue(TissueClass::Stroma) => {
            let (c, s) = ((35.0f64).to_radians().cos(), (35.0f64).to_radians().sin());
            let t = ((x * c + y * s) / 3.0).sin() * 0.5 + 0.5;
            lerp([235.0, 165.0, 180.0], [195.0, 95.0, 135.0], t)
        }
        Content::Tissue(TissueClass::Lymphocytes) => {
            if in_blob(seed ^ 7, x, y, 9.0, 3.5, 1.5) { [60.0, 40.0, 120.0] } else { [200.0, 170.0, 210.0] }
        }
        Content::Tissue(TissueClass::Adipose) => {
            let wave = |v: f64, w: f64| v + 2.0 * (w / 23.0).sin();
            let (u, v) = (wave(x, y).rem_euclid(36.0), wave(y, x).rem_euclid(36.0));
            if u < 3.0 || v < 3.0 { [215.0, 150.0, 180.0] } else { [240.0, 236.0, 240.0] }
        }
        Content::Tissue(TissueClass::Artifact) => {
            // Smeared marker ink: smooth, dark, low gradient.
            let t = 0.5 + 0.25 * ((x / 40.0).sin() * (y / 53.0).sin() + 1.0) * 0.5;
            lerp([25.0, 70.0, 50.0], [60.0, 140.0, 100.0], t)
        }
        Content::Tissue(TissueClass::Miscellaneous) => {
            if unit(seed ^ 11, x as i64, y as i64) < 0.03 { [90.0, 80.0, 110.0] } else { [180.0, 190.0, 215.0] }
        }
        Content::Unseen => {
            let sum = TissueClass::ALL
                .iter()
                .map(|c| texture(Content::Tissue(*c), seed, x, y))
                .fold([0.0; 3], |a, b| std::array::from_fn(|i| a[i] + b[i]));
            sum.map(|v| v / 6.0)
        }
    }
}

/// Per-slide stain variation applied as a channel gain and offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stain {
    pub gain: [f64; 3],
    pub offset: [f64; 3],
}

impl Stain {
    pub const NEUTRAL: Stain = Stain { gain: [1.0; 3], offset: [0.0; 3] };

    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            gain: std::array::from_fn(|_| rng.random_range(0.94..1.06)),
            offset: std::array::from_fn(|_| rng.random_range(-6.0..6.0)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub rows: u32,
    pub cols: u32,
    pub tile_size: u32,
    pub base_mpp: f64,
    /// Peak amplitude of the per-pixel uniform noise.
    pub noise: f64,
    pub stain_jitter: bool,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { rows: 8, cols: 8, tile_size: 256, base_mpp: 1.0, noise: 12.0, stain_jitter: true }
    }
}

/// A rendered slide plus the content of each tile at the working level
/// `base_mpp` (one tile per layout cell).
#[derive(Debug, Clone)]
pub struct SyntheticSlide {
    pub slide_id: String,
    pub image: RgbImage,
    pub layout: BTreeMap<TileAddress, Content>,
    pub base_mpp: f64,
    pub tile_size: u32,
}

impl SyntheticSlide {
    pub fn slide_ref(&self, uri: impl Into<std::path::PathBuf>) -> Result<SlideRef, TilerError> {
        SlideRef::new(&self.slide_id, uri, self.base_mpp, self.image.width(), self.image.height())
    }

    /// Tissue tiles and their classes.
    pub fn truth(&self) -> BTreeMap<TileAddress, TissueClass> {
        self.layout
            .iter()
            .filter_map(|(a, c)| match c {
                Content::Tissue(t) => Some((*a, *t)),
                _ => None,
            })
            .collect()
    }

    pub fn background(&self) -> BTreeSet<TileAddress> {
        self.layout.iter().filter(|(_, c)| **c == Content::Background).map(|(a, _)| *a).collect()
    }

    /// Tiles the slide at its own resolution and embeds the foreground with
    /// the baseline backend.
    pub fn prepare(&self) -> Result<Prepared, PrepareError> {
        let slide = self.slide_ref(format!("synthetic://{}", self.slide_id))?;
        let mut grid = build_tile_grid(&slide, self.tile_size, self.base_mpp)?;
        let source = RasterSlide::from_image(self.image.clone());
        let extraction = extract_patches(&source, &slide, &mut grid, WhiteRule::default())?;
        let patches = extraction.into_foreground();
        let embeddings = embed_batch(&BaselineTexture, &patches).into_iter().collect::<Result<Vec<_>, _>>()?;
        Ok(Prepared { slide, grid, embeddings })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PrepareError {
    #[error(transparent)]
    Tiler(#[from] TilerError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub slide: SlideRef,
    pub grid: TileGrid,
    pub embeddings: Vec<Embedding>,
}

/// Renders `layout` (row-major, `config.rows × config.cols`).
pub fn render(slide_id: &str, layout: &[Content], config: &SyntheticConfig, seed: u64) -> SyntheticSlide {
    assert_eq!(layout.len(), (config.rows * config.cols) as usize, "layout size");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stain = if config.stain_jitter { Stain::random(&mut rng) } else { Stain::NEUTRAL };
    let texture_seed: u64 = rng.random();
    let t = config.tile_size;
    let (w, h) = (config.cols * t, config.rows * t);
    let mut buf = vec![0u8; (w * h * 3) as usize];
    buf.par_chunks_mut((w * 3) as usize).enumerate().for_each(|(y, row)| {
        let y = y as u32;
        for x in 0..w {
            let content = layout[((y / t) * config.cols + x / t) as usize];
            let base = texture(content, texture_seed, x as f64, y as f64);
            for c in 0..3 {
                let n = (unit(texture_seed ^ (c as u64 + 101), x as i64, y as i64) - 0.5) * 2.0 * config.noise;
                let n = if content == Content::Background { n * 0.3 } else { n };
                let v = base[c] * stain.gain[c] + stain.offset[c] + n;
                row[(x * 3) as usize + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    });
    let image = RgbImage::from_raw(w, h, buf).expect("buffer size");
    let layout = (0..config.rows)
        .flat_map(|r| (0..config.cols).map(move |c| TileAddress::new(r, c)))
        .zip(layout.iter().copied())
        .collect();
    SyntheticSlide { slide_id: slide_id.to_string(), image, layout, base_mpp: config.base_mpp, tile_size: t }
}

/// Tile-aligned Voronoi regions: one seed per class plus one background
/// seed, each in its own tile, so every class appears at least once.
pub fn random_layout(config: &SyntheticConfig, seed: u64) -> Vec<Content> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n = (config.rows * config.cols) as usize;
    let mut kinds: Vec<Content> = TissueClass::ALL.iter().map(|c| Content::Tissue(*c)).collect();
    kinds.push(Content::Background);
    assert!(n >= kinds.len(), "slide too small for every class");
    let cells = rand::seq::index::sample(&mut rng, n, kinds.len()).into_vec();
    let seeds: Vec<(f64, f64, Content)> = cells
        .iter()
        .zip(kinds)
        .map(|(i, k)| ((i / config.cols as usize) as f64, (i % config.cols as usize) as f64, k))
        .collect();
    (0..n)
        .map(|i| {
            let (r, c) = ((i / config.cols as usize) as f64, (i % config.cols as usize) as f64);
            seeds
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 - r).powi(2) + (a.1 - c).powi(2);
                    let db = (b.0 - r).powi(2) + (b.1 - c).powi(2);
                    da.total_cmp(&db)
                })
                .unwrap()
                .2
        })
        .collect()
}

pub fn random_slide(slide_id: &str, config: &SyntheticConfig, seed: u64) -> SyntheticSlide {
    render(slide_id, &random_layout(config, seed), config, seed)
}

/// Every tile unseen except a background border column on the right.
pub fn unseen_slide(slide_id: &str, config: &SyntheticConfig, seed: u64) -> SyntheticSlide {
    let layout: Vec<Content> = (0..config.rows * config.cols)
        .map(|i| if i % config.cols == config.cols - 1 { Content::Background } else { Content::Unseen })
        .collect();
    render(slide_id, &layout, config, seed)
}

/// Labels a review grid from the truth map the way a careful annotator
/// would: a class when at least `min_agreement` of the shown tiles share
/// it, heterogeneous otherwise.
#[derive(Debug, Clone)]
pub struct ScriptedAnnotator {
    pub truth: BTreeMap<TileAddress, TissueClass>,
    pub min_agreement: f64,
}

impl ScriptedAnnotator {
    pub fn new(truth: BTreeMap<TileAddress, TissueClass>) -> Self {
        Self { truth, min_agreement: 24.0 / 25.0 }
    }

    pub fn decide(&self, tiles: &[TileAddress]) -> Decision {
        let mut counts = [0usize; crate::CLASS_COUNT];
        for t in tiles {
            if let Some(c) = self.truth.get(t) {
                counts[c.index()] += 1;
            }
        }
        let (best, n) = counts.iter().enumerate().max_by_key(|(i, n)| (**n, std::cmp::Reverse(*i))).unwrap();
        if !tiles.is_empty() && *n as f64 >= self.min_agreement * tiles.len() as f64 {
            Decision::Label(TissueClass::ALL[best])
        } else {
            Decision::Heterogeneous
        }
    }

    /// Drives a session through review, one recluster if needed, and
    /// finalization. Event times are `t0, t0 + 1, ...` ms.
    pub fn run_session(
        &self,
        session_id: &str,
        embeddings: &[Embedding],
        config: SessionConfig,
        actor: &str,
        t0: i64,
    ) -> Result<(AnnotationSession, LabeledSlide), SessionError> {
        let mut clock = t0;
        let mut tick = || {
            clock += 1;
            EventMeta::new(actor, Timestamp(clock))
        };
        let mut session = AnnotationSession::start(session_id, embeddings, config, tick())?;
        loop {
            for cluster in session.review_queue() {
                let grid = session.grid(cluster)?;
                session.review(cluster, self.decide(&grid.tiles), tick())?;
            }
            if session.round() == 1 && !session.heterogeneous_clusters().is_empty() {
                session.recluster(embeddings, config.seed.wrapping_add(1), tick())?;
                continue;
            }
            break;
        }
        let labeled = session.finalize(tick())?;
        Ok((session, labeled))
    }
}

/// Gaussian blobs around the first `k` basis vectors of `dim`-space.
/// Returns points and their blob ids.
pub fn basis_blobs(k: usize, dim: usize, per_blob: usize, sigma: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    assert!(k <= dim, "need k <= dim for basis centers");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).expect("sigma must be finite and non-negative");
    let mut points = Vec::with_capacity(k * per_blob);
    let mut labels = Vec::with_capacity(k * per_blob);
    for b in 0..k {
        for _ in 0..per_blob {
            let mut p: Vec<f64> = (0..dim).map(|_| noise.sample(&mut rng)).collect();
            p[b] += 1.0;
            points.push(p);
            labels.push(b);
        }
    }
    (points, labels)
}

/// Embeddings for `points`, laid out row-major over a square-ish grid.
pub fn point_embeddings(slide_id: &str, points: &[Vec<f64>]) -> Vec<Embedding> {
    let cols = (points.len() as f64).sqrt().ceil().max(1.0) as u32;
    points
        .iter()
        .enumerate()
        .map(|(i, p)| Embedding {
            slide_id: slide_id.to_string(),
            address: TileAddress::new(i as u32 / cols, i as u32 % cols),
            vector: p.clone(),
        })
        .collect()
}
