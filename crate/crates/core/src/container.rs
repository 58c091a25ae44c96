//! Token videos: in-memory representation, the `OTTV` container and a
//! deterministic fixture generator.
//!
//! Container layout (all little-endian):
//!
//! ```text
//! "OTTV"                 4 bytes magic
//! version                u32, = 1
//! T, N_v, d, rows, cols  u32 each
//! features               T·N_v·d f32, frame-major, then token, then channel
//! saliency               T·N_v f32
//! ```
//!
//! Tokens within a frame follow the row-major order of the patch grid.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

pub const MAGIC: [u8; 4] = *b"OTTV";
pub const VERSION: u32 = 1;

/// Saliency sums farther than this from 1 are rejected at ingestion.
pub const SALIENCY_REJECT_TOL: f64 = 1e-3;
/// Saliency sums farther than this from 1 (but within the reject tolerance)
/// are renormalized.
pub const SALIENCY_RENORM_TOL: f64 = 1e-6;

/// Position of a token on the patch grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridPosition {
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
}

impl Grid {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn position(&self, index: usize) -> GridPosition {
        GridPosition {
            row: index / self.cols,
            col: index % self.cols,
        }
    }

    pub fn index(&self, pos: GridPosition) -> usize {
        pos.row * self.cols + pos.col
    }

    /// The most square factorization `rows × cols = n` with `rows ≤ cols`.
    pub fn squarest(n: usize) -> Self {
        let mut rows = (n as f64).sqrt() as usize;
        while rows > 1 && !n.is_multiple_of(rows) {
            rows -= 1;
        }
        let rows = rows.max(1);
        Self::new(rows, n / rows)
    }
}

/// `T` frames of `N_v` tokens, each a `d`-dimensional embedding, plus a
/// per-token saliency that sums to one within each frame.
///
/// Immutable once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenVideo {
    frames: usize,
    tokens: usize,
    dim: usize,
    grid: Grid,
    features: Vec<f32>,
    saliency: Vec<f32>,
}

impl TokenVideo {
    /// Validates and builds a video. Saliency within [`SALIENCY_REJECT_TOL`]
    /// of unit sum is renormalized per frame; anything farther is rejected.
    pub fn new(
        frames: usize,
        tokens: usize,
        dim: usize,
        grid: Grid,
        features: Vec<f32>,
        mut saliency: Vec<f32>,
    ) -> Result<Self> {
        if frames == 0 || tokens == 0 || dim == 0 {
            return Err(Error::InvalidDimensions(format!(
                "T={frames}, N_v={tokens}, d={dim} must all be positive"
            )));
        }
        if grid.rows == 0 || grid.cols == 0 || grid.len() != tokens {
            return Err(Error::GridMismatch {
                rows: grid.rows,
                cols: grid.cols,
                tokens,
            });
        }
        if features.len() != frames * tokens * dim {
            return Err(Error::InvalidDimensions(format!(
                "expected {} feature values, got {}",
                frames * tokens * dim,
                features.len()
            )));
        }
        if saliency.len() != frames * tokens {
            return Err(Error::InvalidDimensions(format!(
                "expected {} saliency values, got {}",
                frames * tokens,
                saliency.len()
            )));
        }

        for (row, chunk) in features.chunks_exact(dim).enumerate() {
            let (frame, token) = (row / tokens, row % tokens);
            if chunk.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "features",
                    frame,
                    token,
                });
            }
            if chunk.iter().all(|&v| v == 0.0) {
                return Err(Error::ZeroNormToken { frame, token });
            }
        }

        for (frame, w) in saliency.chunks_exact_mut(tokens).enumerate() {
            if let Some(token) = w.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "saliency",
                    frame,
                    token,
                });
            }
            if w.iter().any(|&v| v < 0.0) {
                return Err(Error::param("saliency", format!("negative entry in frame {frame}")));
            }
            let sum: f64 = w.iter().map(|&v| v as f64).sum();
            if (sum - 1.0).abs() > SALIENCY_REJECT_TOL {
                return Err(Error::SaliencySum { frame, sum });
            }
            if (sum - 1.0).abs() > SALIENCY_RENORM_TOL {
                for v in w.iter_mut() {
                    *v = (*v as f64 / sum) as f32;
                }
            }
        }

        Ok(Self {
            frames,
            tokens,
            dim,
            grid,
            features,
            saliency,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn saliency(&self) -> &[f32] {
        &self.saliency
    }

    pub fn token(&self, frame: usize, index: usize) -> &[f32] {
        let start = (frame * self.tokens + index) * self.dim;
        &self.features[start..start + self.dim]
    }

    pub fn frame_saliency(&self, frame: usize) -> &[f32] {
        &self.saliency[frame * self.tokens..(frame + 1) * self.tokens]
    }

    /// Tokens of one frame widened to `f64`.
    pub fn frame_tokens(&self, frame: usize) -> Vec<Vec<f64>> {
        (0..self.tokens)
            .map(|i| self.token(frame, i).iter().map(|&v| v as f64).collect())
            .collect()
    }

    pub fn frame_saliency_f64(&self, frame: usize) -> Vec<f64> {
        self.frame_saliency(frame).iter().map(|&v| v as f64).collect()
    }

    /// Same video with every saliency replaced by `1 / N_v`.
    pub fn with_uniform_saliency(&self) -> Self {
        let w = 1.0 / self.tokens as f32;
        Self {
            saliency: vec![w; self.saliency.len()],
            ..self.clone()
        }
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(&MAGIC)?;
        out.write_u32::<LittleEndian>(VERSION)?;
        for v in [self.frames, self.tokens, self.dim, self.grid.rows, self.grid.cols] {
            out.write_u32::<LittleEndian>(to_u32(v)?)?;
        }
        for &v in &self.features {
            out.write_f32::<LittleEndian>(v)?;
        }
        for &v in &self.saliency {
            out.write_f32::<LittleEndian>(v)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = input.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let mut header = [0usize; 5];
        for h in header.iter_mut() {
            *h = input.read_u32::<LittleEndian>()? as usize;
        }
        let [frames, tokens, dim, rows, cols] = header;
        let grid = Grid::new(rows, cols);
        if rows * cols != tokens {
            return Err(Error::GridMismatch { rows, cols, tokens });
        }
        let n_features = frames
            .checked_mul(tokens)
            .and_then(|v| v.checked_mul(dim))
            .ok_or_else(|| Error::InvalidDimensions("header overflows".into()))?;
        let mut features = vec![0f32; n_features];
        input.read_f32_into::<LittleEndian>(&mut features)?;
        let mut saliency = vec![0f32; frames * tokens];
        input.read_f32_into::<LittleEndian>(&mut saliency)?;
        Self::new(frames, tokens, dim, grid, features, saliency)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidDimensions(format!("{v} does not fit in u32")))
}

/// Reads and validates an `OTTV` container. A manifest sidecar, if present,
/// is not consulted.
pub fn load_container(path: impl AsRef<Path>) -> Result<TokenVideo> {
    TokenVideo::read_from(BufReader::new(File::open(path)?))
}

/// `foo.ottv` → `foo.json`.
pub fn manifest_path(container: &Path) -> PathBuf {
    container.with_extension("json")
}

pub fn write_manifest(container: &Path, manifest: &serde_json::Value) -> Result<()> {
    let file = BufWriter::new(File::create(manifest_path(container))?);
    serde_json::to_writer_pretty(file, manifest)?;
    Ok(())
}

/// Motion profile of a synthetic video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Every frame is a bitwise copy of frame 0.
    Static,
    /// Content slides by one grid column per frame.
    Panning,
    /// Two token pools with mild per-frame jitter, switching at `T/2`.
    SceneCut,
    /// Independent frames.
    Random,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(Profile::Static),
            "panning" => Ok(Profile::Panning),
            "scene_cut" | "scene-cut" => Ok(Profile::SceneCut),
            "random" => Ok(Profile::Random),
            other => Err(Error::param("profile", format!("unknown profile {other:?}"))),
        }
    }
}

const SCENE_JITTER: f64 = 0.1;

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if math::norm(&v) > 1e-6 {
            return math::unit(&v);
        }
    }
}

fn dirichlet_uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|v| v / total).collect()
}

fn jitter(rng: &mut ChaCha8Rng, base: &[f64]) -> Vec<f64> {
    let noise = unit_gaussian(rng, base.len());
    let v: Vec<f64> = base.iter().zip(&noise).map(|(b, n)| b + SCENE_JITTER * n).collect();
    math::unit(&v)
}

/// Builds a deterministic fixture video on the most square grid for `tokens`.
pub fn synthesize_video(profile: Profile, frames: usize, tokens: usize, dim: usize, seed: u64) -> Result<TokenVideo> {
    if frames == 0 || tokens == 0 || dim == 0 {
        return Err(Error::InvalidDimensions(format!(
            "T={frames}, N_v={tokens}, d={dim} must all be positive"
        )));
    }
    let grid = Grid::squarest(tokens);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut frame_tokens: Vec<Vec<Vec<f64>>> = Vec::with_capacity(frames);
    let mut frame_saliency: Vec<Vec<f64>> = Vec::with_capacity(frames);

    match profile {
        Profile::Static => {
            let tokens0: Vec<_> = (0..tokens).map(|_| unit_gaussian(&mut rng, dim)).collect();
            let w0 = dirichlet_uniform(&mut rng, tokens);
            for _ in 0..frames {
                frame_tokens.push(tokens0.clone());
                frame_saliency.push(w0.clone());
            }
        }
        Profile::Panning => {
            let width = grid.cols + frames - 1;
            let canvas: Vec<_> = (0..grid.rows * width).map(|_| unit_gaussian(&mut rng, dim)).collect();
            let canvas_w = dirichlet_uniform(&mut rng, grid.rows * width);
            for t in 0..frames {
                let idx = |i: usize| {
                    let p = grid.position(i);
                    p.row * width + p.col + t
                };
                frame_tokens.push((0..tokens).map(|i| canvas[idx(i)].clone()).collect());
                let w: Vec<f64> = (0..tokens).map(|i| canvas_w[idx(i)]).collect();
                let total: f64 = w.iter().sum();
                frame_saliency.push(w.into_iter().map(|v| v / total).collect());
            }
        }
        Profile::SceneCut => {
            let pool_a: Vec<_> = (0..tokens).map(|_| unit_gaussian(&mut rng, dim)).collect();
            let pool_b: Vec<_> = (0..tokens).map(|_| unit_gaussian(&mut rng, dim)).collect();
            for t in 0..frames {
                let pool = if t < frames / 2 { &pool_a } else { &pool_b };
                frame_tokens.push(pool.iter().map(|b| jitter(&mut rng, b)).collect());
                frame_saliency.push(dirichlet_uniform(&mut rng, tokens));
            }
        }
        Profile::Random => {
            for _ in 0..frames {
                frame_tokens.push((0..tokens).map(|_| unit_gaussian(&mut rng, dim)).collect());
                frame_saliency.push(dirichlet_uniform(&mut rng, tokens));
            }
        }
    }

    let features = frame_tokens.iter().flatten().flatten().map(|&v| v as f32).collect();
    let saliency = frame_saliency.iter().flatten().map(|&v| v as f32).collect();
    TokenVideo::new(frames, tokens, dim, grid, features, saliency)
}

/// Mean cosine similarity between co-located tokens of frames `pair` and
/// `pair + 1`, clamped to `[0, 1]`.
pub fn colocated_similarity(video: &TokenVideo, pair: usize) -> Result<f64> {
    if pair + 1 >= video.frames() {
        return Err(Error::param(
            "pair",
            format!("pair {pair} out of range for {} frames", video.frames()),
        ));
    }
    let n = video.tokens_per_frame();
    let total: f64 = (0..n)
        .map(|i| {
            let a: Vec<f64> = video.token(pair, i).iter().map(|&v| v as f64).collect();
            let b: Vec<f64> = video.token(pair + 1, i).iter().map(|&v| v as f64).collect();
            math::cosine(&a, &b)
        })
        .sum();
    Ok((total / n as f64).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(saliency: Vec<f32>) -> Result<TokenVideo> {
        let features = (0..2 * 4 * 3).map(|v| v as f32 + 1.0).collect();
        TokenVideo::new(2, 4, 3, Grid::new(2, 2), features, saliency)
    }

    #[test]
    fn roundtrip_through_bytes() {
        let v = tiny(vec![0.25; 8]).unwrap();
        let mut buf = Vec::new();
        v.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 4 + 20 + 24 * 4 + 8 * 4);
        let back = TokenVideo::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, v);
        assert_eq!((back.frames(), back.tokens_per_frame(), back.dim()), (2, 4, 3));
        assert_eq!(back.grid(), Grid::new(2, 2));
    }

    #[test]
    fn grid_must_cover_tokens() {
        let v = tiny(vec![0.25; 8]).unwrap();
        let mut buf = Vec::new();
        v.write_to(&mut buf).unwrap();
        // cols field lives at byte offset 24
        buf[24..28].copy_from_slice(&3u32.to_le_bytes());
        let err = TokenVideo::read_from(buf.as_slice()).unwrap_err();
        assert_eq!(err.code(), "grid_mismatch");
    }

    #[test]
    fn bad_magic_and_version() {
        let v = tiny(vec![0.25; 8]).unwrap();
        let mut buf = Vec::new();
        v.write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(TokenVideo::read_from(bad.as_slice()), Err(Error::BadMagic(_))));
        let mut bad = buf;
        bad[4] = 2;
        assert!(matches!(
            TokenVideo::read_from(bad.as_slice()),
            Err(Error::UnsupportedVersion(2))
        ));
    }

    #[test]
    fn saliency_out_of_tolerance_is_rejected() {
        let mut w = vec![0.25; 8];
        w[0] = 0.15; // frame 0 sums to 0.9
        let err = tiny(w).unwrap_err();
        assert!(matches!(err, Error::SaliencySum { frame: 0, .. }), "{err}");
    }

    #[test]
    fn small_saliency_drift_is_renormalized() {
        let mut w = vec![0.25; 8];
        w[1] = 0.2505;
        let v = tiny(w).unwrap();
        let sum: f64 = v.frame_saliency_f64(0).iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_zero_norm_and_non_finite() {
        let mut f: Vec<f32> = vec![1.0; 24];
        f[3..6].fill(0.0);
        let err = TokenVideo::new(2, 4, 3, Grid::new(2, 2), f, vec![0.25; 8]).unwrap_err();
        assert!(matches!(err, Error::ZeroNormToken { frame: 0, token: 1 }));

        let mut f: Vec<f32> = vec![1.0; 24];
        f[20] = f32::NAN;
        let err = TokenVideo::new(2, 4, 3, Grid::new(2, 2), f, vec![0.25; 8]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { frame: 1, token: 2, .. }));
    }

    #[test]
    fn truncated_file_is_an_io_error() {
        let v = tiny(vec![0.25; 8]).unwrap();
        let mut buf = Vec::new();
        v.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(TokenVideo::read_from(buf.as_slice()), Err(Error::Io(_))));
    }

    #[test]
    fn static_profile_repeats_frame_zero() {
        let v = synthesize_video(Profile::Static, 4, 16, 8, 7).unwrap();
        for t in 1..4 {
            for i in 0..16 {
                assert_eq!(v.token(t, i), v.token(0, i));
            }
            assert_eq!(v.frame_saliency(t), v.frame_saliency(0));
            assert_eq!(colocated_similarity(&v, t - 1).unwrap(), 1.0);
        }
    }

    #[test]
    fn synthesis_is_deterministic() {
        for p in [Profile::Static, Profile::Panning, Profile::SceneCut, Profile::Random] {
            let a = synthesize_video(p, 5, 12, 4, 42).unwrap();
            let b = synthesize_video(p, 5, 12, 4, 42).unwrap();
            assert_eq!(a, b);
            let c = synthesize_video(p, 5, 12, 4, 43).unwrap();
            assert_ne!(a, c);
        }
    }

    #[test]
    fn panning_shifts_one_column_per_frame() {
        let v = synthesize_video(Profile::Panning, 3, 12, 4, 1).unwrap();
        let g = v.grid();
        assert_eq!(g, Grid::new(3, 4));
        for t in 0..2 {
            for r in 0..g.rows {
                for c in 1..g.cols {
                    let here = g.index(GridPosition { row: r, col: c });
                    let left = g.index(GridPosition { row: r, col: c - 1 });
                    assert_eq!(v.token(t, here), v.token(t + 1, left));
                }
            }
        }
    }

    #[test]
    fn scene_cut_drops_colocated_similarity_at_the_cut() {
        let v = synthesize_video(Profile::SceneCut, 8, 64, 16, 3).unwrap();
        let within = colocated_similarity(&v, 2).unwrap();
        let across = colocated_similarity(&v, 3).unwrap();
        assert!(across < within, "across={across} within={within}");
        assert!(within > 0.9);
    }

    #[test]
    fn colocated_similarity_known_values() {
        let grid = Grid::new(1, 2);
        // orthogonal rotation of every token
        let f = vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, -1.0, 0.0];
        let v = TokenVideo::new(2, 2, 2, grid, f, vec![0.5; 4]).unwrap();
        assert_eq!(colocated_similarity(&v, 0).unwrap(), 0.0);

        // half identical, half orthogonal
        let f = vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
        let v = TokenVideo::new(2, 2, 2, grid, f, vec![0.5; 4]).unwrap();
        assert!((colocated_similarity(&v, 0).unwrap() - 0.5).abs() < 1e-12);

        assert!(colocated_similarity(&v, 1).is_err());
    }

    #[test]
    fn colocated_similarity_is_symmetric_and_scale_invariant() {
        let v = synthesize_video(Profile::Random, 2, 9, 5, 11).unwrap();
        let s = colocated_similarity(&v, 0).unwrap();

        let n = 9 * 5;
        let mut swapped = v.features()[n..].to_vec();
        swapped.extend_from_slice(&v.features()[..n]);
        let mut w = v.saliency()[9..].to_vec();
        w.extend_from_slice(&v.saliency()[..9]);
        let rev = TokenVideo::new(2, 9, 5, v.grid(), swapped, w).unwrap();
        assert_eq!(colocated_similarity(&rev, 0).unwrap(), s);

        let scaled: Vec<f32> = v
            .features()
            .chunks(5)
            .enumerate()
            .flat_map(|(i, c)| c.iter().map(move |x| x * (1u32 << (i % 4)) as f32))
            .collect();
        let sv = TokenVideo::new(2, 9, 5, v.grid(), scaled, v.saliency().to_vec()).unwrap();
        assert!((colocated_similarity(&sv, 0).unwrap() - s).abs() < 1e-12);
    }

    #[test]
    fn uniform_saliency_override() {
        let v = synthesize_video(Profile::Random, 2, 8, 3, 0)
            .unwrap()
            .with_uniform_saliency();
        assert!(v.saliency().iter().all(|&w| w == 0.125));
    }

    #[test]
    fn squarest_grid() {
        assert_eq!(Grid::squarest(196), Grid::new(14, 14));
        assert_eq!(Grid::squarest(12), Grid::new(3, 4));
        assert_eq!(Grid::squarest(7), Grid::new(1, 7));
        assert_eq!(Grid::squarest(1), Grid::new(1, 1));
    }
}
