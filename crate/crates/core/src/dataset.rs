//! Synthetic identity corpus and PNG ingestion.
//!
//! An identity is a background texture plus two or three coloured glyphs
//! drawn in normalized coordinates, so one identity renders consistently at
//! any resolution. Jittered renders shift the whole image, scale brightness
//! and add Gaussian noise.

use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops::FilterType, ImageBuffer, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::text::{identity_token, COLOR_TOKENS, IDENTITY_SLOTS, SHAPE_TOKENS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_SIZE: usize = 32;
pub const MAX_SHIFT: i64 = 2;
pub const BRIGHTNESS_RANGE: f32 = 0.1;
pub const NOISE_STD: f64 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlyphKind {
    Disc,
    Square,
    Ring,
    Bar,
    Triangle,
}

impl GlyphKind {
    pub fn word(self) -> &'static str {
        SHAPE_TOKENS[self as usize]
    }
}

/// Nearest caption colour word: `grey`/`dark` for unsaturated colours,
/// otherwise one of six hue sectors.
pub fn color_word(rgb: [f32; 3]) -> &'static str {
    let max = rgb.iter().cloned().fold(f32::MIN, f32::max);
    let min = rgb.iter().cloned().fold(f32::MAX, f32::min);
    if max - min < 0.2 {
        return if max < 0.35 { COLOR_TOKENS[7] } else { COLOR_TOKENS[6] };
    }
    let [r, g, b] = rgb;
    let d = max - min;
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    COLOR_TOKENS[((h + 0.5).floor() as usize) % 6]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Glyph {
    pub kind: GlyphKind,
    /// Centre in `[0, 1]^2`.
    pub center: [f32; 2],
    /// Half-extent as a fraction of the image side.
    pub radius: f32,
    /// Index into the palette, never 0 (the background colour).
    pub color: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub id: usize,
    pub seed: u64,
    pub palette: [[f32; 3]; 3],
    /// Cycles of the background stripe pattern across the image.
    pub texture_freq: f32,
    pub texture_angle: f32,
    pub glyphs: Vec<Glyph>,
}

fn mix_seed(root: u64, id: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update((id as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

impl IdentitySpec {
    /// Generative parameters are a pure function of `(id, root_seed)`.
    pub fn new(id: usize, root_seed: u64) -> Self {
        let seed = mix_seed(root_seed, id);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut palette = [[0.0f32; 3]; 3];
        let level = rng.gen_range(0.45..0.75);
        for v in palette[0].iter_mut() {
            *v = level + rng.gen_range(-0.08..0.08);
        }
        for c in palette[1..].iter_mut() {
            for v in c.iter_mut() {
                *v = rng.gen_range(0.05..0.95);
            }
        }
        let kinds = [GlyphKind::Disc, GlyphKind::Square, GlyphKind::Ring, GlyphKind::Bar, GlyphKind::Triangle];
        let count = rng.gen_range(2..=3);
        let glyphs = (0..count)
            .map(|k| Glyph {
                kind: kinds[rng.gen_range(0..kinds.len())],
                center: [rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75)],
                radius: rng.gen_range(0.12..0.26),
                color: 1 + k % 2,
            })
            .collect();
        Self {
            id,
            seed,
            palette,
            texture_freq: rng.gen_range(1.0..4.0),
            texture_angle: rng.gen_range(0.0..std::f32::consts::PI),
            glyphs,
        }
    }

    /// `a photo of a <background> <glyph colour> <glyph> person`.
    pub fn caption(&self) -> String {
        let g = &self.glyphs[0];
        format!(
            "a photo of a {} {} {} person",
            color_word(self.palette[0]),
            color_word(self.palette[g.color]),
            g.kind.word()
        )
    }

    fn glyph_at(&self, u: f32, v: f32) -> Option<usize> {
        let mut hit = None;
        for g in &self.glyphs {
            let (dx, dy) = (u - g.center[0], v - g.center[1]);
            let r = g.radius;
            let inside = match g.kind {
                GlyphKind::Disc => dx * dx + dy * dy <= r * r,
                GlyphKind::Square => dx.abs() <= r && dy.abs() <= r,
                GlyphKind::Ring => {
                    let d = (dx * dx + dy * dy).sqrt();
                    d <= r && d >= 0.55 * r
                }
                GlyphKind::Bar => dx.abs() <= r && dy.abs() <= 0.35 * r,
                GlyphKind::Triangle => dy <= r && dy >= -r && dx.abs() <= (dy + r) * 0.5,
            };
            if inside {
                hit = Some(g.color);
            }
        }
        hit
    }

    /// Noise-free image, `[3, size, size]`.
    pub fn canonical(&self, size: usize) -> Tensor<f32> {
        let (ca, sa) = (self.texture_angle.cos(), self.texture_angle.sin());
        let mut out = Tensor::zeros(&[3, size, size]);
        let plane = size * size;
        let data = out.data_mut();
        for y in 0..size {
            for x in 0..size {
                let u = (x as f32 + 0.5) / size as f32;
                let v = (y as f32 + 0.5) / size as f32;
                let color = match self.glyph_at(u, v) {
                    Some(c) => self.palette[c],
                    None => {
                        let phase = 2.0 * std::f32::consts::PI * self.texture_freq * (u * ca + v * sa);
                        let shade = 0.8 + 0.2 * phase.sin();
                        self.palette[0].map(|c| c * shade)
                    }
                };
                for ch in 0..3 {
                    data[ch * plane + y * size + x] = color[ch];
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub size: usize,
    pub jitter: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { size: DEFAULT_SIZE, jitter: true }
    }
}

/// `n` renders of one identity, `[n, 3, size, size]` in `[0, 1]`.
pub fn render_identity(spec: &IdentitySpec, variation_seed: u64, n: usize, opts: RenderOptions) -> Tensor<f32> {
    let s = opts.size;
    let base = spec.canonical(s);
    if !opts.jitter {
        let imgs: Vec<_> = (0..n).map(|_| base.clone()).collect();
        return Tensor::stack(&imgs).expect("equal shapes");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(variation_seed ^ spec.seed.rotate_left(17));
    let noise = Normal::new(0.0, NOISE_STD).unwrap();
    let plane = s * s;
    let imgs: Vec<_> = (0..n)
        .map(|_| {
            let m = (MAX_SHIFT * s as i64 / DEFAULT_SIZE as i64).max(1);
            let dx = rng.gen_range(-m..=m);
            let dy = rng.gen_range(-m..=m);
            let gain = 1.0 + rng.gen_range(-BRIGHTNESS_RANGE..=BRIGHTNESS_RANGE);
            let src = base.data();
            let mut img = Tensor::zeros(&[3, s, s]);
            for ch in 0..3 {
                for y in 0..s {
                    let sy = (y as i64 - dy).clamp(0, s as i64 - 1) as usize;
                    for x in 0..s {
                        let sx = (x as i64 - dx).clamp(0, s as i64 - 1) as usize;
                        let v = src[ch * plane + sy * s + sx] * gain + noise.sample(&mut rng) as f32;
                        img.data_mut()[ch * plane + y * s + x] = v.clamp(0.0, 1.0);
                    }
                }
            }
            img
        })
        .collect();
    Tensor::stack(&imgs).expect("equal shapes")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityEntry {
    pub id: usize,
    pub seed: u64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub root_seed: u64,
    pub identities: Vec<IdentityEntry>,
}

/// Labelled corpus: images `[ids * per_id, 3, s, s]`, class labels counted
/// from 0 in identity order, and one caption per class.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub captions: Vec<String>,
    pub manifest: CorpusManifest,
}

impl Corpus {
    /// Images of class `k`.
    pub fn class_images(&self, k: usize) -> Result<Tensor<f32>> {
        let idx: Vec<usize> = (0..self.labels.len()).filter(|&i| self.labels[i] == k).collect();
        Ok(self.images.select_outer(&idx)?)
    }

    /// Per-class images with their pretraining prompts: the identity token
    /// alone and together with the attribute words.
    pub fn prompt_groups(&self) -> Result<Vec<(Tensor<f32>, Vec<String>)>> {
        if self.captions.len() > IDENTITY_SLOTS {
            return Err(Error::Config(format!(
                "{} identities exceed the {IDENTITY_SLOTS} identity tokens",
                self.captions.len()
            )));
        }
        (0..self.captions.len())
            .map(|k| {
                let tok = identity_token(k);
                let attrs = self.captions[k].trim_start_matches("a photo of a ").trim_end_matches(" person");
                let prompts = vec![format!("a photo of {tok} person"), format!("a photo of {tok} {attrs} person")];
                Ok((self.class_images(k)?, prompts))
            })
            .collect()
    }
}

/// Identities `0..identities`.
pub fn build_corpus(root_seed: u64, identities: usize, per_id: usize, size: usize) -> Corpus {
    build_corpus_range(root_seed, 0..identities, per_id, size)
}

pub fn build_corpus_range(root_seed: u64, ids: std::ops::Range<usize>, per_id: usize, size: usize) -> Corpus {
    let mut imgs = Vec::with_capacity(ids.len());
    let mut labels = Vec::with_capacity(ids.len() * per_id);
    let mut captions = Vec::with_capacity(ids.len());
    let mut entries = Vec::with_capacity(ids.len());
    for (k, id) in ids.enumerate() {
        let spec = IdentitySpec::new(id, root_seed);
        imgs.push(render_identity(&spec, root_seed, per_id, RenderOptions { size, jitter: true }));
        labels.extend(std::iter::repeat(k).take(per_id));
        captions.push(spec.caption());
        entries.push(IdentityEntry { id, seed: spec.seed, n: per_id });
    }
    let images = concat_batches(&imgs);
    Corpus { images, labels, captions, manifest: CorpusManifest { root_seed, identities: entries } }
}

/// Concatenates image batches along the batch axis.
pub fn concat_batches(parts: &[Tensor<f32>]) -> Tensor<f32> {
    Tensor::stack_outer(parts).expect("equal image shapes")
}

fn to_rgb(img: &Tensor<f32>) -> Result<RgbImage> {
    let d = img.dims();
    if d.len() != 3 || d[0] != 3 {
        return Err(Error::Config(format!("expected a [3, h, w] image, got {d:?}")));
    }
    let (h, w) = (d[1], d[2]);
    let plane = h * w;
    let data = img.data();
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([0, 1, 2].map(|c| (data[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8))
    }))
}

fn from_rgb(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut out = Tensor::zeros(&[3, h, w]);
    let data = out.data_mut();
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * plane + i] = p[c] as f32 / 255.0;
        }
    }
    out
}

/// Quantizes a batch to 8 bits and back, the same rounding `save_png` uses.
pub fn quantize_8bit(batch: &Tensor<f32>) -> Tensor<f32> {
    batch.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

/// Writes `run_{i:04}.png` for every image of an NCHW batch.
pub fn save_png(batch: &Tensor<f32>, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..batch.dims()[0])
        .map(|i| {
            let path = dir.join(format!("run_{i:04}.png"));
            to_rgb(&batch.index_outer(i)?)?
                .save(&path)
                .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
            Ok(path)
        })
        .collect()
}

/// Tiles a batch into one PNG, `cols` images per row.
pub fn save_grid(batch: &Tensor<f32>, cols: usize, path: &Path) -> Result<()> {
    let d = batch.dims();
    let (n, h, w) = (d[0], d[2], d[3]);
    let cols = cols.clamp(1, n.max(1));
    let rows = n.div_ceil(cols);
    let mut grid = RgbImage::new((cols * w) as u32, (rows * h) as u32);
    for i in 0..n {
        let tile = to_rgb(&batch.index_outer(i)?)?;
        image::imageops::replace(&mut grid, &tile, ((i % cols) * w) as i64, ((i / cols) * h) as i64);
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    grid.save(path).map_err(|e| Error::io(path, std::io::Error::other(e)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestedFile {
    pub name: String,
    pub sha256: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestManifest {
    pub size: usize,
    pub files: Vec<IngestedFile>,
}

/// Loads every `*.png` in `dir` in name order, bilinearly resized to
/// `size x size`.
pub fn load_folder(dir: &Path, size: usize) -> Result<(Tensor<f32>, IngestManifest)> {
    let ingest = |file: &str, msg: String| Error::Ingestion { file: PathBuf::from(file), msg };
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(ingest(&dir.display().to_string(), "no PNG files".into()));
    }
    let mut imgs = Vec::with_capacity(paths.len());
    let mut files = Vec::with_capacity(paths.len());
    for p in &paths {
        let name = p.file_name().unwrap().to_string_lossy().into_owned();
        let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
        let decoded = image::load_from_memory(&bytes).map_err(|e| ingest(&name, e.to_string()))?.to_rgb8();
        let (width, height) = decoded.dimensions();
        let resized = if (width as usize, height as usize) == (size, size) {
            decoded
        } else {
            image::imageops::resize(&decoded, size as u32, size as u32, FilterType::Triangle)
        };
        imgs.push(from_rgb(&resized));
        files.push(IngestedFile { name, sha256: hex::encode(Sha256::digest(&bytes)), width, height });
    }
    Ok((Tensor::stack(&imgs)?, IngestManifest { size, files }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_identity_and_seed_is_bitwise_identical() {
        let a = render_identity(&IdentitySpec::new(3, 9), 1, 4, RenderOptions::default());
        let b = render_identity(&IdentitySpec::new(3, 9), 1, 4, RenderOptions::default());
        assert_eq!(a, b);
        assert_eq!(a.dims(), &[4, 3, 32, 32]);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn captions_use_vocabulary_words() {
        let v = crate::diffusion::text::Vocabulary::default();
        for id in 0..50 {
            let c = IdentitySpec::new(id, 4).caption();
            assert_eq!(v.encode(&c).unwrap().len(), 8, "{c}");
        }
        assert_eq!(color_word([0.9, 0.1, 0.1]), "red");
        assert_eq!(color_word([0.1, 0.8, 0.2]), "green");
        assert_eq!(color_word([0.2, 0.2, 0.25]), "dark");
        assert_eq!(color_word([0.7, 0.7, 0.7]), "grey");
    }

    #[test]
    fn zero_jitter_gives_identical_images() {
        let a = render_identity(&IdentitySpec::new(0, 1), 5, 3, RenderOptions { size: 16, jitter: false });
        assert_eq!(a.index_outer(0).unwrap(), a.index_outer(1).unwrap());
        assert_eq!(a.index_outer(1).unwrap(), a.index_outer(2).unwrap());
    }

    fn mean_abs(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.numel() as f64
    }

    #[test]
    fn identities_are_farther_apart_than_their_renders() {
        let c = build_corpus(0, 10, 8, 32);
        let (mut inter, mut n_inter, mut intra, mut n_intra) = (0.0, 0, 0.0, 0);
        for i in 0..80 {
            for j in (i + 1)..80 {
                let d = mean_abs(&c.images.index_outer(i).unwrap(), &c.images.index_outer(j).unwrap());
                if c.labels[i] == c.labels[j] {
                    intra += d;
                    n_intra += 1;
                } else {
                    inter += d;
                    n_inter += 1;
                }
            }
        }
        assert!(inter / n_inter as f64 > intra / n_intra as f64);
    }

    fn ramp(n: usize, size: usize) -> Tensor<f32> {
        Tensor::from_fn(&[n, 3, size, size], |i| ((i * 37 % 101) as f32) / 100.0)
    }

    #[test]
    fn png_round_trip_is_within_one_level() {
        let dir = tempfile::tempdir().unwrap();
        let x = ramp(3, 6);
        let paths = save_png(&x, dir.path()).unwrap();
        let names: Vec<_> = paths.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
        assert_eq!(names, ["run_0000.png", "run_0001.png", "run_0002.png"]);
        let (y, manifest) = load_folder(dir.path(), 6).unwrap();
        assert_eq!(y.dims(), x.dims());
        let worst = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(worst <= 0.5 / 255.0 + 1e-6, "{worst}");
        assert_eq!(y, quantize_8bit(&x));
        assert_eq!(manifest.files.len(), 3);
        assert!(manifest.files.iter().all(|f| (f.width, f.height) == (6, 6) && f.sha256.len() == 64));
    }

    #[test]
    fn folders_without_pngs_are_an_ingestion_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("notes.txt"), "x").unwrap();
        assert!(matches!(load_folder(dir.path(), 4), Err(Error::Ingestion { .. })));
    }

    #[test]
    fn undecodable_files_are_named() {
        let dir = tempfile::tempdir().unwrap();
        save_png(&ramp(1, 4), dir.path()).unwrap();
        fs::write(dir.path().join("broken.png"), b"not an image").unwrap();
        match load_folder(dir.path(), 4) {
            Err(Error::Ingestion { file, .. }) => assert_eq!(file, PathBuf::from("broken.png")),
            other => panic!("expected an ingestion error, got {:?}", other.map(|(_, m)| m)),
        }
    }

    #[test]
    fn mixed_sizes_are_resized_to_the_target() {
        let dir = tempfile::tempdir().unwrap();
        save_png(&ramp(1, 4), &dir.path().join("a")).unwrap();
        save_png(&Tensor::from_fn(&[1, 3, 12, 12], |_| 0.25), &dir.path().join("b")).unwrap();
        fs::rename(dir.path().join("a/run_0000.png"), dir.path().join("small.png")).unwrap();
        fs::rename(dir.path().join("b/run_0000.png"), dir.path().join("large.png")).unwrap();
        let (y, manifest) = load_folder(dir.path(), 8).unwrap();
        assert_eq!(y.dims(), &[2, 3, 8, 8]);
        let sizes: Vec<_> = manifest.files.iter().map(|f| (f.name.as_str(), f.width)).collect();
        assert_eq!(sizes, [("large.png", 12), ("small.png", 4)]);
        let flat = y.index_outer(0).unwrap();
        assert!(flat.data().iter().all(|v| (v - 64.0 / 255.0).abs() < 1e-6));
    }

    #[test]
    fn grids_tile_row_major() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g/grid.png");
        save_grid(&ramp(5, 4), 2, &path).unwrap();
        let img = image::open(&path).unwrap();
        assert_eq!((img.width(), img.height()), (8, 12));
    }
}
