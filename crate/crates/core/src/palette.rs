//! Palettes of single colors or equal-size tiles, palette files, K-means
//! extraction from an image and tile-directory loading.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::{self, Image};

/// One palette element: an `h x w` RGB bitmap with channels in [0, 1].
/// Plain colors are 1x1.
#[derive(Clone, Debug, PartialEq)]
pub struct PaletteElement {
    height: usize,
    width: usize,
    pixels: Vec<[f64; 3]>,
}

impl PaletteElement {
    pub fn color(rgb: [f64; 3]) -> Self {
        PaletteElement {
            height: 1,
            width: 1,
            pixels: vec![rgb],
        }
    }

    pub fn tile(height: usize, width: usize, pixels: Vec<[f64; 3]>) -> Result<Self> {
        if pixels.len() != height * width || pixels.is_empty() {
            return Err(Error::shape("PaletteElement::tile", height * width, pixels.len()));
        }
        Ok(PaletteElement {
            height,
            width,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Row-major tile pixels.
    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.pixels
    }

    pub fn mean_color(&self) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for p in &self.pixels {
            for c in 0..3 {
                acc[c] += p[c];
            }
        }
        let n = self.pixels.len() as f64;
        acc.map(|v| v / n)
    }

    fn bits(&self) -> Vec<u64> {
        self.pixels.iter().flat_map(|p| p.map(f64::to_bits)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Palette {
    name: String,
    elements: Vec<PaletteElement>,
}

impl Palette {
    /// Validates element count, shared dimensions, channel range and distinctness.
    pub fn new(name: impl Into<String>, elements: Vec<PaletteElement>) -> Result<Self> {
        if elements.len() < 2 {
            return Err(Error::PaletteTooSmall(elements.len()));
        }
        let (h, w) = (elements[0].height, elements[0].width);
        for (i, e) in elements.iter().enumerate() {
            if (e.height, e.width) != (h, w) {
                return Err(Error::MixedDimensions {
                    index: i,
                    got_h: e.height,
                    got_w: e.width,
                    want_h: h,
                    want_w: w,
                });
            }
            if e.pixels.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidArgument(format!(
                    "palette element {i} has channel values outside [0, 1]"
                )));
            }
        }
        let keys: Vec<Vec<u64>> = elements.iter().map(PaletteElement::bits).collect();
        for i in 0..keys.len() {
            for j in i + 1..keys.len() {
                if keys[i] == keys[j] {
                    return Err(Error::DuplicateElement(i, j));
                }
            }
        }
        Ok(Palette {
            name: name.into(),
            elements,
        })
    }

    pub fn from_colors(name: impl Into<String>, colors: &[[f64; 3]]) -> Result<Self> {
        Self::new(name, colors.iter().map(|&c| PaletteElement::color(c)).collect())
    }

    /// `n` fully saturated colors evenly spaced around the hue circle,
    /// starting at red. Used when neither a palette nor an image is given.
    pub fn hue_wheel(n: usize) -> Result<Self> {
        let colors: Vec<[f64; 3]> = (0..n)
            .map(|k| {
                let h = 6.0 * k as f64 / n as f64;
                let f = |o: f64| {
                    let k = (o + h) % 6.0;
                    1.0 - (k.min(4.0 - k).clamp(0.0, 1.0))
                };
                // Quantize to bytes so the palette is exactly representable on disk.
                [f(5.0), f(3.0), f(1.0)].map(|v| imaging::to_byte(v) as f64 / 255.0)
            })
            .collect();
        Self::from_colors(format!("hue-wheel-{n}"), &colors)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn elements(&self) -> &[PaletteElement] {
        &self.elements
    }

    pub fn element(&self, k: usize) -> &PaletteElement {
        &self.elements[k]
    }

    /// Shared `(h, w)` of all elements.
    pub fn tile_dims(&self) -> (usize, usize) {
        (self.elements[0].height, self.elements[0].width)
    }

    pub fn is_plain(&self) -> bool {
        self.tile_dims() == (1, 1)
    }

    pub fn mean_colors(&self) -> Vec<[f64; 3]> {
        self.elements.iter().map(PaletteElement::mean_color).collect()
    }

    /// Serializes a plain-color palette in the `#RRGGBB` line format.
    pub fn to_text(&self) -> Result<String> {
        if !self.is_plain() {
            return Err(Error::InvalidArgument(
                "tile palettes cannot be written as a palette file".into(),
            ));
        }
        let mut out = String::new();
        if !self.name.is_empty() {
            let _ = writeln!(out, "; {}", self.name);
        }
        for e in &self.elements {
            let [r, g, b] = e.pixels[0].map(imaging::to_byte);
            let _ = writeln!(out, "#{r:02X}{g:02X}{b:02X}");
        }
        Ok(out)
    }
}

/// Parses palette-file text: one `#RRGGBB` per line, blank lines and lines
/// starting with `;` ignored.
pub fn parse_palette(text: &str) -> Result<Palette> {
    let mut colors = Vec::new();
    let mut name = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix(';') {
            if name.is_empty() && colors.is_empty() {
                name = comment.trim().to_string();
            }
            continue;
        }
        let bad = || Error::MalformedPaletteLine {
            line: lineno + 1,
            text: raw.to_string(),
        };
        let hex = line.strip_prefix('#').ok_or_else(bad)?;
        if hex.len() != 6 || !hex.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(bad());
        }
        let byte = |i: usize| u8::from_str_radix(&hex[i..i + 2], 16).map_err(|_| bad());
        colors.push([byte(0)?, byte(2)?, byte(4)?].map(|b| b as f64 / 255.0));
    }
    Palette::from_colors(name, &colors)
}

pub fn load_palette_file(path: impl AsRef<Path>) -> Result<Palette> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut palette = parse_palette(&text)?;
    if palette.name.is_empty() {
        if let Some(stem) = path.file_stem() {
            palette.name = stem.to_string_lossy().into_owned();
        }
    }
    Ok(palette)
}

/// Loads every `.png` in `dir` as a tile, sorted by file name.
pub fn load_tile_palette(dir: impl AsRef<Path>) -> Result<Palette> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .is_some_and(|ext| ext.eq_ignore_ascii_case("png"))
        })
        .collect();
    paths.sort_by(|a, b| a.file_name().cmp(&b.file_name()));

    let mut elements = Vec::with_capacity(paths.len());
    for path in &paths {
        let img = imaging::read_png(path)?.to_rgb();
        let pixels = img
            .data()
            .chunks_exact(3)
            .map(|p| [p[0], p[1], p[2]])
            .collect();
        elements.push(PaletteElement::tile(img.height(), img.width(), pixels)?);
    }
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Palette::new(name, elements)
}

const KMEANS_TOL: f64 = 1e-6;
const KMEANS_MAX_ITERS: usize = 200;

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|c| (a[c] - b[c]) * (a[c] - b[c])).sum()
}

/// Nearest centroid, ties to the lowest index.
fn nearest(p: &[f64; 3], centroids: &[[f64; 3]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn kmeans_pp_seed(points: &[[f64; 3]], n: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let mut centroids = vec![points[rng.random_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < n {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[next];
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// One Lloyd iteration; returns the new centroids and the largest centroid move.
fn lloyd_step(points: &[[f64; 3]], centroids: &[[f64; 3]]) -> (Vec<[f64; 3]>, f64) {
    let n = centroids.len();
    let mut sums = vec![[0.0; 3]; n];
    let mut counts = vec![0usize; n];
    let mut assigned_d2 = Vec::with_capacity(points.len());
    for p in points {
        let (k, d) = nearest(p, centroids);
        counts[k] += 1;
        for c in 0..3 {
            sums[k][c] += p[c];
        }
        assigned_d2.push(d);
    }
    let mut next: Vec<[f64; 3]> = (0..n)
        .map(|k| {
            if counts[k] == 0 {
                centroids[k]
            } else {
                sums[k].map(|s| s / counts[k] as f64)
            }
        })
        .collect();
    // Empty clusters are re-seeded at the point farthest from its centroid.
    for k in 0..n {
        if counts[k] == 0 {
            let far = assigned_d2
                .iter()
                .enumerate()
                .fold((0, -1.0), |best, (i, &d)| if d > best.1 { (i, d) } else { best })
                .0;
            next[k] = points[far];
            assigned_d2[far] = 0.0;
        }
    }
    let moved = centroids
        .iter()
        .zip(&next)
        .map(|(a, b)| dist2(a, b).sqrt())
        .fold(0.0, f64::max);
    (next, moved)
}

/// K-means palette of the image's pixel colors (linear RGB, squared
/// Euclidean distance): k-means++ seeding then Lloyd iterations until the
/// largest centroid move falls below 1e-6 or 200 iterations. Centroids are
/// returned in lexicographic RGB order.
pub fn kmeans_palette(image: &Image, n: usize, seed: u64) -> Result<Palette> {
    if n < 2 {
        return Err(Error::PaletteTooSmall(n));
    }
    if image.height() == 0 || image.width() == 0 {
        return Err(Error::InvalidArgument("empty image".into()));
    }
    let rgb = image.to_rgb();
    let points: Vec<[f64; 3]> = rgb
        .data()
        .chunks_exact(3)
        .map(|p| [p[0], p[1], p[2]])
        .collect();

    let mut distinct: Vec<[u64; 3]> = points.iter().map(|p| p.map(f64::to_bits)).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < n {
        return Err(Error::InsufficientColors {
            found: distinct.len(),
            needed: n,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_seed(&points, n, &mut rng);
    for _ in 0..KMEANS_MAX_ITERS {
        let (next, moved) = lloyd_step(&points, &centroids);
        centroids = next;
        if moved < KMEANS_TOL {
            break;
        }
    }
    centroids.sort_by(|a, b| a.partial_cmp(b).expect("finite centroids"));
    Palette::from_colors("kmeans", &centroids)
}
