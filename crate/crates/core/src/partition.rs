//! Synthetic image corpus and non-IID client partitioning.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mae::Image;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PartitionError {
    #[error("fractions must be positive and sum to 1 (sum = {0})")]
    Fractions(f64),
    #[error("client {client} would receive no images; corpus needs at least {min_size} images")]
    EmptyClient { client: usize, min_size: usize },
    #[error("dirichlet alpha must be positive, got {0}")]
    Alpha(f64),
    #[error("dirichlet split left a client empty after {0} attempts")]
    DirichletEmpty(usize),
    #[error("need at least one client")]
    NoClients,
}

pub type Result<T> = std::result::Result<T, PartitionError>;

/// Per-client example percentages of the nine source datasets, in table order:
/// Cholec80, DSAD, ESAD, GLENDA, HeiCo, LapGyn4, PSI-AVA, SurgicalActions160,
/// hSDB-instrument.
pub const ENDO700K_PERCENT: [f64; 9] = [24.25, 1.80, 5.92, 0.15, 47.72, 5.20, 10.02, 0.10, 4.84];

pub const ENDO700K_CLIENTS: [&str; 9] = [
    "Cholec80_for_Segmentation",
    "DSAD",
    "ESAD",
    "GLENDA_v1.0",
    "HeiCo",
    "LapGyn4_v1.2",
    "PSI_AVA",
    "SurgicalActions160",
    "hSDB-instrument",
];

/// Image counts per source dataset.
pub const ENDO700K_COUNTS: [u64; 9] = [
    178_129, 13_195, 43_456, 1_083, 350_539, 38_192, 73_618, 761, 35_576,
];

/// Pixel transform simulating acquisition differences between sites.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    /// Added after contrast, in [-0.5, 0.5].
    pub brightness: f64,
    /// Scale around 0.5, in (0, 3].
    pub contrast: f64,
    /// Box-blur radius in pixels, 0 disables.
    pub blur_radius: usize,
    /// Rotation of RGB around the gray axis, degrees.
    pub hue_degrees: f64,
}

impl DomainShift {
    pub const IDENTITY: DomainShift = DomainShift {
        brightness: 0.0,
        contrast: 1.0,
        blur_radius: 0,
        hue_degrees: 0.0,
    };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

/// Fixed per-site shifts for the nine default clients.
pub fn default_domain_shifts() -> Vec<DomainShift> {
    let s = |brightness, contrast, blur_radius, hue_degrees| DomainShift {
        brightness,
        contrast,
        blur_radius,
        hue_degrees,
    };
    vec![
        s(0.00, 1.00, 0, 0.0),
        s(0.12, 0.80, 0, 40.0),
        s(-0.10, 1.25, 0, -30.0),
        s(0.05, 0.70, 1, 90.0),
        s(-0.05, 1.10, 0, 15.0),
        s(0.15, 1.20, 1, -60.0),
        s(-0.12, 0.90, 0, 120.0),
        s(0.08, 1.30, 0, -120.0),
        s(-0.08, 0.85, 1, 180.0),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionMode {
    Fractions,
    Dirichlet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    pub fractions: Vec<f64>,
    pub alpha: f64,
    /// Client count for dirichlet mode (fractions mode uses `fractions.len()`).
    pub clients: usize,
    /// In fractions mode, hand out label-sorted blocks so each client holds
    /// few generator families.
    pub silo_by_family: bool,
    pub domain_shift: Vec<DomainShift>,
}

impl PartitionSpec {
    pub fn n_clients(&self) -> usize {
        match self.mode {
            PartitionMode::Fractions => self.fractions.len(),
            PartitionMode::Dirichlet => self.clients,
        }
    }

    pub fn shift_for(&self, client: usize) -> DomainShift {
        self.domain_shift
            .get(client)
            .copied()
            .unwrap_or(DomainShift::IDENTITY)
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            PartitionMode::Fractions => {
                let sum: f64 = self.fractions.iter().sum();
                if self.fractions.is_empty()
                    || self.fractions.iter().any(|f| !(*f > 0.0))
                    || (sum - 1.0).abs() > 1e-9
                {
                    return Err(PartitionError::Fractions(sum));
                }
            }
            PartitionMode::Dirichlet => {
                if !(self.alpha > 0.0) {
                    return Err(PartitionError::Alpha(self.alpha));
                }
                if self.clients == 0 {
                    return Err(PartitionError::NoClients);
                }
            }
        }
        Ok(())
    }
}

/// The nine site fractions, normalized to sum to one.
pub fn endo700k_fractions() -> PartitionSpec {
    let total: f64 = ENDO700K_PERCENT.iter().sum();
    PartitionSpec {
        mode: PartitionMode::Fractions,
        fractions: ENDO700K_PERCENT.iter().map(|p| p / total).collect(),
        alpha: 1.0,
        clients: 9,
        silo_by_family: true,
        domain_shift: default_domain_shifts(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_images: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Number of generator families (latent class labels).
    pub families: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_images: 9000,
            image_size: 16,
            channels: 3,
            families: 6,
            seed: 0,
        }
    }
}

/// Procedurally generated images with latent family labels; regenerable
/// bit-exactly from the spec.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub spec: CorpusSpec,
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

fn family_palette(family: usize) -> [[f64; 3]; 3] {
    // three colours per family on a hue wheel, distinct saturations
    let base = family as f64 * 2.399_963; // golden angle
    let mut out = [[0.0; 3]; 3];
    for (k, col) in out.iter_mut().enumerate() {
        let h = base + k as f64 * 0.9;
        let sat = 0.35 + 0.15 * k as f64;
        let val = 0.45 + 0.12 * ((family + k) % 3) as f64;
        for (c, v) in col.iter_mut().enumerate() {
            *v = val + sat * 0.5 * (h + c as f64 * 2.0 * PI / 3.0).cos();
        }
    }
    out
}

impl SyntheticCorpus {
    pub fn generate(spec: &CorpusSpec) -> Self {
        let (images, labels) = (0..spec.n_images).map(|i| generate_image(spec, i)).unzip();
        SyntheticCorpus {
            spec: spec.clone(),
            images,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Textured blobs: a two-colour gradient background, a few soft ellipses in
/// family colours, and smooth value noise.
pub fn generate_image(spec: &CorpusSpec, index: usize) -> (Image, usize) {
    let mut rng = image_rng(spec.seed, index);
    let family = rng.random_range(0..spec.families.max(1));
    let pal = family_palette(family);
    let n = spec.image_size;
    let ch = spec.channels;
    let angle = rng.random_range(0.0..2.0 * PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    let n_blobs = 1 + family % 3;
    let blobs: Vec<(f64, f64, f64, f64, usize)> = (0..n_blobs)
        .map(|k| {
            (
                rng.random_range(0.2..0.8),
                rng.random_range(0.2..0.8),
                rng.random_range(0.12..0.35),
                rng.random_range(0.12..0.35),
                1 + k % 2,
            )
        })
        .collect();
    let g = 5;
    let noise: Vec<f64> = (0..g * g).map(|_| rng.random_range(-1.0..1.0)).collect();
    let noise_amp = 0.04 + 0.02 * (family % 2) as f64;
    let mut px = vec![0.0; n * n * ch];
    for y in 0..n {
        for x in 0..n {
            let (u, v) = ((x as f64 + 0.5) / n as f64, (y as f64 + 0.5) / n as f64);
            let t = (((u - 0.5) * ca + (v - 0.5) * sa) + 0.5).clamp(0.0, 1.0);
            let mut col = [0.0; 3];
            for c in 0..3 {
                col[c] = pal[0][c] * (1.0 - t) + pal[2][c] * t * 0.6 + pal[0][c] * t * 0.4;
            }
            for &(bx, by, rx, ry, pi) in &blobs {
                let d = ((u - bx) / rx).powi(2) + ((v - by) / ry).powi(2);
                let w = (-(d * d)).exp();
                for c in 0..3 {
                    col[c] = col[c] * (1.0 - w) + pal[pi][c] * w;
                }
            }
            // bilinear value noise on a coarse grid
            let (gx, gy) = (u * (g - 1) as f64, v * (g - 1) as f64);
            let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(g - 1), (y0 + 1).min(g - 1));
            let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
            let nz = noise[y0 * g + x0] * (1.0 - fx) * (1.0 - fy)
                + noise[y0 * g + x1] * fx * (1.0 - fy)
                + noise[y1 * g + x0] * (1.0 - fx) * fy
                + noise[y1 * g + x1] * fx * fy;
            for c in 0..ch {
                let base = if ch == 3 {
                    col[c]
                } else {
                    (col[0] + col[1] + col[2]) / 3.0
                };
                px[(y * n + x) * ch + c] = (base + noise_amp * nz).clamp(0.0, 1.0);
            }
        }
    }
    (
        Image {
            size: n,
            channels: ch,
            pixels: px,
        },
        family,
    )
}

/// Splits `0..n` into disjoint sets sized `floor(f_k n)`, with the remainder
/// handed out one image each to the largest fractions first.
pub fn partition_by_fractions(
    n: usize,
    spec: &PartitionSpec,
    labels: Option<&[usize]>,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    let fr = &spec.fractions;
    let mut sizes: Vec<usize> = fr.iter().map(|f| (f * n as f64).floor() as usize).collect();
    let mut order: Vec<usize> = (0..fr.len()).collect();
    order.sort_by(|&a, &b| fr[b].partial_cmp(&fr[a]).unwrap().then(a.cmp(&b)));
    let mut remainder = n - sizes.iter().sum::<usize>();
    for &k in order.iter().cycle() {
        if remainder == 0 {
            break;
        }
        sizes[k] += 1;
        remainder -= 1;
    }
    if let Some(client) = sizes.iter().position(|&s| s == 0) {
        let min_frac = fr.iter().cloned().fold(f64::INFINITY, f64::min);
        return Err(PartitionError::EmptyClient {
            client,
            min_size: (1.0 / min_frac).ceil() as usize,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    if let (true, Some(labels)) = (spec.silo_by_family, labels) {
        // stable sort keeps the shuffle within each family
        idx.sort_by_key(|&i| labels[i]);
        // largest client first so it spans the most families
        let mut out = vec![Vec::new(); fr.len()];
        let mut at = 0;
        for &k in &order {
            out[k] = idx[at..at + sizes[k]].to_vec();
            at += sizes[k];
        }
        for s in &mut out {
            s.sort_unstable();
        }
        return Ok(out);
    }
    let mut out = Vec::with_capacity(fr.len());
    let mut at = 0;
    for s in sizes {
        let mut set = idx[at..at + s].to_vec();
        set.sort_unstable();
        out.push(set);
        at += s;
    }
    Ok(out)
}

fn sample_dirichlet(rng: &mut ChaCha8Rng, alpha: f64, k: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 {
        draws.iter().map(|d| d / sum).collect()
    } else {
        // all draws underflowed; put the class on one client
        let mut v = vec![0.0; k];
        v[rng.random_range(0..k)] = 1.0;
        v
    }
}

/// Label-skewed split: each class is divided among clients by proportions
/// drawn from a symmetric Dirichlet(alpha).
pub fn partition_dirichlet(
    labels: &[usize],
    alpha: f64,
    clients: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if !(alpha > 0.0) {
        return Err(PartitionError::Alpha(alpha));
    }
    if clients == 0 {
        return Err(PartitionError::NoClients);
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    const ATTEMPTS: usize = 10;
    for _ in 0..ATTEMPTS {
        let mut out = vec![Vec::new(); clients];
        for c in 0..n_classes {
            let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            members.shuffle(&mut rng);
            let p = sample_dirichlet(&mut rng, alpha, clients);
            let mut start = 0;
            let mut cum = 0.0;
            for (k, pk) in p.iter().enumerate() {
                cum += pk;
                let end = if k + 1 == clients {
                    members.len()
                } else {
                    ((cum * members.len() as f64).round() as usize).min(members.len())
                };
                out[k].extend_from_slice(&members[start..end.max(start)]);
                start = end.max(start);
            }
        }
        if out.iter().all(|s| !s.is_empty()) {
            for s in &mut out {
                s.sort_unstable();
            }
            return Ok(out);
        }
    }
    Err(PartitionError::DirichletEmpty(ATTEMPTS))
}

/// Partitions according to the spec's mode.
pub fn partition(
    corpus: &SyntheticCorpus,
    spec: &PartitionSpec,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    match spec.mode {
        PartitionMode::Fractions => {
            partition_by_fractions(corpus.len(), spec, Some(&corpus.labels), seed)
        }
        PartitionMode::Dirichlet => {
            partition_dirichlet(&corpus.labels, spec.alpha, spec.clients, seed)
        }
    }
}

fn box_blur(img: &Image, r: usize) -> Image {
    let n = img.size as isize;
    let ch = img.channels;
    let mut out = img.clone();
    let r = r as isize;
    for y in 0..n {
        for x in 0..n {
            for c in 0..ch {
                let mut s = 0.0;
                let mut cnt = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (y + dy, x + dx);
                        if (0..n).contains(&yy) && (0..n).contains(&xx) {
                            s += img.pixels[((yy * n + xx) as usize) * ch + c];
                            cnt += 1.0;
                        }
                    }
                }
                out.pixels[((y * n + x) as usize) * ch + c] = s / cnt;
            }
        }
    }
    out
}

/// Applies blur, hue rotation, contrast and brightness in that order, then
/// clips to [0, 1]. Hue rotation only applies to 3-channel images.
pub fn apply_domain_shift(image: &Image, shift: &DomainShift) -> Image {
    if shift.is_identity() {
        return image.clone();
    }
    let mut img = if shift.blur_radius > 0 {
        box_blur(image, shift.blur_radius)
    } else {
        image.clone()
    };
    if image.channels == 3 && shift.hue_degrees != 0.0 {
        // Rodrigues rotation about (1,1,1)/sqrt(3)
        let th = shift.hue_degrees.to_radians();
        let (c, s) = (th.cos(), th.sin());
        let k = (1.0 - c) / 3.0;
        let r3 = s / 3f64.sqrt();
        let m = [
            [c + k, k - r3, k + r3],
            [k + r3, c + k, k - r3],
            [k - r3, k + r3, c + k],
        ];
        for p in img.pixels.chunks_mut(3) {
            let v = [p[0], p[1], p[2]];
            for (i, row) in m.iter().enumerate() {
                p[i] = row[0] * v[0] + row[1] * v[1] + row[2] * v[2];
            }
        }
    }
    for p in &mut img.pixels {
        *p = ((*p - 0.5) * shift.contrast + 0.5 + shift.brightness).clamp(0.0, 1.0);
    }
    img
}

/// Mean pairwise Euclidean distance between clients' per-channel pixel means.
pub fn heterogeneity_score(images: &[Image], sets: &[Vec<usize>]) -> f64 {
    let ch = images.first().map_or(1, |i| i.channels);
    let means: Vec<Vec<f64>> = sets
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| {
            let mut m = vec![0.0; ch];
            let mut cnt = 0.0;
            for &i in s {
                for p in images[i].pixels.chunks(ch) {
                    for c in 0..ch {
                        m[c] += p[c];
                    }
                    cnt += 1.0;
                }
            }
            m.iter().map(|v| v / cnt).collect()
        })
        .collect();
    let mut total = 0.0;
    let mut pairs = 0.0;
    for a in 0..means.len() {
        for b in a + 1..means.len() {
            total += means[a]
                .iter()
                .zip(&means[b])
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
            pairs += 1.0;
        }
    }
    if pairs == 0.0 {
        0.0
    } else {
        total / pairs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionManifest {
    pub clients: BTreeMap<usize, Vec<usize>>,
}

impl PartitionManifest {
    pub fn new(sets: &[Vec<usize>]) -> Self {
        PartitionManifest {
            clients: sets.iter().cloned().enumerate().collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_fractions_are_normalized() {
        let spec = endo700k_fractions();
        let f = &spec.fractions;
        let max = f.iter().cloned().fold(0.0, f64::max);
        let min = f.iter().cloned().fold(1.0, f64::min);
        assert!((max - 0.4772).abs() < 1e-12);
        assert_eq!(
            ENDO700K_CLIENTS[f.iter().position(|&v| v == max).unwrap()],
            "HeiCo"
        );
        assert!((min - 0.0010).abs() < 1e-12);
        assert_eq!(
            ENDO700K_CLIENTS[f.iter().position(|&v| v == min).unwrap()],
            "SurgicalActions160"
        );
        assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-4);
        assert!((ENDO700K_PERCENT.iter().sum::<f64>() - 100.0).abs() < 1e-9);
    }

    fn is_partition(sets: &[Vec<usize>], n: usize) -> bool {
        let mut seen = vec![false; n];
        for s in sets {
            for &i in s {
                if seen[i] {
                    return false;
                }
                seen[i] = true;
            }
        }
        seen.iter().all(|&b| b)
    }

    #[test]
    fn fraction_sizes() {
        let spec = PartitionSpec {
            fractions: vec![0.5, 0.5],
            silo_by_family: false,
            ..endo700k_fractions()
        };
        let sets = partition_by_fractions(1000, &spec, None, 1).unwrap();
        assert_eq!(
            sets.iter().map(Vec::len).collect::<Vec<_>>(),
            vec![500, 500]
        );
        assert!(is_partition(&sets, 1000));

        let sets = partition_by_fractions(10_000, &endo700k_fractions(), None, 1).unwrap();
        assert_eq!(sets[4].len(), 4772);
        assert!(is_partition(&sets, 10_000));
        assert_eq!(
            sets,
            partition_by_fractions(10_000, &endo700k_fractions(), None, 1).unwrap()
        );
    }

    #[test]
    fn too_small_corpus_names_minimum() {
        let err = partition_by_fractions(100, &endo700k_fractions(), None, 0).unwrap_err();
        assert_eq!(
            err,
            PartitionError::EmptyClient {
                client: 3,
                min_size: 1000
            }
        );
    }

    #[test]
    fn remainder_goes_to_largest_first() {
        let spec = PartitionSpec {
            fractions: vec![0.2, 0.5, 0.3],
            silo_by_family: false,
            ..endo700k_fractions()
        };
        // floors: 1, 3, 2 (sum 6) -> remainder 1 goes to the 0.5 client
        let sizes: Vec<usize> = partition_by_fractions(7, &spec, None, 0)
            .unwrap()
            .iter()
            .map(Vec::len)
            .collect();
        assert_eq!(sizes, vec![1, 4, 2]);
    }

    #[test]
    fn silo_mode_is_a_partition() {
        let corpus = SyntheticCorpus::generate(&CorpusSpec {
            n_images: 1000,
            ..CorpusSpec::default()
        });
        let sets = partition(&corpus, &endo700k_fractions(), 3).unwrap();
        assert!(is_partition(&sets, 1000));
    }

    #[test]
    fn dirichlet_single_client_gets_everything() {
        let labels: Vec<usize> = (0..50).map(|i| i % 3).collect();
        let sets = partition_dirichlet(&labels, 0.5, 1, 0).unwrap();
        assert_eq!(sets, vec![(0..50).collect::<Vec<_>>()]);
        assert!(partition_dirichlet(&labels, 0.0, 2, 0).is_err());
    }

    #[test]
    fn dirichlet_large_alpha_is_near_iid() {
        let labels: Vec<usize> = (0..2000).map(|i| i % 2).collect();
        for seed in 0..10 {
            let sets = partition_dirichlet(&labels, 1e6, 2, seed).unwrap();
            assert!(is_partition(&sets, 2000));
            for s in sets {
                let ones = s.iter().filter(|&&i| labels[i] == 1).count() as f64 / s.len() as f64;
                assert!((ones - 0.5).abs() < 0.05, "{ones}");
            }
        }
    }

    #[test]
    fn dirichlet_small_alpha_concentrates() {
        let labels: Vec<usize> = (0..400).map(|i| i % 2).collect();
        let mut hits = 0;
        for seed in 0..200 {
            let Ok(sets) = partition_dirichlet(&labels, 0.01, 2, seed) else {
                continue;
            };
            let concentrated = sets.iter().any(|s| {
                let mut c = [0usize; 2];
                s.iter().for_each(|&i| c[labels[i]] += 1);
                *c.iter().max().unwrap() as f64 / s.len() as f64 > 0.9
            });
            hits += concentrated as usize;
        }
        assert!(hits as f64 >= 0.95 * 200.0, "{hits}");
    }

    #[test]
    fn domain_shift_examples() {
        let img = Image::constant(4, 3, 0.5);
        assert_eq!(apply_domain_shift(&img, &DomainShift::IDENTITY), img);
        let b = DomainShift {
            brightness: 0.2,
            ..DomainShift::IDENTITY
        };
        assert!(apply_domain_shift(&img, &b)
            .pixels
            .iter()
            .all(|&p| (p - 0.7).abs() < 1e-15));

        let (img, _) = generate_image(&CorpusSpec::default(), 3);
        let shifts = default_domain_shifts();
        let a = apply_domain_shift(&img, &shifts[1]);
        let c = apply_domain_shift(&img, &shifts[2]);
        let mad = a
            .pixels
            .iter()
            .zip(&c.pixels)
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / a.pixels.len() as f64;
        assert!(mad > 0.0);
        assert!(a.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn corpus_is_regenerable() {
        let spec = CorpusSpec {
            n_images: 20,
            ..CorpusSpec::default()
        };
        let a = SyntheticCorpus::generate(&spec);
        let b = SyntheticCorpus::generate(&spec);
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
        assert!(a
            .images
            .iter()
            .all(|i| i.pixels.iter().all(|p| (0.0..=1.0).contains(p))));
    }

    #[test]
    fn manifest_keys_are_ordered() {
        let sets: Vec<Vec<usize>> = (0..12).map(|i| vec![i]).collect();
        let json = PartitionManifest::new(&sets).to_json();
        let p2 = json.find("\"2\"").unwrap();
        let p10 = json.find("\"10\"").unwrap();
        assert!(p2 < p10);
        let back: PartitionManifest = serde_json::from_str(&json).unwrap();
        assert_eq!(back, PartitionManifest::new(&sets));
    }
}
