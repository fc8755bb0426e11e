//! Residual vector quantization codec.
//!
//! Audio is cut into non-overlapping frames of `sample_rate / frame_rate`
//! samples, each frame is projected onto an orthonormal `D`-dimensional basis
//! (the top principal directions of the training frames), and the resulting
//! feature vector is quantized by a cascade of `N` codebooks where every stage
//! quantizes the residual left by the previous ones. Decoding sums the selected
//! codewords and maps them back through the transposed basis.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::autograd::Mat;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    /// Audio sample rate in Hz.
    pub sample_rate: u32,
    /// Token frames per second.
    pub frame_rate: u32,
    pub n_codebooks: usize,
    pub codebook_size: usize,
    /// Width of the per-frame feature vector.
    pub feature_dim: usize,
    pub kmeans_iterations: usize,
    /// Upper bound on frames used to fit the codec (evenly strided subsample).
    pub max_training_frames: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            frame_rate: 50,
            n_codebooks: 4,
            codebook_size: 64,
            feature_dim: 32,
            kmeans_iterations: 25,
            max_training_frames: 20_000,
        }
    }
}

impl CodecConfig {
    /// Dimensions of the production-size codec (32 kHz audio, 50 Hz frames,
    /// four codebooks of 2048 entries). Used for accounting, never trained.
    pub fn full_scale() -> Self {
        Self { sample_rate: 32_000, codebook_size: 2048, feature_dim: 128, ..Self::default() }
    }

    /// Samples per frame.
    pub fn hop(&self) -> Result<usize> {
        if self.sample_rate == 0 || self.frame_rate == 0 || !self.sample_rate.is_multiple_of(self.frame_rate) {
            return Err(Error::config(format!(
                "sample rate {} must be a positive multiple of frame rate {}",
                self.sample_rate, self.frame_rate
            )));
        }
        Ok((self.sample_rate / self.frame_rate) as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let hop = self.hop()?;
        if self.n_codebooks == 0 || self.codebook_size == 0 {
            return Err(Error::config("codec needs at least one codebook with at least one entry"));
        }
        if self.feature_dim == 0 || self.feature_dim > hop {
            return Err(Error::config(format!("feature_dim must be in 1..={hop} (the frame length)")));
        }
        if self.codebook_size > u32::MAX as usize {
            return Err(Error::config("codebook_size exceeds the token range"));
        }
        Ok(())
    }

    /// Number of token frames covering `samples` audio samples.
    pub fn frames_for(&self, samples: usize) -> Result<usize> {
        Ok(samples.div_ceil(self.hop()?))
    }
}

/// `N×T` matrix of codebook indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    tokens: Array2<u32>,
    codebook_size: usize,
    frame_rate: u32,
}

impl TokenGrid {
    pub fn new(tokens: Array2<u32>, codebook_size: usize, frame_rate: u32) -> Result<Self> {
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= codebook_size) {
            return Err(Error::input(format!("token {bad} outside codebook of size {codebook_size}")));
        }
        Ok(Self { tokens, codebook_size, frame_rate })
    }

    pub fn n_codebooks(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn frames(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn frame_rate(&self) -> u32 {
        self.frame_rate
    }

    pub fn tokens(&self) -> &Array2<u32> {
        &self.tokens
    }

    pub fn get(&self, codebook: usize, frame: usize) -> usize {
        self.tokens[[codebook, frame]] as usize
    }

    /// Token indices of codebook `n` across all frames.
    pub fn codebook_row(&self, n: usize) -> Vec<usize> {
        self.tokens.row(n).iter().map(|&t| t as usize).collect()
    }

    /// First `len` frames.
    pub fn prefix(&self, len: usize) -> TokenGrid {
        TokenGrid {
            tokens: self.tokens.slice(s![.., ..len]).to_owned(),
            codebook_size: self.codebook_size,
            frame_rate: self.frame_rate,
        }
    }
}

fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest row of `codebook` to `x`; ties resolve to the lowest index.
pub fn nearest(codebook: &Mat, x: ArrayView1<f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, row) in codebook.rows().into_iter().enumerate() {
        let d = squared_distance(row, x);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Seeded k-means++ initialization followed by Lloyd iterations. Empty
/// clusters are reseeded from the point farthest from its assigned centroid.
pub fn kmeans(points: &Mat, k: usize, iterations: usize, rng: &mut ChaCha8Rng) -> Result<Mat> {
    let n = points.nrows();
    if n < k || k == 0 {
        return Err(Error::config(format!("k-means needs at least {k} points, got {n}")));
    }
    let mut centroids = Mat::zeros((k, points.ncols()));
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));
    let mut d2: Vec<f64> = points.rows().into_iter().map(|p| squared_distance(p, points.row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centroids.row_mut(c).assign(&points.row(pick));
        for (i, p) in points.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(squared_distance(p, points.row(pick)));
        }
    }

    let mut assignment = vec![usize::MAX; n];
    for _ in 0..iterations {
        let mut changed = false;
        for (i, p) in points.rows().into_iter().enumerate() {
            let a = nearest(&centroids, p);
            if a != assignment[i] {
                assignment[i] = a;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Mat::zeros(centroids.dim());
        let mut counts = vec![0usize; k];
        for (i, p) in points.rows().into_iter().enumerate() {
            let mut row = sums.row_mut(assignment[i]);
            row += &p;
            counts[assignment[i]] += 1;
        }
        let mut taken = vec![false; n];
        for (c, &count) in counts.iter().enumerate() {
            if count > 0 {
                let mean = &sums.row(c) / count as f64;
                centroids.row_mut(c).assign(&mean);
                continue;
            }
            // farthest point from its own centroid
            let far = (0..n)
                .filter(|&i| !taken[i])
                .map(|i| (i, squared_distance(points.row(i), centroids.row(assignment[i]))))
                .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
            taken[far.0] = true;
            centroids.row_mut(c).assign(&points.row(far.0));
        }
    }
    Ok(centroids)
}

/// Residual k-means: codebook `c` is fit on what codebooks `0..c` leave over.
pub fn train_codebooks(
    features: &Mat,
    n_codebooks: usize,
    codebook_size: usize,
    iterations: usize,
    seed: u64,
) -> Result<Vec<Mat>> {
    if n_codebooks == 0 {
        return Err(Error::config("at least one codebook is required"));
    }
    if features.nrows() < codebook_size {
        return Err(Error::config(format!(
            "training corpus of {} vectors is smaller than codebook size {codebook_size}",
            features.nrows()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut residual = features.clone();
    let mut books = Vec::with_capacity(n_codebooks);
    for _ in 0..n_codebooks {
        let book = kmeans(&residual, codebook_size, iterations, &mut rng)?;
        for mut row in residual.rows_mut() {
            let k = nearest(&book, row.view());
            row -= &book.row(k);
        }
        books.push(book);
    }
    Ok(books)
}

/// Greedy residual quantization of feature rows with the given codebooks.
/// Returns an `N×T` token matrix.
pub fn quantize(books: &[Mat], features: &Mat) -> Array2<u32> {
    let mut tokens = Array2::zeros((books.len(), features.nrows()));
    for (t, x) in features.rows().into_iter().enumerate() {
        let mut residual = x.to_owned();
        for (n, book) in books.iter().enumerate() {
            let k = nearest(book, residual.view());
            residual -= &book.row(k);
            tokens[[n, t]] = k as u32;
        }
    }
    tokens
}

/// Sum of selected codewords per frame (`T×D`), using the first `tokens.nrows()` books.
pub fn dequantize(books: &[Mat], tokens: &Array2<u32>) -> Mat {
    let dim = books[0].ncols();
    let mut out = Mat::zeros((tokens.ncols(), dim));
    for (n, row) in tokens.rows().into_iter().enumerate() {
        for (t, &k) in row.iter().enumerate() {
            let mut dst = out.row_mut(t);
            dst += &books[n].row(k as usize);
        }
    }
    out
}

/// Trained codec: analysis basis plus residual codebooks.
#[derive(Clone, Debug, PartialEq)]
pub struct CodebookStack {
    config: CodecConfig,
    /// `D×hop`, orthonormal rows.
    projection: Mat,
    codebooks: Vec<Mat>,
}

impl CodebookStack {
    pub fn from_parts(config: CodecConfig, projection: Mat, codebooks: Vec<Mat>) -> Result<Self> {
        config.validate()?;
        let hop = config.hop()?;
        if projection.dim() != (config.feature_dim, hop) {
            return Err(Error::config(format!(
                "projection is {:?}, expected ({}, {hop})",
                projection.dim(),
                config.feature_dim
            )));
        }
        if codebooks.len() != config.n_codebooks {
            return Err(Error::config(format!("expected {} codebooks, got {}", config.n_codebooks, codebooks.len())));
        }
        for (i, b) in codebooks.iter().enumerate() {
            if b.dim() != (config.codebook_size, config.feature_dim) {
                return Err(Error::config(format!("codebook {i} has shape {:?}", b.dim())));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::config(format!("codebook {i} has non-finite entries")));
            }
        }
        Ok(Self { config, projection, codebooks })
    }

    /// Fits the analysis basis and residual codebooks on the frames of `audio`.
    pub fn fit(audio: &[Waveform], config: &CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let hop = config.hop()?;
        let mut frames = Vec::new();
        for w in audio {
            if w.sample_rate != config.sample_rate {
                return Err(Error::input(format!(
                    "training audio at {} Hz, codec configured for {} Hz",
                    w.sample_rate, config.sample_rate
                )));
            }
            frames.push(frame_matrix(w, hop)?);
        }
        let all = ndarray::concatenate(Axis(0), &frames.iter().map(|f| f.view()).collect::<Vec<_>>())
            .map_err(|_| Error::input("no training audio"))?;
        let stride = all.nrows().div_ceil(config.max_training_frames.max(1)).max(1);
        let frames = all.slice(s![..;stride, ..]).to_owned();
        let projection = principal_basis(&frames, config.feature_dim);
        let features = frames.dot(&projection.t());
        let books =
            train_codebooks(&features, config.n_codebooks, config.codebook_size, config.kmeans_iterations, seed)?;
        Self::from_parts(config.clone(), projection, books)
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn projection(&self) -> &Mat {
        &self.projection
    }

    pub fn codebooks(&self) -> &[Mat] {
        &self.codebooks
    }

    /// Per-frame feature vectors (`T×D`) of a waveform.
    pub fn analyze(&self, w: &Waveform) -> Result<Mat> {
        if w.sample_rate != self.config.sample_rate {
            return Err(Error::input(format!(
                "waveform at {} Hz, codec expects {} Hz",
                w.sample_rate, self.config.sample_rate
            )));
        }
        let frames = frame_matrix(w, self.config.hop()?)?;
        Ok(frames.dot(&self.projection.t()))
    }

    /// Overlap-add (window = hop) synthesis of `T×D` features.
    pub fn synthesize(&self, features: &Mat) -> Waveform {
        let frames = features.dot(&self.projection);
        Waveform { samples: frames.iter().map(|&v| v as f32).collect(), sample_rate: self.config.sample_rate }
    }

    pub fn encode(&self, w: &Waveform) -> Result<TokenGrid> {
        let features = self.analyze(w)?;
        TokenGrid::new(quantize(&self.codebooks, &features), self.config.codebook_size, self.config.frame_rate)
    }

    pub fn decode(&self, grid: &TokenGrid) -> Result<Waveform> {
        if grid.n_codebooks() != self.config.n_codebooks {
            return Err(Error::input(format!(
                "grid has {} codebooks, codec has {}",
                grid.n_codebooks(),
                self.config.n_codebooks
            )));
        }
        if grid.codebook_size() > self.config.codebook_size
            || grid.tokens().iter().any(|&t| t as usize >= self.config.codebook_size)
        {
            return Err(Error::input("token outside codebook range"));
        }
        Ok(self.synthesize(&dequantize(&self.codebooks, grid.tokens())))
    }

    /// Mean squared feature error when only the first `used` codebooks quantize `features`.
    pub fn quantization_mse(&self, features: &Mat, used: usize) -> f64 {
        let books = &self.codebooks[..used.min(self.codebooks.len())];
        let recon = dequantize(books, &quantize(books, features));
        (features - &recon).mapv(|v| v * v).mean().unwrap_or(0.0)
    }
}

/// Non-overlapping frames of `hop` samples, zero-padding the last one.
pub fn frame_matrix(w: &Waveform, hop: usize) -> Result<Mat> {
    if w.is_empty() {
        return Err(Error::input("empty waveform"));
    }
    let frames = w.len().div_ceil(hop);
    let mut m = Mat::zeros((frames, hop));
    for (i, &s) in w.samples.iter().enumerate() {
        m[[i / hop, i % hop]] = s as f64;
    }
    Ok(m)
}

/// Top `dim` eigenvectors (as rows) of the uncentered second-moment matrix of `frames`.
fn principal_basis(frames: &Mat, dim: usize) -> Mat {
    let width = frames.ncols();
    let gram = frames.t().dot(frames) / frames.nrows().max(1) as f64;
    let sym = DMatrix::from_fn(width, width, |i, j| 0.5 * (gram[[i, j]] + gram[[j, i]]));
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..width).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut basis = Mat::zeros((dim, width));
    for (r, &c) in order.iter().take(dim).enumerate() {
        let col = eig.eigenvectors.column(c);
        // sign convention: largest-magnitude component positive
        let pivot = col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for j in 0..width {
            basis[[r, j]] = sign * col[j];
        }
    }
    basis
}

#[cfg(test)]
mod tests {
    use ndarray::array;
    use rand_distr::{Distribution, Normal};

    use super::*;

    fn identity_codec(books: Vec<Mat>, dim: usize) -> CodebookStack {
        let config = CodecConfig {
            sample_rate: dim as u32 * 10,
            frame_rate: 10,
            n_codebooks: books.len(),
            codebook_size: books[0].nrows(),
            feature_dim: dim,
            ..CodecConfig::default()
        };
        CodebookStack::from_parts(config, Mat::eye(dim), books).unwrap()
    }

    #[test]
    fn degenerate_corpus_yields_its_single_vector() {
        let v = array![[0.5, -2.0, 1.0]];
        let corpus = ndarray::concatenate![Axis(0), v, v, v];
        let books = train_codebooks(&corpus, 1, 1, 10, 3).unwrap();
        assert_eq!(books[0], v);
    }

    #[test]
    fn four_points_four_codewords_is_lossless() {
        let pts = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [3.0, 3.0]];
        let books = train_codebooks(&pts, 1, 4, 10, 11).unwrap();
        let codec = identity_codec(books.clone(), 2);
        assert_eq!(codec.quantization_mse(&pts, 1), 0.0);
        let mut rows: Vec<Vec<f64>> = books[0].rows().into_iter().map(|r| r.to_vec()).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(rows, vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![3.0, 3.0]]);
    }

    #[test]
    fn corpus_smaller_than_codebook_is_config_error() {
        let pts = array![[0.0, 0.0], [1.0, 0.0]];
        assert!(matches!(train_codebooks(&pts, 1, 3, 5, 0), Err(Error::Config(_))));
    }

    #[test]
    fn two_blob_residual_stage_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let pts = Mat::from_shape_fn((100, 2), |(i, _)| {
            let center = if i < 50 { -2.0 } else { 2.0 };
            center + noise.sample(&mut rng)
        });
        let books = train_codebooks(&pts, 2, 2, 50, 9).unwrap();
        // exhaustive two-stage nearest-centroid search
        let mut stage1 = 0.0;
        let mut stage2 = 0.0;
        for p in pts.rows() {
            let d1: Vec<f64> = books[0].rows().into_iter().map(|c| squared_distance(c, p)).collect();
            let k1 = if d1[0] <= d1[1] { 0 } else { 1 };
            let r = &p - &books[0].row(k1);
            stage1 += r.dot(&r);
            let d2: Vec<f64> = books[1].rows().into_iter().map(|c| squared_distance(c, r.view())).collect();
            stage2 += d2[0].min(d2[1]);
        }
        let codec = identity_codec(books, 2);
        assert!((codec.quantization_mse(&pts, 1) - stage1 / 200.0).abs() < 1e-12);
        assert!((codec.quantization_mse(&pts, 2) - stage2 / 200.0).abs() < 1e-12);
        assert!(stage2 <= stage1);
    }

    #[test]
    fn zero_waveform_hits_zero_codeword() {
        let mut b0 = Mat::from_elem((3, 2), 1.0);
        b0.row_mut(2).fill(0.0);
        let codec = identity_codec(vec![b0, Mat::from_elem((3, 2), 0.5)], 2);
        let w = Waveform::silence(20, codec.config().sample_rate);
        let g = codec.encode(&w).unwrap();
        assert_eq!(g.frames(), 10);
        assert!(g.codebook_row(0).iter().all(|&k| k == 2));
        assert!(codec.encode(&Waveform::silence(0, 20)).is_err());
    }

    #[test]
    fn full_scale_shape_is_four_by_two_fifty() {
        let c = CodecConfig { codebook_size: 2048, feature_dim: 32, ..CodecConfig::default() };
        assert_eq!(c.frames_for(5 * c.sample_rate as usize).unwrap(), 250);
        let full = CodecConfig::full_scale();
        assert_eq!(full.frames_for(5 * full.sample_rate as usize).unwrap(), 250);
        assert_eq!(full.n_codebooks, 4);
    }

    #[test]
    fn encode_matches_brute_force_residual_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let noise = Normal::new(0.0, 0.2).unwrap();
        let config =
            CodecConfig { sample_rate: 800, frame_rate: 50, n_codebooks: 2, codebook_size: 8, feature_dim: 4, ..Default::default() };
        let train: Vec<f32> = (0..1600).map(|_| noise.sample(&mut rng) as f32).collect();
        let codec = CodebookStack::fit(&[Waveform::new(train, 800).unwrap()], &config, 4).unwrap();
        let probe = Waveform::new((0..800).map(|_| noise.sample(&mut rng) as f32).collect(), 800).unwrap();
        let grid = codec.encode(&probe).unwrap();
        let feats = codec.analyze(&probe).unwrap();
        for (t, f) in feats.rows().into_iter().enumerate() {
            // all L^N token combinations give the same first stage choice as a greedy search:
            // check greedy optimality stage by stage with an explicit loop
            let mut residual = f.to_vec();
            for n in 0..2 {
                let book = &codec.codebooks()[n];
                let mut best = (0, f64::INFINITY);
                for k in 0..8 {
                    let d: f64 = (0..4).map(|j| (residual[j] - book[[k, j]]).powi(2)).sum();
                    if d < best.1 {
                        best = (k, d);
                    }
                }
                assert_eq!(grid.get(n, t), best.0);
                for j in 0..4 {
                    residual[j] -= book[[best.0, j]];
                }
            }
        }
    }

    #[test]
    fn token_out_of_range_is_rejected() {
        let codec = identity_codec(vec![Mat::zeros((2, 2))], 2);
        assert!(TokenGrid::new(array![[0, 2]], 2, 10).is_err());
        let big = TokenGrid::new(array![[0, 2]], 3, 10).unwrap();
        assert!(codec.decode(&big).is_err());
    }
}
