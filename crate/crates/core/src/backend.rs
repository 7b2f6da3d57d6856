//! Classifier contract (field, DR, gradability) and its implementations.
//!
//! Trained networks live outside this crate. Two deterministic stubs stand in
//! for them: [`AnalyticStubModel`], a logistic-linear model with closed-form
//! gradients, and [`HeuristicStubModel`], which reacts to image content the
//! way the real classifiers should (dark blobs raise DR, low contrast raises
//! non-gradability). [`RemoteBackend`] forwards images to an HTTP server.

use std::collections::HashMap;
use std::io::Cursor;
use std::sync::Arc;
use std::time::Duration;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::logistic;
use crate::enhancement::{fundus_geometry, luminance, FundusGeometry};
use crate::study::{FieldScores, FundusImage, RawScores};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    /// Network or server failure; the caller may retry later.
    #[error("inference backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend returned an invalid response: {0}")]
    InvalidResponse(String),
    #[error("operation not supported by backend {backend}: {operation}")]
    Unsupported { backend: String, operation: &'static str },
    #[error("unknown image {0}")]
    UnknownImage(String),
    #[error("invalid backend specification {0:?}")]
    InvalidSpec(String),
}

impl BackendError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, BackendError::Unavailable(_))
    }
}

/// The three classifiers the orchestrator drives. Implementations must be
/// deterministic: identical pixels give bitwise-identical outputs.
pub trait InferenceBackend: Send + Sync {
    fn name(&self) -> &str;

    fn classify_field(&self, image: &FundusImage) -> Result<FieldScores, BackendError>;

    /// Probability of more-than-mild DR.
    fn score_dr(&self, image: &FundusImage) -> Result<f64, BackendError>;

    /// Probability that the image is NOT gradable.
    fn score_gradability(&self, image: &FundusImage) -> Result<f64, BackendError>;

    fn raw_scores(&self, image: &FundusImage) -> Result<RawScores, BackendError> {
        Ok(RawScores { dr_prob: self.score_dr(image)?, non_gradability_prob: self.score_gradability(image)? })
    }

    /// Gradient access for attribution, when the backend has it.
    fn gradient_model(&self) -> Option<&dyn GradientModel> {
        None
    }
}

/// Which scalar model output a gradient or attribution refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputSelector {
    DrProbability,
    /// Pre-sigmoid DR output; linear in the input for the analytic stub.
    DrLogit,
    NonGradabilityProbability,
}

/// Model input: `height x width x 3` intensities scaled to `[0, 1]`, row-major HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct InputTensor {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl InputTensor {
    pub fn from_image(image: &RgbImage) -> Self {
        InputTensor {
            width: image.width() as usize,
            height: image.height() as usize,
            data: image.as_raw().iter().map(|&v| v as f64 / 255.0).collect(),
        }
    }

    pub fn zeros_like(other: &InputTensor) -> Self {
        InputTensor { width: other.width, height: other.height, data: vec![0.0; other.data.len()] }
    }

    pub fn same_shape(&self, other: &InputTensor) -> bool {
        self.width == other.width && self.height == other.height && self.data.len() == other.data.len()
    }
}

/// Differentiable view of a backend.
pub trait GradientModel: Send + Sync {
    fn forward(&self, input: &InputTensor, output: OutputSelector) -> f64;
    /// d output / d input, shaped like `input`.
    fn gradient(&self, input: &InputTensor, output: OutputSelector) -> InputTensor;
}

/// Gradient of a model output with respect to the model input for `image`.
pub fn gradient_of_output(
    backend: &dyn InferenceBackend,
    image: &FundusImage,
    output: OutputSelector,
) -> Result<InputTensor, BackendError> {
    let model = backend.gradient_model().ok_or_else(|| BackendError::Unsupported {
        backend: backend.name().to_string(),
        operation: "gradient_attribution",
    })?;
    Ok(model.gradient(&InputTensor::from_image(image.rgb()), output))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Logistic-linear test model: `logistic(w . gray + bias)` where `gray` is
/// the per-pixel channel mean of the normalized input.
///
/// Weights are a pure function of `(seed, head, pixel index, pixel count)`,
/// so any image size works and nothing needs to be stored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticStubModel {
    pub seed: u64,
    pub bias: f64,
}

/// Output heads of the analytic stub: 0 = DR, 1 = gradability, 2..9 = field logits.
pub const HEAD_DR: u64 = 0;
pub const HEAD_NG: u64 = 1;
pub const HEAD_FIELD0: u64 = 2;

impl AnalyticStubModel {
    pub fn new(seed: u64) -> Self {
        AnalyticStubModel { seed, bias: 0.0 }
    }

    /// Weight of pixel `i` among `n` for output head `head`.
    pub fn weight(&self, head: u64, i: usize, n: usize) -> f64 {
        let h = splitmix64(self.seed ^ splitmix64(head.wrapping_mul(0x1000_0000_01B3) ^ i as u64));
        let u = (h >> 11) as f64 / (1u64 << 53) as f64;
        (2.0 * u - 1.0) * 4.0 / (n as f64).sqrt()
    }

    pub fn weights(&self, head: u64, n: usize) -> Vec<f64> {
        (0..n).map(|i| self.weight(head, i, n)).collect()
    }

    fn gray(input: &InputTensor) -> impl Iterator<Item = f64> + '_ {
        input.data.chunks_exact(3).map(|p| (p[0] + p[1] + p[2]) / 3.0)
    }

    /// Pre-sigmoid value of `head`.
    pub fn logit(&self, head: u64, input: &InputTensor) -> f64 {
        let n = input.width * input.height;
        Self::gray(input).enumerate().map(|(i, g)| self.weight(head, i, n) * g).sum::<f64>() + self.bias
    }

    fn head_of(output: OutputSelector) -> u64 {
        match output {
            OutputSelector::DrProbability | OutputSelector::DrLogit => HEAD_DR,
            OutputSelector::NonGradabilityProbability => HEAD_NG,
        }
    }
}

impl GradientModel for AnalyticStubModel {
    fn forward(&self, input: &InputTensor, output: OutputSelector) -> f64 {
        let z = self.logit(Self::head_of(output), input);
        match output {
            OutputSelector::DrLogit => z,
            _ => logistic(z),
        }
    }

    fn gradient(&self, input: &InputTensor, output: OutputSelector) -> InputTensor {
        let head = Self::head_of(output);
        let scale = match output {
            OutputSelector::DrLogit => 1.0,
            _ => {
                let s = logistic(self.logit(head, input));
                s * (1.0 - s)
            }
        };
        let n = input.width * input.height;
        let mut data = Vec::with_capacity(input.data.len());
        for i in 0..n {
            let g = scale * self.weight(head, i, n) / 3.0;
            data.extend_from_slice(&[g, g, g]);
        }
        InputTensor { width: input.width, height: input.height, data }
    }
}

impl InferenceBackend for AnalyticStubModel {
    fn name(&self) -> &str {
        "analytic"
    }

    fn classify_field(&self, image: &FundusImage) -> Result<FieldScores, BackendError> {
        let input = InputTensor::from_image(image.rgb());
        let mut logits = [0.0; 7];
        for (k, l) in logits.iter_mut().enumerate() {
            *l = self.logit(HEAD_FIELD0 + k as u64, &input);
        }
        Ok(FieldScores::from_logits(logits))
    }

    fn score_dr(&self, image: &FundusImage) -> Result<f64, BackendError> {
        Ok(self.forward(&InputTensor::from_image(image.rgb()), OutputSelector::DrProbability))
    }

    fn score_gradability(&self, image: &FundusImage) -> Result<f64, BackendError> {
        Ok(self.forward(&InputTensor::from_image(image.rgb()), OutputSelector::NonGradabilityProbability))
    }

    fn gradient_model(&self) -> Option<&dyn GradientModel> {
        Some(self)
    }
}

/// Tunables of the content-driven stub.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeuristicParams {
    /// Luminance below which a fundus pixel counts as lesion-dark.
    pub lesion_threshold: f64,
    /// Dark-pixel fraction mapped to DR probability 0.5.
    pub dark_midpoint: f64,
    pub dark_gain: f64,
    /// Luminance standard deviation mapped to non-gradability 0.5.
    pub contrast_floor: f64,
    pub contrast_gain: f64,
    /// Luminance at or above which a pixel may belong to the optic disc.
    pub disc_threshold: f64,
    /// Minimum disc area as a fraction of the fundus area.
    pub disc_min_fraction: f64,
}

impl Default for HeuristicParams {
    fn default() -> Self {
        HeuristicParams {
            lesion_threshold: 40.0,
            dark_midpoint: 0.008,
            dark_gain: 400.0,
            contrast_floor: 10.0,
            contrast_gain: 0.6,
            disc_threshold: 200.0,
            disc_min_fraction: 0.002,
        }
    }
}

/// Image-statistics stub used for end-to-end runs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct HeuristicStubModel {
    pub params: HeuristicParams,
}

/// Measurements the heuristic stub bases its outputs on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeuristicFeatures {
    pub dark_fraction: f64,
    pub luminance_std: f64,
    /// Disc centroid offset from frame centre, in half-frame units.
    pub disc_offset: Option<(f64, f64)>,
    pub aspect: f64,
}

impl HeuristicStubModel {
    pub fn new(params: HeuristicParams) -> Self {
        HeuristicStubModel { params }
    }

    pub fn features(&self, image: &RgbImage) -> HeuristicFeatures {
        let (w, h) = image.dimensions();
        let geom = fundus_geometry(image);
        // Inner 90% of the fundus circle avoids the soft rim.
        let inner = FundusGeometry { r: geom.r * 0.9, ..geom };
        let mut n = 0usize;
        let mut dark = 0usize;
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut bright = vec![false; (w * h) as usize];
        for (x, y, px) in image.enumerate_pixels() {
            if !inner.contains(x, y) {
                continue;
            }
            let l = luminance(px);
            n += 1;
            sum += l;
            sq += l * l;
            if l < self.params.lesion_threshold {
                dark += 1;
            }
            if l >= self.params.disc_threshold {
                bright[(y * w + x) as usize] = true;
            }
        }
        let (dark_fraction, luminance_std) = if n == 0 {
            (0.0, 0.0)
        } else {
            let mean = sum / n as f64;
            (dark as f64 / n as f64, (sq / n as f64 - mean * mean).max(0.0).sqrt())
        };
        let disc_offset = largest_blob_centroid(&bright, w as usize, h as usize)
            .filter(|&(count, _, _)| count as f64 >= self.params.disc_min_fraction * n.max(1) as f64)
            .map(|(_, cx, cy)| ((cx - w as f64 / 2.0) / (w as f64 / 2.0), (cy - h as f64 / 2.0) / (h as f64 / 2.0)));
        HeuristicFeatures {
            dark_fraction,
            luminance_std,
            disc_offset,
            aspect: w.max(h) as f64 / w.min(h).max(1) as f64,
        }
    }

    pub fn field_logits(f: &HeuristicFeatures) -> [f64; 7] {
        let composite = if f.aspect > 1.5 { 6.0 } else { -6.0 };
        match f.disc_offset {
            None => [-4.0, -4.0, -4.0, -4.0, 4.0, 1.0, composite],
            Some((dx, dy)) => {
                let r = dx.hypot(dy);
                [
                    4.0 - 12.0 * (dx.abs() - 0.6).abs() - 12.0 * dy.abs(),
                    4.0 - 12.0 * r,
                    4.0 - 12.0 * (dy + 0.6).abs() - 12.0 * dx.abs(),
                    4.0 - 12.0 * (dy - 0.6).abs() - 12.0 * dx.abs(),
                    -4.0,
                    -5.0,
                    composite,
                ]
            }
        }
    }

    pub fn dr_from(&self, f: &HeuristicFeatures) -> f64 {
        logistic(self.params.dark_gain * (f.dark_fraction - self.params.dark_midpoint))
    }

    pub fn non_gradability_from(&self, f: &HeuristicFeatures) -> f64 {
        logistic(self.params.contrast_gain * (self.params.contrast_floor - f.luminance_std))
    }
}

/// Largest 8-connected blob: `(pixel count, centroid x, centroid y)`.
fn largest_blob_centroid(mask: &[bool], w: usize, h: usize) -> Option<(usize, f64, f64)> {
    let mut seen = vec![false; mask.len()];
    let mut best: Option<(usize, f64, f64)> = None;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut count, mut sx, mut sy) = (0usize, 0.0, 0.0);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            count += 1;
            sx += x as f64 + 0.5;
            sy += y as f64 + 0.5;
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let j = ny * w + nx;
                    if mask[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        if best.is_none_or(|(c, _, _)| count > c) {
            best = Some((count, sx / count as f64, sy / count as f64));
        }
    }
    best
}

impl InferenceBackend for HeuristicStubModel {
    fn name(&self) -> &str {
        "heuristic"
    }

    fn classify_field(&self, image: &FundusImage) -> Result<FieldScores, BackendError> {
        Ok(FieldScores::from_logits(Self::field_logits(&self.features(image.rgb()))))
    }

    fn score_dr(&self, image: &FundusImage) -> Result<f64, BackendError> {
        Ok(self.dr_from(&self.features(image.rgb())))
    }

    fn score_gradability(&self, image: &FundusImage) -> Result<f64, BackendError> {
        Ok(self.non_gradability_from(&self.features(image.rgb())))
    }

    fn raw_scores(&self, image: &FundusImage) -> Result<RawScores, BackendError> {
        let f = self.features(image.rgb());
        Ok(RawScores { dr_prob: self.dr_from(&f), non_gradability_prob: self.non_gradability_from(&f) })
    }
}

/// Fixed per-image outputs keyed by image id. Fixture backend for tests and demos.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    pub outputs: HashMap<String, (FieldScores, RawScores)>,
    pub unavailable: bool,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, image_id: &str, field: FieldScores, scores: RawScores) -> Self {
        self.outputs.insert(image_id.to_string(), (field, scores));
        self
    }

    fn lookup(&self, image: &FundusImage) -> Result<&(FieldScores, RawScores), BackendError> {
        if self.unavailable {
            return Err(BackendError::Unavailable("scripted outage".into()));
        }
        self.outputs.get(&image.image_id).ok_or_else(|| BackendError::UnknownImage(image.image_id.clone()))
    }
}

impl InferenceBackend for ScriptedBackend {
    fn name(&self) -> &str {
        "scripted"
    }

    fn classify_field(&self, image: &FundusImage) -> Result<FieldScores, BackendError> {
        Ok(self.lookup(image)?.0)
    }

    fn score_dr(&self, image: &FundusImage) -> Result<f64, BackendError> {
        Ok(self.lookup(image)?.1.dr_prob)
    }

    fn score_gradability(&self, image: &FundusImage) -> Result<f64, BackendError> {
        Ok(self.lookup(image)?.1.non_gradability_prob)
    }
}

/// Response body of a remote inference server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteResponse {
    pub field_scores: Vec<f64>,
    pub dr_prob: f64,
    pub non_gradability_prob: f64,
}

impl RemoteResponse {
    fn validate(&self) -> Result<FieldScores, BackendError> {
        let scores: [f64; 7] = self.field_scores.as_slice().try_into().map_err(|_| {
            BackendError::InvalidResponse(format!("expected 7 field scores, got {}", self.field_scores.len()))
        })?;
        let fs = FieldScores(scores);
        if !fs.is_valid() {
            return Err(BackendError::InvalidResponse("field scores are not a probability vector".into()));
        }
        for p in [self.dr_prob, self.non_gradability_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(BackendError::InvalidResponse(format!("probability {p} out of range")));
            }
        }
        Ok(fs)
    }
}

/// HTTP client for an external model server: `POST <url>` with PNG bytes,
/// JSON [`RemoteResponse`] back. Transport failures and 5xx answers are
/// retried once.
pub struct RemoteBackend {
    url: String,
    client: reqwest::blocking::Client,
}

impl RemoteBackend {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::InvalidSpec(e.to_string()))?;
        Ok(RemoteBackend { url: url.into(), client })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    pub fn infer(&self, image: &FundusImage) -> Result<(FieldScores, RawScores), BackendError> {
        let mut png = Vec::new();
        image
            .rgb()
            .write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png)
            .map_err(|e| BackendError::InvalidResponse(format!("png encoding failed: {e}")))?;
        let mut last = None;
        for attempt in 0..2 {
            match self.post_once(&png) {
                Ok(r) => return Ok(r),
                Err(e) if e.is_retriable() => {
                    tracing::warn!(attempt, url = %self.url, error = %e, "remote inference failed");
                    last = Some(e);
                }
                Err(e) => return Err(e),
            }
        }
        Err(last.unwrap_or_else(|| BackendError::Unavailable("no attempt made".into())))
    }

    fn post_once(&self, png: &[u8]) -> Result<(FieldScores, RawScores), BackendError> {
        let resp = self
            .client
            .post(&self.url)
            .header("content-type", "image/png")
            .body(png.to_vec())
            .send()
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() {
            return Err(BackendError::Unavailable(format!("server answered {status}")));
        }
        if !status.is_success() {
            return Err(BackendError::InvalidResponse(format!("server answered {status}")));
        }
        let body = resp.bytes().map_err(|e| BackendError::Unavailable(e.to_string()))?;
        let parsed: RemoteResponse =
            serde_json::from_slice(&body).map_err(|e| BackendError::InvalidResponse(e.to_string()))?;
        let field = parsed.validate()?;
        Ok((field, RawScores { dr_prob: parsed.dr_prob, non_gradability_prob: parsed.non_gradability_prob }))
    }
}

impl InferenceBackend for RemoteBackend {
    fn name(&self) -> &str {
        "remote"
    }

    fn classify_field(&self, image: &FundusImage) -> Result<FieldScores, BackendError> {
        Ok(self.infer(image)?.0)
    }

    fn score_dr(&self, image: &FundusImage) -> Result<f64, BackendError> {
        Ok(self.infer(image)?.1.dr_prob)
    }

    fn score_gradability(&self, image: &FundusImage) -> Result<f64, BackendError> {
        Ok(self.infer(image)?.1.non_gradability_prob)
    }

    fn raw_scores(&self, image: &FundusImage) -> Result<RawScores, BackendError> {
        Ok(self.infer(image)?.1)
    }
}

/// Backend selector as written in configuration files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Analytic,
    Heuristic,
    Remote(String),
}

impl std::str::FromStr for BackendSpec {
    type Err = BackendError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "analytic" => Ok(BackendSpec::Analytic),
            "heuristic" => Ok(BackendSpec::Heuristic),
            _ => match s.strip_prefix("remote:") {
                Some(url) if !url.is_empty() => Ok(BackendSpec::Remote(url.to_string())),
                _ => Err(BackendError::InvalidSpec(s.to_string())),
            },
        }
    }
}

impl std::fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackendSpec::Analytic => f.write_str("analytic"),
            BackendSpec::Heuristic => f.write_str("heuristic"),
            BackendSpec::Remote(url) => write!(f, "remote:{url}"),
        }
    }
}

impl BackendSpec {
    pub fn build(&self, seed: u64, timeout: Duration) -> Result<Arc<dyn InferenceBackend>, BackendError> {
        Ok(match self {
            BackendSpec::Analytic => Arc::new(AnalyticStubModel::new(seed)),
            BackendSpec::Heuristic => Arc::new(HeuristicStubModel::default()),
            BackendSpec::Remote(url) => Arc::new(RemoteBackend::new(url.clone(), timeout)?),
        })
    }
}
