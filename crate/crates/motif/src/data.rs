//! Dataset types, batching, synthetic motif generation, and projection of
//! precomputed frame embeddings onto a concept bank.
//!
//! All functions here are pure over their inputs; the synthetic generator
//! owns a seeded RNG per call.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One sample: a `T x C` matrix of concept activations plus its label.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptSequence {
    pub id: String,
    pub label: usize,
    /// Shape `T x C`, `T >= 1`, all values finite.
    pub activations: Array2<f64>,
}

impl ConceptSequence {
    pub fn new(id: impl Into<String>, label: usize, activations: Array2<f64>) -> Result<Self> {
        if activations.nrows() == 0 || activations.ncols() == 0 {
            return Err(Error::Input(format!(
                "sequence must have T >= 1 and C >= 1, got {}x{}",
                activations.nrows(),
                activations.ncols()
            )));
        }
        if !activations.iter().all(|v| v.is_finite()) {
            return Err(Error::Input("sequence contains non-finite values".into()));
        }
        Ok(Self { id: id.into(), label, activations })
    }

    pub fn len(&self) -> usize {
        self.activations.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.activations.nrows() == 0
    }

    pub fn concepts(&self) -> usize {
        self.activations.ncols()
    }
}

/// Named concept bank, optionally backed by unit-norm embedding vectors.
#[derive(Debug, Clone)]
pub struct ConceptBank {
    pub names: Vec<String>,
    /// Shape `C x D`; each row has Euclidean norm 1 +- 1e-6.
    pub vectors: Option<Array2<f64>>,
}

impl ConceptBank {
    pub fn new(names: Vec<String>, vectors: Option<Array2<f64>>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for name in &names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Input(format!("duplicate concept name `{name}`")));
            }
        }
        if let Some(v) = &vectors {
            if v.nrows() != names.len() {
                return Err(Error::Input(format!(
                    "bank has {} names but {} vectors",
                    names.len(),
                    v.nrows()
                )));
            }
            for (i, row) in v.rows().into_iter().enumerate() {
                let norm = row.dot(&row).sqrt();
                if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
                    return Err(Error::Input(format!(
                        "bank vector {i} (`{}`) has norm {norm}, expected 1",
                        names[i]
                    )));
                }
            }
        }
        Ok(Self { names, vectors })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// A stacked batch: `B x T_max x C` activations with left-aligned binary masks.
///
/// Invariants: `mask[b, t]` is true exactly for `t < T_b`, and padded
/// positions of `activations` are exactly zero.
#[derive(Debug, Clone)]
pub struct PaddedBatch {
    pub activations: Array3<f64>,
    pub mask: Array2<bool>,
    pub labels: Vec<usize>,
}

impl PaddedBatch {
    pub fn batch_size(&self) -> usize {
        self.activations.shape()[0]
    }

    pub fn max_len(&self) -> usize {
        self.activations.shape()[1]
    }

    pub fn concepts(&self) -> usize {
        self.activations.shape()[2]
    }

    /// Valid length of sample `b`.
    pub fn sample_len(&self, b: usize) -> usize {
        self.mask.row(b).iter().filter(|&&m| m).count()
    }

    /// The original (unpadded) activation matrix of sample `b`.
    pub fn unpad(&self, b: usize) -> Array2<f64> {
        let t = self.sample_len(b);
        self.activations
            .index_axis(ndarray::Axis(0), b)
            .slice(ndarray::s![..t, ..])
            .to_owned()
    }
}

/// Selector for the representative frame of each window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WindowSelector {
    /// One uniformly random frame per window, reproducible from the seed.
    Random(u64),
    First,
    Mean,
}

impl fmt::Display for WindowSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WindowSelector::Random(seed) => write!(f, "random({seed})"),
            WindowSelector::First => write!(f, "first"),
            WindowSelector::Mean => write!(f, "mean"),
        }
    }
}

/// Cosine similarity of every frame embedding against every bank vector.
///
/// `out[n, c] = <e_n, v_c> / (|e_n| |v_c|)`, all values in `[-1, 1]`.
pub fn cosine_activations(
    frame_embeddings: ArrayView2<'_, f64>,
    bank: &ConceptBank,
) -> Result<Array2<f64>> {
    let vectors = bank
        .vectors
        .as_ref()
        .ok_or_else(|| Error::Input("concept bank has no vectors".into()))?;
    if frame_embeddings.ncols() != vectors.ncols() {
        return Err(Error::Input(format!(
            "embedding dimension {} does not match bank dimension {}",
            frame_embeddings.ncols(),
            vectors.ncols()
        )));
    }
    let bank_norms: Vec<f64> = vectors
        .rows()
        .into_iter()
        .map(|v| v.dot(&v).sqrt())
        .collect();
    let mut out = Array2::zeros((frame_embeddings.nrows(), vectors.nrows()));
    for (n, e) in frame_embeddings.rows().into_iter().enumerate() {
        let e_norm = e.dot(&e).sqrt();
        if e_norm == 0.0 {
            return Err(Error::Degenerate(format!(
                "embedding row {n} has zero norm"
            )));
        }
        for (c, v) in vectors.rows().into_iter().enumerate() {
            let cos = e.dot(&v) / (e_norm * bank_norms[c]);
            out[[n, c]] = cos.clamp(-1.0, 1.0);
        }
    }
    Ok(out)
}

/// Reduce `M` frames to `ceil(M / window_size)` window representatives.
///
/// The last partial window uses whatever frames it has.
pub fn window_embeddings(
    frame_embeddings: ArrayView2<'_, f64>,
    window_size: usize,
    selector: WindowSelector,
) -> Result<Array2<f64>> {
    if window_size == 0 {
        return Err(Error::Input("window size must be >= 1".into()));
    }
    let m = frame_embeddings.nrows();
    if m == 0 {
        return Err(Error::Input("no frames to window".into()));
    }
    let d = frame_embeddings.ncols();
    let n_windows = m.div_ceil(window_size);
    let mut out = Array2::zeros((n_windows, d));
    let mut rng = match selector {
        WindowSelector::Random(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };
    for w in 0..n_windows {
        let start = w * window_size;
        let end = ((w + 1) * window_size).min(m);
        match selector {
            WindowSelector::First => {
                out.row_mut(w).assign(&frame_embeddings.row(start));
            }
            WindowSelector::Random(_) => {
                let idx = start + rng.as_mut().unwrap().random_range(0..end - start);
                out.row_mut(w).assign(&frame_embeddings.row(idx));
            }
            WindowSelector::Mean => {
                let mut acc = Array1::<f64>::zeros(d);
                for r in start..end {
                    acc += &frame_embeddings.row(r);
                }
                acc /= (end - start) as f64;
                out.row_mut(w).assign(&acc);
            }
        }
    }
    Ok(out)
}

/// Stack sequences into a padded batch, preserving sample order.
pub fn pad_batch(samples: &[ConceptSequence]) -> Result<PaddedBatch> {
    if samples.is_empty() {
        return Err(Error::Input("cannot pad an empty sample list".into()));
    }
    let c = samples[0].concepts();
    for s in samples {
        if s.concepts() != c {
            return Err(Error::Input(format!(
                "sample `{}` has {} concepts, expected {}",
                s.id,
                s.concepts(),
                c
            )));
        }
    }
    let t_max = samples.iter().map(|s| s.len()).max().unwrap();
    let b = samples.len();
    let mut activations = Array3::zeros((b, t_max, c));
    let mut mask = Array2::from_elem((b, t_max), false);
    let mut labels = Vec::with_capacity(b);
    for (i, s) in samples.iter().enumerate() {
        let t = s.len();
        activations
            .slice_mut(ndarray::s![i, ..t, ..])
            .assign(&s.activations);
        for tt in 0..t {
            mask[[i, tt]] = true;
        }
        labels.push(s.label);
    }
    Ok(PaddedBatch { activations, mask, labels })
}

/// Inverse-frequency class weights: `w_k = N / (K * max(N_k, 1))`.
///
/// Balanced labels give uniform weights of 1; absent classes get `N / K`.
pub fn class_weights(labels: &[usize], k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::Input("class count must be >= 1".into()));
    }
    let mut counts = vec![0usize; k];
    for &l in labels {
        if l >= k {
            return Err(Error::Input(format!("label {l} out of range [0, {k})")));
        }
        counts[l] += 1;
    }
    let n = labels.len() as f64;
    Ok(counts
        .iter()
        .map(|&nk| n / (k as f64 * nk.max(1) as f64))
        .collect())
}

/// Parameters of the planted-motif synthetic task.
///
/// Each class `k` owns a designated concept channel that carries an additive
/// bump of amplitude `amplitude` over a contiguous window of `motif_len`
/// steps at a random offset; every channel carries i.i.d. Gaussian noise.
/// Optionally, each sample also receives `distractors_per_sample` bumps on
/// uniformly random channels (class-uncorrelated): each distractor spreads
/// the same total mass `amplitude * motif_len` over a window three times as
/// long, so it is indistinguishable from a motif under temporal mean-pooling
/// but clearly flatter in per-step height.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub concepts: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub motif_len: usize,
    pub amplitude: f64,
    pub noise_sigma: f64,
    pub samples_per_class: usize,
    pub seed: u64,
    #[serde(default)]
    pub distractors_per_sample: usize,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.concepts == 0 {
            return Err(Error::Input("classes and concepts must be >= 1".into()));
        }
        if self.classes > self.concepts {
            return Err(Error::Input(format!(
                "need at least as many concepts as classes ({} > {})",
                self.classes, self.concepts
            )));
        }
        if self.t_min == 0 || self.t_min > self.t_max {
            return Err(Error::Input(format!(
                "invalid sequence length range [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        if self.motif_len == 0 || self.motif_len > self.t_min {
            return Err(Error::Input(format!(
                "motif length {} must lie in [1, t_min={}]",
                self.motif_len, self.t_min
            )));
        }
        if !(self.amplitude > 0.0) {
            return Err(Error::Input("amplitude must be > 0".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Input("noise sigma must be >= 0".into()));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Input("samples_per_class must be >= 1".into()));
        }
        Ok(())
    }
}

/// Ground truth of a generated synthetic dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MotifTable {
    /// `class_channels[k]` is the concept channel planted for class `k`.
    pub class_channels: Vec<usize>,
    pub motif_len: usize,
    /// Per-sample motif offset (first step of the planted window).
    pub offsets: BTreeMap<String, usize>,
}

/// Generate a planted-motif dataset. Deterministic given `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Vec<ConceptSequence>, MotifTable)> {
    generate_synthetic_with_prefix(spec, "sample")
}

/// Same as [`generate_synthetic`] but with caller-chosen sample id prefix,
/// so train/test splits can share one ground-truth table without id clashes.
pub fn generate_synthetic_with_prefix(
    spec: &SyntheticSpec,
    id_prefix: &str,
) -> Result<(Vec<ConceptSequence>, MotifTable)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| Error::Input(format!("invalid noise sigma: {e}")))?;
    let class_channels: Vec<usize> = (0..spec.classes).collect();
    let mut samples = Vec::with_capacity(spec.classes * spec.samples_per_class);
    let mut offsets = BTreeMap::new();
    let mut idx = 0usize;
    for class in 0..spec.classes {
        for _ in 0..spec.samples_per_class {
            let t = rng.random_range(spec.t_min..=spec.t_max);
            let mut x = Array2::zeros((t, spec.concepts));
            if spec.noise_sigma > 0.0 {
                x.mapv_inplace(|_| noise.sample(&mut rng));
            }
            let offset = rng.random_range(0..=t - spec.motif_len);
            let channel = class_channels[class];
            for step in offset..offset + spec.motif_len {
                x[[step, channel]] += spec.amplitude;
            }
            for _ in 0..spec.distractors_per_sample {
                let d_len = (3 * spec.motif_len).min(t);
                let d_amp = spec.amplitude * spec.motif_len as f64 / d_len as f64;
                let d_channel = rng.random_range(0..spec.concepts);
                let d_offset = rng.random_range(0..=t - d_len);
                for step in d_offset..d_offset + d_len {
                    x[[step, d_channel]] += d_amp;
                }
            }
            let id = format!("{id_prefix}-{idx:05}");
            offsets.insert(id.clone(), offset);
            samples.push(ConceptSequence { id, label: class, activations: x });
            idx += 1;
        }
    }
    Ok((
        samples,
        MotifTable {
            class_channels,
            motif_len: spec.motif_len,
            offsets,
        },
    ))
}

/// Default concept names for synthetic data: `concept-00`, `concept-01`, ...
pub fn synthetic_concept_names(c: usize) -> Vec<String> {
    (0..c).map(|i| format!("concept-{i:02}")).collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: String,
    label: i64,
    #[serde(skip_serializing_if = "Option::is_none")]
    concepts: Option<Vec<String>>,
    activations: Vec<Vec<f64>>,
}

/// Write samples as JSON Lines; the concept-name list rides on the first record.
pub fn save_dataset(
    samples: &[ConceptSequence],
    concept_names: &[String],
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (i, s) in samples.iter().enumerate() {
        if s.concepts() != concept_names.len() {
            return Err(Error::Input(format!(
                "sample `{}` has {} concepts but {} names given",
                s.id,
                s.concepts(),
                concept_names.len()
            )));
        }
        let record = SampleRecord {
            id: s.id.clone(),
            label: s.label as i64,
            concepts: (i == 0).then(|| concept_names.to_vec()),
            activations: s
                .activations
                .rows()
                .into_iter()
                .map(|r| r.to_vec())
                .collect(),
        };
        serde_json::to_writer(&mut file, &record)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

fn format_err(path: &Path, line: usize, field: &str, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.as_os_str().to_string_lossy().into_owned(),
        line,
        field: field.into(),
        msg: msg.into(),
    }
}

/// Load a JSONL dataset; returns the samples and the shared concept-name list.
///
/// Rejects empty files, `T = 0` records, heterogeneous `C`, non-finite
/// values, and records whose concept list disagrees with the first one.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<(Vec<ConceptSequence>, Vec<String>)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut samples = Vec::new();
    let mut concept_names: Option<Vec<String>> = None;
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord = serde_json::from_str(line)
            .map_err(|e| format_err(path, lineno, "<record>", e.to_string()))?;
        if record.label < 0 {
            return Err(format_err(path, lineno, "label", "label must be >= 0"));
        }
        match (&concept_names, record.concepts) {
            (None, Some(names)) => concept_names = Some(names),
            (None, None) => {
                return Err(format_err(
                    path,
                    lineno,
                    "concepts",
                    "first record must carry the concept-name list",
                ))
            }
            (Some(first), Some(names)) if *first != names => {
                return Err(format_err(
                    path,
                    lineno,
                    "concepts",
                    "concept list differs from the first record",
                ))
            }
            _ => {}
        }
        let c = concept_names.as_ref().unwrap().len();
        if record.activations.is_empty() {
            return Err(format_err(path, lineno, "activations", "T must be >= 1"));
        }
        let t = record.activations.len();
        let mut matrix = Array2::zeros((t, c));
        for (ti, row) in record.activations.iter().enumerate() {
            if row.len() != c {
                return Err(format_err(
                    path,
                    lineno,
                    "activations",
                    format!("row {ti} has {} values, expected C={c}", row.len()),
                ));
            }
            for (ci, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(format_err(
                        path,
                        lineno,
                        "activations",
                        format!("non-finite value at [{ti}, {ci}]"),
                    ));
                }
                matrix[[ti, ci]] = v;
            }
        }
        samples.push(ConceptSequence {
            id: record.id,
            label: record.label as usize,
            activations: matrix,
        });
    }
    if samples.is_empty() {
        return Err(Error::Input(format!(
            "dataset {} contains no records",
            path.display()
        )));
    }
    Ok((samples, concept_names.unwrap()))
}

/// One video's precomputed frame embeddings.
#[derive(Debug, Clone)]
pub struct EmbeddingSequence {
    pub id: String,
    pub label: usize,
    /// Shape `M x D`.
    pub embeddings: Array2<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingRecord {
    id: String,
    label: i64,
    embeddings: Vec<Vec<f64>>,
}

/// Load per-video embeddings from JSONL (`{"id", "label", "embeddings"}`).
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Vec<EmbeddingSequence>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: EmbeddingRecord = serde_json::from_str(line)
            .map_err(|e| format_err(path, lineno, "<record>", e.to_string()))?;
        if record.label < 0 {
            return Err(format_err(path, lineno, "label", "label must be >= 0"));
        }
        if record.embeddings.is_empty() {
            return Err(format_err(path, lineno, "embeddings", "M must be >= 1"));
        }
        let d = record.embeddings[0].len();
        let mut matrix = Array2::zeros((record.embeddings.len(), d));
        for (mi, row) in record.embeddings.iter().enumerate() {
            if row.len() != d {
                return Err(format_err(
                    path,
                    lineno,
                    "embeddings",
                    format!("row {mi} has {} values, expected D={d}", row.len()),
                ));
            }
            for (di, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(format_err(
                        path,
                        lineno,
                        "embeddings",
                        format!("non-finite value at [{mi}, {di}]"),
                    ));
                }
                matrix[[mi, di]] = v;
            }
        }
        out.push(EmbeddingSequence {
            id: record.id,
            label: record.label as usize,
            embeddings: matrix,
        });
    }
    if out.is_empty() {
        return Err(Error::Input(format!(
            "embedding file {} contains no records",
            path.display()
        )));
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankRecord {
    name: String,
    vector: Vec<f64>,
}

/// Load a concept bank from JSONL (`{"name", "vector"}`), one concept per line.
pub fn load_bank(path: impl AsRef<Path>) -> Result<ConceptBank> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut names = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: BankRecord = serde_json::from_str(line)
            .map_err(|e| format_err(path, lineno, "<record>", e.to_string()))?;
        if record.vector.iter().any(|v| !v.is_finite()) {
            return Err(format_err(path, lineno, "vector", "non-finite value"));
        }
        if let Some(first) = rows.first() {
            if record.vector.len() != first.len() {
                return Err(format_err(
                    path,
                    lineno,
                    "vector",
                    format!("dimension {} differs from {}", record.vector.len(), first.len()),
                ));
            }
        }
        names.push(record.name);
        rows.push(record.vector);
    }
    if names.is_empty() {
        return Err(Error::Input(format!(
            "concept bank {} contains no records",
            path.display()
        )));
    }
    let d = rows[0].len();
    let mut vectors = Array2::zeros((rows.len(), d));
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            vectors[[i, j]] = v;
        }
    }
    ConceptBank::new(names, Some(vectors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use proptest::prelude::*;

    fn unit_bank(rows: Vec<Vec<f64>>) -> ConceptBank {
        let d = rows[0].len();
        let mut vectors = Array2::zeros((rows.len(), d));
        for (i, r) in rows.iter().enumerate() {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (j, &v) in r.iter().enumerate() {
                vectors[[i, j]] = v / norm;
            }
        }
        let names = (0..rows.len()).map(|i| format!("c{i}")).collect();
        ConceptBank::new(names, Some(vectors)).unwrap()
    }

    #[test]
    fn cosine_orthonormal_axes() {
        let bank = unit_bank(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let e = array![[1.0, 0.0]];
        let out = cosine_activations(e.view(), &bank).unwrap();
        assert_eq!(out, array![[1.0, 0.0]]);
    }

    #[test]
    fn cosine_diagonal_direction() {
        let bank = unit_bank(vec![vec![1.0, 0.0]]);
        let e = array![[1.0, 1.0]];
        let out = cosine_activations(e.view(), &bank).unwrap();
        assert_relative_eq!(out[[0, 0]], 1.0 / 2.0_f64.sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn cosine_self_similarity_is_one() {
        let bank = unit_bank(vec![vec![0.3, -0.4, 0.5], vec![1.0, 2.0, -1.0]]);
        let e = bank.vectors.clone().unwrap();
        let out = cosine_activations(e.view(), &bank).unwrap();
        for i in 0..2 {
            assert_relative_eq!(out[[i, i]], 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn cosine_rejects_dimension_mismatch() {
        let bank = unit_bank(vec![vec![1.0, 0.0]]);
        let e = array![[1.0, 0.0, 0.0]];
        assert!(matches!(
            cosine_activations(e.view(), &bank),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn cosine_names_zero_norm_row() {
        let bank = unit_bank(vec![vec![1.0, 0.0]]);
        let e = array![[1.0, 0.0], [0.0, 0.0]];
        match cosine_activations(e.view(), &bank) {
            Err(Error::Degenerate(msg)) => assert!(msg.contains("row 1"), "{msg}"),
            other => panic!("expected degenerate-input error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn cosine_invariant_to_positive_rescaling(scale in 1e-3f64..1e3, x in -5.0f64..5.0, y in -5.0f64..5.0) {
            prop_assume!(x.abs() + y.abs() > 1e-6);
            let bank = unit_bank(vec![vec![0.6, 0.8], vec![-0.8, 0.6]]);
            let e1 = array![[x, y]];
            let e2 = array![[x * scale, y * scale]];
            let a = cosine_activations(e1.view(), &bank).unwrap();
            let b = cosine_activations(e2.view(), &bank).unwrap();
            for c in 0..2 {
                prop_assert!((a[[0, c]] - b[[0, c]]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn window_first_selects_window_starts() {
        let frames = array![[0.0], [1.0], [2.0], [3.0]];
        let out = window_embeddings(frames.view(), 2, WindowSelector::First).unwrap();
        assert_eq!(out, array![[0.0], [2.0]]);
    }

    #[test]
    fn window_first_partial_last_window() {
        let frames = array![[0.0], [1.0], [2.0], [3.0], [4.0]];
        let out = window_embeddings(frames.view(), 2, WindowSelector::First).unwrap();
        assert_eq!(out, array![[0.0], [2.0], [4.0]]);
    }

    #[test]
    fn window_mean_averages_rows() {
        let frames = array![[0.0, 2.0], [1.0, 4.0], [2.0, 6.0], [3.0, 8.0]];
        let out = window_embeddings(frames.view(), 2, WindowSelector::Mean).unwrap();
        assert_eq!(out, array![[0.5, 3.0], [2.5, 7.0]]);
    }

    #[test]
    fn window_mean_partial_last_window() {
        let frames = array![[0.0], [2.0], [7.0]];
        let out = window_embeddings(frames.view(), 2, WindowSelector::Mean).unwrap();
        assert_eq!(out, array![[1.0], [7.0]]);
    }

    #[test]
    fn window_random_is_reproducible() {
        let frames = array![[0.0], [1.0], [2.0], [3.0], [4.0], [5.0], [6.0]];
        let a = window_embeddings(frames.view(), 3, WindowSelector::Random(7)).unwrap();
        let b = window_embeddings(frames.view(), 3, WindowSelector::Random(7)).unwrap();
        assert_eq!(a, b);
        // every representative comes from its own window
        for (w, row) in a.rows().into_iter().enumerate() {
            let v = row[0] as usize;
            assert!(v >= w * 3 && v < (w + 1) * 3.min(7));
        }
    }

    #[test]
    fn window_rejects_zero_size() {
        let frames = array![[0.0]];
        assert!(matches!(
            window_embeddings(frames.view(), 0, WindowSelector::First),
            Err(Error::Input(_))
        ));
    }

    fn seq(id: &str, label: usize, rows: Vec<Vec<f64>>) -> ConceptSequence {
        let c = rows[0].len();
        let mut m = Array2::zeros((rows.len(), c));
        for (i, r) in rows.iter().enumerate() {
            for (j, &v) in r.iter().enumerate() {
                m[[i, j]] = v;
            }
        }
        ConceptSequence::new(id, label, m).unwrap()
    }

    #[test]
    fn pad_batch_masks_and_zero_pads() {
        let a = seq("a", 0, vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = seq("b", 1, vec![vec![5.0, 6.0], vec![7.0, 8.0], vec![9.0, 10.0]]);
        let batch = pad_batch(&[a, b]).unwrap();
        assert_eq!(batch.max_len(), 3);
        assert_eq!(batch.mask.row(0).to_vec(), vec![true, true, false]);
        assert_eq!(batch.mask.row(1).to_vec(), vec![true, true, true]);
        assert_eq!(batch.activations[[0, 2, 0]], 0.0);
        assert_eq!(batch.activations[[0, 2, 1]], 0.0);
        assert_eq!(batch.labels, vec![0, 1]);
    }

    #[test]
    fn pad_batch_single_sample_is_identity() {
        let a = seq("a", 2, vec![vec![1.0], vec![2.0]]);
        let batch = pad_batch(std::slice::from_ref(&a)).unwrap();
        assert!(batch.mask.iter().all(|&m| m));
        assert_eq!(batch.unpad(0), a.activations);
    }

    #[test]
    fn pad_batch_rejects_empty_and_heterogeneous() {
        assert!(matches!(pad_batch(&[]), Err(Error::Input(_))));
        let a = seq("a", 0, vec![vec![1.0, 2.0]]);
        let b = seq("b", 0, vec![vec![1.0]]);
        assert!(matches!(pad_batch(&[a, b]), Err(Error::Input(_))));
    }

    proptest! {
        #[test]
        fn pad_then_unpad_recovers_inputs(lens in proptest::collection::vec(1usize..6, 1..5)) {
            let mut samples = Vec::new();
            for (i, &t) in lens.iter().enumerate() {
                let m = Array2::from_shape_fn((t, 3), |(a, b)| (i + 1) as f64 * 10.0 + a as f64 + 0.1 * b as f64);
                samples.push(ConceptSequence::new(format!("s{i}"), 0, m).unwrap());
            }
            let batch = pad_batch(&samples).unwrap();
            for (i, s) in samples.iter().enumerate() {
                prop_assert_eq!(batch.unpad(i), s.activations.clone());
            }
        }
    }

    #[test]
    fn class_weights_balanced_is_uniform() {
        assert_eq!(class_weights(&[0, 0, 1, 1], 2).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn class_weights_inverse_frequency() {
        let w = class_weights(&[0, 0, 0, 1], 2).unwrap();
        assert_relative_eq!(w[0], 4.0 / 6.0, max_relative = 1e-12);
        assert_relative_eq!(w[1], 2.0, max_relative = 1e-12);
    }

    #[test]
    fn class_weights_absent_class() {
        let w = class_weights(&[0, 0], 2).unwrap();
        assert_eq!(w, vec![0.5, 1.0]);
    }

    proptest! {
        #[test]
        fn class_weights_mass_identity(labels in proptest::collection::vec(0usize..3, 3..30)) {
            // with all classes present, sum_k N_k w_k = N
            prop_assume!((0..3).all(|k| labels.contains(&k)));
            let w = class_weights(&labels, 3).unwrap();
            let mut counts = [0usize; 3];
            for &l in &labels { counts[l] += 1; }
            let total: f64 = (0..3).map(|k| counts[k] as f64 * w[k]).sum();
            prop_assert!((total - labels.len() as f64).abs() < 1e-9);
        }
    }

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            classes: 3,
            concepts: 6,
            t_min: 4,
            t_max: 4,
            motif_len: 4,
            amplitude: 1.0,
            noise_sigma: 0.0,
            samples_per_class: 5,
            seed: 11,
            distractors_per_sample: 0,
        }
    }

    #[test]
    fn synthetic_noise_free_full_length_motif_is_constant_one() {
        let (samples, table) = generate_synthetic(&tiny_spec()).unwrap();
        for s in &samples {
            let planted = table.class_channels[s.label];
            for t in 0..s.len() {
                for c in 0..s.concepts() {
                    let expect = if c == planted { 1.0 } else { 0.0 };
                    assert_eq!(s.activations[[t, c]], expect, "sample {}", s.id);
                }
            }
        }
    }

    #[test]
    fn synthetic_noise_free_argmax_oracle_is_perfect() {
        let mut spec = tiny_spec();
        spec.t_min = 6;
        spec.t_max = 10;
        let (samples, table) = generate_synthetic(&spec).unwrap();
        for s in &samples {
            let sums: Vec<f64> = (0..s.concepts())
                .map(|c| s.activations.column(c).sum())
                .collect();
            let argmax = sums
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, table.class_channels[s.label]);
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let mut spec = tiny_spec();
        spec.noise_sigma = 0.7;
        spec.t_min = 5;
        spec.t_max = 9;
        spec.distractors_per_sample = 2;
        let (a, ta) = generate_synthetic(&spec).unwrap();
        let (b, tb) = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta.offsets, tb.offsets);
    }

    #[test]
    fn synthetic_rejects_invalid_spec() {
        let mut spec = tiny_spec();
        spec.motif_len = 5; // > t_min
        assert!(matches!(generate_synthetic(&spec), Err(Error::Input(_))));
        let mut spec = tiny_spec();
        spec.classes = 7; // > concepts
        assert!(matches!(generate_synthetic(&spec), Err(Error::Input(_))));
    }

    #[test]
    fn dataset_roundtrip_preserves_values() {
        let mut spec = tiny_spec();
        spec.noise_sigma = 0.3;
        let (samples, _) = generate_synthetic(&spec).unwrap();
        let names = synthetic_concept_names(spec.concepts);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        save_dataset(&samples, &names, &path).unwrap();
        let (loaded, loaded_names) = load_dataset(&path).unwrap();
        assert_eq!(loaded_names, names);
        assert_eq!(loaded, samples);
    }

    #[test]
    fn dataset_load_rejects_empty_activations() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"x\",\"label\":0,\"concepts\":[\"a\"],\"activations\":[]}\n",
        )
        .unwrap();
        match load_dataset(&path) {
            Err(Error::Format { line, field, .. }) => {
                assert_eq!(line, 1);
                assert_eq!(field, "activations");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn dataset_load_rejects_mismatched_c() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            concat!(
                "{\"id\":\"x\",\"label\":0,\"concepts\":[\"a\",\"b\"],\"activations\":[[1.0,2.0]]}\n",
                "{\"id\":\"y\",\"label\":1,\"activations\":[[1.0]]}\n",
            ),
        )
        .unwrap();
        match load_dataset(&path) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn dataset_load_rejects_nan() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"x\",\"label\":0,\"concepts\":[\"a\"],\"activations\":[[NaN]]}\n",
        )
        .unwrap();
        assert!(load_dataset(&path).is_err());
    }

    #[test]
    fn bank_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.jsonl");
        std::fs::write(
            &path,
            concat!(
                "{\"name\":\"left\",\"vector\":[1.0,0.0]}\n",
                "{\"name\":\"up\",\"vector\":[0.0,1.0]}\n",
            ),
        )
        .unwrap();
        let bank = load_bank(&path).unwrap();
        assert_eq!(bank.names, vec!["left", "up"]);

        std::fs::write(&path, "{\"name\":\"bad\",\"vector\":[2.0,0.0]}\n").unwrap();
        assert!(load_bank(&path).is_err());
    }
}
