//! Fingerprint-vector extraction and application, plus general delta
//! arithmetic.
//!
//! A fingerprint vector is the elementwise difference between a fingerprinted
//! checkpoint and its clean base. Applying it to a structurally compatible
//! downstream checkpoint with a scaling coefficient transplants the
//! fingerprint without further training. All arithmetic accumulates in f64
//! regardless of the storage dtype and rounds once on store.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_store::{check_compat, Checkpoint, LoadOptions, Tensor};

/// A checkpoint-shaped parameter delta with provenance metadata.
#[derive(Debug, Clone)]
pub struct FingerprintVector {
    /// The delta tensors; names, shapes, and dtype match the originating base.
    pub delta: Checkpoint,
    /// Fingerprint scheme that produced the fingerprinted model.
    pub scheme_id: String,
    /// Digest of the clean base checkpoint.
    pub base_digest: String,
    /// Digest of the fingerprinted checkpoint.
    pub fp_digest: String,
    /// Multiplicative rescales applied after extraction, in order.
    pub scale_history: Vec<f64>,
}

const META_SCHEME: &str = "fpvec.scheme_id";
const META_BASE: &str = "fpvec.base_digest";
const META_FP: &str = "fpvec.fp_digest";
const META_SCALES: &str = "fpvec.scale_history";

impl FingerprintVector {
    /// Persist as a safetensors file with provenance in the metadata.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut ckpt = self.delta.clone();
        ckpt.set_meta(META_SCHEME, &self.scheme_id);
        ckpt.set_meta(META_BASE, &self.base_digest);
        ckpt.set_meta(META_FP, &self.fp_digest);
        ckpt.set_meta(META_SCALES, serde_json::to_string(&self.scale_history)?);
        ckpt.save(path)
    }

    /// Load a vector persisted by [`FingerprintVector::save`].
    ///
    /// Deltas may legitimately contain zeros only; non-finite elements are
    /// still rejected, matching checkpoint loading.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ckpt = Checkpoint::load_with(path, LoadOptions::default())?;
        let meta = ckpt.meta();
        let scheme_id = meta.get(META_SCHEME).cloned().unwrap_or_default();
        let base_digest = meta.get(META_BASE).cloned().unwrap_or_default();
        let fp_digest = meta.get(META_FP).cloned().unwrap_or_default();
        let scale_history = match meta.get(META_SCALES) {
            Some(raw) => serde_json::from_str(raw)
                .map_err(|e| Error::Parse(format!("bad {META_SCALES} metadata: {e}")))?,
            None => Vec::new(),
        };
        Ok(FingerprintVector { delta: ckpt, scheme_id, base_digest, fp_digest, scale_history })
    }
}

/// Extract the fingerprint vector `fp_model - base`, elementwise.
pub fn extract_delta(fp_model: &Checkpoint, base: &Checkpoint) -> Result<FingerprintVector> {
    extract_delta_with_scheme(fp_model, base, "")
}

/// [`extract_delta`] with an explicit scheme id recorded in the provenance.
pub fn extract_delta_with_scheme(
    fp_model: &Checkpoint,
    base: &Checkpoint,
    scheme_id: &str,
) -> Result<FingerprintVector> {
    let report = check_compat(fp_model, base);
    if !report.compatible {
        return Err(Error::Compat(report));
    }
    let dtype = base.dtype();
    let names: Vec<&str> = base.names().collect();
    let computed: Vec<Result<(String, Tensor)>> = names
        .par_iter()
        .map(|&name| {
            let b = base.get(name).expect("name from base");
            let f = fp_model.get(name).expect("compat checked");
            let vals: Vec<f64> = (0..b.len()).map(|i| f.value(i) - b.value(i)).collect();
            let tensor = Tensor::from_f64_values(dtype, b.shape().to_vec(), vals)?;
            if tensor.first_nonfinite().is_some() {
                return Err(Error::NonFinite(name.to_string()));
            }
            Ok((name.to_string(), tensor))
        })
        .collect();

    let mut delta = Checkpoint::new(dtype);
    for item in computed {
        let (name, tensor) = item?;
        delta.insert(name, tensor)?;
    }
    Ok(FingerprintVector {
        delta,
        scheme_id: scheme_id.to_string(),
        base_digest: base.digest(),
        fp_digest: fp_model.digest(),
        scale_history: Vec::new(),
    })
}

/// Names skipped by a non-strict application.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ApplyReport {
    /// Delta tensors that were not applied (absent or shape/dtype-mismatched
    /// in the target).
    pub skipped: Vec<String>,
    /// Scaling coefficient used.
    pub lambda: f64,
}

/// Apply `target + lambda * delta` in strict mode: the target must be fully
/// compatible with the delta.
pub fn apply_delta(
    target: &Checkpoint,
    vec: &FingerprintVector,
    lambda: f64,
) -> Result<Checkpoint> {
    let report = check_compat(target, &vec.delta);
    if !report.compatible {
        return Err(Error::Compat(report));
    }
    let (ckpt, _) = apply_delta_inner(target, vec, lambda)?;
    Ok(ckpt)
}

/// Apply to the name-intersecting tensors with matching shapes and dtypes,
/// copying everything else through unchanged. The report lists delta tensors
/// that were skipped.
pub fn apply_delta_partial(
    target: &Checkpoint,
    vec: &FingerprintVector,
    lambda: f64,
) -> Result<(Checkpoint, ApplyReport)> {
    apply_delta_inner(target, vec, lambda)
}

fn apply_delta_inner(
    target: &Checkpoint,
    vec: &FingerprintVector,
    lambda: f64,
) -> Result<(Checkpoint, ApplyReport)> {
    if !lambda.is_finite() {
        return Err(Error::Argument(format!("lambda must be finite, got {lambda}")));
    }
    let dtype = target.dtype();
    let names: Vec<&str> = target.names().collect();
    let computed: Vec<Result<(String, Tensor)>> = names
        .par_iter()
        .map(|&name| {
            let t = target.get(name).expect("name from target");
            let applies = match vec.delta.get(name) {
                Some(d) => d.shape() == t.shape() && d.dtype() == t.dtype(),
                None => false,
            };
            // lambda == 0 short-circuits to an exact copy; going through
            // arithmetic would rewrite -0.0 elements as +0.0.
            if !applies || lambda == 0.0 {
                return Ok((name.to_string(), t.clone()));
            }
            let d = vec.delta.get(name).expect("checked above");
            let vals: Vec<f64> =
                (0..t.len()).map(|i| t.value(i) + lambda * d.value(i)).collect();
            let tensor = Tensor::from_f64_values(dtype, t.shape().to_vec(), vals)?;
            if tensor.first_nonfinite().is_some() {
                return Err(Error::NonFinite(name.to_string()));
            }
            Ok((name.to_string(), tensor))
        })
        .collect();

    let mut out = Checkpoint::new(dtype);
    for item in computed {
        let (name, tensor) = item?;
        out.insert(name, tensor)?;
    }
    let skipped: Vec<String> = vec
        .delta
        .names()
        .filter(|name| {
            target
                .get(name)
                .map(|t| {
                    let d = vec.delta.get(name).expect("iterating delta");
                    t.shape() != d.shape() || t.dtype() != d.dtype()
                })
                .unwrap_or(true)
        })
        .map(String::from)
        .collect();

    *out.meta_mut() = target.meta().clone();
    out.set_meta("fpvec.applied.scheme_id", &vec.scheme_id);
    out.set_meta("fpvec.applied.base_digest", &vec.base_digest);
    out.set_meta("fpvec.applied.fp_digest", &vec.fp_digest);
    out.set_meta("fpvec.applied.lambda", format!("{lambda}"));

    Ok((out, ApplyReport { skipped, lambda }))
}

/// Multiply the delta elementwise by `s`, recording the scale in the
/// provenance history.
pub fn scale_delta(vec: &FingerprintVector, s: f64) -> Result<FingerprintVector> {
    if !s.is_finite() {
        return Err(Error::Argument(format!("scale must be finite, got {s}")));
    }
    let dtype = vec.delta.dtype();
    let mut delta = Checkpoint::new(dtype);
    for (name, t) in vec.delta.tensors() {
        let vals: Vec<f64> = t.iter_f64().map(|v| v * s).collect();
        let tensor = Tensor::from_f64_values(dtype, t.shape().to_vec(), vals)?;
        if tensor.first_nonfinite().is_some() {
            return Err(Error::NonFinite(name.to_string()));
        }
        delta.insert(name, tensor)?;
    }
    let mut scale_history = vec.scale_history.clone();
    scale_history.push(s);
    Ok(FingerprintVector {
        delta,
        scheme_id: vec.scheme_id.clone(),
        base_digest: vec.base_digest.clone(),
        fp_digest: vec.fp_digest.clone(),
        scale_history,
    })
}

/// Per-tensor norms of a delta.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Norms {
    pub l1: f64,
    pub l2: f64,
    pub linf: f64,
}

/// Key of the aggregate entry in [`delta_norms`] output.
pub const TOTAL_NORMS_KEY: &str = "__total__";

/// Per-tensor l1/l2/linf norms plus a `__total__` aggregate over all tensors.
///
/// Reductions run in fixed lexicographic element order so results are
/// identical across thread counts.
pub fn delta_norms(vec: &FingerprintVector) -> BTreeMap<String, Norms> {
    let mut out = BTreeMap::new();
    let mut total_l1 = 0.0f64;
    let mut total_sq = 0.0f64;
    let mut total_linf = 0.0f64;
    for (name, t) in vec.delta.tensors() {
        let mut l1 = 0.0f64;
        let mut sq = 0.0f64;
        let mut linf = 0.0f64;
        for v in t.iter_f64() {
            let a = v.abs();
            l1 += a;
            sq += v * v;
            if a > linf {
                linf = a;
            }
        }
        out.insert(name.to_string(), Norms { l1, l2: sq.sqrt(), linf });
        total_l1 += l1;
        total_sq += sq;
        if linf > total_linf {
            total_linf = linf;
        }
    }
    out.insert(
        TOTAL_NORMS_KEY.to_string(),
        Norms { l1: total_l1, l2: total_sq.sqrt(), linf: total_linf },
    );
    out
}
