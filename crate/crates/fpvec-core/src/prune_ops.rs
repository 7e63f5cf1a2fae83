//! Pruning attacks: random, L1-norm, L2-norm, and Taylor importance.
//!
//! Pruning here is mask-pruning: selected units are zeroed in place of
//! structural removal, so shapes are preserved and every downstream
//! operation (trigger evaluation, delta arithmetic) runs unchanged. Units
//! are single elements or whole axis-0 row groups, the per-tensor budget is
//! exactly `floor(ratio * units)`, and the lowest-importance units go first
//! with ties broken by lower flat index.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, label_key, unit_uniform};
use crate::tensor_store::{Checkpoint, Mismatch, MismatchReason, CompatReport, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneMethod {
    Random,
    L1,
    L2,
    Taylor,
}

impl PruneMethod {
    pub fn name(self) -> &'static str {
        match self {
            PruneMethod::Random => "random",
            PruneMethod::L1 => "l1",
            PruneMethod::L2 => "l2",
            PruneMethod::Taylor => "taylor",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(PruneMethod::Random),
            "l1" => Ok(PruneMethod::L1),
            "l2" => Ok(PruneMethod::L2),
            "taylor" => Ok(PruneMethod::Taylor),
            other => Err(Error::Argument(format!("unknown prune method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    /// Prune single weights.
    #[default]
    Element,
    /// Prune whole output rows (axis-0 groups) of >=2-D tensors.
    RowGroup,
}

impl Granularity {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "element" => Ok(Granularity::Element),
            "row-group" => Ok(Granularity::RowGroup),
            other => Err(Error::Argument(format!("unknown granularity '{other}'"))),
        }
    }
}

/// Parameters for [`prune`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneSpec {
    pub method: PruneMethod,
    /// Fraction of prunable units removed, strictly in (0,1).
    pub ratio: f64,
    #[serde(default)]
    pub granularity: Granularity,
    /// Name globs (`*` and `?`) selecting prunable tensors. Empty means the
    /// default scope: all 2-D weight tensors except embeddings and
    /// normalization parameters.
    #[serde(default)]
    pub scope: Vec<String>,
    /// Seed for the random method.
    #[serde(default)]
    pub seed: u64,
    /// Path of a gradient checkpoint; required by (and only valid for) the
    /// taylor method. The gradients themselves are passed to [`prune`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_source: Option<String>,
}

impl PruneSpec {
    pub fn new(method: PruneMethod, ratio: f64) -> Self {
        PruneSpec {
            method,
            ratio,
            granularity: Granularity::default(),
            scope: Vec::new(),
            seed: 0,
            grad_source: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::Argument(format!(
                "ratio must lie strictly inside (0,1), got {}",
                self.ratio
            )));
        }
        match self.method {
            PruneMethod::Taylor if self.grad_source.is_none() => {
                Err(Error::Argument("taylor pruning requires grad_source".into()))
            }
            PruneMethod::Random | PruneMethod::L1 | PruneMethod::L2
                if self.grad_source.is_some() =>
            {
                Err(Error::Argument(format!(
                    "grad_source is only valid for taylor, not {}",
                    self.method.name()
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Per-tensor outcome of a pruning pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneTensorReport {
    pub name: String,
    pub units_total: usize,
    pub units_zeroed: usize,
    /// Importance score of the highest-scored unit that was zeroed (the cut
    /// boundary); None if nothing was zeroed.
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneReport {
    pub method: PruneMethod,
    pub ratio: f64,
    pub granularity: Granularity,
    pub tensors: Vec<PruneTensorReport>,
}

impl PruneReport {
    pub fn total_zeroed(&self) -> usize {
        self.tensors.iter().map(|t| t.units_zeroed).sum()
    }
}

/// Minimal `*`/`?` glob match.
fn glob_match(pattern: &str, name: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let n: Vec<char> = name.chars().collect();
    // Iterative matcher with single backtrack point for '*'.
    let (mut pi, mut ni) = (0usize, 0usize);
    let (mut star, mut mark) = (None::<usize>, 0usize);
    while ni < n.len() {
        if pi < p.len() && (p[pi] == '?' || p[pi] == n[ni]) {
            pi += 1;
            ni += 1;
        } else if pi < p.len() && p[pi] == '*' {
            star = Some(pi);
            mark = ni;
            pi += 1;
        } else if let Some(s) = star {
            pi = s + 1;
            mark += 1;
            ni = mark;
        } else {
            return false;
        }
    }
    while pi < p.len() && p[pi] == '*' {
        pi += 1;
    }
    pi == p.len()
}

/// Default scope predicate: 2-D tensors that are not embeddings or
/// normalization parameters.
fn in_default_scope(name: &str, tensor: &Tensor) -> bool {
    if tensor.shape().len() != 2 {
        return false;
    }
    let lower = name.to_ascii_lowercase();
    !(lower.contains("embed") || lower.contains("norm") || lower.contains("ln"))
}

/// Names selected by the spec's scope, in lexicographic order.
pub fn scoped_names(ckpt: &Checkpoint, spec: &PruneSpec) -> Vec<String> {
    ckpt.tensors()
        .filter(|(name, tensor)| {
            if spec.scope.is_empty() {
                in_default_scope(name, tensor)
            } else {
                spec.scope.iter().any(|pat| glob_match(pat, name))
            }
        })
        .map(|(name, _)| name.to_string())
        .collect()
}

fn unit_count(tensor: &Tensor, granularity: Granularity) -> Result<usize> {
    match granularity {
        Granularity::Element => Ok(tensor.len()),
        Granularity::RowGroup => {
            if tensor.shape().len() < 2 {
                return Err(Error::Argument(
                    "row-group pruning requires tensors with at least 2 dimensions".into(),
                ));
            }
            Ok(tensor.shape()[0])
        }
    }
}

fn unit_width(tensor: &Tensor, granularity: Granularity) -> usize {
    match granularity {
        Granularity::Element => 1,
        Granularity::RowGroup => tensor.shape()[1..].iter().product(),
    }
}

fn unit_scores(
    name: &str,
    tensor: &Tensor,
    grads: Option<&Tensor>,
    spec: &PruneSpec,
) -> Result<Vec<f64>> {
    let units = unit_count(tensor, spec.granularity)?;
    let width = unit_width(tensor, spec.granularity);
    let mut scores = Vec::with_capacity(units);
    for u in 0..units {
        let start = u * width;
        let score = match spec.method {
            PruneMethod::Random => {
                unit_uniform(derive_seed(spec.seed, "prune/random"), label_key(name), u as u64)
            }
            PruneMethod::L1 => (start..start + width).map(|i| tensor.value(i).abs()).sum(),
            PruneMethod::L2 => (start..start + width)
                .map(|i| {
                    let v = tensor.value(i);
                    v * v
                })
                .sum::<f64>()
                .sqrt(),
            PruneMethod::Taylor => {
                let g = grads.expect("validated");
                (start..start + width)
                    .map(|i| (tensor.value(i) * g.value(i)).abs())
                    .sum()
            }
        };
        scores.push(score);
    }
    Ok(scores)
}

/// Importance scores per scoped tensor: l1 = sum|w|, l2 = sqrt(sum w^2),
/// taylor = sum|w*g| over the unit's elements, random = seeded uniform draws.
pub fn importance_scores(
    ckpt: &Checkpoint,
    spec: &PruneSpec,
    grads: Option<&Checkpoint>,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let names = validate_inputs(ckpt, spec, grads)?;
    let mut out = BTreeMap::new();
    for name in names {
        let tensor = ckpt.get(&name).expect("scoped name");
        let g = grads.map(|gc| gc.get(&name).expect("compat checked"));
        out.insert(name.clone(), unit_scores(&name, tensor, g, spec)?);
    }
    Ok(out)
}

fn validate_inputs(
    ckpt: &Checkpoint,
    spec: &PruneSpec,
    grads: Option<&Checkpoint>,
) -> Result<Vec<String>> {
    spec.validate()?;
    if spec.method == PruneMethod::Taylor && grads.is_none() {
        return Err(Error::Argument("taylor pruning requires a gradient checkpoint".into()));
    }
    if spec.method != PruneMethod::Taylor && grads.is_some() {
        return Err(Error::Argument(format!(
            "gradients are only valid for taylor, not {}",
            spec.method.name()
        )));
    }
    let names = scoped_names(ckpt, spec);
    if names.is_empty() {
        return Err(Error::Argument("prune scope matches no tensors".into()));
    }
    if let Some(grads) = grads {
        // Gradients must cover every scoped tensor with matching shapes;
        // dtype may differ (gradients are often f64).
        let mut mismatches = Vec::new();
        for name in &names {
            let t = ckpt.get(name).expect("scoped name");
            match grads.get(name) {
                None => mismatches.push(Mismatch {
                    name: name.clone(),
                    reason: MismatchReason::MissingInRight,
                }),
                Some(g) if g.shape() != t.shape() => mismatches.push(Mismatch {
                    name: name.clone(),
                    reason: MismatchReason::ShapeMismatch,
                }),
                Some(_) => {}
            }
        }
        if !mismatches.is_empty() {
            return Err(Error::Compat(CompatReport { compatible: false, mismatches }));
        }
    }
    Ok(names)
}

/// Zero the lowest-importance units of every scoped tensor.
///
/// Exactly `floor(ratio * units)` units are zeroed per scoped tensor;
/// tensors outside the scope are copied through bit-exactly.
pub fn prune(
    ckpt: &Checkpoint,
    spec: &PruneSpec,
    grads: Option<&Checkpoint>,
) -> Result<(Checkpoint, PruneReport)> {
    let names = validate_inputs(ckpt, spec, grads)?;
    let scoped: std::collections::BTreeSet<&str> = names.iter().map(String::as_str).collect();

    let computed: Vec<Result<(String, Tensor, Option<PruneTensorReport>)>> = ckpt
        .tensors()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&(name, tensor)| {
            if !scoped.contains(name) {
                return Ok((name.to_string(), tensor.clone(), None));
            }
            let g = grads.map(|gc| gc.get(name).expect("compat checked"));
            let scores = unit_scores(name, tensor, g, spec)?;
            let units = scores.len();
            let width = unit_width(tensor, spec.granularity);
            let zero_count = (spec.ratio * units as f64).floor() as usize;

            // Lowest score first, ties by lower flat unit index.
            let mut order: Vec<usize> = (0..units).collect();
            order.sort_by(|&a, &b| {
                scores[a].partial_cmp(&scores[b]).expect("finite scores").then(a.cmp(&b))
            });
            let victims = &order[..zero_count];

            let mut vals = tensor.values_f64();
            for &u in victims {
                for i in u * width..(u + 1) * width {
                    vals[i] = 0.0;
                }
            }
            let threshold = victims.iter().map(|&u| scores[u]).fold(None, |acc: Option<f64>, s| {
                Some(acc.map_or(s, |a| a.max(s)))
            });
            let pruned = if zero_count == 0 {
                tensor.clone()
            } else {
                Tensor::from_f64_values(tensor.dtype(), tensor.shape().to_vec(), vals)?
            };
            let report = PruneTensorReport {
                name: name.to_string(),
                units_total: units,
                units_zeroed: zero_count,
                threshold,
            };
            Ok((name.to_string(), pruned, Some(report)))
        })
        .collect();

    let mut out = Checkpoint::new(ckpt.dtype());
    let mut tensors_report = Vec::new();
    for item in computed {
        let (name, tensor, report) = item?;
        out.insert(name, tensor)?;
        if let Some(r) = report {
            tensors_report.push(r);
        }
    }
    *out.meta_mut() = ckpt.meta().clone();
    out.set_meta("fpvec.prune.spec", serde_json::to_string(spec)?);

    let report = PruneReport {
        method: spec.method,
        ratio: spec.ratio,
        granularity: spec.granularity,
        tensors: tensors_report,
    };
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_store::Dtype;
    use proptest::prelude::*;

    fn ckpt(entries: &[(&str, Vec<usize>, Vec<f64>)]) -> Checkpoint {
        let mut c = Checkpoint::new(Dtype::F64);
        for (name, shape, vals) in entries {
            c.insert(*name, Tensor::from_f64(shape.clone(), vals.clone()).unwrap()).unwrap();
        }
        c
    }

    fn spec_scoped(method: PruneMethod, ratio: f64) -> PruneSpec {
        let mut s = PruneSpec::new(method, ratio);
        s.scope = vec!["*".into()];
        s
    }

    #[test]
    fn glob_match_basics() {
        assert!(glob_match("*", "anything"));
        assert!(glob_match("layers.*.attn.*", "layers.0.attn.wq"));
        assert!(!glob_match("layers.*.attn.*", "layers.0.mlp.w1"));
        assert!(glob_match("head.?", "head.w"));
        assert!(!glob_match("head.?", "head.wq"));
        assert!(glob_match("*.weight", "a.b.weight"));
        assert!(!glob_match("*.weight", "a.weight.bias"));
    }

    #[test]
    fn default_scope_takes_2d_non_embedding_non_norm() {
        let c = ckpt(&[
            ("blocks.0.attn.wq", vec![4, 4], vec![0.1; 16]),
            ("embed.tok", vec![8, 4], vec![0.1; 32]),
            ("ln_f.gain", vec![4], vec![1.0; 4]),
            ("blocks.0.norm1.gain", vec![4], vec![1.0; 4]),
            ("head.w", vec![8, 4], vec![0.1; 32]),
        ]);
        let spec = PruneSpec::new(PruneMethod::L1, 0.5);
        assert_eq!(scoped_names(&c, &spec), vec!["blocks.0.attn.wq", "head.w"]);
    }

    #[test]
    fn random_row_group_zeroes_exact_row_count() {
        let c = ckpt(&[("w", vec![10, 4], (0..40).map(|i| i as f64 + 1.0).collect())]);
        let mut spec = spec_scoped(PruneMethod::Random, 0.2);
        spec.granularity = Granularity::RowGroup;
        spec.seed = 7;
        let (out, report) = prune(&c, &spec, None).unwrap();
        assert_eq!(report.tensors[0].units_zeroed, 2);
        let vals = out.get("w").unwrap().values_f64();
        let zero_rows = (0..10)
            .filter(|&r| (0..4).all(|j| vals[r * 4 + j] == 0.0))
            .count();
        assert_eq!(zero_rows, 2);

        // Selection is determined by the seed.
        let (again, _) = prune(&c, &spec, None).unwrap();
        assert_eq!(again.digest(), out.digest());
        spec.seed = 8;
        let (other, _) = prune(&c, &spec, None).unwrap();
        assert_ne!(other.digest(), out.digest());
    }

    #[test]
    fn l1_element_zeroes_smallest_magnitude() {
        let c = ckpt(&[("w", vec![4], vec![0.5, -0.01, 0.2, 0.03])]);
        let spec = spec_scoped(PruneMethod::L1, 0.25);
        let (out, report) = prune(&c, &spec, None).unwrap();
        assert_eq!(out.get("w").unwrap().values_f64(), vec![0.5, 0.0, 0.2, 0.03]);
        assert_eq!(report.tensors[0].units_zeroed, 1);
        assert_eq!(report.tensors[0].threshold, Some(0.01));
    }

    #[test]
    fn taylor_uses_weight_times_gradient() {
        let c = ckpt(&[("w", vec![2], vec![1.0, 2.0])]);
        let g = ckpt(&[("w", vec![2], vec![3.0, 0.1])]);
        let mut spec = spec_scoped(PruneMethod::Taylor, 0.5);
        spec.grad_source = Some("grads.safetensors".into());
        // |w*g| = [3, 0.2] -> second element zeroed.
        let (out, _) = prune(&c, &spec, Some(&g)).unwrap();
        assert_eq!(out.get("w").unwrap().values_f64(), vec![1.0, 0.0]);

        let scores = importance_scores(&c, &spec, Some(&g)).unwrap();
        assert_eq!(scores.get("w").unwrap(), &vec![3.0, 0.2]);
    }

    #[test]
    fn zero_gradients_fall_back_to_flat_index_order() {
        let c = ckpt(&[("w", vec![4], vec![1.0, 2.0, 3.0, 4.0])]);
        let g = ckpt(&[("w", vec![4], vec![0.0; 4])]);
        let mut spec = spec_scoped(PruneMethod::Taylor, 0.5);
        spec.grad_source = Some("g".into());
        let (out, _) = prune(&c, &spec, Some(&g)).unwrap();
        assert_eq!(out.get("w").unwrap().values_f64(), vec![0.0, 0.0, 3.0, 4.0]);
    }

    #[test]
    fn row_norm_scores_match_hand_values() {
        let c = ckpt(&[("w", vec![2, 2], vec![3.0, -4.0, 1.0, 1.0])]);
        let mut spec = spec_scoped(PruneMethod::L1, 0.5);
        spec.granularity = Granularity::RowGroup;
        let scores = importance_scores(&c, &spec, None).unwrap();
        assert_eq!(scores.get("w").unwrap(), &vec![7.0, 2.0]);
        spec.method = PruneMethod::L2;
        let scores = importance_scores(&c, &spec, None).unwrap();
        let got = scores.get("w").unwrap();
        assert_eq!(got[0], 5.0);
    }

    #[test]
    fn argument_errors() {
        let c = ckpt(&[("w", vec![4], vec![1.0; 4])]);

        let mut spec = PruneSpec::new(PruneMethod::L1, 0.5);
        spec.scope = vec!["nomatch*".into()];
        assert!(matches!(prune(&c, &spec, None), Err(Error::Argument(_))));

        let spec = spec_scoped(PruneMethod::Taylor, 0.5);
        assert!(matches!(prune(&c, &spec, None), Err(Error::Argument(_))));

        let mut spec = spec_scoped(PruneMethod::L1, 0.5);
        spec.grad_source = Some("g".into());
        assert!(matches!(prune(&c, &spec, None), Err(Error::Argument(_))));

        let spec = spec_scoped(PruneMethod::L1, 0.0);
        assert!(matches!(prune(&c, &spec, None), Err(Error::Argument(_))));
        let spec = spec_scoped(PruneMethod::L1, 1.0);
        assert!(matches!(prune(&c, &spec, None), Err(Error::Argument(_))));

        // Row-group on a 1-D tensor.
        let mut spec = spec_scoped(PruneMethod::L1, 0.5);
        spec.granularity = Granularity::RowGroup;
        assert!(matches!(prune(&c, &spec, None), Err(Error::Argument(_))));
    }

    #[test]
    fn gradient_shape_mismatch_is_compat_error() {
        let c = ckpt(&[("w", vec![2], vec![1.0, 2.0])]);
        let g = ckpt(&[("w", vec![1, 2], vec![1.0, 2.0])]);
        let mut spec = spec_scoped(PruneMethod::Taylor, 0.5);
        spec.grad_source = Some("g".into());
        assert!(matches!(prune(&c, &spec, Some(&g)), Err(Error::Compat(_))));

        let missing = ckpt(&[("other", vec![2], vec![1.0, 2.0])]);
        assert!(matches!(prune(&c, &spec, Some(&missing)), Err(Error::Compat(_))));
    }

    #[test]
    fn out_of_scope_tensors_are_bit_exact() {
        let c = ckpt(&[
            ("w", vec![4], vec![0.5, -0.25, 0.125, -0.0625]),
            ("keep", vec![2], vec![-0.0, 1.5e-30]),
        ]);
        let mut spec = PruneSpec::new(PruneMethod::L1, 0.5);
        spec.scope = vec!["w".into()];
        let (out, report) = prune(&c, &spec, None).unwrap();
        assert_eq!(report.tensors.len(), 1);
        assert_eq!(
            out.get("keep").unwrap(),
            c.get("keep").unwrap()
        );
        assert!(crate::tensor_store::check_compat(&out, &c).compatible);
    }

    #[test]
    fn idempotent_when_zeroed_units_rank_lowest() {
        let c = ckpt(&[("w", vec![8], (1..=8).map(|i| i as f64 * 0.1).collect())]);
        let spec = spec_scoped(PruneMethod::L1, 0.4);
        let (once, _) = prune(&c, &spec, None).unwrap();
        let (twice, _) = prune(&once, &spec, None).unwrap();
        assert_eq!(once.digest(), twice.digest());
    }

    proptest! {
        #[test]
        fn prop_exact_counts_and_nested_ratio_monotonicity(
            vals in proptest::collection::vec(-1.0f64..1.0, 12..64),
            r1 in 0.05f64..0.45,
            extra in 0.05f64..0.5,
            method_pick in 0usize..3,
        ) {
            let r2 = (r1 + extra).min(0.95);
            let n = vals.len();
            let c = ckpt(&[("w", vec![n], vals)]);
            let method = [PruneMethod::Random, PruneMethod::L1, PruneMethod::L2][method_pick];
            let spec1 = spec_scoped(method, r1);
            let spec2 = spec_scoped(method, r2);
            let (out1, rep1) = prune(&c, &spec1, None).unwrap();
            let (out2, rep2) = prune(&c, &spec2, None).unwrap();
            prop_assert_eq!(rep1.tensors[0].units_zeroed, (r1 * n as f64).floor() as usize);
            prop_assert_eq!(rep2.tensors[0].units_zeroed, (r2 * n as f64).floor() as usize);

            // Zeroed positions at the lower ratio are a subset of those at
            // the higher ratio (ranking is fixed per input).
            let v1 = out1.get("w").unwrap().values_f64();
            let v2 = out2.get("w").unwrap().values_f64();
            let orig = c.get("w").unwrap().values_f64();
            for i in 0..n {
                let zeroed1 = v1[i] == 0.0 && orig[i] != 0.0;
                let zeroed2 = v2[i] == 0.0 && orig[i] != 0.0;
                prop_assert!(!zeroed1 || zeroed2, "index {} zeroed at r1 but not r2", i);
            }
        }
    }
}
