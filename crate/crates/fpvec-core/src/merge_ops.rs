//! Model-merging attacks: Task Arithmetic, Ties, Dare-Task, Dare-Ties.
//!
//! All four strategies form base-relative task vectors `d_k = m_k - base`
//! and recombine them under a merge weight `alpha` for model 1 versus
//! model 2. Ties runs trim / elect-sign / disjoint-merge on the task
//! vectors; the Dare variants drop task-vector entries at random and
//! rescale survivors by `1/(1-p)` before combining. DARE decisions come
//! from a counter-based RNG keyed by `(seed, tensor name, flat index)`,
//! so outputs never depend on iteration order or thread schedule.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, label_key, unit_uniform};
use crate::tensor_store::{check_compat, Checkpoint, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeStrategy {
    Task,
    Ties,
    DareTask,
    DareTies,
}

impl MergeStrategy {
    pub fn name(self) -> &'static str {
        match self {
            MergeStrategy::Task => "task",
            MergeStrategy::Ties => "ties",
            MergeStrategy::DareTask => "dare_task",
            MergeStrategy::DareTies => "dare_ties",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "task" => Ok(MergeStrategy::Task),
            "ties" => Ok(MergeStrategy::Ties),
            "dare_task" => Ok(MergeStrategy::DareTask),
            "dare_ties" => Ok(MergeStrategy::DareTies),
            other => Err(Error::Argument(format!("unknown merge strategy '{other}'"))),
        }
    }

    pub fn all() -> [MergeStrategy; 4] {
        [MergeStrategy::Task, MergeStrategy::Ties, MergeStrategy::DareTask, MergeStrategy::DareTies]
    }
}

/// How the elected sign weighs the two trimmed task vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Election {
    /// Sign of `alpha*d1 + (1-alpha)*d2` (alpha influences the election).
    #[default]
    Weighted,
    /// Sign of `d1 + d2` over retained values, ignoring alpha.
    Unweighted,
}

/// Parameters for [`merge`]. The shared base checkpoint is passed alongside
/// the models being merged.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MergeSpec {
    pub strategy: MergeStrategy,
    /// Weight of model 1 vs model 2, strictly inside (0, 1).
    pub alpha: f64,
    /// Fraction of largest-magnitude entries retained per task vector before
    /// sign election (Ties strategies).
    #[serde(default = "default_trim")]
    pub ties_trim_fraction: f64,
    /// Per-element drop probability for the Dare strategies.
    #[serde(default = "default_drop")]
    pub dare_drop_prob: f64,
    /// RNG seed for the Dare strategies.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub election: Election,
}

fn default_trim() -> f64 {
    0.2
}

fn default_drop() -> f64 {
    0.5
}

impl MergeSpec {
    pub fn new(strategy: MergeStrategy, alpha: f64) -> Self {
        MergeSpec {
            strategy,
            alpha,
            ties_trim_fraction: default_trim(),
            dare_drop_prob: default_drop(),
            seed: 0,
            election: Election::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Argument(format!(
                "alpha must lie strictly inside (0,1), got {}",
                self.alpha
            )));
        }
        if !(self.ties_trim_fraction > 0.0 && self.ties_trim_fraction <= 1.0) {
            return Err(Error::Argument(format!(
                "ties_trim_fraction must lie in (0,1], got {}",
                self.ties_trim_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.dare_drop_prob) {
            return Err(Error::Argument(format!(
                "dare_drop_prob must lie in [0,1), got {}",
                self.dare_drop_prob
            )));
        }
        Ok(())
    }
}

/// Merge two checkpoints according to `spec`, relative to their shared base.
pub fn merge(
    m1: &Checkpoint,
    m2: &Checkpoint,
    base: &Checkpoint,
    spec: &MergeSpec,
) -> Result<Checkpoint> {
    spec.validate()?;
    for pair in [(m1, m2), (m1, base)] {
        let report = check_compat(pair.0, pair.1);
        if !report.compatible {
            return Err(Error::Compat(report));
        }
    }

    let sub_seed = |k: u32| derive_seed(spec.seed, &format!("dare/v{k}"));
    let names: Vec<&str> = base.names().collect();
    let computed: Vec<Result<(String, Tensor)>> = names
        .par_iter()
        .map(|&name| {
            let b = base.get(name).expect("name from base");
            let t1 = m1.get(name).expect("compat checked");
            let t2 = m2.get(name).expect("compat checked");
            let mut d1: Vec<f64> = (0..b.len()).map(|i| t1.value(i) - b.value(i)).collect();
            let mut d2: Vec<f64> = (0..b.len()).map(|i| t2.value(i) - b.value(i)).collect();

            if matches!(spec.strategy, MergeStrategy::DareTask | MergeStrategy::DareTies) {
                drop_and_rescale(&mut d1, name, spec.dare_drop_prob, sub_seed(1));
                drop_and_rescale(&mut d2, name, spec.dare_drop_prob, sub_seed(2));
            }

            let merged: Vec<f64> = match spec.strategy {
                MergeStrategy::Task | MergeStrategy::DareTask => {
                    combine_task(b, &d1, &d2, spec.alpha)
                }
                MergeStrategy::Ties | MergeStrategy::DareTies => {
                    combine_ties(b, &d1, &d2, spec.alpha, spec.ties_trim_fraction, spec.election)
                }
            };
            let tensor = Tensor::from_f64_values(base.dtype(), b.shape().to_vec(), merged)?;
            if tensor.first_nonfinite().is_some() {
                return Err(Error::NonFinite(name.to_string()));
            }
            Ok((name.to_string(), tensor))
        })
        .collect();

    let mut out = Checkpoint::new(base.dtype());
    for item in computed {
        let (name, tensor) = item?;
        out.insert(name, tensor)?;
    }
    // Model 1 is the primary lineage; keep its metadata and record the spec.
    *out.meta_mut() = m1.meta().clone();
    out.set_meta("fpvec.merge.spec", serde_json::to_string(spec)?);
    out.set_meta("fpvec.merge.base_digest", base.digest());
    out.set_meta("fpvec.merge.m1_digest", m1.digest());
    out.set_meta("fpvec.merge.m2_digest", m2.digest());
    Ok(out)
}

/// `base + alpha*(m1-base) + (1-alpha)*(m2-base)`, elementwise.
///
/// Unlike [`merge`], alpha is not range-checked here, so the endpoints can be
/// probed directly (alpha = 1 reproduces `m1` exactly).
pub fn task_arithmetic(
    m1: &Checkpoint,
    m2: &Checkpoint,
    base: &Checkpoint,
    alpha: f64,
) -> Result<Checkpoint> {
    for pair in [(m1, m2), (m1, base)] {
        let report = check_compat(pair.0, pair.1);
        if !report.compatible {
            return Err(Error::Compat(report));
        }
    }
    let mut out = Checkpoint::new(base.dtype());
    for (name, b) in base.tensors() {
        let t1 = m1.get(name).expect("compat checked");
        let t2 = m2.get(name).expect("compat checked");
        let d1: Vec<f64> = (0..b.len()).map(|i| t1.value(i) - b.value(i)).collect();
        let d2: Vec<f64> = (0..b.len()).map(|i| t2.value(i) - b.value(i)).collect();
        let vals = combine_task(b, &d1, &d2, alpha);
        out.insert(name, Tensor::from_f64_values(base.dtype(), b.shape().to_vec(), vals)?)?;
    }
    Ok(out)
}

/// Ties merge with the default weighted election.
pub fn ties_merge(
    m1: &Checkpoint,
    m2: &Checkpoint,
    base: &Checkpoint,
    alpha: f64,
    trim_fraction: f64,
) -> Result<Checkpoint> {
    let mut spec = MergeSpec::new(MergeStrategy::Ties, alpha);
    spec.ties_trim_fraction = trim_fraction;
    merge(m1, m2, base, &spec)
}

fn combine_task(b: &Tensor, d1: &[f64], d2: &[f64], alpha: f64) -> Vec<f64> {
    (0..b.len())
        .map(|i| b.value(i) + (alpha * d1[i] + (1.0 - alpha) * d2[i]))
        .collect()
}

fn combine_ties(
    b: &Tensor,
    d1: &[f64],
    d2: &[f64],
    alpha: f64,
    trim_fraction: f64,
    election: Election,
) -> Vec<f64> {
    let keep1 = top_magnitude_mask(d1, trim_fraction);
    let keep2 = top_magnitude_mask(d2, trim_fraction);
    (0..b.len())
        .map(|i| {
            let t1 = if keep1[i] { d1[i] } else { 0.0 };
            let t2 = if keep2[i] { d2[i] } else { 0.0 };
            let electorate = match election {
                Election::Weighted => alpha * t1 + (1.0 - alpha) * t2,
                Election::Unweighted => t1 + t2,
            };
            let elected = sign_of(electorate);
            let mut num = 0.0;
            let mut den = 0.0;
            if elected != 0 {
                if sign_of(t1) == elected {
                    num += alpha * t1;
                    den += alpha;
                }
                if sign_of(t2) == elected {
                    num += (1.0 - alpha) * t2;
                    den += 1.0 - alpha;
                }
            }
            // den > 0 whenever a sign was elected: positive weights mean at
            // least one retained value carries the elected sign.
            let merged = if den > 0.0 { num / den } else { 0.0 };
            b.value(i) + merged
        })
        .collect()
}

#[inline]
fn sign_of(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// Number of entries retained by TRIM for a tensor of `n` elements.
pub fn retain_count(trim_fraction: f64, n: usize) -> usize {
    ((trim_fraction * n as f64).ceil() as usize).min(n)
}

/// Mask of the top `trim_fraction` entries by |value|; threshold ties are
/// broken by keeping the lower flat index.
fn top_magnitude_mask(values: &[f64], trim_fraction: f64) -> Vec<bool> {
    let n = values.len();
    let k = retain_count(trim_fraction, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        values[j]
            .abs()
            .partial_cmp(&values[i].abs())
            .expect("finite magnitudes")
            .then(i.cmp(&j))
    });
    let mut mask = vec![false; n];
    for &i in order.iter().take(k) {
        mask[i] = true;
    }
    mask
}

fn drop_and_rescale(values: &mut [f64], name: &str, p: f64, seed: u64) {
    let nk = label_key(name);
    let scale = 1.0 / (1.0 - p);
    for (i, v) in values.iter_mut().enumerate() {
        if unit_uniform(seed, nk, i as u64) < p {
            *v = 0.0;
        } else {
            *v *= scale;
        }
    }
}

/// Drop-and-rescale a checkpoint-shaped delta: each element is zeroed with
/// probability `p` using the counter-based stream keyed by
/// `(seed, tensor name, flat index)`; survivors are multiplied by `1/(1-p)`.
pub fn dare_transform(delta: &Checkpoint, p: f64, seed: u64) -> Result<Checkpoint> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Argument(format!("drop probability must lie in [0,1), got {p}")));
    }
    let mut out = Checkpoint::new(delta.dtype());
    for (name, t) in delta.tensors() {
        let mut vals = t.values_f64();
        drop_and_rescale(&mut vals, name, p, seed);
        out.insert(name, Tensor::from_f64_values(delta.dtype(), t.shape().to_vec(), vals)?)?;
    }
    *out.meta_mut() = delta.meta().clone();
    Ok(out)
}

/// One merged checkpoint per alpha, with identical seed handling across the
/// sweep. Deterministic across runs.
pub fn merge_sweep(
    m1: &Checkpoint,
    m2: &Checkpoint,
    base: &Checkpoint,
    spec_template: &MergeSpec,
    alphas: &[f64],
) -> Result<Vec<(f64, Checkpoint)>> {
    let mut out = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut spec = spec_template.clone();
        spec.alpha = alpha;
        out.push((alpha, merge(m1, m2, base, &spec)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_store::Dtype;
    use proptest::prelude::*;

    fn ckpt(dtype: Dtype, entries: &[(&str, Vec<usize>, Vec<f64>)]) -> Checkpoint {
        let mut c = Checkpoint::new(dtype);
        for (name, shape, vals) in entries {
            c.insert(*name, Tensor::from_f64_values(dtype, shape.clone(), vals.clone()).unwrap())
                .unwrap();
        }
        c
    }

    fn single(dtype: Dtype, vals: Vec<f64>) -> Checkpoint {
        let n = vals.len();
        ckpt(dtype, &[("w", vec![n], vals)])
    }

    #[test]
    fn task_arithmetic_hand_examples() {
        let base = single(Dtype::F64, vec![0.0]);
        let m1 = single(Dtype::F64, vec![1.0]);
        let m2 = single(Dtype::F64, vec![3.0]);
        let out = task_arithmetic(&m1, &m2, &base, 0.5).unwrap();
        assert_eq!(out.get("w").unwrap().value(0), 2.0);

        // Zero task vectors reproduce the base.
        let out = task_arithmetic(&base, &base, &base, 0.3).unwrap();
        assert_eq!(out.digest(), base.digest());

        // alpha = 1 reproduces m1 exactly (outside merge()'s range on purpose).
        let out = task_arithmetic(&m1, &m2, &base, 1.0).unwrap();
        assert_eq!(out.get("w").unwrap().value(0), 1.0);
    }

    #[test]
    fn merge_validates_spec_and_compat() {
        let base = single(Dtype::F64, vec![0.0]);
        let m1 = single(Dtype::F64, vec![1.0]);
        let m2 = single(Dtype::F64, vec![2.0]);

        let bad = MergeSpec::new(MergeStrategy::Task, 1.0);
        assert!(matches!(merge(&m1, &m2, &base, &bad), Err(Error::Argument(_))));
        let bad = MergeSpec::new(MergeStrategy::Task, 0.0);
        assert!(matches!(merge(&m1, &m2, &base, &bad), Err(Error::Argument(_))));

        let other = single(Dtype::F64, vec![1.0, 2.0]);
        let spec = MergeSpec::new(MergeStrategy::Task, 0.5);
        assert!(matches!(merge(&m1, &other, &base, &spec), Err(Error::Compat(_))));
    }

    #[test]
    fn dare_task_with_zero_drop_equals_task() {
        let base = single(Dtype::F32, vec![0.5, -1.0, 2.0]);
        let m1 = single(Dtype::F32, vec![1.5, 0.0, 2.5]);
        let m2 = single(Dtype::F32, vec![0.0, -2.0, 1.0]);
        let mut spec = MergeSpec::new(MergeStrategy::DareTask, 0.3);
        spec.dare_drop_prob = 0.0;
        let dare = merge(&m1, &m2, &base, &spec).unwrap();
        spec.strategy = MergeStrategy::Task;
        let task = merge(&m1, &m2, &base, &spec).unwrap();
        assert_eq!(
            dare.get("w").unwrap().values_f64(),
            task.get("w").unwrap().values_f64()
        );
    }

    #[test]
    fn ties_single_coordinate_example() {
        // trim=1.0, alpha=0.5, d1=+0.3, d2=-0.1: weighted sum +0.1 elects +,
        // only d1 agrees, renormalized weight 1 -> delta +0.3.
        let base = single(Dtype::F64, vec![10.0]);
        let m1 = single(Dtype::F64, vec![10.3]);
        let m2 = single(Dtype::F64, vec![9.9]);
        let out = ties_merge(&m1, &m2, &base, 0.5, 1.0).unwrap();
        let got = out.get("w").unwrap().value(0);
        assert!((got - 10.3).abs() < 1e-12, "{got}");
    }

    #[test]
    fn ties_zero_deltas_reproduce_base() {
        let base = single(Dtype::F64, vec![1.0, -2.0, 3.0]);
        let out = ties_merge(&base, &base, &base, 0.5, 0.5).unwrap();
        assert_eq!(out.digest(), base.digest());
    }

    #[test]
    fn ties_trim_zeroes_small_entries_before_election() {
        // d1 = [0.9, 0.1], trim=0.5 keeps only the 0.9 entry; the second
        // coordinate is zeroed before election, so only d2 votes there.
        let base = single(Dtype::F64, vec![0.0, 0.0]);
        let m1 = single(Dtype::F64, vec![0.9, 0.1]);
        let m2 = single(Dtype::F64, vec![-0.1, -0.2]);
        let out = ties_merge(&m1, &m2, &base, 0.5, 0.5).unwrap();
        // d2's retained entry is its -0.2 (largest magnitude). Coord 0:
        // electorate 0.5*0.9 -> sign +, only d1 agrees -> 0.9. Coord 1: d1
        // trimmed away, electorate 0.5*(-0.2) -> sign -, only d2 agrees -> -0.2.
        assert_eq!(out.get("w").unwrap().values_f64(), vec![0.9, -0.2]);
    }

    #[test]
    fn trim_threshold_ties_keep_lower_flat_index() {
        // Two entries share |0.5|; trim=0.5 keeps exactly one: index 0.
        let base = single(Dtype::F64, vec![0.0, 0.0]);
        let m1 = single(Dtype::F64, vec![-0.5, 0.5]);
        let m2 = base.clone();
        let out = ties_merge(&m1, &m2, &base, 0.5, 0.5).unwrap();
        assert_eq!(out.get("w").unwrap().values_f64(), vec![-0.5, 0.0]);
    }

    #[test]
    fn dare_rescales_survivors() {
        // With p=0.5 every survivor of value 0.2 must become exactly 0.4.
        let delta = single(Dtype::F64, vec![0.2; 64]);
        let out = dare_transform(&delta, 0.5, 7).unwrap();
        let vals = out.get("w").unwrap().values_f64();
        assert!(vals.iter().all(|&v| v == 0.0 || v == 0.4));
        assert!(vals.iter().any(|&v| v == 0.0));
        assert!(vals.iter().any(|&v| v == 0.4));
    }

    #[test]
    fn dare_zero_p_is_bit_exact_identity() {
        let delta = single(Dtype::F32, vec![0.25, -0.0, 1.5e-3, -9.0]);
        let out = dare_transform(&delta, 0.0, 123).unwrap();
        assert_eq!(out.digest(), delta.digest());
    }

    #[test]
    fn dare_rejects_p_outside_range() {
        let delta = single(Dtype::F64, vec![1.0]);
        assert!(matches!(dare_transform(&delta, 1.0, 0), Err(Error::Argument(_))));
        assert!(matches!(dare_transform(&delta, -0.1, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn dare_is_deterministic_per_seed_and_varies_across_seeds() {
        let delta = single(Dtype::F64, (0..100).map(|i| i as f64 * 0.1 + 0.05).collect());
        let a = dare_transform(&delta, 0.5, 42).unwrap();
        let b = dare_transform(&delta, 0.5, 42).unwrap();
        let c = dare_transform(&delta, 0.5, 43).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn dare_drop_rate_tracks_p() {
        let delta = single(Dtype::F64, vec![1.0; 10_000]);
        let out = dare_transform(&delta, 0.3, 5).unwrap();
        let dropped = out.get("w").unwrap().iter_f64().filter(|&v| v == 0.0).count();
        // 3 sigma ~ 137 for n=10000, p=0.3.
        assert!((dropped as i64 - 3000).abs() < 200, "dropped {dropped}");
    }

    #[test]
    fn merge_sweep_cardinality_and_determinism() {
        let base = single(Dtype::F32, (0..16).map(|i| i as f64 * 0.5).collect());
        let m1 = single(Dtype::F32, (0..16).map(|i| i as f64 * 0.5 + 0.3).collect());
        let m2 = single(Dtype::F32, (0..16).map(|i| i as f64 * 0.5 - 0.7).collect());
        let spec = MergeSpec::new(MergeStrategy::DareTies, 0.5);
        let alphas: Vec<f64> = (1..10).map(|i| i as f64 / 10.0).collect();
        let sweep1 = merge_sweep(&m1, &m2, &base, &spec, &alphas).unwrap();
        let sweep2 = merge_sweep(&m1, &m2, &base, &spec, &alphas).unwrap();
        assert_eq!(sweep1.len(), 9);
        for ((a1, c1), (a2, c2)) in sweep1.iter().zip(&sweep2) {
            assert_eq!(a1, a2);
            assert_eq!(c1.digest(), c2.digest());
        }

        let one = merge_sweep(&m1, &m2, &base, &spec, &[0.5]).unwrap();
        let mut direct_spec = spec.clone();
        direct_spec.alpha = 0.5;
        let direct = merge(&m1, &m2, &base, &direct_spec).unwrap();
        assert_eq!(one[0].1.digest(), direct.digest());
    }

    #[test]
    fn strategies_preserve_structure() {
        let base = single(Dtype::F32, vec![1.0, 2.0, 3.0, 4.0]);
        let m1 = single(Dtype::F32, vec![2.0, 1.0, 4.0, 3.0]);
        let m2 = single(Dtype::F32, vec![0.0, 0.5, 2.5, 5.0]);
        for strategy in MergeStrategy::all() {
            let spec = MergeSpec::new(strategy, 0.4);
            let out = merge(&m1, &m2, &base, &spec).unwrap();
            assert!(check_compat(&out, &base).compatible, "{strategy:?}");
        }
    }

    #[test]
    fn merge_spec_json_roundtrip_with_defaults() {
        let spec: MergeSpec =
            serde_json::from_str(r#"{"strategy":"dare_ties","alpha":0.25,"seed":9}"#).unwrap();
        assert_eq!(spec.strategy, MergeStrategy::DareTies);
        assert_eq!(spec.ties_trim_fraction, 0.2);
        assert_eq!(spec.dare_drop_prob, 0.5);
        assert_eq!(spec.election, Election::Weighted);
        let json = serde_json::to_string(&spec).unwrap();
        let back: MergeSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back.alpha, 0.25);
    }

    // Brute-force reference: O(n^2) rank-based trim, then a literal
    // transcription of elect + disjoint-merge. Shares only retain_count with
    // the production path.
    fn ties_reference(
        b: &[f64],
        d1: &[f64],
        d2: &[f64],
        alpha: f64,
        trim: f64,
        election: Election,
    ) -> Vec<f64> {
        let n = b.len();
        let k = retain_count(trim, n);
        let rank_keep = |d: &[f64]| -> Vec<bool> {
            (0..n)
                .map(|i| {
                    let rank = (0..n)
                        .filter(|&j| {
                            d[j].abs() > d[i].abs() || (d[j].abs() == d[i].abs() && j < i)
                        })
                        .count();
                    rank < k
                })
                .collect()
        };
        let keep1 = rank_keep(d1);
        let keep2 = rank_keep(d2);
        (0..n)
            .map(|i| {
                let t1 = if keep1[i] { d1[i] } else { 0.0 };
                let t2 = if keep2[i] { d2[i] } else { 0.0 };
                let s = match election {
                    Election::Weighted => alpha * t1 + (1.0 - alpha) * t2,
                    Election::Unweighted => t1 + t2,
                };
                let elected = sign_of(s);
                if elected == 0 {
                    return b[i];
                }
                let mut num = 0.0;
                let mut den = 0.0;
                if sign_of(t1) == elected {
                    num += alpha * t1;
                    den += alpha;
                }
                if sign_of(t2) == elected {
                    num += (1.0 - alpha) * t2;
                    den += 1.0 - alpha;
                }
                b[i] + num / den
            })
            .collect()
    }

    #[test]
    fn ties_matches_brute_force_reference() {
        let mut rng = crate::rng::seeded_rng(99);
        use rand::Rng;
        for case in 0..100 {
            let n = 16;
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v1: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v2: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let alpha = rng.gen_range(0.05..0.95);
            let trim = rng.gen_range(0.05..1.0f64);
            let base = single(Dtype::F64, b.clone());
            let m1 = single(Dtype::F64, b.iter().zip(&v1).map(|(x, d)| x + d).collect());
            let m2 = single(Dtype::F64, b.iter().zip(&v2).map(|(x, d)| x + d).collect());
            let out = ties_merge(&m1, &m2, &base, alpha, trim).unwrap();
            // Recompute the task vectors the way merge does (from the stored
            // checkpoints) so both sides see identical inputs.
            let d1: Vec<f64> =
                m1.get("w").unwrap().values_f64().iter().zip(&b).map(|(x, y)| x - y).collect();
            let d2: Vec<f64> =
                m2.get("w").unwrap().values_f64().iter().zip(&b).map(|(x, y)| x - y).collect();
            let want = ties_reference(&b, &d1, &d2, alpha, trim, Election::Weighted);
            assert_eq!(out.get("w").unwrap().values_f64(), want, "case {case}");
        }
    }

    proptest! {
        // With trim=1.0 and sign-agreeing deltas, every coordinate elects the
        // shared sign and both vectors contribute, so Ties reduces to Task
        // with weights renormalized to 1 -- plain task arithmetic.
        #[test]
        fn prop_ties_degenerates_to_task_when_signs_agree(
            signs in proptest::collection::vec(proptest::bool::ANY, 8),
            mags1 in proptest::collection::vec(0.01f64..1.0, 8),
            mags2 in proptest::collection::vec(0.01f64..1.0, 8),
            alpha in 0.05f64..0.95,
        ) {
            let d1: Vec<f64> = signs.iter().zip(&mags1).map(|(&s, &m)| if s { m } else { -m }).collect();
            let d2: Vec<f64> = signs.iter().zip(&mags2).map(|(&s, &m)| if s { m } else { -m }).collect();
            let base = single(Dtype::F64, vec![0.0; 8]);
            let m1 = single(Dtype::F64, d1);
            let m2 = single(Dtype::F64, d2);
            let ties = ties_merge(&m1, &m2, &base, alpha, 1.0).unwrap();
            let task = task_arithmetic(&m1, &m2, &base, alpha).unwrap();
            for i in 0..8 {
                let (x, y) = (ties.get("w").unwrap().value(i), task.get("w").unwrap().value(i));
                prop_assert!((x - y).abs() <= 1e-15 * x.abs().max(1.0), "{} vs {}", x, y);
            }
        }

        #[test]
        fn prop_task_swap_symmetry(
            b in proptest::collection::vec(-1.0f64..1.0, 6),
            v1 in proptest::collection::vec(-1.0f64..1.0, 6),
            v2 in proptest::collection::vec(-1.0f64..1.0, 6),
            alpha in 0.05f64..0.95,
        ) {
            let base = single(Dtype::F64, b.clone());
            let m1 = single(Dtype::F64, b.iter().zip(&v1).map(|(x, d)| x + d).collect());
            let m2 = single(Dtype::F64, b.iter().zip(&v2).map(|(x, d)| x + d).collect());
            let ab = task_arithmetic(&m1, &m2, &base, alpha).unwrap();
            let ba = task_arithmetic(&m2, &m1, &base, 1.0 - alpha).unwrap();
            for i in 0..6 {
                let (x, y) = (ab.get("w").unwrap().value(i), ba.get("w").unwrap().value(i));
                prop_assert!((x - y).abs() <= 1e-12, "{} vs {}", x, y);
            }
        }
    }
}
