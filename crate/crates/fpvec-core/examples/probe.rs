// Scratch probe: which tensors make fingerprints fragile under random
// pruning, and how budgets shift the picture.

use fpvec_core::fingerprint::{eval_fsr, inject, make_dataset, FingerprintScheme, InjectOptions, SchemeKind};
use fpvec_core::harness::{generate_corpus, ExperimentPlan};
use fpvec_core::prune_ops::{prune, PruneMethod, PruneSpec};
use fpvec_core::toy_lm::{self, corpus_bytes, init_model};

fn main() {
    let mut plan = ExperimentPlan::default_desk_scale();
    if let Some(d) = std::env::args().nth(3) {
        let d: usize = d.parse().unwrap();
        plan.model.d_model = d;
        plan.model.d_ff = 4 * d;
    }
    if let Some(h) = std::env::args().nth(4) {
        plan.model.n_heads = h.parse().unwrap();
    }
    let mut pretrain = Vec::new();
    for spec in &plan.pretrain_corpora {
        pretrain.extend(generate_corpus(spec));
    }
    let init = init_model(&plan.model, plan.base_seed).unwrap();
    let base = toy_lm::train(&init, &pretrain, &plan.pretrain_spec).unwrap().checkpoint;

    let mut scheme = FingerprintScheme::new(SchemeKind::DialogTemplate, 1301);
    scheme.n_pairs = 8;
    scheme.trigger_len = 8;
    scheme.response_len = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(6);
    let epochs: u32 = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(40);
    let ds = make_dataset(&scheme, &corpus_bytes(&pretrain)).unwrap();

    let mut inject_spec = plan.inject_spec.clone();
    inject_spec.epochs = epochs;
    let opts = InjectOptions { regularizers: pretrain.clone(), reg_per_pair: plan.reg_per_pair };
    let fp = inject(&base, &ds, &inject_spec, Some(&opts)).unwrap().checkpoint;
    println!("inject fsr: {}", eval_fsr(&fp, &ds).unwrap().fsr);

    for (label, scope) in [
        ("default (all 2d)", vec![]),
        ("attn only", vec!["blocks.*.attn.*".to_string()]),
        ("mlp only", vec!["blocks.*.mlp.w*".to_string()]),
        ("head only", vec!["head.w".to_string()]),
    ] {
        for seed in [81u64, 82, 83] {
            let mut spec = PruneSpec::new(PruneMethod::Random, 0.2);
            spec.seed = seed;
            spec.scope = scope.clone();
            let (pruned, _) = prune(&fp, &spec, None).unwrap();
            let fsr = eval_fsr(&pruned, &ds).unwrap().fsr;
            print!("  random20 {label} seed{seed}: fsr={fsr}");
        }
        println!();
    }
}
