//! Classifiers: the interpretable tree, the fine-tuned encoder, and the
//! prompting baselines.

pub mod encoder_classifier;
pub mod prompting;
pub mod tree;

use crate::features::FeatureKind;

pub use encoder_classifier::{EncoderClassifier, EncoderHyper};
pub use prompting::{prompt_classify, BaselineTemplates, PromptBaselineConfig, PromptPrediction, Strategy};
pub use tree::{DecisionPath, DecisionTree, TreeParams};

/// Tree settings for a feature-set variant: text-only features need a deeper
/// tree, and the NLLF+BoNG mix is pruned by an impurity threshold.
pub fn tree_params_for(kinds: &[FeatureKind], seed: u64) -> TreeParams {
    let has = |k| kinds.contains(&k);
    let mut p = TreeParams { seed, ..TreeParams::default() };
    if has(FeatureKind::Bong) && !has(FeatureKind::Nllf) && !has(FeatureKind::Ef) {
        p.max_depth = 10;
    } else if has(FeatureKind::Bong) && has(FeatureKind::Nllf) && !has(FeatureKind::Ef) {
        p.min_impurity_decrease = 1.2e-3;
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use FeatureKind::*;

    #[test]
    fn variant_hyperparameters() {
        assert_eq!(tree_params_for(&[Bong], 0).max_depth, 10);
        let p = tree_params_for(&[Nllf, Bong], 0);
        assert_eq!((p.max_depth, p.min_impurity_decrease), (5, 1.2e-3));
        for k in [vec![Nllf], vec![Ef], vec![Nllf, Ef], vec![Nllf, Ef, Bong]] {
            let p = tree_params_for(&k, 3);
            assert_eq!((p.max_depth, p.min_impurity_decrease, p.seed), (5, 0.0, 3));
        }
    }
}
