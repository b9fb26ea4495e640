//! Path-integral feature attribution for toy text classifiers.
//!
//! The crate bundles a small matrix type with a seeded SplitMix64 generator,
//! a reverse-mode tape, three differentiable sentence classifiers, path
//! construction and quadrature, the attribution methods (Grad*Input,
//! Integrated Gradients, Sequential Integrated Gradients, GradientShap and a
//! greedy discretized IG), masking-based faithfulness metrics, and the
//! document formats the `pathgrad` command line tool emits.
//!
//! ```
//! use pathgrad::{sequential_integrated_gradients, Architecture, BaselineSpec, Integration, ToyModel, Vocabulary};
//!
//! let vocab = Vocabulary::with_words(&["good", "movie", "bad"]).unwrap();
//! let model = ToyModel::random(Architecture::MlpPool, vocab.clone(), 8, 8, 7).unwrap();
//! let x = model.embed(&vocab.encode(&["good", "movie"]).unwrap()).unwrap();
//! let sig = sequential_integrated_gradients(&model, &x, &BaselineSpec::MaskToken, Integration::default()).unwrap();
//! assert_eq!(sig.per_word.len(), 2);
//! assert!(sig.max_word_residual().unwrap() < 1e-3);
//! ```

pub mod attribution;
pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod path;
pub mod report;
pub mod tensor;

pub use attribution::{
    default_noise_std, delta, discretized_integrated_gradients, grad_times_input, gradient_shap,
    integrated_gradients, normalize_word_attributions, random_attribution, sequential_integrated_gradients,
    AttributionResult, Integration, Method, MethodConfig, DEFAULT_SHAP_SAMPLES,
};
pub use corpus::{generate_synthetic_corpus, synthetic_vocabulary, Corpus, Sentence};
pub use error::{Error, Result};
pub use model::{
    corpus_accuracy, predicted_class, probabilities, train_toy_classifier, Activation, Architecture, ClassLogit,
    Differentiable, Head, SpecialToken, TokenSequence, ToyModel, TrainConfig, TrainReport,
    Vocabulary,
};
pub use path::{
    full_baseline, greedy_discretized_path, integrate_path, riemann_stieltjes_integrate, sequential_baseline,
    straight_line_path, BaselineKind, BaselineSpec, CallCounter, DiscretizedPath, Path, QuadratureRule,
};
pub use tensor::{finite_difference_gradient, relative_error, sample_gaussian, Matrix, Rng};
pub use evaluation::{
    apply_masking, attribute_tokens, comprehensiveness, evaluate_corpus, evaluate_corpus_with, log_odds,
    masking_outcome, select_top_tokens, sufficiency, MaskingMode, MaskingPlan, MetricReport, DEFAULT_FRACTION,
};
pub use report::{
    attribute_corpus, default_sweep, render_highlight_report, run_sweep, sweep_for_steps, AttributionDocument,
    AttributionRecord, HighlightReport, MetricsDocument, StepCount, SweepDocument, SweepEntry, Table,
};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/foundations.md")]
    mod foundations {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/paths.md")]
    mod paths {}
    #[doc = include_str!("../../../book/src/sig.md")]
    mod sig {}
    #[doc = include_str!("../../../book/src/methods.md")]
    mod methods {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
