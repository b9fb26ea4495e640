//! Faithfulness metrics computed by masking the highest-ranked tokens.
//!
//! All three metrics use the predicted class `ŷ` of the unmasked sentence and
//! replace tokens by `<mask>`:
//!
//! * log-odds: `log p_mask_top(ŷ) − log p_orig(ŷ)`, lower is better;
//! * comprehensiveness: `p_orig(ŷ) − p_mask_top(ŷ)`, higher is better;
//! * sufficiency: `p_orig(ŷ) − p_keep_only_top(ŷ)`, lower is better.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{AttributionResult, MethodConfig};
use crate::corpus::{Corpus, Sentence};
use crate::error::{Error, Result};
use crate::model::{ClassLogit, TokenSequence, ToyModel};
use crate::path::BaselineKind;

pub const DEFAULT_FRACTION: f64 = 0.2;

/// Floor applied to probabilities before taking logarithms.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskingMode {
    MaskTop,
    KeepOnlyTop,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskingPlan {
    pub mode: MaskingMode,
    pub fraction: f64,
    pub replacement: usize,
}

impl MaskingPlan {
    pub fn new(mode: MaskingMode, fraction: f64, replacement: usize) -> Result<Self> {
        check_fraction(fraction)?;
        Ok(MaskingPlan {
            mode,
            fraction,
            replacement,
        })
    }

    /// Plan that replaces with the model's `<mask>` token.
    pub fn for_model(model: &ToyModel, mode: MaskingMode, fraction: f64) -> Result<Self> {
        MaskingPlan::new(mode, fraction, model.vocabulary().mask_id())
    }
}

pub fn check_fraction(fraction: f64) -> Result<()> {
    if fraction > 0.0 && fraction <= 1.0 {
        Ok(())
    } else {
        Err(Error::input(format!("fraction must lie in (0, 1], got {fraction}")))
    }
}

/// `max(1, round_half_up(fraction · m))`, capped at `m`.
pub fn top_count(m: usize, fraction: f64) -> usize {
    let k = (fraction * m as f64 + 0.5).floor() as usize;
    k.clamp(1, m.max(1))
}

/// Indices of the [`top_count`] largest scores, in ascending index order.
/// Equal scores rank the lower index first.
pub fn select_top_tokens(per_word: &[f64], fraction: f64) -> Vec<usize> {
    if per_word.is_empty() {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..per_word.len()).collect();
    order.sort_by(|&a, &b| per_word[b].total_cmp(&per_word[a]).then(a.cmp(&b)));
    order.truncate(top_count(per_word.len(), fraction));
    order.sort_unstable();
    order
}

/// Index of the largest score, lowest index on ties.
pub fn top_token(per_word: &[f64]) -> Option<usize> {
    select_top_tokens(per_word, f64::MIN_POSITIVE).first().copied()
}

/// Replaces the selected positions (mask-top) or every other position
/// (keep-only-top) by the plan's replacement token.
pub fn apply_masking(tokens: &TokenSequence, plan: &MaskingPlan, selected: &[usize]) -> TokenSequence {
    match plan.mode {
        MaskingMode::MaskTop => tokens.with_replaced(selected.iter().copied(), plan.replacement),
        MaskingMode::KeepOnlyTop => {
            let rest = (0..tokens.len()).filter(|i| !selected.contains(i));
            tokens.with_replaced(rest, plan.replacement)
        }
    }
}

/// Probabilities and metric values for one sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingOutcome {
    pub predicted: usize,
    pub p_orig: f64,
    pub p_masked_top: f64,
    pub p_keep_top: f64,
    pub selected: Vec<usize>,
    pub log_odds: f64,
    pub comprehensiveness: f64,
    pub sufficiency: f64,
}

pub fn masking_outcome(
    model: &ToyModel,
    tokens: &TokenSequence,
    per_word: &[f64],
    fraction: f64,
) -> Result<MaskingOutcome> {
    check_fraction(fraction)?;
    if per_word.len() != tokens.len() {
        return Err(Error::input(format!(
            "{} scores for a sentence of {} tokens",
            per_word.len(),
            tokens.len()
        )));
    }
    let class_prob = |t: &TokenSequence, class: usize| -> Result<f64> {
        let (neg, pos) = model.predict_tokens(t)?;
        let p = if class == 1 { pos } else { neg };
        if p.is_finite() {
            Ok(p)
        } else {
            Err(Error::numeric(format!("model probability is {p}")))
        }
    };
    let (neg, pos) = model.predict_tokens(tokens)?;
    let predicted = usize::from(pos >= neg);
    let p_orig = class_prob(tokens, predicted)?;
    let selected = select_top_tokens(per_word, fraction);
    let mask_top = MaskingPlan::for_model(model, MaskingMode::MaskTop, fraction)?;
    let keep_top = MaskingPlan::for_model(model, MaskingMode::KeepOnlyTop, fraction)?;
    let p_masked_top = class_prob(&apply_masking(tokens, &mask_top, &selected), predicted)?;
    let p_keep_top = class_prob(&apply_masking(tokens, &keep_top, &selected), predicted)?;
    Ok(MaskingOutcome {
        predicted,
        p_orig,
        p_masked_top,
        p_keep_top,
        log_odds: p_masked_top.max(PROBABILITY_FLOOR).ln() - p_orig.max(PROBABILITY_FLOOR).ln(),
        comprehensiveness: p_orig - p_masked_top,
        sufficiency: p_orig - p_keep_top,
        selected,
    })
}

pub fn log_odds(model: &ToyModel, tokens: &TokenSequence, per_word: &[f64], fraction: f64) -> Result<f64> {
    Ok(masking_outcome(model, tokens, per_word, fraction)?.log_odds)
}

pub fn comprehensiveness(model: &ToyModel, tokens: &TokenSequence, per_word: &[f64], fraction: f64) -> Result<f64> {
    Ok(masking_outcome(model, tokens, per_word, fraction)?.comprehensiveness)
}

pub fn sufficiency(model: &ToyModel, tokens: &TokenSequence, per_word: &[f64], fraction: f64) -> Result<f64> {
    Ok(masking_outcome(model, tokens, per_word, fraction)?.sufficiency)
}

/// Attributes the predicted-class logit of one sentence. `stream` seeds the
/// stochastic methods; corpus runs pass the sentence id.
pub fn attribute_tokens(
    model: &ToyModel,
    tokens: &TokenSequence,
    config: &MethodConfig,
    stream: u64,
) -> Result<AttributionResult> {
    let x = model.embed(tokens)?;
    let target = ClassLogit::predicted(model, &x)?;
    config.run(&target, &x, stream)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub id: u64,
    pub steps: usize,
    #[serde(flatten)]
    pub outcome: MaskingOutcome,
    pub delta: f64,
    pub gradient_calls: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceFailure {
    pub id: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub baseline: BaselineKind,
    pub fraction: f64,
    pub evaluated: usize,
    pub log_odds: f64,
    pub comprehensiveness: f64,
    pub sufficiency: f64,
    pub mean_abs_delta: f64,
    pub gradient_calls: u64,
    pub failures: Vec<SentenceFailure>,
    pub per_sentence: Vec<SentenceRecord>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

impl MetricReport {
    fn aggregate(
        method: String,
        baseline: BaselineKind,
        fraction: f64,
        mut records: Vec<SentenceRecord>,
        mut failures: Vec<SentenceFailure>,
    ) -> Result<Self> {
        records.sort_by_key(|r| r.id);
        failures.sort_by_key(|f| f.id);
        if records.is_empty() {
            let first = failures.first().map_or(String::new(), |f| format!("; sentence {}: {}", f.id, f.error));
            return Err(Error::numeric(format!("no sentence could be evaluated{first}")));
        }
        Ok(MetricReport {
            method,
            baseline,
            fraction,
            evaluated: records.len(),
            log_odds: mean(records.iter().map(|r| r.outcome.log_odds)),
            comprehensiveness: mean(records.iter().map(|r| r.outcome.comprehensiveness)),
            sufficiency: mean(records.iter().map(|r| r.outcome.sufficiency)),
            mean_abs_delta: mean(records.iter().map(|r| r.delta.abs())),
            gradient_calls: records.iter().map(|r| r.gradient_calls).sum(),
            failures,
            per_sentence: records,
        })
    }
}

fn encode(model: &ToyModel, sentence: &Sentence) -> Result<TokenSequence> {
    model
        .vocabulary()
        .encode(&sentence.tokens)
        .map_err(|e| Error::input(format!("sentence {}: {e}", sentence.id)))
}

/// Like [`evaluate_corpus`], with the method configuration chosen per
/// sentence (e.g. a step count proportional to its length).
pub fn evaluate_corpus_with<F>(
    model: &ToyModel,
    corpus: &Corpus,
    fraction: f64,
    label: &str,
    config_for: F,
) -> Result<MetricReport>
where
    F: Fn(&Sentence) -> MethodConfig + Sync,
{
    check_fraction(fraction)?;
    if corpus.is_empty() {
        return Err(Error::input("cannot evaluate an empty corpus"));
    }
    let baseline = config_for(&corpus.sentences()[0]).baseline.kind();
    let outcomes: Vec<std::result::Result<SentenceRecord, SentenceFailure>> = corpus
        .sentences()
        .par_iter()
        .map(|sentence| {
            let config = config_for(sentence);
            let run = || -> Result<SentenceRecord> {
                let tokens = encode(model, sentence)?;
                let attribution = attribute_tokens(model, &tokens, &config, sentence.id)?;
                Ok(SentenceRecord {
                    id: sentence.id,
                    steps: attribution.steps,
                    outcome: masking_outcome(model, &tokens, &attribution.per_word, fraction)?,
                    delta: attribution.delta,
                    gradient_calls: attribution.gradient_calls,
                })
            };
            run().map_err(|e| SentenceFailure {
                id: sentence.id,
                error: e.to_string(),
            })
        })
        .collect();
    let (mut records, mut failures) = (Vec::new(), Vec::new());
    for outcome in outcomes {
        match outcome {
            Ok(r) => records.push(r),
            Err(f) => failures.push(f),
        }
    }
    MetricReport::aggregate(label.to_string(), baseline, fraction, records, failures)
}

/// Attributes every sentence, computes the three metrics, and averages them.
/// Sentences that fail are listed in `failures` and left out of the means.
pub fn evaluate_corpus(model: &ToyModel, corpus: &Corpus, config: &MethodConfig, fraction: f64) -> Result<MetricReport> {
    evaluate_corpus_with(model, corpus, fraction, config.method.name(), |_| config.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::Method;
    use crate::corpus::generate_synthetic_corpus;
    use crate::model::{train_toy_classifier, Architecture, TrainConfig, Vocabulary};
    use proptest::prelude::{prop, prop_assert_eq, proptest};
    use std::sync::OnceLock;

    fn trained() -> &'static (ToyModel, Corpus) {
        static CELL: OnceLock<(ToyModel, Corpus)> = OnceLock::new();
        CELL.get_or_init(|| {
            let corpus = generate_synthetic_corpus(400, 40, 11);
            let (model, _) = train_toy_classifier(&corpus, &TrainConfig::default()).unwrap();
            (model, corpus)
        })
    }

    fn sorting_oracle(per_word: &[f64], fraction: f64) -> Vec<usize> {
        // selection sort, picking the first maximum each round
        let k = ((fraction * per_word.len() as f64) + 0.5).floor().max(1.0) as usize;
        let mut left: Vec<usize> = (0..per_word.len()).collect();
        let mut picked = Vec::new();
        for _ in 0..k.min(per_word.len()) {
            let mut best = 0;
            for (pos, &i) in left.iter().enumerate() {
                if per_word[i] > per_word[left[best]] {
                    best = pos;
                }
            }
            picked.push(left.remove(best));
        }
        picked.sort_unstable();
        picked
    }

    #[test]
    fn selection_examples() {
        let ten: Vec<f64> = (0..10).map(|i| f64::from(i) * 0.1).collect();
        assert_eq!(select_top_tokens(&ten, 0.2), vec![8, 9]);
        assert_eq!(select_top_tokens(&[1.0; 5], 0.2), vec![0]);
        assert_eq!(select_top_tokens(&[0.1, 0.9, 0.5], 0.34), vec![1]);
        assert_eq!(sorting_oracle(&[0.1, 0.9, 0.5], 0.34), vec![1]);
        assert_eq!(top_count(5, 0.5), 3);
        assert_eq!(top_count(3, 0.01), 1);
        assert_eq!(top_count(4, 1.0), 4);
        assert_eq!(top_token(&[0.2, 0.7, 0.7]), Some(1));
    }

    #[test]
    fn masking_set_algebra() {
        let tokens = TokenSequence::new(vec![2, 3, 4, 5], 8).unwrap();
        let top = MaskingPlan::new(MaskingMode::MaskTop, 0.5, 1).unwrap();
        let keep = MaskingPlan::new(MaskingMode::KeepOnlyTop, 0.5, 1).unwrap();
        assert_eq!(apply_masking(&tokens, &top, &[]), tokens);
        assert_eq!(apply_masking(&tokens, &keep, &[0, 1, 2, 3]), tokens);
        let a = apply_masking(&tokens, &top, &[1, 3]);
        let b = apply_masking(&tokens, &keep, &[1, 3]);
        assert_eq!(a.ids(), &[2, 1, 4, 1]);
        assert_eq!(b.ids(), &[1, 3, 1, 5]);
        assert!(MaskingPlan::new(MaskingMode::MaskTop, 0.0, 1).is_err());
        assert!(MaskingPlan::new(MaskingMode::MaskTop, 1.5, 1).is_err());
    }

    #[test]
    fn metric_identities() {
        let (model, _) = trained();
        let v = model.vocabulary();
        let mask = v.mask_id();
        let already_masked = TokenSequence::new(vec![mask, v.id("movie").unwrap(), mask], v.len()).unwrap();
        let scores = [0.9, 0.1, 0.5];
        let o = masking_outcome(model, &already_masked, &scores, 0.34).unwrap();
        assert_eq!(o.selected, vec![0]);
        assert_eq!(o.log_odds, 0.0);
        assert_eq!(o.comprehensiveness, 0.0);

        let single = v.encode(&["good"]).unwrap();
        let o = masking_outcome(model, &single, &[0.3], 0.2).unwrap();
        let all_mask = TokenSequence::new(vec![mask], v.len()).unwrap();
        let (neg, pos) = model.predict_tokens(&all_mask).unwrap();
        let p_all = if o.predicted == 1 { pos } else { neg };
        assert!((o.log_odds - (p_all.ln() - o.p_orig.ln())).abs() < 1e-12);

        let sentence = v.encode(&["the", "movie", "was", "dull"]).unwrap();
        let o = masking_outcome(model, &sentence, &[0.1, 0.2, 0.3, 0.4], 1.0).unwrap();
        assert_eq!(o.sufficiency, 0.0);
        assert!((o.comprehensiveness - (o.p_orig - p_all_for(model, 4, o.predicted))).abs() < 1e-15);
    }

    fn p_all_for(model: &ToyModel, m: usize, class: usize) -> f64 {
        let v = model.vocabulary();
        let (neg, pos) = model.predict_tokens(&TokenSequence::new(vec![v.mask_id(); m], v.len()).unwrap()).unwrap();
        if class == 1 {
            pos
        } else {
            neg
        }
    }

    #[test]
    fn keeping_the_sentiment_word_is_sufficient() {
        let (model, _) = trained();
        let v = model.vocabulary();
        let words = ["the", "film", "was", "superb", "and", "this", "was", "a", "story", "of"];
        let tokens = v.encode(&words).unwrap();
        let mut scores = vec![0.0; 10];
        scores[3] = 1.0;
        scores[0] = 0.5;
        let o = masking_outcome(model, &tokens, &scores, 0.2).unwrap();
        assert_eq!(o.predicted, 1);
        assert_eq!(o.selected, vec![0, 3]);
        assert!(o.sufficiency < 0.1, "{}", o.sufficiency);
    }

    #[test]
    fn corpus_means_and_invariances() {
        let (model, corpus) = trained();
        let config = MethodConfig::new(Method::IntegratedGradients).with_steps(8);
        let one = corpus.truncated(1);
        let r = evaluate_corpus(model, &one, &config, 0.2).unwrap();
        assert_eq!(r.log_odds, r.per_sentence[0].outcome.log_odds);
        assert_eq!(r.evaluated, 1);

        let small = corpus.truncated(20);
        let base = evaluate_corpus(model, &small, &config, 0.2).unwrap();
        let mut doubled: Vec<Sentence> = small.sentences().to_vec();
        doubled.extend(small.sentences().iter().map(|s| Sentence { id: s.id + 1000, ..s.clone() }));
        let doubled = Corpus::new(small.vocabulary().clone(), doubled).unwrap();
        let twice = evaluate_corpus(model, &doubled, &config, 0.2).unwrap();
        for (a, b) in [
            (base.log_odds, twice.log_odds),
            (base.comprehensiveness, twice.comprehensiveness),
            (base.sufficiency, twice.sufficiency),
        ] {
            assert!((a - b).abs() <= 1e-12);
        }
        let again = evaluate_corpus(model, &small, &config, 0.2).unwrap();
        assert_eq!(serde_json::to_string(&base).unwrap(), serde_json::to_string(&again).unwrap());
        for r in &base.per_sentence {
            assert!((-1.0..=1.0).contains(&r.outcome.comprehensiveness));
            assert!((-1.0..=1.0).contains(&r.outcome.sufficiency));
        }
        let ids: Vec<u64> = base.per_sentence.iter().map(|r| r.id).collect();
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn failures_are_counted_not_dropped() {
        let (model, corpus) = trained();
        let mut sentences = corpus.truncated(3).sentences().to_vec();
        sentences.push(Sentence {
            id: 99,
            tokens: vec!["zzz".into()],
            label: 0,
        });
        let mut tokens = corpus.vocabulary().tokens()[2..].to_vec();
        tokens.push("zzz".into());
        let merged = Corpus::new(Vocabulary::with_words(&tokens).unwrap(), sentences).unwrap();
        let r = evaluate_corpus(model, &merged, &MethodConfig::new(Method::GradInput), 0.2).unwrap();
        assert_eq!(r.evaluated, 3);
        assert_eq!(r.failures.len(), 1);
        assert_eq!(r.failures[0].id, 99);
        assert!(evaluate_corpus(model, &corpus.truncated(0), &MethodConfig::new(Method::GradInput), 0.2).is_err());
    }

    #[test]
    fn sig_beats_baselines_on_trained_model() {
        let (model, corpus) = trained();
        let sample = corpus.truncated(200);
        let sig = evaluate_corpus(model, &sample, &MethodConfig::new(Method::SequentialIntegratedGradients), 0.2).unwrap();
        let random = evaluate_corpus(model, &sample, &MethodConfig::new(Method::Random).with_seed(3), 0.2).unwrap();
        assert!(sig.log_odds < random.log_odds);
        assert!(sig.comprehensiveness >= random.comprehensiveness);
    }

    #[test]
    fn arch_agnostic_helpers() {
        let v = Vocabulary::with_words(&["a", "b"]).unwrap();
        let model = ToyModel::random(Architecture::BilinearAttn, v.clone(), 4, 4, 1).unwrap();
        let tokens = v.encode(&["a", "b", "a"]).unwrap();
        let r = attribute_tokens(&model, &tokens, &MethodConfig::new(Method::SequentialIntegratedGradients), 0).unwrap();
        assert_eq!(r.per_word.len(), 3);
        assert!(masking_outcome(&model, &tokens, &[0.1, 0.2], 0.2).is_err());
    }

    proptest! {
        #[test]
        fn selection_matches_oracle_and_is_scale_invariant(
            scores in prop::collection::vec(-3i32..3, 1..15),
            fraction in 0.01f64..1.0,
            scale in 0.1f64..50.0,
        ) {
            let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
            let got = select_top_tokens(&scores, fraction);
            prop_assert_eq!(&got, &sorting_oracle(&scores, fraction));
            prop_assert_eq!(got.len(), top_count(scores.len(), fraction));
            let scaled: Vec<f64> = scores.iter().map(|s| s * scale).collect();
            prop_assert_eq!(select_top_tokens(&scaled, fraction), got);
        }
    }
}
