//! Critique subroutines, the self-critique loop and feedback propagation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};
use sha2::{Digest, Sha256};

use crate::bandit::ArmId;
use crate::engine::{Engine, EngineError, InvokeOptions, SubroutineHandle};
use crate::schema::{is_identifier, FieldKind, FieldSpec, Record, Schema, SchemaError, SubroutineSpec};
use crate::store::{self, ArmRecord, FeedbackSource, Invocation, NewFeedback, Snapshot, StoreError};

pub const EXPLANATION_FIELD: &str = "explanation";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingDimension {
    pub name: String,
    #[serde(default = "default_lo")]
    pub lo: i64,
    #[serde(default = "default_hi")]
    pub hi: i64,
    #[serde(default)]
    pub doc: String,
}

fn default_lo() -> i64 {
    1
}

fn default_hi() -> i64 {
    10
}

impl RatingDimension {
    /// A 1..10 dimension.
    pub fn new(name: &str) -> Self {
        Self::bounded(name, 1, 10)
    }

    pub fn bounded(name: &str, lo: i64, hi: i64) -> Self {
        Self {
            name: name.to_string(),
            lo,
            hi,
            doc: String::new(),
        }
    }

    pub fn with_doc(mut self, doc: &str) -> Self {
        self.doc = doc.to_string();
        self
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CritiqueError {
    #[error("at least one rating dimension is required")]
    NoDimensions,
    #[error("rating dimension may not be named `{EXPLANATION_FIELD}`")]
    ReservedName,
    #[error("invalid rating dimension `{0}`")]
    InvalidDimension(String),
    #[error("invalid ratings: {0}")]
    InvalidRatings(String),
    #[error("invocation `{0}` was not produced by a prompt arm and cannot be rated")]
    NotRateable(String),
    #[error("subroutine `{0}` has no rating dimensions")]
    NoRatingDimensions(String),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type CritiqueResult<T> = Result<T, CritiqueError>;

fn check_dims(dims: &[RatingDimension]) -> CritiqueResult<()> {
    if dims.is_empty() {
        return Err(CritiqueError::NoDimensions);
    }
    for (i, d) in dims.iter().enumerate() {
        if d.name == EXPLANATION_FIELD {
            return Err(CritiqueError::ReservedName);
        }
        if !is_identifier(&d.name) || d.lo >= d.hi || dims[..i].iter().any(|e| e.name == d.name) {
            return Err(CritiqueError::InvalidDimension(d.name.clone()));
        }
    }
    Ok(())
}

/// Name of the flattened critique input field for a target input field.
pub fn input_field(name: &str) -> String {
    format!("input_{name}")
}

/// Name of the flattened critique input field for a target output field.
pub fn output_field(name: &str) -> String {
    format!("output_{name}")
}

/// Build the critique declaration for `target`. Its input carries the
/// target's input and output fields side by side; its output is an
/// explanation plus one bounded rating per dimension.
pub fn derive_critique_spec(
    target: &SubroutineSpec,
    dims: &[RatingDimension],
) -> CritiqueResult<SubroutineSpec> {
    check_dims(dims)?;
    let mut input = Vec::new();
    for f in target.input_schema().fields() {
        input.push(FieldSpec::new(input_field(&f.name), f.kind.clone(), f.doc.clone()));
    }
    for f in target.output_schema().fields() {
        input.push(FieldSpec::new(output_field(&f.name), f.kind.clone(), f.doc.clone()));
    }
    let mut output = vec![FieldSpec::new(
        EXPLANATION_FIELD,
        FieldKind::Text,
        "Justification for the provided rating(s)",
    )];
    for d in dims {
        let doc = if d.doc.is_empty() {
            format!("rating for {} (int from {} to {})", d.name, d.lo, d.hi)
        } else {
            d.doc.clone()
        };
        output.push(FieldSpec::new(
            d.name.clone(),
            FieldKind::BoundedInteger { lo: d.lo, hi: d.hi },
            doc,
        ));
    }
    let task = format!(
        "Critique one output of the subroutine `{}`, whose task is:\n\n{}\n\n\
         Rate the output along each dimension; higher ratings are better.",
        target.name(),
        target.task_doc().trim()
    );
    let spec = SubroutineSpec::new(
        format!("critique_{}", target.name()),
        task,
        Schema::new(input)?,
        Schema::new(output)?,
    )?;
    Ok(match target.context() {
        Some(ctx) => spec.with_context(ctx),
        None => spec,
    })
}

/// Mean over dimensions of `(hi − rating)/(hi − lo)`.
pub fn rating_to_loss(ratings: &BTreeMap<String, i64>, dims: &[RatingDimension]) -> CritiqueResult<f64> {
    check_dims(dims)?;
    if let Some(extra) = ratings.keys().find(|k| !dims.iter().any(|d| &d.name == *k)) {
        return Err(CritiqueError::InvalidRatings(format!("unknown dimension `{extra}`")));
    }
    let mut sum = 0.0;
    for d in dims {
        let r = *ratings
            .get(&d.name)
            .ok_or_else(|| CritiqueError::InvalidRatings(format!("missing dimension `{}`", d.name)))?;
        if r < d.lo || r > d.hi {
            return Err(CritiqueError::InvalidRatings(format!(
                "`{}` = {r} outside {}..={}",
                d.name, d.lo, d.hi
            )));
        }
        sum += (d.hi - r) as f64 / (d.hi - d.lo) as f64;
    }
    Ok(sum / dims.len() as f64)
}

fn quantize(x: f64) -> f64 {
    (x * 1e12).round() / 1e12
}

/// Squared disagreement between a reviewer's loss and a critique's loss.
///
/// Computed on a 1e-12 grid so decimal inputs give the decimal result
/// (e.g. 0.2 vs 0.7 gives exactly 0.25).
pub fn critique_loss(sme_loss: f64, critique_derived_loss: f64) -> f64 {
    let d = quantize(sme_loss - critique_derived_loss);
    quantize(d * d)
}

/// A target subroutine with its critique.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CritiquePair {
    pub target: SubroutineHandle,
    pub critique: SubroutineHandle,
    pub dims: Vec<RatingDimension>,
}

/// Register `target` and its derived critique. The dimensions are stored
/// with the target so reviewer ratings use the same instruments.
pub fn register_pair(
    engine: &Engine,
    target: &SubroutineSpec,
    dims: &[RatingDimension],
) -> CritiqueResult<CritiquePair> {
    let critique_spec = derive_critique_spec(target, dims)?;
    let dims_json = serde_json::to_value(dims).expect("dims serialize");
    let target = engine.register_with_dims(target, Some(&dims_json))?;
    let critique = engine.register(&critique_spec)?;
    Ok(CritiquePair {
        target,
        critique,
        dims: dims.to_vec(),
    })
}

/// Rating dimensions stored for a subroutine.
pub fn stored_dims(engine: &Engine, subroutine_id: &str) -> CritiqueResult<Vec<RatingDimension>> {
    let sub = engine.store().subroutine(subroutine_id)?;
    let dims = sub
        .rating_dims
        .ok_or_else(|| CritiqueError::NoRatingDimensions(subroutine_id.to_string()))?;
    serde_json::from_value(dims).map_err(|e| StoreError::Corrupt(e.to_string()).into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitReason {
    MaxIters,
    NoImprovement,
    ThresholdMet,
    /// An invocation failed after at least one candidate was produced.
    InvocationFailed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub max_iters: usize,
    pub loss_threshold: f64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            max_iters: 3,
            loss_threshold: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopIteration {
    pub candidate_id: String,
    pub critique_id: Option<String>,
    pub derived_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopTrace {
    pub iterations: Vec<LoopIteration>,
    /// Zero-based index of the selected iteration.
    pub selected_index: usize,
    pub exit_reason: ExitReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopOutcome {
    pub best: Invocation,
    pub best_output: Record,
    pub trace: LoopTrace,
}

/// Maps a candidate's output to the shape the critique schema expects.
pub type OutputView<'a> = &'a (dyn Fn(&Record) -> Record + Sync);

/// Placement and freezing options shared by every invocation of a loop.
#[derive(Clone, Default)]
pub struct LoopContext<'a> {
    pub parents: Vec<String>,
    /// Base idempotency key; iterations derive their own keys from it.
    pub key: Option<String>,
    pub batch_id: Option<String>,
    pub stage: Option<String>,
    pub target_snapshot: Option<Snapshot>,
    pub critique_snapshot: Option<Snapshot>,
    pub output_schema: Option<Schema>,
    pub output_view: Option<OutputView<'a>>,
}

/// Flatten a target input and candidate output into a critique input.
pub fn critique_input(input: &Record, output: &Record) -> Record {
    let mut r = Record::new();
    for (k, v) in input.iter() {
        r.insert(input_field(k), v.clone());
    }
    for (k, v) in output.iter() {
        r.insert(output_field(k), v.clone());
    }
    r
}

fn critique_summary(output: &Record) -> String {
    let mut lines = vec![output.text(EXPLANATION_FIELD).unwrap_or_default().to_string()];
    for (k, v) in output.iter() {
        if k != EXPLANATION_FIELD {
            lines.push(format!("{k}: {}", v.to_json()));
        }
    }
    lines.join("\n")
}

fn ratings_of(output: &Record, dims: &[RatingDimension]) -> BTreeMap<String, i64> {
    dims.iter()
        .filter_map(|d| output.integer(&d.name).map(|r| (d.name.clone(), r)))
        .collect()
}

/// Record a critique's judgment of a candidate: a critique feedback row on
/// the candidate and the derived loss on the candidate's arm.
fn record_critique(
    engine: &Engine,
    candidate: &Invocation,
    critique: &Invocation,
    ratings: &BTreeMap<String, i64>,
    explanation: &str,
    derived: f64,
) -> CritiqueResult<()> {
    let feedback_id = format!("fb_{}", critique.invocation_id);
    engine.store().transaction(|tx| -> CritiqueResult<()> {
        store::insert_feedback(
            tx,
            &NewFeedback {
                feedback_id: &feedback_id,
                invocation_id: &candidate.invocation_id,
                source: FeedbackSource::Critique,
                reviewer_id: None,
                critique_invocation_id: Some(&critique.invocation_id),
                ratings: Some(ratings),
                loss: derived,
                rationale: Some(explanation),
                late: false,
                submission_id: None,
            },
        )?;
        if let Some(arm) = &candidate.arm_id {
            store::record_loss(
                tx,
                &format!("critique:{}", critique.invocation_id),
                &candidate.subroutine_id,
                arm,
                Some(&candidate.invocation_id),
                derived,
                "critique",
            )?;
        }
        Ok(())
    })
}

/// Invoke the critique on one candidate and record its judgment: a critique
/// feedback row on the candidate and the derived loss on the candidate's
/// arm. `view` is the candidate output in the shape the critique expects.
pub fn critique_candidate(
    engine: &Engine,
    pair: &CritiquePair,
    input: &Record,
    candidate: &Invocation,
    view: &Record,
    mut opts: InvokeOptions,
) -> CritiqueResult<(Invocation, Record, f64)> {
    opts.parents = vec![candidate.invocation_id.clone()];
    let critique = engine.invoke(&pair.critique, &critique_input(input, view), opts)?;
    let verdict = critique
        .output_record()
        .ok_or_else(|| StoreError::Corrupt(format!("undecodable output of {}", critique.invocation_id)))?;
    let ratings = ratings_of(&verdict, &pair.dims);
    let derived = rating_to_loss(&ratings, &pair.dims)?;
    let explanation = verdict.text(EXPLANATION_FIELD).unwrap_or_default().to_string();
    record_critique(engine, candidate, &critique, &ratings, &explanation, derived)?;
    Ok((critique, verdict, derived))
}

/// Generate, critique, revise. Returns the candidate with the lowest
/// critique-derived loss.
pub fn self_critique_loop(
    engine: &Engine,
    pair: &CritiquePair,
    input: &Record,
    config: &LoopConfig,
    cx: &LoopContext<'_>,
) -> CritiqueResult<LoopOutcome> {
    let max_iters = config.max_iters.max(1);
    let mut iterations: Vec<LoopIteration> = Vec::new();
    let mut candidates: Vec<(Invocation, Record)> = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut previous: Option<(String, String)> = None;
    let mut exit = ExitReason::MaxIters;

    for i in 0..max_iters {
        let mut parents = cx.parents.clone();
        let mut extra = Vec::new();
        if let Some((prev_output, prev_critique)) = &previous {
            let last = iterations.last().expect("previous iteration exists");
            parents.push(last.candidate_id.clone());
            parents.extend(last.critique_id.clone());
            extra.push(("previous_output".to_string(), prev_output.clone()));
            extra.push(("previous_critique".to_string(), prev_critique.clone()));
        }
        let opts = InvokeOptions {
            parents,
            key: cx.key.as_ref().map(|k| format!("{k}/iter{i}")),
            batch_id: cx.batch_id.clone(),
            stage: cx.stage.clone(),
            snapshot: cx.target_snapshot.clone(),
            output_schema: cx.output_schema.clone(),
            extra,
            seed: None,
        };
        let candidate = match engine.invoke(&pair.target, input, opts) {
            Ok(c) => c,
            Err(e) if candidates.is_empty() => return Err(e.into()),
            Err(_) => {
                exit = ExitReason::InvocationFailed;
                break;
            }
        };
        let output = candidate
            .output_record()
            .ok_or_else(|| StoreError::Corrupt(format!("undecodable output of {}", candidate.invocation_id)))?;
        let view = match cx.output_view {
            Some(f) => f(&output),
            None => output.clone(),
        };

        let critique_opts = InvokeOptions {
            key: cx.key.as_ref().map(|k| format!("{k}/iter{i}/critique")),
            batch_id: cx.batch_id.clone(),
            stage: cx.stage.as_ref().map(|s| format!("{s}_critique")),
            snapshot: cx.critique_snapshot.clone(),
            ..InvokeOptions::default()
        };
        let judged = critique_candidate(engine, pair, input, &candidate, &view, critique_opts);
        let candidate_id = candidate.invocation_id.clone();
        candidates.push((candidate, output.clone()));
        let (critique, verdict, derived) = match judged {
            Ok(j) => j,
            Err(_) => {
                // an unrated candidate ranks last
                iterations.push(LoopIteration {
                    candidate_id,
                    critique_id: None,
                    derived_loss: 1.0,
                });
                if best.is_none() {
                    best = Some((i, 1.0));
                }
                exit = ExitReason::InvocationFailed;
                break;
            }
        };

        iterations.push(LoopIteration {
            candidate_id,
            critique_id: Some(critique.invocation_id.clone()),
            derived_loss: derived,
        });
        let improved = best.is_none_or(|(_, b)| derived < b);
        if improved {
            best = Some((i, derived));
        }
        if derived <= config.loss_threshold {
            exit = ExitReason::ThresholdMet;
            break;
        }
        if !improved {
            exit = ExitReason::NoImprovement;
            break;
        }
        previous = Some((output.to_canonical(), critique_summary(&verdict)));
    }

    let (selected_index, _) = best.expect("at least one candidate");
    if candidates.len() > 1 {
        let selected = candidates[selected_index].0.invocation_id.clone();
        let ids: Vec<String> = candidates.iter().map(|(c, _)| c.invocation_id.clone()).collect();
        engine
            .store()
            .transaction(|tx| crate::store::record_passed_over(tx, &selected, &ids))?;
    }
    let (best_inv, best_output) = candidates.swap_remove(selected_index);
    Ok(LoopOutcome {
        best: best_inv,
        best_output,
        trace: LoopTrace {
            iterations,
            selected_index,
            exit_reason: exit,
        },
    })
}

/// A reviewer's ratings of one invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmeFeedback {
    pub submission_id: String,
    pub invocation_id: String,
    pub reviewer_id: String,
    pub ratings: BTreeMap<String, i64>,
    #[serde(default)]
    pub comment: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CritiqueUpdate {
    pub critique_invocation_id: String,
    pub subroutine_id: String,
    pub arm_id: Option<ArmId>,
    pub derived_loss: f64,
    pub critique_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationReport {
    pub feedback_id: String,
    pub subroutine_id: String,
    pub arm_id: ArmId,
    pub sme_loss: f64,
    pub late: bool,
    /// False when the submission had already been applied.
    pub applied: bool,
    pub critiques: Vec<CritiqueUpdate>,
    /// Arm statistics of the target subroutine after the update.
    pub arms: Vec<ArmRecord>,
}

fn sme_feedback_id(submission_id: &str) -> String {
    format!("fb_sme_{}", &hex::encode(Sha256::digest(submission_id.as_bytes()))[..24])
}

/// Apply a reviewer rating: the target arm receives the rating-derived loss
/// and every critique of the same output receives its squared disagreement.
/// Everything commits in one transaction; resubmitting the same
/// `submission_id` changes nothing.
pub fn propagate_sme_feedback(
    engine: &Engine,
    feedback: &SmeFeedback,
    late: bool,
) -> CritiqueResult<PropagationReport> {
    let target = engine.store().invocation(&feedback.invocation_id)?;
    let arm = target
        .arm_id
        .clone()
        .ok_or_else(|| CritiqueError::NotRateable(target.invocation_id.clone()))?;
    let dims = stored_dims(engine, &target.subroutine_id)?;
    let sme_loss = rating_to_loss(&feedback.ratings, &dims)?;
    let feedback_id = sme_feedback_id(&feedback.submission_id);
    let sid = target.subroutine_id.clone();

    engine.store().transaction(|tx| -> CritiqueResult<PropagationReport> {
        let applied = store::insert_feedback(
            tx,
            &NewFeedback {
                feedback_id: &feedback_id,
                invocation_id: &target.invocation_id,
                source: FeedbackSource::Sme,
                reviewer_id: Some(&feedback.reviewer_id),
                critique_invocation_id: None,
                ratings: Some(&feedback.ratings),
                loss: sme_loss,
                rationale: feedback.comment.as_deref(),
                late,
                submission_id: Some(&feedback.submission_id),
            },
        )?;
        let stored = store::feedback_for(tx, &target.invocation_id)?;
        let this = stored
            .iter()
            .find(|f| f.feedback_id == feedback_id)
            .expect("feedback row exists");
        store::record_loss(tx, &format!("sme:{feedback_id}"), &sid, &arm, Some(&target.invocation_id), this.loss, "sme")?;

        let mut critiques = Vec::new();
        for f in stored.iter().filter(|f| f.source == FeedbackSource::Critique) {
            let Some(cid) = &f.critique_invocation_id else { continue };
            let crit = store::invocation(tx, cid)?;
            let closs = critique_loss(this.loss, f.loss);
            if let Some(carm) = &crit.arm_id {
                store::record_loss(
                    tx,
                    &format!("sme:{feedback_id}:{cid}"),
                    &crit.subroutine_id,
                    carm,
                    Some(cid),
                    closs,
                    "critique_loss",
                )?;
            }
            critiques.push(CritiqueUpdate {
                critique_invocation_id: cid.clone(),
                subroutine_id: crit.subroutine_id.clone(),
                arm_id: crit.arm_id.clone(),
                derived_loss: f.loss,
                critique_loss: closs,
            });
        }
        store::record_event(
            tx,
            "sme_feedback",
            Some(&target.invocation_id),
            target.batch_id.as_deref(),
            &json!({"feedback_id": feedback_id, "late": this.late, "applied": applied}),
        )?;
        Ok(PropagationReport {
            feedback_id: feedback_id.clone(),
            subroutine_id: sid.clone(),
            arm_id: arm.clone(),
            sme_loss: this.loss,
            late: this.late,
            applied,
            critiques,
            arms: store::arms(tx, &sid)?,
        })
    })
}

/// Dimension list as stored JSON, for callers that register by hand.
pub fn dims_json(dims: &[RatingDimension]) -> Json {
    serde_json::to_value(dims).expect("dims serialize")
}
