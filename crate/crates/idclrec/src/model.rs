//! Full model forward pass: embedding, encoding, disentanglement,
//! categorical intent and the user representation, with the ablation
//! variant switches, plus assembly of all batch losses on one tape.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{Batch, PaddedSequence};
use crate::disentangler;
use crate::encoder::{self, Dropout};
use crate::error::{Error, Result};
use crate::intent::{self, IntentSelection};
use crate::matrix::Matrix;
use crate::objectives::{self, LossParts, LossWeights};
use crate::params::{BoundParams, ModelDims};
use crate::rng::Rng;

/// The architecture/loss switches of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum AblationVariant {
    #[default]
    Full,
    /// (A) no consecutive-intent difference minimization.
    NoDynamicLoss,
    /// (B) no intent-intent contrastive learning.
    NoIntentIntentCl,
    /// (C) no intent-item contrastive learning.
    NoIntentItemCl,
    /// (D) no auxiliary losses at all.
    NoAuxLosses,
    /// (E) behaviors treated entirely as intents; interests zeroed.
    NoDisentanglement,
    /// (F) most recent intent instead of the categorical intent.
    MostRecentIntent,
    /// (G) average pooling instead of importance-weighted attention.
    AveragePooling,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 8] = [
        AblationVariant::Full,
        AblationVariant::NoDynamicLoss,
        AblationVariant::NoIntentIntentCl,
        AblationVariant::NoIntentItemCl,
        AblationVariant::NoAuxLosses,
        AblationVariant::NoDisentanglement,
        AblationVariant::MostRecentIntent,
        AblationVariant::AveragePooling,
    ];

    /// Short table code: `full` or `A`..`G`.
    pub fn code(&self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoDynamicLoss => "A",
            AblationVariant::NoIntentIntentCl => "B",
            AblationVariant::NoIntentItemCl => "C",
            AblationVariant::NoAuxLosses => "D",
            AblationVariant::NoDisentanglement => "E",
            AblationVariant::MostRecentIntent => "F",
            AblationVariant::AveragePooling => "G",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" | "idclrec" => Ok(AblationVariant::Full),
            "a" | "no-dynamic" => Ok(AblationVariant::NoDynamicLoss),
            "b" | "no-cl1" => Ok(AblationVariant::NoIntentIntentCl),
            "c" | "no-cl2" => Ok(AblationVariant::NoIntentItemCl),
            "d" | "no-aux" => Ok(AblationVariant::NoAuxLosses),
            "e" | "no-disentangle" => Ok(AblationVariant::NoDisentanglement),
            "f" | "most-recent" => Ok(AblationVariant::MostRecentIntent),
            "g" | "average-pooling" => Ok(AblationVariant::AveragePooling),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }

    /// Zero out the loss weights this variant disables.
    pub fn effective_weights(&self, base: &LossWeights) -> LossWeights {
        let mut w = *base;
        match self {
            AblationVariant::NoDynamicLoss => w.lambda_d = 0.0,
            AblationVariant::NoIntentIntentCl => w.lambda_cl1 = 0.0,
            AblationVariant::NoIntentItemCl => w.lambda_cl2 = 0.0,
            AblationVariant::NoAuxLosses => {
                w.lambda_d = 0.0;
                w.lambda_cl1 = 0.0;
                w.lambda_cl2 = 0.0;
            }
            _ => {}
        }
        w
    }
}

/// Forward-pass switches shared by training and evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ModelSettings {
    pub delta: f64,
    pub variant: AblationVariant,
}

/// Everything one sequence forward pass produces.
pub struct ForwardOutput {
    /// Final user representation `r_N + i` (`1 x d`).
    pub user_repr: Var,
    /// Categorical intent (`1 x d`).
    pub categorical: Var,
    /// Interest at the most recent step (`1 x d`).
    pub interest_last: Var,
    /// Behavior representation (`N x d`).
    pub behavior: Var,
    /// Interest representation (`N x d`).
    pub interest: Var,
    /// Intent representation (`N x d`).
    pub intent: Var,
    pub selection: IntentSelection,
    /// Item centroid of the selected timesteps (`1 x d`).
    pub centroid: Var,
    /// Per-sequence dynamic intent loss (`1 x 1`).
    pub dynamic: Var,
}

/// Run the full forward pass for one padded sequence.
pub fn forward_user(
    tape: &Tape,
    bp: &BoundParams,
    dims: &ModelDims,
    input: &PaddedSequence,
    settings: &ModelSettings,
    dropout_rate: f64,
    rng: Option<&mut Rng>,
) -> Result<ForwardOutput> {
    if input.valid_len == 0 {
        return Err(Error::Data("cannot run the model on an empty sequence".into()));
    }
    let n = dims.max_len;
    let e = encoder::embed(tape, bp, input)?;
    let dropout = rng.map(|r| Dropout {
        rate: dropout_rate,
        rng: r,
    });
    let h = encoder::encode(tape, bp, e, dims.heads, dropout)?;

    let (r_seq, i_seq) = if settings.variant == AblationVariant::NoDisentanglement {
        // Whole behaviors as intents; the interest half never touches the
        // cross-attention parameters.
        let zeros = tape.leaf(Matrix::zeros(n, dims.d));
        (zeros, h)
    } else {
        let pair = disentangler::disentangle(tape, &bp.cross, h);
        (pair.interest, pair.intent)
    };

    let selection = if settings.variant == AblationVariant::MostRecentIntent {
        IntentSelection {
            indices: vec![n - 1],
        }
    } else {
        let intents = tape.value_clone(i_seq);
        intent::select_similar(&intents, input.valid_len, settings.delta)
    };
    let selected = tape.gather_rows(i_seq, selection.indices.clone());
    let weights = if settings.variant == AblationVariant::AveragePooling {
        intent::uniform_weights(tape, selection.len())
    } else {
        let scores = intent::relevance_scores(tape, bp.intent_wq, bp.intent_wk, selected);
        intent::importance_weights(tape, scores)
    };
    let categorical = intent::categorical_intent(tape, selected, weights);

    let interest_last = tape.gather_rows(r_seq, vec![n - 1]);
    let user_repr = tape.add(interest_last, categorical);
    let dynamic = objectives::dynamic_loss(tape, i_seq, input.valid_len);
    let centroid = objectives::item_centroid(tape, bp.item_embedding, input, &selection);

    Ok(ForwardOutput {
        user_repr,
        categorical,
        interest_last,
        behavior: h,
        interest: r_seq,
        intent: i_seq,
        selection,
        centroid,
        dynamic,
    })
}

/// Loss nodes of one training batch.
pub struct BatchLoss {
    pub parts: LossParts,
    pub total: Var,
}

impl BatchLoss {
    pub fn values(&self, tape: &Tape) -> (f64, f64, f64, f64, f64) {
        (
            tape.value_at(self.parts.rec, 0, 0),
            tape.value_at(self.parts.dynamic, 0, 0),
            tape.value_at(self.parts.cl1, 0, 0),
            tape.value_at(self.parts.cl2, 0, 0),
            tape.value_at(self.total, 0, 0),
        )
    }
}

/// Forward both views of a paired batch and assemble the weighted multi-task
/// loss. Terms whose weight is zero are skipped entirely; when every
/// auxiliary weight is zero the augmented view is never forwarded.
pub fn build_batch_loss(
    tape: &Tape,
    bp: &BoundParams,
    dims: &ModelDims,
    batch: &Batch,
    settings: &ModelSettings,
    weights: &LossWeights,
    dropout_rate: f64,
    mut rng: Option<&mut Rng>,
) -> Result<BatchLoss> {
    let weights = settings.variant.effective_weights(weights);
    let need_aug = weights.lambda_d != 0.0 || weights.lambda_cl1 != 0.0 || weights.lambda_cl2 != 0.0;

    let mut orig_out = Vec::with_capacity(batch.len());
    for inst in &batch.originals {
        let out = forward_user(
            tape,
            bp,
            dims,
            &inst.input,
            settings,
            dropout_rate,
            rng.as_deref_mut(),
        )?;
        orig_out.push(out);
    }
    let mut aug_out = Vec::new();
    if need_aug {
        for inst in &batch.augmented {
            let out = forward_user(
                tape,
                bp,
                dims,
                &inst.input,
                settings,
                dropout_rate,
                rng.as_deref_mut(),
            )?;
            aug_out.push(out);
        }
    }

    let targets = batch.targets();
    let active_items = objectives::active_item_rows(tape, bp.item_embedding);
    let user_reprs: Vec<Var> = orig_out.iter().map(|o| o.user_repr).collect();
    let rec = objectives::rec_loss_batch(tape, &user_reprs, &targets, active_items)?;

    let dynamic = if weights.lambda_d != 0.0 {
        // Mean over the views that actually have consecutive valid pairs.
        let mut terms = Vec::new();
        for (out, inst) in orig_out.iter().zip(&batch.originals) {
            if inst.input.valid_len >= 2 {
                terms.push(out.dynamic);
            }
        }
        for (out, inst) in aug_out.iter().zip(&batch.augmented) {
            if inst.input.valid_len >= 2 {
                terms.push(out.dynamic);
            }
        }
        if terms.is_empty() {
            tape.scalar(0.0)
        } else {
            tape.mean_all(tape.concat_rows(&terms))
        }
    } else {
        tape.scalar(0.0)
    };

    let cl1 = if weights.lambda_cl1 != 0.0 {
        let o: Vec<Var> = orig_out.iter().map(|o| o.categorical).collect();
        let a: Vec<Var> = aug_out.iter().map(|o| o.categorical).collect();
        objectives::cl1_loss(tape, &o, &a, &targets, weights.tau)
    } else {
        tape.scalar(0.0)
    };

    let cl2 = if weights.lambda_cl2 != 0.0 {
        let o: Vec<(Var, Var)> = orig_out.iter().map(|o| (o.categorical, o.centroid)).collect();
        let a: Vec<(Var, Var)> = aug_out.iter().map(|o| (o.categorical, o.centroid)).collect();
        objectives::cl2_loss(tape, &o, &a, weights.tau)
    } else {
        tape.scalar(0.0)
    };

    let parts = LossParts {
        rec,
        dynamic,
        cl1,
        cl2,
    };
    let total = objectives::total_loss(tape, &parts, &weights)?;
    Ok(BatchLoss { parts, total })
}
