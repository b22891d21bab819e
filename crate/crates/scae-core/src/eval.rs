//! Clean and adversarial evaluation, robustness curves from minimal-norm
//! attack records, and deterministic CSV/SVG report emission.

use std::io::Write as IoWrite;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{run_evasion_attack_batch, AttackConfig};
use crate::classifiers::{accuracy, ClassifierHead, ClassifierSet, PresenceSource};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ScaeModel;
use crate::scalar::Real;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Which fitted unsupervised head drives an evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierChoice {
    PriorKmeans,
    PosteriorKmeans,
}

impl ClassifierChoice {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "prior" | "prior_kmeans" => Ok(ClassifierChoice::PriorKmeans),
            "posterior" | "posterior_kmeans" => Ok(ClassifierChoice::PosteriorKmeans),
            other => Err(Error::Config(format!(
                "unknown classifier '{other}' (expected prior or posterior)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassifierChoice::PriorKmeans => "prior_kmeans",
            ClassifierChoice::PosteriorKmeans => "posterior_kmeans",
        }
    }

    pub fn source(self) -> PresenceSource {
        match self {
            ClassifierChoice::PriorKmeans => PresenceSource::Prior,
            ClassifierChoice::PosteriorKmeans => PresenceSource::Posterior,
        }
    }
}

/// Pick the requested head out of a fitted set; an absent head is the
/// "unfitted classifier" error.
pub fn select_head<F: Real>(
    set: &ClassifierSet<F>,
    choice: ClassifierChoice,
) -> Result<ClassifierHead<F>> {
    let head = match choice {
        ClassifierChoice::PriorKmeans => set.prior_kmeans.clone().map(ClassifierHead::KMeans),
        ClassifierChoice::PosteriorKmeans => {
            set.posterior_kmeans.clone().map(ClassifierHead::KMeans)
        }
    };
    head.ok_or_else(|| {
        Error::Config(format!(
            "the {} classifier has not been fitted for this checkpoint",
            choice.as_str()
        ))
    })
}

/// Evaluation settings.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalConfig {
    /// How many test images to attack.
    pub n_attack_samples: usize,
    /// Perturbation budget: an attack only counts if its L2 norm is within.
    pub l2_threshold: f64,
    /// Head used for clean and adversarial predictions.
    pub classifier: ClassifierChoice,
    /// Points on the robustness curve (thresholds 0 … 1.5 × l2_threshold).
    pub curve_points: usize,
    /// Seed for drawing the attacked subset.
    pub sample_seed: u64,
    /// Samples attacked per batched attack call (performance only; results
    /// are identical for any chunking).
    pub attack_chunk: usize,
}

impl EvalConfig {
    /// Defaults for the 28×28 digit set: budget 4.
    pub fn mnist() -> Self {
        EvalConfig {
            n_attack_samples: 5000,
            l2_threshold: 4.0,
            classifier: ClassifierChoice::PosteriorKmeans,
            curve_points: 50,
            sample_seed: 0,
            attack_chunk: 25,
        }
    }

    /// Defaults for the clothing set: budget 5.
    pub fn fashion_mnist() -> Self {
        EvalConfig {
            l2_threshold: 5.0,
            ..EvalConfig::mnist()
        }
    }

    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        if !(self.l2_threshold > 0.0) {
            return Err(Error::Config(format!(
                "l2_threshold must be positive, got {}",
                self.l2_threshold
            )));
        }
        if self.n_attack_samples == 0 {
            return Err(Error::Config("n_attack_samples must be at least 1".into()));
        }
        if self.n_attack_samples > dataset_len {
            return Err(Error::Config(format!(
                "n_attack_samples {} exceeds the dataset size {dataset_len}",
                self.n_attack_samples
            )));
        }
        if self.curve_points < 2 {
            return Err(Error::Config("curve_points must be at least 2".into()));
        }
        if self.attack_chunk == 0 {
            return Err(Error::Config("attack_chunk must be at least 1".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Clean evaluation
// ---------------------------------------------------------------------------

/// Predict labels for a whole dataset in chunks, without noise.
pub fn predict_dataset<F: Real>(
    model: &ScaeModel<F>,
    head: &ClassifierHead<F>,
    dataset: &Dataset<F>,
    chunk: usize,
) -> Vec<u8> {
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let mut preds = Vec::with_capacity(dataset.len());
    let mut i = 0;
    while i < dataset.len() {
        let j = (i + chunk.max(1)).min(dataset.len());
        let idx: Vec<usize> = (i..j).collect();
        let batch = dataset.gather(&idx);
        let out = model.encode(&batch.images, false, &mut rng);
        preds.extend(head.predict(&out.prior_presence, &out.posterior_presence));
        i = j;
    }
    preds
}

/// Fraction of the dataset the head classifies correctly.
pub fn evaluate_clean<F: Real>(
    model: &ScaeModel<F>,
    head: &ClassifierHead<F>,
    dataset: &Dataset<F>,
    chunk: usize,
) -> f64 {
    let preds = predict_dataset(model, head, dataset, chunk);
    accuracy(&preds, dataset.labels())
}

// ---------------------------------------------------------------------------
// Adversarial evaluation
// ---------------------------------------------------------------------------

/// Outcome of attacking one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackStatus {
    /// A label flip was found; `l2_norm` holds the minimal norm.
    Success,
    /// Every round failed to flip the label.
    Failed,
    /// No object capsule exceeded the mean presence on the clean input, so
    /// the objective was undefined; the sample keeps its clean outcome.
    NoActiveCapsule,
}

impl AttackStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackStatus::Success => "success",
            AttackStatus::Failed => "failed",
            AttackStatus::NoActiveCapsule => "no_active_capsule",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "success" => Ok(AttackStatus::Success),
            "failed" => Ok(AttackStatus::Failed),
            "no_active_capsule" => Ok(AttackStatus::NoActiveCapsule),
            other => Err(Error::Config(format!("unknown attack status '{other}'"))),
        }
    }
}

/// Minimal-norm attack outcome for one evaluated sample; these records are
/// the single source for single-threshold accuracy and whole curves.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    /// Position within the sampled evaluation set.
    pub sample_index: usize,
    pub label: u8,
    pub clean_pred: u8,
    pub clean_correct: bool,
    pub status: AttackStatus,
    /// Minimal successful perturbation norm; infinite when not successful.
    pub l2_norm: f64,
    /// Prediction on the minimal adversarial image; clean prediction when the
    /// attack did not succeed.
    pub adv_pred: u8,
}

/// A sample stays correct at threshold `t` iff it was correct on the clean
/// image and no admissible perturbation (successful, norm ≤ t) exists.
pub fn correct_at_threshold(record: &AttackRecord, t: f64) -> bool {
    let flipped = record.status == AttackStatus::Success && record.l2_norm <= t;
    record.clean_correct && !flipped
}

/// Fraction of records still correct at threshold `t`.
pub fn accuracy_at_threshold(records: &[AttackRecord], t: f64) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let correct = records.iter().filter(|r| correct_at_threshold(r, t)).count();
    correct as f64 / records.len() as f64
}

/// Adversarial evaluation output: the accuracy at the configured threshold
/// plus the per-sample records that produced it.
#[derive(Clone, Debug)]
pub struct AdversarialEval {
    pub accuracy: f64,
    pub clean_accuracy: f64,
    pub records: Vec<AttackRecord>,
}

/// Attack a seeded random subset of `dataset` and score it: each sample
/// counts as misclassified if the attack found a flip within the budget,
/// otherwise it keeps its clean outcome. Samples the attack cannot define an
/// objective for (no active capsule) keep their clean outcome and are marked.
pub fn evaluate_adversarial<F: Real>(
    model: &ScaeModel<F>,
    head: &ClassifierHead<F>,
    dataset: &Dataset<F>,
    attack_cfg: &AttackConfig,
    eval_cfg: &EvalConfig,
    base_seed: u64,
) -> Result<AdversarialEval> {
    eval_cfg.validate(dataset.len())?;
    attack_cfg.validate()?;
    let sampled = dataset.subset(eval_cfg.n_attack_samples, eval_cfg.sample_seed);
    let clean_preds = predict_dataset(model, head, &sampled, eval_cfg.attack_chunk);

    let mut records = Vec::with_capacity(sampled.len());
    let mut i = 0;
    while i < sampled.len() {
        let j = (i + eval_cfg.attack_chunk).min(sampled.len());
        let idx: Vec<usize> = (i..j).collect();
        let batch = sampled.gather(&idx);
        let outcomes =
            run_evasion_attack_batch(model, head, &batch.images, attack_cfg, base_seed, i as u64)?;
        for (offset, outcome) in outcomes.into_iter().enumerate() {
            let index = i + offset;
            let label = sampled.label(index);
            let clean_pred = clean_preds[index];
            let clean_correct = clean_pred == label;
            let record = match outcome {
                Ok(res) if res.success => AttackRecord {
                    sample_index: index,
                    label,
                    clean_pred,
                    clean_correct,
                    status: AttackStatus::Success,
                    l2_norm: res.l2_norm.as_f64(),
                    adv_pred: res.adv_label,
                },
                Ok(_) => AttackRecord {
                    sample_index: index,
                    label,
                    clean_pred,
                    clean_correct,
                    status: AttackStatus::Failed,
                    l2_norm: f64::INFINITY,
                    adv_pred: clean_pred,
                },
                Err(Error::NoActiveCapsule) => AttackRecord {
                    sample_index: index,
                    label,
                    clean_pred,
                    clean_correct,
                    status: AttackStatus::NoActiveCapsule,
                    l2_norm: f64::INFINITY,
                    adv_pred: clean_pred,
                },
                Err(e) => return Err(e),
            };
            records.push(record);
        }
        i = j;
    }

    Ok(AdversarialEval {
        accuracy: accuracy_at_threshold(&records, eval_cfg.l2_threshold),
        clean_accuracy: accuracy_at_threshold(&records, 0.0),
        records,
    })
}

// ---------------------------------------------------------------------------
// Robustness curves
// ---------------------------------------------------------------------------

/// One curve point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub accuracy: f64,
}

/// Accuracy as a function of the admissible perturbation norm, computed from
/// one set of minimal-norm records (no re-attack per threshold).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RobustnessCurve {
    pub model_id: String,
    pub classifier_id: String,
    pub points: Vec<CurvePoint>,
}

/// Evenly spaced thresholds from 0 to 1.5 × the configured budget.
pub fn curve_thresholds(l2_threshold: f64, points: usize) -> Vec<f64> {
    assert!(points >= 2, "a curve needs at least two points");
    let hi = 1.5 * l2_threshold;
    (0..points)
        .map(|i| hi * i as f64 / (points - 1) as f64)
        .collect()
}

/// Build the curve for one model/classifier from its attack records.
pub fn robustness_curve(
    records: &[AttackRecord],
    model_id: &str,
    classifier_id: &str,
    l2_threshold: f64,
    points: usize,
) -> RobustnessCurve {
    let points = curve_thresholds(l2_threshold, points)
        .into_iter()
        .map(|t| CurvePoint {
            threshold: t,
            accuracy: accuracy_at_threshold(records, t),
        })
        .collect();
    RobustnessCurve {
        model_id: model_id.to_string(),
        classifier_id: classifier_id.to_string(),
        points,
    }
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

/// One row of the headline table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub classifier: String,
    pub regime: String,
    pub dataset: String,
    pub clean_acc: f64,
    pub adv_acc: f64,
}

pub fn write_summary_csv<W: IoWrite>(rows: &[EvalSummary], mut w: W) -> std::io::Result<()> {
    writeln!(w, "classifier,regime,dataset,clean_acc,adv_acc")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.classifier, r.regime, r.dataset, r.clean_acc, r.adv_acc)?;
    }
    Ok(())
}

pub fn write_records_csv<W: IoWrite>(records: &[AttackRecord], mut w: W) -> std::io::Result<()> {
    writeln!(w, "sample_index,label,clean_pred,clean_correct,status,l2_norm,adv_pred")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.sample_index,
            r.label,
            r.clean_pred,
            r.clean_correct,
            r.status.as_str(),
            r.l2_norm,
            r.adv_pred
        )?;
    }
    Ok(())
}

pub fn records_csv_string(records: &[AttackRecord]) -> String {
    let mut buf = Vec::new();
    write_records_csv(records, &mut buf).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("records CSV is ASCII")
}

/// Parse a records CSV produced by [`write_records_csv`].
pub fn read_records_csv(text: &str) -> Result<Vec<AttackRecord>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::malformed("records csv", "empty file".to_string()))?;
    if header != "sample_index,label,clean_pred,clean_correct,status,l2_norm,adv_pred" {
        return Err(Error::malformed(
            "records csv",
            format!("unexpected header '{header}'"),
        ));
    }
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::malformed(
                "records csv",
                format!("line {}: expected 7 fields, got {}", lineno + 2, fields.len()),
            ));
        }
        let parse_err = |what: &str| {
            Error::malformed("records csv", format!("line {}: bad {what}", lineno + 2))
        };
        out.push(AttackRecord {
            sample_index: fields[0].parse().map_err(|_| parse_err("sample_index"))?,
            label: fields[1].parse().map_err(|_| parse_err("label"))?,
            clean_pred: fields[2].parse().map_err(|_| parse_err("clean_pred"))?,
            clean_correct: fields[3].parse().map_err(|_| parse_err("clean_correct"))?,
            status: AttackStatus::parse(fields[4])?,
            l2_norm: fields[5].parse().map_err(|_| parse_err("l2_norm"))?,
            adv_pred: fields[6].parse().map_err(|_| parse_err("adv_pred"))?,
        });
    }
    Ok(out)
}

pub fn write_curve_csv<W: IoWrite>(curve: &RobustnessCurve, mut w: W) -> std::io::Result<()> {
    writeln!(w, "threshold,accuracy")?;
    for p in &curve.points {
        writeln!(w, "{},{}", p.threshold, p.accuracy)?;
    }
    Ok(())
}

pub fn curve_csv_string(curve: &RobustnessCurve) -> String {
    let mut buf = Vec::new();
    write_curve_csv(curve, &mut buf).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("curve CSV is ASCII")
}

// ---------------------------------------------------------------------------
// SVG plotting
// ---------------------------------------------------------------------------

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Render robustness curves as a static, self-contained SVG. Purely a
/// function of its inputs, so repeated renders are byte-identical.
pub fn render_curves_svg(curves: &[RobustnessCurve], title: &str) -> String {
    let (width, height) = (720.0, 480.0);
    let (left, right, top, bottom) = (70.0, 24.0, 48.0, 56.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;
    let x_max = curves
        .iter()
        .flat_map(|c| c.points.iter().map(|p| p.threshold))
        .fold(0.0_f64, f64::max)
        .max(1e-9);

    let x_of = |t: f64| left + plot_w * t / x_max;
    let y_of = |a: f64| top + plot_h * (1.0 - a);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"26\" text-anchor=\"middle\" font-size=\"17\">{}</text>\n",
        left + plot_w / 2.0,
        xml_escape(title)
    ));

    // Gridlines and ticks.
    for i in 0..=5 {
        let frac = i as f64 / 5.0;
        let y = y_of(frac);
        svg.push_str(&format!(
            "<line x1=\"{left:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"#dddddd\"/>\n",
            left + plot_w
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\" font-size=\"12\">{:.1}</text>\n",
            left - 8.0,
            y + 4.0,
            frac
        ));
        let t = x_max * frac;
        let x = x_of(t);
        svg.push_str(&format!(
            "<line x1=\"{x:.2}\" y1=\"{top:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"#dddddd\"/>\n",
            top + plot_h
        ));
        svg.push_str(&format!(
            "<text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"12\">{:.2}</text>\n",
            top + plot_h + 20.0,
            t
        ));
    }

    // Axes.
    svg.push_str(&format!(
        "<line x1=\"{left:.2}\" y1=\"{top:.2}\" x2=\"{left:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        top + plot_h
    ));
    svg.push_str(&format!(
        "<line x1=\"{left:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        top + plot_h,
        left + plot_w,
        top + plot_h
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"13\">L2 threshold</text>\n",
        left + plot_w / 2.0,
        height - 14.0
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"13\" \
         transform=\"rotate(-90 18 {:.2})\">accuracy</text>\n",
        top + plot_h / 2.0,
        top + plot_h / 2.0
    ));

    // Curves.
    for (ci, curve) in curves.iter().enumerate() {
        let color = PALETTE[ci % PALETTE.len()];
        let pts: Vec<String> = curve
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", x_of(p.threshold), y_of(p.accuracy)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
    }

    // Legend.
    for (ci, curve) in curves.iter().enumerate() {
        let color = PALETTE[ci % PALETTE.len()];
        let y = top + 14.0 + 18.0 * ci as f64;
        let x = left + plot_w - 200.0;
        svg.push_str(&format!(
            "<line x1=\"{x:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"{color}\" \
             stroke-width=\"2\"/>\n",
            x + 26.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\">{}</text>\n",
            x + 32.0,
            y + 4.0,
            xml_escape(&format!("{} ({})", curve.model_id, curve.classifier_id))
        ));
    }

    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
