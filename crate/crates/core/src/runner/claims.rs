//! Directional claim checks over a completed grid.
//!
//! Each claim compares specific grid cells on the classification task and
//! reports a machine-readable verdict. A claim that cannot find its cells
//! is a hard error naming the missing coordinates -- a grid that silently
//! lacks the data must not "pass".

use crate::error::{Error, Result};
use crate::runner::record::ExperimentRecord;
use crate::schedule::LevelKind;
use crate::tasks::TaskKind;

/// Verdict for one claim.
#[derive(Clone, Debug, PartialEq)]
pub struct ClaimResult {
    pub id: &'static str,
    pub pass: bool,
    pub observed: String,
}

/// True when every claim passed.
pub fn all_pass(results: &[ClaimResult]) -> bool {
    results.iter().all(|r| r.pass)
}

/// Looks up one classification-cell metric. `p` and `level` select the
/// attack row; `defense` matches the defense column label. Ambiguity is
/// resolved canonically (smallest serialized attack spec) so verdicts are
/// stable; absence is a [`Error::MissingCell`].
fn cell_value(
    records: &[ExperimentRecord],
    method: &str,
    p: f64,
    level: LevelKind,
    defense: &str,
    metric: &str,
) -> Result<f64> {
    let mut candidates: Vec<&ExperimentRecord> = records
        .iter()
        .filter(|r| {
            r.task == TaskKind::Classification
                && r.metric == metric
                && r.attack.method == method
                && (r.attack.p_diffusion - p).abs() < 1e-12
                && r.attack.noise_level.kind == level
                && r.defense.label() == defense
        })
        .collect();
    if candidates.is_empty() {
        return Err(Error::MissingCell(format!(
            "attack method={method} p_diffusion={p} level={} / defense={defense} / task=classification / metric={metric}",
            level.as_str()
        )));
    }
    candidates.sort_by_key(|r| serde_json::to_string(&r.attack).unwrap_or_default());
    Ok(candidates[0].value)
}

const DEF_NONE: &str = "none";
const DEF_LOW: &str = "denoise-low";
const DEF_HIGH: &str = "denoise-high";

/// Evaluates the directional suite. All claims are checked even if an
/// early one fails; any missing cell aborts with an error.
pub fn check_directional_claims(records: &[ExperimentRecord]) -> Result<Vec<ClaimResult>> {
    let acc = |method: &str, p: f64, level: LevelKind, defense: &str| {
        cell_value(records, method, p, level, defense, "accuracy")
    };
    let cos = |method: &str, p: f64, level: LevelKind, defense: &str| {
        cell_value(records, method, p, level, defense, "cls_cos_sim")
    };

    let clean_none = acc("none", 0.0, LevelKind::None, DEF_NONE)?;
    let clean_low = acc("none", 0.0, LevelKind::None, DEF_LOW)?;
    let clean_high = acc("none", 0.0, LevelKind::None, DEF_HIGH)?;
    let pgd_none = acc("pgd", 0.0, LevelKind::None, DEF_NONE)?;
    let pgd_high = acc("pgd", 0.0, LevelKind::None, DEF_HIGH)?;
    let adaptive_low = acc("pgd", 1.0, LevelKind::Low, DEF_LOW)?;
    let high_attack_none = acc("pgd", 1.0, LevelKind::High, DEF_NONE)?;
    let cos_attacked = cos("pgd", 0.0, LevelKind::None, DEF_NONE)?;
    let cos_high_clean = cos("none", 0.0, LevelKind::None, DEF_HIGH)?;
    let cos_low_clean = cos("none", 0.0, LevelKind::None, DEF_LOW)?;

    let mut results = Vec::new();
    let mut claim = |id: &'static str, pass: bool, observed: String| {
        results.push(ClaimResult { id, pass, observed });
    };

    let collapse_limit = 0.10 * clean_none;
    claim(
        "attack-collapse",
        pgd_none <= collapse_limit,
        format!(
            "attacked accuracy {pgd_none:.4} vs limit {collapse_limit:.4} (clean {clean_none:.4})"
        ),
    );
    claim(
        "high-noise-utility-cost",
        clean_high <= clean_none - 0.05,
        format!(
            "high-noise clean accuracy {clean_high:.4} vs required <= {:.4}",
            clean_none - 0.05
        ),
    );
    claim(
        "low-noise-utility-preserved",
        clean_low >= clean_none - 0.03,
        format!(
            "low-noise clean accuracy {clean_low:.4} vs required >= {:.4}",
            clean_none - 0.03
        ),
    );
    let protect_floor = 0.50 * clean_none;
    claim(
        "high-noise-protection",
        pgd_high >= protect_floor,
        format!("defended accuracy {pgd_high:.4} vs floor {protect_floor:.4}"),
    );
    let adaptive_limit = 0.25 * clean_none;
    claim(
        "adaptive-low-defeats-low-defense",
        adaptive_low <= adaptive_limit,
        format!("defended accuracy {adaptive_low:.4} vs limit {adaptive_limit:.4}"),
    );
    let self_defeat_floor = 0.80 * clean_none;
    claim(
        "high-noise-attack-self-defeating",
        high_attack_none >= self_defeat_floor,
        format!("undefended accuracy {high_attack_none:.4} vs floor {self_defeat_floor:.4}"),
    );
    claim(
        "cos-sim-ordering",
        cos_attacked < cos_high_clean && cos_high_clean < cos_low_clean,
        format!(
            "attacked {cos_attacked:.4} < high-denoised {cos_high_clean:.4} < low-denoised {cos_low_clean:.4}"
        ),
    );
    Ok(results)
}

/// Renders verdicts as one line per claim.
pub fn render_claims(results: &[ClaimResult]) -> String {
    let mut out = String::new();
    for r in results {
        out.push_str(&format!(
            "{} {}: {}\n",
            if r.pass { "PASS" } else { "FAIL" },
            r.id,
            r.observed
        ));
    }
    out
}
