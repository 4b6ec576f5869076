//! Recompute plans and the per-layer computation masks derived from them.
//!
//! Ratios live on a grid of multiples of [`GRID_UNIT`] up to [`GRID_MAX`];
//! `0` (reuse everything) and `1` (recompute everything) are always allowed.
//! Layer indices in [`PlanViolation`] are 1-based to match how plans are
//! written down.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::sequence::{SegmentKind, TokenSequence};

/// Smallest grid increment, `0.002`.
pub const GRID_UNIT: f64 = 0.002;
/// Number of [`GRID_UNIT`]s in a ratio of 1.
pub const UNITS_PER_ONE: u32 = 500;
/// Largest grid ratio in units (`0.300`).
pub const GRID_MAX_UNITS: u32 = 150;
pub const GRID_MAX: f64 = 0.3;

const ON_GRID_TOL: f64 = 1e-9;
/// Declared and recomputed mean ratios may differ by at most this much.
pub const MEAN_RATIO_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanViolation {
    #[error("plan has no layers")]
    Empty,
    #[error("plan has {got} layers, model has {expected}")]
    LayerCount { expected: usize, got: usize },
    #[error("grid step {0} is not a positive multiple of 0.002 no larger than 0.3")]
    GridStep(f64),
    #[error("layer {layer}: ratio {ratio} is outside [0, 1]")]
    OutOfRange { layer: usize, ratio: f64 },
    #[error("layer {layer}: ratio {ratio} is off the recompute grid")]
    OffGrid { layer: usize, ratio: f64 },
    #[error("layer {layer}: ratio {ratio} exceeds the previous layer's {previous}; ratios must be non-increasing")]
    NotMonotone { layer: usize, ratio: f64, previous: f64 },
    #[error("declared mean ratio {declared} disagrees with computed {computed}")]
    MeanMismatch { declared: f64, computed: f64 },
}

/// Converts a ratio to grid units when it is (within rounding) a multiple of [`GRID_UNIT`].
pub fn ratio_to_units(ratio: f64) -> Option<u32> {
    let scaled = ratio * f64::from(UNITS_PER_ONE);
    let k = scaled.round();
    ((scaled - k).abs() <= ON_GRID_TOL * f64::from(UNITS_PER_ONE) && k >= 0.0).then_some(k as u32)
}

pub fn units_to_ratio(units: u32) -> f64 {
    f64::from(units) / f64::from(UNITS_PER_ONE)
}

/// Number of leading tokens recomputed in a segment of `len` tokens: `floor(ratio * len)`.
pub fn recompute_count(ratio: f64, len: usize) -> usize {
    let exact = ratio * len as f64;
    // Ratios such as 0.3 are not exact in binary; nudge before flooring.
    ((exact + 1e-9).floor() as usize).min(len)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecomputePlan {
    pub ratios: Vec<f64>,
    pub grid_step: f64,
}

impl RecomputePlan {
    pub fn new(ratios: Vec<f64>) -> Self {
        Self {
            ratios,
            grid_step: GRID_UNIT,
        }
    }

    pub fn uniform(ratio: f64, num_layers: usize) -> Self {
        Self::new(vec![ratio; num_layers])
    }

    pub fn full(num_layers: usize) -> Self {
        Self::uniform(1.0, num_layers)
    }

    pub fn zero(num_layers: usize) -> Self {
        Self::uniform(0.0, num_layers)
    }

    pub fn num_layers(&self) -> usize {
        self.ratios.len()
    }

    /// `(sum r_i) / L`
    pub fn mean_ratio(&self) -> f64 {
        if self.ratios.is_empty() {
            return 0.0;
        }
        self.ratios.iter().sum::<f64>() / self.ratios.len() as f64
    }

    pub fn is_full(&self) -> bool {
        self.ratios.iter().all(|&r| r == 1.0)
    }

    /// Returns the first violated constraint, if any.
    pub fn validate(&self) -> std::result::Result<(), PlanViolation> {
        if self.ratios.is_empty() {
            return Err(PlanViolation::Empty);
        }
        let step_units = match ratio_to_units(self.grid_step) {
            Some(u) if u >= 1 && u <= GRID_MAX_UNITS && self.grid_step > 0.0 => u,
            _ => return Err(PlanViolation::GridStep(self.grid_step)),
        };
        let mut previous: Option<f64> = None;
        for (i, &r) in self.ratios.iter().enumerate() {
            let layer = i + 1;
            if !(0.0..=1.0).contains(&r) || !r.is_finite() {
                return Err(PlanViolation::OutOfRange { layer, ratio: r });
            }
            let on_grid = r == 0.0
                || r == 1.0
                || matches!(ratio_to_units(r), Some(u) if u <= GRID_MAX_UNITS && u % step_units == 0);
            if !on_grid {
                return Err(PlanViolation::OffGrid { layer, ratio: r });
            }
            if let Some(prev) = previous {
                if r > prev {
                    return Err(PlanViolation::NotMonotone {
                        layer,
                        ratio: r,
                        previous: prev,
                    });
                }
            }
            previous = Some(r);
        }
        Ok(())
    }

    pub fn validate_for(&self, num_layers: usize) -> std::result::Result<(), PlanViolation> {
        if self.ratios.len() != num_layers {
            return Err(PlanViolation::LayerCount {
                expected: num_layers,
                got: self.ratios.len(),
            });
        }
        self.validate()
    }

    pub fn to_file_string(&self) -> String {
        let file = PlanFile {
            grid_step: self.grid_step,
            mean_ratio: self.mean_ratio(),
            ratios: self.ratios.clone(),
        };
        toml::to_string(&file).expect("plan serializes")
    }

    /// Parses a plan file, rejecting it if the declared mean ratio or any constraint is off.
    pub fn from_file_str(s: &str) -> Result<Self> {
        let file: PlanFile = toml::from_str(s).map_err(|e| Error::Config(format!("plan file: {e}")))?;
        let plan = RecomputePlan {
            ratios: file.ratios,
            grid_step: file.grid_step,
        };
        let computed = plan.mean_ratio();
        if (computed - file.mean_ratio).abs() > MEAN_RATIO_TOL {
            return Err(PlanViolation::MeanMismatch {
                declared: file.mean_ratio,
                computed,
            }
            .into());
        }
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_str(&s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanFile {
    grid_step: f64,
    mean_ratio: f64,
    ratios: Vec<f64>,
}

/// Per-layer boolean masks over sequence positions; `true` means the token is
/// processed (attention + MLP) at that layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComputationMask {
    layers: Vec<Vec<bool>>,
}

impl ComputationMask {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> &[bool] {
        &self.layers[l]
    }

    pub fn computed_positions(&self, l: usize) -> Vec<usize> {
        self.layers[l]
            .iter()
            .enumerate()
            .filter_map(|(p, &m)| m.then_some(p))
            .collect()
    }

    pub fn computed_count(&self, l: usize) -> usize {
        self.layers[l].iter().filter(|&&m| m).count()
    }

    /// Query schedule for [`crate::ToyVlm::forward`].
    pub fn schedule(&self) -> Vec<Vec<usize>> {
        (0..self.layers.len()).map(|l| self.computed_positions(l)).collect()
    }

    /// Checks the mask invariants against `seq`: text always computed, each
    /// image's computed set a contiguous prefix, nested across depth.
    pub fn check(&self, seq: &TokenSequence) -> std::result::Result<(), String> {
        for (l, mask) in self.layers.iter().enumerate() {
            if mask.len() != seq.len() {
                return Err(format!("layer {l} mask has wrong length"));
            }
            for seg in seq.segments() {
                let m = &mask[seg.range()];
                match seg.kind {
                    SegmentKind::Text => {
                        if !m.iter().all(|&x| x) {
                            return Err(format!("layer {l}: text token skipped"));
                        }
                    }
                    SegmentKind::Image => {
                        let head = m.iter().take_while(|&&x| x).count();
                        if m[head..].iter().any(|&x| x) {
                            return Err(format!("layer {l}: image at {} is not a contiguous prefix", seg.start));
                        }
                    }
                }
            }
            if l > 0 {
                let prev = &self.layers[l - 1];
                if mask.iter().zip(prev).any(|(&now, &before)| now && !before) {
                    return Err(format!("layer {l} computes a token layer {} skipped", l - 1));
                }
            }
        }
        Ok(())
    }
}

/// Masks for `plan` over `seq`: text everywhere, and for each image the first
/// `floor(r_l * T)` tokens at layer `l`.
pub fn build_masks(plan: &RecomputePlan, seq: &TokenSequence) -> ComputationMask {
    build_masks_with_full(plan, seq, &[])
}

/// Like [`build_masks`], but images flagged in `full_images` are computed at every layer.
pub fn build_masks_with_full(plan: &RecomputePlan, seq: &TokenSequence, full_images: &[bool]) -> ComputationMask {
    let layers = plan
        .ratios
        .iter()
        .map(|&r| {
            let mut mask = vec![false; seq.len()];
            for seg in seq.segments() {
                let n = match seg.kind {
                    SegmentKind::Text => seg.len,
                    SegmentKind::Image => {
                        let idx = seg.image_index.expect("image index");
                        if full_images.get(idx).copied().unwrap_or(false) {
                            seg.len
                        } else {
                            recompute_count(r, seg.len)
                        }
                    }
                };
                mask[seg.start..seg.start + n].fill(true);
            }
            mask
        })
        .collect();
    ComputationMask { layers }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn accepts_monotone_grid_plan() {
        assert_eq!(RecomputePlan::new(vec![0.1, 0.1, 0.05, 0.0]).validate(), Ok(()));
        assert_eq!(RecomputePlan::full(3).validate(), Ok(()));
        assert_eq!(RecomputePlan::new(vec![1.0, 0.3, 0.002]).validate(), Ok(()));
    }

    #[test]
    fn reports_monotonicity_break_at_layer_two() {
        let err = RecomputePlan::new(vec![0.05, 0.1, 0.0]).validate().unwrap_err();
        assert!(matches!(err, PlanViolation::NotMonotone { layer: 2, .. }), "{err}");
    }

    #[test]
    fn rejects_off_grid() {
        let err = RecomputePlan::new(vec![0.003, 0.0]).validate().unwrap_err();
        assert!(matches!(err, PlanViolation::OffGrid { layer: 1, .. }));
        // above the grid ceiling but below 1
        let err = RecomputePlan::new(vec![0.5]).validate().unwrap_err();
        assert!(matches!(err, PlanViolation::OffGrid { .. }));
    }

    #[test]
    fn coarser_grid_step_restricts_membership() {
        let mut plan = RecomputePlan::new(vec![0.1, 0.05]);
        plan.grid_step = 0.1;
        assert!(matches!(plan.validate(), Err(PlanViolation::OffGrid { layer: 2, .. })));
        plan.ratios = vec![0.2, 0.1];
        assert_eq!(plan.validate(), Ok(()));
    }

    #[test]
    fn recompute_counts() {
        assert_eq!(recompute_count(0.1, 1000), 100);
        assert_eq!(recompute_count(1.0, 1000), 1000);
        assert_eq!(recompute_count(0.0, 1000), 0);
        assert_eq!(recompute_count(0.3, 16), 4);
        assert_eq!(recompute_count(0.3, 10), 3);
    }

    #[test]
    fn masks_for_single_image() {
        let seq = TokenSequence::prompt(&[3, 4], 1, &[5], 1000);
        let plan = RecomputePlan::new(vec![1.0, 0.1, 0.0]);
        let mask = build_masks(&plan, &seq);
        mask.check(&seq).unwrap();
        assert_eq!(mask.computed_count(0), 1003);
        assert_eq!(mask.computed_count(1), 103);
        assert_eq!(mask.computed_positions(1)[..4], [0, 1, 2, 3]);
        assert!(mask.layer(1)[101] && !mask.layer(1)[102]);
        assert_eq!(mask.computed_positions(2), vec![0, 1, 1002]);
    }

    #[test]
    fn full_override_computes_whole_image() {
        let seq = TokenSequence::prompt(&[3], 2, &[], 8);
        let mask = build_masks_with_full(&RecomputePlan::zero(2), &seq, &[false, true]);
        mask.check(&seq).unwrap();
        assert_eq!(mask.computed_positions(1), (0..1).chain(9..17).collect::<Vec<_>>());
    }

    #[test]
    fn plan_file_round_trip_and_mean_check() {
        let plan = RecomputePlan::new(vec![0.1, 0.04, 0.0, 0.0]);
        let s = plan.to_file_string();
        assert_eq!(RecomputePlan::from_file_str(&s).unwrap(), plan);
        let bad = "grid_step = 0.002\nmean_ratio = 0.03\nratios = [0.1, 0.04, 0.0, 0.0]\n";
        assert!(matches!(
            RecomputePlan::from_file_str(bad),
            Err(Error::InvalidPlan(PlanViolation::MeanMismatch { .. }))
        ));
    }

    fn monotone_plan() -> impl Strategy<Value = RecomputePlan> {
        proptest::collection::vec(0u32..=GRID_MAX_UNITS, 1..6).prop_map(|mut units| {
            units.sort_unstable_by(|a, b| b.cmp(a));
            RecomputePlan::new(units.into_iter().map(units_to_ratio).collect())
        })
    }

    proptest! {
        #[test]
        fn masks_obey_invariants(plan in monotone_plan(), pre in 0usize..4, images in 0usize..4, t in 1usize..40) {
            prop_assert_eq!(plan.validate(), Ok(()));
            let prefix: Vec<u32> = (1..=pre as u32).collect();
            let seq = TokenSequence::prompt(&prefix, images, &[7, 8], t);
            let mask = build_masks(&plan, &seq);
            prop_assert_eq!(mask.check(&seq), Ok(()));
            for (l, &r) in plan.ratios.iter().enumerate() {
                prop_assert_eq!(mask.computed_count(l), pre + 2 + images * recompute_count(r, t));
            }
        }
    }
}
