use super::{EstimateReport, EstimatorKind};
use crate::data::{CounterfactualWeight, Dataset, PropensityModel};
use crate::error::{Error, Result};
use crate::structures::{mapping_block, ExposureMapping, UnitFeatures};

/// IPW on exposure classes: `w_ci = f_ξ(A_c) / (M_c e_ξ(A_c))`, where `f_ξ` and `e_ξ`
/// sum `f` and `e` over the patterns sharing the observed label.
pub fn exposure_collapsed_ipw(
    data: &Dataset,
    xi: &dyn ExposureMapping,
    f: &CounterfactualWeight,
    e: &PropensityModel,
    cap: usize,
) -> Result<EstimateReport> {
    if !e.is_known() {
        return Err(Error::PropensityUnavailable);
    }
    let mut w = Vec::with_capacity(data.total_units());
    for c in data.clusters() {
        let m = c.size();
        let fl = f.law(c, cap)?;
        let el = e.law(c)?;
        for i in 0..m {
            let u = UnitFeatures::new(vec![mapping_block(xi, c, i, cap)?]);
            let label = u
                .eval(c.treatments())
                .iter()
                .position(|&x| x == 1.0)
                .expect("label rows are one-hot");
            let fx = u.expected(&fl, m, cap)?[label];
            let ex = u.expected(&el, m, cap)?[label];
            if ex <= 0.0 {
                return Err(Error::PositivityViolation(format!(
                    "exposure class {label} of unit {i} in cluster `{}` has probability {ex}",
                    c.id()
                )));
            }
            w.push(fx / (m as f64 * ex));
        }
    }
    Ok(EstimateReport::plain(EstimatorKind::ExposureIpw, data, w))
}
