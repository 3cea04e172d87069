//! Numerical checks of the algebra behind projection heads and MaxSim
//! gradient flow, collected into a JSON report.

mod checks;
mod report;
mod svd;

pub use checks::{
    glu_bilinear_check, head_gradient_audit, jacobian_check, metric_from_map, metric_matrix,
    nuclear_norm_bound_check, residual_metric_decomposition_check, winner_sparsity, GradientAudit,
    JacobianCheck, MetricMatrix, NuclearBound, ParamAudit, AUDIT_FLOOR, AUDIT_STEP, TIE_MARGIN,
};
pub use report::{
    run_diagnostics, CheckResult, DiagnosticsReport, NotApplicable, TOL_AUDIT, TOL_IDENTITY, TOL_JACOBIAN,
    TOL_NUCLEAR_SLACK,
};
pub use svd::{nuclear_norm, parseval_residual, singular_spectrum};

#[cfg(test)]
mod tests;
