//! Experiment planning: token and iteration arithmetic, data-reuse
//! schedules, learning-rate/batch-size power laws and activation-rate
//! sweeps at fixed compute or fixed data.

mod fit;
mod reuse;
mod schedule;
mod sweep;

pub use fit::{
    compare_param_basis, fit_hparam_power_law, points_from_table, snap_batch, BasisComparison,
    HparamPoint, HparamTarget, ParamBasis, PowerLawFit,
};
pub use reuse::{loose_reuse, strict_reuse, ReusePlan, ReuseScheme};
pub use schedule::{iterations, tokens_for_compute, warmup_iters, Recipe, WARMUP_MAX, WARMUP_MIN};
pub use sweep::{
    build_sweep, table_shapes, HparamSource, ReuseSpec, RowHparams, SweepPlan, SweepRow,
    FIXED_C_BAND, PLAN_COLUMNS,
};
