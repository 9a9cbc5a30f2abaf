//! Speed-accuracy curve fitting, time-to-compute alignment, equivalent input
//! noise and relative efficiency. All arithmetic in f64 on fixed grids.

mod align;
mod io;
mod lm;
mod noise;
mod sat;

pub use align::{fit_time_flop_map, AlignmentFit, TimeFlopMap};
pub use io::{plot_csv, read_curves_csv, read_noise_conditions_csv};
pub use noise::{
    efficiency, efficiency_from_match, equivalent_noise_ratio, equivalent_noise_value, fit_equivalent_noise,
    match_curves, CurveMatch, EfficiencyReport, EquivalentNoiseFit, NoiseCondition, NoiseCurve, NoisePoint,
    NoiseRatio, FLAT_TOLERANCE,
};
pub use sat::{eval_sat, fit_sat, sat_grid, GridStart, SatCurveFit, SatPoint};
