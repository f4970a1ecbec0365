pub mod calibration;
pub mod dwols;
pub mod error;
pub mod mnboot;
pub mod recommend;
pub mod regress;
pub mod rng;
pub mod simulate;
pub mod table;

pub use calibration::{CalibrationModel, DeltaScheme, DeltaWeights, ProxySet};
pub use dwols::{
    fit_dwols, DecisionRule, DtrFit, FitOptions, Formulation, ProxyGroup, StageSpec, TrialDataset,
};
pub use error::{Error, ErrorCategory, Result};
pub use mnboot::{mn_bootstrap, resample_size, BootstrapConfig, BootstrapReport, ZetaMode};
pub use recommend::{optimal_rate, predict_one, predict_pooled, predict_true, PseudoCorrector};
pub use regress::{expit, logistic_irls, wls, LogisticFit, WlsFit};
pub use table::{build_design, parse_formula, DataTable, DesignMatrix, Formula, Term};
