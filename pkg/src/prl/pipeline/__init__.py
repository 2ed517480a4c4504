"""Cross-validated evaluation protocols, synthetic cohorts and reports."""

from .config import RunConfig, format_config, load_config, parse_config
from .data import CohortData, cohort_from_synthetic, load_cohort_dir
from .folds import FoldPlan, audit_fold_plan, make_folds
from .reports import emit_reports
from .runs import run_classification, run_survival
from .synth import SyntheticCohortSpec, generate_synthetic_cohort, null_spec, write_cohort
