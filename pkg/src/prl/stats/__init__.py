"""Downstream models: logistic and Cox fits, survival curves, fold combining."""

from .combine import CombinedFit, average_coefficients, fisher_combine, roc_auc
from .cox import fit_cox
from .fit import ModelFit, wald_p
from .logistic import fit_logistic, predict_proba
from .survival import (
    KaplanMeierCurve,
    RiskGroups,
    concordance_index,
    kaplan_meier,
    logrank_test,
    risk_threshold,
    split_risk_groups,
)
