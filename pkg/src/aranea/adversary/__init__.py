from .clogging import ClogAttack, ModulationPattern, ProbeSeries, correlation_score, probe_relay
from .fingerprint import FeatureVector, WFModel, extract_features, wf_classify, wf_train
from .report import AttackReport

__all__ = [
    "AttackReport",
    "ClogAttack",
    "FeatureVector",
    "ModulationPattern",
    "ProbeSeries",
    "WFModel",
    "correlation_score",
    "extract_features",
    "probe_relay",
    "wf_classify",
    "wf_train",
]
