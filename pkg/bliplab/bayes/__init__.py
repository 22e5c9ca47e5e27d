from bliplab.bayes.vad import (
    BayesianLinear,
    InferenceNet,
    VadCoefficients,
    VadConfig,
    forward_local_reparam,
    infer_coefficients,
    kl_divergence,
)

__all__ = [
    "BayesianLinear",
    "InferenceNet",
    "VadCoefficients",
    "VadConfig",
    "forward_local_reparam",
    "infer_coefficients",
    "kl_divergence",
]
