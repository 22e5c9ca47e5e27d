from bliplab.inference.predict import (
    InferenceConfig,
    PredictiveSummary,
    predict_ensemble,
    predict_map,
    predict_mc,
    read_predictions,
    write_predictions,
)

__all__ = [
    "InferenceConfig",
    "PredictiveSummary",
    "predict_ensemble",
    "predict_map",
    "predict_mc",
    "read_predictions",
    "write_predictions",
]
