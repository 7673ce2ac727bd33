"""Energy and cost experiment harness for cloud application variants."""

__version__ = "0.1.0"

from .model import (  # noqa: E402
    ExperimentPlan,
    LayerTag,
    MeasurementSample,
    PlanError,
    RequestRecord,
    SampleKind,
    load_plan,
    parse_plan,
)

__all__ = [
    "ExperimentPlan",
    "LayerTag",
    "MeasurementSample",
    "PlanError",
    "RequestRecord",
    "SampleKind",
    "load_plan",
    "parse_plan",
    "__version__",
]
