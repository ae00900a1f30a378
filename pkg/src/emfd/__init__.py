"""Network traffic MFD/eMFD analysis toolkit.

Aggregates per-segment probe traffic observations into tract-level
flow/density/speed states, applies speed-binned emission-rate tables,
fits gradient-boosted regression trees to the resulting emission-vs-density
relationship, and explains the fitted model with exact SHAP values and
SHAP interaction matrices.
"""

__version__ = "0.1.0"

from .errors import EmfdError, ModelError, SchemaError

__all__ = ["EmfdError", "SchemaError", "ModelError", "__version__"]
