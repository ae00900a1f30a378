"""Exception taxonomy shared across the package.

Two broad failure families map onto the CLI exit codes: input/schema
problems (bad files, missing columns, mismatched keys) and numeric/model
problems (degenerate metrics, malformed ensembles, invalid states).
"""


class EmfdError(Exception):
    """Base class for all package-specific errors."""


class SchemaError(EmfdError):
    """Input data violates a documented file format or key contract."""


class ModelError(EmfdError):
    """Numeric or model-state failure (degenerate input, malformed ensemble)."""


class MissingRateError(SchemaError):
    """Emission-rate lookup for a (vehicle_type, vintage_group, road_type) not in the table."""
