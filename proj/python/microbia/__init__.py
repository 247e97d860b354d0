"""Colony cardinality classification: metrics, splits, models and explanations."""

from ._core import *  # noqa: F401,F403
from ._core import __version__  # noqa: F401
