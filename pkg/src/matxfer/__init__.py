"""matxfer: example-driven appearance transfer for tileable SVBRDF materials."""

from ._alloc import tune_malloc

tune_malloc()

__version__ = "0.1.0"
