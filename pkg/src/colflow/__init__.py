"""colflow: column-wise autoregressive image generation with a flow-matching head."""

__version__ = "0.1.0"
