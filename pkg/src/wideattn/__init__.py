"""Wide-versus-deep Transformer encoders with pluggable efficient attention, on numpy."""

__version__ = "0.1.0"
