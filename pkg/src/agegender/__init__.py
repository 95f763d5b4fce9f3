"""Joint speaker age estimation and gender classification with a
QuartzNet-style x-vector network."""

__version__ = "0.1.0"
