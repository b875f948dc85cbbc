"""Camera-light calibration and relightable Gaussian scene rendering."""

__version__ = "0.1.0"
