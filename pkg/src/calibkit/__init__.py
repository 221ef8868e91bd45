"""Target-free extrinsic calibration of point-cloud sensors against a reference sensor."""

__version__ = "0.1.0"
