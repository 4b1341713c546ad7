"""hortisim: a deterministic, hardware-free simulator of a dual-arm
selective harvesting pipeline — synthetic sensing, world modeling, motion
generation, calibration solvers, and the adaptive harvesting behavior."""

__version__ = "0.1.0"
