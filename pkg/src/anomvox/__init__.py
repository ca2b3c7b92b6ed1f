"""Unsupervised anomaly detection in multi-channel brain volumes.

Trains a slice auto-encoder and a siamese patch auto-encoder on healthy
volumes, derives voxel-wise joint reconstruction-error maps, thresholds them
against the control population, scores atlas regions, and classifies subjects
with g-mean-optimal ROC thresholds.  A built-in synthetic phantom cohort
makes the whole pipeline runnable and testable at desk scale.
"""

__version__ = "0.1.0"
