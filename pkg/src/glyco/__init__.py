"""Generative insulin treatment strategies from patient trajectories.

Subpackages and modules
-----------------------
trajectory
    Patient records, hourly grids and past/future windows.
sim
    Synthetic hospitalized-diabetes cohorts and the ground-truth glucose oracle.
preprocess
    Hourly resampling, scaling and the binary dataset container.
diffnum
    Small reverse-mode differentiation engine on numpy arrays.
seqgen
    Encoder-decoder transformer over treatment and outcome trajectories.
decision
    Utilities, expected-utility estimation and treatment selection.
evalharness
    Baselines, forecasting metrics, ablations and policy evaluation.
cli
    Command line entry point (``glyco``).
"""

__version__ = "0.1.0"
