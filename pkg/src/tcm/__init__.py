"""Transported causal-mechanism inference for unsupervised domain adaptation.

Subpackages cover the numeric substrate (numerics, graddiff), the synthetic
ground-truth world (scm), the two training stages (dcm, proxy), experiment
orchestration (bench), and the command-line frontend (cli).
"""

__version__ = "0.1.0"
