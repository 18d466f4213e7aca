"""Customer lifetime value laboratory.

Buy-till-you-die probabilistic models (Pareto/NBD, a gamma-interarrival
regularity variant, Gamma-Gamma spend), a from-scratch feed-forward
regression network, a cohort simulator that doubles as a Monte-Carlo
oracle, and a shared transaction pipeline with calibration/holdout
evaluation.
"""

__version__ = "0.1.0"
