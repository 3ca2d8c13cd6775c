"""Safe-set guided state-wise constrained policy optimization (S-3PO).

A self-contained safe-RL stack on a deterministic 2D point-robot
navigation task: an energy-function safety filter over black-box
dynamics, a running-maximum cost MDP built from imaginary safety
costs, and a trust-region constrained policy optimizer, plus the
TRPO-family baselines used for comparison.
"""

__version__ = "0.1.0"
