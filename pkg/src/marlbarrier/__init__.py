"""Distributional multi-agent RL with a casualty barrier loss.

Submodules:
  diffcore    reverse-mode autodiff over dense arrays
  battlegrid  desk-scale Dec-POMDP environments (grid battle, hazard corridor)
  policynet   per-agent quantile policy with hypernet input layer
  mixnet      mean-shape dueling mixer and barrier critic
  losses      quantile / barrier losses and gradient surgery
  trainloop   episodic trainer with constraint-gated barrier updates
  certify     scenario-based probabilistic safety bounds
  harness     config loading and CLI
"""

__version__ = "0.1.0"
