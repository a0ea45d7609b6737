"""Set-prediction detection toolkit built around input-conditioned convex
combinations of learned object queries.

Submodules:
  tensor    reverse-mode autodiff over numpy arrays
  nn        transformer/conv building blocks and the Adam optimizer
  queries   basic-query banks, combination coefficients, modulation
  matching  Hungarian assignment, GIoU, and the set losses
  model     the end-to-end detector and its checkpoint format
  scenes    synthetic benchmark generation, rendering, and mAP scoring
  harness   configs, training loop, experiment studies, and the CLI
"""

__version__ = "0.1.0"
