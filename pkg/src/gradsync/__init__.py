"""Gradient-reduction coordination strategies in a deterministic simulator.

Coordinators (master-worker and cached bitvector), complete-group tensor
fusion, alpha-beta collective costs, a discrete-event harness for P
data-parallel workers, and convolution performance accounting.
"""

__version__ = "0.1.0"
