"""Weakly supervised math word problem solving.

Learns to generate arithmetic equations from (problem text, answer) pairs by
policy-gradient search over a growing operand dictionary, then distills the
discovered equations into a supervised model. Ships a random-search baseline
and a brute-force reachability oracle for verification.
"""

from .backend import BACKEND_NAME

__version__ = "0.1.0"

__all__ = ["BACKEND_NAME", "__version__"]
