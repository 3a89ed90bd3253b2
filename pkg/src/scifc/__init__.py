"""Front-end and reference interpreter for a secure smart-contract calculus.

Integrity labels, a security type checker, a small-step interpreter with
atomic rollback and reentrancy locks, and an attack harness.
"""

__version__ = "0.1.0"
