"""Low-rank approximate inverses of Kronecker-structured operators.

Builds sequences of preconditioners from greedy rank-one corrections with
optional symmetry/sparsity constraints, projects them in growing tensor
subspaces (full or hierarchical), and feeds them to truncated low-rank Krylov
solvers.
"""

__version__ = "0.1.0"
