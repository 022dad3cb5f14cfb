"""CNN-scored protein-ligand pose optimization.

Atomic density grids with analytic gradients, a small 3D CNN trained from
scratch, BFGS refinement over translation/rotation/torsions, and the
iterative retraining procedure with its delta-RMSD reports.
"""

__version__ = "0.1.0"
