"""deformgrid: FEM ground truth synthesis and a 3D convolutional surrogate
for soft-tissue displacement fields on regular grids."""

__version__ = "0.1.0"
