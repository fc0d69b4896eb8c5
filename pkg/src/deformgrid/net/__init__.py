"""From-scratch 3D convolutional encoder-decoder: numpy ops with exact
adjoints, the model, and the training loop."""

from . import ops

__all__ = ["ops", "model", "train"]


def __getattr__(name):
    # lazy so `import deformgrid.net.ops` works while siblings are heavy
    if name in ("model", "train"):
        import importlib

        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(name)
