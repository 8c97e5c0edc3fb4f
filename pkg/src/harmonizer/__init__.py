"""Region-matching image harmonization at desk scale.

Kept import-light so the CLI can configure thread limits before numpy
loads; submodules pull in their own dependencies.
"""

__version__ = "0.1.0"

__all__ = ["GradTape", "ParamStore", "Tensor", "no_grad", "__version__"]


def __getattr__(name):
    if name in ("GradTape", "ParamStore", "Tensor", "no_grad"):
        from . import tensor as _tensor

        return getattr(_tensor, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
