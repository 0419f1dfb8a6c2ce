"""Desk-scale audio-visual segmentation with progressive confident masking.

The package keeps its import light so the command line can configure
thread pools before any numerical module loads; the public surface is
re-exported lazily.
"""

__version__ = "0.1.0"

_LAZY = {
    "Tensor": "pcma.tensor",
    "grad_check": "pcma.gradcheck",
    "NetworkConfig": "pcma.decoder",
    "Network": "pcma.decoder",
    "init_network": "pcma.decoder",
    "generate": "pcma.synthdata",
    "train": "pcma.trainer",
    "evaluate": "pcma.trainer",
    "attention_flops": "pcma.flops",
}


def __getattr__(name):
    module = _LAZY.get(name)
    if module is None:
        raise AttributeError(f"module 'pcma' has no attribute {name!r}")
    import importlib

    return getattr(importlib.import_module(module), name)
