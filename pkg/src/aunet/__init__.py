"""Facial action unit detection with landmark-adaptive region nets and LSTM fusion.

The tensor core is importable directly; heavier pieces (estimator, CLI,
training) live in their own modules: ``aunet.estimator.AuDetector``,
``aunet.train.fit_model``, ``aunet.synth.generate_dataset``,
``aunet.data.load_dataset``, ``aunet.cli.main``.
"""

from .tensor import Tensor, concat, conv2d, crop, gather_windows, grad_check, max_pool2d, upsample_nearest

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "concat",
    "conv2d",
    "crop",
    "gather_windows",
    "grad_check",
    "max_pool2d",
    "upsample_nearest",
    "__version__",
]
