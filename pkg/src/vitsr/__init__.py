"""Vision-transformer super-resolution on a small numpy autodiff core.

Modules: ``diffcore`` (tensors and gradients), ``imageops`` (resampling,
metrics, PNG IO), ``losses``, ``model``, ``data``, ``training``,
``checkpoint``, ``gradcheck`` and ``cli``.
"""

__version__ = "0.1.0"
