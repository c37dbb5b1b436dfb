"""divemoe: rebuild a small dense transformer into a mixture-of-experts model.

The pipeline: mine domain affinity from pruning outcomes, carve experts out
of the dense FFN by fluctuation-based channel pruning, then recover quality
with two cheap retraining stages (dense-gate router training, sparse LoRA
expert training).
"""

__version__ = "0.1.0"

from .kernels import BACKEND as KERNEL_BACKEND  # noqa: F401
