"""gradshield: malicious-server gradient leakage attacks and client-side detection, at desk scale."""

from ._kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"
