"""Latency-constrained differentiable architecture search at toy scale."""

from .arch import DerivedArch, export_arch, import_arch
from .space import SupernetConfig, build_supernet

__all__ = ["DerivedArch", "SupernetConfig", "build_supernet", "export_arch", "import_arch"]
__version__ = "0.1.0"
