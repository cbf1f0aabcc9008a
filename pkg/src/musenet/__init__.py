"""Weather-robust cross-view image retrieval: a dual-branch CNN with
conditional normalization, a procedural synthetic dataset, and the
Recall@K / AP evaluation harness, all on a minimal numpy autodiff core."""

from .tensor import LrGroup, Mode, Parameter, Tensor

__all__ = ["Tensor", "Parameter", "Mode", "LrGroup"]
__version__ = "0.1.0"
