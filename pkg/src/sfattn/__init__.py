"""Feature-attention blocks for Siamese text matching, with a
self-contained reverse-mode autodiff core and an experiment harness."""

from . import blocks, gradflow, harness, matcher, tensor
from .blocks import (AblationFlags, FaParams, SfaParams, check_bottleneck,
                     fa_forward, sfa_forward)
from .matcher import ExamplePair, SiameseModel
from .tensor import Tensor

__all__ = [
    "AblationFlags", "ExamplePair", "FaParams", "SfaParams", "SiameseModel",
    "Tensor", "blocks", "check_bottleneck", "fa_forward", "gradflow",
    "harness", "matcher", "sfa_forward", "tensor",
]
