"""Kernelized linear attention with learnable multiplicative position embedding."""
from .attention import (
    AttentionOutput,
    LinearAttentionSpec,
    MultiHeadParams,
    ProductOrder,
    a_rpe_attention,
    cosformer_attention,
    dynamic_dispatch,
    linear_attention,
    linear_attention_left,
    linear_attention_right,
    lmla_attention,
    multi_head,
    softmax_attention,
)
from .errors import DegenerateKernelError, SequenceTooLongError, ShapeError
from .kernels import ActivationKind, ARpe, LearnablePositionTable, LmApe, MApe, MRpe, Npe
from .numerics import Rng

__version__ = "0.1.0"
