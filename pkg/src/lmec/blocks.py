"""Feed-forward, GLU and convolution modules and the macaron block built from them.

Block layout (pre-norm residual branches, final layer norm)::

    x1 = x  + 1/2 FF1(LN(x))
    x2 = x1 + MHA(LN(x1))
    x3 = x2 + Conv(LN(x2))
    x4 = x3 + 1/2 FF2(LN(x3))
    y  = LN(x4)
"""
from __future__ import annotations

import dataclasses
import enum
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .attention import LinearAttentionSpec, MultiHeadParams, ProductOrder, model_dim_check
from .errors import ShapeError
from .kernels import ActivationKind, LearnablePositionTable, LmApe, MApe, MRpe, ARpe, Npe
from .numerics import Matrix, Rng

GELU_C = 0.7978845608
GELU_A = 0.044715


class GluActivation(str, enum.Enum):
    SWISH = "swish"
    ELU = "elu"
    RELU = "relu"
    GELU = "gelu"


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def ff_activation(kind: GluActivation, z: Matrix) -> Matrix:
    kind = GluActivation(kind)
    if kind is GluActivation.SWISH:
        return z * _sigmoid(z)
    if kind is GluActivation.ELU:
        return np.where(z >= 0, z, np.expm1(np.minimum(z, 0.0)))
    if kind is GluActivation.RELU:
        return np.maximum(z, 0.0)
    # tanh approximation
    return 0.5 * z * (1.0 + np.tanh(GELU_C * (z + GELU_A * z**3)))


def ff_activation_derivative(kind: GluActivation, z: Matrix) -> Matrix:
    kind = GluActivation(kind)
    if kind is GluActivation.SWISH:
        s = _sigmoid(z)
        return s + z * s * (1.0 - s)
    if kind is GluActivation.ELU:
        return np.where(z >= 0, 1.0, np.exp(np.minimum(z, 0.0)))
    if kind is GluActivation.RELU:
        return (z > 0).astype(np.float64)
    u = GELU_C * (z + GELU_A * z**3)
    t = np.tanh(u)
    return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * z * z)


def ff_has_kink(kind: GluActivation) -> bool:
    return GluActivation(kind) in (GluActivation.RELU, GluActivation.ELU)


def glu_hidden(h_ffn: int) -> int:
    """GLU hidden width matching an FFN's weight count: floor(2 h_ffn / 3)."""
    return (2 * h_ffn) // 3


class _Params:
    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass
class FfnParams(_Params):
    w1: Matrix
    b1: np.ndarray
    w2: Matrix
    b2: np.ndarray
    activation: GluActivation = GluActivation.SWISH

    @classmethod
    def init(cls, h_o: int, h_ffn: int, rng: Rng, activation=GluActivation.SWISH,
             scale: float | None = None, bias_scale: float = 0.0) -> "FfnParams":
        s = scale if scale is not None else 1.0 / math.sqrt(h_o)
        return cls(
            rng.normal(h_o, h_ffn, s), rng.normal(1, h_ffn, bias_scale)[0],
            rng.normal(h_ffn, h_o, s), rng.normal(1, h_o, bias_scale)[0],
            GluActivation(activation),
        )

    def weight_count(self) -> int:
        return self.w1.size + self.w2.size

    def param_count(self) -> int:
        return self.weight_count() + self.b1.size + self.b2.size

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]


@dataclass
class GluParams(_Params):
    w1: Matrix
    b1: np.ndarray
    w2: Matrix
    b2: np.ndarray
    w3: Matrix
    b3: np.ndarray
    activation: GluActivation = GluActivation.GELU

    @classmethod
    def init(cls, h_o: int, h_glu: int, rng: Rng, activation=GluActivation.GELU,
             scale: float | None = None, bias_scale: float = 0.0) -> "GluParams":
        s = scale if scale is not None else 1.0 / math.sqrt(h_o)
        return cls(
            rng.normal(h_o, h_glu, s), rng.normal(1, h_glu, bias_scale)[0],
            rng.normal(h_o, h_glu, s), rng.normal(1, h_glu, bias_scale)[0],
            rng.normal(h_glu, h_o, s), rng.normal(1, h_o, bias_scale)[0],
            GluActivation(activation),
        )

    def weight_count(self) -> int:
        return self.w1.size + self.w2.size + self.w3.size

    def param_count(self) -> int:
        return self.weight_count() + self.b1.size + self.b2.size + self.b3.size

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2), ("w3", self.w3), ("b3", self.b3)]


FeedForward = Union[FfnParams, GluParams]


def _check_width(x: Matrix, w: Matrix, what: str) -> None:
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"{what}: input width {x.shape[-1]} != expected {w.shape[0]}")


def ffn_forward(x: Matrix, p: FfnParams) -> Matrix:
    _check_width(x, p.w1, "ffn")
    return ff_activation(p.activation, x @ p.w1 + p.b1) @ p.w2 + p.b2


def glu_forward(x: Matrix, p: GluParams) -> Matrix:
    _check_width(x, p.w1, "glu")
    gate = ff_activation(p.activation, x @ p.w1 + p.b1)
    return (gate * (x @ p.w2 + p.b2)) @ p.w3 + p.b3


def feed_forward(x: Matrix, p: FeedForward) -> Matrix:
    return glu_forward(x, p) if isinstance(p, GluParams) else ffn_forward(x, p)


@dataclass
class ConvParams(_Params):
    """Pointwise value/gate expansion, depthwise kernel (width x channels), pointwise output."""

    w_value: Matrix
    b_value: np.ndarray
    w_gate: Matrix
    b_gate: np.ndarray
    kernel: Matrix
    b_dw: np.ndarray
    w_out: Matrix
    b_out: np.ndarray

    def __post_init__(self):
        if self.kernel.shape[0] % 2 == 0:
            raise ValueError(f"depthwise kernel width must be odd, got {self.kernel.shape[0]}")

    @classmethod
    def init(cls, d: int, width: int, rng: Rng) -> "ConvParams":
        s = 1.0 / math.sqrt(d)
        return cls(
            rng.normal(d, d, s), np.zeros(d), rng.normal(d, d, s), np.zeros(d),
            rng.normal(width, d, 1.0 / math.sqrt(width)), np.zeros(d),
            rng.normal(d, d, s), np.zeros(d),
        )

    @classmethod
    def identity(cls, d: int, width: int) -> "ConvParams":
        # sigmoid(0) halves the value path; the output map doubles it back exactly
        kernel = np.zeros((width, d))
        kernel[width // 2] = 1.0
        z = np.zeros(d)
        return cls(np.eye(d), z, np.zeros((d, d)), z, kernel, z, 2.0 * np.eye(d), z)

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        return [(f.name, getattr(self, f.name)) for f in dataclasses.fields(self)]


def depthwise_conv(u: Matrix, kernel: Matrix) -> Matrix:
    """Per-channel 1-D convolution along time with edge-replicated same padding."""
    width = kernel.shape[0]
    half = width // 2
    n = u.shape[0]
    padded = np.pad(u, ((half, half), (0, 0)), mode="edge")
    out = np.zeros_like(u)
    for t in range(width):
        out += kernel[t] * padded[t:t + n]
    return out


def conv_module_forward(x: Matrix, p: ConvParams) -> Matrix:
    _check_width(x, p.w_value, "conv")
    gated = (x @ p.w_value + p.b_value) * _sigmoid(x @ p.w_gate + p.b_gate)
    return (depthwise_conv(gated, p.kernel) + p.b_dw) @ p.w_out + p.b_out


@dataclass
class LayerNormParams(_Params):
    gamma: np.ndarray
    beta: np.ndarray

    @classmethod
    def init(cls, d: int) -> "LayerNormParams":
        return cls(np.ones(d), np.zeros(d))

    def tensors(self):
        return [("gamma", self.gamma), ("beta", self.beta)]


def layer_norm(x: Matrix, p: LayerNormParams, eps: float = 1e-5) -> Matrix:
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * p.gamma + p.beta


@dataclass(frozen=True)
class BlockConfig:
    d_model: int = 256
    heads: int = 4
    h_ffn: int = 2048
    use_glu: bool = True
    glu_activation: GluActivation = GluActivation.GELU
    ffn_activation: GluActivation = GluActivation.SWISH
    conv_width: int = 15
    max_len: int = 2048
    attn_activation: ActivationKind = ActivationKind.ELU
    pe: str = "lmape"
    product_order: ProductOrder = ProductOrder.DYNAMIC
    normalize: bool = True


@dataclass
class BlockParams(_Params):
    ff1: FeedForward
    attn_spec: LinearAttentionSpec
    attn: MultiHeadParams
    conv: ConvParams
    ff2: FeedForward
    ln_ff1: LayerNormParams
    ln_attn: LayerNormParams
    ln_conv: LayerNormParams
    ln_ff2: LayerNormParams
    ln_out: LayerNormParams

    @property
    def d_model(self) -> int:
        return self.attn_spec.model_dim


def _make_pe(name: str, max_len: int, dim: int, rng: Rng):
    return {
        "npe": lambda: Npe(),
        "mrpe": lambda: MRpe(max_len),
        "arpe": lambda: ARpe(max_len),
        "mape": lambda: MApe.with_ones(max_len, dim),
        "lmape": lambda: LmApe(LearnablePositionTable.init(max_len, dim, rng)),
    }[name]()


def init_block(cfg: BlockConfig, rng: Rng) -> BlockParams:
    d = cfg.d_model
    d_k = model_dim_check(d, cfg.heads)
    spec = LinearAttentionSpec(cfg.attn_activation, _make_pe(cfg.pe, cfg.max_len, d, rng.child(1)),
                               cfg.product_order, cfg.normalize, d_k, cfg.heads)

    def ff(key):
        if cfg.use_glu:
            return GluParams.init(d, glu_hidden(cfg.h_ffn), rng.child(key), cfg.glu_activation)
        return FfnParams.init(d, cfg.h_ffn, rng.child(key), cfg.ffn_activation)

    return BlockParams(
        ff1=ff(2), attn_spec=spec, attn=MultiHeadParams.init(d, rng.child(3)),
        conv=ConvParams.init(d, cfg.conv_width, rng.child(4)), ff2=ff(5),
        ln_ff1=LayerNormParams.init(d), ln_attn=LayerNormParams.init(d), ln_conv=LayerNormParams.init(d),
        ln_ff2=LayerNormParams.init(d), ln_out=LayerNormParams.init(d),
    )


def zero_branch_outputs(p: BlockParams) -> BlockParams:
    """Copy of ``p`` with every residual branch's output projection (and bias) set to zero."""

    def zero_ff(f):
        if isinstance(f, GluParams):
            return f.replace(w3=np.zeros_like(f.w3), b3=np.zeros_like(f.b3))
        return f.replace(w2=np.zeros_like(f.w2), b2=np.zeros_like(f.b2))

    attn = dataclasses.replace(p.attn, w_o=np.zeros_like(p.attn.w_o), b_o=np.zeros_like(p.attn.b_o))
    conv = p.conv.replace(w_out=np.zeros_like(p.conv.w_out), b_out=np.zeros_like(p.conv.b_out))
    return p.replace(ff1=zero_ff(p.ff1), attn=attn, conv=conv, ff2=zero_ff(p.ff2))


def attention_branch(x: Matrix, p: BlockParams) -> Matrix:
    return p.attn.forward(x, p.attn_spec)


def lmec_block_forward(x: Matrix, p: BlockParams) -> Matrix:
    if x.ndim != 2 or x.shape[1] != p.d_model:
        raise ShapeError(f"block input width {x.shape[-1]} != model dimension {p.d_model}")
    x = x + 0.5 * feed_forward(layer_norm(x, p.ln_ff1), p.ff1)
    x = x + attention_branch(layer_norm(x, p.ln_attn), p)
    x = x + conv_module_forward(layer_norm(x, p.ln_conv), p.conv)
    x = x + 0.5 * feed_forward(layer_norm(x, p.ln_ff2), p.ff2)
    return layer_norm(x, p.ln_out)


def encoder_forward(x: Matrix, layers: Sequence[BlockParams]) -> Matrix:
    for p in layers:
        x = lmec_block_forward(x, p)
    return x


# -- parameter serialization ----------------------------------------------------

MAGIC = b"LMEC"
FORMAT_VERSION = 1


def block_tensors(p: BlockParams) -> list[tuple[str, np.ndarray]]:
    """Learnable tensors of ``p`` in declaration order."""
    out = []
    out += [(f"ff1.{n}", t) for n, t in p.ff1.tensors()]
    pe = p.attn_spec.pe
    if isinstance(pe, LmApe):
        out.append(("attn.pe.table", pe.table.r))
    elif isinstance(pe, MApe):
        out.append(("attn.pe.w_ext", pe.w_ext))
    out += [(f"attn.{f.name}", getattr(p.attn, f.name)) for f in dataclasses.fields(p.attn)]
    out += [(f"conv.{n}", t) for n, t in p.conv.tensors()]
    out += [(f"ff2.{n}", t) for n, t in p.ff2.tensors()]
    for ln in ("ln_ff1", "ln_attn", "ln_conv", "ln_ff2", "ln_out"):
        out += [(f"{ln}.{n}", t) for n, t in getattr(p, ln).tensors()]
    return out


def block_with_tensors(template: BlockParams, arrays: Sequence[np.ndarray]) -> BlockParams:
    """Rebuild ``template`` with ``arrays`` substituted in :func:`block_tensors` order."""
    names = [n for n, _ in block_tensors(template)]
    if len(arrays) != len(names):
        raise ShapeError(f"expected {len(names)} tensors, got {len(arrays)}")
    shaped = {}
    for (name, ref), arr in zip(block_tensors(template), arrays):
        if arr.size != ref.size:
            raise ShapeError(f"{name}: {arr.size} values, expected {ref.size}")
        shaped[name] = np.asarray(arr, dtype=np.float64).reshape(ref.shape)

    def sub(prefix, obj):
        return obj.replace(**{f.name: shaped[f"{prefix}.{f.name}"] for f in dataclasses.fields(obj)
                              if f"{prefix}.{f.name}" in shaped})

    spec = template.attn_spec
    pe = spec.pe
    if isinstance(pe, LmApe):
        pe = LmApe(LearnablePositionTable(shaped["attn.pe.table"]))
    elif isinstance(pe, MApe):
        pe = MApe(pe.max_len, shaped["attn.pe.w_ext"])
    spec = dataclasses.replace(spec, pe=pe)
    attn = dataclasses.replace(template.attn, **{f.name: shaped[f"attn.{f.name}"] for f in dataclasses.fields(template.attn)})
    return template.replace(
        ff1=sub("ff1", template.ff1), attn_spec=spec, attn=attn, conv=sub("conv", template.conv),
        ff2=sub("ff2", template.ff2),
        **{ln: sub(ln, getattr(template, ln)) for ln in ("ln_ff1", "ln_attn", "ln_conv", "ln_ff2", "ln_out")},
    )


def save_tensors(path, tensors: Sequence[np.ndarray]) -> None:
    """Write ``LMEC`` | u32 version | u32 count | count x (u32 rows, u32 cols) | float64 LE data."""
    header = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    body = []
    for t in tensors:
        t = np.asarray(t, dtype=np.float64)
        rows, cols = (1, t.shape[0]) if t.ndim == 1 else t.shape
        header.append(struct.pack("<II", rows, cols))
        body.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(header + body))


def load_tensors(path) -> list[np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not an LMEC parameter file")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    off = 12
    shapes = []
    for _ in range(count):
        shapes.append(struct.unpack_from("<II", raw, off))
        off += 8
    out = []
    for rows, cols in shapes:
        nbytes = rows * cols * 8
        if off + nbytes > len(raw):
            raise ValueError(f"{path}: truncated tensor data")
        out.append(np.frombuffer(raw, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols).astype(np.float64))
        off += nbytes
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    return out


def save_block(path, p: BlockParams) -> None:
    save_tensors(path, [t for _, t in block_tensors(p)])


def load_block(path, template: BlockParams) -> BlockParams:
    return block_with_tensors(template, load_tensors(path))
