"""Neural building blocks: linear/MLP layers, multi-head attention,
pre-norm transformer encoder/decoder stacks, the strided conv backbone,
sinusoidal positions, and the Adam optimizer with global-norm clipping.

All blocks are pure functions of their parameters; every learnable leaf is
reachable through ``Module.parameters()`` / ``named_parameters()``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor


@dataclass
class TransformerConfig:
    """Dimensions of one encoder/decoder stack."""

    feature_dim: int = 64
    heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    ffn_dim: int = 128


def parameter(data) -> Tensor:
    t = Tensor(data)
    t.requires_grad = True
    return t


def xavier_uniform(rng: np.random.Generator, fan_out: int, fan_in: int,
                   shape: tuple[int, ...] | None = None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape if shape is not None else (fan_out, fan_in))


class Module:
    """Tiny parameter-registry base. Attributes that are parameter Tensors,
    Modules, or lists of either are discovered in definition order."""

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        seen: set[int] = set()

        def visit(obj, name):
            if isinstance(obj, Tensor):
                if obj.requires_grad and id(obj) not in seen:
                    seen.add(id(obj))
                    out.append((name, obj))
            elif isinstance(obj, Module):
                for key, val in vars(obj).items():
                    visit(val, f"{name}.{key}" if name else key)
            elif isinstance(obj, (list, tuple)):
                for i, item in enumerate(obj):
                    visit(item, f"{name}.{i}")

        visit(self, prefix)
        return out

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """Affine map x -> x @ weight.T + bias; weight stored as [out, in]."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        self.weight = parameter(xavier_uniform(rng, out_dim, in_dim))
        self.bias = parameter(np.zeros(out_dim)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = T.matmul(x, T.transpose(self.weight))
        if self.bias is not None:
            out = T.add(out, self.bias)
        return out


class MLP(Module):
    """Stack of linear layers with ReLU between (none after the last)."""

    def __init__(self, dims: list[int], rng: np.random.Generator):
        if len(dims) < 2:
            raise ContractError(f"MLP needs at least input and output dims, got {dims}")
        self.layers = [Linear(dims[i], dims[i + 1], rng) for i in range(len(dims) - 1)]

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i + 1 < len(self.layers):
                x = T.relu(x)
        return x


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


def multi_head_attention(queries: Tensor, keys: Tensor, values: Tensor, heads: int,
                         out_weight: Tensor | None = None, out_bias: Tensor | None = None,
                         return_weights: bool = False):
    """Scaled dot-product attention over heads.

    Inputs are [..., a, f] / [..., b, f]; each head attends over f/heads
    channels with scale 1/sqrt(f/heads); head outputs are concatenated and
    optionally projected by ``out_weight`` ([f, f], applied as x @ W.T).
    """
    f = queries.shape[-1]
    if f % heads != 0:
        raise ContractError(f"model dim {f} not divisible by {heads} heads")
    if keys.shape != values.shape:
        raise ShapeError(f"keys {keys.shape} and values {values.shape} must match")
    if keys.shape[-1] != f or queries.shape[:-2] != keys.shape[:-2]:
        raise ShapeError(f"incompatible attention shapes {queries.shape} and {keys.shape}")
    hd = f // heads
    a, b = queries.shape[-2], keys.shape[-2]
    lead = queries.shape[:-2]
    nl = len(lead)
    to_heads = tuple(range(nl)) + (nl + 1, nl, nl + 2)  # [..., L, H, hd] -> [..., H, L, hd]

    def split(t, length):
        return T.transpose(T.reshape(t, lead + (length, heads, hd)), to_heads)

    q, k, v = split(queries, a), split(keys, b), split(values, b)
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(hd))
    attn = T.softmax(scores)  # [..., H, a, b], rows sum to 1
    ctx = T.reshape(T.transpose(T.matmul(attn, v), to_heads), lead + (a, f))
    if out_weight is not None:
        ctx = T.matmul(ctx, T.transpose(out_weight))
        if out_bias is not None:
            ctx = T.add(ctx, out_bias)
    return (ctx, attn) if return_weights else ctx


class AttentionBlock(Module):
    """Multi-head attention with learned query/key/value/output projections."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads != 0:
            raise ContractError(f"model dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.proj_q = Linear(dim, dim, rng)
        self.proj_k = Linear(dim, dim, rng)
        self.proj_v = Linear(dim, dim, rng)
        self.proj_out = Linear(dim, dim, rng)

    def forward(self, queries: Tensor, keys: Tensor, values: Tensor,
                return_weights: bool = False):
        return multi_head_attention(
            self.proj_q(queries), self.proj_k(keys), self.proj_v(values), self.heads,
            out_weight=self.proj_out.weight, out_bias=self.proj_out.bias,
            return_weights=return_weights)


class EncoderLayer(Module):
    """Pre-norm self-attention + feedforward block with residuals."""

    def __init__(self, dim: int, heads: int, ffn_dim: int, rng: np.random.Generator):
        self.norm_attn = LayerNorm(dim)
        self.attn = AttentionBlock(dim, heads, rng)
        self.norm_ffn = LayerNorm(dim)
        self.ffn = MLP([dim, ffn_dim, dim], rng)

    def forward(self, x: Tensor) -> Tensor:
        h = self.norm_attn(x)
        x = T.add(x, self.attn(h, h, h))
        return T.add(x, self.ffn(self.norm_ffn(x)))


class Encoder(Module):
    def __init__(self, dim: int, heads: int, ffn_dim: int, layers: int, rng):
        self.layers = [EncoderLayer(dim, heads, ffn_dim, rng) for _ in range(layers)]

    def forward(self, x: Tensor) -> Tensor:
        """Positions must already be summed into x; zero layers is identity."""
        for layer in self.layers:
            x = layer(x)
        return x


class DecoderLayer(Module):
    """Pre-norm block: query self-attention, cross-attention into the
    encoder memory, then feedforward."""

    def __init__(self, dim: int, heads: int, ffn_dim: int, rng: np.random.Generator):
        self.norm_self = LayerNorm(dim)
        self.self_attn = AttentionBlock(dim, heads, rng)
        self.norm_cross = LayerNorm(dim)
        self.cross_attn = AttentionBlock(dim, heads, rng)
        self.norm_ffn = LayerNorm(dim)
        self.ffn = MLP([dim, ffn_dim, dim], rng)

    def forward(self, q: Tensor, memory: Tensor) -> Tensor:
        h = self.norm_self(q)
        q = T.add(q, self.self_attn(h, h, h))
        q = T.add(q, self.cross_attn(self.norm_cross(q), memory, memory))
        return T.add(q, self.ffn(self.norm_ffn(q)))


class Decoder(Module):
    """Decoder stack returning every layer's output (for auxiliary
    supervision), each passed through a shared final norm."""

    def __init__(self, dim: int, heads: int, ffn_dim: int, layers: int, rng):
        if layers < 1:
            raise ContractError(f"decoder needs at least 1 layer, got {layers}")
        self.layers = [DecoderLayer(dim, heads, ffn_dim, rng) for _ in range(layers)]
        self.norm_out = LayerNorm(dim)

    def forward(self, memory: Tensor, queries: Tensor) -> list[Tensor]:
        outputs = []
        q = queries
        for layer in self.layers:
            q = layer(q, memory)
            outputs.append(self.norm_out(q))
        return outputs


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        fan_in = in_ch * kernel * kernel
        fan_out = out_ch * kernel * kernel
        self.weight = parameter(xavier_uniform(rng, fan_out, fan_in,
                                               shape=(out_ch, in_ch, kernel, kernel)))
        self.bias = parameter(np.zeros(out_ch))
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Backbone(Module):
    """Strided conv stack: each stage is conv(3x3, stride 2) + relu, halving
    the spatial dims; the last stage lands on the model width."""

    def __init__(self, in_ch: int, out_dim: int, rng: np.random.Generator,
                 widths: tuple[int, ...] = (16, 32, 64)):
        plan = (in_ch,) + tuple(widths) + (out_dim,)
        self.stages = [Conv2d(plan[i], plan[i + 1], 3, rng, stride=2, padding=1)
                       for i in range(len(plan) - 1)]
        self.total_stride = 2 ** len(self.stages)

    def forward(self, image: Tensor) -> Tensor:
        h, w = image.shape[-2], image.shape[-1]
        if h % self.total_stride or w % self.total_stride:
            raise ShapeError(
                f"image {h}x{w} not divisible by total stride {self.total_stride}")
        x = image
        for stage in self.stages:
            x = T.relu(stage(x))
        return x


def global_average_pool(features: Tensor) -> Tensor:
    """[ch, h, w] -> [ch], or [batch, ch, h, w] -> [batch, ch]."""
    if features.ndim not in (3, 4):
        raise ShapeError(f"expected a (batched) feature map, got shape {features.shape}")
    return T.mean(features, axis=(-2, -1))


def sinusoidal_positions(h: int, w: int, f: int) -> Tensor:
    """Fixed 2-D sine/cosine grid, [h*w, f], row-major over (y, x)."""
    if f % 2 != 0:
        raise ContractError(f"positional dim must be even, got {f}")
    half = f // 2
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")

    def encode(pos):
        pairs = (half + 1) // 2
        freqs = 10000.0 ** (2.0 * np.arange(pairs) / half)
        ang = pos[..., None] / freqs
        enc = np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(h, w, 2 * pairs)
        return enc[..., :half]

    grid = np.concatenate([encode(ys), encode(xs)], axis=-1)
    return Tensor(grid.reshape(h * w, f))


class Adam(object):
    """Adam with decoupled weight decay."""

    def __init__(self, params: list[Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        if lr <= 0:
            raise ContractError(f"learning rate must be positive, got {lr}")
        seen: set[int] = set()
        self.params = [p for p in params if not (id(p) in seen or seen.add(id(p)))]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grads(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def clip_global_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm.
    Returns the pre-clip norm."""
    if max_norm <= 0:
        raise ContractError(f"max_norm must be positive, got {max_norm}")
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    total = math.sqrt(total)
    if total > max_norm:
        factor = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return total
