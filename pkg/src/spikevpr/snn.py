"""Spiking layers trained with surrogate gradients.

Tensors are time-major: ``(T, B, ...)``. Autograd records the unrolled time
loop, so calling ``backward`` on a loss performs backpropagation through time.

Inside :func:`smoothed` the spike nonlinearity outputs its smooth surrogate
primitive instead of the Heaviside step (the reset gate keeps the hard step).
The backward formula is the same in both modes, which is what makes finite
differences of the smoothed forward a valid oracle for the analytic gradients.
"""

from __future__ import annotations

import contextlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn

_SMOOTH = False


@contextlib.contextmanager
def smoothed(enabled: bool = True):
    global _SMOOTH
    prev, _SMOOTH = _SMOOTH, enabled
    try:
        yield
    finally:
        _SMOOTH = prev


def surrogate_grad(x: torch.Tensor, alpha: float) -> torch.Tensor:
    """Derivative of the arctan surrogate, peak alpha/2 at x = 0."""
    return alpha / (2 * (1 + (math.pi / 2 * alpha * x) ** 2))


def surrogate_primitive(x: torch.Tensor, alpha: float) -> torch.Tensor:
    return torch.atan(math.pi / 2 * alpha * x) / math.pi + 0.5


class _ArcTanSpike(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, alpha, smooth):
        ctx.save_for_backward(x)
        ctx.alpha = alpha
        if smooth:
            return surrogate_primitive(x, alpha)
        return (x >= 0).to(x.dtype)

    @staticmethod
    def backward(ctx, grad_output):
        (x,) = ctx.saved_tensors
        return grad_output * surrogate_grad(x, ctx.alpha), None, None


def spike(x: torch.Tensor, alpha: float = 2.0) -> torch.Tensor:
    """Heaviside step of ``x`` (``u - v_threshold``) with arctan surrogate gradient."""
    return _ArcTanSpike.apply(x, alpha, _SMOOTH)


@dataclass(frozen=True)
class LifParams:
    v_threshold: float = 1.0
    decay: float = 0.5
    alpha: float = 2.0

    def __post_init__(self):
        if self.v_threshold <= 0:
            raise ValueError("v_threshold must be positive")
        if not 0 <= self.decay < 1:
            raise ValueError("decay must lie in [0, 1)")


@dataclass
class LifState:
    u: torch.Tensor | float = 0.0
    fired: torch.Tensor | float = 0.0


def lif_step(state: LifState, current: torch.Tensor, params: LifParams = LifParams()) -> torch.Tensor:
    """Advance one time step in place and return the output spikes.

    ``u <- decay * u * (1 - s_prev) + I``; spike when ``u >= v_threshold``;
    the reset gate carries no gradient.
    """
    if not torch.isfinite(current).all():
        raise FloatingPointError("non-finite input current to LIF layer")
    u = params.decay * state.u * (1 - state.fired) + current
    s = spike(u - params.v_threshold, params.alpha)
    fired = (u.detach() >= params.v_threshold).to(u.dtype)
    state.u = u
    state.fired = fired
    return s


class LIF(nn.Module):
    """Multi-step LIF layer; membrane state starts at rest on every call."""

    def __init__(self, params: LifParams = LifParams()):
        super().__init__()
        self.params = params

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        state = LifState()
        out = [lif_step(state, x[t], self.params) for t in range(x.shape[0])]
        return torch.stack(out)

    def extra_repr(self) -> str:
        p = self.params
        return f"v_threshold={p.v_threshold}, decay={p.decay}, alpha={p.alpha}"


class SeqWrap(nn.Module):
    """Apply a stateless layer to every time step by folding T into the batch axis.

    Folding also makes batch-norm statistics span (T, B, H, W) jointly.
    """

    def __init__(self, module: nn.Module):
        super().__init__()
        self.module = module

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        t, b = x.shape[:2]
        y = self.module(x.reshape(t * b, *x.shape[2:]))
        return y.reshape(t, b, *y.shape[1:])


def conv_bn(c_in: int, c_out: int, k: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        SeqWrap(nn.Conv2d(c_in, c_out, k, stride, padding=k // 2, bias=False)),
        SeqWrap(nn.BatchNorm2d(c_out)),
    )


class SEWBlock(nn.Module):
    """Spike-element-wise residual block with ADD connection.

    ``out = LIF2(BN(Conv(LIF1(BN(Conv(x))))) + skip(x))`` where ``skip`` is the
    identity, or a 1x1 conv + BN projection when the stride or width changes.
    With ``zero_init_residual`` the last BN scale starts at zero, so a fresh
    block passes binary input through unchanged.
    """

    def __init__(self, c_in: int, c_out: int, stride: int = 1, lif: LifParams = LifParams(),
                 zero_init_residual: bool = False):
        super().__init__()
        self.conv1 = conv_bn(c_in, c_out, 3, stride)
        self.lif1 = LIF(lif)
        self.conv2 = conv_bn(c_out, c_out, 3)
        self.downsample = conv_bn(c_in, c_out, 1, stride) if stride != 1 or c_in != c_out else None
        self.lif2 = LIF(lif)
        if zero_init_residual:
            nn.init.zeros_(self.conv2[1].module.weight)

    def residual(self, x):
        return self.conv2(self.lif1(self.conv1(x)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skip = x if self.downsample is None else self.downsample(x)
        return self.lif2(self.residual(x) + skip)


def is_binary(x: torch.Tensor) -> bool:
    return bool(((x == 0) | (x == 1)).all())


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


def check_grads(module: nn.Module) -> None:
    for name, p in module.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NonFiniteGradient(name)


def bptt_step(net: nn.Module, inputs, grad_output: torch.Tensor) -> dict[str, torch.Tensor]:
    """Run forward and reverse passes; return a fresh gradient for every parameter."""
    net.zero_grad(set_to_none=True)
    if not isinstance(inputs, (tuple, list)):
        inputs = (inputs,)
    out = net(*inputs)
    out.backward(grad_output)
    check_grads(net)
    return {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in net.named_parameters()
    }


def fold_bn(conv: nn.Conv2d, bn: nn.BatchNorm2d) -> nn.Conv2d:
    """Return a conv equal to ``bn(conv(x))`` with ``bn`` in inference mode."""
    scale = bn.weight / torch.sqrt(bn.running_var + bn.eps)
    fused = nn.Conv2d(
        conv.in_channels, conv.out_channels, conv.kernel_size, conv.stride, conv.padding, bias=True
    ).to(conv.weight.dtype)
    with torch.no_grad():
        fused.weight.copy_(conv.weight * scale.reshape(-1, 1, 1, 1))
        bias = conv.bias if conv.bias is not None else torch.zeros_like(bn.running_mean)
        fused.bias.copy_((bias - bn.running_mean) * scale + bn.bias)
    return fused


# ---------------------------------------------------------------------------
# checkpoint format: "SEW1" | u32 count | count x (u32 name_len, name, u32 ndim,
# ndim x u32 dims, float32 LE data) | optional u32 len + UTF-8 key=value manifest

CHECKPOINT_MAGIC = b"SEW1"


def save_checkpoint(tensors: dict[str, torch.Tensor], path, manifest: dict[str, str] | None = None) -> None:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        raw = name.encode()
        arr = t.detach().to(torch.float32).contiguous().cpu().numpy()
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.astype("<f4").tobytes())
    if manifest:
        text = "".join(f"{k}={v}\n" for k, v in manifest.items()).encode()
        chunks.append(struct.pack("<I", len(text)) + text)
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict[str, str]]:
    import numpy as np

    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a SEW1 checkpoint")
    try:
        (count,) = struct.unpack_from("<I", raw, 4)
        off = 8
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", raw, off)
            name = raw[off + 4: off + 4 + n].decode()
            off += 4 + n
            (ndim,) = struct.unpack_from("<I", raw, off)
            shape = struct.unpack_from(f"<{ndim}I", raw, off + 4)
            off += 4 + 4 * ndim
            size = int(np.prod(shape, dtype=np.int64)) * 4
            if off + size > len(raw):
                raise ValueError("truncated tensor payload")
            arr = np.frombuffer(raw, dtype="<f4", count=size // 4, offset=off).reshape(shape)
            tensors[name] = torch.from_numpy(arr.copy())
            off += size
        manifest = {}
        if off < len(raw):
            (n,) = struct.unpack_from("<I", raw, off)
            for line in raw[off + 4: off + 4 + n].decode().splitlines():
                k, v = line.split("=", 1)
                manifest[k] = v
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    return tensors, manifest


def float_state(module: nn.Module) -> dict[str, torch.Tensor]:
    """Parameters and floating-point buffers, the part of the state a checkpoint keeps."""
    return {k: v for k, v in module.state_dict().items() if v.is_floating_point()}


def load_float_state(module: nn.Module, tensors: dict[str, torch.Tensor]) -> None:
    state = module.state_dict()
    missing = [k for k, v in state.items() if v.is_floating_point() and k not in tensors]
    if missing:
        raise KeyError(f"checkpoint lacks {missing[:3]}")
    with torch.no_grad():
        for k, v in tensors.items():
            if k not in state:
                raise KeyError(f"unexpected tensor {k!r} in checkpoint")
            if tuple(state[k].shape) != tuple(v.shape):
                raise ValueError(f"shape mismatch for {k}: {tuple(v.shape)} vs {tuple(state[k].shape)}")
            state[k].copy_(v)
