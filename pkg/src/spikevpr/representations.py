"""Event volume to spike tensor conversion.

Two encodings of a volume, both shaped ``(T, 2, H, W)`` with channel 0 for
positive and channel 1 for negative polarity:

* the multi-channel spike tensor, where each event deposits spikes at its
  pixel on the time steps selected by a small learnable spiking MLP applied to
  the offset between the step and the event's normalized timestamp;
* the time-surface spike tensor, Bernoulli samples of an exponentially
  decayed per-pixel recency map.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import rng
from .events import EventVolume
from .snn import LifParams, LifState, is_binary, lif_step

SPIKE_MAGIC = b"SPK1"


def normalize_timestamp(t: float, t_first: float, t_last: float, steps: int) -> float:
    """Map ``t`` affinely onto ``[0, steps - 1]``; a zero-length span maps to 0."""
    if t_last == t_first:
        return 0.0
    if not t_first <= t <= t_last:
        raise ValueError("timestamp outside [t_first, t_last]")
    return (steps - 1) * (t - t_first) / (t_last - t_first)


def normalize_timestamps(t: np.ndarray, steps: int) -> tuple[np.ndarray, bool]:
    """Vectorized :func:`normalize_timestamp` over a sorted volume; also returns the degenerate flag."""
    t = np.asarray(t, dtype=np.int64)
    if len(t) == 0:
        return np.zeros(0), True
    span = int(t[-1] - t[0])
    if span == 0:
        return np.zeros(len(t)), True
    return (steps - 1) * (t - t[0]).astype(np.float64) / span, False


class SmlpEncoder(nn.Module):
    """Spiking MLP temporal kernel: offset -> FC -> LIF -> FC -> LIF.

    ``forward`` takes offsets shaped ``(N, T)`` (entry ``[i, s]`` is
    ``s - t_i*``) and returns binary contributions of the same shape. Each
    offset is evaluated from rest; the second layer has one output neuron per
    time step and step ``s`` reads neuron ``s``.

    The initial weights realize "spike at the step nearest to t*": one half of
    the hidden units fires for offset >= -0.55, the other for offset <= 0.55,
    and an output fires only when (nearly) all hidden units do.
    """

    def __init__(self, steps: int = 4, hidden: int = 32, lif: LifParams = LifParams(), seed: int = 0):
        super().__init__()
        if hidden < 2:
            raise ValueError("hidden width must be >= 2")
        self.steps = steps
        self.lif = lif
        self.fc1 = nn.Linear(1, hidden)
        self.fc2 = nn.Linear(hidden, steps)
        self.fc1.real_valued_input = True
        g = torch.Generator().manual_seed(seed)
        th = lif.v_threshold
        with torch.no_grad():
            sign = torch.ones(hidden)
            sign[hidden // 2:] = -1
            self.fc1.weight.copy_((2.0 * sign + 0.05 * torch.randn(hidden, generator=g)).unsqueeze(1))
            self.fc1.bias.fill_(th + 1.1)
            self.fc2.weight.copy_(1.5 * th / hidden + 0.01 * th / hidden * torch.randn(steps, hidden, generator=g))
            self.fc2.bias.fill_(-0.25 * th)

    def forward(self, offsets: torch.Tensor) -> torch.Tensor:
        n, steps = offsets.shape
        if steps != self.steps:
            raise ValueError(f"encoder built for {self.steps} steps, got {steps}")
        h = lif_step(LifState(), self.fc1(offsets.reshape(-1, 1)), self.lif)
        out = lif_step(LifState(), self.fc2(h), self.lif).reshape(n, steps, steps)
        return torch.diagonal(out, dim1=1, dim2=2)


def nearest_step_kernel(offsets: torch.Tensor) -> torch.Tensor:
    """Fixed kernel: one spike at the step nearest the event (ties at .5 fire both)."""
    return (offsets.abs() <= 0.5).to(offsets.dtype)


def build_mcs_tensor(volume: EventVolume, encoder, steps: int = 4, dtype=None) -> torch.Tensor:
    """Multi-channel spike tensor ``(T, 2, H, W)``.

    Per-event contributions are summed per (step, polarity, pixel) and
    binarized with ``count > 0``; the binarization passes gradients straight
    through to the counts, so the encoder stays trainable.
    """
    w, h = volume.resolution
    if dtype is None:
        dtype = next(encoder.parameters()).dtype if isinstance(encoder, nn.Module) else torch.float32
    counts = torch.zeros(steps * 2 * h * w, dtype=dtype)
    ev = volume.events
    if len(ev):
        tstar, _ = normalize_timestamps(ev.t, steps)
        grid = torch.arange(steps, dtype=dtype)
        offsets = grid.unsqueeze(0) - torch.as_tensor(tstar, dtype=dtype).unsqueeze(1)
        contrib = encoder(offsets)
        chan = np.where(ev.p > 0, 0, 1)
        pix = torch.as_tensor((chan * h + ev.y) * w + ev.x, dtype=torch.long)
        idx = (grid.long().unsqueeze(0) * (2 * h * w) + pix.unsqueeze(1)).reshape(-1)
        counts = counts.index_add(0, idx, contrib.reshape(-1))
    counts = counts.reshape(steps, 2, h, w)
    return counts + ((counts > 0).to(dtype) - counts).detach()


def build_ts_map(volume: EventVolume, eta: float = 0.05, t_end: int | None = None) -> np.ndarray:
    """Time surface ``(2, H, W)`` with values ``exp(-(t_end - t_last) / eta)``.

    ``eta`` is in seconds; pixels without an event of the given polarity are 0.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    w, h = volume.resolution
    t_end = volume.t_end if t_end is None else t_end
    last = np.full(2 * h * w, -1, dtype=np.int64)
    ev = volume.events
    if len(ev):
        chan = np.where(ev.p > 0, 0, 1)
        np.maximum.at(last, (chan * h + ev.y) * w + ev.x, ev.t.astype(np.int64))
    out = np.zeros(2 * h * w)
    hit = last >= 0
    out[hit] = np.exp(-(t_end - last[hit]) / (eta * 1e6))
    return np.clip(out, 0.0, 1.0).reshape(2, h, w)


def sample_tss_tensor(ts_map: np.ndarray, steps: int = 4, seed: int = 0, dtype=torch.float32) -> torch.Tensor:
    """Bernoulli spikes ``(T, 2, H, W)``; draw ``[t, c, y, x]`` is keyed by ``(seed, c, y, x, t)``."""
    ts_map = np.asarray(ts_map, dtype=np.float64)
    if ts_map.min(initial=0.0) < 0 or ts_map.max(initial=0.0) > 1:
        raise ValueError("time-surface values must lie in [0, 1]")
    c, h, w = ts_map.shape
    cc, yy, xx = np.meshgrid(np.arange(c), np.arange(h), np.arange(w), indexing="ij")
    tt = np.arange(steps).reshape(-1, 1, 1, 1)
    u = rng.uniform(seed, cc[None], yy[None], xx[None], tt)
    return torch.as_tensor(u < ts_map[None], dtype=dtype)


# ---------------------------------------------------------------------------
# "SPK1" | 4 x u32 dims | bit-packed row-major payload


def save_spike_tensor(x: torch.Tensor, path) -> None:
    if x.dim() != 4 or not is_binary(x):
        raise ValueError("expected a binary (T, C, H, W) tensor")
    bits = np.packbits(x.detach().cpu().numpy().astype(np.uint8).reshape(-1))
    Path(path).write_bytes(SPIKE_MAGIC + struct.pack("<4I", *x.shape) + bits.tobytes())


def load_spike_tensor(path) -> torch.Tensor:
    raw = Path(path).read_bytes()
    if raw[:4] != SPIKE_MAGIC or len(raw) < 20:
        raise ValueError(f"{path}: not a SPK1 file")
    dims = struct.unpack_from("<4I", raw, 4)
    n = int(np.prod(dims))
    if len(raw) - 20 < (n + 7) // 8:
        raise ValueError(f"{path}: truncated payload")
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8, offset=20), count=n)
    return torch.as_tensor(bits.reshape(dims), dtype=torch.float32)
