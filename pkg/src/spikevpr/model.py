"""Dual-stream spiking descriptor network.

Pipeline for one volume: two spike tensors -> two 13-conv SEW residual
streams -> shared/specific split of the binary feature maps -> three pooled
sub-descriptors -> learned softmax weights -> weighted, normalized global
descriptor of length ``3 * C``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .events import EventVolume
from .representations import SmlpEncoder, build_mcs_tensor, build_ts_map, sample_tss_tensor
from .snn import LIF, LifParams, SEWBlock, SeqWrap, conv_bn, float_state, is_binary, load_float_state


@dataclass
class ModelConfig:
    steps: int = 4
    scale: float = 1.0
    widths: tuple[int, int, int] = (64, 128, 256)
    smlp_hidden: int = 32
    cda_hidden: int = 64
    eta: float = 0.05
    lif: LifParams = field(default_factory=LifParams)
    seed: int = 0

    @property
    def channels(self) -> tuple[int, int, int]:
        return tuple(max(1, int(round(w * self.scale))) for w in self.widths)


class Sr13(nn.Module):
    """Stem (7x7/2 conv, BN, LIF, 3x3/2 max-pool) and three stages of two SEW blocks.

    Stages 2 and 3 halve the resolution, so the output is ``H/16 x W/16``
    with ``widths[2]`` channels. Thirteen 3x3/7x7 convs in total; the two 1x1
    skip projections are not counted. Residual branches of identity-skip
    blocks start switched off (see ``SEWBlock``); without this a fresh deep
    stack scrambles its input. The two strided blocks keep theirs live: a
    strided 1x1 projection alone would drop 3 of every 4 positions.
    """

    def __init__(self, in_channels: int = 2, widths=(64, 128, 256), lif: LifParams = LifParams(),
                 zero_init_residual: bool = True):
        super().__init__()
        c1, c2, c3 = widths
        self.stem = nn.Sequential(
            conv_bn(in_channels, c1, 7, 2), LIF(lif), SeqWrap(nn.MaxPool2d(3, 2, 1))
        )
        z = zero_init_residual
        self.blocks = nn.Sequential(
            SEWBlock(c1, c1, 1, lif, z), SEWBlock(c1, c1, 1, lif, z),
            SEWBlock(c1, c2, 2, lif), SEWBlock(c2, c2, 1, lif, z),
            SEWBlock(c2, c3, 2, lif), SEWBlock(c3, c3, 1, lif, z),
        )
        self.out_channels = c3

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks(self.stem(x))

    def conv_layers(self):
        return [
            m for n, m in self.named_modules()
            if isinstance(m, nn.Conv2d) and "downsample" not in n
        ]


def ssd_extract(m_mcs: torch.Tensor, m_tss: torch.Tensor):
    """Shared (AND) and stream-specific (set difference) maps of two binary tensors."""
    if m_mcs.shape != m_tss.shape:
        raise ValueError(f"feature map shapes differ: {tuple(m_mcs.shape)} vs {tuple(m_tss.shape)}")
    x1 = m_mcs * m_tss
    return x1, m_mcs - x1, m_tss - x1


def safe_l2_normalize(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """L2-normalize along ``dim``; all-zero slices stay zero."""
    sq = (x * x).sum(dim=dim, keepdim=True)
    return x / torch.sqrt(torch.where(sq > 0, sq, torch.ones_like(sq)))


def pool_descriptors(*maps: torch.Tensor):
    """Spatial mean of each ``(T, ..., C, H, W)`` map, L2-normalized per time step over channels."""
    return tuple(safe_l2_normalize(m.mean(dim=(-2, -1)), dim=-1) for m in maps)


class CdaModule(nn.Module):
    """Weight path: FC(C -> hidden), LIF, FC(hidden -> 3), temporal mean, softmax."""

    def __init__(self, channels: int, hidden: int = 64, lif: LifParams = LifParams()):
        super().__init__()
        self.fc1 = nn.Linear(channels, hidden)
        self.fc1.real_valued_input = True
        self.lif = LIF(lif)
        self.fc2 = nn.Linear(hidden, 3)

    def logits(self, d1, d2, d3) -> torch.Tensor:
        d_add = d1 + d2 + d3
        if d_add.shape[-1] != self.fc1.in_features:
            raise ValueError(f"sub-descriptor width {d_add.shape[-1]} != {self.fc1.in_features}")
        return self.fc2(self.lif(self.fc1(d_add))).mean(dim=0)

    def forward(self, d1, d2, d3) -> torch.Tensor:
        return torch.softmax(self.logits(d1, d2, d3), dim=-1)


def cda_weights(d1, d2, d3, cda: CdaModule) -> torch.Tensor:
    return cda(d1, d2, d3)


def cda_aggregate(d1, d2, d3, w: torch.Tensor) -> torch.Tensor:
    """Mean over time, intra-normalize each sub-descriptor, weight, flatten, L2-normalize.

    Sub-descriptors are ``(T, ..., C)``; ``w`` is ``(..., 3)``. Returns ``(..., 3C)``.
    """
    stacked = torch.stack((d1, d2, d3), dim=-2).mean(dim=0)
    weighted = safe_l2_normalize(stacked, dim=-1) * w.unsqueeze(-1)
    return safe_l2_normalize(weighted.flatten(-2), dim=-1)


@dataclass
class DescriptorSet:
    d1: torch.Tensor
    d2: torch.Tensor
    d3: torch.Tensor
    weights: torch.Tensor
    descriptor: torch.Tensor

    @property
    def degenerate(self) -> torch.Tensor:
        return (self.descriptor * self.descriptor).sum(dim=-1) == 0


class SpikeEVPR(nn.Module):
    """Full descriptor model: timestamp encoder, two SR13 streams and the CDA module."""

    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.config = config
        torch.manual_seed(config.seed)
        widths = config.channels
        self.encoder = SmlpEncoder(config.steps, config.smlp_hidden, config.lif, seed=config.seed)
        self.mcs_net = Sr13(2, widths, config.lif)
        self.tss_net = Sr13(2, widths, config.lif)
        self.cda = CdaModule(widths[2], config.cda_hidden, config.lif)

    @property
    def descriptor_dim(self) -> int:
        return 3 * self.config.channels[2]

    def represent(self, volume: EventVolume, seed: int) -> tuple[torch.Tensor, torch.Tensor]:
        dtype = next(self.parameters()).dtype
        mcs = build_mcs_tensor(volume, self.encoder, self.config.steps, dtype)
        tss = sample_tss_tensor(build_ts_map(volume, self.config.eta), self.config.steps, seed, dtype)
        return mcs, tss

    def encode(self, mcs: torch.Tensor, tss: torch.Tensor):
        """Both streams on ``(T, B, 2, H, W)`` inputs; returns the binary feature maps."""
        if mcs.shape != tss.shape:
            raise ValueError("stream inputs differ in shape")
        return self.mcs_net(mcs), self.tss_net(tss)

    def forward(self, mcs: torch.Tensor, tss: torch.Tensor) -> DescriptorSet:
        m_mcs, m_tss = self.encode(mcs, tss)
        d1, d2, d3 = pool_descriptors(*ssd_extract(m_mcs, m_tss))
        w = self.cda(d1, d2, d3)
        return DescriptorSet(d1, d2, d3, w, cda_aggregate(d1, d2, d3, w))

    def describe(self, volumes, seeds) -> torch.Tensor:
        """Descriptors ``(B, 3C)`` for a batch of volumes; empty volumes give zero rows."""
        reps = [self.represent(v, s) for v, s in zip(volumes, seeds)]
        mcs = torch.stack([r[0] for r in reps], dim=1)
        tss = torch.stack([r[1] for r in reps], dim=1)
        desc = self(mcs, tss).descriptor
        empty = torch.tensor([v.empty for v in volumes])
        return torch.where(empty.unsqueeze(1), torch.zeros_like(desc), desc)

    def state_tensors(self) -> dict[str, torch.Tensor]:
        return float_state(self)

    def load_state_tensors(self, tensors) -> None:
        load_float_state(self, tensors)


def bsr_encode(mcs: torch.Tensor, tss: torch.Tensor, mcs_net: Sr13, tss_net: Sr13):
    """Run both streams; accepts single ``(T, 2, H, W)`` tensors or batched ``(T, B, 2, H, W)``."""
    if mcs.shape != tss.shape:
        raise ValueError("stream inputs differ in shape")
    if not (is_binary(mcs) and is_binary(tss)):
        raise ValueError("stream inputs must be binary spike tensors")
    single = mcs.dim() == 4
    if single:
        mcs, tss = mcs.unsqueeze(1), tss.unsqueeze(1)
    a, b = mcs_net(mcs), tss_net(tss)
    if single:
        a, b = a.squeeze(1), b.squeeze(1)
    return a, b


@torch.no_grad()
def full_descriptor(volume: EventVolume, model: SpikeEVPR, seed: int) -> tuple[torch.Tensor, bool]:
    """Global descriptor of one volume and whether it is degenerate (zero)."""
    if volume.empty:
        return torch.zeros(model.descriptor_dim), True
    mcs, tss = model.represent(volume, seed)
    desc = model(mcs.unsqueeze(1), tss.unsqueeze(1)).descriptor[0]
    return desc, bool((desc * desc).sum() == 0)
