"""Synaptic operation counting and 45 nm energy estimates.

Conv and linear layers are the only counted layers (batch-norm, pooling and
bias additions are excluded). In the spiking modes a layer whose input is
spikes performs one accumulate (AC) per (input spike, outgoing synapse);
layers flagged ``real_valued_input`` multiply real numbers and count as MACs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .snn import LIF

MAC_PJ = 4.6
AC_PJ = 0.9
MODES = ("ann", "snn-static", "snn-measured")
DEFAULT_RATE = 0.15


def energy_from_counts(o_ac: float, o_mac: float) -> float:
    """Energy in millijoules for the given AC and MAC counts."""
    if o_ac < 0 or o_mac < 0:
        raise ValueError("operation counts must be non-negative")
    return (MAC_PJ * o_mac + AC_PJ * o_ac) * 1e-9


@dataclass
class LayerOps:
    name: str
    kind: str
    spiking_input: bool
    dense: float
    mac: float = 0.0
    ac: float = 0.0


@dataclass
class OpCountReport:
    mode: str
    layers: list[LayerOps] = field(default_factory=list)
    params: int = 0
    steps: int | None = None
    rate: float | None = None
    source: str = ""

    @property
    def o_mac(self) -> float:
        return sum(layer.mac for layer in self.layers)

    @property
    def o_ac(self) -> float:
        return sum(layer.ac for layer in self.layers)

    @property
    def energy_mj(self) -> float:
        return energy_from_counts(self.o_ac, self.o_mac)

    @classmethod
    def from_counts(cls, mode: str, o_ac: float, o_mac: float, params: int = 0, steps=None, name="injected"):
        layer = LayerOps(name, "total", mode != "ann", o_ac + o_mac, mac=o_mac, ac=o_ac)
        return cls(mode, [layer], params, steps, source="counts supplied directly")

    def to_text(self, model_name: str = "Spike-EVPR", architecture: str = "SR13 x2") -> str:
        kind = "ANN" if self.mode == "ann" else "SNN"
        t = "-" if self.mode == "ann" or self.steps is None else str(self.steps)
        ac = "-" if self.mode == "ann" else f"{self.o_ac / 1e9:.4g}"
        rows = [
            f"{'Models':<8}{'Architecture':<16}{'Params(M)':>10}{'T':>4}{'O_AC(G)':>12}{'O_MAC(G)':>12}{'Energy(mJ)':>12}",
            f"{kind:<8}{architecture:<16}{self.params / 1e6:>10.4g}{t:>4}{ac:>12}"
            f"{self.o_mac / 1e9:>12.4g}{self.energy_mj:>12.3f}",
            "",
            f"mode: {self.mode}; MAC {MAC_PJ} pJ, AC {AC_PJ} pJ; BN, pooling and bias additions not counted",
        ]
        if self.mode == "snn-static":
            rows.append(f"firing rate ASSUMED: {self.rate} (no recorded spikes)")
        if self.source:
            rows.append(f"input: {self.source}")
        return "\n".join(rows)

    def to_csv(self) -> str:
        lines = ["layer,kind,spiking_input,dense_ops,mac,ac"]
        for layer in self.layers:
            lines.append(
                f"{layer.name},{layer.kind},{int(layer.spiking_input)},{layer.dense!r},{layer.mac!r},{layer.ac!r}"
            )
        lines.append(f"total,,,,{self.o_mac!r},{self.o_ac!r}")
        lines.append(f"energy_mj,{self.energy_mj!r}")
        return "\n".join(lines) + "\n"


def _dense_ops(module: nn.Module, x: torch.Tensor, y: torch.Tensor) -> float:
    if isinstance(module, nn.Conv2d):
        k = module.kernel_size[0] * module.kernel_size[1]
        return float(y.numel() * k * module.in_channels // module.groups)
    return float(x.numel() // module.in_features * module.in_features * module.out_features)


def _spike_driven_ops(module: nn.Module, x: torch.Tensor) -> float:
    """Exact AC count: every nonzero input times the synapses it reaches."""
    x = (x != 0).to(torch.float64)
    if isinstance(module, nn.Conv2d):
        if module.groups != 1:
            raise NotImplementedError("grouped convolutions")
        ones = torch.ones(1, module.in_channels, *module.kernel_size, dtype=torch.float64)
        reach = F.conv2d(x, ones, stride=module.stride, padding=module.padding, dilation=module.dilation)
        return float(reach.sum()) * module.out_channels
    return float(x.sum()) * module.out_features


def count_ops(net: nn.Module, mode: str, inputs=None, rate: float | None = None, batch: int = 1,
              steps: int | None = None, source: str = "") -> OpCountReport:
    """Count per-layer operations for one sample.

    ``inputs`` is a tuple of forward arguments or a zero-argument callable
    that drives ``net``; totals are divided by ``batch``. ``ann`` counts
    every synaptic op as a MAC for a single pass (``steps`` passes are run by
    the spiking forward, so dense counts are divided by ``steps``).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if inputs is None:
        raise ValueError(f"mode {mode} needs an input batch to resolve layer shapes")
    if mode == "snn-static":
        rate = DEFAULT_RATE if rate is None else rate
        if not 0 <= rate <= 1:
            raise ValueError("firing rate must lie in [0, 1]")
    steps = steps or getattr(getattr(net, "config", None), "steps", None) or 1
    names = {m: n for n, m in net.named_modules()}
    records: dict[str, LayerOps] = {}

    def hook(module, args, output):
        x = args[0]
        name = names[module]
        spiking = not getattr(module, "real_valued_input", False)
        dense = _dense_ops(module, x, output)
        rec = records.setdefault(name, LayerOps(name, type(module).__name__, spiking, 0.0))
        rec.dense += dense
        if mode == "ann":
            rec.mac += dense / steps
        elif not spiking:
            rec.mac += dense
        elif mode == "snn-static":
            rec.ac += rate * dense
        else:
            rec.ac += _spike_driven_ops(module, x)

    handles = [m.register_forward_hook(hook) for m in net.modules() if isinstance(m, (nn.Conv2d, nn.Linear))]
    try:
        with torch.no_grad():
            if callable(inputs):
                inputs()
            else:
                net(*inputs)
    finally:
        for h in handles:
            h.remove()
    for rec in records.values():
        rec.dense /= batch
        rec.mac /= batch
        rec.ac /= batch
    params = sum(p.numel() for p in net.parameters())
    return OpCountReport(mode, list(records.values()), params, steps, rate if mode == "snn-static" else None, source)


def measure_spike_rates(net: nn.Module, inputs) -> dict[str, float]:
    """Firing rate ``spikes / (neurons * T)`` of every LIF layer over one forward pass."""
    names = {m: n for n, m in net.named_modules()}
    counts: dict[str, list[float]] = {}

    def hook(module, args, output):
        c = counts.setdefault(names[module], [0.0, 0.0])
        c[0] += float(output.sum())
        c[1] += output.numel()

    handles = [m.register_forward_hook(hook) for m in net.modules() if isinstance(m, LIF)]
    try:
        with torch.no_grad():
            if callable(inputs):
                inputs()
            else:
                net(*inputs)
    finally:
        for h in handles:
            h.remove()
    return {k: (s / n if n else 0.0) for k, (s, n) in counts.items()}
