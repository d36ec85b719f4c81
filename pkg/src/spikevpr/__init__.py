"""Spiking-neural-network visual place recognition on event-camera streams."""

from .energy import OpCountReport, count_ops, energy_from_counts
from .evaluation import MetricReport, RetrievalResult, evaluate, match_all, match_volumes, recall_at_n
from .events import EventStream, EventVolume, GeoPose, load_events, slice_volumes, synth_dataset
from .model import DescriptorSet, ModelConfig, SpikeEVPR
from .snn import LIF, LifParams, SEWBlock
from .training import TrainConfig, train, triplet_loss

__version__ = "0.1.0"

__all__ = [
    "DescriptorSet", "EventStream", "EventVolume", "GeoPose", "LIF", "LifParams", "MetricReport",
    "ModelConfig", "OpCountReport", "RetrievalResult", "SEWBlock", "SpikeEVPR", "TrainConfig",
    "count_ops", "energy_from_counts", "evaluate", "load_events", "match_all", "match_volumes",
    "recall_at_n", "slice_volumes", "synth_dataset", "train", "triplet_loss",
]
