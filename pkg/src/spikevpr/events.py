"""Event streams: file formats, time slicing, pose association and a synthetic generator."""

from __future__ import annotations

import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

EARTH_RADIUS_M = 6371000.0
BINARY_MAGIC = b"EVT1"
_HEADER = struct.Struct("<4sHH")
RECORD_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])

GEOGRAPHIC = "geographic"
PLANAR = "planar"


class EventFormatError(ValueError):
    """Malformed or out-of-range event data. ``location`` is a line number or byte offset."""

    def __init__(self, message: str, path=None, location: str | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if location is not None:
                where += f" ({location})"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.location = location


@dataclass(frozen=True)
class Event:
    t: int
    x: int
    y: int
    p: int


@dataclass(frozen=True)
class GeoPose:
    t: int
    a: float
    b: float
    mode: str = GEOGRAPHIC

    def __post_init__(self):
        if self.mode not in (GEOGRAPHIC, PLANAR):
            raise ValueError(f"unknown coordinate mode {self.mode!r}")
        if self.mode == GEOGRAPHIC and not (-90.0 <= self.a <= 90.0 and -180.0 <= self.b <= 180.0):
            raise ValueError(f"lat/lon out of range: ({self.a}, {self.b})")

    @property
    def lat(self) -> float:
        return self.a

    @property
    def lon(self) -> float:
        return self.b


class EventStream:
    """Columnar container for a time-ordered event sequence.

    Columns are numpy arrays ``t`` (uint64 microseconds), ``x``, ``y`` (int64)
    and ``p`` (int8, +1/-1).
    """

    def __init__(self, t, x, y, p, resolution: tuple[int, int], validate: bool = True):
        self.t = np.asarray(t, dtype=np.uint64)
        self.x = np.asarray(x, dtype=np.int64)
        self.y = np.asarray(y, dtype=np.int64)
        self.p = np.asarray(p, dtype=np.int8)
        self.resolution = (int(resolution[0]), int(resolution[1]))
        self.reordered = 0
        if validate:
            self._validate()

    def _validate(self):
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise EventFormatError("column lengths differ")
        w, h = self.resolution
        if w <= 0 or h <= 0:
            raise EventFormatError(f"invalid resolution {self.resolution}")
        bad = np.flatnonzero((self.x < 0) | (self.x >= w) | (self.y < 0) | (self.y >= h))
        if bad.size:
            i = int(bad[0])
            raise EventFormatError(
                f"coordinate ({self.x[i]}, {self.y[i]}) outside {w}x{h}", location=f"event {i}"
            )
        bad = np.flatnonzero(np.abs(self.p.astype(np.int64)) != 1)
        if bad.size:
            i = int(bad[0])
            raise EventFormatError(f"polarity {self.p[i]} not in {{-1, +1}}", location=f"event {i}")
        if n > 1 and np.any(np.diff(self.t.astype(np.int64)) < 0):
            order = np.argsort(self.t, kind="stable")
            self.reordered = int(np.count_nonzero(order != np.arange(n)))
            log.warning("stable-sorted %d out-of-order events", self.reordered)
            self.t, self.x, self.y, self.p = self.t[order], self.x[order], self.y[order], self.p[order]

    @classmethod
    def empty(cls, resolution):
        return cls([], [], [], [], resolution)

    @classmethod
    def from_events(cls, events, resolution):
        events = list(events)
        return cls(
            [e.t for e in events], [e.x for e in events], [e.y for e in events], [e.p for e in events],
            resolution,
        )

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, i: int) -> Event:
        return Event(int(self.t[i]), int(self.x[i]), int(self.y[i]), int(self.p[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def select(self, mask_or_index) -> "EventStream":
        out = EventStream(
            self.t[mask_or_index], self.x[mask_or_index], self.y[mask_or_index],
            self.p[mask_or_index], self.resolution, validate=False,
        )
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.resolution == other.resolution
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.p, other.p)
        )


@dataclass
class EventVolume:
    events: EventStream
    t_start: int
    t_end: int
    pose: GeoPose | None = None
    index: int = 0

    def __post_init__(self):
        if self.t_end <= self.t_start:
            raise ValueError("t_end must exceed t_start")
        t = self.events.t
        if len(t) and (int(t[0]) < self.t_start or int(t[-1]) >= self.t_end):
            raise ValueError("volume contains events outside [t_start, t_end)")

    @property
    def resolution(self):
        return self.events.resolution

    @property
    def empty(self) -> bool:
        return len(self.events) == 0


@dataclass
class DatasetManifest:
    name: str
    event_files: list[Path]
    pose_files: list[Path]
    resolution: tuple[int, int]
    interval: float = 0.25
    coordinate_mode: str = PLANAR
    extra: dict = field(default_factory=dict)

    def save(self, path) -> None:
        lines = [
            f"name={self.name}",
            f"resolution={self.resolution[0]}x{self.resolution[1]}",
            f"interval={self.interval!r}",
            f"coordinate_mode={self.coordinate_mode}",
            f"traverses={len(self.event_files)}",
        ]
        base = Path(path).parent
        for i, (ev, po) in enumerate(zip(self.event_files, self.pose_files)):
            lines.append(f"events.{i}={_relative(ev, base)}")
            lines.append(f"poses.{i}={_relative(po, base)}")
        for k in sorted(self.extra):
            lines.append(f"extra.{k}={self.extra[k]}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        kv = read_key_values(path)
        try:
            n = int(kv["traverses"])
            w, h = (int(v) for v in kv["resolution"].split("x"))
            events = [path.parent / kv[f"events.{i}"] for i in range(n)]
            poses = [path.parent / kv[f"poses.{i}"] for i in range(n)]
        except (KeyError, ValueError) as exc:
            raise ValueError(f"{path}: bad manifest ({exc})") from exc
        for f in events + poses:
            if not f.exists():
                raise FileNotFoundError(f"{path}: referenced file {f} does not exist")
        extra = {k[len("extra."):]: v for k, v in kv.items() if k.startswith("extra.")}
        return cls(
            name=kv.get("name", path.stem), event_files=events, pose_files=poses,
            resolution=(w, h), interval=float(kv.get("interval", 0.25)),
            coordinate_mode=kv.get("coordinate_mode", PLANAR), extra=extra,
        )


def _relative(p, base) -> str:
    try:
        return os.path.relpath(p, base)
    except ValueError:
        return str(p)


def read_key_values(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# ---------------------------------------------------------------------------
# file formats


def _guess_format(path) -> str:
    with open(path, "rb") as fh:
        return "binary" if fh.read(4) == BINARY_MAGIC else "csv"


def load_events(path, format: str | None = None, resolution=None) -> EventStream:
    """Read an event file.

    CSV files carry no header, so ``resolution`` must be supplied for them;
    binary files store it. Polarity 0 in CSV input is read as -1.
    """
    path = Path(path)
    if format is None:
        format = _guess_format(path) if path.stat().st_size else "csv"
    if format == "binary":
        return _load_binary(path, resolution)
    if format != "csv":
        raise ValueError(f"unknown event format {format!r}")
    if resolution is None:
        raise ValueError("CSV event files need an explicit resolution")
    return _load_csv(path, resolution)


def _load_csv(path, resolution) -> EventStream:
    cols = ([], [], [], [])
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise EventFormatError(f"expected 4 fields, got {len(parts)}", path, f"line {lineno}")
            try:
                t, x, y, p = (int(v) for v in parts)
            except ValueError:
                raise EventFormatError(f"non-integer field in {line!r}", path, f"line {lineno}") from None
            if t < 0:
                raise EventFormatError("negative timestamp", path, f"line {lineno}")
            if p == 0:
                p = -1
            if p not in (-1, 1):
                raise EventFormatError(f"polarity {p} not in {{-1, +1}}", path, f"line {lineno}")
            w, h = resolution
            if not (0 <= x < w and 0 <= y < h):
                raise EventFormatError(f"coordinate ({x}, {y}) outside {w}x{h}", path, f"line {lineno}")
            for c, v in zip(cols, (t, x, y, p)):
                c.append(v)
    return EventStream(*cols, resolution)


def _load_binary(path, resolution=None) -> EventStream:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise EventFormatError("truncated header", path, "offset 0")
    magic, w, h = _HEADER.unpack_from(raw)
    if magic != BINARY_MAGIC:
        raise EventFormatError(f"bad magic {magic!r}", path, "offset 0")
    if resolution is not None and tuple(resolution) != (w, h):
        raise EventFormatError(f"resolution {w}x{h} does not match expected {tuple(resolution)}", path)
    body = len(raw) - _HEADER.size
    if body % RECORD_DTYPE.itemsize:
        off = _HEADER.size + (body // RECORD_DTYPE.itemsize) * RECORD_DTYPE.itemsize
        raise EventFormatError("truncated record", path, f"offset {off}")
    rec = np.frombuffer(raw, dtype=RECORD_DTYPE, offset=_HEADER.size)
    bad = np.flatnonzero((rec["x"] >= w) | (rec["y"] >= h) | (np.abs(rec["p"].astype(np.int64)) != 1))
    if bad.size:
        i = int(bad[0])
        raise EventFormatError(
            f"invalid record (x={rec['x'][i]}, y={rec['y'][i]}, p={rec['p'][i]})",
            path, f"offset {_HEADER.size + i * RECORD_DTYPE.itemsize}",
        )
    return EventStream(rec["t"], rec["x"], rec["y"], rec["p"], (w, h))


def save_events(stream: EventStream, path, format: str = "binary") -> None:
    path = Path(path)
    if format == "binary":
        rec = np.empty(len(stream), dtype=RECORD_DTYPE)
        rec["t"], rec["x"], rec["y"], rec["p"] = stream.t, stream.x, stream.y, stream.p
        w, h = stream.resolution
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(BINARY_MAGIC, w, h))
            fh.write(rec.tobytes())
    elif format == "csv":
        with open(path, "w") as fh:
            for t, x, y, p in zip(stream.t.tolist(), stream.x.tolist(), stream.y.tolist(), stream.p.tolist()):
                fh.write(f"{t},{x},{y},{p}\n")
    else:
        raise ValueError(f"unknown event format {format!r}")


def load_poses(path, mode: str = GEOGRAPHIC) -> list[GeoPose]:
    poses = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise EventFormatError(f"expected t,a,b, got {line!r}", path, f"line {lineno}")
        try:
            poses.append(GeoPose(int(parts[0]), float(parts[1]), float(parts[2]), mode))
        except ValueError as exc:
            raise EventFormatError(str(exc), path, f"line {lineno}") from None
    return poses


def save_poses(poses, path) -> None:
    with open(path, "w") as fh:
        for p in poses:
            fh.write(f"{p.t},{p.a!r},{p.b!r}\n")


# ---------------------------------------------------------------------------
# slicing and geometry


def slice_volumes(stream: EventStream, interval: float, poses=(), origin: int | None = None) -> list[EventVolume]:
    """Cut ``stream`` into consecutive windows of ``interval`` seconds.

    Windows start at the first timestamp (or at ``origin``, which must not be
    later than it) and continue until the last event is covered. Empty windows are kept (``volume.empty``). Each volume gets the
    pose closest in time to its midpoint, ties going to the earlier pose.
    """
    if interval <= 0:
        raise ValueError("interval must be positive")
    if len(stream) == 0:
        return []
    width = int(round(interval * 1e6))
    if width <= 0:
        raise ValueError("interval shorter than one microsecond")
    t0 = int(stream.t[0]) if origin is None else int(origin)
    if t0 > int(stream.t[0]):
        raise ValueError("origin lies after the first event")
    t = stream.t.astype(np.int64) - t0
    n = int(t[-1]) // width + 1
    bounds = np.searchsorted(t, np.arange(n + 1, dtype=np.int64) * width, side="left")
    pose_t = np.array([p.t for p in poses], dtype=np.int64)
    order = np.argsort(pose_t, kind="stable")
    pose_t = pose_t[order]
    volumes = []
    for k in range(n):
        start = t0 + k * width
        sub = stream.select(slice(bounds[k], bounds[k + 1]))
        pose = None
        if len(pose_t):
            pose = poses[int(order[_nearest(pose_t, start + width / 2)])]
        volumes.append(EventVolume(sub, start, start + width, pose, index=k))
    return volumes


def _nearest(sorted_t: np.ndarray, target: float) -> int:
    i = int(np.searchsorted(sorted_t, target, side="left"))
    if i == 0:
        return 0
    if i == len(sorted_t):
        return i - 1
    # tie goes to the earlier pose
    return i - 1 if target - sorted_t[i - 1] <= sorted_t[i] - target else i


def geo_distance(a: GeoPose, b: GeoPose) -> float:
    """Haversine distance in meters (geographic) or Euclidean (planar)."""
    if a.mode != b.mode:
        raise ValueError(f"cannot compare {a.mode} and {b.mode} poses")
    if a.mode == PLANAR:
        return math.hypot(a.a - b.a, a.b - b.b)
    lat1, lon1, lat2, lon2 = map(math.radians, (a.a, a.b, b.a, b.b))
    h = math.sin((lat2 - lat1) / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


def pairwise_distances(qs, ds) -> np.ndarray:
    """Distance matrix between two pose lists, same conventions as geo_distance."""
    if not qs or not ds:
        return np.zeros((len(qs), len(ds)))
    modes = {p.mode for p in qs} | {p.mode for p in ds}
    if len(modes) != 1:
        raise ValueError("mixed coordinate modes")
    qa = np.array([[p.a, p.b] for p in qs], dtype=np.float64)
    da = np.array([[p.a, p.b] for p in ds], dtype=np.float64)
    if modes == {PLANAR}:
        return np.hypot(qa[:, None, 0] - da[None, :, 0], qa[:, None, 1] - da[None, :, 1])
    q, d = np.radians(qa), np.radians(da)
    dlat = d[None, :, 0] - q[:, None, 0]
    dlon = d[None, :, 1] - q[:, None, 1]
    h = np.sin(dlat / 2) ** 2 + np.cos(q[:, None, 0]) * np.cos(d[None, :, 0]) * np.sin(dlon / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.minimum(1.0, np.sqrt(h)))


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthConfig:
    n_places: int = 20
    traverses: int = 2
    resolution: tuple[int, int] = (32, 32)
    events_per_place: int = 64
    noise_rate: float = 0.1
    seed: int = 0
    interval: float = 0.25
    spacing: float = 100.0
    pose_jitter: float = 5.0
    time_jitter: float = 0.05


def synth_dataset(config: SynthConfig, out_dir) -> DatasetManifest:
    """Write a small multi-traverse event dataset and its manifest.

    Place ``k`` occupies the k-th ``interval`` window of every traverse. Its
    structure pixels lie on a few straight strokes; each stroke has its own
    polarity and sweeps across its pixels starting at its own phase. All of
    this is drawn from ``(seed, k)`` so it repeats across traverses; each traverse perturbs the
    firing times by ``time_jitter`` (fraction of the window) and adds
    ``round(noise_rate * events_per_place)`` uniform noise events per place.
    Poses lie on a straight track, ``spacing`` meters apart, with at most
    ``pose_jitter`` meters of per-traverse offset.
    """
    c = config
    w, h = c.resolution
    if c.n_places < 2:
        raise ValueError("n_places must be >= 2")
    if c.traverses < 2:
        raise ValueError("traverses must be >= 2")
    if c.events_per_place > w * h:
        raise ValueError(f"resolution {w}x{h} cannot host {c.events_per_place} distinct pixels")
    if c.events_per_place < 1 or c.noise_rate < 0:
        raise ValueError("events_per_place must be >= 1 and noise_rate >= 0")
    if not 2 * c.pose_jitter < 75.0 < c.spacing - 2 * c.pose_jitter:
        raise ValueError("spacing/pose_jitter do not separate places at 75 m")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    width = int(round(c.interval * 1e6))
    n_noise = int(round(c.noise_rate * c.events_per_place))
    places = [_place_structure(np.random.default_rng([c.seed, 0, k]), w, h, c.events_per_place)
              for k in range(c.n_places)]

    event_files, pose_files = [], []
    for r in range(c.traverses):
        rng = np.random.default_rng([c.seed, 1, r])
        ts, xs, ys, ps, poses = [], [], [], [], []
        for k, (pix, pol, phase) in enumerate(places):
            jitter = rng.uniform(-c.time_jitter, c.time_jitter, size=len(pix))
            frac = np.clip(phase + jitter, 0.0, 0.999)
            t = k * width + np.floor(frac * width).astype(np.int64)
            nt = k * width + rng.integers(0, width, size=n_noise)
            npix = rng.integers(0, w * h, size=n_noise)
            npol = rng.choice(np.array([-1, 1], dtype=np.int8), size=n_noise)
            ts += [t, nt]
            xs += [pix % w, npix % w]
            ys += [pix // w, npix // w]
            ps += [pol, npol]
            offset = rng.uniform(-c.pose_jitter, c.pose_jitter)
            poses.append(GeoPose(k * width + width // 2, k * c.spacing + offset, 0.0, PLANAR))
        t = np.concatenate(ts)
        order = np.argsort(t, kind="stable")
        stream = EventStream(
            t[order], np.concatenate(xs)[order], np.concatenate(ys)[order], np.concatenate(ps)[order],
            (w, h),
        )
        ev_path = out_dir / f"traverse{r}.evt"
        po_path = out_dir / f"traverse{r}_poses.csv"
        save_events(stream, ev_path, "binary")
        save_poses(poses, po_path)
        event_files.append(ev_path)
        pose_files.append(po_path)

    manifest = DatasetManifest(
        name=f"synth-seed{c.seed}", event_files=event_files, pose_files=pose_files,
        resolution=(w, h), interval=c.interval, coordinate_mode=PLANAR,
        extra={"n_places": c.n_places, "events_per_place": c.events_per_place,
               "noise_rate": c.noise_rate, "seed": c.seed, "t_origin": 0},
    )
    manifest.save(out_dir / "manifest.txt")
    return manifest


def _place_structure(rng, w, h, n):
    """Pixels, polarities and firing phases of one place, built from random strokes."""
    order, pol, phase = [], [], []
    seen = set()
    while len(order) < n:
        length = int(rng.integers(max(2, min(w, h) // 4), max(3, min(w, h) // 2) + 1))
        angle = rng.uniform(0, np.pi)
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        sign = int(rng.choice([-1, 1]))
        start, sweep = rng.uniform(0.05, 0.6), rng.uniform(0.05, 0.3)
        for j, s in enumerate(np.linspace(-0.5, 0.5, length)):
            x = int(np.floor(cx + s * length * np.cos(angle))) % w
            y = int(np.floor(cy + s * length * np.sin(angle))) % h
            if (x, y) in seen or len(order) == n:
                continue
            seen.add((x, y))
            order.append(y * w + x)
            pol.append(sign)
            phase.append(start + sweep * j / max(1, length - 1))
    return np.array(order), np.array(pol, dtype=np.int8), np.array(phase)


def load_traverse(manifest: DatasetManifest, i: int) -> list[EventVolume]:
    """Load traverse ``i`` of a manifest and slice it into volumes."""
    stream = load_events(manifest.event_files[i], resolution=manifest.resolution)
    poses = load_poses(manifest.pose_files[i], manifest.coordinate_mode)
    origin = manifest.extra.get("t_origin")
    return slice_volumes(stream, manifest.interval, poses, None if origin is None else int(origin))
