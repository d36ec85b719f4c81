import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spikevpr.events import (
    GEOGRAPHIC,
    PLANAR,
    DatasetManifest,
    Event,
    EventFormatError,
    EventStream,
    EventVolume,
    GeoPose,
    SynthConfig,
    geo_distance,
    load_events,
    load_poses,
    load_traverse,
    pairwise_distances,
    save_events,
    save_poses,
    slice_volumes,
    synth_dataset,
)


def random_stream(rng, n, res=(32, 32)):
    t = np.sort(rng.integers(0, 10**6, n))
    return EventStream(t, rng.integers(0, res[0], n), rng.integers(0, res[1], n), rng.choice([-1, 1], n), res)


# --- loading -----------------------------------------------------------------


def test_empty_csv_gives_empty_stream(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("")
    s = load_events(path, resolution=(32, 24))
    assert len(s) == 0
    assert s.resolution == (32, 24)


def test_csv_line_maps_fields(tmp_path):
    path = tmp_path / "one.csv"
    path.write_text("1000,5,7,1\n")
    s = load_events(path, "csv", (32, 32))
    assert list(s) == [Event(t=1000, x=5, y=7, p=1)]


def test_csv_zero_polarity_maps_to_negative(tmp_path):
    path = tmp_path / "p0.csv"
    path.write_text("1,0,0,0\n2,1,1,1\n")
    assert load_events(path, resolution=(4, 4)).p.tolist() == [-1, 1]


def test_csv_needs_resolution(tmp_path):
    path = tmp_path / "a.csv"
    path.write_text("1,0,0,1\n")
    with pytest.raises(ValueError):
        load_events(path, "csv")


@pytest.mark.parametrize(
    "line, needle",
    [("1,2,3", "4 fields"), ("1,a,3,1", "non-integer"), ("1,40,3,1", "outside"), ("1,2,3,2", "polarity"),
     ("-5,2,3,1", "negative")],
)
def test_csv_errors_name_the_line(tmp_path, line, needle):
    path = tmp_path / "bad.csv"
    path.write_text("0,0,0,1\n" + line + "\n")
    with pytest.raises(EventFormatError) as info:
        load_events(path, "csv", (32, 32))
    assert info.value.location == "line 2"
    assert needle in str(info.value)


def test_binary_round_trip_three_records(tmp_path):
    s = random_stream(np.random.default_rng(0), 3)
    save_events(s, tmp_path / "e.evt", "binary")
    assert load_events(tmp_path / "e.evt") == s


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 200), st.integers(0, 2**32 - 1), st.sampled_from(["binary", "csv"]))
def test_save_load_identity(tmp_path_factory, n, seed, fmt):
    s = random_stream(np.random.default_rng(seed), n, (17, 9))
    path = tmp_path_factory.mktemp("rt") / f"e.{fmt}"
    save_events(s, path, fmt)
    assert load_events(path, fmt, (17, 9)) == s


def test_binary_truncated_record_reports_offset(tmp_path):
    s = random_stream(np.random.default_rng(1), 3)
    save_events(s, tmp_path / "e.evt")
    raw = (tmp_path / "e.evt").read_bytes()
    (tmp_path / "cut.evt").write_bytes(raw[:-3])
    with pytest.raises(EventFormatError) as info:
        load_events(tmp_path / "cut.evt")
    assert info.value.location == f"offset {8 + 2 * 13}"


def test_binary_bad_magic(tmp_path):
    (tmp_path / "x.evt").write_bytes(b"NOPE" + bytes(10))
    with pytest.raises(EventFormatError):
        load_events(tmp_path / "x.evt", "binary")


def test_binary_out_of_range_record(tmp_path):
    s = EventStream([1, 2], [0, 3], [0, 3], [1, 1], (4, 4))
    save_events(s, tmp_path / "e.evt")
    raw = bytearray((tmp_path / "e.evt").read_bytes())
    raw[8 + 13 + 8] = 9  # x of the second record
    (tmp_path / "e.evt").write_bytes(bytes(raw))
    with pytest.raises(EventFormatError) as info:
        load_events(tmp_path / "e.evt")
    assert info.value.location == "offset 21"


def test_unsorted_input_is_stable_sorted_and_counted():
    s = EventStream([5, 1, 3, 3], [0, 1, 2, 3], [0, 0, 0, 0], [1, 1, -1, 1], (4, 4))
    assert s.t.tolist() == [1, 3, 3, 5]
    assert s.x.tolist() == [1, 2, 3, 0]
    assert s.reordered == 4


@pytest.mark.parametrize("x, y, p", [(4, 0, 1), (0, -1, 1), (0, 0, 0), (0, 0, 2)])
def test_stream_validation(x, y, p):
    with pytest.raises(EventFormatError):
        EventStream([0], [x], [y], [p], (4, 4))


# --- slicing -----------------------------------------------------------------


def test_slice_hand_partition():
    s = EventStream([0, 100_000, 300_000], [0, 1, 2], [0, 0, 0], [1, 1, 1], (4, 4))
    vols = slice_volumes(s, 0.25)
    assert [v.events.t.tolist() for v in vols] == [[0, 100_000], [300_000]]
    assert (vols[0].t_start, vols[0].t_end) == (0, 250_000)


def test_slice_single_event():
    s = EventStream([42], [1], [1], [-1], (4, 4))
    vols = slice_volumes(s, 0.25)
    assert len(vols) == 1 and len(vols[0].events) == 1


def test_slice_empty_stream():
    assert slice_volumes(EventStream.empty((4, 4)), 0.25) == []


def test_slice_keeps_empty_windows():
    s = EventStream([0, 600_000], [0, 0], [0, 0], [1, 1], (4, 4))
    vols = slice_volumes(s, 0.25)
    assert [v.empty for v in vols] == [False, True, False]


def test_pose_at_exact_midpoint():
    s = EventStream([0, 10], [0, 0], [0, 0], [1, 1], (4, 4))
    poses = [GeoPose(0, 0.0, 0.0, PLANAR), GeoPose(125_000, 1.0, 0.0, PLANAR), GeoPose(260_000, 2.0, 0.0, PLANAR)]
    assert slice_volumes(s, 0.25, poses)[0].pose.t == 125_000


def test_pose_tie_goes_to_earlier():
    s = EventStream([0], [0], [0], [1], (4, 4))
    poses = [GeoPose(225_000, 1.0, 0.0, PLANAR), GeoPose(25_000, 0.0, 0.0, PLANAR)]
    assert slice_volumes(s, 0.25, poses)[0].pose.t == 25_000


def test_slice_without_poses():
    s = EventStream([0], [0], [0], [1], (4, 4))
    assert slice_volumes(s, 0.25)[0].pose is None


def test_slice_rejects_bad_interval():
    with pytest.raises(ValueError):
        slice_volumes(EventStream([0], [0], [0], [1], (4, 4)), 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 300), st.integers(0, 2**32 - 1), st.floats(0.01, 0.5))
def test_slices_partition_the_stream(n, seed, interval):
    s = random_stream(np.random.default_rng(seed), n)
    vols = slice_volumes(s, interval)
    assert sum(len(v.events) for v in vols) == n
    assert np.array_equal(np.concatenate([v.events.t for v in vols]), s.t)
    for a, b in zip(vols, vols[1:]):
        assert a.t_end == b.t_start
    for v in vols:
        t = v.events.t.astype(np.int64)
        assert np.all((t >= v.t_start) & (t < v.t_end))


def test_volume_invariants():
    s = EventStream([10], [0], [0], [1], (4, 4))
    with pytest.raises(ValueError):
        EventVolume(s, 5, 5)
    with pytest.raises(ValueError):
        EventVolume(s, 11, 20)


# --- geometry ----------------------------------------------------------------


def test_geo_identity():
    p = GeoPose(0, -27.47, 153.02)
    assert geo_distance(p, p) == 0.0


def test_geo_half_great_circle():
    d = geo_distance(GeoPose(0, 0.0, 0.0), GeoPose(0, 0.0, 180.0))
    assert abs(d - math.pi * 6371000.0) <= 1.0
    assert abs(d - 20015086.8) <= 1.0


def test_planar_345():
    assert geo_distance(GeoPose(0, 0, 0, PLANAR), GeoPose(0, 3, 4, PLANAR)) == 5.0


def test_mixed_modes_rejected():
    with pytest.raises(ValueError):
        geo_distance(GeoPose(0, 0, 0, PLANAR), GeoPose(0, 0, 0, GEOGRAPHIC))


def test_geopose_range():
    with pytest.raises(ValueError):
        GeoPose(0, 91.0, 0.0)
    with pytest.raises(ValueError):
        GeoPose(0, 0.0, 181.0)


latlon = st.tuples(st.floats(-89.0, 89.0), st.floats(-179.0, 179.0))


@settings(max_examples=200, deadline=None)
@given(latlon, latlon, latlon)
def test_geo_metric_properties(a, b, c):
    pa, pb, pc = (GeoPose(0, *v) for v in (a, b, c))
    ab, ba = geo_distance(pa, pb), geo_distance(pb, pa)
    assert ab >= 0 and ab == pytest.approx(ba, rel=1e-6, abs=1e-6)
    ac, bc = geo_distance(pa, pc), geo_distance(pb, pc)
    assert ac <= ab + bc + 1e-6 * max(1.0, ab + bc)


def test_pairwise_matches_scalar():
    rng = np.random.default_rng(3)
    qs = [GeoPose(0, *rng.uniform([-80, -170], [80, 170])) for _ in range(5)]
    ds = [GeoPose(0, *rng.uniform([-80, -170], [80, 170])) for _ in range(7)]
    m = pairwise_distances(qs, ds)
    for i, q in enumerate(qs):
        for j, d in enumerate(ds):
            assert m[i, j] == pytest.approx(geo_distance(q, d), rel=1e-9)


def test_pose_file_round_trip(tmp_path):
    poses = [GeoPose(1, -27.5, 153.0), GeoPose(2, 10.25, -3.5)]
    save_poses(poses, tmp_path / "p.csv")
    assert load_poses(tmp_path / "p.csv") == poses


# --- synthetic data ----------------------------------------------------------


def test_synth_is_deterministic(tmp_path):
    cfg = SynthConfig(n_places=6, seed=7)
    synth_dataset(cfg, tmp_path / "a")
    synth_dataset(cfg, tmp_path / "b")
    for name in ("traverse0.evt", "traverse1.evt", "traverse0_poses.csv", "traverse1_poses.csv", "manifest.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synth_noiseless_events_on_structure(tmp_path):
    m = synth_dataset(SynthConfig(n_places=8, noise_rate=0.0, seed=3), tmp_path)
    t0, t1 = load_traverse(m, 0), load_traverse(m, 1)
    assert len(t0) == len(t1) == 8
    for a, b in zip(t0, t1):
        pa = set(zip(a.events.x.tolist(), a.events.y.tolist()))
        pb = set(zip(b.events.x.tolist(), b.events.y.tolist()))
        assert pb == pa and len(pa) == 64


def test_synth_pose_separation(tmp_path):
    m = synth_dataset(SynthConfig(n_places=20, seed=5), tmp_path)
    d = pairwise_distances([v.pose for v in load_traverse(m, 0)], [v.pose for v in load_traverse(m, 1)])
    assert np.diag(d).max() < 75.0
    off = d + np.diag(np.full(20, np.inf))
    assert off.min() > 75.0


def test_synth_noise_count(tmp_path):
    m = synth_dataset(SynthConfig(n_places=4, events_per_place=50, noise_rate=0.2, seed=1), tmp_path)
    assert all(len(v.events) == 60 for v in load_traverse(m, 0))


@pytest.mark.parametrize(
    "kw", [dict(n_places=1), dict(traverses=1), dict(resolution=(4, 4), events_per_place=17)]
)
def test_synth_preconditions(tmp_path, kw):
    with pytest.raises(ValueError):
        synth_dataset(SynthConfig(**kw), tmp_path)


def test_manifest_round_trip(tmp_path):
    m = synth_dataset(SynthConfig(n_places=3, seed=2), tmp_path)
    back = DatasetManifest.load(tmp_path / "manifest.txt")
    assert back.resolution == m.resolution
    assert [p.name for p in back.event_files] == [p.name for p in m.event_files]
    assert back.extra["t_origin"] == "0"


def test_manifest_missing_file(tmp_path):
    synth_dataset(SynthConfig(n_places=3, seed=2), tmp_path)
    (tmp_path / "traverse1.evt").unlink()
    with pytest.raises(FileNotFoundError):
        DatasetManifest.load(tmp_path / "manifest.txt")
