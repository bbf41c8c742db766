import json

import numpy as np
import pytest

from topomerge import se3
from topomerge.errors import CorruptRecord, EmptyInput, MapIOError, SchemaVersionMismatch
from topomerge.se3 import Pose
from topomerge.topomap import (
    Frame,
    KeyframePolicy,
    OdomFactorEdge,
    TopometricMap,
    build_submap,
    load_map,
    maps_equal,
    parse_map,
    save_map,
    serialize_map,
    split_node_id,
    theoretical_map_size,
    to_dot,
    to_geojson,
)


def unit(rng, dim=16):
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def line_frames(xs, dim=16, seed=0, payload=False):
    rng = np.random.default_rng(seed)
    return [
        Frame(float(k), Pose(np.array([1.0, 0, 0, 0]), [x, 0.0, 0.0]), unit(rng, dim), 50.0,
              payload=f"img{k}".encode() if payload else None)
        for k, x in enumerate(xs)
    ]


def test_static_frames_give_single_node():
    m = build_submap(line_frames([0.0] * 10))
    assert len(m) == 1
    assert not m.covis and not m.odom and not m.trav


def test_keyframes_on_first_exceedance():
    m = build_submap(line_frames(range(11)), KeyframePolicy(3.9, 60.0))
    xs = [m.nodes[i].pose_world.t[0] for i in m.node_ids()]
    assert xs == [0.0, 4.0, 8.0]
    assert [split_node_id(i)[1] for i in m.node_ids()] == [0, 4, 8]


def test_default_policy_thresholds():
    p = KeyframePolicy()
    assert (p.translation_threshold, p.rotation_threshold) == (3.9, 60.0)


def test_rotation_threshold_triggers_keyframe():
    rng = np.random.default_rng(1)
    frames = [Frame(float(k), se3.yaw_pose(np.radians(25.0 * k)), unit(rng), 50.0) for k in range(6)]
    m = build_submap(frames)
    # 0, 75 (first > 60), 150 degrees
    assert [split_node_id(i)[1] for i in m.node_ids()] == [0, 3, 6][:len(m)]
    assert len(m) == 2


def test_empty_input():
    with pytest.raises(EmptyInput):
        build_submap([])


def test_policy_validation():
    with pytest.raises(ValueError):
        KeyframePolicy(0.0, 60.0)


def test_chain_edges_and_relative_poses():
    rng = np.random.default_rng(2)
    frames = []
    p = Pose.identity()
    for k in range(40):
        frames.append(Frame(float(k), p, unit(rng), 50.0))
        p = p @ Pose.exp(np.r_[0.0, 0.0, rng.normal(0, 0.1), 1.0, 0.0, 0.0])
    m = build_submap(frames, session_id=3)
    ids = m.node_ids()
    assert len(m.odom) == len(m.covis) == len(m.trav) == len(ids) - 1
    for a, b in zip(ids, ids[1:]):
        e = m.odom[(a, b)]
        want = se3.relative(m.nodes[a].pose_world, m.nodes[b].pose_world)
        assert e.relative.allclose(want, atol=1e-12)
        assert m.trav[(a, b)].cost == pytest.approx(np.linalg.norm(want.t))
        assert all(split_node_id(i)[0] == 3 for i in (a, b))
    # node poses are a subsequence of input poses
    assert len(m) <= len(frames)


def test_covariance_composes_from_steps():
    frames = line_frames(range(6))
    step_cov = np.diag([1e-6] * 3 + [1e-4] * 3)
    for f in frames[1:]:
        f.step_covariance = step_cov
    m = build_submap(frames, KeyframePolicy(4.5, 60.0))
    e = next(iter(m.odom.values()))
    # pure translation along x: translation variances add, rotation couples into y,z
    assert e.covariance[3, 3] == pytest.approx(5e-4)
    assert e.covariance[0, 0] == pytest.approx(5e-6)
    assert e.covariance[4, 4] > 5e-4


def test_theoretical_map_size():
    assert theoretical_map_size(1, 512, 288, 1.0) == 442368
    assert theoretical_map_size(0) == 0
    mb = theoretical_map_size(17, 512, 288, 0.18) / 1e6
    assert mb == pytest.approx(1.35, abs=0.01)
    # 0.423 per image per unit compression; the exact value is 0.4219 MiB
    assert theoretical_map_size(1) / 2**20 == pytest.approx(0.423, abs=2e-3)
    with pytest.raises(ValueError):
        theoretical_map_size(1, compression_ratio=0.0)


def test_empty_map_round_trip(tmp_path):
    m = TopometricMap(descriptor_dim=8)
    save_map(m, tmp_path / "m.topo")
    back = load_map(tmp_path / "m.topo")
    assert len(back) == 0 and back.descriptor_dim == 8


def test_round_trip_is_lossless_and_deterministic(tmp_path):
    m = build_submap(line_frames(np.arange(0, 13, 0.5), payload=True))
    assert len(m) == 4
    save_map(m, tmp_path / "a.topo")
    back = load_map(tmp_path / "a.topo")
    assert maps_equal(m, back, atol=1e-12)
    save_map(back, tmp_path / "b.topo")
    assert (tmp_path / "a.topo").read_bytes() == (tmp_path / "b.topo").read_bytes()
    assert back.blobs == m.blobs


def test_all_layers_preserved(tmp_path):
    m = build_submap(line_frames(range(20)))
    ids = m.node_ids()
    m.add_covis(ids[0], ids[2], 7.0)
    m.add_trav(ids[0], ids[3], 12.0)
    rel = se3.relative(m.nodes[ids[0]].pose_world, m.nodes[ids[3]].pose_world)
    m.add_odom(OdomFactorEdge(ids[3], ids[0], rel.inverse(), np.eye(6) * 0.01, "loop_closure"))
    save_map(m, tmp_path / "m.topo")
    back = load_map(tmp_path / "m.topo")
    assert (len(back.covis), len(back.odom), len(back.trav)) == (len(m.covis), len(m.odom), len(m.trav))
    assert back.odom[(ids[0], ids[3])].kind == "loop_closure"


def test_reversed_edge_is_stored_canonically():
    rng = np.random.default_rng(3)
    rel = se3.random_pose(rng, max_angle=1.0)
    cov = np.diag(rng.uniform(0.1, 1.0, 6))
    e = OdomFactorEdge(5, 2, rel, cov)
    r = e.reversed()
    assert (r.a, r.b) == (2, 5)
    assert r.relative.allclose(rel.inverse(), atol=1e-12)
    back = r.reversed()
    assert np.allclose(back.covariance, cov, atol=1e-12)


def test_layer_independence():
    m = build_submap(line_frames(range(20)))
    covis, odom = dict(m.covis), dict(m.odom)
    m.trav.clear()
    assert m.covis == covis and m.odom == odom
    m2 = build_submap(line_frames(range(20)))
    trav = dict(m2.trav)
    m2.covis.clear()
    m2.odom.clear()
    assert m2.trav == trav


def test_schema_mismatch_and_corrupt_records(tmp_path):
    text = serialize_map(build_submap(line_frames(range(9))))
    with pytest.raises(SchemaVersionMismatch):
        parse_map(text.replace("TOPOMAP v1", "TOPOMAP v9", 1))
    lines = text.splitlines()
    lines[2] = lines[2] + " 1.0"
    with pytest.raises(CorruptRecord) as exc:
        parse_map("\n".join(lines))
    assert exc.value.index == 2
    with pytest.raises(CorruptRecord):
        parse_map(text + "BOGUS 1 2\n")
    with pytest.raises(CorruptRecord):
        parse_map(text + "EDGE trav 1 99999 1.0\n")
    with pytest.raises(MapIOError):
        load_map(tmp_path / "missing.topo")


def test_invariants_enforced():
    rng = np.random.default_rng(4)
    m = TopometricMap(descriptor_dim=16)
    from topomerge.topomap import MapNode
    with pytest.raises(ValueError):
        MapNode(1, np.ones(16), 0.0, Pose.identity(), 50.0, None, 0)
    with pytest.raises(ValueError):
        MapNode(1, unit(rng), 0.0, Pose.identity(), 101.0, None, 0)
    m.add_node(MapNode(1, unit(rng), 0.0, Pose.identity(), 50.0, None, 0))
    with pytest.raises(KeyError):
        m.add_trav(1, 2, 1.0)
    m.add_node(MapNode(2, unit(rng), 0.0, Pose.identity(), 50.0, None, 0))
    with pytest.raises(ValueError):
        m.add_trav(1, 2, 0.0)
    with pytest.raises(ValueError):
        m.add_covis(1, 1, 1.0)
    m.add_covis(1, 2, 3.0)
    m.add_covis(2, 1, 5.0)
    assert m.covis[(1, 2)].strength == 5.0


def test_components_and_exports():
    a = build_submap(line_frames(range(10)), session_id=0)
    b = build_submap(line_frames(range(10), seed=1), session_id=1)
    m = a.copy()
    for nid, n in b.nodes.items():
        m.add_node(n)
    for e in b.odom.values():
        m.add_odom(e)
    assert m.component_count() == 2
    gj = to_geojson(m)
    flags = [f["properties"]["disconnected"] for f in gj["features"]]
    assert sorted(flags) == [False, True]
    json.dumps(gj)
    dot = to_dot(m)
    assert dot.startswith("graph topomap {") and "layer=odom" in dot
    ida, idb = a.node_ids()[0], b.node_ids()[0]
    m.add_odom(OdomFactorEdge(ida, idb, Pose.identity(), np.eye(6), "loop_closure"))
    assert m.component_count() == 1
