import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from helpers import make_obs
from scenediff import blobio
from scenediff.diffusion import DiffusionConfig, forward_diffuse, make_schedule
from scenediff.graph import assemble_adjacency
from scenediff.temporal import (
    MotionMemory,
    OnlineState,
    approach_speed,
    build_speed_matrix,
    detect_new_objects,
    inject_motion,
    refresh_padding,
)


def test_speed_example_receding_is_negative():
    # distance 10 -> 5 over one frame: closing at 5 per frame
    mem = MotionMemory(2)
    mem.record(0, 0, (0, 0))
    mem.record(1, 0, (10, 0))
    mem.record(0, 1, (0, 0))
    mem.record(1, 1, (5, 0))
    v, cold = approach_speed(mem, 0, 1, 1)
    assert v == pytest.approx(-5.0) and not cold


def test_speed_uses_elapsed_time():
    mem = MotionMemory(2, frame_interval=0.5)
    mem.record(0, 0, (0, 0))
    mem.record(1, 0, (3, 4))
    mem.record(0, 2, (0, 0))
    mem.record(1, 2, (6, 8))
    assert approach_speed(mem, 0, 1, 2)[0] == pytest.approx(5.0)


def test_cold_start_and_self_pair():
    mem = MotionMemory(3)
    mem.record(0, 4, (0.1, 0.1))
    mem.record(1, 4, (0.5, 0.1))
    assert approach_speed(mem, 0, 1, 4) == (0.0, True)
    assert approach_speed(mem, 0, 0, 4) == (0.0, False)
    assert approach_speed(mem, 0, 2, 4) == (0.0, True)


def test_memory_rejects_non_increasing_frames():
    mem = MotionMemory(1)
    mem.record(0, 3, (0, 0))
    with pytest.raises(ValueError):
        mem.record(0, 3, (1, 1))


def test_memory_capacity_drops_oldest():
    mem = MotionMemory(1, capacity=3)
    for f in range(5):
        mem.record(0, f, (f, 0))
    assert [e[0] for e in mem.entries(0)] == [2, 3, 4]
    assert mem.frames.shape == (1, 3)


def brute_speeds(tracks, t):
    # tracks: slot -> {frame: center}
    n = len(tracks)
    v = np.zeros((n, n))
    for i, j in itertools.permutations(range(n), 2):
        if t not in tracks[i] or t not in tracks[j]:
            continue
        earlier = [f for f in tracks[i] if f < t and f in tracks[j]]
        if not earlier:
            continue
        t0 = max(earlier)
        d = lambda f: math.dist(tracks[i][f], tracks[j][f])
        v[i, j] = (d(t) - d(t0)) / (t - t0)
    return v


@given(st.integers(2, 5), st.integers(0, 10_000))
def test_speed_matrix_matches_brute_force(n, seed):
    rng = np.random.default_rng(seed)
    tracks = []
    for _ in range(n):
        frames = sorted(rng.choice(6, size=rng.integers(1, 6), replace=False).tolist())
        frames = frames if 5 in frames else frames + [5]
        tracks.append({f: tuple(rng.uniform(0, 1, 2)) for f in frames})
    mem = MotionMemory(6)
    for s, tr in enumerate(tracks):
        for f in sorted(tr):
            mem.record(s, f, tr[f])
    got = build_speed_matrix(mem, n, 6, t=5, dtype=torch.float64).numpy()
    expected = np.zeros((6, 6))
    expected[:n, :n] = brute_speeds(tracks, 5)
    np.testing.assert_allclose(got, expected, atol=1e-12)
    assert np.array_equal(got, got.T)


@given(st.integers(2, 4), st.integers(0, 10_000))
def test_time_reversal_negates_speeds(n, seed):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(0, 1, size=(2, n, 2))
    fwd, back = MotionMemory(n), MotionMemory(n)
    for s in range(n):
        fwd.record(s, 0, pos[0, s])
        fwd.record(s, 1, pos[1, s])
        back.record(s, 0, pos[1, s])
        back.record(s, 1, pos[0, s])
    np.testing.assert_allclose(
        build_speed_matrix(fwd, n, n, dtype=torch.float64), -build_speed_matrix(back, n, n, dtype=torch.float64),
        atol=1e-12,
    )


def test_inject_motion_examples():
    a = torch.zeros(2, 2, 3)
    v = torch.tensor([[0.0, 2.0], [2.0, 0.0]])
    out = inject_motion(a, v)
    assert torch.equal(out[0, 1], torch.full((3,), 2.0))
    assert torch.equal(out[0, 0], torch.zeros(3))
    scaled = inject_motion(a, v, scale=torch.tensor([1.0, 0.0, 0.5]))
    assert torch.equal(scaled[1, 0], torch.tensor([2.0, 0.0, 1.0]))
    assert torch.equal(inject_motion(a, torch.zeros(2, 2)), a)
    with pytest.raises(ValueError):
        inject_motion(a, torch.tensor([[0.0, float("nan")], [0.0, 0.0]]))
    with pytest.raises(ValueError):
        inject_motion(a, torch.zeros(3, 3))


def test_inject_motion_commutes_with_noise_addition():
    sched = make_schedule(DiffusionConfig(steps=20))
    a0 = torch.randn(3, 3, 4, dtype=torch.float64)
    eps = torch.randn_like(a0)
    v = torch.randn(3, 3, dtype=torch.float64)
    k = torch.tensor(7)
    lhs = inject_motion(forward_diffuse(a0, k, eps, sched), v)
    rhs = forward_diffuse(a0, k, eps, sched) + v[..., None]
    torch.testing.assert_close(lhs, rhs, rtol=0, atol=1e-12)


def test_matching_example():
    prev = np.eye(3)
    cur = np.array([[0.0, 1.0, 0.0], [1.0, 0.1, 0.0], [0.0, 0.0, -1.0]])
    res = detect_new_objects(cur, prev)
    assert res.assignment == {0: 1, 1: 0}
    assert res.new_objects == [2]


def brute_greedy(sims, threshold):
    pairs = sorted(((-sims[o, p], p, o) for o in range(sims.shape[0]) for p in range(sims.shape[1])
                    if sims[o, p] >= threshold))
    assignment = {}
    for _, p, o in pairs:
        if o not in assignment and p not in assignment.values():
            assignment[o] = p
    return assignment


@given(st.integers(0, 5), st.integers(0, 5), st.integers(0, 10_000))
def test_matching_matches_brute_force(m, p, seed):
    rng = np.random.default_rng(seed)
    cur, prev = rng.normal(size=(m, 4)), rng.normal(size=(p, 4))
    res = detect_new_objects(cur, prev, threshold=0.2)
    if m and p:
        sims = (cur / np.linalg.norm(cur, axis=1, keepdims=True)) @ (prev / np.linalg.norm(prev, axis=1, keepdims=True)).T
        expected = brute_greedy(sims, 0.2)
    else:
        expected = {}
    assert res.assignment == expected
    assert sorted(res.new_objects + list(res.assignment)) == list(range(m))
    assert len(set(res.assignment.values())) == len(res.assignment)


def test_refresh_padding_matches_full_assembly():
    obs = make_obs(3, d_obj=2, seed=4)
    full = assemble_adjacency(obs, 4, None, d_box=4)
    partial = assemble_adjacency(obs.subset([0, 1]), 4, torch.Generator().manual_seed(0), d_box=4)
    refreshed = refresh_padding(partial, [2], obs, d_box=4)
    assert refreshed.slot_map == [0, 1, 2, None]
    assert refreshed.slot_index == [0, 1, 2, -1]
    # new row/column entries (4 off-diagonal + diagonal) equal a fresh build
    for s, t in [(2, 0), (2, 1), (0, 2), (1, 2), (2, 2)]:
        assert torch.equal(refreshed.data[s, t], full.data[s, t])
    assert torch.equal(refreshed.data[:2, :2], partial.data[:2, :2])
    # input is not modified
    assert partial.slot_map == [0, 1, None, None]


def test_refresh_padding_overflow():
    obs = make_obs(3, d_obj=2)
    adj = assemble_adjacency(obs.subset([0, 1]), 2, None, d_box=4)
    with pytest.raises(ValueError, match="exceed"):
        refresh_padding(adj, [2], obs, d_box=4)


def test_state_snapshot_round_trip():
    st_ = OnlineState(4, 6, 3, capacity=5, seed=9)
    st_.prev_clean = torch.randn(4, 4, 6)
    st_.has_prev = True
    st_.slot_ids[:2] = [7, 8]
    st_.memory.record(0, 2, (0.1, 0.2))
    st_.last_frame, st_.frames_seen, st_.next_identity = 2, 3, 9
    raw = st_.snapshot()
    back = OnlineState.restore(raw)
    assert back.snapshot() == raw
    assert back.slot_map == [7, 8, None, None]
    assert torch.equal(back.prev_clean, st_.prev_clean)
    assert torch.equal(torch.randn(3, generator=back.rng), torch.randn(3, generator=st_.rng))


def test_state_size_is_fixed():
    st_ = OnlineState(4, 6, 3, capacity=5)
    def payload():
        _, arrays = blobio.decode(st_.snapshot())
        return {k: (a.shape, a.nbytes) for k, a in arrays.items()}

    before = payload()
    for f in range(50):
        for s in range(4):
            st_.memory.record(s, f, (f * 0.01, s * 0.1))
    st_.frames_seen = 50
    assert payload() == before


def test_condition_is_zero_before_first_frame():
    st_ = OnlineState(3, 2, 2)
    st_.prev_clean = torch.ones(3, 3, 2)
    assert torch.equal(st_.condition(), torch.zeros(3, 3, 2))
    st_.has_prev = True
    assert torch.equal(st_.condition(), torch.ones(3, 3, 2))
