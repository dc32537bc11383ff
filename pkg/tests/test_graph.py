import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from helpers import make_gt, make_obs
from scenediff.graph import (
    FeatureToggles,
    assemble_adjacency,
    assemble_gt_adjacency,
    box_descriptor,
    box_to_feature,
    dump_tensor,
    feature_sources,
    load_tensor,
    pair_embedding,
    repad,
)
from scenediff.synthetic import union_box

D_BOX = 4
D_OBJ = 2  # D = 2 + 2 + 4 = 8


def test_box_feature_deterministic():
    assert np.array_equal(box_to_feature((0.1, 0.2, 0.3, 0.4)), box_to_feature((0.1, 0.2, 0.3, 0.4)))
    assert box_to_feature((0.1, 0.2, 0.3, 0.4)).shape == (32,)


def test_full_image_descriptor():
    np.testing.assert_array_equal(box_descriptor((0, 0, 1, 1)), [0, 0, 1, 1, 0.5, 0.5, 1, 1, 1])
    np.testing.assert_allclose(box_descriptor((0, 0, 640, 480), image_size=(640, 480)),
                               [0, 0, 1, 1, 0.5, 0.5, 1, 1, 1])


def test_area_change_touches_only_fed_components():
    # same centre, different size: by hand the descriptors are
    a = (0.4, 0.4, 0.2, 0.2)   # -> (0.4, 0.4, 0.6, 0.6, 0.5, 0.5, 0.2, 0.2, 0.04)
    b = (0.35, 0.35, 0.3, 0.3)  # -> (0.35, 0.35, 0.65, 0.65, 0.5, 0.5, 0.3, 0.3, 0.09)
    np.testing.assert_allclose(box_descriptor(a), [0.4, 0.4, 0.6, 0.6, 0.5, 0.5, 0.2, 0.2, 0.04])
    np.testing.assert_allclose(box_descriptor(b), [0.35, 0.35, 0.65, 0.65, 0.5, 0.5, 0.3, 0.3, 0.09])
    changed_desc = {0, 1, 2, 3, 6, 7, 8}
    diff = box_to_feature(a) != box_to_feature(b)
    fed = np.isin(feature_sources(), list(changed_desc))
    assert not diff[~fed].any()
    assert diff[fed].any()


def test_degenerate_box_rejected():
    with pytest.raises(ValueError):
        box_to_feature((0.1, 0.1, 0.0, 0.2))


def test_pair_embedding_contract():
    z = torch.zeros(3)
    assert torch.equal(pair_embedding(z, z, torch.zeros(2)), torch.zeros(8))
    fa, fb = torch.tensor([1.0, 0, 0]), torch.tensor([0, 1.0, 0])
    u, box = torch.ones(3), torch.ones(2)
    assert not torch.equal(pair_embedding(fa, u, box), pair_embedding(fb, u, box))
    with pytest.raises(ValueError):
        pair_embedding(z, z, torch.zeros(2), d_embed=9)


def hand_entry(obs, i, j):
    return np.concatenate([obs.object_features[i], obs.union_features[i, j],
                           box_to_feature(obs.boxes[i], d_box=D_BOX)])


def test_two_objects_hand_concatenation():
    obs = make_obs(2, d_obj=D_OBJ, seed=1)
    adj = assemble_adjacency(obs, 4, torch.Generator().manual_seed(0), d_box=D_BOX)
    assert adj.data.shape == (4, 4, 8)
    np.testing.assert_allclose(adj.data[0, 1].numpy(), hand_entry(obs, 0, 1), rtol=1e-6)
    np.testing.assert_allclose(adj.data[1, 0].numpy(), hand_entry(obs, 1, 0), rtol=1e-6)
    assert adj.valid_count == 2 and adj.slot_map == [0, 1, None, None]


def test_padding_moments():
    obs = make_obs(2, d_obj=D_OBJ, seed=1)
    g = torch.Generator().manual_seed(0)
    samples = torch.stack([assemble_adjacency(obs, 4, g, d_box=D_BOX).data[2:, :] for _ in range(10_000)])
    assert abs(samples.mean().item()) < 0.01
    assert abs(samples.var().item() - 1.0) < 0.01


def test_full_and_empty_frames():
    obs = make_obs(3, d_obj=D_OBJ)
    adj = assemble_adjacency(obs, 3, torch.Generator().manual_seed(0), d_box=D_BOX)
    assert adj.valid_count == 3 and None not in adj.slot_map
    empty = assemble_adjacency(make_obs(0, d_obj=D_OBJ), 3, torch.Generator().manual_seed(0), d_box=D_BOX)
    assert empty.valid_count == 0 and empty.data.shape == (3, 3, 8)
    with pytest.raises(ValueError, match="refusing to truncate"):
        assemble_adjacency(make_obs(4, d_obj=D_OBJ), 3, None, d_box=D_BOX)


@given(st.integers(0, 6), st.integers(0, 1000))
def test_shape_and_padding_isolation(n, seed):
    obs = make_obs(n, d_obj=D_OBJ, seed=seed)
    a = assemble_adjacency(obs, 6, torch.Generator().manual_seed(seed), d_box=D_BOX)
    b = assemble_adjacency(obs, 6, torch.Generator().manual_seed(seed + 1), d_box=D_BOX)
    assert a.data.shape == (6, 6, 8)
    assert torch.equal(a.data[:n, :n], b.data[:n, :n])
    assert torch.isfinite(a.data).all()


@given(st.integers(2, 5), st.integers(0, 1000))
def test_subject_asymmetry_and_permutation_equivariance(n, seed):
    obs = make_obs(n, d_obj=D_OBJ, seed=seed)
    adj = assemble_adjacency(obs, 5, None, d_box=D_BOX)
    for i in range(n):
        for j in range(n):
            if i != j:
                assert not torch.equal(adj.data[i, j], adj.data[j, i])
    perm = np.random.default_rng(seed).permutation(n)
    permuted = assemble_adjacency(obs.subset(perm), 5, None, d_box=D_BOX)
    p = torch.as_tensor(perm)
    assert torch.equal(permuted.data[:n, :n], adj.data[p[:, None], p[None, :]])


def test_feature_toggles_zero_components():
    obs = make_obs(3, d_obj=D_OBJ)
    adj = assemble_adjacency(obs, 3, None, d_box=D_BOX, toggles=FeatureToggles(union=False))
    assert torch.equal(adj.data[..., D_OBJ:2 * D_OBJ], torch.zeros(3, 3, D_OBJ))
    adj = assemble_adjacency(obs, 3, None, d_box=D_BOX, toggles=FeatureToggles(subject_location=False))
    assert torch.equal(adj.data[..., 2 * D_OBJ:], torch.zeros(3, 3, D_BOX))


def test_explicit_slots_and_identities():
    obs = make_obs(2, d_obj=D_OBJ)
    adj = assemble_adjacency(obs, 4, None, d_box=D_BOX, slots=[3, 1], identities=[10, 11])
    assert adj.slot_map == [None, 11, None, 10]
    assert adj.slot_index == [-1, 1, -1, 0]
    np.testing.assert_allclose(adj.data[3, 1].numpy(), hand_entry(obs, 0, 1), rtol=1e-6)
    with pytest.raises(ValueError):
        assemble_adjacency(obs, 4, None, d_box=D_BOX, slots=[1, 1])


def test_gt_tensor_single_triplet():
    obs = make_obs(3, d_obj=D_OBJ)
    adj = assemble_gt_adjacency(make_gt(obs, [(0, 2, 1)]), None, 4, None, d_box=D_BOX)
    off = ~torch.eye(3, dtype=torch.bool)
    nonzero = adj.data[:3, :3].abs().sum(-1) > 0
    assert (nonzero & off).nonzero().tolist() == [[0, 1]]
    # diagonal keeps the self-pair embedding
    assert nonzero.diagonal().all()


def test_gt_tensor_agrees_with_detector_on_related_pairs():
    for seed in range(20):
        obs = make_obs(4, d_obj=D_OBJ, seed=seed)
        rng = np.random.default_rng(seed)
        trips = {(int(s), 0, int(o)) for s, o in rng.integers(0, 4, size=(5, 2)) if s != o}
        gt_adj = assemble_gt_adjacency(make_gt(obs, sorted(trips)), None, 4, None, d_box=D_BOX)
        det_adj = assemble_adjacency(obs, 4, None, d_box=D_BOX)
        for s, _, o in trips:
            assert torch.equal(gt_adj.data[s, o], det_adj.data[s, o])
            np.testing.assert_allclose(gt_adj.data[s, o].numpy(), hand_entry(obs, s, o), rtol=1e-6)


def test_repad_resamples_only_padding():
    data = torch.ones(4, 4, 2)
    mask = torch.tensor([True, True, False, False])
    out = repad(data, mask, torch.Generator().manual_seed(0))
    assert torch.equal(out[:2, :2], data[:2, :2])
    assert not torch.equal(out[2:], data[2:])
    batched = repad(data.expand(3, 4, 4, 2), mask.expand(3, 4), torch.Generator().manual_seed(0))
    assert torch.equal(batched[:, :2, :2], torch.ones(3, 2, 2, 2))


def test_tensor_dump_round_trip(tmp_path):
    t = torch.randn(3, 4, 5)
    dump_tensor(t, tmp_path / "t.bin")
    assert torch.equal(load_tensor(tmp_path / "t.bin"), t)
    raw = (tmp_path / "t.bin").read_bytes()
    assert len(raw) == 4 + 4 + 3 * 4 + 3 * 4 * 5 * 4
    (tmp_path / "bad.bin").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_tensor(tmp_path / "bad.bin")


def test_union_features_follow_union_box():
    # the generator builds union features from the union box, so both orders share geometry
    a, b = (0.1, 0.1, 0.2, 0.2), (0.5, 0.6, 0.1, 0.1)
    assert union_box(a, b) == union_box(b, a)
