import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from mose_pipeline.data_io import VideoSample, load_mask, mask_to_binary_stack
from mose_pipeline.infer import (
    InferConfig,
    InferenceSession,
    branch_plan,
    fuse_tta,
    infer_dataset,
    mirror_stack,
    mirror_video,
    probs_to_mask,
    propagate,
    propagate_probs,
    rescale_video,
    rescaled_size,
    run_flip_branch,
    run_tta,
    soft_aggregate,
)
from mose_pipeline.memory import MemoryConfig
from mose_pipeline.network import NetConfig, VOSModel

from conftest import make_dataset

TINY = NetConfig(n_blocks=1, n_queries=4, key_dim=4, value_dim=6, model_dim=8, hidden_dim=4, heads=2,
                 query_dims=(2, 3, 4, 5), mask_dims=(2, 2, 3, 3))


@pytest.fixture
def tiny():
    torch.manual_seed(0)
    return VOSModel(TINY).eval()


def small_video(n=3, h=32, w=32, seed=0):
    rng = np.random.default_rng(seed)
    frames = [rng.random((h, w, 3)).astype(np.float32) for _ in range(n)]
    m = np.zeros((h, w), np.int32)
    m[4:14, 3:12] = 1
    m[18:28, 20:30] = 2
    return VideoSample("v", frames, [m] + [None] * (n - 1))


# soft aggregation ----------------------------------------------------------

def test_aggregate_examples():
    one = soft_aggregate(np.ones((1, 2, 2)))
    np.testing.assert_allclose(one[0], 0)
    np.testing.assert_allclose(one[1], 1)
    zero = soft_aggregate(np.zeros((3, 2, 2)))
    np.testing.assert_allclose(zero[0], 1)
    np.testing.assert_allclose(zero[1:], 0)
    half = soft_aggregate(np.full((2, 1, 1), 0.5))
    np.testing.assert_allclose(half[:, 0, 0], [0.2, 0.4, 0.4])


def test_aggregate_rejects_out_of_range():
    with pytest.raises(ValueError):
        soft_aggregate(np.full((1, 2, 2), 1.5))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(0, 1)))
def test_aggregate_sums_to_one(p):
    out = soft_aggregate(p)
    np.testing.assert_allclose(out.sum(0), 1, atol=1e-5)
    assert out.min() >= 0 and out.max() <= 1
    # oracle: direct formula, pixel by pixel
    k, h, w = p.shape
    for y in range(h):
        for x in range(w):
            b = np.prod([1 - p[i, y, x] for i in range(k)])
            denom = b + sum(p[i, y, x] for i in range(k))
            np.testing.assert_allclose(out[:, y, x], np.array([b] + list(p[:, y, x])) / denom)


def test_argmax_ties():
    stack = np.array([[[0.4]], [[0.4]], [[0.2]]])
    assert probs_to_mask(stack, [5, 7])[0, 0] == 0
    stack = np.array([[[0.2]], [[0.4]], [[0.4]]])
    assert probs_to_mask(stack, [5, 7])[0, 0] == 5


# flip ----------------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 3), st.integers(1, 8), st.integers(1, 8)),
              elements=st.floats(0, 1, width=32)))
def test_mirror_involution(stack):
    np.testing.assert_array_equal(mirror_stack(mirror_stack(stack)), stack)


def test_mirror_moves_left_object_right():
    m = np.zeros((8, 8), np.int32)
    m[:, :3] = 1
    v = VideoSample("v", [np.zeros((8, 8, 3), np.float32)], [m])
    flipped = mirror_video(v)
    assert flipped.masks[0][:, 5:].all() and not flipped.masks[0][:, :5].any()


def symmetric_runner(video):
    """Flip-equivariant mock: smooth the first mask with a symmetric filter."""
    stack = mask_to_binary_stack(video.masks[0], video.object_ids).astype(np.float64)
    smooth = np.stack([ndimage.uniform_filter(s, 3, mode="reflect") for s in stack])
    return [soft_aggregate(smooth)] * len(video)


def test_flip_branch_with_symmetric_mock():
    v = small_video()
    direct = symmetric_runner(v)
    flipped = run_flip_branch(v, InferConfig(), runner=symmetric_runner)
    for a, b in zip(direct, flipped):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_flip_branch_real_model_shapes(tiny):
    v = small_video()
    out = run_flip_branch(v, InferConfig(memory=MemoryConfig(t_max=4)), weights=tiny)
    assert len(out) == 3 and out[0].shape == (3, 32, 32)
    # frame 0 is the given mask regardless of the branch
    np.testing.assert_array_equal(probs_to_mask(out[0], v.object_ids), v.masks[0])


# fusion --------------------------------------------------------------------

def const_branch(values, n=2, size=(4, 4)):
    stack = np.stack([np.full(size, v) for v in values])
    return [stack] * n


def test_fuse_single_branch_identity():
    b = [soft_aggregate(np.random.default_rng(0).random((2, 4, 5)))]
    np.testing.assert_allclose(fuse_tta([b], (4, 5))[0], b[0], atol=1e-6)


def test_fuse_mean_before_renormalization():
    a = const_branch([0.8, 0.2])
    b = const_branch([0.6, 0.4])
    raw = fuse_tta([a, b], (4, 4), renormalize=False)
    np.testing.assert_allclose(raw[0][1], 0.3, atol=1e-7)
    np.testing.assert_allclose(raw[0][0], 0.7, atol=1e-7)


def test_fuse_resizes_to_original():
    small = const_branch([0.5, 0.5], size=(2, 2))
    out = fuse_tta([small, const_branch([0.5, 0.5])], (4, 4))
    assert out[0].shape == (2, 4, 4)
    np.testing.assert_allclose(out[0], 0.5, atol=1e-6)


def test_fuse_frame_count_mismatch():
    with pytest.raises(ValueError, match="frame counts"):
        fuse_tta([const_branch([1.0], n=2), const_branch([1.0], n=3)], (4, 4))
    with pytest.raises(ValueError):
        fuse_tta([], (4, 4))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 4))
def test_fuse_idempotent_and_permutation_invariant(seed, n_branches):
    rng = np.random.default_rng(seed)
    branches = [[soft_aggregate(rng.random((2, 5, 6))) for _ in range(2)] for _ in range(n_branches)]
    once = fuse_tta(branches, (5, 6))
    twice = fuse_tta([once, once], (5, 6))
    for a, b in zip(once, twice):
        np.testing.assert_allclose(a, b, atol=1e-6)
        np.testing.assert_allclose(a.sum(0), 1, atol=1e-5)
    perm = fuse_tta(branches[::-1], (5, 6))
    for a, b in zip(once, perm):
        np.testing.assert_allclose(a, b, atol=1e-6)


# rescaling -----------------------------------------------------------------

@pytest.mark.parametrize("h,w,target,expected", [
    (720, 1280, 600, (600, 1066)),
    (1280, 720, 600, (1066, 600)),
    (480, 854, 600, (480, 854)),
    (720, 1280, 720, (720, 1280)),
    (1080, 1920, 800, (800, 1422)),
])
def test_rescaled_size(h, w, target, expected):
    assert rescaled_size(h, w, target) == expected


def test_rescale_video_preserves_labels():
    v = small_video(n=2, h=40, w=60)
    out = rescale_video(v, 20)
    assert out.size == (20, 30)
    assert set(np.unique(out.masks[0])) <= set(np.unique(v.masks[0]))
    assert out.frames[0].min() >= 0 and out.frames[0].max() <= 1
    assert rescale_video(v, 100) is v
    with pytest.raises(ValueError):
        rescale_video(v, 0)


def test_infer_config_validation():
    with pytest.raises(ValueError):
        InferConfig(scales=())
    with pytest.raises(ValueError):
        InferConfig(scales=(600, -1))
    assert len(branch_plan(InferConfig())) == 6


# propagation ---------------------------------------------------------------

def test_propagate_single_frame(tiny):
    v = small_video(n=1)
    out = propagate(v, InferConfig(), tiny)
    assert len(out) == 1
    np.testing.assert_array_equal(out[0], v.masks[0])


def test_propagate_missing_first_mask(tiny):
    v = small_video(n=2)
    bad = VideoSample("v", v.frames, [None, v.masks[0]])
    with pytest.raises(ValueError, match="first-frame mask"):
        propagate(bad, InferConfig(), tiny)


def test_propagate_outputs(tiny):
    v = small_video(n=4)
    probs = propagate_probs(v, tiny, MemoryConfig(t_max=3))
    assert len(probs) == 4
    for p in probs:
        assert p.shape == (3, 32, 32)
        np.testing.assert_allclose(p.sum(0), 1, atol=1e-5)
    masks = propagate(v, InferConfig(memory=MemoryConfig(t_max=3)), tiny)
    assert all(set(np.unique(m)) <= {0, 1, 2} for m in masks)


def test_propagate_ingests_late_object(tiny):
    v = small_video(n=3)
    late = v.masks[0].copy()
    late[late == 2] = 0
    m2 = np.zeros_like(late)
    m2[18:28, 20:30] = 2
    video = VideoSample("v", v.frames, [late, m2, None], object_ids=[1, 2])
    probs = propagate_probs(video, tiny, MemoryConfig())
    # object 2 has no mass before its first annotation and is pinned to it there
    assert probs[0][2].max() == 0
    assert (probs[1][2][m2 == 2] == 1).all()


def test_memory_size_and_causality(tiny):
    rng = np.random.default_rng(3)
    v = small_video(n=1, h=16, w=16)
    session = InferenceSession(tiny, MemoryConfig(t_max=18, interval=1))
    with torch.no_grad():
        gt = torch.from_numpy(mask_to_binary_stack(v.masks[0], [1]).astype(np.float32))
        session.start(torch.from_numpy(v.frames[0].transpose(2, 0, 1).copy()), gt[:, :16, :16])
        for _ in range(29):
            session.step(torch.rand(3, 16, 16, generator=torch.Generator().manual_seed(int(rng.integers(1 << 30)))))
    assert len(session.pixel) == 18
    assert 0 in session.pixel.frame_indices
    assert len(session.pixel.audit) == 29
    for query_index, stored in session.pixel.audit:
        assert max(stored) < query_index


def test_tta_deterministic_and_normalized(tiny):
    v = small_video(n=2)
    cfg = InferConfig(scales=(16, 32), flip=True, memory=MemoryConfig(t_max=4))
    a = run_tta(v, cfg, tiny)
    b = run_tta(v, cfg, tiny, jobs=2)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
        np.testing.assert_allclose(x.sum(0), 1, atol=1e-5)


def test_infer_dataset_writes_tree(tmp_path, tiny):
    v = small_video(n=3)
    make_dataset(tmp_path / "data", {"v": [(f, m) for f, m in zip(v.frames, v.masks)]})
    cfg = InferConfig(scales=(32,), flip=False, memory=MemoryConfig(t_max=4))
    done = infer_dataset(tmp_path / "data", tiny, cfg, tmp_path / "out", dump_probs=True)
    assert done == ["v"]
    pngs = sorted((tmp_path / "out" / "v").glob("*.png"))
    assert len(pngs) == 3
    np.testing.assert_array_equal(load_mask(pngs[0]), v.masks[0])
    stack = np.load(pngs[1].with_suffix(".npy"))
    assert stack.dtype == np.float32 and stack.shape == (3, 32, 32)
