import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from mose_pipeline.data_io import (
    DatasetError,
    VideoSample,
    load_mask,
    load_video,
    mask_to_binary_stack,
    save_mask,
    scan_dataset,
)

from conftest import make_dataset


def frame(h=16, w=16, value=0.5):
    return np.full((h, w, 3), value, dtype=np.float32)


def test_scan_counts_and_order(tmp_path):
    m = np.zeros((16, 16), np.int32)
    m[2:5, 2:5] = 1
    make_dataset(tmp_path, {
        "b_video": [(frame(), m)] + [(frame(), None)] * 6,
        "a_video": [(frame(), m)] + [(frame(), None)] * 4,
    })
    index = scan_dataset(tmp_path)
    assert [s.video for s in index.sequences] == ["a_video", "b_video"]
    assert [s.n_frames for s in index.sequences] == [5, 7]


def test_scan_is_deterministic(tmp_path):
    m = np.ones((16, 16), np.int32)
    make_dataset(tmp_path, {"v1": [(frame(), m)], "v2": [(frame(), m)] * 2})
    assert scan_dataset(tmp_path) == scan_dataset(tmp_path)


def test_scan_empty_root(tmp_path):
    (tmp_path / "JPEGImages").mkdir()
    with pytest.raises(DatasetError, match="no sequences found"):
        scan_dataset(tmp_path)


def test_scan_missing_root(tmp_path):
    with pytest.raises(FileNotFoundError):
        scan_dataset(tmp_path / "nope")


def test_scan_preserves_object_ids(tmp_path):
    m = np.zeros((16, 16), np.int32)
    m[:4, :4] = 1
    m[8:, 8:] = 3
    make_dataset(tmp_path, {"v": [(frame(), m)]})
    (seq,) = scan_dataset(tmp_path).sequences
    # oracle: distinct nonzero labels of the fixture
    expected = sorted(set(np.unique(m)) - {0})
    assert seq.n_objects == len(expected) == 2
    assert list(seq.object_ids) == expected == [1, 3]


def test_scan_flags_unannotated_video(tmp_path):
    make_dataset(tmp_path, {"v": [(frame(), None), (frame(), None)]})
    (seq,) = scan_dataset(tmp_path).sequences
    assert seq.flagged and seq.n_objects == 0


def test_load_all_zero_mask(tmp_path):
    save_mask(np.zeros((8, 9), np.int32), tmp_path / "m.png")
    m = load_mask(tmp_path / "m.png")
    assert m.shape == (8, 9) and not m.any()


def test_load_mask_reads_raw_indices(tmp_path):
    labels = np.array([[0, 1, 2], [2, 1, 0]], dtype=np.uint8)
    img = Image.fromarray(labels, mode="P")
    # a deliberately odd palette must not affect semantics
    img.putpalette([255, 255, 255] * 256)
    img.save(tmp_path / "m.png")
    np.testing.assert_array_equal(load_mask(tmp_path / "m.png"), labels)


def test_load_rgb_rejected(tmp_path):
    Image.fromarray(np.zeros((4, 4, 3), np.uint8), mode="RGB").save(tmp_path / "rgb.png")
    with pytest.raises(DatasetError, match="indexed palette required"):
        load_mask(tmp_path / "rgb.png")


def test_load_corrupt_rejected(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"not a png at all")
    with pytest.raises(DatasetError):
        load_mask(tmp_path / "bad.png")


def test_save_label_255_and_256(tmp_path):
    m = np.zeros((4, 4), np.int32)
    m[0, 0] = 255
    save_mask(m, tmp_path / "ok.png")
    np.testing.assert_array_equal(load_mask(tmp_path / "ok.png"), m)
    m[0, 0] = 256
    with pytest.raises(DatasetError, match="label exceeds 8-bit index range"):
        save_mask(m, tmp_path / "bad.png")


def test_save_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        save_mask(np.zeros((2, 2), np.int32), blocker / "m.png")


@settings(max_examples=30, deadline=None)
@given(arrays(np.int32, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.integers(0, 255)))
def test_mask_round_trip(tmp_path_factory, m):
    path = tmp_path_factory.mktemp("rt") / "m.png"
    save_mask(m, path)
    np.testing.assert_array_equal(load_mask(path), m)


def test_binary_stack_background_only():
    stack = mask_to_binary_stack(np.zeros((4, 4), np.int32), [1])
    assert stack.shape == (1, 4, 4) and not stack.any()


def test_binary_stack_half_planes():
    m = np.zeros((4, 6), np.int32)
    m[:, :3] = 1
    m[:, 3:] = 2
    stack = mask_to_binary_stack(m, [1, 2])
    np.testing.assert_array_equal(stack[0], (np.arange(6) < 3)[None].repeat(4, 0))
    np.testing.assert_array_equal(stack[0] + stack[1], np.ones((4, 6)))


def test_binary_stack_unknown_label():
    with pytest.raises(DatasetError, match="unknown label 7"):
        mask_to_binary_stack(np.full((2, 2), 7), [1])


@settings(max_examples=50, deadline=None)
@given(arrays(np.int32, (10, 10), elements=st.integers(0, 4)))
def test_binary_stack_disjoint_and_covering(m):
    stack = mask_to_binary_stack(m, [1, 2, 3, 4])
    total = stack.sum(0)
    assert total.max() <= 1
    np.testing.assert_array_equal(total > 0, m > 0)


def test_load_video_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    m = np.zeros((16, 16), np.int32)
    m[3:9, 3:9] = 2
    f = rng.random((16, 16, 3)).astype(np.float32)
    make_dataset(tmp_path, {"v": [(f, m), (f, None)]})
    v = load_video(tmp_path, "v")
    assert v.object_ids == [2]
    assert v.masks[1] is None
    assert v.frames[0].min() >= 0 and v.frames[0].max() <= 1


def test_video_sample_rejects_foreign_labels():
    with pytest.raises(DatasetError):
        VideoSample("v", [frame()], [np.full((16, 16), 5)], object_ids=[1])
