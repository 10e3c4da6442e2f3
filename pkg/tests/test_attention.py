import numpy as np
import pytest

from attnloc.attention import patch_map, reasoning_indices
from attnloc.errors import IndexOutOfRange
from conftest import make_manifest, make_record


def test_patch_map_reshape():
    manifest = make_manifest(n_reasoning=1, n_answer=1, P=2)
    record = make_record(manifest)
    record.attn_to_patches[0] = np.array([0.1, 0.2, 0.3, 0.4], dtype=np.float32)
    grid = patch_map(record, manifest, 0).grid
    assert np.allclose(grid, [[0.1, 0.2], [0.3, 0.4]], atol=1e-7)


def test_patch_map_flatten_recovers_row(tiny_manifest, tiny_record):
    for r in range(tiny_manifest.n_output):
        grid = patch_map(tiny_record, tiny_manifest, r).grid
        assert np.array_equal(grid.ravel(), tiny_record.attn_to_patches[r].astype(np.float64))


def test_patch_map_out_of_range(tiny_manifest, tiny_record):
    with pytest.raises(IndexOutOfRange):
        patch_map(tiny_record, tiny_manifest, tiny_manifest.n_output)
    with pytest.raises(IndexOutOfRange):
        patch_map(tiny_record, tiny_manifest, -1)


def test_patch_map_all_zero_row(tiny_manifest, tiny_record):
    tiny_record.attn_to_patches[0] = 0
    assert patch_map(tiny_record, tiny_manifest, 0).grid.sum() == 0


def test_reasoning_indices_mixed():
    manifest = make_manifest(n_reasoning=2, n_answer=1)
    assert reasoning_indices(manifest) == [0, 1]


def test_reasoning_indices_answer_only():
    manifest = make_manifest(n_reasoning=0, n_answer=1, answer_text="<answer>Yes</answer>")
    assert reasoning_indices(manifest) == []


def test_reasoning_indices_all_reasoning():
    manifest = make_manifest(n_reasoning=5, n_answer=0)
    assert reasoning_indices(manifest) == [0, 1, 2, 3, 4]
