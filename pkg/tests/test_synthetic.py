import json
import os

import numpy as np
import pytest

from deepcount import synthetic as S


def files(root):
    out = {}
    for d, _, names in os.walk(root):
        for n in names:
            if n != "manifest.json":
                p = os.path.join(d, n)
                with open(p, "rb") as fh:
                    out[os.path.relpath(p, root)] = fh.read()
    return out


def test_dense_profile_head_range(tmp_path):
    names = S.gen_synthetic(tmp_path, 10, density_profile="dense", seed=1)
    assert len(names) == 10
    lo, hi = S.PROFILES["dense"]
    for n in names:
        with open(tmp_path / "annotations" / f"{n}.json") as fh:
            assert lo <= len(json.load(fh)["points"]) <= hi


def test_same_seed_gives_identical_files(tmp_path):
    S.gen_synthetic(tmp_path / "a", 4, seed=9)
    S.gen_synthetic(tmp_path / "b", 4, seed=9)
    S.gen_synthetic(tmp_path / "c", 4, seed=10)
    a, b, c = files(tmp_path / "a"), files(tmp_path / "b"), files(tmp_path / "c")
    assert a == b and a != c


def test_written_pyramids_conserve_counts(tmp_path):
    names = S.gen_synthetic(tmp_path, 6, seed=2)
    for n in names:
        with open(tmp_path / "annotations" / f"{n}.json") as fh:
            count = len(json.load(fh)["points"])
        levels = S.read_pyramid(str(tmp_path / "density" / n))
        assert len(levels) == 6  # 96x128 halves five times
        for lv in levels:
            # stored as float32, so the tolerance is single precision
            assert abs(lv.sum() - count) <= 1e-5 * max(count, 1)


def test_dataset_reload_matches_in_memory_samples(tmp_path):
    S.gen_synthetic(tmp_path, 3, seed=5)
    disk = S.load_dataset(tmp_path)
    mem = S.make_samples(3, seed=5)
    for a, b in zip(disk, mem):
        assert a.name == b.name and a.count == b.count
        assert np.array_equal(a.image, b.image)
        assert np.allclose(a.density, b.density, atol=1e-6)


def test_bad_arguments(tmp_path):
    with pytest.raises(ValueError):
        S.gen_synthetic(tmp_path, 0)
    with pytest.raises(ValueError, match="profile"):
        S.gen_synthetic(tmp_path, 1, density_profile="crowded")
    with pytest.raises(FileNotFoundError):
        S.load_dataset(tmp_path / "missing")
