import json

import numpy as np
import pytest

from midline import geometry, phantom
from midline.losses import check_delta_connectivity
from midline.phantom import PhantomSpec


@pytest.fixture(scope="module")
def samples():
    return phantom.generate(PhantomSpec(seed=3), 12)


def test_spec_validation():
    with pytest.raises(ValueError):
        PhantomSpec(amplitude=30.0)                    # > W/4
    with pytest.raises(ValueError):
        PhantomSpec(limits=(100, 50))
    with pytest.raises(ValueError):
        PhantomSpec(band_half_width=0)
    with pytest.raises(ValueError):
        PhantomSpec(amplitude=20.0, bump_width=10.0)   # too steep for 1-connectivity


def test_flat_midline_without_bump_or_pose():
    spec = PhantomSpec(amplitude=0.0, max_shift=(0.0, 0.0), max_rotation=0.0)
    for s in phantom.generate(spec, 4):
        rows = s.limits == 1
        np.testing.assert_array_equal(s.coords[rows], 96 / 2)
        np.testing.assert_array_equal(s.source, s.aligned)


def test_bump_peak_amplitude():
    spec = PhantomSpec(amplitude=10.0, bump_width=30.0, amplitude_jitter=0.0, center_jitter=0.0)
    for s in phantom.generate(spec, 6):
        assert abs(np.max(np.abs(s.coords - 48.0)) - 10.0) <= 0.5


def test_ground_truth_is_one_connected():
    for seed in range(5):
        for s in phantom.generate(PhantomSpec(seed=seed, amplitude=17.0, bump_width=28.0), 20):
            assert check_delta_connectivity(s.coords[s.limits == 1], 1.0)


def test_band_is_dilated_midline(samples):
    for s in samples:
        present = np.flatnonzero(s.limits)
        np.testing.assert_array_equal(s.band.sum(axis=1)[present], 2 * 2 + 1)
        assert s.band[s.limits == 0].sum() == 0
        for y in present:
            cols = np.flatnonzero(s.band[y])
            assert cols[0] == s.coords[y] - 2 and cols[-1] == s.coords[y] + 2


def test_images_in_unit_range(samples):
    for s in samples:
        for img in (s.source, s.aligned):
            assert img.shape == (128, 96)
            assert img.min() >= 0.0 and img.max() <= 1.0


def test_deterministic_per_index():
    spec = PhantomSpec(seed=9)
    a = phantom.generate(spec, 5)
    b = phantom.generate(spec, 3, start=2)
    for x, y in zip(a[2:], b):
        assert x.source.tobytes() == y.source.tobytes()
        assert x.coords.tobytes() == y.coords.tobytes()
        assert x.pose == y.pose
    c = phantom.generate(PhantomSpec(seed=10), 1)[0]
    assert c.source.tobytes() != a[0].source.tobytes()


def test_source_is_warped_aligned(samples):
    for s in samples[:3]:
        np.testing.assert_array_equal(s.source, geometry.warp_rigid(s.aligned, s.pose))


def test_labels_follow_the_warp():
    """Re-render the midline alone, warp it, and compare with the transported labels."""
    spec = PhantomSpec(seed=4)
    for s in phantom.generate(spec, 8):
        h, w = spec.extent
        xs = np.arange(w)[None, :]
        line = np.exp(-((xs - s.coords[:, None]) ** 2) / (2 * 0.8 ** 2)) * (s.limits[:, None] > 0)
        warped = geometry.warp_rigid(line, s.pose)
        coords, limits = s.source_labels()
        rows = np.flatnonzero(limits)[3:-3]
        assert rows.size > 40
        for y in rows:
            lo, hi = int(max(coords[y] - 5, 0)), int(min(coords[y] + 6, w))
            seg = warped[y, lo:hi]
            centroid = (seg * np.arange(lo, hi)).sum() / seg.sum()
            assert abs(centroid - coords[y]) < 0.5


def test_rectifying_pose_recovers_canonical(samples):
    for s in samples[:3]:
        back = geometry.warp_rigid(s.source, s.rectifying_pose)
        err = np.abs(back - s.aligned)[20:-20, 20:-20]
        assert err.mean() < 0.03


def test_landmarks_fit_rectifying_pose(samples):
    for s in samples:
        p1, p2 = s.landmarks()
        fit = geometry.pose_from_landmarks(geometry.LandmarkPair(p1, p2), s.source.shape)
        landed = geometry.map_points(np.array([p1, p2]), fit, s.source.shape)
        np.testing.assert_allclose(landed[:, 0], 48.0, atol=1e-9)


def test_manifest_round_trip(tmp_path, samples):
    path = phantom.save_manifest(samples[:5], tmp_path / "ds")
    back = phantom.load_manifest(path)
    assert len(back) == 5
    for a, b in zip(samples[:5], back):
        assert a.sample_id == b.sample_id
        assert a.pose == b.pose
        np.testing.assert_array_equal(a.coords, b.coords)
        np.testing.assert_array_equal(a.limits, b.limits)
        np.testing.assert_array_equal(a.band, b.band)
        assert np.abs(a.source - b.source).max() <= 0.5 / 65535 + 1e-12
        assert np.abs(a.aligned - b.aligned).max() <= 0.5 / 65535 + 1e-12


def test_manifest_empty(tmp_path):
    path = phantom.save_manifest([], tmp_path / "empty")
    assert path.read_text() == ""
    assert phantom.load_manifest(path) == []


def test_manifest_truncated_line_names_line_3(tmp_path, samples):
    path = phantom.save_manifest(samples[:4], tmp_path / "bad")
    lines = path.read_text().splitlines()
    lines[2] = lines[2][: len(lines[2]) // 2]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(phantom.ManifestError, match="line 3"):
        phantom.load_manifest(path)


def test_manifest_missing_image_names_path(tmp_path, samples):
    path = phantom.save_manifest(samples[:2], tmp_path / "miss")
    rec = json.loads(path.read_text().splitlines()[1])
    (tmp_path / "miss" / rec["source"]).unlink()
    with pytest.raises(phantom.ManifestError, match=rec["source"].split("/")[-1]):
        phantom.load_manifest(path)


def test_faint_run_changes_only_fissure_rows():
    plain = phantom.generate(PhantomSpec(seed=8, noise_sigma=0.0), 6)
    faint = phantom.generate(PhantomSpec(seed=8, noise_sigma=0.0, faint_prob=1.0,
                                         faint_rows=(10, 10)), 6)
    for a, b in zip(plain, faint):
        np.testing.assert_array_equal(a.coords, b.coords)
        np.testing.assert_array_equal(a.band, b.band)
        assert a.pose == b.pose
        rows = np.flatnonzero(np.any(a.aligned != b.aligned, axis=1))
        assert rows.size == 10 and np.all(np.diff(rows) == 1)
        assert np.all(a.limits[rows] == 1)
        # the fissure is lighter (less dark) inside the run
        y = rows[5]
        x = int(round(a.coords[y]))
        assert b.aligned[y, x] > a.aligned[y, x]


def test_faint_prob_zero_keeps_default_stream():
    a = phantom.generate(PhantomSpec(seed=2), 3)
    b = phantom.generate(PhantomSpec(seed=2, faint_prob=0.0, faint_rows=(3, 5)), 3)
    for x, y in zip(a, b):
        assert x.source.tobytes() == y.source.tobytes()


def test_faint_validation():
    with pytest.raises(ValueError):
        PhantomSpec(faint_prob=1.5)
    with pytest.raises(ValueError):
        PhantomSpec(faint_rows=(12, 4))
