import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from unlearn_recon.datasets import FeatureScaling
from unlearn_recon.evaluation import (DOMINANCE_THRESHOLDS, SimilarityRecord, build_cdf, cdf_to_csv,
                                      cosine_similarity, dominance_check, emit_report,
                                      fraction_at_least, montage_grid, read_cdf_csv, read_pnm,
                                      read_records, to_bytes_image, write_pnm)

vectors = arrays(np.float64, 6, elements=st.floats(-10, 10))


def test_cosine_examples():
    x = np.array([0.3, -1.2, 2.0])
    assert cosine_similarity(x, x) == 1.0
    assert cosine_similarity(x, -x) == -1.0
    assert cosine_similarity([1, 0], [0, 1]) == 0.0


def test_cosine_degenerate_and_mismatch():
    assert cosine_similarity(np.zeros(3), np.ones(3), return_flag=True) == (0.0, True)
    with pytest.raises(ValueError):
        cosine_similarity(np.ones(3), np.ones(4))


@settings(max_examples=100, deadline=None)
@given(a=vectors, b=vectors, s=st.floats(1e-3, 1e3))
def test_cosine_symmetric_and_scale_invariant(a, b, s):
    c = cosine_similarity(a, b)
    assert -1.0 <= c <= 1.0
    assert c == cosine_similarity(b, a)
    if np.linalg.norm(a) > 1e-6 and np.linalg.norm(b) > 1e-6:
        assert cosine_similarity(s * a, b) == pytest.approx(c, abs=1e-12)


def test_cdf_examples():
    c = build_cdf([0.5])
    assert c.values.tolist() == [0.5] and c.fractions.tolist() == [1.0]
    c = build_cdf([1.0, 1.0, 1.0])
    assert c.values.tolist() == [1.0] and c.fractions.tolist() == [1.0]
    with pytest.raises(ValueError):
        build_cdf([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from([-0.5, 0.0, 0.25, 0.9, 0.99, 1.0]) | st.floats(-1, 1), min_size=1, max_size=60))
def test_cdf_matches_sort_and_count(vals):
    c = build_cdf(vals)
    n = len(vals)
    assert c.values.tolist() == sorted(set(vals))
    for v, f in zip(c.values, c.fractions):
        assert f == sum(x <= v for x in vals) / n
    assert np.all(np.diff(c.fractions) > 0) and c.fractions[-1] == 1.0


def test_dominance_examples():
    a = build_cdf([0.3, 0.9, 0.95])
    assert dominance_check(a, a, 0.9)
    ones, zeros = build_cdf([1.0] * 5), build_cdf([0.0] * 5)
    assert all(dominance_check(ones, zeros, t) for t in np.linspace(0.01, 0.99, 20))
    assert not dominance_check(zeros, ones, 0.5)


def test_dominance_matches_counting():
    rng = np.random.default_rng(0)
    for _ in range(50):
        va, vb = rng.uniform(-1, 1, 40), rng.uniform(-1, 1, 40)
        for tau in DOMINANCE_THRESHOLDS:
            expected = np.sum(va <= tau) <= np.sum(vb <= tau)
            assert dominance_check(build_cdf(va), build_cdf(vb), tau) == expected


def _records(methods=("hrec", "avg"), n=5, seed=0):
    rng = np.random.default_rng(seed)
    return [SimilarityRecord(i, m, float(rng.uniform(-1, 1)), true_label=i % 3, flags=[])
            for i in range(n) for m in methods]


def test_fraction_at_least():
    recs = [SimilarityRecord(i, "m", c) for i, c in enumerate([0.5, 0.9, 0.95, 1.0])]
    assert fraction_at_least(recs, 0.9) == 0.75


def test_record_json_round_trip():
    r = SimilarityRecord(3, "hrec", 0.5, 2, 1, False, -0.25, None, 0.9, ["x"])
    back = SimilarityRecord.from_json(r.to_json())
    assert back == r
    assert list(json.loads(r.to_json())) == sorted(json.loads(r.to_json()))


def test_emit_report_files_and_round_trip(tmp_path):
    recs = _records()
    curves = emit_report(recs, tmp_path, "abc123", ("hrec", "avg"), "t")
    assert sorted(p.name for p in tmp_path.iterdir()) == ["cdf.svg", "cdf_avg.csv", "cdf_hrec.csv", "records.jsonl"]
    for m, c in curves.items():
        assert read_cdf_csv(tmp_path / f"cdf_{m}.csv", m).equals(c)
    root = ET.parse(tmp_path / "cdf.svg").getroot()
    assert root.tag.endswith("svg")
    assert "abc123" in (tmp_path / "cdf.svg").read_text()
    assert len(root.findall("{http://www.w3.org/2000/svg}polyline")) == 2
    back = read_records(tmp_path / "records.jsonl")
    assert [(r.index, r.method) for r in back] == [(i, m) for i in range(5) for m in ("hrec", "avg")]
    assert all(r.config_digest == "abc123" for r in back)


def test_emit_report_is_byte_stable(tmp_path):
    recs = _records(seed=4)
    emit_report(recs, tmp_path / "a", "d", ("hrec", "avg"))
    emit_report(list(reversed(recs)), tmp_path / "b", "d", ("hrec", "avg"))
    for name in ("records.jsonl", "cdf_hrec.csv", "cdf_avg.csv", "cdf.svg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_emit_report_errors_leave_nothing(tmp_path):
    with pytest.raises(ValueError):
        emit_report([], tmp_path, "d", ())
    with pytest.raises(ValueError):
        emit_report(_records(("hrec",)), tmp_path, "d", ("hrec", "avg"))
    recs = _records(("hrec",))
    with pytest.raises(ValueError):
        emit_report(recs + recs[:1], tmp_path, "d", ("hrec",))
    assert list(tmp_path.iterdir()) == []


def test_csv_has_17_significant_digits():
    text = cdf_to_csv(build_cdf([1 / 3, 2 / 3]))
    assert text.splitlines()[0] == "similarity,fraction"
    assert text.splitlines()[1].split(",")[0] == format(1 / 3, ".17g")


def test_byte_image_round_trip():
    raw = np.arange(256, dtype=float)
    s = FeatureScaling(np.zeros(256), np.full(256, 255.0))
    assert np.array_equal(to_bytes_image(s.apply(raw), s), raw.astype(np.uint8))


def test_montage_and_pnm(tmp_path):
    tile = np.full(6, 200, dtype=np.uint8)
    grid = montage_grid([[tile, None], [tile, tile]], (2, 3, 1), pad=1)
    assert grid.shape == (2 * 3 + 1, 2 * 4 + 1, 1)
    write_pnm(grid[:, :, 0], tmp_path / "g.pgm", "config abc")
    assert (tmp_path / "g.pgm").read_bytes().startswith(b"P5\n# config abc\n")
    np.testing.assert_array_equal(read_pnm(tmp_path / "g.pgm"), grid[:, :, 0])
    rgb = np.random.default_rng(0).integers(0, 256, (3, 4, 3), dtype=np.uint8)
    write_pnm(rgb, tmp_path / "c.ppm")
    np.testing.assert_array_equal(read_pnm(tmp_path / "c.ppm"), rgb)
