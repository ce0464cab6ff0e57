import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cardio_anomaly.benchmark import make_record
from cardio_anomaly.errors import ContractError
from cardio_anomaly.model import ModelConfig, RestorationModel
from cardio_anomaly.scoring import (ScoreMap, UnsegmentedRecordWarning, assemble, assemble_many, binarize,
                                    localization_threshold, read_csv, score_global, score_local,
                                    top_decile_enrichment, write_csv, write_svg)
from cardio_anomaly.signal import EcgRecord, prepare_record

SMALL = ModelConfig(embed_dim=8, enc_channels=(4, 8), dec_channels=(8, 4), kernel=5, cls_channels=8,
                    cls_depth=1, attr_hidden=8)


@pytest.fixture(scope="module")
def model():
    return RestorationModel(SMALL)


@pytest.fixture(scope="module")
def records():
    return [prepare_record(make_record(s, kinds)) for s, kinds in ((1, ()), (2, ("st_shift",)))]


def test_global_hand_values():
    np.testing.assert_array_equal(score_global([1, 0], [0, 0], [1, 1], [1, 0]), [1, 0])
    x = np.random.default_rng(0).normal(size=9)
    assert not score_global(x, x, np.ones(9), x).any()
    xh, s = np.zeros(9), np.full(9, 0.7)
    np.testing.assert_allclose(score_global(x, xh, 3 * s), score_global(x, xh, s) / 3, rtol=1e-15)
    with pytest.raises(ContractError):
        score_global([1.0], [0.0], [0.0])


def test_local_cases():
    assert not score_local([], 20).any()
    one = score_local([(np.ones(5), np.zeros(5), np.ones(5), 0)], 20)
    np.testing.assert_array_equal(one, [1] * 5 + [0] * 15)
    a = (np.ones(6), np.zeros(6), np.full(6, 0.5), 2)
    b = (np.full(6, 3.0), np.zeros(6), np.ones(6), 5)
    both = score_local([a, b], 20)
    np.testing.assert_allclose(both, score_local([a], 20) + score_local([b], 20))
    assert both[6] == 2.0 + 9.0
    with pytest.raises(ContractError):
        score_local([(np.ones(5), np.zeros(5), np.ones(5), 20)], 20)


def test_local_edge_window_is_clipped():
    out = score_local([(np.ones(6), np.zeros(6), np.ones(6), -2)], 10)
    np.testing.assert_array_equal(out, [1] * 4 + [0] * 6)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_local_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    beats = [(rng.normal(size=8), rng.normal(size=8), rng.uniform(0.1, 2, 8), int(rng.integers(-4, 40)))
             for _ in range(5)]
    perm = [beats[i] for i in rng.permutation(5)]
    np.testing.assert_allclose(score_local(beats, 40), score_local(perm, 40), rtol=1e-12, atol=0)


def test_assembled_map_structure(model, records):
    for rec in records:
        m = assemble(rec, model)
        assert np.array_equal(m.values, m.global_part + m.local_part)
        assert m.values.min() >= 0
        assert m.anomaly_score == np.mean(m.values)
        assert m.beat_count == len(rec.beats) > 0


def test_assemble_is_deterministic(model, records):
    a, b = assemble(records[0], model), assemble(records[0], model)
    assert a.values.tobytes() == b.values.tobytes()
    par = assemble_many(records, model, jobs=2)
    assert [m.values.tobytes() for m in par] == [assemble(r, model).values.tobytes() for r in records]


def test_beat_order_does_not_matter(model, records):
    rec = records[0]
    from dataclasses import replace
    shuffled = replace(rec, beats=tuple(reversed(rec.beats)))
    a, b = assemble(rec, model), assemble(shuffled, model)
    np.testing.assert_allclose(a.local_part, b.local_part, rtol=1e-12, atol=1e-12)
    # the global pass reads only the global signal
    np.testing.assert_allclose(a.global_part, b.global_part, rtol=1e-12, atol=1e-12)


def test_unsegmented_record_warns(model):
    flat = prepare_record(EcgRecord("flat", np.zeros(5000), 500.0))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        m = assemble(flat, model)
    assert m.unsegmented and not m.local_part.any()
    assert any(issubclass(w.category, UnsegmentedRecordWarning) for w in caught)


def test_binarize():
    s = np.array([0.5, 2.0, 1.0, 3.0])
    assert not binarize(s, s.max() + 1).any()
    assert binarize(s, 0.0).all()
    lo, hi = binarize(s, 1.0), binarize(s, 2.0)
    assert np.all(hi <= lo)
    with pytest.raises(ContractError):
        binarize(s, np.inf)


def test_threshold_and_enrichment():
    maps = [ScoreMap("a", np.array([1.0, 3.0]), np.array([1.0, 3.0]), np.zeros(2), 2.0, 0)]
    assert localization_threshold(maps, 2.0) == 2.0 + 2 * 1.0
    v = np.zeros(100)
    v[10:20] = 5.0
    mask = np.zeros(100, bool)
    mask[10:30] = True
    assert top_decile_enrichment(v, mask) == pytest.approx(1.0 / 0.2)
    with pytest.raises(ContractError):
        top_decile_enrichment(v, np.zeros(100, bool))


def test_export(tmp_path, model, records):
    m = assemble(records[1], model)
    mask = binarize(m, float(np.median(m.values)))
    write_csv(m, tmp_path / "m.csv", mask)
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert len(lines) == 5000 + 1
    s, sg, sl, mk = read_csv(tmp_path / "m.csv")
    assert s.tobytes() == m.values.tobytes() and np.array_equal(mk, mask)
    write_svg(m, records[1].global_signal, tmp_path / "m.svg", mask)
    assert (tmp_path / "m.svg").read_text().startswith("<svg")
