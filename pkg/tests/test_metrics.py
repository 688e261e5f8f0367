from __future__ import annotations

import datetime as dt

import numpy as np
import pytest

from harvestmig.calendar import StudyCalendar
from harvestmig.metrics import (CULTIVATION_LEVELS, IN_VALID, LOW_SUPPORT, MetricsTable, composition_share, in_rate,
                                is_discarded, out_rate, retention_shares, seasonal_return_share)
from harvestmig.residence import NO_RESIDENCE

LAG = 30


def _res(n_subs, n_days=200, fill=NO_RESIDENCE):
    return np.full((n_subs, n_days), fill, dtype=np.int16)


def test_in_rate_examples():
    t = 100
    res = _res(100, fill=0)
    res[:3, t - LAG] = 1          # 3 of 100 present were elsewhere 30 days earlier
    rate, movers = in_rate(res, 0, t)
    assert rate == pytest.approx(0.03) and movers.tolist() == [0, 1, 2]
    assert not is_discarded(rate)

    res = _res(50, fill=0)
    rate, _ = in_rate(res, 0, t)
    assert rate == 0.0 and is_discarded(rate)

    res = _res(10, fill=0)
    res[:, t - LAG] = 1
    rate, _ = in_rate(res, 0, t)
    assert rate == 1.0 and is_discarded(rate)


def test_in_rate_ignores_undefined_reference():
    t = 100
    res = _res(10, fill=0)
    res[:4, t - LAG] = NO_RESIDENCE   # no residence 30 days earlier: not a mover
    res[4, t - LAG] = 2
    rate, movers = in_rate(res, 0, t)
    assert rate == pytest.approx(0.1) and movers.tolist() == [4]


def test_out_rate_examples():
    t = 100
    res = _res(90)
    res[:80, t - LAG] = 0
    res[:70, t] = 0
    res[70:74, t] = 1                # 4 left
    res[74:80, t] = NO_RESIDENCE     # 6 undefined today: stay in the denominator
    res[80:, t - LAG] = 2
    res[80:, t] = 2
    assert out_rate(res, 0, t) == pytest.approx(0.05)
    res2 = _res(80, fill=0)
    r = out_rate(res2, 0, t)
    assert r == 0.0 and is_discarded(r)


def test_composition_share_examples():
    t = 100
    res = _res(40, fill=0)
    res[:10, t - LAG] = 1             # 10 movers from district 1 (high) and 2 (low)
    res[4:10, t - LAG] = 2
    high = {1}
    assert composition_share(res, 0, t, lambda o: o in high) == pytest.approx(0.4)
    assert composition_share(_res(5, fill=0), 0, t, lambda o: True) is None


def test_composition_partition_sums_to_one():
    rng = np.random.default_rng(1)
    t = 100
    res = _res(60, fill=0)
    src = rng.integers(1, 7, 25)
    res[:25, t - LAG] = src           # 25 movers from six source districts
    classes = {1: "high", 2: "high", 3: "low", 4: "none", 5: "low", 6: "none"}
    shares = [composition_share(res, 0, t, lambda o, c=c: classes[o] == c) for c in CULTIVATION_LEVELS]
    assert sum(shares) == pytest.approx(1.0, abs=1e-12)
    expected = {c: sum(classes[int(s)] == c for s in src) / 25 for c in CULTIVATION_LEVELS}
    assert shares == [pytest.approx(expected[c]) for c in CULTIVATION_LEVELS]


def test_retention_examples():
    t = 50
    res = _res(5, n_days=200, fill=0)
    res[:2, t - LAG] = 1
    still, back30, back90 = retention_shares(res, 0, t)
    assert still == 1.0 and back30 == 0.0 and back90 == 0.0

    res = _res(3, n_days=200, fill=0)
    res[0, t - LAG] = 1
    res[0, t + 1:t + 90] = 0
    res[0, t + 90] = 1                # back home exactly at t+90
    _, _, back90 = retention_shares(res, 0, t)
    assert back90 == 1.0

    res = _res(3, n_days=200, fill=0)
    res[0, t - LAG] = 1
    res[0, t + 30] = NO_RESIDENCE
    still, back30, _ = retention_shares(res, 0, t)
    assert still == 0.0 and back30 == 0.0


def test_seasonal_return_share():
    assert seasonal_return_share(0.4, 0.4, 100, 178) == pytest.approx(0.4)
    assert round(seasonal_return_share(0.46, 0.53, 100, 178), 4) == 0.6197
    assert seasonal_return_share(0.0, 0.5, 100, 150) == pytest.approx(0.5 * 150 / 50)
    assert seasonal_return_share(0.4, 0.5, 100, 100) is None
    with pytest.raises(ValueError):
        seasonal_return_share(1.2, 0.5, 100, 150)


def _random_res(seed, n_subs=300, n_days=160, nd=4):
    rng = np.random.default_rng(seed)
    res = np.empty((n_subs, n_days), np.int16)
    cur = rng.integers(0, nd, n_subs)
    for t in range(n_days):
        move = rng.random(n_subs) < 0.05
        cur = np.where(move, rng.integers(0, nd, n_subs), cur)
        res[:, t] = cur
    res[rng.random(res.shape) < 0.05] = NO_RESIDENCE
    return res


def test_table_matches_scalar_definitions():
    nd = 4
    cal = StudyCalendar(dt.date(2015, 1, 1), dt.date(2015, 1, 1) + dt.timedelta(days=159))
    res = _random_res(2, nd=nd)
    rng = np.random.default_rng(9)
    class_of = rng.integers(0, 12, (nd, cal.n_days)).astype(np.int8)
    m = MetricsTable.empty([f"D{i}" for i in range(nd)], cal, LAG, min_present=1)
    # two shards give the same counts as one
    m.add_residence(res[:150], class_of)
    m.add_residence(res[150:], class_of)
    rate, ok = m.in_rate()
    orate, ook = m.out_rate()
    still, _ = m.retention("still30")
    ret90, _ = m.retention("ret90")
    high, _ = m.share(cultivation="high")
    for d in range(nd):
        for t in range(LAG, cal.n_days - 91):
            r, _ = in_rate(res, d, t)
            assert rate[d, t] == pytest.approx(r)
            assert ok[d, t] == (not is_discarded(r))
            o = out_rate(res, d, t)
            assert orate[d, t] == pytest.approx(o) and ook[d, t] == (not is_discarded(o))
            s, _, b90 = retention_shares(res, d, t)
            if s is not None:
                assert still[d, t] == pytest.approx(s) and ret90[d, t] == pytest.approx(b90)
            c = composition_share(res, d, t, lambda src, t=t: class_of[src, t] // 4 == 2)
            if c is not None:
                assert high[d, t] == pytest.approx(c)


def test_flags_and_save_load_bytes(tmp_path):
    cal = StudyCalendar(dt.date(2015, 1, 1), dt.date(2015, 6, 30))
    res = _random_res(4, n_subs=60, n_days=cal.n_days, nd=3)
    cls = np.zeros((3, cal.n_days), np.int8)
    m = MetricsTable.empty(["D1", "D2", "D3"], cal, LAG)
    m.add_residence(res, cls)
    flags = m.valid_flags()
    assert ((flags & IN_VALID) > 0).sum() == m.in_rate()[1].sum()
    assert (((flags & LOW_SUPPORT) > 0) == (m.present < 20)).all()
    a, b = tmp_path / "a.npz", tmp_path / "b.npz"
    m.save(a)
    MetricsTable.load(a).save(b)
    assert a.read_bytes() == b.read_bytes()
    back = MetricsTable.load(a)
    assert back.calendar == cal and back.lag == LAG and (back.movers == m.movers).all()
    frame = m.to_frame()
    assert len(frame) == 3 * cal.n_days
