import math

import numpy as np
import pytest

from nilmlab.samples import Gap, PowerSample
from nilmlab.store import (
    HEADER,
    SampleStore,
    StoreCorruptError,
    StoreError,
    read_series,
    read_store,
    to_grid,
    write_store,
)


def s(t, p=100.0, e=0.0):
    return PowerSample.from_active(t, p, e)


def sixty():
    return [s(i * 1000, 100.0 + i, i * 0.1) for i in range(60)]


def test_layout(tmp_path):
    path = tmp_path / "x.csv"
    write_store(path, [s(0), Gap(1000, 3000), s(3000)], scenario="t", rate_hz=1)
    lines = path.read_text().splitlines()
    assert lines[0] == "# format=nilmlab-store"
    assert "# scenario=t" in lines and "# rate_hz=1" in lines
    assert HEADER in lines
    assert lines[-2] == "GAP,1000,3000"


def test_read_back_metadata(tmp_path):
    path = tmp_path / "x.csv"
    write_store(path, sixty(), scenario="table1", meter="127.0.0.1:1502")
    meta, records = read_store(path)
    assert meta["scenario"] == "table1" and meta["meter"] == "127.0.0.1:1502"
    assert meta["codec"] == "1"
    assert records == sixty()


def test_ranges(tmp_path):
    path = tmp_path / "x.csv"
    write_store(path, sixty())
    assert read_series(path, 5000, 5000) == []
    assert len(read_series(path)) == 60
    assert len(read_series(path, 0, 60_000)) == 60
    assert [r.t_ms for r in read_series(path, 10_000, 13_000)] == [10_000, 11_000, 12_000]
    with pytest.raises(ValueError):
        read_series(path, 5, 1)


def test_range_splitting_gap_includes_marker(tmp_path):
    path = tmp_path / "x.csv"
    write_store(path, [s(0), s(1000), Gap(2000, 8000), s(8000), s(9000)])
    got = read_series(path, 5000, 9000)
    assert got == [Gap(2000, 8000), s(8000)]


def test_partial_tail_dropped_and_truncated(tmp_path):
    path = tmp_path / "x.csv"
    write_store(path, sixty()[:10])
    whole = path.read_bytes()
    path.write_bytes(whole + b"10000,100.0,3")
    assert read_store(path)[1] == sixty()[:10]
    with SampleStore.open(path) as st:
        st.append(sixty()[10])
    ref = tmp_path / "ref.csv"
    write_store(ref, sixty()[:11])
    assert path.read_bytes() == ref.read_bytes()


def test_reopen_is_byte_identical(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_store(a, sixty())
    with SampleStore.create(b) as st:
        for x in sixty()[:30]:
            st.append(x)
    with SampleStore.open(b) as st:
        for x in sixty()[30:]:
            st.append(x)
    assert a.read_bytes() == b.read_bytes()


def test_corrupt_record_names_offset(tmp_path):
    path = tmp_path / "x.csv"
    write_store(path, sixty()[:3])
    data = path.read_bytes()
    bad_at = len(data)
    path.write_bytes(data + b"3000,abc,1,2,3,4\n")
    with pytest.raises(StoreCorruptError) as exc:
        read_store(path)
    assert exc.value.offset == bad_at
    assert str(bad_at) in str(exc.value)


def test_out_of_order_file_rejected(tmp_path):
    path = tmp_path / "x.csv"
    write_store(path, sixty()[:3])
    with open(path, "a") as fh:
        fh.write("1500,1.0,1.0,1.0,1.0,1.0\n")
    with pytest.raises(StoreCorruptError):
        read_store(path)


def test_append_rules(tmp_path):
    with SampleStore.create(tmp_path / "x.csv") as st:
        st.append(s(1000, e=1.0))
        with pytest.raises(StoreError):
            st.append(s(1000, e=1.0))
        with pytest.raises(StoreError):
            st.append(s(2000, e=0.5))
        with pytest.raises(StoreError):
            st.append(PowerSample(2000, -1.0, 0.0, 230.0, 0.0, 1.0))
        with pytest.raises(StoreError):
            st.append_gap(Gap(500, 900))
        st.append_gap(Gap(2000, 5000))
        with pytest.raises(StoreError):
            st.append(s(4000, e=2.0))
        st.append(s(5000, e=2.0))
        assert st.samples_written == 2 and st.gap_ms == 3000


def test_not_a_store(tmp_path):
    path = tmp_path / "x.csv"
    path.write_text("# format=other\n" + HEADER + "\n")
    with pytest.raises(StoreError):
        read_store(path)


def test_readers_see_prefix_of_live_store(tmp_path):
    path = tmp_path / "x.csv"
    with SampleStore.create(path) as st:
        for x in sixty()[:20]:
            st.append(x)
        assert read_store(path)[1] == sixty()[:20]


def test_grid_marks_holes():
    t, x = to_grid([s(0, 1.0), Gap(1000, 3000), s(3000, 4.0)], 1000)
    assert list(t) == [0, 1000, 2000, 3000]
    assert x[0] == 1.0 and x[3] == 4.0
    assert math.isnan(x[1]) and math.isnan(x[2])
    assert to_grid([], 1000)[0].size == 0
    assert np.all(to_grid(sixty(), 1000)[0] == np.arange(60) * 1000)
