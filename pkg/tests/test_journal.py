import pytest
from hypothesis import given, settings, strategies as st

from evop.errors import CorruptCache
from evop.journal import HEADER, SessionJournal, encode_record, scan

payload = st.dictionaries(st.text(max_size=5), st.one_of(st.integers(), st.text(max_size=10)), max_size=4)


def build(payloads):
    """Journal image plus the byte offset where each record ends."""
    data = bytearray(HEADER)
    ends = []
    for p in payloads:
        data += encode_record(p)
        ends.append(len(data))
    return bytes(data), ends


@settings(max_examples=80, deadline=None)
@given(st.lists(payload, max_size=6), st.data())
def test_any_cut_yields_whole_record_prefix(payloads, data):
    image, ends = build(payloads)
    cut = data.draw(st.integers(0, len(image)))
    got, report = scan(image[:cut])
    whole = sum(1 for e in ends if e <= cut)
    assert got == payloads[:whole]
    assert report.truncated == (cut not in (0, *ends) and cut != len(HEADER))
    if cut < len(HEADER):
        assert report.valid_bytes == 0
    else:
        assert report.valid_bytes == (ends[whole - 1] if whole else len(HEADER))


def test_every_byte_of_final_record(tmp_path):
    payloads = [{"n": i} for i in range(4)]
    image, ends = build(payloads)
    for cut in range(ends[-2], ends[-1]):
        path = tmp_path / f"j{cut}"
        path.write_bytes(image[:cut])
        journal = SessionJournal(path)
        got, report = journal.replay()
        assert got == payloads[:3]
        assert report.truncated == (cut != ends[-2])
        assert path.stat().st_size == ends[-2]
        journal.append({"n": 99})
        assert SessionJournal(path).replay()[0] == payloads[:3] + [{"n": 99}]


def test_checksum_mismatch_stops_replay():
    image, ends = build([{"a": 1}, {"b": 2}])
    broken = bytearray(image)
    broken[ends[0] + 5] ^= 0x01
    got, report = scan(bytes(broken))
    assert got == [{"a": 1}]
    assert report.reason == "checksum mismatch"


def test_implausible_length():
    image, _ = build([{"a": 1}])
    got, report = scan(image + b"\xff\xff\xff\xff" + b"x" * 8)
    assert got == [{"a": 1}] and report.reason.startswith("implausible")


def test_foreign_file_is_corrupt(tmp_path):
    with pytest.raises(CorruptCache):
        scan(b"hello world, definitely not a journal")
    with pytest.raises(CorruptCache):
        scan(b"evop-x")


def test_empty_and_missing(tmp_path):
    assert scan(b"") == ([], scan(b"")[1])
    assert not scan(b"")[1].truncated
    journal = SessionJournal(tmp_path / "absent")
    assert journal.replay()[0] == []
    assert (tmp_path / "absent").read_bytes() == HEADER


def test_compaction_replaces_contents(tmp_path):
    journal = SessionJournal(tmp_path / "j")
    for i in range(10):
        journal.append({"i": i})
    assert journal.records == 10
    journal.compact([{"i": 9}])
    assert journal.records == 1
    assert SessionJournal(tmp_path / "j").replay()[0] == [{"i": 9}]
    assert not (tmp_path / "j.compact").exists()
