import json

import pytest
from hypothesis import given, strategies as st

from evop import channel as ch
from evop.errors import ProtocolError

text = st.text(max_size=20)
messages = st.one_of(
    st.builds(ch.Hello, text),
    st.builds(ch.Bye, text),
    st.builds(ch.Ping, text),
    st.builds(ch.Assign, text, text, st.integers(1, 10 ** 9)),
    st.builds(ch.Update, text, text, st.integers(1, 10 ** 9), st.sampled_from(
        ["degradation_replacement", "rebalance", "reverse_migration"])),
    st.builds(ch.Error, text, text),
)


@given(messages)
def test_round_trip(msg):
    frame = ch.encode(msg)
    assert ch.decode(frame) == msg
    assert ch.decode(frame.encode("utf-8")) == msg


def test_wire_shape():
    assert json.loads(ch.encode(ch.Assign("s1", "h:8080", 2))) == {
        "type": "ASSIGN", "session_id": "s1", "address": "h:8080", "epoch": 2}
    assert ch.decode('{"type":"ERROR","code":"X"}') == ch.Error("X")


@pytest.mark.parametrize("frame", [
    b"\xff", "not json", "[]", '{"model_id":"m"}', '{"type":"NOPE"}', '{"type":"HELLO"}',
    '{"type":"HELLO","model_id":"m","extra":1}', '{"type":"ASSIGN","session_id":"s","address":"a","epoch":"1"}',
    '{"type":"ASSIGN","session_id":"s","address":"a","epoch":true}',
])
def test_malformed_frames(frame):
    with pytest.raises(ProtocolError):
        ch.decode(frame)


def test_closed_channel_refuses_frames():
    got = []
    c = ch.InProcessChannel(got.append, "c")
    c.send(ch.Ping("s"))
    c.close()
    with pytest.raises(ch.ChannelClosed):
        c.send(ch.Ping("s"))
    assert got == c.sent == ['{"session_id":"s","type":"PING"}']
