import queue
import socket
from typing import Iterator, List, Tuple

import pytest

from grid_dsim.exception import RunAbortedError
from grid_dsim.registry import parse_address
from grid_dsim.transport import LoopbackHub, LoopbackTransport, TcpTransport
from grid_dsim.wire import MsgType, decode_frame, encode_frame


def test_loopback_delivers_in_order() -> None:
    hub = LoopbackHub()
    got: List[bytes] = []
    a, b = LoopbackTransport(hub), LoopbackTransport(hub)
    a.start(1, lambda f: None)
    b.start(2, got.append)

    frames = [encode_frame(MsgType.RESULT, 1, {"n": n}) for n in range(50)]
    for f in frames:
        a.send(2, f)

    assert got == frames
    assert a.reachable(2)
    assert not a.reachable(3)
    with pytest.raises(RunAbortedError):
        a.send(3, frames[0])

    b.stop()
    assert not a.reachable(2)
    with pytest.raises(RunAbortedError):
        a.send(2, frames[0])


@pytest.fixture
def tcp_pair() -> Iterator[Tuple[TcpTransport, TcpTransport, "queue.Queue[bytes]"]]:
    inbox: "queue.Queue[bytes]" = queue.Queue()
    a, b = TcpTransport("127.0.0.1:0"), TcpTransport("127.0.0.1:0")
    a.start(1, lambda f: None)
    b.start(2, inbox.put)
    a.add_peer(2, b.address)
    try:
        yield a, b, inbox
    finally:
        a.stop()
        b.stop()


def test_tcp_fifo(tcp_pair: Tuple[TcpTransport, TcpTransport, queue.Queue]) -> None:
    a, _, inbox = tcp_pair
    for n in range(200):
        a.send(2, encode_frame(MsgType.EVENT, 9, {"n": n, "pad": "x" * (n * 37)}))

    received = [decode_frame(inbox.get(timeout=10)) for _ in range(200)]
    assert [f.body["n"] for f in received] == list(range(200))
    assert all(f.msg_type == MsgType.EVENT and f.context_id == 9 for f in received)
    assert inbox.empty()


def test_tcp_unknown_peer(
    tcp_pair: Tuple[TcpTransport, TcpTransport, queue.Queue]
) -> None:
    a, _, _ = tcp_pair
    assert a.reachable(2)
    assert not a.reachable(7)
    with pytest.raises(RunAbortedError):
        a.send(7, encode_frame(MsgType.RESULT, 1, {}))


def test_tcp_bad_header_drops_connection(
    tcp_pair: Tuple[TcpTransport, TcpTransport, queue.Queue]
) -> None:
    a, b, inbox = tcp_pair
    with socket.create_connection(parse_address(b.address), timeout=5) as raw:
        raw.sendall(b"JUNK" + bytes(14))
        raw.settimeout(5)
        # The receiver closes the connection on an undecodable header
        assert raw.recv(1) == b""

    a.send(2, encode_frame(MsgType.RESULT, 3, {"ok": True}))
    assert decode_frame(inbox.get(timeout=10)).body == {"ok": True}


def test_tcp_address() -> None:
    t = TcpTransport("127.0.0.1:0")
    t.start(4, lambda f: None)
    try:
        host, port = parse_address(t.address)
        assert host == "127.0.0.1"
        assert port > 0
    finally:
        t.stop()


def test_tcp_answers_over_the_same_connection() -> None:
    inbox_a: "queue.Queue[bytes]" = queue.Queue()
    inbox_b: "queue.Queue[bytes]" = queue.Queue()
    a, b = TcpTransport("127.0.0.1:0"), TcpTransport("127.0.0.1:0")
    a.start(1, inbox_a.put)
    b.start(2, inbox_b.put)
    try:
        # Only a knows where b listens
        a.add_peer(2, b.address)
        a.send(2, encode_frame(MsgType.RESULT, 1, {"n": 1}))
        assert decode_frame(inbox_b.get(timeout=10)).body == {"n": 1}

        assert b.reachable(1)
        b.send(1, encode_frame(MsgType.RESULT, 1, {"n": 2}))
        assert decode_frame(inbox_a.get(timeout=10)).body == {"n": 2}

        assert a.connections == b.connections == 1
        assert b.peers[1] == parse_address(a.address)
    finally:
        a.stop()
        b.stop()
