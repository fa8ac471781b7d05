"""Transports move encoded frames between agents.

Both preserve per-(sender, receiver) FIFO order: the loopback transport calls
the receiver synchronously, the TCP transport sends every frame for one agent
over the same socket.
"""

import socket
import threading
from typing import Callable, Dict, Optional, Set, Tuple

from .abc import AbstractTransport
from .exception import GridSimError, RunAbortedError
from .registry import parse_address
from .typings import AgentId
from .utils import logger
from .wire import HEADER_SIZE, MsgType, decode_body, encode_frame, parse_header

Deliver = Callable[[bytes], None]


class LoopbackHub:
    """In-process switchboard shared by the loopback transports of one run."""

    def __init__(self) -> None:
        self.endpoints: Dict[AgentId, Deliver] = {}
        self.__lock = threading.RLock()

    def attach(self, agent_id: AgentId, deliver: Deliver) -> None:
        with self.__lock:
            self.endpoints[agent_id] = deliver

    def detach(self, agent_id: AgentId) -> None:
        with self.__lock:
            self.endpoints.pop(agent_id, None)

    def route(self, dst: AgentId, frame: bytes) -> None:
        with self.__lock:
            deliver = self.endpoints.get(dst)

        if deliver is None:
            raise RunAbortedError(f"Agent {dst} is not attached to the loopback hub")

        deliver(frame)


class LoopbackTransport(AbstractTransport):
    def __init__(self, hub: LoopbackHub) -> None:
        self.hub = hub
        self.agent_id: Optional[AgentId] = None

    def start(self, agent_id: AgentId, deliver: Deliver) -> None:
        self.agent_id = agent_id
        self.hub.attach(agent_id, deliver)

    def send(self, dst: AgentId, frame: bytes) -> None:
        self.hub.route(dst, frame)

    def reachable(self, dst: AgentId) -> bool:
        return dst in self.hub.endpoints

    def stop(self) -> None:
        if self.agent_id is not None:
            self.hub.detach(self.agent_id)


def recv_exactly(sock: socket.socket, n: int) -> Optional[bytes]:
    """Read exactly **n** bytes, or return None if the peer closed first."""
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(min(remaining, 65536))
        if not chunk:
            return None
        chunks.append(chunk)
        remaining -= len(chunk)

    return b"".join(chunks)


class TcpTransport(AbstractTransport):
    """Length-prefixed frames over TCP, one connection per pair of agents.

    The first side to send opens the connection and starts it with a REGISTER
    frame naming itself; the other side then answers over the same socket.
    Each direction keeps using the socket it picked first, so a race where both
    sides connect at once leaves two sockets, each carrying one direction.
    Every connection gets a reader thread that hands complete frames to
    **deliver**. A frame whose header does not decode closes the connection; a
    frame whose payload does not decode is passed on for the receiver to reject.

    :param listen: host:port to bind; port 0 picks a free one.
    :type listen: str
    :param connect_timeout: Seconds to wait when opening a connection.
    :type connect_timeout: float
    """

    def __init__(self, listen: str = "127.0.0.1:0", connect_timeout: float = 5.0):
        self.listen = parse_address(listen)
        self.connect_timeout = connect_timeout
        self.peers: Dict[AgentId, Tuple[str, int]] = {}
        self.agent_id: Optional[AgentId] = None

        self.__server: Optional[socket.socket] = None
        self.__out: Dict[AgentId, socket.socket] = {}
        self.__out_locks: Dict[AgentId, threading.Lock] = {}
        self.__readers: Set[socket.socket] = set()
        self.__lock = threading.Lock()
        self.__stopped = threading.Event()
        self.__deliver: Deliver = lambda _: None

    @property
    def address(self) -> str:
        if self.__server is None:
            return f"{self.listen[0]}:{self.listen[1]}"
        host, port = self.__server.getsockname()[:2]
        return f"{host}:{port}"

    @property
    def connections(self) -> int:
        """Open sockets, accepted and opened."""
        with self.__lock:
            return len(self.__readers)

    def add_peer(self, agent_id: AgentId, address: str) -> None:
        with self.__lock:
            self.peers[agent_id] = parse_address(address)

    ###########
    # Inbound #
    ###########

    def start(self, agent_id: AgentId, deliver: Deliver) -> None:
        self.agent_id = agent_id
        self.__deliver = deliver
        self.__stopped.clear()

        server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        server.bind(self.listen)
        server.listen()
        self.__server = server

        threading.Thread(target=self.__accept_loop, daemon=True).start()
        logger.info(f"Agent {agent_id} listening on {self.address}")

    def __accept_loop(self) -> None:
        assert self.__server is not None
        while not self.__stopped.is_set():
            try:
                conn, addr = self.__server.accept()
            except OSError:
                break

            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self.__read_in_background(conn, f"{addr[0]}:{addr[1]}")

    def __read_in_background(self, conn: socket.socket, peer: str) -> None:
        with self.__lock:
            self.__readers.add(conn)
        reader = threading.Thread(
            target=self.__read_loop, args=(conn, peer), daemon=True
        )
        reader.start()

    def __on_register(self, conn: socket.socket, payload: bytes) -> None:
        """Adopt **conn** as the way back to the agent that opened it, unless
        frames to that agent already flow over another socket."""
        hello = decode_body(payload)
        peer_id = int(hello["agent_id"])
        address = parse_address(str(hello["address"]))
        if peer_id == self.agent_id:
            return

        with self.__lock:
            self.peers.setdefault(peer_id, address)
            self.__out_locks.setdefault(peer_id, threading.Lock())
            self.__out.setdefault(peer_id, conn)

        logger.debug(f"Agent {self.agent_id}: connection from agent {peer_id}")

    def __read_loop(self, conn: socket.socket, peer: str) -> None:
        try:
            while not self.__stopped.is_set():
                header = recv_exactly(conn, HEADER_SIZE)
                if header is None:
                    break

                msg_type, _, length = parse_header(header)
                payload = recv_exactly(conn, length) if length else b""
                if payload is None:
                    logger.warning(f"Connection from {peer} closed inside a frame")
                    break

                if msg_type == MsgType.REGISTER:
                    self.__on_register(conn, payload)
                    continue

                self.__deliver(header + payload)
        except (GridSimError, KeyError, TypeError, ValueError) as e:
            logger.error(f"Dropping connection from {peer}: {e}")
        except OSError as e:
            if not self.__stopped.is_set():
                logger.debug(f"Connection from {peer} failed: {e}")
        finally:
            self.__forget(conn)

    def __forget(self, conn: socket.socket) -> None:
        with self.__lock:
            self.__readers.discard(conn)
            for a in [a for a, s in self.__out.items() if s is conn]:
                del self.__out[a]
        conn.close()

    ############
    # Outbound #
    ############

    def __connection(self, dst: AgentId) -> socket.socket:
        with self.__lock:
            sock = self.__out.get(dst)
            if sock is not None:
                return sock
            address = self.peers.get(dst)
            lock = self.__out_locks.setdefault(dst, threading.Lock())

        if address is None:
            raise RunAbortedError(f"No address known for agent {dst}")

        with lock:
            with self.__lock:
                sock = self.__out.get(dst)
            if sock is not None:
                return sock

            sock = socket.create_connection(address, timeout=self.connect_timeout)
            sock.settimeout(None)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            hello = {"agent_id": self.agent_id, "address": self.address}
            sock.sendall(encode_frame(MsgType.REGISTER, 0, hello))
            self.__read_in_background(sock, f"{address[0]}:{address[1]}")

            # The peer may have connected first; its socket then carries our
            # frames and this one only its
            with self.__lock:
                return self.__out.setdefault(dst, sock)

    def send(self, dst: AgentId, frame: bytes) -> None:
        try:
            sock = self.__connection(dst)
            with self.__out_locks[dst]:
                sock.sendall(frame)
        except OSError as e:
            with self.__lock:
                broken = self.__out.pop(dst, None)
            if broken is not None:
                broken.close()
            raise RunAbortedError(f"Agent {dst} unreachable: {e}", agent=self.agent_id)

    def reachable(self, dst: AgentId) -> bool:
        try:
            self.__connection(dst)
            return True
        except (OSError, RunAbortedError):
            return False

    def stop(self) -> None:
        self.__stopped.set()
        if self.__server is not None:
            self.__server.close()

        with self.__lock:
            sockets = set(self.__out.values()) | self.__readers
            self.__out.clear()
            self.__readers.clear()

        for s in sockets:
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            s.close()
