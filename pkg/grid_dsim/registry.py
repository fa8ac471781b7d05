"""Agent registry: a small HTTP/JSON lookup service with heartbeats and
expiry, its client, and a static peer-file fallback for offline use.

Endpoints::

    POST /register   {"agent_id", "address", "perf"?}
    POST /heartbeat  {"agent_id", "perf"?}
    GET  /agents     -> {"agents": [entry, ...]}  (live entries only)
"""

import asyncio
import json
import logging
import threading
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import requests
from aiohttp import web

from .exception import ConfigError, PlacementError, RegistryError
from .placement import PerfValue
from .typings import AgentId, Json
from .utils import logger

DEFAULT_TTL = 15.0
DEFAULT_HEARTBEAT = 5.0


@dataclass
class RegistryEntry:
    agent_id: AgentId
    address: str
    last_heartbeat: float = 0.0
    perf: Optional[PerfValue] = None

    def to_json(self) -> Json:
        return {
            "agent_id": self.agent_id,
            "address": self.address,
            "last_heartbeat": self.last_heartbeat,
            "perf": asdict(self.perf) if self.perf else None,
        }

    @classmethod
    def from_json(cls, doc: Json) -> "RegistryEntry":
        perf = doc.get("perf")
        return cls(
            int(doc["agent_id"]),
            str(doc["address"]),
            float(doc.get("last_heartbeat", 0.0)),
            PerfValue(**perf) if perf else None,
        )


def parse_address(address: str) -> Tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not port.isdigit():
        raise ConfigError(f"Invalid address '{address}' (expected host:port)")
    return host or "127.0.0.1", int(port)


def load_static_peers(path: Union[str, Path]) -> List[RegistryEntry]:
    """Read a JSON list of ``{"agent_id", "address"}`` objects."""
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
        return [RegistryEntry.from_json(d) for d in doc]
    except (OSError, ValueError, KeyError, TypeError, AttributeError) as e:
        raise ConfigError(f"Invalid static peer file {path}: {e}")


class RegistryStore:
    """Thread-safe table of registry entries. Entries silent for longer than
    **ttl** are dropped on every heartbeat and lookup."""

    def __init__(self, ttl: float = DEFAULT_TTL) -> None:
        self.ttl = ttl
        self.__entries: Dict[AgentId, RegistryEntry] = {}
        self.__lock = threading.Lock()

    def __len__(self) -> int:
        with self.__lock:
            return len(self.__entries)

    def __prune(self, now: float) -> None:
        expired = [
            a for a, e in self.__entries.items() if now - e.last_heartbeat > self.ttl
        ]
        for a in expired:
            del self.__entries[a]
            logger.info(f"Registry: agent {a} expired")

    def register(
        self,
        agent_id: AgentId,
        address: str,
        perf: Optional[PerfValue] = None,
        now: Optional[float] = None,
    ) -> RegistryEntry:
        entry = RegistryEntry(agent_id, address, time.time() if now is None else now)
        entry.perf = perf
        with self.__lock:
            self.__entries[agent_id] = entry
        return entry

    def heartbeat(
        self,
        agent_id: AgentId,
        perf: Optional[PerfValue] = None,
        now: Optional[float] = None,
    ) -> bool:
        now = time.time() if now is None else now
        with self.__lock:
            self.__prune(now)
            entry = self.__entries.get(agent_id)
            if entry is None:
                return False
            entry.last_heartbeat = now
            if perf is not None:
                entry.perf = perf
            return True

    def lookup(self, now: Optional[float] = None) -> List[RegistryEntry]:
        now = time.time() if now is None else now
        with self.__lock:
            self.__prune(now)
            live = list(self.__entries.values())
        return sorted(live, key=lambda e: e.agent_id)


class RegistryServer:
    """Registry service on an aiohttp application. The event loop runs on a
    background thread between :meth:`start` and :meth:`stop`; run it
    standalone with ``grid-dsim registry``.

    :param listen: host:port to bind; port 0 picks a free one.
    :type listen: str
    :param ttl: Seconds without heartbeat after which an agent is dropped.
    :type ttl: float
    :param logging_lvl: Package log level.
    :type logging_lvl: str | int
    """

    def __init__(
        self,
        listen: str = "127.0.0.1:0",
        ttl: float = DEFAULT_TTL,
        logging_lvl: Union[str, int] = logging.INFO,
    ) -> None:
        self.set_logging(logging_lvl)
        self.store = RegistryStore(ttl)
        self.listen = parse_address(listen)

        self.__bound: Optional[Tuple[str, int]] = None
        self.__loop: Optional[asyncio.AbstractEventLoop] = None
        self.__runner: Optional[web.AppRunner] = None
        self.__thread: Optional[threading.Thread] = None
        self.__error: Optional[ConfigError] = None

    def set_logging(self, level: Union[int, str]) -> None:
        logger.setLevel(level)

    @property
    def address(self) -> str:
        host, port = self.__bound or self.listen
        return f"{host}:{port}"

    @property
    def url(self) -> str:
        return f"http://{self.address}"

    ############
    # Handlers #
    ############

    @staticmethod
    async def __body(request: web.Request) -> Tuple[Json, Optional[PerfValue]]:
        doc = await request.json()
        if not isinstance(doc, dict):
            raise ValueError("body is not an object")
        perf = doc.get("perf")
        return doc, PerfValue(**perf) if perf else None

    async def __agents(self, request: web.Request) -> web.Response:
        return web.json_response({"agents": [e.to_json() for e in self.store.lookup()]})

    async def __register(self, request: web.Request) -> web.Response:
        try:
            doc, perf = await self.__body(request)
            self.store.register(int(doc["agent_id"]), str(doc["address"]), perf)
        except (ValueError, KeyError, TypeError, PlacementError) as e:
            return web.json_response({"error": str(e)}, status=400)

        return web.json_response({"ok": True})

    async def __heartbeat(self, request: web.Request) -> web.Response:
        try:
            doc, perf = await self.__body(request)
            known = self.store.heartbeat(int(doc["agent_id"]), perf)
        except (ValueError, KeyError, TypeError, PlacementError) as e:
            return web.json_response({"error": str(e)}, status=400)

        return web.json_response({"ok": known}, status=200 if known else 404)

    #############
    # Lifecycle #
    #############

    def make_app(self) -> web.Application:
        app = web.Application()
        app.add_routes(
            [
                web.get("/agents", self.__agents),
                web.post("/register", self.__register),
                web.post("/heartbeat", self.__heartbeat),
            ]
        )
        return app

    async def __setup(self) -> None:
        runner = web.AppRunner(self.make_app(), access_log=None)
        await runner.setup()
        self.__runner = runner

        host, port = self.listen
        site = web.TCPSite(runner, host, port)
        try:
            await site.start()
        except OSError as e:
            raise ConfigError(f"Registry cannot listen on {host}:{port}: {e}")

        bound = runner.addresses[0]
        self.__bound = (str(bound[0]), int(bound[1]))

    def __serve(self, ready: threading.Event) -> None:
        loop = asyncio.new_event_loop()
        asyncio.set_event_loop(loop)
        self.__loop = loop
        try:
            try:
                loop.run_until_complete(self.__setup())
            except ConfigError as e:
                self.__error = e
                return
            finally:
                ready.set()

            loop.run_forever()
        finally:
            if self.__runner is not None:
                loop.run_until_complete(self.__runner.cleanup())
                self.__runner = None
            loop.close()

    def start(self) -> "RegistryServer":
        """Serve on a background thread.

        :raise grid_dsim.exception.ConfigError: If the address cannot be bound.
        """
        ready = threading.Event()
        self.__error = None
        self.__thread = threading.Thread(
            target=self.__serve, args=(ready,), daemon=True
        )
        self.__thread.start()
        ready.wait()

        if self.__error is not None:
            self.__thread.join()
            raise self.__error

        logger.info(f"Registry listening on {self.address}")
        return self

    def stop(self) -> None:
        loop = self.__loop
        if loop is not None and not loop.is_closed():
            loop.call_soon_threadsafe(loop.stop)
        if self.__thread is not None:
            self.__thread.join(timeout=2.0)
            self.__thread = None
        self.__loop = None


class RegistryClient:
    """Client side of the registry, with an optional static peer file used when
    the service cannot be reached."""

    def __init__(
        self,
        url: Optional[str] = None,
        peers_file: Optional[Union[str, Path]] = None,
        timeout: float = 5.0,
    ) -> None:
        if url is None and peers_file is None:
            raise ConfigError("A registry URL or a static peer file is required")

        if url is not None and not url.startswith("http"):
            url = f"http://{url}"

        self.url = url.rstrip("/") if url else None
        self.peers_file = peers_file
        self.timeout = timeout

    def __post(self, path: str, body: Json) -> Json:
        if self.url is None:
            raise RegistryError("No registry configured")

        try:
            r = requests.post(f"{self.url}{path}", json=body, timeout=self.timeout)
        except requests.RequestException as e:
            raise RegistryError(f"Registry unreachable: {e}")

        if r.status_code >= 400:
            raise RegistryError(f"Registry rejected {path}: {r.status_code} {r.text}")

        result: Json = r.json()
        return result

    def register(
        self, agent_id: AgentId, address: str, perf: Optional[PerfValue] = None
    ) -> None:
        body = {"agent_id": agent_id, "address": address}
        body["perf"] = asdict(perf) if perf else None
        self.__post("/register", body)

    def heartbeat(self, agent_id: AgentId, perf: Optional[PerfValue] = None) -> None:
        body = {"agent_id": agent_id, "perf": asdict(perf) if perf else None}
        self.__post("/heartbeat", body)

    def lookup(self) -> List[RegistryEntry]:
        if self.url is not None:
            try:
                r = requests.get(f"{self.url}/agents", timeout=self.timeout)
                r.raise_for_status()
                return [RegistryEntry.from_json(d) for d in r.json()["agents"]]
            except (requests.RequestException, KeyError, ValueError) as e:
                if self.peers_file is None:
                    raise RegistryError(f"Registry lookup failed: {e}")
                logger.warning(f"Registry lookup failed ({e}), using {self.peers_file}")

        assert self.peers_file is not None
        return load_static_peers(self.peers_file)


class HeartbeatLoop:
    """Registers the agent, then heartbeats every **period** seconds."""

    def __init__(
        self,
        client: RegistryClient,
        agent_id: AgentId,
        address: str,
        period: float = DEFAULT_HEARTBEAT,
    ) -> None:
        self.client = client
        self.agent_id = agent_id
        self.address = address
        self.period = period
        self.perf: Optional[PerfValue] = None
        self.__stop = threading.Event()
        self.__thread: Optional[threading.Thread] = None

    def beat(self) -> None:
        try:
            self.client.heartbeat(self.agent_id, self.perf)
        except RegistryError:
            # Expired or registry restarted: register again
            self.client.register(self.agent_id, self.address, self.perf)

    def start(self) -> None:
        if self.client.url is None:
            return

        def loop() -> None:
            while not self.__stop.is_set():
                try:
                    self.beat()
                except RegistryError as e:
                    logger.warning(f"Agent {self.agent_id}: heartbeat failed: {e}")
                self.__stop.wait(self.period)

        self.client.register(self.agent_id, self.address, self.perf)
        self.__stop.clear()
        self.__thread = threading.Thread(target=loop, daemon=True)
        self.__thread.start()

    def stop(self) -> None:
        self.__stop.set()
        if self.__thread and self.__thread.is_alive():
            self.__thread.join(timeout=2.0)
