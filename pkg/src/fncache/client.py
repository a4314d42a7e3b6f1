"""Client library: consistent-hash proxy selection, erasure coding at the
edge, and the read-repair paths (miss fill, degraded-read repair, and full
reset after an object is lost)."""

from __future__ import annotations

import bisect
import hashlib
import random
from collections import Counter
from typing import Protocol

import numpy as np

from .config import SystemConfig, derive_seed
from .ec import SEQ_SEP, Chunk, ChunkId, decode, encode
from .proxy import CacheMiss, ObjectLost, Proxy
from .sim import SimFuture


def _h64(text: str) -> int:
    dig = hashlib.blake2b(text.encode(), digest_size=8).digest()
    return int.from_bytes(dig, "big")


class HashRing:
    """Consistent hash ring with virtual nodes. Keys land on the first
    point clockwise from their hash; removing a member only remaps the
    keys that pointed at it."""

    def __init__(self, members=(), vnodes: int = 128):
        if vnodes < 1:
            raise ValueError("vnodes must be >= 1")
        self.vnodes = vnodes
        self._members: set[str] = set()
        self._hashes: list[int] = []
        self._owners: list[str] = []
        for m in members:
            self.add(m)

    def add(self, member: str) -> None:
        if member in self._members:
            raise ValueError(f"already on the ring: {member}")
        self._members.add(member)
        points = [(_h64(f"{member}/{i}"), member) for i in range(self.vnodes)]
        merged = sorted(zip(self._hashes, self._owners)) + points
        merged.sort()
        self._hashes = [h for h, _m in merged]
        self._owners = [m for _h, m in merged]

    def remove(self, member: str) -> None:
        if member not in self._members:
            raise ValueError(f"not on the ring: {member}")
        self._members.discard(member)
        pairs = [(h, m) for h, m in zip(self._hashes, self._owners)
                 if m != member]
        self._hashes = [h for h, _m in pairs]
        self._owners = [m for _h, m in pairs]

    def select(self, key: str) -> str:
        if not self._hashes:
            raise LookupError("empty ring")
        i = bisect.bisect_right(self._hashes, _h64(key)) % len(self._hashes)
        return self._owners[i]

    def __len__(self):
        return len(self._members)


class BackingStore(Protocol):
    def fetch(self, key: str) -> bytes: ...


class SyntheticStore:
    """Deterministic origin: each key has one fixed pseudo-random value,
    so a refetch after a cache loss reproduces the original bytes."""

    def __init__(self, default_size: int = 1024):
        self.default_size = default_size
        self.sizes: dict[str, int] = {}
        self.fetches = 0

    def set_size(self, key: str, size: int) -> None:
        prev = self.sizes.setdefault(key, size)
        if prev != size:
            raise ValueError(f"size of {key!r} changed: {prev} -> {size}")

    def fetch(self, key: str) -> bytes:
        self.fetches += 1
        size = self.sizes.setdefault(key, self.default_size)
        rng = np.random.Generator(np.random.PCG64(_h64(key)))
        return rng.bytes(size)


class CacheClient:
    """Erasure-coding cache facade over one or more proxy pools.

    All calls return futures resolved on the simulation loop. GETs repair
    themselves: a plain miss refills from the backing store, a partial
    read re-spreads the object onto fresh nodes, and a lost object is
    refetched and fully reinserted (counted as a reset).
    """

    def __init__(self, proxies: list[Proxy], cfg: SystemConfig, *,
                 backing: BackingStore | None = None,
                 placement_seed: int | None = None):
        if not proxies:
            raise ValueError("need at least one proxy")
        self.cfg = cfg
        self.ec = cfg.ec
        self.ring = HashRing([p.addr for p in proxies])
        self._by_addr = {p.addr: p for p in proxies}
        self._loop = proxies[0].loop
        if placement_seed is None:
            placement_seed = derive_seed(cfg.seed, "placement")
        self.rng = random.Random(placement_seed)
        self.backing = backing
        self.stats: Counter = Counter()
        self.events: list[tuple[int, str, str]] = []  # (at_ms, kind, key)
        self._repairing: set[str] = set()
        for p in proxies:
            p.on_degraded = self._note_degraded

    def proxy_for(self, key: str) -> Proxy:
        return self._by_addr[self.ring.select(key)]

    @staticmethod
    def _check_key(key: str) -> None:
        if not key or SEQ_SEP in key:
            raise ValueError(f"invalid object key: {key!r}")

    # ------------------------------------------------------------------

    def put(self, key: str, value: bytes) -> SimFuture:
        self._check_key(key)
        proxy = self.proxy_for(key)
        if proxy.contains(key):
            proxy.submit_del(key)  # invalidate before overwrite
        self.stats["puts"] += 1
        return self._insert(proxy, key, value)

    def _insert(self, proxy: Proxy, key: str, value: bytes) -> SimFuture:
        chunks = encode(value, self.ec, key)
        placements = self.rng.sample(proxy.pool_node_ids, self.ec.n)
        return proxy.route_put(key, self.ec, placements, chunks,
                               original_len=len(value))

    def get(self, key: str) -> SimFuture:
        self._check_key(key)
        proxy = self.proxy_for(key)
        out = SimFuture()
        self.stats["gets"] += 1
        proxy.route_get(key).add_done_callback(
            lambda f: self._on_get(f, key, proxy, out))
        return out

    def delete(self, key: str) -> SimFuture:
        self._check_key(key)
        self.stats["dels"] += 1
        return self.proxy_for(key).submit_del(key)

    # ------------------------------------------------------------------

    def _on_get(self, f: SimFuture, key: str, proxy: Proxy,
                out: SimFuture) -> None:
        err = f.error
        if err is None:
            res = f.result()
            value = self._assemble(res)
            self.stats["hits"] += 1
            if res.failed and self.cfg.degraded_repair:
                self._repair(proxy, key, value)
            out.set_result(value)
        elif isinstance(err, CacheMiss):
            self.stats["misses"] += 1
            if self.backing is None:
                out.set_error(err)
                return
            value = self.backing.fetch(key)
            self._reinsert(proxy, key, value)
            out.set_result(value)
        elif isinstance(err, ObjectLost):
            # the read proved > p chunks gone: refetch and start over
            self.stats["misses"] += 1
            self.stats["losses"] += 1
            if self.backing is None:
                out.set_error(err)
                return
            self.stats["resets"] += 1
            self.events.append((self._loop.now, "reset", key))
            value = self.backing.fetch(key)
            proxy.submit_del(key)
            self._reinsert(proxy, key, value)
            out.set_result(value)
        else:
            out.set_error(err)

    def _assemble(self, res) -> bytes:
        chunks = [
            Chunk(ChunkId(res.key, seq), payload, len(payload))
            for seq, payload in res.parts.items()
        ]
        return decode(chunks, res.ec, res.original_len)

    def _repair(self, proxy: Proxy, key: str, value: bytes) -> None:
        """A read succeeded but some placements failed: re-spread the
        object across fresh nodes before more chunks disappear."""
        if key in self._repairing:
            return
        self._repairing.add(key)
        self.stats["recoveries"] += 1
        self.events.append((self._loop.now, "repair", key))
        proxy.submit_del(key)
        self._reinsert(proxy, key, value,
                       on_done=lambda: self._repairing.discard(key))

    def _note_degraded(self, key: str) -> None:
        # a chunk-missing report straggled in after its read was served;
        # the decoded value is gone by now, so restore from the backing
        if not self.cfg.degraded_repair or self.backing is None:
            return
        if key in self._repairing:
            return
        proxy = self.proxy_for(key)
        if not proxy.contains(key):
            return
        self._repairing.add(key)
        self.stats["recoveries"] += 1
        self.events.append((self._loop.now, "repair", key))
        value = self.backing.fetch(key)
        proxy.submit_del(key)
        self._reinsert(proxy, key, value,
                       on_done=lambda: self._repairing.discard(key))

    def _reinsert(self, proxy: Proxy, key: str, value: bytes,
                  on_done=None) -> None:
        fut = self._insert(proxy, key, value)

        def note(f):
            if f.error is not None:
                self.stats["reinsert_failures"] += 1
            if on_done is not None:
                on_done()
        fut.add_done_callback(note)

    # ------------------------------------------------------------------

    def check_stats(self) -> None:
        assert self.stats["hits"] + self.stats["misses"] == self.stats["gets"]
        assert self.stats["resets"] <= self.stats["misses"]
