"""Client library tests: ring placement, round-trips through a live pool,
miss fill, degraded-read repair, and loss resets."""

import pytest

from fncache.client import CacheClient, HashRing, SyntheticStore
from fncache.config import SystemConfig
from fncache.node import NodeRuntime
from fncache.proxy import CacheMiss, Proxy
from fncache.sim import FunctionSpec, Simulation


def make_sim(**over):
    base = dict(pool_size=16, lambda_memory_mb=128, seed=23, ec="2+1",
                net_latency_ms=1, wire_check=True)
    base.update(over)
    return Simulation(SystemConfig.from_dict(base))


def pump_until(sim, pred, limit_ms=300_000):
    while not pred():
        nxt = sim.loop.peek()
        if nxt is None or sim.loop.now > limit_ms:
            raise AssertionError("condition not reached in time")
        sim.loop.step()


def run_fut(sim, fut, limit_ms=300_000):
    pump_until(sim, lambda: fut.done, limit_ms)
    return fut.result()


def add_node(sim, node_id, **kw):
    runtimes = []

    def factory(ctx):
        rt = NodeRuntime(ctx, **kw)
        runtimes.append((ctx.replica_index, rt))
        return rt

    sim.provider.register(
        FunctionSpec(node_id, memory_mb=sim.cfg.lambda_memory_mb), factory)
    return runtimes


def build_pool(sim, n, prefix="n", addr="proxy0", **node_kw):
    ids = [f"{prefix}{i}" for i in range(n)]
    handles = {nid: add_node(sim, nid, **node_kw) for nid in ids}
    return Proxy(sim, sim.cfg, ids, addr=addr), handles


# ---------------------------------------------------------------------------
# hash ring
# ---------------------------------------------------------------------------


class TestHashRing:
    def test_balance_within_15_percent(self):
        ring = HashRing([f"p{i}" for i in range(4)])
        counts = {f"p{i}": 0 for i in range(4)}
        n_keys = 10_000
        for i in range(n_keys):
            counts[ring.select(f"key{i}")] += 1
        expected = n_keys / 4
        for member, c in counts.items():
            assert 0.85 * expected <= c <= 1.15 * expected, (member, c)

    def test_removal_remaps_only_the_lost_quarter(self):
        members = [f"p{i}" for i in range(4)]
        ring = HashRing(members)
        n_keys = 10_000
        before = {f"key{i}": ring.select(f"key{i}") for i in range(n_keys)}
        ring.remove("p3")
        moved = 0
        for key, owner in before.items():
            now = ring.select(key)
            if owner == "p3":
                moved += 1
                assert now != "p3"
            else:
                # consistency: survivors keep every key they already owned
                assert now == owner
        frac = moved / n_keys
        assert 0.25 * 0.9 <= frac <= 0.25 * 1.1, frac

    def test_same_key_same_member(self):
        ring = HashRing(["a", "b", "c"])
        picks = {ring.select("stable-key") for _ in range(50)}
        assert len(picks) == 1

    def test_add_remove_guards(self):
        ring = HashRing(["a"])
        with pytest.raises(ValueError):
            ring.add("a")
        with pytest.raises(ValueError):
            ring.remove("zz")
        ring.remove("a")
        with pytest.raises(LookupError):
            ring.select("k")


# ---------------------------------------------------------------------------
# synthetic backing store
# ---------------------------------------------------------------------------


class TestSyntheticStore:
    def test_fetch_is_deterministic(self):
        s1, s2 = SyntheticStore(), SyntheticStore()
        assert s1.fetch("k") == s2.fetch("k")
        assert s1.fetch("k") == s1.fetch("k")
        assert s1.fetch("k") != s1.fetch("other")
        assert s1.fetches == 5

    def test_sizes_are_sticky(self):
        s = SyntheticStore(default_size=64)
        s.set_size("big", 4096)
        assert len(s.fetch("big")) == 4096
        assert len(s.fetch("small")) == 64
        with pytest.raises(ValueError):
            s.set_size("big", 128)


# ---------------------------------------------------------------------------
# cache round trips
# ---------------------------------------------------------------------------


class TestClientRoundTrip:
    def test_put_get_various_sizes(self):
        sim = make_sim(ec="2+1")
        proxy, _ = build_pool(sim, 5)
        client = CacheClient([proxy], sim.cfg)
        values = {
            "tiny": b"x",
            "seven": b"1234567",
            "even": bytes(range(256)) * 4,
            "odd": b"\x9e" * 3001,  # not a multiple of d
        }
        for key, value in values.items():
            assert run_fut(sim, client.put(key, value)) is True
        for key, value in values.items():
            assert run_fut(sim, client.get(key)) == value
        client.check_stats()
        assert client.stats["hits"] == 4
        assert client.stats["misses"] == 0
        proxy.check_consistency()

    def test_placements_distinct_and_deterministic(self):
        def one_run():
            sim = make_sim(ec="2+1", seed=99)
            proxy, _ = build_pool(sim, 8)
            client = CacheClient([proxy], sim.cfg)
            for i in range(6):
                run_fut(sim, client.put(f"k{i}", bytes([i + 1]) * 500))
            return {k: dict(m.placements) for k, m in proxy.mapping.items()}

        first, second = one_run(), one_run()
        assert first == second  # same seed, same spread
        for placements in first.values():
            assert len(set(placements.values())) == 3

    def test_overwrite_invalidates_first(self):
        sim = make_sim(ec="2+1")
        proxy, handles = build_pool(sim, 8)
        client = CacheClient([proxy], sim.cfg)
        run_fut(sim, client.put("k", b"old" * 400))
        first_nodes = set(proxy.mapping["k"].placements.values())
        v1 = proxy.mapping["k"].version
        run_fut(sim, client.put("k", b"new" * 200))
        v2 = proxy.mapping["k"].version
        assert v2 > v1
        assert run_fut(sim, client.get("k")) == b"new" * 200
        sim.run_until_idle()
        # chunks of the first insert are gone even on abandoned nodes
        second_nodes = set(proxy.mapping["k"].placements.values())
        for nid in first_nodes - second_nodes:
            _idx, rt = handles[nid][-1]
            assert "k#0" not in rt.store.entries
            assert rt.store.total_bytes == 0
        proxy.check_consistency()

    def test_get_without_backing_propagates_miss(self):
        sim = make_sim(ec="2+1")
        proxy, _ = build_pool(sim, 4)
        client = CacheClient([proxy], sim.cfg)
        fut = client.get("ghost")
        pump_until(sim, lambda: fut.done)
        assert isinstance(fut.error, CacheMiss)
        client.check_stats()

    def test_keys_with_separator_rejected(self):
        sim = make_sim(ec="2+1")
        proxy, _ = build_pool(sim, 4)
        client = CacheClient([proxy], sim.cfg)
        with pytest.raises(ValueError):
            client.put("bad#key", b"v")
        with pytest.raises(ValueError):
            client.get("")


class TestMultiPool:
    def test_keys_spread_over_pools_and_stay_put(self):
        sim = make_sim(ec="2+1")
        pa, _ = build_pool(sim, 4, prefix="a", addr="proxyA")
        pb, _ = build_pool(sim, 4, prefix="b", addr="proxyB")
        client = CacheClient([pa, pb], sim.cfg)
        owners = {f"key{i}": client.proxy_for(f"key{i}").addr
                  for i in range(100)}
        assert set(owners.values()) == {"proxyA", "proxyB"}
        for key, addr in owners.items():
            assert client.proxy_for(key).addr == addr
        run_fut(sim, client.put("key0", b"q" * 100))
        holder = client.proxy_for("key0")
        other = pb if holder is pa else pa
        assert holder.contains("key0") and not other.contains("key0")


# ---------------------------------------------------------------------------
# repair paths
# ---------------------------------------------------------------------------


class TestRepair:
    def test_miss_fills_from_backing(self):
        sim = make_sim(ec="2+1")
        proxy, _ = build_pool(sim, 5)
        store = SyntheticStore(default_size=900)
        client = CacheClient([proxy], sim.cfg, backing=store)
        v = run_fut(sim, client.get("fresh"))
        assert v == store.fetch("fresh")
        sim.run_until_idle()
        assert proxy.contains("fresh")
        assert run_fut(sim, client.get("fresh")) == v  # now a hit
        assert client.stats["misses"] == 1
        assert client.stats["hits"] == 1
        assert client.stats["resets"] == 0  # a plain miss is not a reset
        client.check_stats()

    def test_object_loss_resets_from_backing(self):
        sim = make_sim(ec="2+1")
        proxy, _ = build_pool(sim, 3)
        store = SyntheticStore(default_size=1200)
        client = CacheClient([proxy], sim.cfg, backing=store)
        value = store.fetch("obj")
        run_fut(sim, client.put("obj", value))
        pump_until(sim, lambda: len(sim.provider.warm_idle()) == 3)
        for inst in sim.provider.warm_idle():
            sim.provider.destroy(inst.instance_id)  # every chunk gone
        got = run_fut(sim, client.get("obj"))
        assert got == value
        assert client.stats["losses"] == 1
        assert client.stats["resets"] == 1
        assert [e[1] for e in client.events] == ["reset"]
        sim.run_until_idle()
        assert run_fut(sim, client.get("obj")) == value  # reinserted
        assert client.stats["hits"] == 1
        client.check_stats()
        proxy.check_consistency()

    def test_degraded_read_triggers_repair(self):
        delays = {}

        def delay_fn(node_id, msg):
            return delays.get(node_id, 0)

        sim = make_sim(ec="2+1")
        proxy, _ = build_pool(sim, 3, service_delay_fn=delay_fn)
        store = SyntheticStore(default_size=1000)
        client = CacheClient([proxy], sim.cfg, backing=store)
        value = store.fetch("obj")
        run_fut(sim, client.put("obj", value))
        placements = dict(proxy.mapping["obj"].placements)
        lost_node = placements[0]
        for nid in set(placements.values()):
            delays[nid] = 200  # survivors answer slowly...
        delays[lost_node] = 0  # ...the empty node reports missing fast
        pump_until(sim, lambda: len(sim.provider.warm_idle()) == 3)
        for inst in sim.provider.warm_idle():
            if inst.function_id == lost_node:
                sim.provider.destroy(inst.instance_id)

        got = run_fut(sim, client.get("obj"))
        assert got == value  # parity reconstructed the missing chunk
        assert client.stats["recoveries"] == 1
        assert ("repair", "obj") in [(k, key) for _t, k, key in client.events]
        sim.run_until_idle()
        # the repair re-spread the object; reading it back is clean now
        assert run_fut(sim, client.get("obj")) == value
        assert client.stats["recoveries"] == 1  # no repeat repair
        assert client.stats["resets"] == 0
        client.check_stats()
        proxy.check_consistency()

    def test_late_missing_chunk_report_triggers_repair(self):
        # the dead node answers only after a cold start, long past the
        # first-d resolve; the straggler report must still heal the object
        sim = make_sim(ec="2+1")
        proxy, _ = build_pool(sim, 3)
        store = SyntheticStore(default_size=1000)
        client = CacheClient([proxy], sim.cfg, backing=store)
        value = store.fetch("obj")
        run_fut(sim, client.put("obj", value))
        lost_node = proxy.mapping["obj"].placements[0]
        pump_until(sim, lambda: len(sim.provider.warm_idle()) == 3)
        for inst in sim.provider.warm_idle():
            if inst.function_id == lost_node:
                sim.provider.destroy(inst.instance_id)

        got = run_fut(sim, client.get("obj"))
        assert got == value
        assert client.stats["recoveries"] == 0  # report not in yet
        sim.run_until(sim.loop.now + 1_000)  # cold start, then the report
        assert proxy.counters["late_degraded"] == 1
        assert client.stats["recoveries"] == 1
        assert ("repair", "obj") in [(k, key) for _t, k, key in client.events]
        sim.run_until_idle()
        assert run_fut(sim, client.get("obj")) == value
        assert client.stats["recoveries"] == 1  # healed, no repeat
        client.check_stats()
        proxy.check_consistency()
