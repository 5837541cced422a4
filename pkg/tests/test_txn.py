import pytest

from gtxsim.simworld import MS, US
from gtxsim.txn import Mutations, Sleep, TxnAborted, begin, begin_slave, parse_mode
from tests.conftest import Harness

SER = parse_mode("strict-ser")
SI = parse_mode("strict-si")
NONSTRICT = parse_mode("ser")


def test_mode_names():
    assert {parse_mode(m).name for m in ("strict-ser", "ser", "strict-si", "si")} == {"strict-ser", "ser",
                                                                                      "strict-si", "si"}
    with pytest.raises(ValueError):
        parse_mode("linearizable")


def test_unknown_mutation_rejected():
    with pytest.raises(ValueError):
        Mutations.parse(["skip_everything"])


def test_read_own_write_is_buffered():
    h = Harness()
    k = h.keys[0]

    def body(node):
        tx = yield from begin(node, SER)
        tx.write(k, "mine")
        v = yield from tx.read(k)
        return v, dict(tx.ctx.read_set)

    h.spawn("t", 1, body)
    status, (value, read_set) = h.run()["t"]
    assert status == "ok" and value == "mine" and k not in read_set


def test_read_only_commit_sends_nothing():
    h = Harness()

    def body(node):
        tx = yield from begin(node, SER)
        yield from tx.read(h.keys[1])
        gen = tx.commit()
        with pytest.raises(StopIteration):
            next(gen)
        return tx.ctx.state

    h.spawn("ro", 2, body)
    assert h.run()["ro"] == ("ok", "committed")


def _stale_reader(h, mode, hint):
    """Begins, lets a writer commit to the key, then reads it at the old rts."""
    k = h.keys[0]

    def writer(node):
        tx = yield from begin(node, SER)
        tx.write(k, "new")
        yield from tx.commit()

    def reader(node):
        tx = yield from begin(node, mode, hint_writes=hint)
        yield Sleep(1 * MS)
        return (yield from tx.read(k))

    h.spawn("reader", 1, reader)
    h.spawn("writer", 2, writer, delay=100 * US)
    return h.run(10)


def test_eager_validation_aborts_serializable_writer():
    res = _stale_reader(Harness(), SER, hint=True)
    assert res["writer"][0] == "ok"
    assert res["reader"] == ("aborted", "eager")


def test_snapshot_isolation_reads_old_version():
    res = _stale_reader(Harness(), SI, hint=True)
    assert res["reader"] == ("ok", 0)


def test_read_only_serializable_reads_old_version():
    res = _stale_reader(Harness(), SER, hint=False)
    assert res["reader"] == ("ok", 0)


def test_write_write_conflict_one_commits():
    h = Harness()
    k = h.keys[3]

    def body(node):
        tx = yield from begin(node, SER)
        yield from tx.read(k)
        tx.write(k, tx.id)
        yield from tx.commit()

    h.spawn("a", 1, body)
    h.spawn("b", 2, body)
    res = h.run()
    assert sorted(s for s, _ in res.values()) == ["aborted", "ok"]


def test_validation_fails_on_concurrent_writer():
    h = Harness()
    src, dst = h.keys[0], h.keys[1]

    def rw(node):
        tx = yield from begin(node, SER)
        yield from tx.read(src)
        yield Sleep(1 * MS)
        tx.write(dst, "x")
        yield from tx.commit()

    def blind(node):
        tx = yield from begin(node, SER)
        tx.write(src, "y")
        yield from tx.commit()

    h.spawn("rw", 1, rw)
    h.spawn("blind", 2, blind, delay=200 * US)
    res = h.run(10)
    assert res["blind"][0] == "ok"
    assert res["rw"] == ("aborted", "validation")


def test_abort_releases_locks():
    h = Harness()
    k = h.keys[2]

    def aborter(node):
        tx = yield from begin(node, SER)
        tx.write(k, "x")
        yield from tx._lock()
        tx.abort("user")

    def later(node):
        tx = yield from begin(node, SER)
        yield from tx.read(k)
        tx.write(k, "z")
        yield from tx.commit()

    h.spawn("aborter", 1, aborter)
    h.spawn("later", 3, later, delay=500 * US)
    res = h.run()
    assert res["aborter"] == ("aborted", "user")
    assert res["later"][0] == "ok"
    assert not any(n.store.locks_held() for n in h.nodes.values())


def test_strict_begin_waits_until_rts_is_past():
    h = Harness()
    seen = {}

    def body(node):
        tx = yield from begin(node, SER)
        seen["rts"] = tx.ctx.rts
        seen["master"] = h.world.master_time(tx.ctx.epoch)
        yield from tx.commit()

    h.spawn("t", 2, body)
    h.run()
    assert seen["master"] >= seen["rts"]


def test_nonstrict_begin_does_not_wait():
    h = Harness()
    node = h.nodes[1]
    before = node.metrics["waits"]

    def body(n):
        tx = yield from begin(n, NONSTRICT)
        yield from tx.read(h.keys[0])
        yield from tx.commit()

    h.spawn("t", 1, body)
    assert h.run()["t"][0] == "ok"
    assert node.metrics["waits"] == before


def test_slave_below_gc_local_rejected():
    h = Harness()
    node = h.nodes[1]
    node.gc.gc_local = 10**6
    with pytest.raises(TxnAborted) as e:
        begin_slave(node, 10**6 - 1)
    assert e.value.reason == "rejected_too_old"


def test_write_timestamp_above_read_timestamp():
    h = Harness()
    out = {}

    def body(node):
        tx = yield from begin(node, SER)
        tx.write(h.keys[4], "w")
        yield from tx.commit()
        out["ts"] = (tx.ctx.rts, tx.ctx.wts)

    h.spawn("t", 0, body)
    h.run()
    rts, wts = out["ts"]
    assert wts > rts
