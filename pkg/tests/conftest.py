from gtxsim.runner import Cluster, RunConfig
from gtxsim.simworld import MS
from gtxsim.txn import TxnAborted


class Harness:
    """An idle cluster plus helpers to run hand-written transactions on it."""

    def __init__(self, **kw):
        kw.setdefault("keys", 8)
        self.cluster = Cluster(RunConfig(txns=0, **kw))
        self.world = self.cluster.world
        self.nodes = self.cluster.nodes
        self.keys = self.cluster.workload.keys
        self.results: dict = {}
        # Let the first syncs land so every clock is enabled.
        self.world.run_until(2 * MS)

    def spawn(self, name, node_id, body, delay=0):
        node = self.nodes[node_id]

        def proc():
            try:
                self.results[name] = ("ok", (yield from body(node)))
            except TxnAborted as e:
                self.results[name] = ("aborted", e.reason)

        self.world.after(delay, lambda: node.spawn(proc(), name))

    def run(self, ms=5):
        self.world.run_until(self.world.now + int(ms * MS))
        return self.results
