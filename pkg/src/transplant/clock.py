"""Deterministic virtual clock.

Wall-clock timings at this scale are noise-dominated, so every store
operation advances a shared virtual clock by a fixed cost, plus a
size-proportional transfer cost for moving node payloads. All rate,
continuity, and scaling metrics are expressed in these units, which makes
every experiment reproducible from its seed.
"""

from __future__ import annotations

import threading

# Cost units per elementary operation.
COST_READ = 1
COST_LOOKUP = 1
COST_INSERT = 2
COST_INSERT_BATCHED = 1  # bulk copies amortize the round trip
COST_UPDATE = 2
COST_DELETE = 3  # tombstone + index maintenance
COST_FLAG = 1
# Each journaled record is an individually committed, synced transaction;
# the sync dominates (one fsync is worth tens of row operations). Bulk
# copies pay it once per batch, ordered node moves once per node.
COST_WAL_BASE = 60
COST_WAL_LIGHT = 2  # display admissions journal a flag flip, no pre-images
COST_WAL_PER_ROW = 1
COST_TRACK_ROW = 1
COST_BAG = 2
COST_SCAN_CHUNK = 16  # rows covered per scan cost unit


class VirtualClock:
    def __init__(self):
        self.now = 0
        self._lock = threading.Lock()
        self._meters: dict[str, int] = {}
        self._local = threading.local()

    def advance(self, units: int) -> int:
        if units <= 0:
            return self.now
        meter = getattr(self._local, "meter", None)
        concurrent = getattr(self._local, "concurrent", False)
        with self._lock:
            if meter:
                self._meters[meter] = self._meters.get(meter, 0) + units
            if not concurrent:
                # concurrent services (validation threads) do their work off
                # the migration's critical path: metered, but time stands
                self.now += units
            return self.now

    def set_meter(self, name: str | None, concurrent: bool = False):
        """Attribute subsequent charges from this thread to a named meter."""
        self._local.meter = name
        self._local.concurrent = concurrent and name is not None

    def meter_total(self, name: str) -> int:
        with self._lock:
            return self._meters.get(name, 0)
