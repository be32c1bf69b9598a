"""Per-node set-associative DRAM cache in front of the remote memory pool.

Reads of buffers in a cacheable region are served at local latency on a hit;
a miss fetches the whole line (one buffer class worth) with a pipelined bulk
transfer, evicting the LRU victim of the set.  Stores use a write-around
policy: they go straight to the pool device and drop any cached copy.
Freeing a buffer flushes its line, which keeps a line valid in at most one
node's cache at a time.
"""

from __future__ import annotations

from typing import Optional

from .mem_pool import BufferRef, MemoryPool, Region
from .sim_core import Completion, Engine


REGION_BYTES = 512 * 2 * 1024 * 1024


class GranularityMismatch(Exception):
    """Region configured with a granularity other than its buffer class."""


class CacheTags:
    """Pure tag/LRU state for one granularity slice of the cache."""

    def __init__(self, capacity: int, ways: int, line_size: int):
        if ways < 2:
            raise ValueError("cache must be at least 2-way")
        if capacity % (ways * line_size):
            raise ValueError("capacity must divide into ways * line_size")
        self.ways = ways
        self.line_size = line_size
        self.num_sets = capacity // (ways * line_size)
        if self.num_sets < 1:
            raise ValueError("cache too small for one set")
        # set index -> {line_key: [lru_tick, dirty]}
        self.sets: dict[int, dict[int, list]] = {}
        self._tick = 0

    def _set_for(self, key: int) -> dict:
        return self.sets.setdefault(key % self.num_sets, {})

    def lookup(self, key: int) -> bool:
        entry = self._set_for(key).get(key)
        if entry is None:
            return False
        self._tick += 1
        entry[0] = self._tick
        return True

    def fill(self, key: int) -> Optional[tuple[int, bool]]:
        """Insert key; returns (victim_key, victim_dirty) when a line was
        evicted to make room."""
        s = self._set_for(key)
        victim = None
        if key not in s and len(s) >= self.ways:
            victim_key = min(s, key=lambda k: s[k][0])
            victim = (victim_key, s[victim_key][1])
            del s[victim_key]
        self._tick += 1
        s[key] = [self._tick, False]
        return victim

    def invalidate(self, key: int) -> Optional[bool]:
        """Drop key if present; returns its dirty flag, or None if absent."""
        s = self.sets.get(key % self.num_sets)
        if s is None or key not in s:
            return None
        dirty = s[key][1]
        del s[key]
        return dirty

    def mark_dirty(self, key: int) -> None:
        s = self._set_for(key)
        if key in s:
            s[key][1] = True

    def occupancy(self, set_idx: int) -> int:
        return len(self.sets.get(set_idx, {}))

    def valid_keys(self) -> list[int]:
        keys = []
        for s in self.sets.values():
            keys.extend(s.keys())
        return keys


class CacheDirectory:
    """Cross-node exclusivity assertion: a line lives in one cache at most.

    This is a model invariant check (descriptor hand-off plus flush-on-free
    guarantee it), not simulated hardware.
    """

    def __init__(self):
        self._holders: dict[tuple[int, int], int] = {}
        self._caches: dict[int, "DramCache"] = {}

    def attach(self, cn_id: int, cache: "DramCache") -> None:
        self._caches[cn_id] = cache

    def on_fill(self, cn_id: int, gran: int, key: int) -> None:
        holder = self._holders.get((gran, key))
        if holder is not None and holder != cn_id:
            raise AssertionError(
                f"line {key} (gran {gran}) filled by CN {cn_id} while still "
                f"valid in CN {holder}'s cache"
            )
        self._holders[(gran, key)] = cn_id

    def on_drop(self, cn_id: int, gran: int, key: int) -> None:
        if self._holders.get((gran, key)) == cn_id:
            del self._holders[(gran, key)]

    def invalidate_everywhere(self, ref: BufferRef) -> None:
        """Invalidate any cached copy of ref (NIC DMA writes bypass caches)."""
        for cache in self._caches.values():
            cache.drop(ref)


class CacheTiming:
    """Timing callbacks wired up by the system builder.

    local_read(nbytes)                 -> Completion  (hit service)
    pool_access(ref, nbytes, direction)-> Completion  (windowed pool access)
    fill(ref, nbytes)                  -> Completion  (bulk line fetch)
    writeback(ref, nbytes)             -> Completion  (bulk dirty line store)
    """

    def __init__(self, local_read, pool_access, fill, writeback):
        self.local_read = local_read
        self.pool_access = pool_access
        self.fill = fill
        self.writeback = writeback


class DramCache:
    def __init__(self, engine: Engine, cn_id: int, pool: MemoryPool,
                 capacity: int, ways: int, timing: CacheTiming,
                 directory: CacheDirectory, enabled: bool = True):
        self._engine = engine
        self.cn_id = cn_id
        self.pool = pool
        self.capacity = capacity
        self.ways = ways
        self.timing = timing
        self.directory = directory
        self.enabled = enabled
        self._slices: dict[int, CacheTags] = {}
        self._footprints: dict[int, int] = {}
        directory.attach(cn_id, self)

    # -- configuration -----------------------------------------------------

    def configure_region(self, region: Region, cacheable: bool,
                         granularity: int) -> None:
        for sec_id in range(region.first_section(),
                            min(region.last_section() + 1,
                                len(self.pool.sections))):
            cls = self.pool.sections[sec_id].buffer_class
            if cls is not None and cls != granularity:
                raise GranularityMismatch(
                    f"region {region.id} holds {cls} B buffers, "
                    f"cannot cache at {granularity} B"
                )
        region.cacheable = cacheable
        region.granularity = granularity if cacheable else None
        if cacheable:
            self._footprints[granularity] = (
                self._footprints.get(granularity, 0) + REGION_BYTES
            )
            self._rebuild_slices()

    def _rebuild_slices(self) -> None:
        total = sum(self._footprints.values())
        self._slices = {}
        for gran, footprint in sorted(self._footprints.items()):
            share = self.capacity * footprint // total
            sets = max(1, share // (self.ways * gran))
            self._slices[gran] = CacheTags(sets * self.ways * gran,
                                           self.ways, gran)

    # -- lookups -----------------------------------------------------------

    def _line(self, ref: BufferRef) -> Optional[tuple[CacheTags, int, int]]:
        if not self.enabled:
            return None
        region = self.pool.region_of(ref)
        if not region.cacheable:
            return None
        gran = region.granularity
        if ref.class_bytes != gran:
            return None  # off-class packets (control frames) stay uncached
        tags = self._slices.get(gran)
        if tags is None:
            return None
        return tags, gran, ref.addr // gran

    def is_cacheable(self, ref: BufferRef) -> bool:
        return self._line(ref) is not None

    # -- data path ---------------------------------------------------------

    def ensure(self, ref: BufferRef) -> tuple[Completion, bool]:
        """Make ref's line servable locally.

        Returns (completion, hit).  On a miss the completion fires when the
        line fill lands; on a hit (or uncacheable ref) it fires immediately.
        """
        line = self._line(ref)
        done = Completion(self._engine)
        if line is None:
            done.fire()
            return done, False
        tags, gran, key = line
        metrics = self._engine.metrics
        if tags.lookup(key):
            metrics.count("cache_hits")
            done.fire()
            return done, True
        metrics.count("cache_misses")
        victim = tags.fill(key)
        self.directory.on_fill(self.cn_id, gran, key)
        if victim is not None:
            self.directory.on_drop(self.cn_id, gran, victim[0])
            if victim[1]:
                self.timing.writeback(ref, gran)
        self.timing.fill(ref, gran).subscribe(lambda _v: done.fire())
        return done, False

    def read(self, ref: BufferRef, nbytes: Optional[int] = None) -> Completion:
        """Full read: fill on miss, then local-latency service (or a direct
        pool access when the buffer is not cacheable)."""
        nbytes = ref.len if nbytes is None else nbytes
        line = self._line(ref)
        if line is None:
            return self.timing.pool_access(ref, nbytes, "in")
        done = Completion(self._engine)
        fill_done, _hit = self.ensure(ref)

        def after_fill(_value):
            self.timing.local_read(nbytes).subscribe(lambda _v: done.fire())

        fill_done.subscribe(after_fill)
        return done

    def local_service(self, nbytes: int) -> Completion:
        """Hit-path service for a line already ensured present."""
        return self.timing.local_read(nbytes)

    def write_around(self, ref: BufferRef, nbytes: Optional[int] = None) -> Completion:
        """Store directly to the pool device, dropping any cached copy."""
        self.drop(ref)
        return self.timing.pool_access(
            ref, ref.len if nbytes is None else nbytes, "out")

    def flush(self, ref: BufferRef) -> None:
        """Invalidate ref's line; dirty data is written back first."""
        line = self._line(ref)
        if line is None:
            return
        tags, gran, key = line
        dirty = tags.invalidate(key)
        if dirty is None:
            return
        self.directory.on_drop(self.cn_id, gran, key)
        if dirty:
            self.timing.writeback(ref, gran)

    def drop(self, ref: BufferRef) -> None:
        """Invalidate without write-back (write-around stores, DMA writes)."""
        line = self._line(ref)
        if line is None:
            return
        tags, gran, key = line
        if tags.invalidate(key) is not None:
            self.directory.on_drop(self.cn_id, gran, key)

    def mark_dirty(self, ref: BufferRef) -> None:
        line = self._line(ref)
        if line is not None:
            tags, _gran, key = line
            tags.mark_dirty(key)
