"""Lifetime-scoped data containers over the page store.

Containers come in five kinds: UDF variables (plain objects, never
decomposed), cache blocks, sort shuffle buffers, and two hash shuffle buffers
(eagerly combining reduce, and group). Each container either decomposes its
data into a page group or keeps plain objects, as the planner decided, and
releases everything at one well-defined lifetime end event.

The coordinator owns the page store, splits the byte budget between cache and
shuffle, evicts least-recently-used cache page groups (swapping them to disk),
and asks over-budget shuffle buffers to spill sorted runs. Buffers that hold
only pointers into other groups' pages are never spilled; cache eviction is
triggered instead.
"""

from __future__ import annotations

import heapq
import os
import struct
from dataclasses import dataclass
from typing import Callable, Iterator, Optional

from .pagestore import (
    BudgetExhausted,
    Layout,
    PageInfo,
    PageStore,
    decode_object,
    encode_object,
    pack_ref,
    ref_offset,
    ref_page,
)

_LEN = struct.Struct("<i")

HIGH_PRIORITY_KINDS = ("cache", "sort", "hash-reduce", "hash-group")


class ContainerError(Exception):
    pass


class ReleasedError(ContainerError):
    """Operation on a container whose lifetime has ended."""


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def sort_key_from_bytes(key_bytes: bytes, key_layout: Optional[Layout]):
    """Total order on keys, identical in both execution modes: decoded scalars
    and primitive arrays compare naturally, anything else by encoding."""
    if key_layout is None:
        return key_bytes
    if key_layout.kind == "prim":
        return decode_object(key_bytes, key_layout)
    if key_layout.kind == "array" and key_layout.elem.kind == "prim":
        return tuple(decode_object(key_bytes, key_layout))
    return key_bytes


# ---------------------------------------------------------------------------
# Store coordinator: budget split, eviction, spill bookkeeping
# ---------------------------------------------------------------------------


@dataclass
class LifecycleEvent:
    kind: str
    container: str
    detail: str = ""


class StoreCoordinator:
    """Single owner of eviction and spill decisions for one run."""

    def __init__(
        self,
        store: PageStore,
        cache_fraction: float = 0.6,
        spill_dir: str = ".",
        budget: Optional[int] = None,
    ):
        self.store = store
        self.budget = budget if budget is not None else (
            store.max_pages * store.capacity if store.max_pages is not None else None
        )
        self.cache_fraction = cache_fraction
        self.spill_dir = spill_dir
        self.containers: list["Container"] = []
        self.events: list[LifecycleEvent] = []
        self.evictions = 0
        self.swapped_bytes = 0
        self.spill_runs = 0
        self.spill_bytes = 0
        self._swap_seq = 0
        self._pointer_marks: dict[str, int] = {}
        store.make_room = self._make_room

    # -- registry / events

    def register(self, container: "Container") -> None:
        self.containers.append(container)

    def note(self, kind: str, container: str, detail: str = "") -> None:
        self.events.append(LifecycleEvent(kind, container, detail))

    @property
    def shuffle_budget(self) -> Optional[int]:
        if self.budget is None:
            return None
        return int(self.budget * (1.0 - self.cache_fraction))

    def _shuffle_bytes(self) -> int:
        return sum(
            c.heap_bytes()
            for c in self.containers
            if c.kind in ("sort", "hash-reduce", "hash-group") and c.live
        )

    # -- eviction

    def _candidates(self, exclude: Optional[PageInfo]) -> list[PageInfo]:
        seen = []
        for c in self.containers:
            if not c.live:
                continue
            for g in c.page_groups():
                if (
                    g.live
                    and g.evictable
                    and g.sealed
                    and g.resident
                    and not g.pinned
                    and g.page_count > 0
                    and g is not exclude
                ):
                    seen.append(g)
        seen.sort(key=lambda g: g.lru_tick)
        return seen

    def evict_lru(self, bytes_needed: int, exclude: Optional[PageInfo] = None) -> list[PageInfo]:
        """Swap least-recently-used sealed cache groups to disk until
        `bytes_needed` bytes of pages are freed."""
        freed = 0
        evicted = []
        for g in self._candidates(exclude):
            if freed >= bytes_needed:
                break
            if g.swap_level == "memory":
                continue  # memory-only: discarding would need recomputation
            path = self._swap_path(g.owner_id)
            written = g.swap_out(path)
            self.swapped_bytes += written
            self.evictions += 1
            freed += g.page_count * self.store.capacity
            evicted.append(g)
            self.note("evict", g.owner_id, f"swapped {written} bytes to {os.path.basename(path)}")
        if freed == 0:
            raise BudgetExhausted(
                f"nothing evictable for {bytes_needed} bytes "
                f"({self.store.live_pages} pages live)"
            )
        return evicted

    def _make_room(self, store: PageStore, requester: PageInfo) -> None:
        self.evict_lru(store.capacity, exclude=requester)

    def _swap_path(self, owner_id: str) -> str:
        self._swap_seq += 1
        safe = owner_id.replace(":", "_").replace("/", "_")
        return os.path.join(self.spill_dir, f"{safe}.{self._swap_seq}.run")

    # -- spill

    def after_shuffle_insert(self, buf: "Container") -> None:
        budget = self.shuffle_budget
        if budget is None:
            return
        usage = self._shuffle_bytes()
        if usage <= budget:
            return
        if not getattr(buf, "spillable", False):
            # pointer-only (and object-valued group) buffers are never
            # spilled; shuffling pauses and cache pages are evicted instead.
            # Best effort, retried once per page worth of growth.
            mark = self._pointer_marks.get(buf.id)
            if mark is not None and usage - mark < self.store.capacity:
                return
            self._pointer_marks[buf.id] = usage
            try:
                self.evict_lru(self.store.capacity)
                self.note("evict-for-pointers", buf.id)
            except BudgetExhausted:
                self.note("pointer-pressure", buf.id, "nothing left to evict")
            return
        buf.spill()

    def spill_path(self, cid: str, seq: int) -> str:
        safe = cid.replace(":", "_").replace("/", "_")
        return os.path.join(self.spill_dir, f"{safe}.{seq}.run")

    def live_pages_of(self, cid: str) -> int:
        total = 0
        for c in self.containers:
            if c.id == cid and c.live:
                for g in c.page_groups():
                    if g.live and g.resident:
                        total += g.page_count
        return total


# ---------------------------------------------------------------------------
# Ownership
# ---------------------------------------------------------------------------


def assign_ownership(object_sets: dict[str, list[tuple[str, str, int]]]) -> dict[str, str]:
    """Pick the primary container for each object set.

    `object_sets` maps a set id to (container id, kind, creation sequence)
    entries. Cache blocks and shuffle buffers outrank UDF variables; among
    equals the container created first wins.
    """
    primaries: dict[str, str] = {}
    for set_id, holders in object_sets.items():
        if not holders:
            raise ContainerError(f"object set {set_id!r} has no containers")
        ranked = sorted(
            holders,
            key=lambda h: (0 if h[1] in HIGH_PRIORITY_KINDS else 1, h[2]),
        )
        primaries[set_id] = ranked[0][0]
    return primaries


# ---------------------------------------------------------------------------
# Containers
# ---------------------------------------------------------------------------


class Container:
    kind = "abstract"

    def __init__(self, cid: str, coord: StoreCoordinator):
        self.id = cid
        self.coord = coord
        self.live = True
        self.role = "primary"
        self.sealed = False
        coord.register(self)

    def page_groups(self) -> list[PageInfo]:
        return []

    def _check_live(self) -> None:
        if not self.live:
            raise ReleasedError(f"container {self.id} was released")

    def seal(self) -> None:
        self.sealed = True
        for g in self.page_groups():
            g.sealed = True

    def release(self) -> None:
        if not self.live:
            raise ReleasedError(f"container {self.id} released twice")
        for g in self.page_groups():
            if g.live:
                g.release()
        self.live = False
        self.coord.note("release", self.id)

    # cost accounting (object mode): subclasses update on insert
    nodes = 0
    model_bytes = 0

    def trace_cost(self) -> int:
        """Simulated per-epoch tracing cost: reachable managed nodes."""
        raise NotImplementedError

    def heap_bytes(self) -> int:
        raise NotImplementedError


class UDFVars(Container):
    """Objects owned by UDF variables are never decomposed; this container
    only accounts for them."""

    kind = "udfvars"

    def __init__(self, cid: str, coord: StoreCoordinator):
        super().__init__(cid, coord)
        self.created = 0

    def note_object(self, n: int = 1) -> None:
        self.created += n

    def trace_cost(self) -> int:
        return 0  # short-living; reclaimed by the cheap young-generation path

    def heap_bytes(self) -> int:
        return 0


class CacheBlock(Container):
    """One block of a cached dataset: a page group of encoded segments when
    decomposed, else a list of objects."""

    kind = "cache"

    def __init__(
        self,
        cid: str,
        coord: StoreCoordinator,
        elem_layout: Optional[Layout],
        decomposed: bool,
        instantiate=None,
        cost_fn: Optional[Callable] = None,
        swap_level: str = "disk",
    ):
        super().__init__(cid, coord)
        self.elem_layout = elem_layout
        self.decomposed = decomposed and elem_layout is not None
        self.instantiate = instantiate
        self.cost_fn = cost_fn
        self.objects: list = []
        self.group: Optional[PageInfo] = None
        self.count = 0
        self.never_decompose = False
        self.swap_level = swap_level
        self.obj_nodes = 0
        self.obj_bytes = 0
        if self.decomposed:
            self.group = coord.store.new_group(cid)
            self.group.evictable = True
            self.group.swap_level = swap_level
            coord.note("allocate", cid, "page group")

    def page_groups(self) -> list[PageInfo]:
        return [self.group] if self.group is not None else []

    def put(self, item) -> None:
        """StaticFixed/RuntimeFixed items are encoded into the page group;
        Variable items stay objects."""
        self._check_live()
        if self.sealed:
            raise ContainerError(f"cache {self.id}: put after seal")
        if self.decomposed:
            self.group.append_segment(encode_object(item, self.elem_layout))
        else:
            self.objects.append(item)
            if self.cost_fn is not None:
                n, b = self.cost_fn(item)
                self.obj_nodes += n
                self.obj_bytes += b
        self.count += 1

    def put_encoded(self, data: bytes) -> None:
        self._check_live()
        self.group.append_segment(data)
        self.count += 1

    def iter_values(self) -> Iterator:
        self._check_live()
        if self.decomposed:
            lay = self.elem_layout
            group = self.group
            for p in range(group.page_count):
                page = group._page(p)
                off = 0
                end = group.used[p]
                while off < end:
                    size = lay.size_at(page, off)
                    yield decode_object(page, lay, off, self.instantiate)
                    off += size
        else:
            yield from self.objects

    def iter_refs(self) -> Iterator[int]:
        self._check_live()
        if not self.decomposed:
            raise ContainerError(f"cache {self.id} holds objects, not segments")
        yield from self.group.scan(self.elem_layout)

    def adopt_group(self, primary: "CacheBlock") -> None:
        """Fully-decomposable same-set sharing: take a page-info copy of the
        primary's group; zero bytes move."""
        self._check_live()
        if self.group is not None and self.group.live:
            self.group.release()
        primary.group.retain()
        self.group = primary.group
        self.decomposed = True
        self.elem_layout = primary.elem_layout
        self.count = primary.count
        self.role = "secondary"
        self.coord.note("share", self.id, f"page-info copy of {primary.id}")

    def reconstruct(self, evidence: str) -> None:
        """A later phase resizes elements: rebuild objects, drop the page
        group, and never decompose this block again."""
        self._check_live()
        if not self.decomposed:
            return
        self.objects = list(self.iter_values())
        if self.cost_fn is not None:
            for item in self.objects:
                n, b = self.cost_fn(item)
                self.obj_nodes += n
                self.obj_bytes += b
        self.group.release()
        self.group = None
        self.decomposed = False
        self.never_decompose = True
        self.sealed = False
        self.coord.note("reconstruct", self.id, evidence)

    def release(self) -> None:
        super().release()
        self.objects = []

    def unpersist(self) -> None:
        self.release()
        self.coord.note("unpersist", self.id)

    def trace_cost(self) -> int:
        if self.decomposed:
            # pages plus the page-info and the block handle itself
            return (self.group.page_count if self.group is not None else 0) + 2
        return self.obj_nodes

    def heap_bytes(self) -> int:
        if self.decomposed:
            return self.group.page_count * self.coord.store.capacity if self.group else 0
        return self.obj_bytes


class _OpenTable:
    """Open addressing, linear probing, load factor 0.7, capacity doubling.
    Slots store entry index + 1; entries append in insertion order."""

    __slots__ = ("slots", "hashes", "count", "_mask", "_hash_memo")

    def __init__(self, initial: int = 64):
        size = 1
        while size < initial:
            size <<= 1
        self.slots = [0] * size
        self.hashes: list[int] = []
        self.count = 0
        self._mask = size - 1
        self._hash_memo: dict[bytes, int] = {}

    def hash_of(self, key_bytes: bytes) -> int:
        h = self._hash_memo.get(key_bytes)
        if h is None:
            h = fnv1a64(key_bytes)
            self._hash_memo[key_bytes] = h
        return h

    def lookup(self, key_bytes: bytes, key_eq: Callable[[int, bytes], bool]):
        """Returns (entry_index or None, slot position)."""
        h = self.hash_of(key_bytes)
        mask = self._mask
        slots = self.slots
        i = h & mask
        while True:
            ref = slots[i]
            if ref == 0:
                return None, i
            idx = ref - 1
            if self.hashes[idx] == h and key_eq(idx, key_bytes):
                return idx, i
            i = (i + 1) & mask

    def add(self, slot_pos: int, key_bytes: bytes) -> int:
        idx = self.count
        self.hashes.append(self.hash_of(key_bytes))
        self.slots[slot_pos] = idx + 1
        self.count += 1
        if (self.count + 1) * 10 > len(self.slots) * 7:
            self._grow()
        return idx

    def _grow(self) -> None:
        new_size = len(self.slots) * 2
        mask = new_size - 1
        slots = [0] * new_size
        for idx, h in enumerate(self.hashes):
            i = h & mask
            while slots[i]:
                i = (i + 1) & mask
            slots[i] = idx + 1
        self.slots = slots
        self._mask = mask


class HashReduceBuffer(Container):
    """Eagerly combining keyed buffer. The first insert of a key appends the
    key and value segments; later inserts combine into the existing value,
    reusing its page segment in place when the value type is StaticFixed."""

    kind = "hash-reduce"

    def __init__(
        self,
        cid: str,
        coord: StoreCoordinator,
        key_layout: Optional[Layout],
        val_layout: Optional[Layout],
        combine: Callable,
        decompose_keys: bool,
        decompose_vals: bool,
        instantiate=None,
    ):
        super().__init__(cid, coord)
        self.key_layout = key_layout
        self.val_layout = val_layout
        self.combine = combine
        self.decompose_keys = decompose_keys and key_layout is not None
        self.decompose_vals = (
            decompose_vals and val_layout is not None and val_layout.const_size is not None
        )
        self.instantiate = instantiate
        self.table = _OpenTable()
        self.group: Optional[PageInfo] = None
        if self.decompose_keys or self.decompose_vals:
            self.group = coord.store.new_group(cid)
            coord.note("allocate", cid, "page group")
        # pointer elision: both sides fixed-size in pages, offsets are arithmetic
        self.elided = (
            self.decompose_keys
            and self.decompose_vals
            and key_layout.const_size is not None
        )
        if self.elided:
            self._pair = key_layout.const_size + val_layout.const_size
            self._per_page = coord.store.capacity // self._pair
        self.key_bytes_list: list[bytes] = []  # probe comparisons
        self.entries: list = []  # non-elided: [key_repr, val_repr] per entry
        self.appended_total = 0
        self.spillable = True
        self.spill_seq = 0
        self.spill_files: list[str] = []
        self.total_inserts = 0

    def page_groups(self) -> list[PageInfo]:
        return [self.group] if self.group is not None else []

    # ref arithmetic for the elided layout
    def _key_ref(self, idx: int) -> int:
        return pack_ref(idx // self._per_page, (idx % self._per_page) * self._pair)

    def _val_ref(self, idx: int) -> int:
        r = self._key_ref(idx)
        return pack_ref(ref_page(r), ref_offset(r) + self.key_layout.const_size)

    def _key_eq(self, idx: int, key_bytes: bytes) -> bool:
        return self.key_bytes_list[idx] == key_bytes

    def insert(self, key_bytes: bytes, key_value, value) -> None:
        self._check_live()
        self.total_inserts += 1
        idx, slot = self.table.lookup(key_bytes, self._key_eq)
        if idx is None:
            idx = self.table.add(slot, key_bytes)
            self.key_bytes_list.append(key_bytes)
            if self.elided:
                self.group.reserve(self._pair)
            key_repr = self._append_key(key_bytes, key_value)
            val_repr = self._append_val(value)
            if not self.elided:
                self.entries.append([key_repr, val_repr])
        else:
            old = self._value_at(idx)
            merged = self.combine(old, value)
            self._store_val(idx, merged)
        self.coord.after_shuffle_insert(self)

    def _append_key(self, key_bytes: bytes, key_value):
        if self.decompose_keys:
            self.appended_total += 1
            return self.group.append_segment(key_bytes)
        return key_value

    def _append_val(self, value):
        if self.decompose_vals:
            self.appended_total += 1
            return self.group.append_segment(encode_object(value, self.val_layout))
        return value

    def _value_at(self, idx: int):
        if self.decompose_vals:
            ref = self._val_ref(idx) if self.elided else self.entries[idx][1]
            data = self.group.read_segment(ref, self.val_layout.const_size)
            return decode_object(data, self.val_layout, 0, self.instantiate)
        return self._val_repr(idx)

    def _val_repr(self, idx: int):
        return self.entries[idx][1]

    def _store_val(self, idx: int, value) -> None:
        if self.decompose_vals:
            ref = self._val_ref(idx) if self.elided else self.entries[idx][1]
            self.group.write_segment(ref, encode_object(value, self.val_layout))
        else:
            self.entries[idx][1] = value

    def _key_value_at(self, idx: int):
        if self.decompose_keys:
            return decode_object(self.key_bytes_list[idx], self.key_layout, 0, self.instantiate)
        return self.entries[idx][0]

    def _sorted_indices(self) -> list[int]:
        keys = [sort_key_from_bytes(kb, self.key_layout) for kb in self.key_bytes_list]
        return sorted(range(self.table.count), key=lambda i: keys[i])

    # -- spill

    def spill(self) -> str:
        """Write the current contents as one key-sorted run and reset."""
        self._check_live()
        self.spill_seq += 1
        path = self.coord.spill_path(self.id, self.spill_seq)
        written = 0
        with open(path, "wb") as fh:
            for idx in self._sorted_indices():
                kb = self.key_bytes_list[idx]
                vb = self._val_bytes(idx)
                fh.write(_LEN.pack(len(kb)))
                fh.write(kb)
                fh.write(_LEN.pack(len(vb)))
                fh.write(vb)
                written += 8 + len(kb) + len(vb)
        self.spill_files.append(path)
        self.coord.spill_runs += 1
        self.coord.spill_bytes += written
        self.coord.note("spill", self.id, f"run {self.spill_seq}, {written} bytes")
        # reset in-memory state; the page group is reclaimed in bulk
        if self.group is not None:
            self.group.release()
            self.group = self.coord.store.new_group(self.id)
        self.table = _OpenTable()
        self.key_bytes_list = []
        self.entries = []
        return path

    def _val_bytes(self, idx: int) -> bytes:
        if self.decompose_vals:
            ref = self._val_ref(idx) if self.elided else self.entries[idx][1]
            return self.group.read_segment(ref, self.val_layout.const_size)
        return encode_object(self._val_repr(idx), self.val_layout)

    def iter_sorted(self) -> Iterator[tuple]:
        """(key value, combined value) pairs in canonical key order, merging
        any spilled runs with one buffered page per run."""
        self._check_live()
        mem = (
            (sort_key_from_bytes(self.key_bytes_list[i], self.key_layout),
             self.key_bytes_list[i], self._val_bytes(i))
            for i in self._sorted_indices()
        )
        streams = [_run_reader(path, self.key_layout, self.coord.store.capacity)
                   for path in self.spill_files]
        streams.append(mem)
        merged = heapq.merge(*streams, key=lambda rec: rec[0])
        prev_key = prev_kb = None
        acc = None
        for _sk, kb, vb in merged:
            val = decode_object(vb, self.val_layout, 0, self.instantiate)
            if prev_kb == kb:
                acc = self.combine(acc, val)
            else:
                if prev_kb is not None:
                    yield prev_key, acc
                prev_kb = kb
                prev_key = decode_object(kb, self.key_layout, 0, self.instantiate)
                acc = val
        if prev_kb is not None:
            yield prev_key, acc

    @property
    def distinct_keys(self) -> int:
        return self.table.count

    def trace_cost(self) -> int:
        pages = sum(g.page_count for g in self.page_groups())
        if self.decompose_vals and self.decompose_keys:
            # pages, the table slots array, key hash list, container handle
            return pages + 4
        per_entry = 1 + (0 if self.decompose_keys else 1) + (0 if self.decompose_vals else 1)
        return pages + 4 + per_entry * self.table.count

    def heap_bytes(self) -> int:
        return sum(g.page_count for g in self.page_groups()) * self.coord.store.capacity


def _run_reader(path: str, key_layout: Optional[Layout], buffer_bytes: int):
    """Stream (sort key, key bytes, value bytes) records from one spill run,
    reading at most one page worth of bytes at a time."""
    with open(path, "rb") as fh:
        buf = b""
        pos = 0
        eof = False
        while True:
            if len(buf) - pos < 8 and not eof:
                chunk = fh.read(buffer_bytes)
                eof = not chunk
                buf = buf[pos:] + chunk
                pos = 0
            if len(buf) - pos < 8:
                return
            klen = _LEN.unpack_from(buf, pos)[0]
            while len(buf) - pos < 8 + klen and not eof:
                chunk = fh.read(buffer_bytes)
                eof = not chunk
                buf = buf[pos:] + chunk
                pos = 0
            kb = bytes(buf[pos + 4 : pos + 4 + klen])
            vlen = _LEN.unpack_from(buf, pos + 4 + klen)[0]
            need = 8 + klen + vlen
            while len(buf) - pos < need and not eof:
                chunk = fh.read(buffer_bytes)
                eof = not chunk
                buf = buf[pos:] + chunk
                pos = 0
            vb = bytes(buf[pos + 8 + klen : pos + need])
            pos += need
            yield sort_key_from_bytes(kb, key_layout), kb, vb


class HashGroupBuffer(Container):
    """Keyed buffer whose per-key combined value grows (a value list, or any
    merge function). Combined values always stay objects while the buffer is
    being built; keys may be decomposed."""

    kind = "hash-group"

    def __init__(
        self,
        cid: str,
        coord: StoreCoordinator,
        key_layout: Optional[Layout],
        decompose_keys: bool,
        create: Optional[Callable] = None,
        merge: Optional[Callable] = None,
        instantiate=None,
    ):
        super().__init__(cid, coord)
        self.key_layout = key_layout
        self.decompose_keys = decompose_keys and key_layout is not None
        self.create = create or (lambda k, v: [v])
        self.merge = merge or (lambda acc, v: (acc.append(v), acc)[1])
        self.instantiate = instantiate
        self.table = _OpenTable()
        self.key_bytes_list: list[bytes] = []
        self.entries: list = []  # [key_repr, combined object]
        self.spillable = False  # combined values are live objects
        self.group: Optional[PageInfo] = None
        if self.decompose_keys:
            self.group = coord.store.new_group(cid)
            coord.note("allocate", cid, "page group")

    def page_groups(self) -> list[PageInfo]:
        return [self.group] if self.group is not None else []

    def _key_eq(self, idx: int, key_bytes: bytes) -> bool:
        return self.key_bytes_list[idx] == key_bytes

    def insert(self, key_bytes: bytes, key_value, value) -> None:
        self._check_live()
        idx, slot = self.table.lookup(key_bytes, self._key_eq)
        if idx is None:
            self.table.add(slot, key_bytes)
            self.key_bytes_list.append(key_bytes)
            key_repr = self.group.append_segment(key_bytes) if self.decompose_keys else key_value
            self.entries.append([key_repr, self.create(key_value, value)])
        else:
            self.entries[idx][1] = self.merge(self.entries[idx][1], value)
        self.coord.after_shuffle_insert(self)

    def iter_sorted(self) -> Iterator[tuple]:
        self._check_live()
        keys = [sort_key_from_bytes(kb, self.key_layout) for kb in self.key_bytes_list]
        for i in sorted(range(self.table.count), key=lambda i: keys[i]):
            if self.decompose_keys:
                kv = decode_object(self.key_bytes_list[i], self.key_layout, 0, self.instantiate)
            else:
                kv = self.entries[i][0]
            yield kv, self.entries[i][1]

    @property
    def distinct_keys(self) -> int:
        return self.table.count

    def trace_cost(self) -> int:
        pages = sum(g.page_count for g in self.page_groups())
        return pages + 4 + 2 * self.table.count

    def heap_bytes(self) -> int:
        return sum(g.page_count for g in self.page_groups()) * self.coord.store.capacity


class SortBuffer(Container):
    """In-place sorting buffer: (key, value) pairs accumulate, then one stable
    sort by key orders the pointer array; segments are never moved.

    Three storage arrangements: `owned` (encodes both sides into its own page
    group), `pointer` (stores pointers into a primary container's group plus a
    depPages pin), and plain objects.
    """

    kind = "sort"

    def __init__(
        self,
        cid: str,
        coord: StoreCoordinator,
        key_layout: Optional[Layout],
        val_layout: Optional[Layout],
        decomposed: bool,
        instantiate=None,
    ):
        super().__init__(cid, coord)
        self.key_layout = key_layout
        self.val_layout = val_layout
        self.decomposed = decomposed and key_layout is not None and val_layout is not None
        self.instantiate = instantiate
        self.pointer_only = False
        self.primary_layout: Optional[Layout] = None
        self.group: Optional[PageInfo] = None
        if self.decomposed:
            self.group = coord.store.new_group(cid)
            coord.note("allocate", cid, "page group")
        self.pointers: list = []  # (sort key, key_repr, val_repr)
        self.spill_seq = 0
        self.spill_files: list[str] = []
        self.count = 0

    def page_groups(self) -> list[PageInfo]:
        return [self.group] if self.group is not None else []

    @property
    def spillable(self) -> bool:
        return self.decomposed and not self.pointer_only

    def use_pointers_into(self, primary_group: PageInfo, primary_layout: Layout) -> None:
        """Secondary arrangement: values are pointers into a primary group's
        pages; a depPages entry keeps those pages live. May be called once per
        primary group feeding this buffer."""
        if self.group is None:
            self.group = self.coord.store.new_group(self.id)
        if not any(dep is primary_group for dep in self.group.dep_pages):
            self.group.add_dep(primary_group)
            self.coord.note("share", self.id, f"pointers into {primary_group.owner_id}")
        self.primary_layout = primary_layout
        self.pointer_only = True
        self.role = "secondary"

    def insert(self, key_bytes: bytes, key_value, value) -> None:
        self._check_live()
        sk = sort_key_from_bytes(key_bytes, self.key_layout)
        if self.pointer_only:
            # value is (primary PageInfo, SegmentRef)
            self.pointers.append((sk, key_value, value))
        elif self.decomposed:
            kref = self.group.append_segment(key_bytes)
            vref = self.group.append_segment(encode_object(value, self.val_layout))
            self.pointers.append((sk, kref, vref))
        else:
            self.pointers.append((sk, key_value, value))
        self.count += 1
        self.coord.after_shuffle_insert(self)

    def spill(self) -> str:
        if self.pointer_only:
            raise ContainerError(f"sort buffer {self.id} holds only pointers; not spillable")
        self._check_live()
        self.spill_seq += 1
        path = self.coord.spill_path(self.id, self.spill_seq)
        written = 0
        with open(path, "wb") as fh:
            for sk, kr, vr in sorted(self.pointers, key=lambda t: t[0]):
                kb, vb = self._entry_bytes(kr, vr)
                fh.write(_LEN.pack(len(kb)))
                fh.write(kb)
                fh.write(_LEN.pack(len(vb)))
                fh.write(vb)
                written += 8 + len(kb) + len(vb)
        self.spill_files.append(path)
        self.coord.spill_runs += 1
        self.coord.spill_bytes += written
        self.coord.note("spill", self.id, f"run {self.spill_seq}, {written} bytes")
        if self.group is not None:
            self.group.release()
            self.group = self.coord.store.new_group(self.id)
        self.pointers = []
        return path

    def _entry_bytes(self, key_repr, val_repr) -> tuple[bytes, bytes]:
        if self.decomposed:
            kb = self.group.read_segment(key_repr, self.key_layout.size_at(
                self.group._page(ref_page(key_repr)), ref_offset(key_repr)))
            vsize = self.val_layout.size_at(
                self.group._page(ref_page(val_repr)), ref_offset(val_repr))
            vb = self.group.read_segment(val_repr, vsize)
            return kb, vb
        return encode_object(key_repr, self.key_layout), encode_object(val_repr, self.val_layout)

    def release(self) -> None:
        super().release()
        self.pointers = []

    def iter_sorted(self) -> Iterator[tuple]:
        """(key, value) stream in key order; duplicate keys keep insertion
        order. Spilled runs merge with the in-memory remainder."""
        self._check_live()
        in_mem = sorted(
            ((sk, i, kr, vr) for i, (sk, kr, vr) in enumerate(self.pointers)),
            key=lambda t: (t[0], t[1]),
        )
        if not self.spill_files:
            for sk, _i, kr, vr in in_mem:
                yield self._materialize(kr, vr)
            return
        mem_stream = ((sk, self._entry_bytes(kr, vr)) for sk, _i, kr, vr in in_mem)
        streams = [
            ((sk, (kb, vb)) for sk, kb, vb in
             _run_reader(path, self.key_layout, self.coord.store.capacity))
            for path in self.spill_files
        ]
        streams.append(mem_stream)
        for _sk, (kb, vb) in heapq.merge(*streams, key=lambda rec: rec[0]):
            yield (
                decode_object(kb, self.key_layout, 0, self.instantiate),
                decode_object(vb, self.val_layout, 0, self.instantiate),
            )

    def _materialize(self, key_repr, val_repr) -> tuple:
        if self.pointer_only:
            group, ref = val_repr
            page = group._page(ref_page(ref))
            value = decode_object(page, self.primary_layout, ref_offset(ref), self.instantiate)
            return key_repr, value
        if self.decomposed:
            kb, vb = self._entry_bytes(key_repr, val_repr)
            return (
                decode_object(kb, self.key_layout, 0, self.instantiate),
                decode_object(vb, self.val_layout, 0, self.instantiate),
            )
        return key_repr, val_repr

    def trace_cost(self) -> int:
        pages = sum(g.page_count for g in self.page_groups())
        if self.decomposed or self.pointer_only:
            return pages + 4 + 1  # pointer array counts as one managed array
        return pages + 4 + 2 * len(self.pointers)

    def heap_bytes(self) -> int:
        pages = sum(g.page_count for g in self.page_groups()) * self.coord.store.capacity
        if self.pointer_only:
            return pages + 16 * len(self.pointers)  # two words per pointer entry
        return pages


# ---------------------------------------------------------------------------
# Sharing and handoff between containers
# ---------------------------------------------------------------------------


def share_fully_decomposable(primary: CacheBlock, secondary: Container) -> None:
    """Same object set in two decomposable containers.

    A secondary cache holding the same set with no ordering requirement takes
    a page-info copy (reference count goes up; zero bytes move). A secondary
    that needs its own ordering keeps a pointer array plus a depPages pin."""
    if isinstance(secondary, CacheBlock):
        secondary.adopt_group(primary)
        return
    if isinstance(secondary, SortBuffer):
        secondary.use_pointers_into(primary.group, primary.elem_layout)
        return
    raise ContainerError(f"no sharing arrangement for {secondary.kind}")


def handoff_partially_decomposable(values: Iterator, dst: Container) -> int:
    """Objects from a non-decomposable container copied by value into a
    decomposable one (or plain object copies when the destination cannot
    decompose either). Returns the element count."""
    n = 0
    for v in values:
        dst.put(v)
        n += 1
    return n


def evict_lru(coord: StoreCoordinator, bytes_needed: int) -> list[PageInfo]:
    return coord.evict_lru(bytes_needed)


def spill_and_merge(buf, *_ignored) -> Iterator[tuple]:
    """Force a spill of the current contents and return the merged stream."""
    buf.spill()
    return buf.iter_sorted()


# operation-level aliases over the container methods


def cache_put(block: CacheBlock, item) -> None:
    block.put(item)


def reconstruct_on_resize(block: CacheBlock, evidence: str) -> None:
    block.reconstruct(evidence)


def shuffle_insert_reduce(buf: HashReduceBuffer, key, value, combine=None) -> None:
    """Eagerly combining insert; the key is encoded with the buffer's key
    layout for hashing and probing."""
    if combine is not None:
        buf.combine = combine
    buf.insert(encode_object(key, buf.key_layout), key, value)


def shuffle_insert_group(buf: HashGroupBuffer, key, value) -> None:
    buf.insert(encode_object(key, buf.key_layout), key, value)


def sort_shuffle_finish(buf: SortBuffer, key_compare=None) -> Iterator[tuple]:
    """Ordered (key, value) stream; pairs with equal keys keep insertion
    order. The comparator is fixed (decoded-key order) so spilled runs and the
    in-memory remainder always merge consistently."""
    if key_compare is not None:
        raise ContainerError("custom comparators would break spill-run merging; keys sort by value")
    return buf.iter_sorted()
