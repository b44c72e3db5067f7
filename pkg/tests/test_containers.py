"""Containers: ownership, cache blocks, shuffle buffers, sharing, eviction,
spill and merge."""

import os
import random

import pytest

from pageflow import containers as ct, ir, pagestore as ps
from pageflow.classify import SizeType
from pageflow.containers import (
    CacheBlock,
    HashGroupBuffer,
    HashReduceBuffer,
    SortBuffer,
    StoreCoordinator,
    assign_ownership,
    fnv1a64,
    handoff_partially_decomposable,
    share_fully_decomposable,
)
from pageflow.pagestore import (
    BudgetExhausted,
    PageStore,
    PlainRecord,
    compute_layout,
    encode_object,
)

SF, RF = SizeType.STATIC_FIXED, SizeType.RUNTIME_FIXED

REC_SRC = """
class Rec
  field key long
  field payload double
ctor Rec init (k p)
  (field-store (local this) key (local k))
  (field-store (local this) payload (local p))
"""


@pytest.fixture()
def rec_prog():
    p = ir.parse_program(REC_SRC)
    p.analysis()
    return p


@pytest.fixture()
def rec_layout(rec_prog):
    return compute_layout("Rec", SF, rec_prog)


@pytest.fixture()
def long_layout(rec_prog):
    return compute_layout("long", SF, rec_prog)


@pytest.fixture()
def coord(spill_dir):
    store = PageStore(capacity=4096)
    return StoreCoordinator(store, cache_fraction=0.6, spill_dir=spill_dir)


def rec(k, p=0.0):
    r = PlainRecord("Rec")
    r.key = k
    r.payload = p
    return r


def enc_long(v, long_layout):
    return encode_object(v, long_layout)


def test_fnv1a64_published_vectors():
    # reference values from the FNV specification
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a64(b"foobar") == 0x85944171F73967E8


class TestOwnership:
    def test_cache_beats_udf_vars(self):
        roles = assign_ownership({"s": [("udf", "udfvars", 0), ("points", "cache", 1)]})
        assert roles["s"] == "points"

    def test_earliest_high_priority_wins(self):
        roles = assign_ownership(
            {"s": [("rddB", "cache", 2), ("rddA", "cache", 1)]}
        )
        assert roles["s"] == "rddA"

    def test_udf_vars_alone_keep_objects(self):
        roles = assign_ownership({"s": [("udf", "udfvars", 0)]})
        assert roles["s"] == "udf"


class TestCacheBlock:
    def test_fixed_items_are_decomposed(self, coord, rec_prog, rec_layout):
        block = CacheBlock("b", coord, rec_layout, decomposed=True)
        block.put(rec(1, 0.5))
        assert block.group.appended_segments == 1
        assert block.group.bytes_used() == rec_layout.const_size
        got = list(block.iter_values())
        assert got[0].key == 1 and got[0].payload == 0.5

    def test_variable_items_stay_objects(self, coord):
        block = CacheBlock("b", coord, None, decomposed=False)
        item = PlainRecord("Whatever")
        block.put(item)
        assert block.objects == [item]
        assert list(block.iter_values())[0] is item

    def test_put_after_unpersist(self, coord, rec_layout):
        block = CacheBlock("b", coord, rec_layout, decomposed=True)
        block.unpersist()
        with pytest.raises(ct.ReleasedError):
            block.put(rec(1))

    def test_reconstruct_releases_pages_and_sticks(self, coord, rec_layout):
        block = CacheBlock("b", coord, rec_layout, decomposed=True)
        for i in range(5):
            block.put(rec(i, float(i)))
        block.seal()
        assert coord.store.live_pages == 1
        block.reconstruct("payload resized downstream")
        assert coord.store.live_pages == 0
        assert not block.decomposed and block.never_decompose
        assert [r.key for r in block.iter_values()] == [0, 1, 2, 3, 4]
        before = list(block.objects)
        block.reconstruct("again")  # second resize: already objects, no-op
        assert block.objects == before


class TestHashReduce:
    def make(self, coord, rec_prog, long_layout, decompose=True):
        return HashReduceBuffer(
            "counts",
            coord,
            key_layout=long_layout,
            val_layout=long_layout,
            combine=lambda a, b: a + b,
            decompose_keys=decompose,
            decompose_vals=decompose,
        )

    def test_in_place_reuse(self, coord, rec_prog, long_layout):
        buf = self.make(coord, rec_prog, long_layout)
        buf.insert(enc_long(7, long_layout), 7, 1)
        buf.insert(enc_long(7, long_layout), 7, 2)
        assert buf.distinct_keys == 1
        assert buf.group.appended_segments == 2  # one key, one value
        idx, _ = buf.table.lookup(enc_long(7, long_layout), buf._key_eq)
        assert buf._val_bytes(idx) == enc_long(3, long_layout)

    def test_distinct_keys_get_entries(self, coord, rec_prog, long_layout):
        buf = self.make(coord, rec_prog, long_layout)
        buf.insert(enc_long(1, long_layout), 1, 10)
        buf.insert(enc_long(2, long_layout), 2, 20)
        assert buf.distinct_keys == 2
        assert buf.group.appended_segments == 4

    def test_empty_lookup(self, coord, rec_prog, long_layout):
        buf = self.make(coord, rec_prog, long_layout)
        idx, _slot = buf.table.lookup(enc_long(9, long_layout), buf._key_eq)
        assert idx is None

    def test_segment_count_is_twice_distinct_keys(self, coord, rec_prog, long_layout):
        rng = random.Random(1)
        buf = self.make(coord, rec_prog, long_layout)
        keys = set()
        for _ in range(500):
            k = rng.randrange(40)
            keys.add(k)
            buf.insert(enc_long(k, long_layout), k, 1)
        assert buf.group.appended_segments == 2 * len(keys) == 2 * buf.distinct_keys

    def test_mode_equivalence_randomized(self, coord, rec_prog, long_layout):
        rng = random.Random(2)
        items = [(rng.randrange(30), rng.randrange(100)) for _ in range(400)]
        results = []
        for decompose in (True, False):
            buf = self.make(coord, rec_prog, long_layout, decompose)
            for k, v in items:
                buf.insert(enc_long(k, long_layout), k, v)
            results.append(list(buf.iter_sorted()))
        assert results[0] == results[1]

    def test_table_growth_keeps_entries(self, coord, rec_prog, long_layout):
        buf = self.make(coord, rec_prog, long_layout)
        for k in range(500):
            buf.insert(enc_long(k, long_layout), k, k)
        assert buf.distinct_keys == 500
        assert [v for _k, v in buf.iter_sorted()] == list(range(500))


class TestOperationAliases:
    def test_reduce_group_sort_and_cache_surface(
        self, coord, rec_prog, rec_layout, long_layout
    ):
        buf = HashReduceBuffer(
            "r", coord, long_layout, long_layout, lambda a, b: a + b, True, True
        )
        ct.shuffle_insert_reduce(buf, 4, 1)
        ct.shuffle_insert_reduce(buf, 4, 2, combine=lambda a, b: a + b)
        assert list(buf.iter_sorted()) == [(4, 3)]

        grp = HashGroupBuffer("g", coord, long_layout, decompose_keys=True)
        ct.shuffle_insert_group(grp, 1, "x")
        ct.shuffle_insert_group(grp, 1, "y")
        assert list(grp.iter_sorted()) == [(1, ["x", "y"])]

        srt = SortBuffer("s", coord, long_layout, rec_layout, decomposed=True)
        for k in (2, 1):
            srt.insert(encode_object(k, long_layout), k, rec(k))
        assert [k for k, _v in ct.sort_shuffle_finish(srt)] == [1, 2]

        block = CacheBlock("c", coord, rec_layout, decomposed=True)
        ct.cache_put(block, rec(9))
        block.seal()
        ct.reconstruct_on_resize(block, "test evidence")
        assert not block.decomposed and block.objects[0].key == 9


class TestHashGroup:
    def test_values_group_per_key(self, coord, rec_prog, long_layout):
        buf = HashGroupBuffer("g", coord, long_layout, decompose_keys=True)
        buf.insert(enc_long(1, long_layout), 1, "a")
        buf.insert(enc_long(1, long_layout), 1, "b")
        assert list(buf.iter_sorted()) == [(1, ["a", "b"])]

    def test_many_values_one_key(self, coord, rec_prog, long_layout):
        buf = HashGroupBuffer("g", coord, long_layout, decompose_keys=False)
        for i in range(50):
            buf.insert(enc_long(9, long_layout), 9, i)
        ((k, vs),) = list(buf.iter_sorted())
        assert k == 9 and len(vs) == 50

    def test_insertion_order_preserved(self, coord, rec_prog, long_layout):
        buf = HashGroupBuffer("g", coord, long_layout, decompose_keys=True)
        order = [5, 3, 5, 7, 3, 5]
        for i, k in enumerate(order):
            buf.insert(enc_long(k, long_layout), k, i)
        got = dict(buf.iter_sorted())
        assert got == {3: [1, 4], 5: [0, 2, 5], 7: [3]}


class TestSortBuffer:
    def make(self, coord, long_layout, rec_layout, decomposed=True):
        return SortBuffer("s", coord, long_layout, rec_layout, decomposed=decomposed)

    def test_sorted_by_key(self, coord, rec_prog, long_layout, rec_layout):
        buf = self.make(coord, long_layout, rec_layout)
        for k in (3, 1, 2):
            buf.insert(enc_long(k, long_layout), k, rec(k))
        assert [k for k, _v in buf.iter_sorted()] == [1, 2, 3]

    def test_duplicate_keys_stay_in_insertion_order(self, coord, rec_prog, long_layout, rec_layout):
        buf = self.make(coord, long_layout, rec_layout)
        payloads = [0.1, 0.2, 0.3]
        for p in payloads:
            buf.insert(enc_long(1, long_layout), 1, rec(1, p))
        assert [v.payload for _k, v in buf.iter_sorted()] == payloads

    def test_empty(self, coord, rec_prog, long_layout, rec_layout):
        buf = self.make(coord, long_layout, rec_layout)
        assert list(buf.iter_sorted()) == []

    def test_segments_untouched_by_sorting(self, coord, rec_prog, long_layout, rec_layout):
        buf = self.make(coord, long_layout, rec_layout)
        for k in (5, 4, 9, 1):
            buf.insert(enc_long(k, long_layout), k, rec(k))
        raw_before = bytes(buf.group.pages[0][: buf.group.used[0]])
        list(buf.iter_sorted())
        assert bytes(buf.group.pages[0][: buf.group.used[0]]) == raw_before


class TestSharing:
    def test_same_set_shares_one_page_group(self, coord, rec_prog, rec_layout):
        a = CacheBlock("a", coord, rec_layout, decomposed=True)
        for i in range(4):
            a.put(rec(i))
        a.seal()
        b = CacheBlock("b", coord, rec_layout, decomposed=True)
        pages_before = coord.store.total_allocated
        share_fully_decomposable(a, b)
        assert b.group is a.group  # the page-info copy shares the group
        assert a.group.ref_count == 2
        assert coord.store.total_allocated == pages_before  # zero bytes copied
        assert [r.key for r in b.iter_values()] == [0, 1, 2, 3]

    def test_release_primary_keeps_pages_for_secondary(self, coord, rec_prog, rec_layout):
        a = CacheBlock("a", coord, rec_layout, decomposed=True)
        a.put(rec(1))
        a.seal()
        b = CacheBlock("b", coord, rec_layout, decomposed=True)
        share_fully_decomposable(a, b)
        a.unpersist()
        assert coord.store.live_pages == 1
        assert [r.key for r in b.iter_values()] == [1]
        b.unpersist()
        assert coord.store.live_pages == 0

    def test_ordered_secondary_gets_pointers_and_dep_pages(
        self, coord, rec_prog, long_layout, rec_layout
    ):
        a = CacheBlock("a", coord, rec_layout, decomposed=True)
        for k in (2, 1, 3):
            a.put(rec(k, k * 0.5))
        a.seal()
        s = SortBuffer("s", coord, long_layout, rec_layout, decomposed=False)
        share_fully_decomposable(a, s)
        assert s.pointer_only and a.group.ref_count == 2
        for ref in a.group.scan(rec_layout):
            k = a.group.read_field(ref, rec_layout, "key")
            s.insert(encode_object(k, long_layout), k, (a.group, ref))
        assert [k for k, _v in s.iter_sorted()] == [1, 2, 3]
        # while the secondary holds depPages the group cannot die
        a.unpersist()
        assert a.group.live
        s.release()
        assert coord.store.live_pages == 0


class TestHandoff:
    def test_group_output_copied_by_value(self, coord, rec_prog, rec_layout, long_layout):
        g = HashGroupBuffer("g", coord, long_layout, decompose_keys=False)
        for k, p in [(2, 0.2), (1, 0.1)]:
            g.insert(enc_long(k, long_layout), k, rec(k, p))
        cache = CacheBlock("c", coord, rec_layout, decomposed=True)
        n = handoff_partially_decomposable((vs[0] for _k, vs in g.iter_sorted()), cache)
        assert n == 2
        g.release()
        assert [r.key for r in cache.iter_values()] == [1, 2]

    def test_object_destination_gets_plain_copies(self, coord, rec_prog):
        g = HashGroupBuffer("g", coord, None, decompose_keys=False)
        g.insert(b"k", 1, rec(1))
        dst = CacheBlock("c", coord, None, decomposed=False)
        handoff_partially_decomposable((vs[0] for _k, vs in g.iter_sorted()), dst)
        assert dst.objects[0].key == 1


class TestEviction:
    def test_lru_picks_least_recently_used(self, coord, rec_prog, rec_layout):
        a = CacheBlock("a", coord, rec_layout, decomposed=True)
        b = CacheBlock("b", coord, rec_layout, decomposed=True)
        for blk in (a, b):
            blk.put(rec(1))
            blk.seal()
        list(a.iter_values())  # a most recently used
        evicted = coord.evict_lru(1)
        assert [g.owner_id for g in evicted] == ["b"]

    def test_swap_round_trip_through_eviction(self, coord, rec_prog, rec_layout):
        a = CacheBlock("a", coord, rec_layout, decomposed=True)
        recs = [rec(i, float(i)) for i in range(10)]
        for r in recs:
            a.put(r)
        a.seal()
        segs = b"".join(encode_object(r, rec_layout) for r in recs)
        (g,) = coord.evict_lru(1)
        path = [e for e in coord.events if e.kind == "evict"][0].detail.split()[-1]
        assert open(os.path.join(coord.spill_dir, path), "rb").read() == segs
        assert coord.store.live_pages == 0
        got = [r.key for r in a.iter_values()]  # faults the group back in
        assert got == list(range(10))
        assert coord.store.live_pages == 1

    def test_nothing_evictable(self, coord):
        with pytest.raises(BudgetExhausted):
            coord.evict_lru(1)

    def test_memory_only_groups_never_swap(self, coord, rec_prog, rec_layout):
        a = CacheBlock("a", coord, rec_layout, decomposed=True, swap_level="memory")
        a.put(rec(1))
        a.seal()
        with pytest.raises(BudgetExhausted):
            coord.evict_lru(1)


class TestSpill:
    def test_three_runs_merge_to_single_run_output(self, coord, rec_prog, long_layout):
        rng = random.Random(3)
        items = [(rng.randrange(25), 1) for _ in range(600)]

        def run(spill_every):
            buf = HashReduceBuffer(
                "c",
                coord,
                long_layout,
                long_layout,
                combine=lambda a, b: a + b,
                decompose_keys=True,
                decompose_vals=True,
            )
            for i, (k, v) in enumerate(items):
                buf.insert(enc_long(k, long_layout), k, v)
                if spill_every and (i + 1) % spill_every == 0:
                    buf.spill()
            out = list(buf.iter_sorted())
            runs = len(buf.spill_files)
            buf.release()
            return out, runs

        baseline, zero = run(0)
        spilled, runs = run(150)
        assert zero == 0 and runs == 4
        assert spilled == baseline

    def test_budget_larger_than_data_never_spills(self, spill_dir, rec_prog, long_layout):
        store = PageStore(capacity=4096, budget=1 << 20)
        coord = StoreCoordinator(store, cache_fraction=0.5, spill_dir=spill_dir)
        buf = HashReduceBuffer(
            "c", coord, long_layout, long_layout, lambda a, b: a + b, True, True
        )
        for k in range(100):
            buf.insert(enc_long(k, long_layout), k, 1)
        assert buf.spill_files == [] and coord.spill_runs == 0

    def test_pointer_only_buffer_triggers_eviction_not_spill(
        self, spill_dir, rec_prog, rec_layout, long_layout
    ):
        # pointer entries count as shuffle memory; once they outgrow the
        # shuffle budget the cache is evicted and no spill file appears
        store = PageStore(capacity=2048, budget=4 * 2048)
        coord = StoreCoordinator(store, cache_fraction=0.5, spill_dir=spill_dir)
        cache = CacheBlock("cache", coord, rec_layout, decomposed=True)
        n = 300  # 300 pointer entries model 4800 bytes, over the 4096 budget
        for i in range(n):
            cache.put(rec(i, float(i)))
        cache.seal()
        s = SortBuffer("s", coord, long_layout, rec_layout, decomposed=False)
        share_fully_decomposable(cache, s)
        refs = [
            (cache.group.read_field(ref, rec_layout, "key"), ref)
            for ref in cache.group.scan(rec_layout)
        ]
        for k, ref in refs:
            s.insert(encode_object(k, long_layout), k, (cache.group, ref))
        assert coord.spill_runs == 0
        assert coord.evictions >= 1
        assert [k for k, _v in s.iter_sorted()] == sorted(range(n))
        s.release()
        cache.unpersist()
        assert store.live_pages == 0

    def test_sort_buffer_spill_preserves_stability(self, coord, rec_prog, long_layout, rec_layout):
        rng = random.Random(4)
        items = [(rng.randrange(10), i) for i in range(300)]

        def run(spill_every):
            buf = SortBuffer("s2", coord, long_layout, rec_layout, decomposed=True)
            for i, (k, seq) in enumerate(items):
                buf.insert(enc_long(k, long_layout), k, rec(k, float(seq)))
                if spill_every and (i + 1) % spill_every == 0:
                    buf.spill()
            out = [(k, v.payload) for k, v in buf.iter_sorted()]
            buf.release()
            return out

        assert run(0) == run(100)
