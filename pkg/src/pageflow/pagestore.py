"""Fixed-size logical memory pages, layout synthesis, and segment codecs.

A store hands out pages of one uniform capacity under a byte budget. Each
container owns a page group described by a PageInfo (pages, append cursor,
scan cursor, dependent groups, reference count). Objects are stored as
contiguous byte segments; a segment never spans pages, so a segment that does
not fit in the remaining space of the last page starts a new page and the
slack is left unused.

Layouts map a type onto byte offsets. Fields are reordered so that parts with
statically determinable sizes come first: primitive scalars, then fixed-size
composites, then length-prefixed arrays. Arrays whose length the planner
proved constant store no prefix; all other arrays carry a 4-byte length.
Primitives are little-endian fixed width.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

from . import ir

_PRIM_FMT = {
    "bool": "?",
    "byte": "b",
    "char": "H",
    "short": "h",
    "int": "i",
    "long": "q",
    "float": "f",
    "double": "d",
}

_LEN_STRUCT = struct.Struct("<i")

DEFAULT_PAGE_CAPACITY = 64 * 1024


class StoreError(Exception):
    pass


class BudgetExhausted(StoreError):
    """No page can be allocated and nothing is evictable."""


class SegmentTooLarge(StoreError):
    pass


class LayoutError(Exception):
    pass


class ShapeMismatch(LayoutError):
    """A value's runtime shape does not fit the layout (wrong class, wrong
    constant array length)."""


# ---------------------------------------------------------------------------
# Segment references: one 64-bit value, high 32 bits page index, low 32 offset
# ---------------------------------------------------------------------------


def pack_ref(page_index: int, offset: int) -> int:
    return (page_index << 32) | offset


def ref_page(ref: int) -> int:
    return ref >> 32


def ref_offset(ref: int) -> int:
    return ref & 0xFFFFFFFF


# ---------------------------------------------------------------------------
# Layouts
# ---------------------------------------------------------------------------


@dataclass
class Layout:
    """Byte layout of one type.

    kind is "prim", "class", or "array". Class layouts hold (field name,
    child layout) pairs in storage order, which may differ from declaration
    order. Array layouts hold the element layout and either a constant length
    (no stored prefix) or None for a 4-byte length prefix.
    """

    type_name: str
    kind: str
    prim_kind: Optional[str] = None
    fields: list[tuple[str, "Layout"]] = field(default_factory=list)
    elem: Optional["Layout"] = None
    const_length: Optional[int] = None
    const_size: Optional[int] = None
    _struct: Optional[struct.Struct] = field(default=None, repr=False, compare=False)
    _flat_fmt: Optional[str] = field(default=None, repr=False, compare=False)

    # -- size

    def size_of(self, value) -> int:
        """Byte size of one encoded value."""
        if self.const_size is not None:
            return self.const_size
        if self.kind == "array":
            n = len(value)
            if self.elem.const_size is not None:
                return 4 + n * self.elem.const_size
            return 4 + sum(self.elem.size_of(v) for v in value)
        # class with at least one dynamic part
        total = 0
        for fname, sub in self.fields:
            total += sub.size_of(getattr(value, fname))
        return total

    def size_at(self, buf, offset: int) -> int:
        """Byte size of the encoded value starting at buf[offset], recovered
        from constant sizes and stored length prefixes."""
        if self.const_size is not None:
            return self.const_size
        if self.kind == "array":
            n = _LEN_STRUCT.unpack_from(buf, offset)[0]
            if self.elem.const_size is not None:
                return 4 + n * self.elem.const_size
            total = 4
            for _ in range(n):
                total += self.elem.size_at(buf, offset + total)
            return total
        total = 0
        for _fname, sub in self.fields:
            total += sub.size_at(buf, offset + total)
        return total

    def formula(self) -> str:
        """Human-readable size: a number for constant layouts, otherwise a
        sum over length prefixes."""
        if self.const_size is not None:
            return str(self.const_size)
        if self.kind == "array":
            if self.elem.const_size is not None:
                return f"4 + {self.elem.const_size}*len"
            return f"4 + sum({self.elem.formula()})"
        parts = [sub.formula() for _n, sub in self.fields]
        const = sum(int(p) for p in parts if p.isdigit())
        dyn = [p for p in parts if not p.isdigit()]
        return " + ".join(([str(const)] if const else []) + dyn)

    # -- offsets

    def rel_offsets(self, prefix: str = "") -> dict[str, Optional[int]]:
        """Flattened relative field offsets; None where only dynamic
        resolution (walking prefixes) can find the position."""
        out: dict[str, Optional[int]] = {}

        def walk(lay: Layout, path: str, base: Optional[int]) -> Optional[int]:
            if lay.kind == "prim":
                out[path] = base
                return None if base is None else base + lay.const_size
            if lay.kind == "array":
                out[path] = base
                if base is None:
                    return None
                return None if lay.const_size is None else base + lay.const_size
            cursor = base
            for fname, sub in lay.fields:
                sub_path = f"{path}.{fname}" if path else fname
                cursor = walk(sub, sub_path, cursor)
            if lay.const_size is not None and base is not None:
                return base + lay.const_size
            return cursor

        walk(self, prefix, 0)
        return out


def _singleton_member(f: ir.FieldDef, prog: ir.Program) -> str:
    ts = f.get_type_set()
    if len(ts) != 1:
        raise LayoutError(
            f"{f.owner}.{f.name}: type-set {ts} has more than one member; "
            "no unambiguous layout exists"
        )
    return ts[0]


def compute_layout(
    type_name: str,
    verdict,
    prog: ir.Program,
    fixed_lengths: Optional[dict] = None,
    _via: Optional[tuple[str, str]] = None,
) -> Layout:
    """Layout for a StaticFixed or RuntimeFixed type.

    `fixed_lengths` maps (field owner, field name) or None (top level) to the
    constant element count the planner proved; arrays found there store no
    length prefix.
    """
    from .classify import SizeType

    if verdict not in (SizeType.STATIC_FIXED, SizeType.RUNTIME_FIXED):
        raise LayoutError(f"cannot lay out {type_name}: verdict {verdict}")
    prog.analysis()  # layouts read inferred type-sets
    fixed_lengths = fixed_lengths or {}

    def build(t: str, via: Optional[tuple[str, str]]) -> Layout:
        if ir.is_primitive(t):
            return Layout(
                type_name=t, kind="prim", prim_kind=t, const_size=ir.PRIM_SIZES[t]
            )
        if t in prog.arrays:
            arr = prog.arrays[t]
            elem_decl = arr.element_decl
            if ir.is_primitive(elem_decl):
                elem = build(elem_decl, None)
            else:
                member = _singleton_member(arr.element_field, prog)
                elem = build(member, (t, "<elem>"))
            n = fixed_lengths.get(via)
            lay = Layout(type_name=t, kind="array", elem=elem, const_length=n)
            if n is not None and elem.const_size is not None:
                lay.const_size = n * elem.const_size
            return lay
        cls = prog.classes.get(t)
        if cls is None:
            raise ir.UnknownTypeError(f"unknown type {t!r}")
        children = []
        for f in cls.fields:
            if ir.is_primitive(f.declared_type):
                sub = build(f.declared_type, None)
            else:
                member = _singleton_member(f, prog)
                sub = build(member, (f.owner, f.name))
            children.append((f.name, sub))

        def rank(pair):
            _name, sub = pair
            if sub.kind == "prim":
                return 0
            return 1 if sub.const_size is not None else 2

        children.sort(key=rank)  # stable: declaration order within each rank
        lay = Layout(type_name=t, kind="class", fields=children)
        if all(sub.const_size is not None for _n, sub in children):
            lay.const_size = sum(sub.const_size for _n, sub in children)
        return lay

    lay = build(type_name, _via)
    _attach_flat_codec(lay)
    return lay


def compute_data_size(type_name: str, verdict, prog: ir.Program, fixed_lengths=None):
    """Constant byte size for StaticFixed types; a size formula string for
    RuntimeFixed ones. Raises LayoutError for Variable/RecurDef."""
    lay = compute_layout(type_name, verdict, prog, fixed_lengths)
    return lay.const_size if lay.const_size is not None else lay.formula()


# -- fast flat codec: fully-constant layouts become one struct format


def _flat_fmt(lay: Layout) -> Optional[str]:
    if lay.kind == "prim":
        return _PRIM_FMT[lay.prim_kind]
    if lay.const_size is None:
        return None
    if lay.kind == "array":
        sub = _flat_fmt(lay.elem)
        return None if sub is None else sub * lay.const_length
    parts = []
    for _n, sub in lay.fields:
        p = _flat_fmt(sub)
        if p is None:
            return None
        parts.append(p)
    return "".join(parts)


def _attach_flat_codec(lay: Layout) -> None:
    fmt = _flat_fmt(lay)
    if fmt is not None:
        lay._flat_fmt = fmt
        lay._struct = struct.Struct("<" + fmt)
    if lay.elem is not None:
        _attach_flat_codec(lay.elem)
    for _n, sub in lay.fields:
        _attach_flat_codec(sub)


# ---------------------------------------------------------------------------
# Encode / decode
# ---------------------------------------------------------------------------


class PlainRecord:
    """Default decode target: attribute bag tagged with its type name."""

    __slots__ = ("_type", "__dict__")

    def __init__(self, type_name: str):
        self._type = type_name

    def __repr__(self):
        return f"<{self._type} {self.__dict__}>"


def _default_instantiate(type_name: str):
    return PlainRecord(type_name)


def _flatten(value, lay: Layout, out: list) -> None:
    if lay.kind == "prim":
        out.append(ord(value) if lay.prim_kind == "char" else value)
    elif lay.kind == "array":
        if len(value) != lay.const_length:
            raise ShapeMismatch(
                f"{lay.type_name}: expected constant length {lay.const_length}, got {len(value)}"
            )
        if lay.elem.kind == "prim":
            if lay.elem.prim_kind == "char":
                out.extend(ord(c) for c in value)
            else:
                out.extend(value)
        else:
            for v in value:
                _flatten(v, lay.elem, out)
    else:
        for fname, sub in lay.fields:
            _flatten(getattr(value, fname), sub, out)


def encode_object(value, lay: Layout) -> bytes:
    """Encode one value to its byte segment (value semantics; identity and
    sharing are not preserved)."""
    if lay._struct is not None:
        vals: list = []
        _flatten(value, lay, vals)
        try:
            return lay._struct.pack(*vals)
        except struct.error as exc:
            raise ShapeMismatch(f"{lay.type_name}: {exc}") from None
    if lay.kind == "array":
        n = len(value)
        if lay.const_length is not None and n != lay.const_length:
            raise ShapeMismatch(
                f"{lay.type_name}: expected constant length {lay.const_length}, got {n}"
            )
        head = b"" if lay.const_length is not None else _LEN_STRUCT.pack(n)
        if lay.elem.kind == "prim" and lay.elem._struct is not None:
            fmt = struct.Struct("<" + lay.elem._flat_fmt * n)
            vals = [ord(c) for c in value] if lay.elem.prim_kind == "char" else list(value)
            return head + fmt.pack(*vals)
        return head + b"".join(encode_object(v, lay.elem) for v in value)
    if lay.kind == "class":
        return b"".join(encode_object(getattr(value, fname), sub) for fname, sub in lay.fields)
    # primitive
    try:
        return lay._struct.pack(ord(value) if lay.prim_kind == "char" else value)
    except struct.error as exc:
        raise ShapeMismatch(f"{lay.type_name}: {exc}") from None


def decode_object(buf, lay: Layout, offset: int = 0, instantiate=None):
    """Decode the segment at buf[offset] back into a value."""
    value, _end = _decode(buf, lay, offset, instantiate or _default_instantiate)
    return value


def _decode(buf, lay: Layout, offset: int, instantiate):
    if lay.kind == "prim":
        v = struct.unpack_from("<" + _PRIM_FMT[lay.prim_kind], buf, offset)[0]
        if lay.prim_kind == "char":
            v = chr(v)
        return v, offset + lay.const_size
    if lay.kind == "array":
        if lay.const_length is not None:
            n = lay.const_length
        else:
            n = _LEN_STRUCT.unpack_from(buf, offset)[0]
            offset += 4
        if lay.elem.kind == "prim":
            fmt = "<" + _PRIM_FMT[lay.elem.prim_kind] * n
            vals = list(struct.unpack_from(fmt, buf, offset))
            if lay.elem.prim_kind == "char":
                vals = [chr(v) for v in vals]
            return vals, offset + n * lay.elem.const_size
        out = []
        for _ in range(n):
            v, offset = _decode(buf, lay.elem, offset, instantiate)
            out.append(v)
        return out, offset
    obj = instantiate(lay.type_name)
    for fname, sub in lay.fields:
        v, offset = _decode(buf, sub, offset, instantiate)
        setattr(obj, fname, v)
    return obj, offset


def value_equal(a, b, lay: Layout) -> bool:
    """Structural equality under a layout (reference identity ignored)."""
    if lay.kind == "prim":
        if lay.prim_kind in ("float", "double"):
            return struct.pack("<d", a) == struct.pack("<d", b)
        return a == b
    if lay.kind == "array":
        return len(a) == len(b) and all(value_equal(x, y, lay.elem) for x, y in zip(a, b))
    return all(value_equal(getattr(a, f), getattr(b, f), sub) for f, sub in lay.fields)


# ---------------------------------------------------------------------------
# Field access at computed offsets
# ---------------------------------------------------------------------------


def _resolve(lay: Layout, buf, offset: int, path: list):
    """Walk a field path from a segment start; returns (offset, leaf layout)."""
    cur = lay
    for part in path:
        if isinstance(part, int):
            if cur.kind != "array":
                raise LayoutError(f"indexing into non-array {cur.type_name}")
            if cur.const_length is not None:
                n = cur.const_length
            else:
                n = _LEN_STRUCT.unpack_from(buf, offset)[0]
                offset += 4
            if not 0 <= part < n:
                raise LayoutError(f"index {part} out of bounds for length {n}")
            if cur.elem.const_size is not None:
                offset += part * cur.elem.const_size
            else:
                for _ in range(part):
                    offset += cur.elem.size_at(buf, offset)
            cur = cur.elem
        else:
            if cur.kind != "class":
                raise LayoutError(f"field {part!r} on non-class {cur.type_name}")
            for fname, sub in cur.fields:
                if fname == part:
                    cur = sub
                    break
                offset += sub.size_at(buf, offset)
            else:
                raise LayoutError(f"no field {part!r} in layout of {cur.type_name}")
    return offset, cur


def parse_path(path) -> list:
    """Accepts "features.data[3]" or a pre-split list of parts."""
    if not isinstance(path, str):
        return list(path)
    parts: list = []
    for chunk in path.split("."):
        while "[" in chunk:
            head, rest = chunk.split("[", 1)
            if head:
                parts.append(head)
            idx, chunk = rest.split("]", 1)
            parts.append(int(idx))
        if chunk:
            parts.append(chunk)
    return parts


# ---------------------------------------------------------------------------
# Page store
# ---------------------------------------------------------------------------


class PageStore:
    """Allocates uniform fixed-capacity pages under a byte budget.

    Accounting and reference counting run under one lock, so concurrent
    retain/release pairs from different threads never corrupt a count or
    double-free a group."""

    def __init__(self, capacity: int = DEFAULT_PAGE_CAPACITY, budget: Optional[int] = None):
        if capacity <= 4:
            raise StoreError(f"page capacity {capacity} is too small")
        self.capacity = capacity
        self.max_pages = None if budget is None else max(budget // capacity, 0)
        self.live_pages = 0
        self.peak_pages = 0
        self.total_allocated = 0
        self.tick = 0
        self.lock = threading.RLock()
        # installed by the coordinator: called with (store, requesting group)
        # when the budget is hit; must free at least one page or raise.
        self.make_room: Optional[Callable[["PageStore", "PageInfo"], None]] = None
        # called when a swapped group is touched; default just reloads it.
        self.on_fault: Callable[["PageInfo"], None] = lambda g: g.swap_in()

    def new_group(self, owner_id: str = "") -> "PageInfo":
        return PageInfo(self, owner_id)

    def _account_page(self, group: "PageInfo") -> None:
        with self.lock:
            if self.max_pages is not None and self.live_pages >= self.max_pages:
                if self.make_room is not None:
                    self.make_room(self, group)
                if self.max_pages is not None and self.live_pages >= self.max_pages:
                    raise BudgetExhausted(
                        f"page budget exhausted ({self.live_pages} pages live) "
                        "and nothing evictable"
                    )
            self.live_pages += 1
            self.total_allocated += 1
            self.peak_pages = max(self.peak_pages, self.live_pages)

    def _alloc_page(self, group: "PageInfo") -> bytearray:
        self._account_page(group)
        return bytearray(self.capacity)

    def _free_pages(self, n: int) -> None:
        with self.lock:
            self.live_pages -= n

    def touch(self, group: "PageInfo") -> None:
        self.tick += 1
        group.lru_tick = self.tick


class PageInfo:
    """Metadata of one page group: pages, append/scan cursors, dependent
    groups, and a reference count. Pages are freed exactly when the count
    reaches zero."""

    def __init__(self, store: PageStore, owner_id: str = ""):
        self.store = store
        self.owner_id = owner_id
        self.pages: list[Optional[bytearray]] = []
        self.used: list[int] = []
        self.end_offset = 0
        self.cur_page = 0
        self.cur_offset = 0
        self.dep_pages: list[PageInfo] = []
        self.ref_count = 1
        self.lru_tick = 0
        self.sealed = False
        self.live = True
        self.swapped_path: Optional[str] = None
        self.appended_segments = 0
        self.evictable = False  # set for cache-owned groups
        self.pinned = False  # excluded from eviction while set
        self.swap_level = "disk"  # "memory" groups cannot be swapped out

    # -- bookkeeping

    @property
    def page_count(self) -> int:
        return len(self.pages)

    @property
    def resident(self) -> bool:
        return self.swapped_path is None

    def _page(self, i: int) -> bytearray:
        if not self.live:
            raise StoreError(f"group {self.owner_id}: access after release")
        if self.swapped_path is not None:
            self.store.on_fault(self)
        self.store.touch(self)
        return self.pages[i]

    def bytes_used(self) -> int:
        return sum(self.used)

    # -- append / read / scan

    def append_segment(self, data: bytes) -> int:
        """Write one segment contiguously; returns a packed SegmentRef."""
        if not self.live:
            raise StoreError(f"group {self.owner_id}: append after release")
        if self.sealed:
            raise StoreError(f"group {self.owner_id}: append after seal")
        n = len(data)
        cap = self.store.capacity
        if n > cap:
            raise SegmentTooLarge(f"segment of {n} bytes exceeds page capacity {cap}")
        if self.swapped_path is not None:
            self.store.on_fault(self)
        if not self.pages or cap - self.end_offset < n:
            self.pages.append(self.store._alloc_page(self))
            self.used.append(0)
            self.end_offset = 0
        page_index = len(self.pages) - 1
        offset = self.end_offset
        self.pages[page_index][offset : offset + n] = data
        self.end_offset = offset + n
        self.used[page_index] = self.end_offset
        self.appended_segments += 1
        return pack_ref(page_index, offset)

    def reserve(self, n: int) -> None:
        """Start a new page unless `n` contiguous bytes remain in the last
        one. Lets adjacent segments stay on one page so their offsets can be
        computed arithmetically."""
        cap = self.store.capacity
        if n > cap:
            raise SegmentTooLarge(f"cannot reserve {n} bytes in {cap}-byte pages")
        if not self.pages or cap - self.end_offset < n:
            if self.swapped_path is not None:
                self.store.on_fault(self)
            self.pages.append(self.store._alloc_page(self))
            self.used.append(0)
            self.end_offset = 0

    def read_segment(self, ref: int, length: int) -> bytes:
        p, off = ref_page(ref), ref_offset(ref)
        return bytes(self._page(p)[off : off + length])

    def write_segment(self, ref: int, data: bytes) -> None:
        """Overwrite a segment in place; the replacement must be identical in
        length (fixed-size reuse)."""
        p, off = ref_page(ref), ref_offset(ref)
        page = self._page(p)
        if off + len(data) > self.used[p]:
            raise StoreError("in-place write past the segment region")
        page[off : off + len(data)] = data

    def segment_size(self, ref: int, lay: Layout) -> int:
        p, off = ref_page(ref), ref_offset(ref)
        return lay.size_at(self._page(p), off)

    def scan(self, lay: Layout) -> Iterator[int]:
        """Yield SegmentRefs in append order, advancing the scan cursor. The
        group is pinned against eviction while the scan is running."""
        self.cur_page = 0
        self.cur_offset = 0
        self.pinned = True
        try:
            for p in range(len(self.pages)):
                page = self._page(p)
                off = 0
                while off < self.used[p]:
                    self.cur_page = p
                    self.cur_offset = off
                    yield pack_ref(p, off)
                    off += lay.size_at(page, off)
                self.cur_page = p
                self.cur_offset = off
        finally:
            self.pinned = False

    # -- field access

    def read_field(self, ref: int, lay: Layout, path) -> object:
        p, base = ref_page(ref), ref_offset(ref)
        buf = self._page(p)
        off, leaf = _resolve(lay, buf, base, parse_path(path))
        if leaf.kind != "prim":
            raise LayoutError(f"path {path!r} does not end at a primitive")
        v = struct.unpack_from("<" + _PRIM_FMT[leaf.prim_kind], buf, off)[0]
        return chr(v) if leaf.prim_kind == "char" else v

    def write_field(self, ref: int, lay: Layout, path, value) -> None:
        p, base = ref_page(ref), ref_offset(ref)
        buf = self._page(p)
        off, leaf = _resolve(lay, buf, base, parse_path(path))
        if leaf.kind != "prim":
            raise LayoutError(f"path {path!r} does not end at a primitive")
        if leaf.prim_kind == "char":
            value = ord(value)
        struct.pack_into("<" + _PRIM_FMT[leaf.prim_kind], buf, off, value)

    # -- reference counting

    def retain(self) -> int:
        with self.store.lock:
            if not self.live:
                raise StoreError(f"group {self.owner_id}: retain after release")
            self.ref_count += 1
            return self.ref_count

    def release(self) -> int:
        with self.store.lock:
            if not self.live:
                raise StoreError(f"group {self.owner_id}: release after death")
            self.ref_count -= 1
            if self.ref_count == 0:
                if self.swapped_path is None:
                    self.store._free_pages(len(self.pages))
                self.pages = []
                self.used = []
                self.live = False
                for dep in self.dep_pages:
                    dep.release()
                self.dep_pages = []
            return self.ref_count

    def add_dep(self, primary: "PageInfo") -> None:
        """Record a dependency on another group's pages; pins them."""
        primary.retain()
        self.dep_pages.append(primary)

    # -- swap to disk and back

    def swap_out(self, path: str) -> int:
        """Write the used prefix of every page (the concatenation of all
        encoded segments, in order) and drop the byte buffers."""
        if not self.live or self.swapped_path is not None:
            raise StoreError(f"group {self.owner_id}: bad swap_out")
        with open(path, "wb") as fh:
            for p, page in enumerate(self.pages):
                fh.write(bytes(page[: self.used[p]]))
        written = self.bytes_used()
        self.store._free_pages(len(self.pages))
        self.pages = [None] * len(self.used)
        self.swapped_path = path
        return written

    def swap_in(self) -> None:
        if self.swapped_path is None:
            raise StoreError(f"group {self.owner_id}: not swapped")
        path = self.swapped_path
        self.pinned = True
        try:
            pages: list[Optional[bytearray]] = []
            with open(path, "rb") as fh:
                for n in self.used:
                    self.store._account_page(self)
                    page = bytearray(self.store.capacity)
                    page[:n] = fh.read(n)
                    pages.append(page)
            self.pages = pages
            self.swapped_path = None
        finally:
            self.pinned = False


def allocate_page_group(store: PageStore, owner_id: str) -> PageInfo:
    """Empty group with ref_count 1; pages are allocated lazily on append."""
    return store.new_group(owner_id)
