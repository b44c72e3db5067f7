"""Executable form of the IR: every method compiles to a Python function.

Classes become generated Python classes with __slots__; arrays are plain
lists; primitives are Python scalars. Methods attach as `m_<name>` so virtual
calls dispatch through normal attribute lookup, constructors get an
allocating wrapper `c_<Type>_<name>`, and free methods become `f_<name>`.
Every generated function takes the runtime context as its first argument.

The runtime context optionally traces executions for the dynamic size oracle:
object construction and every field/array mutation record the instance's
data-size (the primitive bytes reachable from it, plus 4 bytes per array
length), tagged with the running (job, stage, phase) scope. Stores to fields
with non-primitive declared types always check the value's runtime type
against the field's inferred type-set and abort on a mismatch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

from . import ir
from .ir import (
    ArrayLen,
    ArrayLoad,
    ArrayStore,
    Assign,
    Binary,
    Call,
    Const,
    ExprStmt,
    FieldLoad,
    FieldStore,
    If,
    Local,
    MethodDef,
    NewArray,
    NewObject,
    Node,
    Program,
    ReadExternal,
    Return,
    Unary,
    VCall,
    While,
)

_BINOPS = {
    "add": "+",
    "sub": "-",
    "mul": "*",
    "div": "/",
    "lt": "<",
    "le": "<=",
    "gt": ">",
    "ge": ">=",
    "eq": "==",
    "ne": "!=",
    "and": "and",
    "or": "or",
}

_PRIM_DEFAULT = {
    "bool": "False",
    "byte": "0",
    "char": "'\\x00'",
    "short": "0",
    "int": "0",
    "long": "0",
    "float": "0.0",
    "double": "0.0",
}


class ExecutionError(Exception):
    pass


class TypeSetViolation(ExecutionError):
    """A runtime type escaped its field's inferred type-set."""


# ---------------------------------------------------------------------------
# Oracle trace
# ---------------------------------------------------------------------------


@dataclass
class TraceEvent:
    instance: int
    type_name: str
    scope: tuple  # (job tag, stage, phase)
    size: int
    kind: str  # "new" | "mut"


@dataclass
class OracleTrace:
    events: list[TraceEvent] = field(default_factory=list)
    called: set[tuple] = field(default_factory=set)  # (job tag, stage, qualname)
    instance_types: dict[int, str] = field(default_factory=dict)

    def events_in(self, job: str, stage: str, phase: Optional[str] = None) -> list[TraceEvent]:
        out = []
        for ev in self.events:
            if ev.scope[0] == job and ev.scope[1] == stage:
                if phase is None or ev.scope[2] == phase:
                    out.append(ev)
        return out


# ---------------------------------------------------------------------------
# Runtime context
# ---------------------------------------------------------------------------


class Runtime:
    """Compiled program plus per-run execution state."""

    def __init__(self, prog: Program):
        self.prog = prog
        self.analysis = prog.analysis()
        self.tracing = False
        self.trace: Optional[OracleTrace] = None
        self.scope = ("", "", "")
        self.alloc_objects = 0
        self.alloc_arrays = 0
        self.external = None  # iterator feeding (read-external)
        self._registry: dict[int, object] = {}  # id -> object (keepalive)
        self._instance_seq: dict[int, int] = {}
        self._arr_types: dict[int, str] = {}
        self._parents: dict[int, set[int]] = {}
        self._next_instance = 0
        self._field_cache: dict[tuple[type, str], ir.FieldDef] = {}
        self.classes: dict[str, type] = {}
        self.ns: dict[str, object] = {}
        self.generated_source = ""
        _compile_program(self)

    # -- plumbing used by generated code

    def read_external(self):
        if self.external is None:
            raise ExecutionError("read-external with no external input configured")
        return next(self.external)

    def instantiate(self, type_name: str):
        """Bare instance for decoders; fields are filled by the caller."""
        cls = self.classes[type_name]
        return object.__new__(cls)

    def _field_def(self, cls: type, fname: str) -> ir.FieldDef:
        key = (cls, fname)
        fd = self._field_cache.get(key)
        if fd is None:
            tname = cls._ir_type
            while tname is not None:
                c = self.prog.classes[tname]
                hit = next((f for f in c.fields if f.name == fname), None)
                if hit is not None:
                    fd = hit
                    break
                tname = c.base
            if fd is None:
                raise ExecutionError(f"no field {fname!r} on {cls._ir_type}")
            self._field_cache[key] = fd
        return fd

    def store_ref(self, obj, fname: str, value) -> None:
        """Reference-typed field store: type-set check, assignment, tracing."""
        fd = self._field_def(type(obj), fname)
        if value is not None and not isinstance(value, list):
            rt_type = type(value)._ir_type
            if rt_type not in fd.get_type_set():
                raise TypeSetViolation(
                    f"{fd.owner}.{fname}: runtime type {rt_type} not in "
                    f"inferred type-set {fd.get_type_set()}"
                )
        setattr(obj, fname, value)
        if self.tracing:
            if value is not None:
                self._link(value, obj)
            self._mutated(obj)

    def array_store_ref(self, arr: list, index: int, value) -> None:
        arr[index] = value
        if self.tracing:
            if value is not None:
                self._link(value, arr)
            self._mutated(arr)

    def new_array(self, type_name: str, n: int, fill) -> list:
        arr = [fill] * n
        self.alloc_arrays += 1
        if self.tracing:
            self.register_array(arr, type_name)
        return arr

    # -- oracle bookkeeping

    def start_trace(self) -> OracleTrace:
        self.tracing = True
        self.trace = OracleTrace()
        self._registry.clear()
        self._instance_seq.clear()
        self._arr_types.clear()
        self._parents.clear()
        self._next_instance = 0
        return self.trace

    def stop_trace(self) -> None:
        self.tracing = False

    def register_array(self, arr: list, type_name: str) -> None:
        key = id(arr)
        if key in self._registry:
            return
        self._registry[key] = arr
        self._arr_types[key] = type_name
        self._next_instance += 1
        self._instance_seq[key] = self._next_instance
        self.trace.instance_types[self._next_instance] = type_name
        for v in arr:
            if isinstance(v, list) or (v is not None and hasattr(v, "_ir_type")):
                self._link(v, arr)
        self._event(arr, "new")

    def note_new(self, obj) -> None:
        key = id(obj)
        self._registry[key] = obj
        self._next_instance += 1
        self._instance_seq[key] = self._next_instance
        self.trace.instance_types[self._next_instance] = obj._ir_type
        for fname in _all_slot_fields(type(obj)):
            v = getattr(obj, fname, None)
            if isinstance(v, list) or (v is not None and hasattr(v, "_ir_type")):
                self._link(v, obj)
        self._event(obj, "new")

    def note_mut(self, obj) -> None:
        if self.tracing:
            self._mutated(obj)

    def note_call(self, qualname: str) -> None:
        self.trace.called.add((self.scope[0], self.scope[1], qualname))

    def _link(self, child, parent) -> None:
        self._parents.setdefault(id(child), set()).add(id(parent))

    def _mutated(self, obj) -> None:
        if id(obj) not in self._instance_seq:
            return  # born before tracing started, or input-adapter value
        self._event(obj, "mut")
        # re-measure every registered ancestor whose graph contains obj
        seen = set()
        work = list(self._parents.get(id(obj), ()))
        while work:
            pid = work.pop()
            if pid in seen:
                continue
            seen.add(pid)
            parent = self._registry.get(pid)
            if parent is not None and pid in self._instance_seq:
                self._event(parent, "mut")
            work.extend(self._parents.get(pid, ()))

    def _event(self, obj, kind: str) -> None:
        self.trace.events.append(
            TraceEvent(
                instance=self._instance_seq[id(obj)],
                type_name=self._arr_types.get(id(obj)) or obj._ir_type,
                scope=self.scope,
                size=self.data_size(obj),
                kind=kind,
            )
        )

    # -- data-size (the dynamic counterpart of the static definition)

    def data_size(self, value, _seen: Optional[set] = None) -> int:
        """Sum of primitive field sizes over the runtime object graph; each
        array contributes 4 bytes for its length plus its elements."""
        if value is None:
            return 0
        seen = _seen if _seen is not None else set()
        if isinstance(value, list):
            key = id(value)
            if key in seen:
                return 0
            seen.add(key)
            tname = self._arr_types.get(key)
            elem = ir.array_element(tname) if tname else None
            if elem is not None and ir.is_primitive(elem):
                return 4 + len(value) * ir.PRIM_SIZES[elem]
            return 4 + sum(self.data_size(v, seen) for v in value)
        if hasattr(value, "_ir_type"):
            key = id(value)
            if key in seen:
                return 0
            seen.add(key)
            total = 0
            tname = value._ir_type
            while tname is not None:
                cls = self.prog.classes[tname]
                for f in cls.fields:
                    if ir.is_primitive(f.declared_type):
                        total += ir.PRIM_SIZES[f.declared_type]
                    else:
                        total += self.data_size(getattr(value, f.name, None), seen)
                tname = cls.base
            return total
        if isinstance(value, bool):
            return 1
        if isinstance(value, int):
            return 8
        if isinstance(value, float):
            return 8
        if isinstance(value, str):
            return 2 * len(value)
        raise ExecutionError(f"data_size: unhandled value {value!r}")

    # -- cost model (object mode): 16-byte headers, 8-byte references

    def model_cost(self, value, declared: Optional[str] = None, _seen: Optional[set] = None):
        """(managed object count, modeled heap bytes) for one value's graph
        under the 16-byte-header / 8-byte-reference object model. `declared`
        names the static type of the value, which settles the element width
        of bare lists."""
        if value is None:
            return 0, 0
        seen = _seen if _seen is not None else set()
        if isinstance(value, (bool, int, float)):
            return 1, 24  # boxed primitive: header + one value word
        if isinstance(value, str):
            return 1, 16 + 2 * len(value)
        key = id(value)
        if key in seen:
            return 0, 0
        seen.add(key)
        if isinstance(value, list):
            tname = declared if declared in self.prog.arrays else self._arr_types.get(key)
            elem = ir.array_element(tname) if tname else None
            if elem is not None and ir.is_primitive(elem):
                return 1, 16 + 4 + len(value) * ir.PRIM_SIZES[elem]
            nodes, bytes_ = 1, 16 + 4 + 8 * len(value)
            for v in value:
                n, b = self.model_cost(v, elem, seen)
                nodes += n
                bytes_ += b
            return nodes, bytes_
        nodes, bytes_ = 1, 16
        tname = value._ir_type
        while tname is not None:
            cls = self.prog.classes[tname]
            for f in cls.fields:
                if ir.is_primitive(f.declared_type):
                    bytes_ += ir.PRIM_SIZES[f.declared_type]
                else:
                    bytes_ += 8
                    member = f.get_type_set()
                    hint = member[0] if len(member) == 1 else f.declared_type
                    n, b = self.model_cost(getattr(value, f.name, None), hint, seen)
                    nodes += n
                    bytes_ += b
            tname = cls.base
        return nodes, bytes_

    # -- input adapters

    def adapt(self, elem_type: str, py):
        """Convert one Python input element into an IR value."""
        if ir.is_primitive(elem_type):
            return py
        if elem_type in self.prog.arrays:
            arr = list(py)  # strings become char lists, sequences copy
            if self.tracing:
                self.register_array(arr, elem_type)
            return arr
        raise ExecutionError(f"no input adapter for element type {elem_type!r}")


def _all_slot_fields(cls: type) -> list[str]:
    out = []
    for c in cls.__mro__:
        out.extend(getattr(c, "__slots__", ()))
    return out


# ---------------------------------------------------------------------------
# Compilation
# ---------------------------------------------------------------------------


class _Emitter:
    def __init__(self, rt: Runtime, m: MethodDef):
        self.rt = rt
        self.m = m
        self.lines: list[str] = []
        self.depth = 1
        self._tmp = 0

    def tmp(self) -> str:
        self._tmp += 1
        return f"_t{self._tmp}"

    def out(self, line: str) -> None:
        self.lines.append("    " * self.depth + line)

    # -- static typing hints from the points-to results

    def _expr_types(self, e: Node) -> set[str]:
        """Possible runtime types of an expression, from the whole-program
        points-to pass; empty means unknown."""
        a = self.rt.analysis
        name = self.m.qualname
        if isinstance(e, Local):
            return {s.type_name for s in a.local_pts.get((name, e.name), ())}
        if isinstance(e, FieldLoad):
            objs = self._expr_types(e.obj)
            out: set[str] = set()
            for t in objs:
                owner = a._field_owner(t, e.field_name)
                if owner is not None:
                    out |= {s.type_name for s in a.field_pts.get((owner, e.field_name), ())}
            return out
        if isinstance(e, ArrayLoad):
            arrs = self._expr_types(e.arr)
            out = set()
            for t in arrs:
                if t in self.rt.prog.arrays:
                    out |= {s.type_name for s in a.field_pts.get((t, "<elem>"), ())}
            return out
        if isinstance(e, NewObject):
            return {e.type_name}
        if isinstance(e, NewArray):
            return {e.type_name}
        if isinstance(e, (Call, VCall)):
            out = set()
            for callee in a.site_callees.get(e.site_id, ()):
                out |= {s.type_name for s in a.return_pts.get(callee, ())}
            return out
        return set()

    def _field_defs_for_store(self, s: FieldStore) -> list[ir.FieldDef]:
        types = self._expr_types(s.obj)
        a = self.rt.analysis
        return a._field_defs(s.field_name, {ir.AllocSite("", t, "") for t in types})

    # -- expressions

    def expr(self, e: Node) -> str:
        if isinstance(e, Const):
            return repr(e.value)
        if isinstance(e, Local):
            return f"v_{e.name}"
        if isinstance(e, ReadExternal):
            return "rt.read_external()"
        if isinstance(e, Unary):
            a = self.expr(e.arg)
            if e.op == "neg":
                return f"(-{a})"
            if e.op == "not":
                return f"(not {a})"
            if e.op == "exp":
                return f"_math_exp({a})"
            if e.op == "sqrt":
                return f"_math_sqrt({a})"
        if isinstance(e, Binary):
            return f"({self.expr(e.left)} {_BINOPS[e.op]} {self.expr(e.right)})"
        if isinstance(e, NewObject):
            args = ", ".join(self.expr(a) for a in e.args)
            sep = ", " if args else ""
            return f"c_{e.type_name}_{e.ctor}(rt{sep}{args})"
        if isinstance(e, NewArray):
            elem = ir.array_element(e.type_name)
            fill = _PRIM_DEFAULT.get(elem, "None")
            n = self.expr(e.length)
            return (
                f"(rt.new_array({e.type_name!r}, {n}, {fill}) "
                f"if rt.tracing else [{fill}] * ({n}))"
            )
        if isinstance(e, FieldLoad):
            return f"{self.expr(e.obj)}.{e.field_name}"
        if isinstance(e, ArrayLoad):
            return f"{self.expr(e.arr)}[{self.expr(e.index)}]"
        if isinstance(e, ArrayLen):
            return f"len({self.expr(e.arr)})"
        if isinstance(e, Call):
            callee = self.rt.prog.methods.get(e.name)
            if callee is None:
                raise ir.UnknownMethodError(f"call to undeclared method {e.name!r}")
            args = ", ".join(self.expr(a) for a in e.args)
            sep = ", " if args else ""
            return f"f_{e.name}(rt{sep}{args})"
        if isinstance(e, VCall):
            args = ", ".join(self.expr(a) for a in e.args)
            sep = ", " if args else ""
            return f"{self.expr(e.recv)}.m_{e.name}(rt{sep}{args})"
        raise ExecutionError(f"cannot compile expression {e!r}")

    # -- statements

    def stmt(self, s: Node) -> None:
        if isinstance(s, Assign):
            self.out(f"v_{s.name} = {self.expr(s.value)}")
        elif isinstance(s, FieldStore):
            defs = self._field_defs_for_store(s)
            prim = bool(defs) and all(ir.is_primitive(f.declared_type) for f in defs)
            if prim:
                t = self.tmp()
                self.out(f"{t} = {self.expr(s.obj)}")
                self.out(f"{t}.{s.field_name} = {self.expr(s.value)}")
                self.out(f"if rt.tracing: rt.note_mut({t})")
            else:
                self.out(f"rt.store_ref({self.expr(s.obj)}, {s.field_name!r}, {self.expr(s.value)})")
        elif isinstance(s, ArrayStore):
            types = self._expr_types(s.arr)
            prim = bool(types) and all(
                t in self.rt.prog.arrays and ir.is_primitive(self.rt.prog.arrays[t].element_decl)
                for t in types
            )
            if prim:
                t = self.tmp()
                self.out(f"{t} = {self.expr(s.arr)}")
                self.out(f"{t}[{self.expr(s.index)}] = {self.expr(s.value)}")
                self.out(f"if rt.tracing: rt.note_mut({t})")
            else:
                self.out(
                    f"rt.array_store_ref({self.expr(s.arr)}, {self.expr(s.index)}, "
                    f"{self.expr(s.value)})"
                )
        elif isinstance(s, Return):
            self.out("return" if s.value is None else f"return {self.expr(s.value)}")
        elif isinstance(s, If):
            self.out(f"if {self.expr(s.cond)}:")
            self.depth += 1
            if s.then_body:
                for x in s.then_body:
                    self.stmt(x)
            else:
                self.out("pass")
            self.depth -= 1
            if s.else_body:
                self.out("else:")
                self.depth += 1
                for x in s.else_body:
                    self.stmt(x)
                self.depth -= 1
        elif isinstance(s, While):
            self.out(f"while {self.expr(s.cond)}:")
            self.depth += 1
            if s.body:
                for x in s.body:
                    self.stmt(x)
            else:
                self.out("pass")
            self.depth -= 1
        elif isinstance(s, ExprStmt):
            self.out(self.expr(s.expr))
        else:
            raise ExecutionError(f"cannot compile statement {s!r}")


def _compile_program(rt: Runtime) -> None:
    prog = rt.prog
    ns: dict[str, object] = {
        "rtref": rt,
        "_math_exp": math.exp,
        "_math_sqrt": math.sqrt,
    }
    src: list[str] = []

    # classes, in dependency order (bases first)
    done: set[str] = set()

    def emit_class(name: str) -> None:
        if name in done:
            return
        cls = prog.classes[name]
        if cls.base is not None:
            emit_class(cls.base)
        base = f"C_{cls.base}" if cls.base is not None else "object"
        slots = ", ".join(repr(f.name) for f in cls.fields)
        src.append(f"class C_{name}({base}):")
        src.append(f"    __slots__ = ({slots}{',' if cls.fields else ''})")
        src.append(f"    _ir_type = {name!r}")
        src.append("")
        done.add(name)

    for name in prog.classes:
        emit_class(name)

    # methods and constructors
    for m in prog.methods.values():
        em = _Emitter(rt, m)
        for s in m.body:
            em.stmt(s)
        if not em.lines:
            em.out("pass")
        params = "".join(f", v_{p}" for p in m.params)
        body = "\n".join(em.lines)
        trace_head = f"    if rt.tracing: rt.note_call({m.qualname!r})\n"
        if m.owner == "free":
            src.append(f"def f_{m.name}(rt{params}):\n{trace_head}{body}\n")
        else:
            src.append(f"def _mm_{m.owner}_{m.name}(v_this, rt{params}):\n{trace_head}{body}\n")
            src.append(f"C_{m.owner}.m_{m.name} = _mm_{m.owner}_{m.name}")
            if m.is_ctor:
                defaults = []
                cl: Optional[str] = m.owner
                while cl is not None:
                    for f in prog.classes[cl].fields:
                        d = _PRIM_DEFAULT.get(f.declared_type, "None")
                        defaults.append(f"    o.{f.name} = {d}")
                    cl = prog.classes[cl].base
                dflt = "\n".join(defaults)
                src.append(
                    f"def c_{m.owner}_{m.name}(rt{params}):\n"
                    f"    o = C_{m.owner}.__new__(C_{m.owner})\n"
                    + (dflt + "\n" if dflt else "")
                    + f"    o.m_{m.name}(rt{params})\n"
                    f"    rt.alloc_objects += 1\n"
                    f"    if rt.tracing: rt.note_new(o)\n"
                    f"    return o\n"
                )

    code = "\n".join(src)
    rt.generated_source = code
    exec(compile(code, f"<pageflow-generated>", "exec"), ns)
    rt.ns = ns
    rt.classes = {name: ns[f"C_{name}"] for name in prog.classes}


def call_free(rt: Runtime, name: str, *args):
    fn = rt.ns.get(f"f_{name}")
    if fn is None:
        raise ir.UnknownMethodError(f"no free method {name!r}")
    return fn(rt, *args)


def ctor(rt: Runtime, type_name: str, ctor_name: str, *args):
    fn = rt.ns.get(f"c_{type_name}_{ctor_name}")
    if fn is None:
        raise ir.UnknownMethodError(f"no constructor {type_name}.{ctor_name}")
    return fn(rt, *args)
