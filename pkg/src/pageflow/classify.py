"""Size-type classification: decides which types may be stored as fixed-size
byte segments.

A type is StaticFixed when every instance has the same byte footprint for the
whole analysis scope, RuntimeFixed when each instance's footprint is frozen at
construction, Variable when it may change afterwards, and RecurDef when its
type dependency graph has a cycle. Local classification inspects only type
structure; global classification sharpens it with two code analyses over a
scope call graph: symbolic constant propagation (to prove equal array
allocation lengths) and init-only field detection (to prove fields are never
re-assigned after construction). Phased refinement re-runs the global analysis
per execution phase, where fewer methods are reachable and more types freeze.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from . import ir
from .ir import (
    ArrayLen,
    ArrayLoad,
    ArrayStore,
    Assign,
    Binary,
    Call,
    CallGraph,
    Const,
    ExprStmt,
    FieldDef,
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


class SizeType(enum.Enum):
    STATIC_FIXED = "StaticFixed"
    RUNTIME_FIXED = "RuntimeFixed"
    VARIABLE = "Variable"
    RECUR_DEF = "RecurDef"

    def __str__(self) -> str:
        return self.value


_ORDER = {SizeType.STATIC_FIXED: 0, SizeType.RUNTIME_FIXED: 1, SizeType.VARIABLE: 2}


def variability_le(a: SizeType, b: SizeType) -> bool:
    """a <= b in the StaticFixed < RuntimeFixed < Variable order.

    RecurDef sits outside the order; it is only comparable to itself.
    """
    if a is SizeType.RECUR_DEF or b is SizeType.RECUR_DEF:
        return a is b
    return _ORDER[a] <= _ORDER[b]


# ---------------------------------------------------------------------------
# Symbolic values: Const(n) | Sym(id, offset) | Top
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SymValue:
    form: str  # "const" | "sym" | "top"
    base: int = 0  # constant value, or symbol id
    offset: int = 0

    def __str__(self) -> str:
        if self.form == "const":
            return f"Const({self.base})"
        if self.form == "sym":
            if self.offset == 0:
                return f"Symbol({self.base})"
            sign = "+" if self.offset > 0 else "-"
            return f"Symbol({self.base}){sign}{abs(self.offset)}"
        return "Top"


TOP = SymValue("top")


def sym_const(n: int) -> SymValue:
    return SymValue("const", n)


def sym_ref(sym_id: int, offset: int = 0) -> SymValue:
    return SymValue("sym", sym_id, offset)


def sym_add(a: SymValue, b: SymValue) -> SymValue:
    if a.form == "const" and b.form == "const":
        return sym_const(a.base + b.base)
    if a.form == "sym" and b.form == "const":
        return sym_ref(a.base, a.offset + b.base)
    if a.form == "const" and b.form == "sym":
        return sym_ref(b.base, b.offset + a.base)
    return TOP


def sym_sub(a: SymValue, b: SymValue) -> SymValue:
    if b.form == "const":
        return sym_add(a, sym_const(-b.base))
    return TOP


def sym_join(a: SymValue | None, b: SymValue | None) -> SymValue | None:
    """Lattice join; None is bottom (unreached)."""
    if a is None:
        return b
    if b is None:
        return a
    if a == b:
        return a
    return TOP


# ---------------------------------------------------------------------------
# Symbolic propagation over a call graph
# ---------------------------------------------------------------------------


class SymbolicEnv:
    """Stable result of copy/constant propagation over one scope.

    `locals` maps (method qualname, variable) to the value after the method
    body; `site_lengths` maps each new-array site in the scope to the symbolic
    value of its length expression.
    """

    def __init__(self):
        self.locals: dict[tuple[str, str], SymValue] = {}
        self.site_lengths: dict[str, SymValue] = {}

    def local(self, method: str, var: str) -> SymValue:
        return self.locals.get((method, var), TOP)


class _Propagator:
    def __init__(self, graph: CallGraph, prog: Program):
        self.graph = graph
        self.prog = prog
        self.analysis = prog.analysis()
        self.methods = sorted(n for n in graph.nodes if n in prog.methods)
        if graph.entry in prog.methods:
            self.roots = [graph.entry]
        else:
            self.roots = sorted(c for (a, _s, c) in graph.edges if a == graph.entry)
        self._symbols: dict[object, SymValue] = {}
        self._next_symbol = 1
        self.param_in: dict[tuple[str, str], SymValue | None] = {}
        self.ret_val: dict[str, SymValue | None] = {}
        self.site_lengths: dict[str, SymValue | None] = {}
        self.out_env: dict[str, dict[str, SymValue]] = {}

    def _fresh(self, key: object) -> SymValue:
        if key not in self._symbols:
            self._symbols[key] = sym_ref(self._next_symbol)
            self._next_symbol += 1
        return self._symbols[key]

    def run(self) -> SymbolicEnv:
        for _round in range(80):
            changed = False
            for name in self.methods:
                if self._analyze_method(name):
                    changed = True
            if not changed:
                break
        else:
            raise ir.IRError("symbolic propagation did not converge")
        env = SymbolicEnv()
        for name in self.methods:
            for var, val in self.out_env.get(name, {}).items():
                env.locals[(name, var)] = val
        for site, val in self.site_lengths.items():
            env.site_lengths[site] = val if val is not None else TOP
        return env

    def _analyze_method(self, name: str) -> bool:
        m = self.prog.methods[name]
        env: dict[str, SymValue] = {}
        is_root = name in self.roots
        for p in m.params:
            if is_root:
                env[p] = self._fresh(("param", name, p))
            else:
                v = self.param_in.get((name, p))
                env[p] = v if v is not None else TOP
        if m.owner != "free":
            env["this"] = TOP
        before = (dict(self.param_in), dict(self.ret_val), dict(self.site_lengths))
        out = self._walk(m, m.body, env)
        self.out_env[name] = out
        return before != (self.param_in, self.ret_val, self.site_lengths)

    # -- statement walking (flow-sensitive within a method)

    def _walk(self, m: MethodDef, body: list[Node], env: dict[str, SymValue]) -> dict[str, SymValue]:
        for s in body:
            env = self._stmt(m, s, env)
        return env

    def _stmt(self, m: MethodDef, s: Node, env: dict[str, SymValue]) -> dict[str, SymValue]:
        if isinstance(s, Assign):
            val = self._eval(m, s.value, env)
            env = dict(env)
            env[s.name] = val
            return env
        if isinstance(s, (FieldStore, ArrayStore, ExprStmt)):
            for e in ir._stmt_exprs(s):
                self._eval(m, e, env)
            return env
        if isinstance(s, Return):
            if s.value is not None:
                val = self._eval(m, s.value, env)
            else:
                val = TOP
            self.ret_val[m.qualname] = sym_join(self.ret_val.get(m.qualname), val)
            return env
        if isinstance(s, If):
            self._eval(m, s.cond, env)
            env_then = self._walk(m, s.then_body, dict(env))
            env_else = self._walk(m, s.else_body, dict(env))
            return self._join_env(env_then, env_else)
        if isinstance(s, While):
            loop_env = dict(env)
            for _ in range(8):
                self._eval(m, s.cond, loop_env)
                body_env = self._walk(m, s.body, dict(loop_env))
                merged = self._join_env(loop_env, body_env)
                if merged == loop_env:
                    break
                loop_env = merged
            else:
                loop_env = {v: TOP for v in loop_env}
            return loop_env
        return env

    @staticmethod
    def _join_env(a: dict[str, SymValue], b: dict[str, SymValue]) -> dict[str, SymValue]:
        out: dict[str, SymValue] = {}
        for var in set(a) | set(b):
            va, vb = a.get(var), b.get(var)
            joined = sym_join(va, vb)
            if joined is not None:
                out[var] = joined
        return out

    def _eval(self, m: MethodDef, e: Node, env: dict[str, SymValue]) -> SymValue:
        if isinstance(e, Const):
            return sym_const(e.value) if isinstance(e.value, int) and not isinstance(e.value, bool) else TOP
        if isinstance(e, Local):
            return env.get(e.name, TOP)
        if isinstance(e, ReadExternal):
            return self._fresh(("read", m.qualname, e.pos))
        if isinstance(e, Unary):
            self._eval(m, e.arg, env)
            return TOP
        if isinstance(e, Binary):
            left = self._eval(m, e.left, env)
            right = self._eval(m, e.right, env)
            if e.op == "add":
                return sym_add(left, right)
            if e.op == "sub":
                return sym_sub(left, right)
            return TOP
        if isinstance(e, NewArray):
            val = self._eval(m, e.length, env)
            self.site_lengths[e.site_id] = sym_join(self.site_lengths.get(e.site_id), val)
            return TOP
        if isinstance(e, NewObject):
            self._call_out(m, e.site_id, [self._eval(m, a, env) for a in e.args])
            return TOP
        if isinstance(e, (Call, VCall)):
            if isinstance(e, VCall):
                self._eval(m, e.recv, env)
            args = [self._eval(m, a, env) for a in e.args]
            return self._call_out(m, e.site_id, args)
        if isinstance(e, (FieldLoad, ArrayLoad, ArrayLen)):
            for child in _expr_children(e):
                self._eval(m, child, env)
            return TOP
        raise ir.IRError(f"symbolic eval: unhandled expression {e!r}")

    def _call_out(self, m: MethodDef, site_id: str, args: list[SymValue]) -> SymValue:
        result: SymValue | None = None
        for callee in sorted(self.analysis.site_callees.get(site_id, ())):
            if callee not in self.graph.nodes:
                continue
            cm = self.prog.methods[callee]
            for p, a in zip(cm.params, args):
                key = (callee, p)
                self.param_in[key] = sym_join(self.param_in.get(key), a)
            result = sym_join(result, self.ret_val.get(callee))
        return result if result is not None else TOP


def _expr_children(e: Node) -> list[Node]:
    if isinstance(e, FieldLoad):
        return [e.obj]
    if isinstance(e, ArrayLoad):
        return [e.arr, e.index]
    if isinstance(e, ArrayLen):
        return [e.arr]
    return []


def symbolic_propagate(graph: CallGraph, prog: Program) -> SymbolicEnv:
    """Copy/constant propagation over a scope; values entering the scope from
    outside (root parameters, external reads) become fresh symbols."""
    return _Propagator(graph, prog).run()


# ---------------------------------------------------------------------------
# Local classification
# ---------------------------------------------------------------------------


def classify_local(type_name: str, prog: Program, _memo: dict | None = None) -> SizeType:
    """Algorithm over the type dependency graph only; no code analysis."""
    if not prog.has_type(type_name):
        raise ir.UnknownTypeError(f"unknown type {type_name!r}")
    g = ir.build_type_dependency_graph(type_name, prog)
    if ir.has_dependency_cycle(g):
        return SizeType.RECUR_DEF
    memo = _memo if _memo is not None else {}

    def analyze_type(t: str) -> SizeType:
        if t in memo:
            return memo[t]
        if ir.is_primitive(t):
            result = SizeType.STATIC_FIXED
        elif t in prog.arrays:
            elem = analyze_field(prog.arrays[t].element_field)
            result = SizeType.RUNTIME_FIXED if elem is SizeType.STATIC_FIXED else SizeType.VARIABLE
        else:
            result = SizeType.STATIC_FIXED
            for f in prog.classes[t].fields:
                tmp = analyze_field(f)
                if tmp is SizeType.VARIABLE:
                    result = SizeType.VARIABLE
                    break
                if tmp is SizeType.RUNTIME_FIXED:
                    result = SizeType.RUNTIME_FIXED
        memo[t] = result
        return result

    def analyze_field(f: FieldDef) -> SizeType:
        result = SizeType.STATIC_FIXED
        for t in f.get_type_set():
            tmp = analyze_type(t)
            if tmp is SizeType.VARIABLE:
                return SizeType.VARIABLE
            if tmp is SizeType.RUNTIME_FIXED:
                if not f.is_final:
                    return SizeType.VARIABLE
                result = SizeType.RUNTIME_FIXED
        return result

    return analyze_type(type_name)


# ---------------------------------------------------------------------------
# Scope: one call graph plus the code analyses the refinements need
# ---------------------------------------------------------------------------


class Scope:
    """Analysis scope (a job stage, one phase, or the whole program)."""

    def __init__(self, name: str, graph: CallGraph, prog: Program):
        self.name = name
        self.graph = graph
        self.prog = prog
        self.analysis = prog.analysis()
        self._env: SymbolicEnv | None = None
        self._srefine_memo: dict[tuple[str, tuple[str, str] | None], bool] = {}
        self._rrefine_memo: dict[str, bool] = {}
        self.notes: list[str] = []

    @property
    def env(self) -> SymbolicEnv:
        if self._env is None:
            self._env = symbolic_propagate(self.graph, self.prog)
        return self._env

    def _note(self, msg: str) -> None:
        if msg not in self.notes:
            self.notes.append(msg)

    # -- fixed-length arrays

    def alloc_sites_for(self, array_type: str, via: FieldDef | None) -> list[ir.AllocSite]:
        """Allocation sites of `array_type` in scope that flow into `via`.

        With no field context (classifying a bare array type) all in-scope
        sites count, and so do external pseudo-sites: instances built by input
        adapters are observable in any scope, and nothing pins their length."""
        if via is None:
            sites = {
                s
                for s in self.analysis._all_sites
                if s.type_name == array_type
                and (s.method in self.graph.nodes or s.method == "<external>")
            }
        else:
            sites = self.analysis.field_pts.get((via.owner, via.name), set())
            sites = {s for s in sites if s.type_name == array_type and s.method in self.graph.nodes}
        return sorted(sites, key=lambda s: s.site_id)

    def is_fixed_length(self, array_type: str, via: FieldDef | None) -> bool:
        """True iff every in-scope allocation of `array_type` reaching `via`
        uses pairwise-equal, non-Top symbolic lengths. With no in-scope
        allocation site the answer is False: nothing pins a common length, so
        only the runtime-fixed route (init-only fields) remains open."""
        sites = self.alloc_sites_for(array_type, via)
        where = f"{via.owner}.{via.name}" if via is not None else "*"
        if not sites:
            self._note(f"{array_type} via {where}: no allocation sites in scope")
            return False
        vals = [self.env.site_lengths.get(s.site_id, TOP) for s in sites]
        if any(v == TOP for v in vals):
            self._note(f"{array_type} via {where}: allocation length not statically known")
            return False
        if any(v != vals[0] for v in vals):
            self._note(
                f"{array_type} via {where}: unequal allocation lengths "
                + ", ".join(str(v) for v in vals)
            )
            return False
        return True

    def fixed_length_value(self, array_type: str, via: FieldDef | None) -> SymValue | None:
        """The common symbolic length, when is_fixed_length holds."""
        sites = self.alloc_sites_for(array_type, via)
        if not sites:
            return None
        vals = [self.env.site_lengths.get(s.site_id, TOP) for s in sites]
        if any(v == TOP or v != vals[0] for v in vals):
            return None
        return vals[0]

    # -- init-only fields

    def is_init_only(self, f: FieldDef) -> bool:
        if f.name == "<elem>":
            return False  # array element fields are never init-only
        if f.is_final:
            return True
        stores = [
            (method, st)
            for (method, st) in self.analysis.field_stores.get((f.owner, f.name), [])
            if method in self.graph.nodes
        ]
        ctors = {
            m.qualname
            for m in self.prog.methods_of(f.owner)
            if m.is_ctor and m.qualname in self.graph.nodes
        }
        for method, st in stores:
            in_ctor = method in ctors and isinstance(st.obj, Local) and st.obj.name == "this"
            if not in_ctor:
                self._note(f"{f.owner}.{f.name}: assigned outside a constructor in {method}")
                return False
        # at most one assignment along any constructor delegation chain
        per_ctor = {c: 0 for c in ctors}
        for method, _st in stores:
            per_ctor[method] = per_ctor.get(method, 0) + 1
        delegations = {
            c: [callee for (a, _s, callee) in self.graph.edges if a == c and callee in ctors]
            for c in ctors
        }

        def chain_count(c: str, seen: frozenset) -> int:
            if c in seen:
                return 2  # recursive delegation: treat as over-assigned
            total = per_ctor.get(c, 0)
            for d in delegations.get(c, ()):
                total += chain_count(d, seen | {c})
            return total

        for c in sorted(ctors):
            if chain_count(c, frozenset()) > 1:
                self._note(f"{f.owner}.{f.name}: assigned more than once in the {c} chain")
                return False
        return True

    # -- refinements

    def srefine(self, type_name: str, via: FieldDef | None = None) -> bool:
        key = (type_name, (via.owner, via.name) if via is not None else None)
        if key in self._srefine_memo:
            return self._srefine_memo[key]
        self._srefine_memo[key] = False  # cycle guard; callers filter RecurDef
        ok = True
        for f in self.prog.fields_of(type_name):
            for member in f.get_type_set():
                if ir.is_primitive(member):
                    continue
                if not self.srefine(member, via=f):
                    ok = False
                    break
            if not ok:
                break
        if ok and type_name in self.prog.arrays:
            ok = self.is_fixed_length(type_name, via)
        self._srefine_memo[key] = ok
        return ok

    def rrefine(self, type_name: str) -> bool:
        if type_name in self._rrefine_memo:
            return self._rrefine_memo[type_name]
        self._rrefine_memo[type_name] = False
        ok = True
        for f in self.prog.fields_of(type_name):
            needs_init_only = False
            members = f.get_type_set()
            non_prim = [m for m in members if not ir.is_primitive(m)]
            for member in non_prim:
                if not self.srefine(member, via=f):
                    if self.rrefine(member):
                        needs_init_only = True
                    else:
                        ok = False
                        break
            if not ok:
                break
            if needs_init_only:
                if f.is_final and any(self.srefine(m, via=f) for m in non_prim) and len(non_prim) > 1:
                    # mixed StaticFixed/RuntimeFixed members behind a final
                    # field: the refinement admits it; noted for review.
                    self._note(f"{f.owner}.{f.name}: mixed fixed-size members on a final field")
                if not self.is_init_only(f):
                    ok = False
                    break
        self._rrefine_memo[type_name] = ok
        return ok


def classify_global(type_name: str, local: SizeType, scope: Scope) -> SizeType:
    """Refine a local verdict inside one scope: try the static-fixed proof
    first, otherwise the runtime-fixed one."""
    if local is SizeType.RECUR_DEF:
        raise ValueError("global classification does not apply to recursively defined types")
    if scope.srefine(type_name):
        return SizeType.STATIC_FIXED
    if local is SizeType.RUNTIME_FIXED or scope.rrefine(type_name):
        return SizeType.RUNTIME_FIXED
    return SizeType.VARIABLE


# convenience wrappers matching the operation-level surface


def srefine(type_name: str, scope: Scope) -> bool:
    return scope.srefine(type_name)


def rrefine(type_name: str, scope: Scope) -> bool:
    return scope.rrefine(type_name)


def is_fixed_length(array_type: str, via: FieldDef | None, scope: Scope) -> bool:
    return scope.is_fixed_length(array_type, via)


def is_init_only(f: FieldDef, scope: Scope) -> bool:
    return scope.is_init_only(f)


# ---------------------------------------------------------------------------
# Job-level classification with phased refinement
# ---------------------------------------------------------------------------


@dataclass
class ClassificationReport:
    job: str | None
    # (type, stage scope) -> verdict
    per_type: dict[tuple[str, str], SizeType] = field(default_factory=dict)
    # (phase scope, type) -> verdict, only for types still Variable stage-wide
    per_phase: dict[tuple[str, str], SizeType] = field(default_factory=dict)
    local: dict[str, SizeType] = field(default_factory=dict)
    evidence: dict[tuple[str, str], tuple[str, ...]] = field(default_factory=dict)

    def lines(self) -> list[str]:
        out = []
        for (t, scope), verdict in sorted(self.per_type.items()):
            ev = "; ".join(self.evidence.get((t, scope), ()))
            out.append((t, scope, str(verdict), ev))
        for (scope, t), verdict in sorted(self.per_phase.items()):
            ev = "; ".join(self.evidence.get((t, scope), ()))
            out.append((t, scope, str(verdict), ev))
        return out


def stage_scope_roots(job: ir.JobSpec, stage: ir.StageDecl, prog: Program) -> list[str]:
    roots: list[str] = []
    for ph in stage.phases:
        for name in phase_scope_roots(ph, prog):
            if name not in roots:
                roots.append(name)
    return roots


def phase_scope_roots(phase: ir.PhaseDecl, prog: Program) -> list[str]:
    roots: list[str] = []
    if phase.udf != "identity":
        roots.append(phase.udf)
    sink = prog.containers[phase.sink]
    for mname in (sink.create, sink.combine):
        if mname is not None and mname not in roots:
            roots.append(mname)
    return roots


def make_scope(name: str, roots: list[str], prog: Program) -> Scope:
    if roots:
        graph = ir.build_call_graph(roots, prog, scope=name)
    else:
        graph = CallGraph(entry=f"<{name}:empty>")
        graph.nodes.add(graph.entry)
    return Scope(name, graph, prog)


def program_scope(prog: Program) -> Scope:
    """Whole-program scope: every method is a root. Used for job-less IR."""
    return make_scope("*", sorted(prog.methods), prog)


def combined_value_type(decl: ir.ContainerDecl, prog: Program) -> str | None:
    """The type a hash-group buffer accumulates per key: the create method's
    return type (when there is exactly one)."""
    if decl.kind != "hash-group" or decl.create is None:
        return None
    types = sorted({s.type_name for s in prog.analysis().return_pts.get(decl.create, ())})
    return types[0] if len(types) == 1 else None


def job_relevant_types(job: ir.JobSpec, prog: Program) -> list[str]:
    """Container element/key/value types of the job plus their dependency
    closures."""
    names: list[str] = []
    for stage in job.stages:
        for ph in stage.phases:
            for cid in (ph.source, ph.sink):
                decl = prog.containers[cid]
                combined = combined_value_type(decl, prog)
                for t in (decl.elem, decl.key, decl.val, combined):
                    if t is not None and t not in names:
                        names.append(t)
    closure: list[str] = []
    for t in names:
        if ir.is_primitive(t):
            if t not in closure:
                closure.append(t)
            continue
        g = ir.build_type_dependency_graph(t, prog)
        for n in sorted(g.nodes):
            if n not in closure:
                closure.append(n)
    return closure


def _notes_about(scope: Scope, type_name: str, prog: Program) -> tuple[str, ...]:
    """Scope notes that mention a type (or a field owner) in the dependency
    closure of `type_name`."""
    if ir.is_primitive(type_name):
        return ()
    g = ir.build_type_dependency_graph(type_name, prog)
    out = []
    for note in scope.notes:
        head = note.split(":", 1)[0]
        if any(n in head for n in g.nodes if not ir.is_primitive(n)):
            out.append(note)
    return tuple(out)


def phased_refine(job: ir.JobSpec, prog: Program) -> ClassificationReport:
    """Classify each job-relevant type per stage, then re-run the global
    analysis per phase for types still Variable at stage scope."""
    prog.analysis()
    report = ClassificationReport(job=job.name)
    local_memo: dict[str, SizeType] = {}
    types = job_relevant_types(job, prog)
    for t in types:
        report.local[t] = classify_local(t, prog, local_memo)
    for stage in job.stages:
        stage_name = f"{job.name}:{stage.name}"
        scope = make_scope(stage_name, stage_scope_roots(job, stage, prog), prog)
        for t in types:
            local = report.local[t]
            if local is SizeType.RECUR_DEF:
                g = ir.build_type_dependency_graph(t, prog)
                path = ir.dependency_cycle_path(g)
                report.per_type[(t, stage_name)] = SizeType.RECUR_DEF
                report.evidence[(t, stage_name)] = (f"dependency cycle: {' -> '.join(path)}",)
                continue
            verdict = classify_global(t, local, scope)
            report.per_type[(t, stage_name)] = verdict
            report.evidence[(t, stage_name)] = _notes_about(scope, t, prog)
        # phased refinement proper
        for ph in stage.phases:
            phase_name = f"{stage_name}/{ph.name}"
            phase_scope: Scope | None = None
            for t in types:
                if report.per_type[(t, stage_name)] is not SizeType.VARIABLE:
                    continue
                if phase_scope is None:
                    phase_scope = make_scope(phase_name, phase_scope_roots(ph, prog), prog)
                verdict = classify_global(t, report.local[t], phase_scope)
                report.per_phase[(phase_name, t)] = verdict
                report.evidence[(t, phase_name)] = _notes_about(phase_scope, t, prog)
    return report


def classify_program(prog: Program) -> ClassificationReport:
    """Program-scope classification for IR with no jobs (scope name "*")."""
    report = ClassificationReport(job=None)
    scope = program_scope(prog)
    local_memo: dict[str, SizeType] = {}
    for t in prog.type_names():
        local = classify_local(t, prog, local_memo)
        report.local[t] = local
        if local is SizeType.RECUR_DEF:
            g = ir.build_type_dependency_graph(t, prog)
            report.per_type[(t, "*")] = SizeType.RECUR_DEF
            report.evidence[(t, "*")] = (
                f"dependency cycle: {' -> '.join(ir.dependency_cycle_path(g))}",
            )
            continue
        report.per_type[(t, "*")] = classify_global(t, local, scope)
        report.evidence[(t, "*")] = _notes_about(scope, t, prog)
    return report
