"""Desk-scale dataflow runtime: per-job planning, dual-mode execution, and
the dynamic size oracle.

A job runs stage by stage; each stage is a chain of phases (read a container,
apply a UDF, write a container). Planning happens per submitted job: the
classifier produces verdicts per stage and phase, containers get layouts,
ownership roles, and decomposition decisions, and pre-existing decomposed
cache blocks that this job will resize are scheduled for reconstruction.

Execution is deterministic: partitions run in index order (optionally with a
thread pool evaluating UDFs, while sinks are always written in partition
order), shuffle routing hashes encoded key bytes, and hash-buffer reads come
out in canonical key order. Object mode and decomposed mode run the same
compiled UDFs over the same container machinery and must produce bit-identical
outputs.
"""

from __future__ import annotations

import hashlib
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

from . import classify, containers as ct, ir, pagestore as ps
from .classify import ClassificationReport, Scope, SizeType
from .interp import OracleTrace, Runtime


class ConfigError(Exception):
    pass


class PlanError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


@dataclass
class RunConfig:
    mode: str = "decomposed"
    page_capacity: int = ps.DEFAULT_PAGE_CAPACITY
    budget: int = 64 * 1024 * 1024
    cache_fraction: float = 0.6
    spill_dir: str = "."
    partitions: int = 1
    threads: int = 1
    seed: int = 0
    report_path: Optional[str] = None

    def validate(self) -> None:
        if self.mode not in ("object", "decomposed"):
            raise ConfigError(f"mode must be object or decomposed, got {self.mode!r}")
        if not 0.0 <= self.cache_fraction <= 1.0:
            raise ConfigError(f"cache fraction {self.cache_fraction} outside [0, 1]")
        if self.budget < 2 * self.page_capacity:
            raise ConfigError(
                f"budget {self.budget} smaller than two pages ({2 * self.page_capacity})"
            )
        if self.partitions < 1 or self.threads < 1:
            raise ConfigError("partitions and threads must be positive")


# ---------------------------------------------------------------------------
# Plans
# ---------------------------------------------------------------------------


@dataclass
class ContainerPlan:
    cid: str
    kind: str
    elem_type: Optional[str] = None
    key_type: Optional[str] = None
    val_type: Optional[str] = None
    elem_verdict: Optional[SizeType] = None
    key_verdict: Optional[SizeType] = None
    val_verdict: Optional[SizeType] = None
    elem_layout: Optional[ps.Layout] = None
    key_layout: Optional[ps.Layout] = None
    val_layout: Optional[ps.Layout] = None
    decompose: bool = False
    decompose_keys: bool = False
    decompose_vals: bool = False
    reuse_in_place: bool = False
    elide_pointers: bool = False
    role: str = "primary"
    share: Optional[tuple[str, str]] = None  # (arrangement, source cid)
    storage: str = "disk"
    notes: list[str] = field(default_factory=list)


@dataclass
class PhasePlan:
    name: str
    stage: str
    source: str
    sink: str
    udf: str
    flatten: bool
    keyed_source: bool
    passthrough: Optional[int] = None  # udf returns this parameter unchanged
    kv_result: bool = False
    value_is_element: bool = False
    key_path: Optional[list] = None
    reconstruct_before: Optional[str] = None  # evidence, when the source cache must rebuild


@dataclass
class ExecutionPlan:
    job: str
    report: ClassificationReport
    containers: dict[str, ContainerPlan] = field(default_factory=dict)
    stages: list[list] = field(default_factory=list)  # PhasePlan | ("unpersist", cid)
    ownership: dict[str, tuple[tuple, str]] = field(default_factory=dict)

    def describe(self) -> str:
        out = [f"job {self.job}"]
        for cid in sorted(self.containers):
            c = self.containers[cid]
            bits = [f"container {cid} kind={c.kind} role={c.role}"]
            if c.elem_type:
                bits.append(f"elem={c.elem_type}:{c.elem_verdict}")
            if c.key_type:
                bits.append(f"key={c.key_type}:{c.key_verdict}")
            if c.val_type:
                bits.append(f"val={c.val_type}:{c.val_verdict}")
            mode = []
            if c.decompose:
                mode.append("decomposed")
            if c.decompose_keys:
                mode.append("keys-decomposed")
            if c.decompose_vals:
                mode.append("vals-decomposed")
            if c.reuse_in_place:
                mode.append("in-place-reuse")
            if c.elide_pointers:
                mode.append("no-pointer-array")
            if c.share:
                mode.append(f"{c.share[0]}<-{c.share[1]}")
            bits.append("mode=" + (",".join(mode) if mode else "objects"))
            out.append("  " + " ".join(bits))
            if c.elem_layout is not None:
                offs = c.elem_layout.rel_offsets()
                pretty = ", ".join(
                    f"{k}@{'dyn' if v is None else v}" for k, v in offs.items()
                )
                out.append(f"    layout size={c.elem_layout.formula()} offsets: {pretty}")
            for note in c.notes:
                out.append(f"    note: {note}")
        for stage_items in self.stages:
            for item in stage_items:
                if isinstance(item, PhasePlan):
                    extra = ""
                    if item.reconstruct_before:
                        extra = f" reconstruct({item.reconstruct_before})"
                    out.append(
                        f"  phase {item.stage}/{item.name}: {item.source} -> {item.sink}"
                        f" udf={item.udf}{extra}"
                    )
                else:
                    out.append(f"  unpersist {item[1]}")
        return "\n".join(out)


# ---------------------------------------------------------------------------
# Planner
# ---------------------------------------------------------------------------


def _verdict_for(report: ClassificationReport, t: str, stage_scope: str, phase_scope: str):
    v = report.per_phase.get((phase_scope, t))
    if v is not None:
        return v
    return report.per_type[(t, stage_scope)]


def _fixed_lengths_for(elem_type: str, scope: Scope, prog: ir.Program) -> dict:
    """Constant array lengths provable in this scope, keyed like compute_layout
    expects: (field owner, field name) -> element count."""
    out: dict = {}
    if ir.is_primitive(elem_type):
        return out
    g = ir.build_type_dependency_graph(elem_type, prog)
    for node in sorted(g.nodes):
        for f in prog.fields_of(node):
            for member in f.get_type_set():
                if member in prog.arrays:
                    val = scope.fixed_length_value(member, f)
                    if val is not None and val.form == "const":
                        out[(f.owner, f.name)] = val.base
    if elem_type in prog.arrays:
        val = scope.fixed_length_value(elem_type, None)
        if val is not None and val.form == "const":
            out[None] = val.base
    return out


def _try_layout(t: str, verdict, prog: ir.Program, lengths: dict) -> Optional[ps.Layout]:
    if verdict not in (SizeType.STATIC_FIXED, SizeType.RUNTIME_FIXED):
        return None
    try:
        return ps.compute_layout(t, verdict, prog, lengths)
    except ps.LayoutError:
        return None


def _passthrough_param(m: ir.MethodDef) -> Optional[int]:
    if len(m.body) == 1 and isinstance(m.body[0], ir.Return):
        v = m.body[0].value
        if isinstance(v, ir.Local) and v.name in m.params:
            return m.params.index(v.name)
    return None


def _kv_analysis(m: ir.MethodDef, prog: ir.Program):
    """For a UDF returning a key/value record: is the value field the source
    element itself, and is the key a field path on it?"""
    ret = None
    for s in ir.walk_statements(m.body):
        if isinstance(s, ir.Return) and isinstance(s.value, ir.NewObject):
            ret = s.value
    if ret is None:
        return False, None
    cls = prog.classes.get(ret.type_name)
    if cls is None or {f.name for f in cls.fields} != {"k", "v"}:
        return False, None
    ctor = prog.methods.get(f"{ret.type_name}.{ret.ctor}")
    if ctor is None:
        return False, None
    # which ctor param ends up in field v / field k
    param_for: dict[str, str] = {}
    for s in ctor.body:
        if (
            isinstance(s, ir.FieldStore)
            and isinstance(s.obj, ir.Local)
            and s.obj.name == "this"
            and isinstance(s.value, ir.Local)
        ):
            param_for[s.field_name] = s.value.name
    value_is_element = False
    key_path: Optional[list] = None
    if "v" in param_for and param_for["v"] in ctor.params:
        idx = ctor.params.index(param_for["v"])
        if idx < len(ret.args) and isinstance(ret.args[idx], ir.Local):
            value_is_element = ret.args[idx].name == (m.params[0] if m.params else None)
    if "k" in param_for and param_for["k"] in ctor.params:
        idx = ctor.params.index(param_for["k"])
        if idx < len(ret.args):
            key_path = _field_path_on_param(ret.args[idx], m.params[0] if m.params else None)
    return value_is_element, key_path


def _field_path_on_param(e: ir.Node, param: Optional[str]) -> Optional[list]:
    parts: list = []
    while isinstance(e, ir.FieldLoad):
        parts.append(e.field_name)
        e = e.obj
    if isinstance(e, ir.Local) and e.name == param and parts:
        return list(reversed(parts))
    return None


def _structural_mutation(job: ir.JobSpec, elem_type: str, prog: ir.Program) -> Optional[str]:
    """Evidence that running this job may change the data-size of existing
    `elem_type` instances: a reachable non-constructor store to a reference
    field (or reference array slot) of a type in its dependency graph."""
    g = ir.build_type_dependency_graph(elem_type, prog)
    analysis = prog.analysis()
    methods: set[str] = set()
    for stage in job.stages:
        roots = classify.stage_scope_roots(job, stage, prog)
        if roots:
            methods |= ir.build_call_graph(roots, prog, scope="mutscan").nodes
    for node in sorted(g.nodes):
        for f in prog.fields_of(node):
            if ir.is_primitive(f.declared_type) and f.name != "<elem>":
                continue
            if f.name == "<elem>" and ir.is_primitive(prog.arrays[node].element_decl):
                continue
            for method, st in analysis.field_stores.get((f.owner, f.name), ()):
                if method not in methods:
                    continue
                m = prog.methods[method]
                in_ctor = (
                    m.is_ctor
                    and m.owner == f.owner
                    and isinstance(st.obj, ir.Local)
                    and st.obj.name == "this"
                )
                if not in_ctor:
                    return f"{f.owner}.{f.name} re-assigned in {method}"
    return None


class EngineState:
    """Cross-job state: the compiled runtime, the store, persistent caches."""

    def __init__(self, prog: ir.Program, config: RunConfig):
        config.validate()
        self.prog = prog
        self.config = config
        self.rt = Runtime(prog)
        self.store = ps.PageStore(config.page_capacity, config.budget)
        self.coord = ct.StoreCoordinator(
            self.store, config.cache_fraction, config.spill_dir, config.budget
        )
        self.cache_blocks: dict[str, list[ct.CacheBlock]] = {}
        self.cache_plans: dict[str, ContainerPlan] = {}
        self.never_decompose: set[str] = set()
        self.shuffles: dict[str, list] = {}
        self.container_seq: dict[str, int] = {}
        self._seq = 0
        self.submission = 0
        self.metrics = Metrics()
        self.outputs_hash = hashlib.sha256()

    def seq(self, cid: str) -> int:
        if cid not in self.container_seq:
            self._seq += 1
            self.container_seq[cid] = self._seq
        return self.container_seq[cid]

    def digest(self) -> str:
        return self.outputs_hash.hexdigest()

    def live_cache_pages(self, cid: str) -> int:
        return sum(
            g.page_count
            for b in self.cache_blocks.get(cid, [])
            if b.live
            for g in b.page_groups()
            if g.live and g.resident
        )

    def total_live_pages(self) -> int:
        return self.store.live_pages


def plan_job(job: ir.JobSpec, prog: ir.Program, state: Optional[EngineState] = None) -> ExecutionPlan:
    """Per-job planning: classification, layouts, ownership, decomposition."""
    prog.analysis()
    report = classify.phased_refine(job, prog)
    plan = ExecutionPlan(job=job.name, report=report)
    creation_order: list[str] = []

    def crt_seq(cid: str) -> int:
        if cid not in creation_order:
            creation_order.append(cid)
        return creation_order.index(cid)

    for stage in job.stages:
        stage_scope_name = f"{job.name}:{stage.name}"
        stage_items: list = []
        for item in stage.items:
            if isinstance(item, ir.UnpersistDecl):
                stage_items.append(("unpersist", item.container))
                continue
            ph = item
            phase_scope_name = f"{stage_scope_name}/{ph.name}"
            scope = classify.make_scope(
                phase_scope_name, classify.phase_scope_roots(ph, prog), prog
            )
            src_decl = prog.containers[ph.source]
            sink_decl = prog.containers[ph.sink]
            crt_seq(ph.source)
            crt_seq(ph.sink)

            def verdict(t: str):
                return _verdict_for(report, t, stage_scope_name, phase_scope_name)

            # udf shape
            keyed = src_decl.kind in ("sort", "hash-reduce", "hash-group")
            passthrough = None
            kv_result = False
            value_is_element = False
            key_path = None
            if ph.udf != "identity":
                m = prog.methods[ph.udf]
                passthrough = _passthrough_param(m)
                if sink_decl.kind in ("sort", "hash-reduce", "hash-group") and not ph.flatten:
                    value_is_element, key_path = _kv_analysis(m, prog)
                    kv_result = True
                elif sink_decl.kind in ("sort", "hash-reduce", "hash-group"):
                    kv_result = True

            pp = PhasePlan(
                name=ph.name,
                stage=stage.name,
                source=ph.source,
                sink=ph.sink,
                udf=ph.udf,
                flatten=ph.flatten,
                keyed_source=keyed,
                passthrough=passthrough,
                kv_result=kv_result,
                value_is_element=value_is_element,
                key_path=key_path,
            )

            # sink container plan (created at its fill phase)
            if ph.sink not in plan.containers:
                cp = ContainerPlan(cid=ph.sink, kind=sink_decl.kind, storage=sink_decl.storage)
                if sink_decl.kind == "cache":
                    cp.elem_type = sink_decl.elem
                    cp.elem_verdict = verdict(sink_decl.elem)
                    lengths = _fixed_lengths_for(sink_decl.elem, scope, prog)
                    cp.elem_layout = _try_layout(sink_decl.elem, cp.elem_verdict, prog, lengths)
                    cp.decompose = cp.elem_layout is not None
                    if state is not None and ph.sink in state.never_decompose:
                        cp.decompose = False
                        cp.notes.append("previously reconstructed; stays in object form")
                    if cp.elem_verdict in (SizeType.VARIABLE, SizeType.RECUR_DEF):
                        cp.notes.append(f"kept as objects: {cp.elem_verdict}")
                elif sink_decl.kind in ("sort", "hash-reduce", "hash-group"):
                    cp.key_type = sink_decl.key
                    cp.val_type = sink_decl.val
                    cp.key_verdict = verdict(sink_decl.key)
                    if cp.key_verdict not in (SizeType.STATIC_FIXED, SizeType.RUNTIME_FIXED):
                        raise PlanError(
                            f"{ph.sink}: key type {sink_decl.key} is {cp.key_verdict}; "
                            "keyed operators need fixed-size keys"
                        )
                    klengths = _fixed_lengths_for(sink_decl.key, scope, prog)
                    cp.key_layout = _try_layout(sink_decl.key, cp.key_verdict, prog, klengths)
                    if cp.key_layout is None:
                        raise PlanError(f"{ph.sink}: key type {sink_decl.key} is not encodable")
                    cp.decompose_keys = True
                    if sink_decl.val is not None:
                        cp.val_verdict = verdict(sink_decl.val)
                        vlengths = _fixed_lengths_for(sink_decl.val, scope, prog)
                        cp.val_layout = _try_layout(sink_decl.val, cp.val_verdict, prog, vlengths)
                    if sink_decl.kind == "hash-reduce":
                        cp.reuse_in_place = (
                            cp.val_verdict is SizeType.STATIC_FIXED
                            and cp.val_layout is not None
                            and cp.val_layout.const_size is not None
                        )
                        cp.decompose_vals = cp.reuse_in_place
                        cp.elide_pointers = (
                            cp.decompose_vals and cp.key_layout.const_size is not None
                        )
                        if not cp.reuse_in_place:
                            cp.notes.append(
                                f"values stay objects: {sink_decl.val} is {cp.val_verdict}"
                            )
                    elif sink_decl.kind == "hash-group":
                        combined = classify.combined_value_type(sink_decl, prog)
                        if combined is not None:
                            cp.val_type = combined
                            cp.val_verdict = verdict(combined)
                        cp.notes.append("combined values stay objects while the buffer builds")
                    elif sink_decl.kind == "sort":
                        cp.decompose = (
                            cp.val_layout is not None
                            and cp.val_verdict in (SizeType.STATIC_FIXED, SizeType.RUNTIME_FIXED)
                        )
                plan.containers[ph.sink] = cp

            # source plan entry (pre-existing containers referenced by the job)
            if ph.source not in plan.containers:
                scp = ContainerPlan(cid=ph.source, kind=src_decl.kind)
                if src_decl.kind == "cache" and state is not None and ph.source in state.cache_plans:
                    scp = state.cache_plans[ph.source]  # carried from the creating job
                elif src_decl.elem is not None:
                    scp.elem_type = src_decl.elem
                    scp.elem_verdict = verdict(src_decl.elem)
                    if src_decl.kind == "cache":
                        lengths = _fixed_lengths_for(src_decl.elem, scope, prog)
                        scp.elem_layout = _try_layout(src_decl.elem, scp.elem_verdict, prog, lengths)
                        scp.decompose = scp.elem_layout is not None
                plan.containers[ph.source] = scp

            # sharing arrangements for pass-through phases
            sink_cp = plan.containers[ph.sink]
            src_cp = plan.containers[ph.source]
            whole_element_passthrough = ph.udf == "identity" or (
                not keyed and passthrough == 0
            ) or (keyed and passthrough == 1)
            shared_set = whole_element_passthrough or (
                pp.value_is_element and src_decl.kind == "cache" and sink_decl.kind == "sort"
            )
            if shared_set:
                # one object set held by two containers: the ownership rules
                # pick the primary, the kinds pick the arrangement
                set_id = f"{job.name}:{stage.name}:{ph.name}:set"
                holders = (
                    (ph.source, src_decl.kind, crt_seq(ph.source)),
                    (ph.sink, sink_decl.kind, crt_seq(ph.sink)),
                )
                primary = ct.assign_ownership({set_id: list(holders)})[set_id]
                plan.ownership[set_id] = (holders, primary)
                if src_decl.kind == "cache" and sink_decl.kind == "cache":
                    if src_cp.decompose and sink_cp.decompose:
                        sink_cp.share = ("pageinfo-copy", ph.source)
                        sink_cp.role = "secondary"
                elif src_decl.kind == "cache" and sink_decl.kind == "sort":
                    if src_cp.decompose and pp.value_is_element:
                        sink_cp.share = ("pointers", ph.source)
                        sink_cp.role = "secondary"
                elif src_decl.kind == "hash-group" and sink_decl.kind == "cache":
                    if sink_cp.decompose:
                        sink_cp.share = ("handoff", ph.source)
                        sink_cp.notes.append(
                            "source keeps objects; values copied into the page group"
                        )
            else:
                set_id = f"{job.name}:{stage.name}:{ph.name}:created"
                sink_kind = sink_decl.kind
                holders = (
                    (f"udfvars:{phase_scope_name}", "udfvars", 10_000 + crt_seq(ph.sink)),
                    (ph.sink, sink_kind, crt_seq(ph.sink)),
                )
                primary = ct.assign_ownership({set_id: list(holders)})[set_id]
                plan.ownership[set_id] = (holders, primary)

            # reconstruction of pre-existing decomposed cache sources
            if (
                src_decl.kind == "cache"
                and state is not None
                and ph.source in state.cache_blocks
                and any(b.decomposed for b in state.cache_blocks[ph.source] if b.live)
            ):
                evidence = _structural_mutation(job, src_decl.elem, prog)
                if evidence is not None:
                    pp.reconstruct_before = evidence
            stage_items.append(pp)
        plan.stages.append(stage_items)
    return plan


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass
class Metrics:
    samples: list[dict] = field(default_factory=list)
    jobs: int = 0
    elapsed_s: float = 0.0

    def sample(self, state: EngineState, tag: tuple) -> None:
        containers = []
        for c in state.coord.containers:
            if not c.live:
                continue
            pages = sum(g.page_count for g in c.page_groups() if g.live and g.resident)
            containers.append(
                {
                    "id": c.id,
                    "kind": c.kind,
                    "trace_cost": c.trace_cost(),
                    "heap_bytes": c.heap_bytes(),
                    "pages": pages,
                }
            )
        self.samples.append(
            {
                "job": tag[0],
                "stage": tag[1],
                "phase": tag[2],
                "live_pages": state.store.live_pages,
                "alloc_objects": state.rt.alloc_objects,
                "alloc_arrays": state.rt.alloc_arrays,
                "containers": containers,
            }
        )

    def summary(self, state: EngineState) -> dict:
        return {
            "jobs": self.jobs,
            "peak_pages": state.store.peak_pages,
            "live_pages_end": state.store.live_pages,
            "spill_runs": state.coord.spill_runs,
            "spill_bytes": state.coord.spill_bytes,
            "evictions": state.coord.evictions,
            "swapped_bytes": state.coord.swapped_bytes,
            "alloc_objects": state.rt.alloc_objects,
            "alloc_arrays": state.rt.alloc_arrays,
            "events": [
                {"kind": e.kind, "container": e.container, "detail": e.detail}
                for e in state.coord.events
            ],
        }


# ---------------------------------------------------------------------------
# Executor
# ---------------------------------------------------------------------------


def _canonical_bytes(value, prog: ir.Program, out: list) -> None:
    if value is None:
        out.append(b"N")
    elif isinstance(value, bool):
        out.append(b"B1" if value else b"B0")
    elif isinstance(value, int):
        out.append(b"I" + struct.pack("<q", value))
    elif isinstance(value, float):
        out.append(b"F" + struct.pack("<d", value))
    elif isinstance(value, str):
        enc = value.encode("utf-16-le")
        out.append(b"S" + struct.pack("<i", len(enc)) + enc)
    elif isinstance(value, list):
        out.append(b"L" + struct.pack("<i", len(value)))
        for v in value:
            _canonical_bytes(v, prog, out)
    elif isinstance(value, tuple):
        out.append(b"T" + struct.pack("<i", len(value)))
        for v in value:
            _canonical_bytes(v, prog, out)
    elif hasattr(value, "_ir_type"):
        tname = value._ir_type
        out.append(b"O" + tname.encode())
        cur = tname
        while cur is not None:
            cls = prog.classes[cur]
            for f in cls.fields:
                _canonical_bytes(getattr(value, f.name, None), prog, out)
            cur = cls.base
    else:
        raise RuntimeFailure(f"cannot canonicalize output value {value!r}")


def canonical_bytes(value, prog: ir.Program) -> bytes:
    out: list = []
    _canonical_bytes(value, prog, out)
    return b"".join(out)


class OutputCollector:
    """Terminal endpoint of a job: collects records or folds them with a
    combine function in fixed partition-then-sequential order."""

    def __init__(self, cid: str, combine: Optional[Callable], partitions: int):
        self.cid = cid
        self.combine = combine
        self.parts: list[list] = [[] for _ in range(partitions)]
        self.acc: list = [None] * partitions
        self.has: list[bool] = [False] * partitions

    def insert(self, partition: int, record) -> None:
        if self.combine is None:
            self.parts[partition].append(record)
        elif not self.has[partition]:
            self.acc[partition] = record
            self.has[partition] = True
        else:
            self.acc[partition] = self.combine(self.acc[partition], record)

    def result(self) -> list:
        if self.combine is None:
            out: list = []
            for part in self.parts:
                out.extend(part)
            return out
        total = None
        seen = False
        for p, ok in enumerate(self.has):
            if ok:
                total = self.acc[p] if not seen else self.combine(total, self.acc[p])
                seen = True
        return [total] if seen else []


def execute_job(
    state: EngineState,
    job: ir.JobSpec,
    plan: ExecutionPlan,
    inputs: dict[str, list],
    params: Optional[list] = None,
) -> list:
    """Run one job under a plan; returns the list of output records and
    updates metrics, digest, and persistent container state."""
    prog = state.prog
    rt = state.rt
    config = state.config
    P = config.partitions
    state.submission += 1
    state.metrics.jobs += 1
    sub_tag = f"{state.submission}:{job.name}"
    params = list(params or [])
    outputs: dict[str, OutputCollector] = {}
    job_shuffles: list[str] = []

    for stage, stage_items in zip(job.stages, plan.stages):
        for item in stage_items:
            if not isinstance(item, PhasePlan):
                _cid = item[1]
                _unpersist(state, _cid)
                continue
            pp = item
            rt.scope = (sub_tag, stage.name, pp.name)
            if pp.reconstruct_before is not None:
                for block in state.cache_blocks.get(pp.source, []):
                    if block.live and block.decomposed:
                        block.reconstruct(pp.reconstruct_before)
                state.never_decompose.add(pp.source)
                if pp.source in state.cache_plans:
                    state.cache_plans[pp.source].decompose = False
            sink_decl = prog.containers[pp.sink]
            if sink_decl.kind in ("sort", "hash-reduce", "hash-group"):
                if pp.sink not in state.shuffles:
                    state.shuffles[pp.sink] = _make_shuffle(state, plan.containers[pp.sink], P)
                    job_shuffles.append(pp.sink)
            elif sink_decl.kind == "cache":
                if pp.sink not in state.cache_blocks:
                    state.cache_blocks[pp.sink] = _make_cache(state, plan.containers[pp.sink], P)
                    state.cache_plans[pp.sink] = plan.containers[pp.sink]
            elif sink_decl.kind == "output":
                if pp.sink not in outputs:
                    combine = None
                    if sink_decl.combine is not None:
                        combine = _free_fn(rt, sink_decl.combine)
                    outputs[pp.sink] = OutputCollector(pp.sink, combine, P)
            _run_phase(state, plan, pp, inputs, params, outputs)
            state.metrics.sample(state, rt.scope)
            # a shuffle read as a source has now served its second accessor
            src_decl = prog.containers[pp.source]
            if src_decl.kind in ("sort", "hash-reduce", "hash-group"):
                _release_shuffle(state, pp.source)

    # job end: shuffle buffers created but never read would leak; none should
    for cid in job_shuffles:
        if cid in state.shuffles:
            _release_shuffle(state, cid)
    leaked = sum(
        g.page_count
        for c in state.coord.containers
        if c.live and c.kind != "cache"
        for g in c.page_groups()
        if g.live and g.resident
    )
    if leaked:
        raise RuntimeFailure(f"job {job.name}: {leaked} non-cache pages live at job end")

    records: list = []
    for cid in sorted(outputs):
        records.extend(outputs[cid].result())
    for rec in records:
        state.outputs_hash.update(canonical_bytes(rec, prog))
    return records


def _free_fn(rt: Runtime, name: str) -> Callable:
    fn = rt.ns[f"f_{name}"]
    return lambda *args: fn(rt, *args)


def _make_cache(state: EngineState, cp: ContainerPlan, partitions: int) -> list[ct.CacheBlock]:
    rt = state.rt
    decomposed = cp.decompose and state.config.mode == "decomposed"
    elem_type = cp.elem_type

    def cost(item):
        return rt.model_cost(item, elem_type)

    blocks = [
        ct.CacheBlock(
            f"{cp.cid}[{p}]",
            state.coord,
            cp.elem_layout,
            decomposed,
            instantiate=rt.instantiate,
            cost_fn=cost,
            swap_level=cp.storage,
        )
        for p in range(partitions)
    ]
    state.seq(cp.cid)
    return blocks


def _make_shuffle(state: EngineState, cp: ContainerPlan, partitions: int) -> list:
    rt = state.rt
    decomposed_mode = state.config.mode == "decomposed"
    decl = state.prog.containers[cp.cid]
    out = []
    for r in range(partitions):
        cid = f"{cp.cid}[{r}]"
        if cp.kind == "hash-reduce":
            combine = _free_fn(rt, decl.combine) if decl.combine else None
            if combine is None:
                raise PlanError(f"hash-reduce container {cp.cid} needs a combine method")
            out.append(
                ct.HashReduceBuffer(
                    cid,
                    state.coord,
                    cp.key_layout,
                    cp.val_layout,
                    combine,
                    decompose_keys=decomposed_mode and cp.decompose_keys,
                    decompose_vals=decomposed_mode and cp.decompose_vals,
                    instantiate=rt.instantiate,
                )
            )
        elif cp.kind == "hash-group":
            create = _free_fn(rt, decl.create) if decl.create else None
            merge = _free_fn(rt, decl.combine) if decl.combine else None
            out.append(
                ct.HashGroupBuffer(
                    cid,
                    state.coord,
                    cp.key_layout,
                    decompose_keys=decomposed_mode and cp.decompose_keys,
                    create=create,
                    merge=merge,
                    instantiate=rt.instantiate,
                )
            )
        else:
            out.append(
                ct.SortBuffer(
                    cid,
                    state.coord,
                    cp.key_layout,
                    cp.val_layout,
                    decomposed=decomposed_mode and cp.decompose,
                    instantiate=rt.instantiate,
                )
            )
    state.seq(cp.cid)
    return out


def _release_shuffle(state: EngineState, cid: str) -> None:
    for buf in state.shuffles.pop(cid, []):
        if buf.live:
            buf.release()


def _unpersist(state: EngineState, cid: str) -> None:
    blocks = state.cache_blocks.pop(cid, None)
    if blocks is None:
        raise RuntimeFailure(f"unpersist of unknown cache {cid!r}")
    for b in blocks:
        if b.live:
            b.unpersist()
    left = state.live_cache_pages(cid)
    if left:
        raise RuntimeFailure(f"unpersist of {cid} left {left} live pages")


def _split(items: list, partitions: int) -> list[list]:
    n = len(items)
    return [items[p * n // partitions : (p + 1) * n // partitions] for p in range(partitions)]


def _run_phase(
    state: EngineState,
    plan: ExecutionPlan,
    pp: PhasePlan,
    inputs: dict[str, list],
    params: list,
    outputs: dict[str, OutputCollector],
) -> None:
    prog = state.prog
    rt = state.rt
    config = state.config
    P = config.partitions
    src_decl = prog.containers[pp.source]
    sink_decl = prog.containers[pp.sink]
    sink_cp = plan.containers[pp.sink]

    # fully-decomposable same-set sharing: no element loop at all
    share_kind = sink_cp.share[0] if sink_cp.share is not None else None
    decomposed_run = config.mode == "decomposed"
    if share_kind == "pageinfo-copy" and decomposed_run:
        src_blocks = state.cache_blocks[pp.source]
        dst_blocks = state.cache_blocks[pp.sink]
        if all(b.decomposed for b in src_blocks):
            for src, dst in zip(src_blocks, dst_blocks):
                ct.share_fully_decomposable(src, dst)
                dst.seal()
            return

    udf = None if pp.udf == "identity" else rt.ns[f"f_{pp.udf}"]

    # element sources per partition
    def source_iter(p: int) -> Iterator:
        if src_decl.kind == "input":
            elems = inputs.get(pp.source)
            if elems is None:
                raise RuntimeFailure(f"no input bound for container {pp.source!r}")
            etype = src_decl.elem
            for py in _split(elems, P)[p]:
                yield rt.adapt(etype, py)
        elif src_decl.kind == "cache":
            blocks = state.cache_blocks.get(pp.source)
            if blocks is None:
                raise RuntimeFailure(f"cache {pp.source!r} read before caching or after unpersist")
            yield from blocks[p].iter_values()
        elif src_decl.kind in ("hash-reduce", "hash-group"):
            yield from state.shuffles[pp.source][p].iter_sorted()
        elif src_decl.kind == "sort":
            yield from state.shuffles[pp.source][p].iter_sorted()
        else:
            raise RuntimeFailure(f"container kind {src_decl.kind} cannot be a source")

    # pointer sharing: the sort sink stores refs into the source cache pages
    pointer_share = (
        share_kind == "pointers"
        and decomposed_run
        and all(b.decomposed for b in state.cache_blocks.get(pp.source, []))
    )
    if pointer_share:
        _run_pointer_share_phase(state, plan, pp)
        return

    sink_insert = _sink_insert_fn(state, plan, pp, outputs)

    def process_partition(p: int, emit) -> None:
        if pp.keyed_source:
            for k, v in source_iter(p):
                if udf is None:
                    emit(p, (k, v))
                else:
                    res = udf(rt, k, v, *params)
                    if pp.flatten:
                        for r in res:
                            emit(p, r)
                    else:
                        emit(p, res)
        else:
            for elem in source_iter(p):
                if udf is None:
                    emit(p, elem)
                else:
                    res = udf(rt, elem, *params)
                    if pp.flatten:
                        for r in res:
                            emit(p, r)
                    else:
                        emit(p, res)

    def finish_partition(p: int) -> None:
        # a cache block is written by exactly one partition; sealing it right
        # away makes it evictable while later partitions still fill
        if sink_decl.kind == "cache":
            state.cache_blocks[pp.sink][p].seal()

    if config.threads > 1 and P > 1:
        # evaluate partitions in a pool; write sinks in partition order
        buffers: list[list] = [[] for _ in range(P)]

        def evaluate(p: int) -> None:
            process_partition(p, lambda _p, rec: buffers[p].append(rec))

        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            list(pool.map(evaluate, range(P)))
        for p in range(P):
            for rec in buffers[p]:
                sink_insert(p, rec)
            finish_partition(p)
    else:
        for p in range(P):
            process_partition(p, sink_insert)
            finish_partition(p)

    _seal_sink(state, pp, sink_decl)


def _seal_sink(state: EngineState, pp: PhasePlan, sink_decl) -> None:
    if sink_decl.kind == "cache":
        for b in state.cache_blocks[pp.sink]:
            b.seal()
    elif sink_decl.kind in ("sort", "hash-reduce", "hash-group"):
        for buf in state.shuffles[pp.sink]:
            buf.seal()


def _sink_insert_fn(
    state: EngineState,
    plan: ExecutionPlan,
    pp: PhasePlan,
    outputs: dict[str, OutputCollector],
) -> Callable:
    prog = state.prog
    config = state.config
    P = config.partitions
    sink_decl = prog.containers[pp.sink]
    sink_cp = plan.containers[pp.sink]

    if sink_decl.kind == "output":
        collector = outputs[pp.sink]
        return collector.insert

    if sink_decl.kind == "cache":
        blocks = state.cache_blocks[pp.sink]

        def insert_cache(p: int, rec) -> None:
            if isinstance(rec, tuple):
                rec = rec[1]  # keyed source handed (k, v); the cache keeps values
            blocks[p].put(rec)

        return insert_cache

    # keyed sinks: route by the hash of the encoded key bytes
    buffers = state.shuffles[pp.sink]
    key_layout = sink_cp.key_layout

    def insert_keyed(p: int, rec) -> None:
        if isinstance(rec, tuple):
            k, v = rec
        else:
            k, v = rec.k, rec.v
        kb = ps.encode_object(k, key_layout)
        r = ct.fnv1a64(kb) % P
        buffers[r].insert(kb, k, v)

    return insert_keyed


# ---------------------------------------------------------------------------
# Dynamic size oracle
# ---------------------------------------------------------------------------


@dataclass
class SoundnessViolation:
    type_name: str
    scope: str
    verdict: str
    detail: str
    instances: tuple[int, ...]

    def __str__(self) -> str:
        return f"{self.type_name} @ {self.scope} claimed {self.verdict}: {self.detail}"


def run_oracle(
    state: EngineState,
    job: ir.JobSpec,
    plan: ExecutionPlan,
    inputs: dict[str, list],
    params: Optional[list] = None,
) -> tuple[list, OracleTrace]:
    """Execute one job in object mode with size tracing on. Returns the
    outputs and the trace; the engine state must be in object mode."""
    if state.config.mode != "object":
        raise ConfigError("the oracle runs in object mode only")
    rt = state.rt
    if rt.trace is None or not rt.tracing:
        trace = rt.start_trace()
    else:
        trace = rt.trace
    records = execute_job(state, job, plan, inputs, params)
    return records, trace


def check_soundness(
    submissions: list[tuple[int, str, ClassificationReport]], trace: OracleTrace
) -> list[SoundnessViolation]:
    """Compare classification claims against observed data-sizes.

    `submissions` lists (submission seq, job name, report) in execution order;
    trace events carry ("seq:job", stage, phase) scopes. StaticFixed demands
    one size across all instances observed in the scope; RuntimeFixed demands
    a constant size per instance within the scope. A mutation observes both
    the instance's previous size and its new one: an instance carries its size
    into the scope, so a change inside the scope must count as two readings."""
    violations: list[SoundnessViolation] = []

    # (scope, type) -> list of (instance, size) observations
    observations: dict[tuple, list[tuple[int, int]]] = {}
    last_size: dict[int, int] = {}
    for ev in trace.events:
        key = (ev.scope, ev.type_name)
        obs = observations.setdefault(key, [])
        if ev.kind == "mut" and ev.instance in last_size:
            obs.append((ev.instance, last_size[ev.instance]))
        obs.append((ev.instance, ev.size))
        last_size[ev.instance] = ev.size

    def gather(tag: str, stage: str, phase, t: str) -> list[tuple[int, int]]:
        out = []
        for (scope, tname), obs in observations.items():
            if tname != t or scope[0] != tag or scope[1] != stage:
                continue
            if phase is not None and scope[2] != phase:
                continue
            out.extend(obs)
        return out

    def check(t: str, verdict: SizeType, scope_label: str, obs: list[tuple[int, int]]) -> None:
        if not obs:
            return
        if verdict is SizeType.STATIC_FIXED:
            sizes = {s for _i, s in obs}
            if len(sizes) > 1:
                violations.append(
                    SoundnessViolation(
                        t,
                        scope_label,
                        str(verdict),
                        f"observed sizes {sorted(sizes)}",
                        tuple(sorted({i for i, _s in obs})),
                    )
                )
        elif verdict is SizeType.RUNTIME_FIXED:
            per: dict[int, set[int]] = {}
            for i, s in obs:
                per.setdefault(i, set()).add(s)
            bad = sorted(i for i, sizes in per.items() if len(sizes) > 1)
            if bad:
                violations.append(
                    SoundnessViolation(
                        t,
                        scope_label,
                        str(verdict),
                        f"instances changed size: {[sorted(per[i]) for i in bad]}",
                        tuple(bad),
                    )
                )

    for seq, job_name, report in submissions:
        tag = f"{seq}:{job_name}"
        for (t, scope_name), verdict in sorted(report.per_type.items()):
            stage = scope_name.split(":", 1)[1]
            check(t, verdict, f"{tag}:{stage}", gather(tag, stage, None, t))
        for (phase_scope, t), verdict in sorted(report.per_phase.items()):
            rest = phase_scope.split(":", 1)[1]  # "stage/phase"
            stage, phase = rest.split("/", 1)
            check(t, verdict, f"{tag}:{rest}", gather(tag, stage, phase, t))
    return violations


def _run_pointer_share_phase(state: EngineState, plan: ExecutionPlan, pp: PhasePlan) -> None:
    """Feed a sort buffer with pointers into the source cache's page groups;
    keys are read straight from the segments."""
    P = state.config.partitions
    src_blocks = state.cache_blocks[pp.source]
    buffers = state.shuffles[pp.sink]
    sink_cp = plan.containers[pp.sink]
    src_cp = plan.containers[pp.source]
    lay = src_cp.elem_layout
    key_layout = sink_cp.key_layout
    for p in range(P):
        block = src_blocks[p]
        group = block.group
        for buf in buffers:
            buf.use_pointers_into(group, lay)
        for ref in block.iter_refs():
            if pp.key_path:
                k = group.read_field(ref, lay, pp.key_path)
            else:
                k = ps.decode_object(group._page(ps.ref_page(ref)), lay, ps.ref_offset(ref))
            kb = ps.encode_object(k, key_layout)
            r = ct.fnv1a64(kb) % P
            buffers[r].insert(kb, k, (group, ref))
    for buf in buffers:
        buf.seal()
