"""Mini typed IR: declarations, statement forms, parser, and derived graphs.

The IR is deliberately small: classes with typed fields, arrays, free and
owned methods whose bodies are s-expression statements, and job descriptions
(containers, stages, phases). Everything the classifier consumes is derived
here: the type dependency graph, per-field type-sets (a flow-insensitive
points-to pass), and scope call graphs.

Text format (see docs/ir-grammar.md):

    class DenseVector extends Vector
      field data Array[double] final
    ctor DenseVector init (d off st len)
      (field-store (local this) data (local d))
    method free parse_point (row)
      (return (new LabeledPoint init ...))
    container points kind cache elem LabeledPoint
    job load
      stage build
        phase parse source rows udf parse_point sink points

A parsed Program is immutable by convention: build it, then share it freely
across threads. Derived analyses are cached on the Program.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional

PRIMITIVES = ("bool", "byte", "char", "short", "int", "long", "float", "double")

PRIM_SIZES = {
    "bool": 1,
    "byte": 1,
    "char": 2,
    "short": 2,
    "int": 4,
    "long": 8,
    "float": 4,
    "double": 8,
}

CONTAINER_KINDS = (
    "input",
    "output",
    "cache",
    "sort",
    "hash-reduce",
    "hash-group",
)

# Reserved names the parser refuses for identifiers; generated accessor code
# uses bare field names as Python attributes.
_PY_KEYWORDS = frozenset(
    "False None True and as assert async await break class continue def del "
    "elif else except finally for from global if import in is lambda nonlocal "
    "not or pass raise return try while with yield this".split()
)


class IRError(Exception):
    """Base for all IR-level failures."""


class ParseError(IRError):
    def __init__(self, msg: str, line: int, col: int = 0):
        super().__init__(f"line {line}, col {col}: {msg}")
        self.line = line
        self.col = col


class UnknownTypeError(IRError):
    pass


class DuplicateNameError(IRError):
    pass


class TypeSetError(IRError):
    """Assignment of a runtime type incompatible with the declared type."""


class UnknownMethodError(IRError):
    pass


def is_primitive(name: str) -> bool:
    return name in PRIM_SIZES


def is_array_name(name: str) -> bool:
    return name.startswith("Array[") and name.endswith("]")


def array_element(name: str) -> str:
    """Element type name of an `Array[...]` type name."""
    return name[len("Array[") : -1]


# ---------------------------------------------------------------------------
# Declarations
# ---------------------------------------------------------------------------


@dataclass
class FieldDef:
    name: str
    declared_type: str
    is_final: bool = False
    # None until inference runs; annotations pre-fill and are never widened.
    type_set: Optional[tuple[str, ...]] = None
    annotated: bool = False
    owner: str = ""

    def get_type_set(self) -> tuple[str, ...]:
        if self.type_set is None:
            raise IRError(f"type-set of {self.owner}.{self.name} not inferred yet")
        return self.type_set


@dataclass
class ClassType:
    name: str
    base: Optional[str] = None
    fields: list[FieldDef] = field(default_factory=list)

    def field_named(self, name: str) -> FieldDef:
        for f in self.fields:
            if f.name == name:
                return f
        raise IRError(f"no field {name!r} on class {self.name}")


@dataclass
class ArrayType:
    """Array of a single declared element type, with an implicit int length.

    The element field is modelled like a class field but is never final and
    never init-only. `type_set` is shared across all instances of the array
    type, like field type-sets.
    """

    name: str
    element_decl: str
    element_field: FieldDef = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.element_field is None:
            self.element_field = FieldDef(
                name="<elem>", declared_type=self.element_decl, is_final=False, owner=self.name
            )


# --- statements / expressions ---------------------------------------------

# Every node carries its source position for diagnostics; positions are
# excluded from equality so print/parse round trips compare structurally.


@dataclass
class Node:
    pos: tuple[int, int] = field(default=(0, 0), compare=False, repr=False)


@dataclass
class Const(Node):
    value: object = None  # int | float | bool


@dataclass
class Local(Node):
    name: str = ""


@dataclass
class ReadExternal(Node):
    pass


@dataclass
class Unary(Node):
    op: str = ""  # neg | exp | sqrt | not
    arg: Node = None  # type: ignore[assignment]


@dataclass
class Binary(Node):
    op: str = ""  # add sub mul div lt le gt ge eq ne and or
    left: Node = None  # type: ignore[assignment]
    right: Node = None  # type: ignore[assignment]


@dataclass
class NewObject(Node):
    type_name: str = ""
    ctor: str = ""
    args: list[Node] = field(default_factory=list)
    site_id: str = field(default="", compare=False)  # unique per allocation site


@dataclass
class NewArray(Node):
    type_name: str = ""
    length: Node = None  # type: ignore[assignment]
    site_id: str = field(default="", compare=False)


@dataclass
class FieldLoad(Node):
    obj: Node = None  # type: ignore[assignment]
    field_name: str = ""


@dataclass
class ArrayLoad(Node):
    arr: Node = None  # type: ignore[assignment]
    index: Node = None  # type: ignore[assignment]


@dataclass
class ArrayLen(Node):
    arr: Node = None  # type: ignore[assignment]


@dataclass
class Call(Node):
    name: str = ""
    args: list[Node] = field(default_factory=list)
    site_id: str = field(default="", compare=False)


@dataclass
class VCall(Node):
    recv: Node = None  # type: ignore[assignment]
    name: str = ""
    args: list[Node] = field(default_factory=list)
    site_id: str = field(default="", compare=False)


@dataclass
class Assign(Node):
    name: str = ""
    value: Node = None  # type: ignore[assignment]


@dataclass
class FieldStore(Node):
    obj: Node = None  # type: ignore[assignment]
    field_name: str = ""
    value: Node = None  # type: ignore[assignment]


@dataclass
class ArrayStore(Node):
    arr: Node = None  # type: ignore[assignment]
    index: Node = None  # type: ignore[assignment]
    value: Node = None  # type: ignore[assignment]


@dataclass
class Return(Node):
    value: Optional[Node] = None


@dataclass
class If(Node):
    cond: Node = None  # type: ignore[assignment]
    then_body: list[Node] = field(default_factory=list)
    else_body: list[Node] = field(default_factory=list)


@dataclass
class While(Node):
    cond: Node = None  # type: ignore[assignment]
    body: list[Node] = field(default_factory=list)


@dataclass
class ExprStmt(Node):
    expr: Node = None  # type: ignore[assignment]


@dataclass
class MethodDef:
    name: str
    owner: str  # class name, or "free"
    params: list[str] = field(default_factory=list)
    body: list[Node] = field(default_factory=list)
    is_ctor: bool = False

    @property
    def qualname(self) -> str:
        return self.name if self.owner == "free" else f"{self.owner}.{self.name}"


# --- job declarations -------------------------------------------------------


@dataclass
class ContainerDecl:
    id: str
    kind: str
    elem: Optional[str] = None
    key: Optional[str] = None
    val: Optional[str] = None
    create: Optional[str] = None
    combine: Optional[str] = None
    storage: str = "disk"  # memory | disk (swap level for cache groups)


@dataclass
class PhaseDecl:
    name: str
    source: str
    udf: str  # method name or "identity"
    sink: str
    flatten: bool = False


@dataclass
class UnpersistDecl:
    container: str


@dataclass
class StageDecl:
    name: str
    items: list = field(default_factory=list)  # PhaseDecl | UnpersistDecl

    @property
    def phases(self) -> list[PhaseDecl]:
        return [it for it in self.items if isinstance(it, PhaseDecl)]


@dataclass
class JobSpec:
    name: str
    params: list[str] = field(default_factory=list)
    stages: list[StageDecl] = field(default_factory=list)


@dataclass
class Program:
    classes: dict[str, ClassType] = field(default_factory=dict)
    arrays: dict[str, ArrayType] = field(default_factory=dict)
    methods: dict[str, MethodDef] = field(default_factory=dict)  # keyed by qualname
    containers: dict[str, ContainerDecl] = field(default_factory=dict)
    jobs: dict[str, JobSpec] = field(default_factory=dict)
    _analysis: Optional["ProgramAnalysis"] = field(default=None, compare=False, repr=False)

    def type_names(self) -> list[str]:
        return sorted(self.classes) + sorted(self.arrays)

    def has_type(self, name: str) -> bool:
        return name in self.classes or name in self.arrays or is_primitive(name)

    def fields_of(self, type_name: str) -> list[FieldDef]:
        """Fields of a class, or the element field of an array. Primitives: none."""
        if type_name in self.classes:
            return self.classes[type_name].fields
        if type_name in self.arrays:
            return [self.arrays[type_name].element_field]
        if is_primitive(type_name):
            return []
        raise UnknownTypeError(f"unknown type {type_name!r}")

    def methods_of(self, type_name: str) -> list[MethodDef]:
        return [m for m in self.methods.values() if m.owner == type_name]

    def is_subtype(self, sub: str, sup: str) -> bool:
        if sub == sup:
            return True
        cur = self.classes.get(sub)
        while cur is not None and cur.base is not None:
            if cur.base == sup:
                return True
            cur = self.classes.get(cur.base)
        return False

    def resolve_method(self, type_name: str, name: str) -> MethodDef:
        """Class-hierarchy lookup of an owned method."""
        cur: Optional[str] = type_name
        while cur is not None:
            m = self.methods.get(f"{cur}.{name}")
            if m is not None:
                return m
            cls = self.classes.get(cur)
            cur = cls.base if cls else None
        raise UnknownMethodError(f"no method {name!r} on {type_name} or its bases")

    def analysis(self) -> "ProgramAnalysis":
        if self._analysis is None:
            self._analysis = ProgramAnalysis(self)
        return self._analysis


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

_DECL_KEYWORDS = ("class", "field", "ctor", "method", "container", "job", "stage", "phase", "unpersist")


def _check_ident(name: str, line: int) -> str:
    if not name or not (name[0].isalpha() or name[0] == "_"):
        raise ParseError(f"bad identifier {name!r}", line)
    if name in _PY_KEYWORDS:
        raise ParseError(f"identifier {name!r} is reserved", line)
    return name


class _SexpReader:
    """Reads one balanced s-expression that may span lines."""

    def __init__(self, lines: list[str], start: int):
        self.lines = lines
        self.i = start  # line index
        self.j = 0  # column

    def _cur(self) -> str:
        return self.lines[self.i]

    def _skip_ws(self) -> None:
        while self.i < len(self.lines):
            line = self._cur()
            while self.j < len(line) and line[self.j] in " \t":
                self.j += 1
            if self.j < len(line) and line[self.j] == "#":
                self.j = len(line)
            if self.j >= len(line):
                self.i += 1
                self.j = 0
                continue
            return

    def read(self):
        self._skip_ws()
        if self.i >= len(self.lines):
            raise ParseError("unexpected end of input inside s-expression", len(self.lines))
        line = self._cur()
        ch = line[self.j]
        pos = (self.i + 1, self.j + 1)
        if ch == "(":
            self.j += 1
            items = []
            while True:
                self._skip_ws()
                if self.i >= len(self.lines):
                    raise ParseError("unbalanced '('", pos[0], pos[1])
                if self._cur()[self.j] == ")":
                    self.j += 1
                    return items, pos
                items.append(self.read())
        if ch == ")":
            raise ParseError("unbalanced ')'", pos[0], pos[1])
        start = self.j
        while self.j < len(line) and line[self.j] not in " \t()#":
            self.j += 1
        return line[start : self.j], pos


def _parse_atom_expr(tok: str, pos) -> Node:
    # bare atoms are only valid where the grammar expects names; expressions
    # must be parenthesized forms.
    raise ParseError(f"expected an expression form, got atom {tok!r}", pos[0], pos[1])


class _BodyParser:
    def __init__(self, sites: Iterator[int], note_type=None):
        self._sites = sites
        self._note_type = note_type or (lambda name, line: name)

    def _site(self, kind: str, pos) -> str:
        return f"{kind}@{pos[0]}:{pos[1]}#{next(self._sites)}"

    def expr(self, form) -> Node:
        tok, pos = form
        if isinstance(tok, str):
            return _parse_atom_expr(tok, pos)
        items = tok
        if not items:
            raise ParseError("empty form", pos[0], pos[1])
        head, hpos = items[0]
        if not isinstance(head, str):
            raise ParseError("form head must be a symbol", hpos[0], hpos[1])
        rest = items[1:]

        def arity(n: int):
            if len(rest) != n:
                raise ParseError(f"{head} expects {n} argument(s), got {len(rest)}", pos[0], pos[1])

        if head == "const":
            arity(1)
            lit, lpos = rest[0]
            if not isinstance(lit, str):
                raise ParseError("const expects a literal", lpos[0], lpos[1])
            return Const(pos=pos, value=_parse_literal(lit, lpos))
        if head == "local":
            arity(1)
            return Local(pos=pos, name=_atom(rest[0]))
        if head == "read-external":
            arity(0)
            return ReadExternal(pos=pos)
        if head in ("neg", "exp", "sqrt", "not"):
            arity(1)
            return Unary(pos=pos, op=head, arg=self.expr(rest[0]))
        if head in ("add", "sub", "mul", "div", "lt", "le", "gt", "ge", "eq", "ne", "and", "or"):
            arity(2)
            return Binary(pos=pos, op=head, left=self.expr(rest[0]), right=self.expr(rest[1]))
        if head == "new":
            if len(rest) < 2:
                raise ParseError("new expects a type and a constructor name", pos[0], pos[1])
            tname = self._note_type(_atom(rest[0]), pos[0])
            ctor = _atom(rest[1])
            return NewObject(
                pos=pos,
                type_name=tname,
                ctor=ctor,
                args=[self.expr(a) for a in rest[2:]],
                site_id=self._site("new", pos),
            )
        if head == "new-array":
            arity(2)
            tname = self._note_type(_atom(rest[0]), pos[0])
            if not is_array_name(tname):
                raise ParseError(f"new-array needs an Array[...] type, got {tname!r}", pos[0], pos[1])
            return NewArray(
                pos=pos,
                type_name=tname,
                length=self.expr(rest[1]),
                site_id=self._site("newarr", pos),
            )
        if head == "field-load":
            arity(2)
            return FieldLoad(pos=pos, obj=self.expr(rest[0]), field_name=_atom(rest[1]))
        if head == "array-load":
            arity(2)
            return ArrayLoad(pos=pos, arr=self.expr(rest[0]), index=self.expr(rest[1]))
        if head == "array-len":
            arity(1)
            return ArrayLen(pos=pos, arr=self.expr(rest[0]))
        if head == "call":
            if not rest:
                raise ParseError("call expects a method name", pos[0], pos[1])
            return Call(
                pos=pos,
                name=_atom(rest[0]),
                args=[self.expr(a) for a in rest[1:]],
                site_id=self._site("call", pos),
            )
        if head == "vcall":
            if len(rest) < 2:
                raise ParseError("vcall expects a receiver and a method name", pos[0], pos[1])
            return VCall(
                pos=pos,
                recv=self.expr(rest[0]),
                name=_atom(rest[1]),
                args=[self.expr(a) for a in rest[2:]],
                site_id=self._site("vcall", pos),
            )
        raise ParseError(f"unknown expression form {head!r}", pos[0], pos[1])

    def stmt(self, form) -> Node:
        tok, pos = form
        if isinstance(tok, str):
            raise ParseError(f"expected a statement form, got atom {tok!r}", pos[0], pos[1])
        items = tok
        if not items:
            raise ParseError("empty statement", pos[0], pos[1])
        head, _ = items[0]
        rest = items[1:]
        if head == "assign":
            if len(rest) != 2:
                raise ParseError("assign expects a name and a value", pos[0], pos[1])
            return Assign(pos=pos, name=_atom(rest[0]), value=self.expr(rest[1]))
        if head == "field-store":
            if len(rest) != 3:
                raise ParseError("field-store expects object, field, value", pos[0], pos[1])
            return FieldStore(
                pos=pos, obj=self.expr(rest[0]), field_name=_atom(rest[1]), value=self.expr(rest[2])
            )
        if head == "array-store":
            if len(rest) != 3:
                raise ParseError("array-store expects array, index, value", pos[0], pos[1])
            return ArrayStore(
                pos=pos, arr=self.expr(rest[0]), index=self.expr(rest[1]), value=self.expr(rest[2])
            )
        if head == "return":
            if len(rest) > 1:
                raise ParseError("return expects at most one value", pos[0], pos[1])
            return Return(pos=pos, value=self.expr(rest[0]) if rest else None)
        if head == "if":
            if len(rest) < 2:
                raise ParseError("if expects a condition and a (then ...) block", pos[0], pos[1])
            cond = self.expr(rest[0])
            then_body = self._block(rest[1], "then")
            else_body = self._block(rest[2], "else") if len(rest) > 2 else []
            if len(rest) > 3:
                raise ParseError("if has too many blocks", pos[0], pos[1])
            return If(pos=pos, cond=cond, then_body=then_body, else_body=else_body)
        if head == "while":
            if not rest:
                raise ParseError("while expects a condition", pos[0], pos[1])
            return While(pos=pos, cond=self.expr(rest[0]), body=[self.stmt(s) for s in rest[1:]])
        if head in ("call", "vcall"):
            return ExprStmt(pos=pos, expr=self.expr(form))
        raise ParseError(f"unknown statement form {head!r}", pos[0], pos[1])

    def _block(self, form, label: str) -> list[Node]:
        tok, pos = form
        if isinstance(tok, str) or not tok or tok[0][0] != label:
            raise ParseError(f"expected a ({label} ...) block", pos[0], pos[1])
        return [self.stmt(s) for s in tok[1:]]


def _atom(form) -> str:
    tok, pos = form
    if not isinstance(tok, str):
        raise ParseError("expected a name", pos[0], pos[1])
    return tok


def _parse_literal(lit: str, pos):
    if lit == "true":
        return True
    if lit == "false":
        return False
    try:
        if "." in lit or "e" in lit or "E" in lit:
            return float(lit)
        return int(lit)
    except ValueError:
        raise ParseError(f"bad literal {lit!r}", pos[0], pos[1]) from None


def parse_program(text: str) -> Program:
    """Parse IR source text into a Program.

    Raises ParseError (with line/column), DuplicateNameError, or
    UnknownTypeError for malformed input.
    """
    prog = Program()
    lines = text.splitlines()
    site_counter = iter(range(1, 1 << 30))

    cur_class: Optional[ClassType] = None
    cur_method: Optional[MethodDef] = None
    cur_job: Optional[JobSpec] = None
    cur_stage: Optional[StageDecl] = None
    referenced_types: list[tuple[str, int]] = []

    def note_type(name: str, line: int) -> str:
        referenced_types.append((name, line))
        if is_array_name(name):
            _register_array(prog, name)
        return name

    body_parser = _BodyParser(site_counter, note_type)

    i = 0
    while i < len(lines):
        raw = lines[i]
        stripped = raw.split("#", 1)[0].strip()
        lineno = i + 1
        if not stripped:
            i += 1
            continue
        if stripped.startswith("("):
            if cur_method is None:
                raise ParseError("statement outside a method body", lineno)
            clean = lines_nocomment(lines)
            reader = _SexpReader(clean, i)
            reader.j = raw.index("(")
            cur_method.body.append(body_parser.stmt(reader.read()))
            # more forms may start on the same line the previous one ended on
            while reader.i < len(clean) and clean[reader.i][reader.j :].strip():
                cur_method.body.append(body_parser.stmt(reader.read()))
            i = reader.i + 1
            continue

        words = stripped.split()
        kw = words[0]
        if kw not in _DECL_KEYWORDS:
            raise ParseError(f"unknown declaration {kw!r}", lineno)
        cur_method = None

        if kw == "class":
            if len(words) not in (2, 4) or (len(words) == 4 and words[2] != "extends"):
                raise ParseError("usage: class NAME [extends BASE]", lineno)
            name = _check_ident(words[1], lineno)
            if prog.has_type(name):
                raise DuplicateNameError(f"line {lineno}: duplicate type name {name!r}")
            base = words[3] if len(words) == 4 else None
            if base:
                note_type(base, lineno)
            cur_class = ClassType(name=name, base=base)
            prog.classes[name] = cur_class
        elif kw == "field":
            if cur_class is None:
                raise ParseError("field outside a class", lineno)
            if len(words) < 3:
                raise ParseError("usage: field NAME TYPE [final] [typeset T...]", lineno)
            fname = _check_ident(words[1], lineno)
            ftype = note_type(words[2], lineno)
            rest = words[3:]
            is_final = False
            annotated: Optional[tuple[str, ...]] = None
            while rest:
                if rest[0] == "final":
                    is_final = True
                    rest = rest[1:]
                elif rest[0] == "typeset":
                    annotated = tuple(note_type(t, lineno) for t in rest[1:])
                    if not annotated:
                        raise ParseError("typeset needs at least one type", lineno)
                    rest = []
                else:
                    raise ParseError(f"unexpected token {rest[0]!r} in field", lineno)
            if any(f.name == fname for f in cur_class.fields):
                raise DuplicateNameError(
                    f"line {lineno}: duplicate field {fname!r} in class {cur_class.name}"
                )
            cur_class.fields.append(
                FieldDef(
                    name=fname,
                    declared_type=ftype,
                    is_final=is_final,
                    type_set=annotated,
                    annotated=annotated is not None,
                    owner=cur_class.name,
                )
            )
        elif kw in ("ctor", "method"):
            # method OWNER NAME (params...)   where OWNER may be "free"
            if len(words) < 3:
                raise ParseError(f"usage: {kw} OWNER NAME (params...)", lineno)
            owner = words[1]
            name = _check_ident(words[2], lineno)
            if kw == "ctor" and owner == "free":
                raise ParseError("a ctor needs an owning class", lineno)
            if owner != "free":
                note_type(owner, lineno)
            params_src = stripped.split(None, 3)[3] if len(words) > 3 else ""
            params = _parse_params(params_src, lineno)
            m = MethodDef(name=name, owner=owner, params=params, is_ctor=(kw == "ctor"))
            if m.qualname in prog.methods:
                raise DuplicateNameError(f"line {lineno}: duplicate method {m.qualname!r}")
            prog.methods[m.qualname] = m
            cur_method = m
        elif kw == "container":
            decl = _parse_container(words, lineno, note_type)
            if decl.id in prog.containers:
                raise DuplicateNameError(f"line {lineno}: duplicate container {decl.id!r}")
            prog.containers[decl.id] = decl
        elif kw == "job":
            if len(words) < 2:
                raise ParseError("usage: job NAME [params (a b ...)]", lineno)
            name = _check_ident(words[1], lineno)
            if name in prog.jobs:
                raise DuplicateNameError(f"line {lineno}: duplicate job {name!r}")
            params: list[str] = []
            if len(words) > 2:
                if words[2] != "params":
                    raise ParseError("usage: job NAME [params (a b ...)]", lineno)
                params = _parse_params(stripped.split("params", 1)[1], lineno)
            cur_job = JobSpec(name=name, params=params)
            prog.jobs[name] = cur_job
            cur_stage = None
        elif kw == "stage":
            if cur_job is None:
                raise ParseError("stage outside a job", lineno)
            if len(words) != 2:
                raise ParseError("usage: stage NAME", lineno)
            cur_stage = StageDecl(name=_check_ident(words[1], lineno))
            cur_job.stages.append(cur_stage)
        elif kw == "phase":
            if cur_stage is None:
                raise ParseError("phase outside a stage", lineno)
            ph = _parse_phase(words, lineno)
            cur_stage.items.append(ph)
        elif kw == "unpersist":
            if cur_stage is None:
                raise ParseError("unpersist outside a stage", lineno)
            if len(words) != 2:
                raise ParseError("usage: unpersist CONTAINER", lineno)
            cur_stage.items.append(UnpersistDecl(container=words[1]))
        i += 1

    _validate(prog, referenced_types)
    return prog


def lines_nocomment(lines: list[str]) -> list[str]:
    return [ln.split("#", 1)[0] for ln in lines]


def _parse_params(src: str, lineno: int) -> list[str]:
    src = src.strip()
    if not src:
        return []
    if not (src.startswith("(") and src.endswith(")")):
        raise ParseError("parameter list must be parenthesized", lineno)
    names = src[1:-1].split()
    return [_check_ident(n, lineno) for n in names]


def _parse_container(words: list[str], lineno: int, note_type) -> ContainerDecl:
    if len(words) < 4 or words[2] != "kind":
        raise ParseError("usage: container ID kind KIND [elem T] [key T] [val T] ...", lineno)
    cid = _check_ident(words[1], lineno)
    kind = words[3]
    if kind not in CONTAINER_KINDS:
        raise ParseError(f"unknown container kind {kind!r}", lineno)
    decl = ContainerDecl(id=cid, kind=kind)
    rest = words[4:]
    while rest:
        opt = rest[0]
        if opt in ("elem", "key", "val", "create", "combine", "storage"):
            if len(rest) < 2:
                raise ParseError(f"container option {opt!r} needs a value", lineno)
            value = rest[1]
            if opt in ("elem", "key", "val"):
                note_type(value, lineno)
            if opt == "storage" and value not in ("memory", "disk"):
                raise ParseError("storage must be memory or disk", lineno)
            setattr(decl, opt, value)
            rest = rest[2:]
        else:
            raise ParseError(f"unexpected container option {opt!r}", lineno)
    return decl


def _parse_phase(words: list[str], lineno: int) -> PhaseDecl:
    if len(words) < 2:
        raise ParseError("usage: phase NAME source C udf M sink C [flatten]", lineno)
    name = _check_ident(words[1], lineno)
    opts = {"flatten": False}
    vals = {}
    rest = words[2:]
    while rest:
        if rest[0] == "flatten":
            opts["flatten"] = True
            rest = rest[1:]
            continue
        if rest[0] not in ("source", "udf", "sink") or len(rest) < 2:
            raise ParseError(f"unexpected phase token {rest[0]!r}", lineno)
        vals[rest[0]] = rest[1]
        rest = rest[2:]
    for req in ("source", "udf", "sink"):
        if req not in vals:
            raise ParseError(f"phase is missing {req!r}", lineno)
    return PhaseDecl(
        name=name, source=vals["source"], udf=vals["udf"], sink=vals["sink"], flatten=opts["flatten"]
    )


def _register_array(prog: Program, name: str) -> None:
    if name in prog.arrays:
        return
    elem = array_element(name)
    prog.arrays[name] = ArrayType(name=name, element_decl=elem)
    if is_array_name(elem):
        _register_array(prog, elem)


def _validate(prog: Program, referenced: list[tuple[str, int]]) -> None:
    for name, lineno in referenced:
        base = name
        while is_array_name(base):
            base = array_element(base)
        if not prog.has_type(base):
            raise UnknownTypeError(f"line {lineno}: unknown type {base!r}")
    # phases chain within a stage; container references resolve
    for job in prog.jobs.values():
        for stage in job.stages:
            phases = stage.phases
            for k, ph in enumerate(phases):
                for cid in (ph.source, ph.sink):
                    if cid not in prog.containers:
                        raise UnknownTypeError(
                            f"job {job.name}: phase {ph.name} references unknown container {cid!r}"
                        )
                if k + 1 < len(phases) and phases[k + 1].source != ph.sink:
                    raise ParseError(
                        f"job {job.name} stage {stage.name}: phase chain broken at {ph.name!r}",
                        0,
                    )
                if ph.udf != "identity" and ph.udf not in prog.methods:
                    raise UnknownMethodError(
                        f"job {job.name}: phase {ph.name} references unknown method {ph.udf!r}"
                    )
    for decl in prog.containers.values():
        for mname in (decl.create, decl.combine):
            if mname is not None and mname not in prog.methods:
                raise UnknownMethodError(f"container {decl.id}: unknown method {mname!r}")


# ---------------------------------------------------------------------------
# Printer (canonical text; parse(print(p)) structurally equals p)
# ---------------------------------------------------------------------------


def print_program(prog: Program) -> str:
    out: list[str] = []
    for cname in prog.classes:
        c = prog.classes[cname]
        out.append(f"class {c.name}" + (f" extends {c.base}" if c.base else ""))
        for f in c.fields:
            line = f"  field {f.name} {f.declared_type}"
            if f.is_final:
                line += " final"
            if f.annotated and f.type_set:
                line += " typeset " + " ".join(f.type_set)
            out.append(line)
    for m in prog.methods.values():
        kw = "ctor" if m.is_ctor else "method"
        out.append(f"{kw} {m.owner} {m.name} ({' '.join(m.params)})")
        for stmt in m.body:
            out.append("  " + _print_node(stmt))
    for d in prog.containers.values():
        parts = [f"container {d.id} kind {d.kind}"]
        for opt in ("elem", "key", "val", "create", "combine"):
            v = getattr(d, opt)
            if v is not None:
                parts.append(f"{opt} {v}")
        if d.storage != "disk":
            parts.append(f"storage {d.storage}")
        out.append(" ".join(parts))
    for job in prog.jobs.values():
        hdr = f"job {job.name}"
        if job.params:
            hdr += f" params ({' '.join(job.params)})"
        out.append(hdr)
        for st in job.stages:
            out.append(f"  stage {st.name}")
            for item in st.items:
                if isinstance(item, UnpersistDecl):
                    out.append(f"    unpersist {item.container}")
                else:
                    line = (
                        f"    phase {item.name} source {item.source} udf {item.udf} sink {item.sink}"
                    )
                    if item.flatten:
                        line += " flatten"
                    out.append(line)
    return "\n".join(out) + "\n"


def _print_node(n: Node) -> str:
    if isinstance(n, Const):
        v = n.value
        if v is True:
            return "(const true)"
        if v is False:
            return "(const false)"
        if isinstance(v, float):
            s = repr(v)
            return f"(const {s if ('.' in s or 'e' in s or 'E' in s) else s + '.0'})"
        return f"(const {v})"
    if isinstance(n, Local):
        return f"(local {n.name})"
    if isinstance(n, ReadExternal):
        return "(read-external)"
    if isinstance(n, Unary):
        return f"({n.op} {_print_node(n.arg)})"
    if isinstance(n, Binary):
        return f"({n.op} {_print_node(n.left)} {_print_node(n.right)})"
    if isinstance(n, NewObject):
        args = "".join(" " + _print_node(a) for a in n.args)
        return f"(new {n.type_name} {n.ctor}{args})"
    if isinstance(n, NewArray):
        return f"(new-array {n.type_name} {_print_node(n.length)})"
    if isinstance(n, FieldLoad):
        return f"(field-load {_print_node(n.obj)} {n.field_name})"
    if isinstance(n, ArrayLoad):
        return f"(array-load {_print_node(n.arr)} {_print_node(n.index)})"
    if isinstance(n, ArrayLen):
        return f"(array-len {_print_node(n.arr)})"
    if isinstance(n, Call):
        return f"(call {n.name}" + "".join(" " + _print_node(a) for a in n.args) + ")"
    if isinstance(n, VCall):
        return (
            f"(vcall {_print_node(n.recv)} {n.name}"
            + "".join(" " + _print_node(a) for a in n.args)
            + ")"
        )
    if isinstance(n, Assign):
        return f"(assign {n.name} {_print_node(n.value)})"
    if isinstance(n, FieldStore):
        return f"(field-store {_print_node(n.obj)} {n.field_name} {_print_node(n.value)})"
    if isinstance(n, ArrayStore):
        return f"(array-store {_print_node(n.arr)} {_print_node(n.index)} {_print_node(n.value)})"
    if isinstance(n, Return):
        return "(return)" if n.value is None else f"(return {_print_node(n.value)})"
    if isinstance(n, If):
        s = f"(if {_print_node(n.cond)} (then" + "".join(" " + _print_node(x) for x in n.then_body) + ")"
        if n.else_body:
            s += " (else" + "".join(" " + _print_node(x) for x in n.else_body) + ")"
        return s + ")"
    if isinstance(n, While):
        return f"(while {_print_node(n.cond)}" + "".join(" " + _print_node(x) for x in n.body) + ")"
    if isinstance(n, ExprStmt):
        return _print_node(n.expr)
    raise IRError(f"cannot print node {n!r}")


# ---------------------------------------------------------------------------
# Type dependency graph
# ---------------------------------------------------------------------------


@dataclass
class TypeDependencyGraph:
    root: str
    nodes: set[str] = field(default_factory=set)
    # edge (A, B): B appears in the type-set of some field (or element) of A
    edges: set[tuple[str, str]] = field(default_factory=set)

    def successors(self, name: str) -> list[str]:
        return sorted(b for (a, b) in self.edges if a == name)


def build_type_dependency_graph(type_name: str, prog: Program) -> TypeDependencyGraph:
    """Closure of `type_name` under field/element type-sets."""
    if not prog.has_type(type_name):
        raise UnknownTypeError(f"unknown type {type_name!r}")
    prog.analysis()  # ensures type-sets exist
    g = TypeDependencyGraph(root=type_name)
    work = [type_name]
    while work:
        t = work.pop()
        if t in g.nodes:
            continue
        g.nodes.add(t)
        for f in prog.fields_of(t):
            for member in f.get_type_set():
                g.edges.add((t, member))
                if member not in g.nodes:
                    work.append(member)
    return g


def has_dependency_cycle(g: TypeDependencyGraph) -> bool:
    """True iff a directed cycle exists among non-primitive nodes."""
    color: dict[str, int] = {}

    def visit(n: str) -> bool:
        color[n] = 1
        for m in g.successors(n):
            if is_primitive(m):
                continue
            c = color.get(m, 0)
            if c == 1:
                return True
            if c == 0 and visit(m):
                return True
        color[n] = 2
        return False

    return any(visit(n) for n in sorted(g.nodes) if color.get(n, 0) == 0 and not is_primitive(n))


def dependency_cycle_path(g: TypeDependencyGraph) -> list[str]:
    """One cycle as a node path, for report evidence. Empty if acyclic."""
    color: dict[str, int] = {}
    stack: list[str] = []

    def visit(n: str):
        color[n] = 1
        stack.append(n)
        for m in g.successors(n):
            if is_primitive(m):
                continue
            c = color.get(m, 0)
            if c == 1:
                return stack[stack.index(m) :] + [m]
            if c == 0:
                found = visit(m)
                if found:
                    return found
        stack.pop()
        color[n] = 2
        return None

    for n in sorted(g.nodes):
        if color.get(n, 0) == 0 and not is_primitive(n):
            found = visit(n)
            if found:
                return found
    return []


# ---------------------------------------------------------------------------
# Generic statement walkers
# ---------------------------------------------------------------------------


def _stmt_exprs(s: Node) -> list[Node]:
    """Direct expression children of a statement."""
    if isinstance(s, Assign):
        return [s.value]
    if isinstance(s, FieldStore):
        return [s.obj, s.value]
    if isinstance(s, ArrayStore):
        return [s.arr, s.index, s.value]
    if isinstance(s, Return):
        return [s.value] if s.value is not None else []
    if isinstance(s, If):
        return [s.cond]
    if isinstance(s, While):
        return [s.cond]
    if isinstance(s, ExprStmt):
        return [s.expr]
    return []


def _stmt_children(s: Node) -> list[Node]:
    """Nested statements of a compound statement."""
    if isinstance(s, If):
        return list(s.then_body) + list(s.else_body)
    if isinstance(s, While):
        return list(s.body)
    return []


def walk_statements(body: list[Node]) -> Iterator[Node]:
    """All statements in a body, including nested ones, in source order."""
    for s in body:
        yield s
        yield from walk_statements(_stmt_children(s))


# ---------------------------------------------------------------------------
# Points-to / type-set inference (flow-insensitive, Andersen-style)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AllocSite:
    site_id: str
    type_name: str
    method: str  # qualname of the containing method


class ProgramAnalysis:
    """Whole-program, flow-insensitive inference shared by all scopes.

    Computes, to a fixed point:
      * points-to sets (allocation sites) for locals, fields, returns;
      * per-field type-sets (annotations win and are never widened);
      * resolved callees per call site (class-hierarchy + type-set dispatch).
    """

    def __init__(self, prog: Program):
        self.prog = prog
        self.local_pts: dict[tuple[str, str], set[AllocSite]] = {}
        self.field_pts: dict[tuple[str, str], set[AllocSite]] = {}
        self.return_pts: dict[str, set[AllocSite]] = {}
        self.site_callees: dict[str, set[str]] = {}
        self.field_stores: dict[tuple[str, str], list[tuple[str, Node]]] = {}
        self.array_length_exprs: dict[str, tuple[str, Node]] = {}
        self._run()
        self._finalize_type_sets()

    # -- helpers

    def _lp(self, method: str, var: str) -> set[AllocSite]:
        return self.local_pts.setdefault((method, var), set())

    def _fp(self, owner: str, fname: str) -> set[AllocSite]:
        return self.field_pts.setdefault((owner, fname), set())

    def _field_defs(self, fname: str, objs: set[AllocSite]) -> list[FieldDef]:
        """Field definitions named fname on the possible receiver types."""
        defs = []
        for site in objs:
            t = site.type_name
            # walk the class and its bases for the field
            cur = t
            while cur is not None:
                if cur in self.prog.classes:
                    cls = self.prog.classes[cur]
                    hit = next((f for f in cls.fields if f.name == fname), None)
                    if hit is not None:
                        defs.append(hit)
                        break
                    cur = cls.base
                elif cur in self.prog.arrays and fname == "<elem>":
                    defs.append(self.prog.arrays[cur].element_field)
                    break
                else:
                    break
        return defs

    def _run(self) -> None:
        prog = self.prog
        self._all_sites = self._collect_sites()
        changed = True
        max_rounds = 64
        rounds = 0
        while changed:
            changed = False
            rounds += 1
            if rounds > max_rounds:
                raise IRError("points-to inference did not converge")
            self._changed = False
            self._seed_entry_params()
            if self._changed:
                changed = True
            for m in prog.methods.values():
                if self._walk_body(m):
                    changed = True

    def _collect_sites(self) -> list[AllocSite]:
        """All allocation sites in the program, plus one pseudo-site per type
        named by a container declaration (values built by input adapters)."""
        sites: list[AllocSite] = []

        def walk(m: MethodDef, e: Node) -> None:
            if isinstance(e, NewObject):
                sites.append(AllocSite(e.site_id, e.type_name, m.qualname))
                for a in e.args:
                    walk(m, a)
            elif isinstance(e, NewArray):
                sites.append(AllocSite(e.site_id, e.type_name, m.qualname))
                walk(m, e.length)
            elif isinstance(e, Unary):
                walk(m, e.arg)
            elif isinstance(e, Binary):
                walk(m, e.left)
                walk(m, e.right)
            elif isinstance(e, FieldLoad):
                walk(m, e.obj)
            elif isinstance(e, ArrayLoad):
                walk(m, e.arr)
                walk(m, e.index)
            elif isinstance(e, ArrayLen):
                walk(m, e.arr)
            elif isinstance(e, Call):
                for a in e.args:
                    walk(m, a)
            elif isinstance(e, VCall):
                walk(m, e.recv)
                for a in e.args:
                    walk(m, a)

        def walk_stmt(m: MethodDef, s: Node) -> None:
            for child in _stmt_exprs(s):
                walk(m, child)
            for child in _stmt_children(s):
                walk_stmt(m, child)

        for m in self.prog.methods.values():
            for s in m.body:
                walk_stmt(m, s)
        for decl in self.prog.containers.values():
            for t in (decl.elem, decl.key, decl.val):
                if t is not None and not is_primitive(t):
                    sites.append(AllocSite(f"<ext:{t}>", t, "<external>"))
        return sites

    def _sites_of(self, type_name: Optional[str]) -> set[AllocSite]:
        if type_name is None or is_primitive(type_name):
            return set()
        return {s for s in self._all_sites if self._assignable(s.type_name, type_name)}

    def _seed_entry_params(self) -> None:
        """Bind container element types to the parameters of phase UDFs and
        container create/combine methods; the engine, not IR code, calls these."""
        prog = self.prog
        for decl in prog.containers.values():
            if decl.kind == "hash-reduce" and decl.combine:
                m = prog.methods[decl.combine]
                vals = self._sites_of(decl.val)
                for p in m.params[:2]:
                    self._add(self._lp(m.qualname, p), vals)
            elif decl.kind == "hash-group":
                combined = self.return_pts.get(decl.create, set()) if decl.create else set()
                if decl.create:
                    m = prog.methods[decl.create]
                    for p, v in zip(m.params, [self._sites_of(decl.key), self._sites_of(decl.val)]):
                        self._add(self._lp(m.qualname, p), v)
                if decl.combine:
                    m = prog.methods[decl.combine]
                    for p, v in zip(m.params, [combined, self._sites_of(decl.val)]):
                        self._add(self._lp(m.qualname, p), v)
        for job in prog.jobs.values():
            for stage in job.stages:
                for ph in stage.phases:
                    if ph.udf == "identity":
                        continue
                    m = prog.methods[ph.udf]
                    src = prog.containers[ph.source]
                    seeds = self._source_value_sites(src)
                    for p, v in zip(m.params, seeds):
                        self._add(self._lp(m.qualname, p), v)

    def _source_value_sites(self, src: ContainerDecl) -> list[set[AllocSite]]:
        if src.kind in ("input", "cache"):
            return [self._sites_of(src.elem)]
        if src.kind in ("hash-reduce", "sort"):
            return [self._sites_of(src.key), self._sites_of(src.val)]
        if src.kind == "hash-group":
            combined = set(self.return_pts.get(src.create, set())) if src.create else set()
            return [self._sites_of(src.key), combined]
        return []

    def _walk_body(self, m: MethodDef) -> bool:
        self._changed = False
        for stmt in m.body:
            self._stmt(m, stmt)
        return self._changed

    def _add(self, dst: set[AllocSite], src: set[AllocSite]) -> None:
        before = len(dst)
        dst |= src
        if len(dst) != before:
            self._changed = True

    def _stmt(self, m: MethodDef, s: Node) -> None:
        if isinstance(s, Assign):
            self._add(self._lp(m.qualname, s.name), self._expr(m, s.value))
        elif isinstance(s, FieldStore):
            objs = self._expr(m, s.obj)
            vals = self._expr(m, s.value)
            key_positions = set()
            for site in objs:
                owner = self._field_owner(site.type_name, s.field_name)
                if owner is not None:
                    key_positions.add((owner, s.field_name))
            for key in key_positions:
                self._add(self._fp(*key), vals)
                stores = self.field_stores.setdefault(key, [])
                if not any(st is s for (_, st) in stores):
                    stores.append((m.qualname, s))
                    self._changed = True
            self._expr(m, s.value)
        elif isinstance(s, ArrayStore):
            arrs = self._expr(m, s.arr)
            vals = self._expr(m, s.value)
            for site in arrs:
                if site.type_name in self.prog.arrays:
                    self._add(self._fp(site.type_name, "<elem>"), vals)
                    stores = self.field_stores.setdefault((site.type_name, "<elem>"), [])
                    if not any(st is s for (_, st) in stores):
                        stores.append((m.qualname, s))
                        self._changed = True
            self._expr(m, s.index)
        elif isinstance(s, Return):
            if s.value is not None:
                self._add(self.return_pts.setdefault(m.qualname, set()), self._expr(m, s.value))
        elif isinstance(s, If):
            self._expr(m, s.cond)
            for x in s.then_body:
                self._stmt(m, x)
            for x in s.else_body:
                self._stmt(m, x)
        elif isinstance(s, While):
            self._expr(m, s.cond)
            for x in s.body:
                self._stmt(m, x)
        elif isinstance(s, ExprStmt):
            self._expr(m, s.expr)

    def _field_owner(self, type_name: str, fname: str) -> Optional[str]:
        cur: Optional[str] = type_name
        while cur is not None and cur in self.prog.classes:
            cls = self.prog.classes[cur]
            if any(f.name == fname for f in cls.fields):
                return cur
            cur = cls.base
        if cur is not None and cur in self.prog.arrays and fname == "<elem>":
            return cur
        return None

    def _bind_call(self, callee: MethodDef, args: list[set[AllocSite]], recv=None) -> set[AllocSite]:
        params = callee.params
        if callee.owner != "free":
            self_sites = recv or set()
            self._add(self._lp(callee.qualname, "this"), self_sites)
        if len(args) != len(params):
            raise IRError(
                f"call to {callee.qualname} with {len(args)} args, expected {len(params)}"
            )
        for p, a in zip(params, args):
            self._add(self._lp(callee.qualname, p), a)
        return self.return_pts.get(callee.qualname, set())

    def _expr(self, m: MethodDef, e: Node) -> set[AllocSite]:
        prog = self.prog
        if isinstance(e, (Const, ReadExternal)):
            return set()
        if isinstance(e, Local):
            return set(self._lp(m.qualname, e.name))
        if isinstance(e, Unary):
            self._expr(m, e.arg)
            return set()
        if isinstance(e, Binary):
            self._expr(m, e.left)
            self._expr(m, e.right)
            return set()
        if isinstance(e, NewObject):
            if e.type_name not in prog.classes:
                raise UnknownTypeError(f"new of unknown class {e.type_name!r}")
            site = AllocSite(e.site_id, e.type_name, m.qualname)
            args = [self._expr(m, a) for a in e.args]
            ctor = prog.methods.get(f"{e.type_name}.{e.ctor}")
            if ctor is None or not ctor.is_ctor:
                raise UnknownMethodError(f"no constructor {e.ctor!r} on {e.type_name}")
            self._note_callee(e.site_id, ctor.qualname)
            self._bind_call(ctor, args, recv={site})
            return {site}
        if isinstance(e, NewArray):
            if e.type_name not in prog.arrays:
                raise UnknownTypeError(f"new-array of unknown array type {e.type_name!r}")
            self._expr(m, e.length)
            if e.site_id not in self.array_length_exprs:
                self.array_length_exprs[e.site_id] = (m.qualname, e.length)
            return {AllocSite(e.site_id, e.type_name, m.qualname)}
        if isinstance(e, FieldLoad):
            objs = self._expr(m, e.obj)
            out: set[AllocSite] = set()
            for site in objs:
                owner = self._field_owner(site.type_name, e.field_name)
                if owner is not None:
                    out |= self._fp(owner, e.field_name)
            return out
        if isinstance(e, ArrayLoad):
            arrs = self._expr(m, e.arr)
            self._expr(m, e.index)
            out: set[AllocSite] = set()
            for site in arrs:
                if site.type_name in prog.arrays:
                    out |= self._fp(site.type_name, "<elem>")
            return out
        if isinstance(e, ArrayLen):
            self._expr(m, e.arr)
            return set()
        if isinstance(e, Call):
            callee = prog.methods.get(e.name)
            if callee is None or callee.owner != "free":
                raise UnknownMethodError(f"call to undeclared method {e.name!r}")
            self._note_callee(e.site_id, callee.qualname)
            args = [self._expr(m, a) for a in e.args]
            return set(self._bind_call(callee, args))
        if isinstance(e, VCall):
            recv = self._expr(m, e.recv)
            args = [self._expr(m, a) for a in e.args]
            out: set[AllocSite] = set()
            for t in sorted({s.type_name for s in recv}):
                try:
                    callee = prog.resolve_method(t, e.name)
                except UnknownMethodError:
                    continue
                self._note_callee(e.site_id, callee.qualname)
                out |= self._bind_call(
                    callee, args, recv={s for s in recv if prog.is_subtype(s.type_name, t) or s.type_name == t}
                )
            return out
        raise IRError(f"unhandled expression {e!r}")

    def _note_callee(self, site_id: str, qualname: str) -> None:
        s = self.site_callees.setdefault(site_id, set())
        if qualname not in s:
            s.add(qualname)
            self._changed = True

    def _finalize_type_sets(self) -> None:
        prog = self.prog
        for tname in list(prog.classes) + list(prog.arrays):
            for f in prog.fields_of(tname):
                if f.annotated:
                    continue
                owner = f.owner
                sites = self.field_pts.get((owner, f.name), set())
                types = sorted({s.type_name for s in sites})
                for t in types:
                    if not self._assignable(t, f.declared_type):
                        raise TypeSetError(
                            f"{owner}.{f.name}: runtime type {t} incompatible with "
                            f"declared type {f.declared_type}"
                        )
                f.type_set = tuple(types) if types else (f.declared_type,)

    def _assignable(self, runtime: str, declared: str) -> bool:
        if runtime == declared:
            return True
        if is_array_name(declared) or is_primitive(declared):
            return False
        return self.prog.is_subtype(runtime, declared)


def infer_type_sets(prog: Program) -> dict[tuple[str, str], tuple[str, ...]]:
    """Run (or reuse) whole-program inference; returns {(owner, field): type-set}."""
    prog.analysis()
    out: dict[tuple[str, str], tuple[str, ...]] = {}
    for tname in prog.type_names():
        for f in prog.fields_of(tname):
            out[(f.owner, f.name)] = f.get_type_set()
    return out


# ---------------------------------------------------------------------------
# Call graphs
# ---------------------------------------------------------------------------


@dataclass
class CallGraph:
    entry: str
    nodes: set[str] = field(default_factory=set)  # method qualnames (plus the entry)
    edges: set[tuple[str, str, str]] = field(default_factory=set)  # (caller, site_id, callee)

    def callees(self, qualname: str) -> list[str]:
        return sorted({c for (a, _, c) in self.edges if a == qualname})

    def contains_method(self, qualname: str) -> bool:
        return qualname in self.nodes


def build_call_graph(entries: list[str] | str, prog: Program, scope: str = "stage") -> CallGraph:
    """Reachable methods from one or more root methods.

    `entries` may be a single method qualname or a list of roots; a synthetic
    entry node `<scope:...>` is added when there are multiple roots, mirroring
    the per-stage driver loop that invokes each phase UDF in turn.
    """
    analysis = prog.analysis()
    roots = [entries] if isinstance(entries, str) else list(entries)
    for r in roots:
        if r not in prog.methods:
            raise UnknownMethodError(f"call to undeclared method {r!r}")
    if len(roots) == 1:
        entry = roots[0]
    else:
        entry = f"<{scope}:{'+'.join(roots)}>"
    g = CallGraph(entry=entry)
    g.nodes.add(entry)
    for r in roots:
        if entry != r:
            g.edges.add((entry, f"root:{r}", r))
    work = list(roots)
    visited: set[str] = set()
    while work:
        name = work.pop()
        if name in visited:
            continue
        visited.add(name)
        g.nodes.add(name)
        for site_id, callee in _call_sites(prog.methods[name], analysis):
            g.edges.add((name, site_id, callee))
            if callee not in visited:
                work.append(callee)
    return g


def _call_sites(m: MethodDef, analysis: ProgramAnalysis) -> list[tuple[str, str]]:
    out: list[tuple[str, str]] = []

    def walk_expr(e: Node) -> None:
        if isinstance(e, (Const, Local, ReadExternal)):
            return
        if isinstance(e, Unary):
            walk_expr(e.arg)
        elif isinstance(e, Binary):
            walk_expr(e.left)
            walk_expr(e.right)
        elif isinstance(e, NewObject):
            for a in e.args:
                walk_expr(a)
            for callee in sorted(analysis.site_callees.get(e.site_id, ())):
                out.append((e.site_id, callee))
        elif isinstance(e, NewArray):
            walk_expr(e.length)
        elif isinstance(e, FieldLoad):
            walk_expr(e.obj)
        elif isinstance(e, ArrayLoad):
            walk_expr(e.arr)
            walk_expr(e.index)
        elif isinstance(e, ArrayLen):
            walk_expr(e.arr)
        elif isinstance(e, (Call, VCall)):
            if isinstance(e, VCall):
                walk_expr(e.recv)
            for a in e.args:
                walk_expr(a)
            for callee in sorted(analysis.site_callees.get(e.site_id, ())):
                out.append((e.site_id, callee))

    def walk_stmt(s: Node) -> None:
        if isinstance(s, Assign):
            walk_expr(s.value)
        elif isinstance(s, FieldStore):
            walk_expr(s.obj)
            walk_expr(s.value)
        elif isinstance(s, ArrayStore):
            walk_expr(s.arr)
            walk_expr(s.index)
            walk_expr(s.value)
        elif isinstance(s, Return):
            if s.value is not None:
                walk_expr(s.value)
        elif isinstance(s, If):
            walk_expr(s.cond)
            for x in s.then_body:
                walk_stmt(x)
            for x in s.else_body:
                walk_stmt(x)
        elif isinstance(s, While):
            walk_expr(s.cond)
            for x in s.body:
                walk_stmt(x)
        elif isinstance(s, ExprStmt):
            walk_expr(s.expr)

    for s in m.body:
        walk_stmt(s)
    return out
