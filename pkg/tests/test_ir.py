"""Parser, type dependency graphs, type-set inference, call graphs."""

import pytest

from pageflow import ir
from pageflow.ir import parse_program, print_program

# The LabeledPoint/DenseVector pair with one array type: the smallest program
# exercising declared-vs-runtime field types.
POINTS_SRC = """
class DenseVector
  field data Array[double] final
  field offset int final
  field stride int final
  field length int final
ctor DenseVector init (d off st len)
  (field-store (local this) data (local d))
  (field-store (local this) offset (local off))
  (field-store (local this) stride (local st))
  (field-store (local this) length (local len))
class LabeledPoint
  field label double
  field features DenseVector
ctor LabeledPoint init (l f)
  (field-store (local this) label (local l))
  (field-store (local this) features (local f))
"""

LISTNODE_SRC = """
class ListNode
  field next ListNode
  field v int
"""


def test_primitive_sizes():
    assert ir.PRIM_SIZES == {
        "bool": 1,
        "byte": 1,
        "char": 2,
        "short": 2,
        "int": 4,
        "long": 8,
        "float": 4,
        "double": 8,
    }


class TestParse:
    def test_empty_input_gives_empty_program(self):
        p = parse_program("")
        assert p.classes == {} and p.methods == {} and p.jobs == {} and p.containers == {}

    def test_points_transcription(self):
        p = parse_program(POINTS_SRC)
        assert sorted(p.classes) == ["DenseVector", "LabeledPoint"]
        assert sorted(p.arrays) == ["Array[double]"]

    def test_unknown_type_is_named(self):
        with pytest.raises(ir.UnknownTypeError, match="Foo"):
            parse_program("class A\n  field x Foo\n")

    def test_duplicate_type_name(self):
        with pytest.raises(ir.DuplicateNameError):
            parse_program("class A\nclass A\n")

    def test_syntax_error_carries_position(self):
        with pytest.raises(ir.ParseError) as exc:
            parse_program("method free f ()\n  (assign x (const 1)\n")
        assert exc.value.line == 2

    def test_statement_outside_method(self):
        with pytest.raises(ir.ParseError, match="outside"):
            parse_program("(assign x (const 1))\n")

    def test_broken_phase_chain(self):
        src = """
class A
  field x int
container a kind input elem int
container b kind cache elem A
container c kind cache elem A
container out kind output
method free f (e)
  (return (local e))
job j
  stage s
    phase p1 source a udf f sink b
    phase p2 source c udf f sink out
"""
        with pytest.raises(ir.ParseError, match="chain"):
            parse_program(src)

    def test_positions_annotated(self):
        p = parse_program(POINTS_SRC)
        stmt = p.methods["DenseVector.init"].body[0]
        assert stmt.pos[0] > 0 and stmt.pos[1] > 0

    @pytest.mark.parametrize(
        "name", ["lr", "wc", "kmeans", "pr", "sortcache", "copycache", "grow", "symprop", "cyclic"]
    )
    def test_print_parse_round_trip(self, corpus, name):
        p = corpus[name]
        q = parse_program(print_program(p))
        q.analysis()  # the fixture programs carry inferred type-sets
        assert q.classes == p.classes
        assert q.methods == p.methods
        assert q.containers == p.containers
        assert q.jobs == p.jobs


class TestTypeDependencyGraph:
    def test_labeled_point_graph(self):
        p = parse_program(POINTS_SRC)
        g = ir.build_type_dependency_graph("LabeledPoint", p)
        assert g.nodes == {"LabeledPoint", "double", "DenseVector", "Array[double]", "int"}
        assert g.edges == {
            ("LabeledPoint", "double"),
            ("LabeledPoint", "DenseVector"),
            ("DenseVector", "Array[double]"),
            ("DenseVector", "int"),
            ("Array[double]", "double"),
        }
        assert not ir.has_dependency_cycle(g)

    def test_primitive_graph_is_single_node(self):
        p = parse_program(POINTS_SRC)
        g = ir.build_type_dependency_graph("double", p)
        assert g.nodes == {"double"} and g.edges == set()

    def test_self_reference_has_cycle(self):
        p = parse_program(LISTNODE_SRC)
        g = ir.build_type_dependency_graph("ListNode", p)
        assert ("ListNode", "ListNode") in g.edges
        assert ir.has_dependency_cycle(g)
        assert "ListNode" in ir.dependency_cycle_path(g)

    def test_mutual_reference_has_cycle(self):
        p = parse_program("class A\n  field b B\nclass B\n  field a A\n")
        g = ir.build_type_dependency_graph("A", p)
        assert ir.has_dependency_cycle(g)

    @pytest.mark.parametrize("name", ["lr", "kmeans", "pr", "grow"])
    def test_graph_closed_under_type_sets(self, corpus, name):
        p = corpus[name]
        for t in p.type_names():
            g = ir.build_type_dependency_graph(t, p)
            for node in g.nodes:
                for f in p.fields_of(node):
                    for member in f.get_type_set():
                        assert member in g.nodes


class TestTypeSets:
    def test_single_assignment(self, lr):
        ts = ir.infer_type_sets(lr)
        assert ts[("LabeledPoint", "features")] == ("DenseVector",)

    def test_fallback_is_declared_type(self):
        p = parse_program("class A\n  field x double\nclass B\n  field a A\n")
        ts = ir.infer_type_sets(p)
        assert ts[("B", "a")] == ("A",)

    def test_two_runtime_types(self):
        src = """
class Vector
class Dense extends Vector
  field n int
ctor Dense init ()
  (return)
class Sparse extends Vector
  field n int
ctor Sparse init ()
  (return)
class Holder
  field v Vector
ctor Holder init ()
  (return)
method free build (flag)
  (assign h (new Holder init))
  (if (local flag)
      (then (field-store (local h) v (new Dense init)))
      (else (field-store (local h) v (new Sparse init))))
  (return (local h))
"""
        ts = ir.infer_type_sets(parse_program(src))
        assert ts[("Holder", "v")] == ("Dense", "Sparse")

    def test_incompatible_assignment_rejected(self):
        src = """
class A
  field n int
ctor A init ()
  (return)
class B
  field n int
ctor B init ()
  (return)
class Holder
  field a A
ctor Holder init ()
  (return)
method free build ()
  (assign h (new Holder init))
  (field-store (local h) a (new B init))
  (return (local h))
"""
        with pytest.raises(ir.TypeSetError, match="incompatible"):
            ir.infer_type_sets(parse_program(src))

    def test_annotation_overrides_inference(self):
        src = """
class A
  field n int
ctor A init ()
  (return)
class Holder
  field a A typeset A
ctor Holder init ()
  (return)
"""
        ts = ir.infer_type_sets(parse_program(src))
        assert ts[("Holder", "a")] == ("A",)


class TestCallGraph:
    def test_entry_calling_nothing(self):
        p = parse_program("method free f ()\n  (return (const 1))\n")
        g = ir.build_call_graph("f", p)
        assert g.nodes == {"f"} and g.edges == set()

    def test_lr_load_stage_reaches_constructors(self, lr):
        # reachability closure worked out by hand over the LR program text
        g = ir.build_call_graph(["parse_point"], lr, scope="stage")
        assert {n for n in g.nodes if not n.startswith("<")} == {
            "parse_point",
            "LabeledPoint.init",
            "DenseVector.wrap",
            "DenseVector.init",
        }

    def test_virtual_call_fans_out(self):
        src = """
class Base
class A extends Base
  field x int
ctor A init ()
  (return)
method A size ()
  (return (const 1))
class B extends Base
  field y int
ctor B init ()
  (return)
method B size ()
  (return (const 2))
class Holder
  field item Base
ctor Holder init (v)
  (field-store (local this) item (local v))
method free probe (h)
  (return (vcall (field-load (local h) item) size))
method free build (flag)
  (if (local flag)
      (then (assign h (new Holder init (new A init))))
      (else (assign h (new Holder init (new B init)))))
  (return (call probe (local h)))
"""
        p = parse_program(src)
        ir.infer_type_sets(p)
        g = ir.build_call_graph("build", p)
        assert {c for (a, _s, c) in g.edges if a == "probe"} == {"A.size", "B.size"}

    def test_undeclared_method(self):
        with pytest.raises(ir.UnknownMethodError):
            parse_program("method free f ()\n  (return (call missing))\n").analysis()
