import itertools

import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from wfcopilot import fixtures, model
from wfcopilot.errors import (
    DanglingEndpointError,
    DomainError,
    DuplicateNameError,
    SpecSchemaError,
    SpecSyntaxError,
)

MINIMAL = """
name: tiny
applications:
  - name: solo
    command: [/bin/true]
"""


def enumerated_failure_probability(probs):
    """Independent oracle: sum over every non-empty failure combination."""
    total = 0.0
    for mask in itertools.product((0, 1), repeat=len(probs)):
        if not any(mask):
            continue
        term = 1.0
        for bit, p in zip(mask, probs):
            term *= p if bit else (1.0 - p)
        total += term
    return total


# ---------------------------------------------------------------------------
# parsing

def test_minimal_document_parses_with_default_stages():
    spec = model.parse_workflow(MINIMAL)
    assert len(spec.applications) == 1
    assert [s.kind for s in spec.stages] == ["static-check", "single-node", "scaled"]


def test_dangling_channel_endpoint_rejected():
    doc = MINIMAL + """
channels:
  - {name: b, from_app: nest, to_app: solo, kind: bulk_data}
"""
    with pytest.raises(DanglingEndpointError) as err:
        model.parse_workflow(doc)
    assert err.value.code == "dangling-endpoint"
    assert err.value.context["endpoint"] == "nest"


def test_duplicate_application_name_rejected():
    doc = """
name: dup
applications:
  - {name: a, command: [/bin/true]}
  - {name: a, command: [/bin/true]}
"""
    with pytest.raises(DuplicateNameError):
        model.parse_workflow(doc)


def test_syntax_error_carries_position():
    with pytest.raises(SpecSyntaxError) as err:
        model.parse_workflow("name: [unclosed\napplications:")
    assert err.value.code == "syntax"
    assert err.value.context.get("line") is not None


def test_unknown_key_rejected_with_field():
    with pytest.raises(SpecSchemaError) as err:
        model.parse_workflow(MINIMAL + "\nbogus_key: 1\n")
    assert "bogus_key" in str(err.value)


def test_command_string_form_is_split():
    spec = model.parse_workflow("""
name: strcmd
applications:
  - name: a
    command: "/bin/echo hello world"
""")
    assert spec.applications[0].command == ("/bin/echo", "hello", "world")


def test_stage_backbone_order_enforced():
    doc = """
name: misordered
applications:
  - {name: a, command: [/bin/true]}
stages:
  - {name: sn, kind: single-node}
  - {name: st, kind: static-check}
  - {name: sc, kind: scaled}
"""
    with pytest.raises(SpecSchemaError):
        model.parse_workflow(doc)


def test_heartbeat_minimum_enforced():
    doc = """
name: hb
applications:
  - {name: a, command: [/bin/true], heartbeat_interval_ms: 5}
"""
    with pytest.raises(SpecSchemaError):
        model.parse_workflow(doc)


def test_failure_probability_domain():
    doc = """
name: fp
applications:
  - {name: a, command: [/bin/true], failure_probability: 1.5}
"""
    with pytest.raises(DomainError):
        model.parse_workflow(doc)


def test_usecase1_fixture_counts_match_raw_document():
    # oracle: count entities straight off the bundled document
    raw = yaml.safe_load((fixtures.fixture_root("usecase1") / "workflow.yaml").read_text())
    spec = fixtures.fixture_usecase1()
    assert len(spec.applications) == len(raw["applications"]) == 5
    assert len(spec.channels) == len(raw["channels"]) == 7
    static_checks = [c for s in raw["stages"] if s["kind"] == "static-check"
                     for c in s.get("checks", [])]
    assert len(static_checks) == 12
    assert sum(len(s.checks) for s in spec.stages) == 12


# ---------------------------------------------------------------------------
# canonical serialization

def _identifier():
    return st.from_regex(r"[a-z][a-z0-9_]{0,8}", fullmatch=True)


@st.composite
def workflow_specs(draw):
    n_apps = draw(st.integers(1, 4))
    names = draw(st.lists(_identifier(), min_size=n_apps, max_size=n_apps, unique=True))
    apps = tuple(
        model.ApplicationSpec(
            name=name,
            command=("/bin/true", f"--id={i}"),
            nodes=draw(st.integers(1, 8)),
            heartbeat_interval_ms=draw(st.one_of(st.none(), st.integers(10, 5000))),
            failure_probability=draw(st.floats(0, 1, allow_nan=False)),
            log_paths=tuple(draw(st.lists(_identifier(), max_size=2))),
            critical=draw(st.booleans()),
        )
        for i, name in enumerate(names)
    )
    channels = []
    for cname in draw(st.lists(_identifier(), max_size=3,
                               unique=True)):
        kind = draw(st.sampled_from(model.CHANNEL_KINDS))
        if kind == "steering":
            a = b = draw(st.sampled_from(names))
        elif len(names) < 2:
            continue
        else:
            a, b = draw(st.permutations(names).map(lambda p: (p[0], p[1])))
        channels.append(model.ChannelSpec(cname, a, b, kind,
                                          draw(st.integers(50, 10_000))))
    spec = model.WorkflowSpec(
        name=draw(_identifier()),
        run_defaults=model.RunPolicy(),
        applications=apps,
        channels=tuple(channels),
        stages=model.default_stages(),
    )
    return model.validate_workflow(spec)


@settings(max_examples=40, deadline=None)
@given(workflow_specs())
def test_serialize_parse_round_trip(spec):
    text = model.serialize_workflow(spec)
    again = model.parse_workflow(text)
    assert again == spec
    assert model.serialize_workflow(again) == text  # canonical form is a fixed point


# ---------------------------------------------------------------------------
# failure model

def test_estimate_empty_is_zero():
    assert model.estimate_system_failure([]).system_failure_probability == 0.0


def test_estimate_single_component():
    assert model.estimate_system_failure([0.5]).system_failure_probability == pytest.approx(0.5)


def test_estimate_three_components_hand_value():
    est = model.estimate_system_failure([0.1, 0.1, 0.1])
    assert est.system_failure_probability == pytest.approx(0.271, abs=1e-12)
    assert est.system_failure_probability == pytest.approx(
        enumerated_failure_probability([0.1, 0.1, 0.1]), abs=1e-12)


def test_estimate_rejects_out_of_range():
    with pytest.raises(DomainError):
        model.estimate_system_failure([0.2, 1.2])
    with pytest.raises(DomainError):
        model.estimate_system_failure([-0.1])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1, allow_nan=False), max_size=8))
def test_estimate_matches_enumeration_oracle(probs):
    est = model.estimate_system_failure(probs)
    assert est.system_failure_probability == pytest.approx(
        enumerated_failure_probability(probs), abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=8),
       st.randoms())
def test_estimate_permutation_invariant(probs, rnd):
    shuffled = probs[:]
    rnd.shuffle(shuffled)
    a = model.estimate_system_failure(probs).system_failure_probability
    b = model.estimate_system_failure(shuffled).system_failure_probability
    assert a == pytest.approx(b, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1, allow_nan=False), max_size=6),
       st.floats(0.001, 1, allow_nan=False))
def test_estimate_appending_positive_increases(probs, extra):
    base = model.estimate_system_failure(probs).system_failure_probability
    more = model.estimate_system_failure(probs + [extra]).system_failure_probability
    if base < 1.0 - 1e-9:
        assert more > base
    assert model.estimate_system_failure(probs + [0.0]).system_failure_probability == \
        pytest.approx(base, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=8))
def test_estimate_bounds_and_dominance(probs):
    r = model.estimate_system_failure(probs).system_failure_probability
    assert 0.0 <= r <= 1.0
    assert r >= max(probs) - 1e-12


# ---------------------------------------------------------------------------
# single-node reduction

def test_reduce_forces_all_nodes_to_one():
    spec = model.parse_workflow("""
name: wide
applications:
  - {name: a, command: [/bin/true], nodes: 8}
  - {name: b, command: [/bin/true], nodes: 4}
  - {name: c, command: [/bin/true], nodes: 2}
""")
    reduced = model.reduce_to_single_node(spec)
    assert [a.nodes for a in reduced.applications] == [1, 1, 1]
    assert [s.kind for s in reduced.stages] == ["static-check", "single-node"]


def test_reduce_is_idempotent_and_preserves_names():
    spec = fixtures.fixture_usecase1()
    once = model.reduce_to_single_node(spec)
    twice = model.reduce_to_single_node(once)
    assert once == twice
    assert [a.name for a in once.applications] == [a.name for a in spec.applications]
    assert [c.name for c in once.channels] == [c.name for c in spec.channels]


def test_reduce_usecase1_counts():
    reduced = model.reduce_to_single_node(fixtures.fixture_usecase1())
    assert len(reduced.applications) == 5
    assert len(reduced.channels) == 7
    assert all(a.nodes == 1 for a in reduced.applications)
    # checks preserved verbatim
    assert sum(len(s.checks) for s in reduced.stages) == 12
    model.validate_workflow(reduced, require_full_pipeline=False)


@settings(max_examples=40, deadline=None)
@given(workflow_specs())
def test_reduce_idempotent_property(spec):
    once = model.reduce_to_single_node(spec)
    assert model.reduce_to_single_node(once) == once
    assert {a.name for a in once.applications} == {a.name for a in spec.applications}
    assert {c.name for c in once.channels} == {c.name for c in spec.channels}
