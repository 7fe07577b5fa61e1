import pytest
from hypothesis import given
from hypothesis import strategies as st

from foundry import pipeline
from foundry.alloc import RegionConfig
from foundry.errors import WorkloadSpecError
from foundry.graph import NodeType
from foundry.workload import (
    PRESETS,
    WorkloadSpec,
    feature_mask,
    generate,
    load_spec,
    parse_spec_text,
    preset,
    variant_ranges,
)

FOUR_THRESHOLDS = WorkloadSpec(
    name="four", seed=5, max_batch=512, layers=1, thresholds=(32, 64, 128, 256),
    kv_cache_bytes=1 << 20, weight_bytes_per_layer=64 << 10, scratch_bytes_per_seq=64,
)


def _shape(g):
    """Structure compared field by field, without the topology key."""
    kernels = tuple(
        (n.type, n.attrs if n.type == NodeType.KERNEL else None) for n in g.nodes
    )
    return kernels, tuple(sorted(g.edges))


def test_four_thresholds_give_five_groups_by_brute_force():
    saved = pipeline.capture(FOUR_THRESHOLDS)
    classes = {}
    for g in saved.graphs:
        classes.setdefault(_shape(g), []).append(g.label)
    sizes = sorted(len(v) for v in classes.values())
    assert sizes == sorted([31, 32, 64, 128, 257])
    assert sorted((min(v), max(v)) for v in classes.values()) == [(1, 31), (32, 63), (64, 127), (128, 255), (256, 512)]
    assert saved.grouping.template_count == 5


def test_expected_outcome_matches_capture():
    spec = preset("micro")
    saved = pipeline.capture(spec)
    exp = generate(spec).expected(saved.config.granularity)
    assert exp.group_count == saved.grouping.template_count
    assert exp.final_offset == saved.final_offset
    assert {g.label: len(g.nodes) for g in saved.graphs} == exp.node_counts
    assert exp.graph_count == len(saved.graphs) == spec.max_batch


def test_capture_is_deterministic():
    a = pipeline.capture(preset("micro"))
    b = pipeline.capture(preset("micro"))
    assert a.graphs == b.graphs
    assert a.alloc_records == b.alloc_records
    assert a.catalog.to_bytes() == b.catalog.to_bytes()


def test_capture_allocates_largest_batch_first():
    saved = pipeline.capture(preset("micro"))
    window = saved.window_log.records
    assert [r.size for r in window] == sorted((r.size for r in window), reverse=True)


def test_batch1_specialization_adds_a_range():
    spec = WorkloadSpec(max_batch=8, thresholds=(4,), batch1_specialization=True)
    assert variant_ranges(spec) == [(1, 1), (2, 3), (4, 8)]
    gen = generate(spec)
    assert gen.node_count(1) == gen.node_count(2) + spec.layers


@given(st.integers(0, 1000))
def test_neighbouring_variants_differ_in_one_feature(v):
    assert bin(feature_mask(v) ^ feature_mask(v + 1)).count("1") == 1


def test_spec_text_and_presets(tmp_path):
    spec = parse_spec_text(
        """
        # comment
        preset = micro
        layers = 3
        thresholds = 2, 5
        batch1_specialization = yes
        """
    )
    assert (spec.name, spec.layers, spec.thresholds, spec.batch1_specialization) == ("micro", 3, (2, 5), True)
    path = tmp_path / "w.spec"
    path.write_text("max_batch = 16\nthresholds = 8\n")
    assert load_spec(str(path)).max_batch == 16
    assert load_spec("dense-small") is PRESETS["dense-small"]
    for spec in PRESETS.values():
        assert WorkloadSpec.from_dict(spec.to_dict()) == spec
        assert spec.digest() == WorkloadSpec.from_dict(spec.to_dict()).digest()


@pytest.mark.parametrize(
    "text",
    [
        "layers = 0",
        "kernels_per_layer = 3",
        "thresholds = 4 2",
        "max_batch = 4\nthresholds = 9",
        "comm_mode = ring",
        "collectives_per_layer = 2",
        "comm_mode = spmd",
        "stage_divergent = true",
        "bogus = 1",
        "layers = many",
        "layers 3",
        "layers = 2\nlayers = 3",
        "preset = huge",
    ],
)
def test_bad_specs_are_rejected(text):
    with pytest.raises(WorkloadSpecError):
        parse_spec_text(text)


def test_unknown_workload_reference():
    with pytest.raises(WorkloadSpecError):
        load_spec("no-such-preset-or-file")


def test_stage_divergent_refused_before_capture():
    with pytest.raises(WorkloadSpecError, match="stage-divergent"):
        pipeline.capture(WorkloadSpec(stage_divergent=True))


def test_presets_fit_the_default_region():
    for spec in PRESETS.values():
        exp = generate(spec).expected(RegionConfig().granularity)
        assert exp.final_offset < RegionConfig().capacity
