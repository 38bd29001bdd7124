import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from carm_route.instances import (
    ALL_VARIANTS,
    MB_VARIANTS,
    MVMOE_VARIANTS,
    EmptyInstanceError,
    InstanceBatch,
    InstanceParseError,
    VariantSpec,
    VrpInstance,
    deserialize_instances,
    generate_dataset,
    generate_instance,
    instance_seeds,
    parse_variant,
    serialize_instances,
    validate_instance,
)


def test_variant_family_sizes():
    assert len(MVMOE_VARIANTS) == 16 and len(MB_VARIANTS) == 8 and len(ALL_VARIANTS) == 24
    combos = {(v.open_route, v.backhaul, v.duration_limit, v.time_windows) for v in MVMOE_VARIANTS}
    assert len(combos) == 16
    assert all(v.backhaul in ("none", "classic") for v in MVMOE_VARIANTS)
    assert all(v.backhaul == "mixed" and v.protocol == "routefinder" for v in MB_VARIANTS)


def test_mixed_backhaul_requires_routefinder():
    with pytest.raises(ValueError):
        VariantSpec(backhaul="mixed", protocol="mvmoe")


@pytest.mark.parametrize("token,name", [("cvrp", "CVRP"), ("ocvrpbltw", "OCVRPBLTW"), ("cvrpmb", "CVRPMB"),
                                        ("ocvrpmbltw", "OCVRPMBLTW")])
def test_parse_variant_round_trips_names(token, name):
    spec = parse_variant(token)
    assert spec.name == name and spec.token == token


def test_unknown_token_lists_valid_ones():
    with pytest.raises(ValueError, match="cvrptw"):
        parse_variant("vrpx")


def test_cvrp_capacity_and_demands():
    inst = generate_instance(parse_variant("cvrp"), 100, 5)
    assert inst.capacity == 50
    assert set(np.unique(inst.demands)) <= set(range(1, 10))


def test_mvmoe_tw_depot_window_and_service():
    inst = generate_instance(parse_variant("cvrptw"), 17, 3)
    assert tuple(inst.windows[0]) == (0.0, 3.0)
    assert inst.service_times[0] == 0.0
    assert np.all(inst.service_times[1:] == 0.2)


def test_mvmoe_backhaul_count():
    inst = generate_instance(parse_variant("cvrpb"), 10, 11)
    assert inst.backhaul_flags.sum() == 2
    assert np.array_equal(inst.backhaul_flags, inst.demands < 0)


def test_empty_instance_rejected():
    with pytest.raises(EmptyInstanceError):
        generate_instance(parse_variant("cvrp"), 0, 1)


@pytest.mark.parametrize("spec", ALL_VARIANTS, ids=lambda s: f"{s.name}-{s.protocol}")
def test_generated_instances_validate(spec):
    for inst in generate_dataset(spec, 20, 20, 9):
        assert validate_instance(inst) == []


def test_generator_determinism_and_seed_splitting():
    spec = parse_variant("ocvrpltw")
    a = generate_dataset(spec, 12, 5, 42)
    b = generate_dataset(spec, 12, 5, 42)
    assert a == b
    seeds = instance_seeds(42, 5)
    assert len(set(seeds)) == 5
    assert generate_dataset(spec, 12, 5, 43) != a


def test_mvmoe_windows_support_direct_round_trip():
    customers = 0
    for inst in generate_dataset(parse_variant("cvrptw"), 100, 100, 0):
        w, s = inst.windows, inst.service_times
        d0 = np.hypot(*(inst.coords - inst.depot).T)
        assert np.all(w[1:, 0] <= w[1:, 1])
        assert np.all(w[1:, 0] + s[1:] + d0 <= 3.0 + 1e-12)
        customers += inst.n
    assert customers == 10_000


def test_routefinder_backhaul_frequency():
    flags = np.concatenate([inst.backhaul_flags for inst in
                            generate_dataset(parse_variant("cvrpb", "routefinder"), 100, 100, 0)])
    assert flags.size == 10_000
    assert 0.17 <= flags.mean() <= 0.23
    inst = generate_instance(parse_variant("cvrpb", "routefinder"), 30, 1)
    assert np.all(inst.demands > 0)


def test_routefinder_limit_range():
    for inst in generate_dataset(parse_variant("cvrpl", "routefinder"), 20, 50, 4):
        d0 = np.hypot(*(inst.coords - inst.depot).T)
        assert 2 * d0.max() <= inst.duration_limit <= 3.0


def test_validate_flags_bad_demand():
    inst = generate_instance(parse_variant("cvrp"), 5, 1)
    inst.demands[2] = 12
    errs = validate_instance(inst)
    assert len(errs) == 1 and "demand bound" in errs[0]


def test_validate_flags_window_past_depot_close():
    inst = generate_instance(parse_variant("cvrptw"), 5, 1)
    inst.windows[3, 1] = 3.5
    assert any("window exceeds depot close" in e for e in validate_instance(inst))


def test_jsonl_round_trip_is_bit_exact(tmp_path):
    insts = [generate_instance(spec, 7, 3) for spec in ALL_VARIANTS]
    path = tmp_path / "d.jsonl"
    serialize_instances(insts, path)
    back = deserialize_instances(path)
    assert back == insts
    for a, b in zip(insts, back):
        np.testing.assert_array_equal(a.coords, b.coords)
    keys = set(json.loads(path.read_text().splitlines()[0]))
    assert {"variant", "seed", "depot", "coords", "demands", "capacity", "windows", "service_times",
            "duration_limit", "backhaul_flags"} <= keys


def test_empty_file_gives_empty_list(tmp_path):
    path = tmp_path / "e.jsonl"
    path.write_text("")
    assert deserialize_instances(path) == []


def test_corrupted_demand_names_field_and_line(tmp_path):
    inst = generate_instance(parse_variant("cvrp"), 4, 1)
    doc = inst.to_json()
    doc["demands"] = ["x", 1, 2, 3]
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps(inst.to_json()) + "\n" + json.dumps(doc) + "\n")
    with pytest.raises(InstanceParseError, match=r"line 2.*demands"):
        deserialize_instances(path)


def test_invalid_json_reports_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text("{not json\n")
    with pytest.raises(InstanceParseError, match="line 1"):
        deserialize_instances(path)


@given(st.sampled_from(ALL_VARIANTS), st.integers(1, 30), st.integers(0, 2**32))
def test_batch_matches_instances(spec, n, seed):
    inst = generate_instance(spec, n, seed)
    batch = InstanceBatch.from_instances([inst])
    np.testing.assert_array_equal(batch.coords[0], inst.locations)
    np.testing.assert_array_equal(batch.quantity[0, 1:], np.abs(inst.demands))
    assert batch.horizon[0] == inst.horizon
    if spec.duration_limit:
        assert batch.limit[0] == inst.duration_limit
    else:
        assert math.isinf(batch.limit[0])


@given(st.sampled_from(ALL_VARIANTS), st.integers(1, 25), st.integers(0, 2**32))
def test_generator_always_valid(spec, n, seed):
    assert validate_instance(generate_instance(spec, n, seed)) == []


def test_batch_rejects_mixed_variants():
    a = generate_instance(parse_variant("cvrp"), 5, 1)
    b = generate_instance(parse_variant("ocvrp"), 5, 1)
    with pytest.raises(ValueError):
        InstanceBatch.from_instances([a, b])


def test_instance_equality_is_value_based():
    a = generate_instance(parse_variant("cvrpl"), 5, 1)
    b = VrpInstance.from_json(json.loads(json.dumps(a.to_json())))
    assert a == b
    c = a.with_coords(a.depot, a.coords * 0.5)
    assert a != c
