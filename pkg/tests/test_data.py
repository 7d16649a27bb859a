import json
import math

import numpy as np
import pytest

from aesmpn.data import (
    REGIME_CAPACITIES,
    REGIME_RANGES,
    DatasetError,
    FlowSpec,
    GenerationError,
    GeneratorConfig,
    NormalizationSpec,
    TopologySpec,
    build_sample,
    denormalize,
    flow_delays,
    flows_of,
    generate_synthetic,
    link_delays,
    load_dataset,
    mm1_sojourn,
    normalize,
    sample_to_record,
    save_dataset,
    service_rate,
    shortest_path,
    split_dataset,
    validate_sample,
)
from aesmpn.model import SampleError


@pytest.fixture(scope="module")
def generated():
    return generate_synthetic(GeneratorConfig(samples=25, seed=4))


def _one_link(capacity=10e9, flows=((5e5, 10000.0),)):
    topo = TopologySpec(2, [(0, 1, capacity)], [((0, 1), capacity)])
    specs = [FlowSpec(0, 1, pr * ps, pr, ps, "CBR", [(0, 0)]) for pr, ps in flows]
    return topo, specs


class TestQueueingOracle:
    def test_single_link_closed_form(self):
        topo, flows = _one_link()
        assert service_rate(10e9, 10000.0) == 1e6
        np.testing.assert_allclose(link_delays(topo, flows), [2e-6], rtol=1e-12)
        np.testing.assert_allclose(flow_delays(topo, flows), [2e-6], rtol=1e-12)

    def test_light_load_limit(self):
        assert mm1_sojourn(1e6, 1e-3) == pytest.approx(1e-6, rel=1e-8)

    def test_unstable_queue_rejected(self):
        with pytest.raises(ValueError):
            mm1_sojourn(1.0, 1.0)

    def test_mean_packet_size_is_packet_weighted(self):
        topo, flows = _one_link(flows=((1e5, 8000.0), (3e5, 12000.0)))
        mean_size = (1e5 * 8000.0 + 3e5 * 12000.0) / 4e5
        expected = 1.0 / (10e9 / mean_size - 4e5)
        np.testing.assert_allclose(link_delays(topo, flows), [expected], rtol=1e-12)

    def test_delay_increases_with_load(self, generated):
        for sample in generated[:10]:
            topo, flows = sample.topology, flows_of(sample)
            base = flow_delays(topo, flows)
            # scaling every flow keeps each link's mean packet size, so only lambda moves
            for spec in flows:
                spec.packet_rate *= 1.01
                spec.traffic_rate *= 1.01
            assert (flow_delays(topo, flows) > base).all()

    def test_sojourn_monotone_in_arrival_rate(self):
        lams = np.linspace(0.0, 0.99e6, 200)
        w = [mm1_sojourn(1e6, lam) for lam in lams]
        assert all(a < b for a, b in zip(w, w[1:]))


class TestGenerator:
    def test_generated_targets_match_oracle(self, generated):
        for s in generated:
            np.testing.assert_allclose(s.targets, flow_delays(s.topology, flows_of(s)), rtol=1e-12)
            assert (s.targets > 0).all() and np.isfinite(s.targets).all()

    def test_utilisation_bound(self, generated):
        for s in generated:
            bits = np.zeros(s.num_l3)
            for f, path in enumerate(s.paths):
                for _, l3 in path:
                    bits[l3] += s.flow_features[f, 0]
            assert (bits < 0.9 * s.l3_features[:, 0]).all()

    def test_strict_validation_accepts_everything_generated(self, generated):
        for s in generated:
            validate_sample(s, strict=True, edge_mode="directed")

    def test_regime(self, generated):
        for s in generated:
            assert 5 <= s.topology.nodes <= 8
            assert 10 <= s.topology.directed_edge_count() <= 26
            assert set(s.l3_features[:, 0]) <= set(REGIME_CAPACITIES)

    def test_paths_follow_links(self, generated):
        for s in generated:
            links = s.topology.l3_links
            for (src, dst), path in zip(s.flow_endpoints, s.paths):
                hops = [links[l3] for _, l3 in path]
                assert hops[0][0] == src and hops[-1][1] == dst
                assert all(a[1] == b[0] for a, b in zip(hops, hops[1:]))

    def test_same_seed_same_bytes(self, tmp_path):
        cfg = GeneratorConfig(samples=5, seed=9)
        save_dataset(generate_synthetic(cfg), tmp_path / "a.jsonl")
        save_dataset(generate_synthetic(cfg), tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_infeasible_load_gives_up(self):
        cfg = GeneratorConfig(samples=1, rho_max=1e-6, flows_min=10, flows_max=10, max_retries=3)
        with pytest.raises(GenerationError):
            generate_synthetic(cfg)

    @pytest.mark.parametrize("rho", [0.0, 1.0, 1.5])
    def test_rho_bounds(self, rho):
        with pytest.raises(ValueError):
            GeneratorConfig(rho_max=rho)

    def test_shortest_path_tie_break(self):
        adj = {0: [2, 1], 1: [3], 2: [3], 3: []}
        assert shortest_path(adj, 0, 3) == [0, 1, 3]


class TestSerialization:
    def test_round_trip(self, generated, tmp_path):
        save_dataset(generated, tmp_path / "d.jsonl")
        loaded = load_dataset(tmp_path / "d.jsonl")
        assert [sample_to_record(s) for s in loaded] == [sample_to_record(s) for s in generated]

    def test_empty_file_warns(self, tmp_path):
        (tmp_path / "e.jsonl").write_text("")
        with pytest.warns(UserWarning):
            assert load_dataset(tmp_path / "e.jsonl") == []

    def test_bad_path_index_names_line_and_flow(self, generated, tmp_path):
        rec = sample_to_record(generated[0])
        rec["flows"][1]["path"][0] = [999, 999]
        lines = [json.dumps(sample_to_record(generated[1])), json.dumps(rec)]
        (tmp_path / "bad.jsonl").write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetError, match=r"bad\.jsonl:2:.*flow 1"):
            load_dataset(tmp_path / "bad.jsonl")

    def test_malformed_json(self, tmp_path):
        (tmp_path / "m.jsonl").write_text("{not json\n")
        with pytest.raises(DatasetError, match=":1:"):
            load_dataset(tmp_path / "m.jsonl")

    def test_schema_version_required(self, generated, tmp_path):
        rec = sample_to_record(generated[0])
        rec["schema_version"] = 7
        (tmp_path / "v.jsonl").write_text(json.dumps(rec) + "\n")
        with pytest.raises(DatasetError):
            load_dataset(tmp_path / "v.jsonl")


class TestValidation:
    def test_capacity_outside_regime(self, generated):
        s = generated[0]
        bad = build_sample(
            TopologySpec(s.topology.nodes, [(a, b, 3e9) for a, b, _ in s.topology.l3_links], s.topology.l2_links),
            flows_of(s),
        )
        validate_sample(bad)
        with pytest.raises(SampleError, match="capacity"):
            validate_sample(bad, strict=True)

    def test_edge_mode(self):
        # 5 nodes, 6 node pairs both ways: 12 directed edges, 6 undirected
        pairs = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (0, 2)]
        l3 = [(a, b, 1e9) for u, v in pairs for a, b in ((u, v), (v, u))]
        topo = TopologySpec(5, l3, [((a, b), c) for a, b, c in l3])
        flow = FlowSpec(0, 1, 1e7, 1e7 / 8000.0, 8000.0, "CBR", [(0, 0)], 1e-5)
        s = build_sample(topo, [flow])
        validate_sample(s, strict=True, edge_mode="directed")
        validate_sample(s, strict=True, edge_mode="either")
        with pytest.raises(SampleError, match="edge count"):
            validate_sample(s, strict=True, edge_mode="undirected")


class TestNormalization:
    def test_range_endpoints(self):
        spec = NormalizationSpec()
        lo, hi = REGIME_RANGES["packet_size"]
        assert (lo, hi) == (824.0, 11552.0)
        topo, flows = _one_link(capacity=1e9, flows=((1e4, 824.0), (1e4, 11552.0)))
        for f, d in zip(flows, flow_delays(topo, flows)):
            f.delay = float(d)
        n = normalize(build_sample(topo, flows), spec)
        np.testing.assert_array_equal(n.flow_features[:, 2], [0.0, 1.0])
        np.testing.assert_array_equal(n.l3_features[:, 0], [0.0])

    def test_inverse_within_1e12(self, generated):
        spec = NormalizationSpec().with_delay_scale(generated)
        for s in generated:
            back = denormalize(normalize(s, spec), spec)
            for a, b in ((back.flow_features, s.flow_features), (back.l3_features, s.l3_features), (back.targets, s.targets)):
                np.testing.assert_allclose(a, b, rtol=1e-12, atol=0)

    def test_strict_range(self, generated):
        spec = NormalizationSpec(ranges={**REGIME_RANGES, "capacity": (2e9, 80e9)})
        with pytest.raises(SampleError, match="capacity"):
            for s in generated:
                normalize(s, spec, strict=True)

    def test_spec_file_round_trip(self, tmp_path, generated):
        spec = NormalizationSpec().with_delay_scale(generated)
        spec.save(tmp_path / "n.json")
        again = NormalizationSpec.load(tmp_path / "n.json")
        assert again.ranges == spec.ranges and again.delay_scale == spec.delay_scale

    def test_degenerate_range_rejected(self):
        with pytest.raises(ValueError):
            NormalizationSpec(ranges={"capacity": (1.0, 1.0)})

    def test_delay_scale_is_mean_delay(self, generated):
        spec = NormalizationSpec().with_delay_scale(generated)
        assert math.isclose(spec.delay_scale, np.concatenate([s.targets for s in generated]).mean(), rel_tol=1e-15)


class TestSplit:
    def test_sizes(self):
        parts = split_dataset(list(range(10)), (0.8, 0.1, 0.1), seed=0)
        assert [len(p) for p in parts] == [8, 1, 1]

    def test_disjoint_and_seeded(self):
        items = list(range(57))
        a = split_dataset(items, seed=5)
        assert a == split_dataset(items, seed=5)
        flat = [x for part in a for x in part]
        assert len(flat) == len(set(flat))
        assert set(flat) <= set(items)

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            split_dataset([1, 2], seed=0)

    def test_bad_fractions(self):
        with pytest.raises(ValueError):
            split_dataset(list(range(10)), (0.8, 0.5), seed=0)
