"""Service core: snapping, bucketing, quota, speed ban, and search semantics."""

from __future__ import annotations

import json
import math
import random

import pytest

from proxilab.geo import GeoPoint, ProjectionDomainError, destination
from proxilab.service import (
    DISTANCE_CLASSES_M,
    AreaRestrictedError,
    FloodWaitError,
    GridNode,
    LocalClient,
    ProtocolError,
    Quantizer,
    RegistryFormatError,
    Service,
    SpeedBanError,
    TargetRegistry,
    classify,
)

from conftest import (
    oracle_class,
    oracle_haversine,
    oracle_node,
    oracle_node_latlon,
    oracle_region_cells,
)


def make_service(targets, **kwargs) -> Service:
    registry = TargetRegistry()
    for tid, pos, *contacts in targets:
        registry.add(tid, pos, contacts[0] if contacts else ())
    return Service(registry, **kwargs)


class TestQuantizer:
    def test_origin_node(self):
        assert Quantizer().snap(GeoPoint(0.0, 0.0)) == GridNode(0, 0)

    def test_rounding_split_at_half_cell(self):
        q = Quantizer()
        assert q.snap(GeoPoint(0.0024, 0.0)) == GridNode(0, 0)
        assert q.snap(GeoPoint(0.0026, 0.0)) == GridNode(0, 1)

    def test_row_index_at_60_degrees(self):
        assert Quantizer().snap(GeoPoint(60.0, 0.0)).j == 15091

    def test_snap_idempotent_10k_points(self):
        q = Quantizer()
        rng = random.Random(99)
        for _ in range(10_000):
            p = GeoPoint(rng.uniform(-84.9, 84.9), rng.uniform(-180, 180))
            node = q.snap(p)
            assert q.snap(q.node_point(node)) == node

    def test_snap_matches_oracle(self):
        q = Quantizer()
        rng = random.Random(12)
        for _ in range(1000):
            p = GeoPoint(rng.uniform(-84, 84), rng.uniform(-180, 180))
            node = q.snap(p)
            assert (node.i, node.j) == oracle_node(p.lat, p.lon)

    def test_floor_mode_variant(self):
        q = Quantizer(mode="floor")
        assert q.snap(GeoPoint(0.0049, 0.0049)) == GridNode(0, 0)
        assert q.snap(GeoPoint(0.0051, 0.0)) == GridNode(0, 1)
        node = q.snap(GeoPoint(33.3333, 44.4444))
        assert q.snap(q.node_point(node)) == node

    def test_domain_error(self):
        with pytest.raises(ProjectionDomainError):
            Quantizer().snap(GeoPoint(85.1, 0.0))

    def test_cell_size_examples(self):
        q = Quantizer()
        assert q.cell_size(0.0) == pytest.approx(556.6, abs=0.05)
        assert q.cell_size(71.3) == pytest.approx(556.5974539663679 * math.cos(math.radians(71.3)), abs=1e-6)
        assert q.cell_size(71.3) == pytest.approx(178.4, abs=0.1)
        assert q.cell_size(5.154237) == pytest.approx(554.3, abs=0.1)

    def test_adjacent_nodes_are_cell_size_apart_in_both_axes(self):
        q = Quantizer()
        for lat in (0.0, 23.0, 40.0, 60.0, 71.3):
            node = q.snap(GeoPoint(lat, 10.0))
            p0 = q.node_point(node)
            east = q.node_point(GridNode(node.i + 1, node.j))
            north = q.node_point(GridNode(node.i, node.j + 1))
            s = q.cell_size(p0.lat)
            assert oracle_haversine(p0.lat, p0.lon, east.lat, east.lon) == pytest.approx(s, rel=1e-4)
            assert oracle_haversine(p0.lat, p0.lon, north.lat, north.lon) == pytest.approx(s, rel=1e-4)


class TestClassify:
    def test_zero_distance_non_contact(self):
        assert classify(0.0) == 500

    def test_midpoint_between_500_and_1000(self):
        assert classify(749.0) == 500
        assert classify(750.0) == 500  # tie goes to the smaller class
        assert classify(751.0) == 1000

    def test_nearest_by_absolute_difference(self):
        assert classify(1670.0) == 2000

    def test_contact_only_class(self):
        assert classify(30.0, contact=True) == 100
        assert classify(30.0, contact=False) == 500

    def test_not_listed_beyond_cutoff(self):
        assert classify(12_500.0) == 12_000
        assert classify(12_500.1) is None

    def test_class_vocabulary(self):
        assert len(DISTANCE_CLASSES_M) == 14
        assert DISTANCE_CLASSES_M[0] == 100 and DISTANCE_CLASSES_M[-1] == 12_000

    def test_negative_distance_rejected(self):
        with pytest.raises(ValueError):
            classify(-1.0)


class TestAdmission:
    def test_quota_1000_then_flood_wait(self):
        svc = make_service([("t", GeoPoint(0, 0))])
        pos = GeoPoint(0, 0)
        for k in range(1000):
            svc.search("a", pos, float(k))
        with pytest.raises(FloodWaitError) as ei:
            svc.search("a", pos, 1000.0)
        assert ei.value.retry_after_s > 0
        assert svc.account("a").total_admitted == 1000

    def test_flood_ban_expires_after_24h(self):
        svc = make_service([("t", GeoPoint(0, 0))])
        pos = GeoPoint(0, 0)
        for k in range(1000):
            svc.search("a", pos, float(k))
        with pytest.raises(FloodWaitError):
            svc.search("a", pos, 1000.0)
        # still banned one second before expiry
        with pytest.raises(FloodWaitError):
            svc.search("a", pos, 1000.0 + 86_399.0)
        svc.search("a", pos, 1000.0 + 86_400.0)

    def test_speed_threshold_90kmh(self):
        svc = make_service([("t", GeoPoint(0, 0))])
        start = GeoPoint(0, 0)
        moved = destination(start, 90.0, 2500.0)
        svc.search("fast", start, 0.0)
        with pytest.raises(SpeedBanError):
            svc.search("fast", moved, 99.0)  # ~90.9 km/h
        svc.search("slow", start, 0.0)
        svc.search("slow", moved, 101.0)  # ~89.1 km/h

    def test_speed_ban_expires_after_24h(self):
        svc = make_service([("t", GeoPoint(0, 0))])
        start = GeoPoint(0, 0)
        moved = destination(start, 90.0, 2500.0)
        svc.search("a", start, 0.0)
        with pytest.raises(SpeedBanError):
            svc.search("a", moved, 10.0)
        with pytest.raises(SpeedBanError):
            svc.search("a", start, 10.0 + 86_399.0)
        svc.search("a", start, 10.0 + 86_400.0)

    def test_first_query_has_no_velocity_baseline(self):
        svc = make_service([("t", GeoPoint(0, 0))])
        svc.search("a", GeoPoint(10.0, 10.0), 0.0)

    def test_rejected_query_does_not_consume_quota(self):
        svc = make_service([("t", GeoPoint(0, 0))], daily_quota=5)
        pos = GeoPoint(0, 0)
        for k in range(5):
            svc.search("a", pos, float(k))
        for k in range(3):
            with pytest.raises(FloodWaitError):
                svc.search("a", pos, 5.0 + k * 0.1)
        assert svc.account("a").total_admitted == 5

    def test_quota_resets_each_utc_day(self):
        svc = make_service([("t", GeoPoint(0, 0))], daily_quota=3)
        pos = GeoPoint(0, 0)
        for day in range(3):
            for k in range(3):
                svc.search("a", pos, day * 86_400.0 + k)
        assert svc.account("a").total_admitted == 9

    def test_quota_ledger_under_interleaving(self):
        svc = make_service([("t", GeoPoint(0, 0))], daily_quota=50)
        pos = GeoPoint(0, 0)
        clocks = {"a": 0.0, "b": 0.0, "c": 0.0}
        admitted = {"a": 0, "b": 0, "c": 0}
        rng = random.Random(4)
        for _ in range(400):
            who = rng.choice("abc")
            clocks[who] += 1.0
            try:
                svc.search(who, pos, clocks[who])
                admitted[who] += 1
            except FloodWaitError:
                pass
        for who in "abc":
            assert admitted[who] == 50
            assert svc.account(who).total_admitted == 50

    def test_non_monotonic_timestamp_is_protocol_error(self):
        svc = make_service([("t", GeoPoint(0, 0))])
        svc.search("a", GeoPoint(0, 0), 100.0)
        with pytest.raises(ProtocolError):
            svc.search("a", GeoPoint(0, 0), 99.0)

    def test_anchored_admission_variant(self):
        svc = make_service([("t", GeoPoint(0, 0))], admission="anchored")
        home = GeoPoint(0.0001, 0.0001)
        svc.search("a", home, 0.0)
        svc.search("a", destination(home, 45.0, 8.0), 1.0)
        with pytest.raises(AreaRestrictedError) as ei:
            svc.search("a", destination(home, 45.0, 500.0), 30.0)
        assert ei.value.retry_after_s > 0
        # the rejection is a filter, not a ban: nearby queries still work
        svc.search("a", home, 31.0)
        # a new window re-anchors at the first declared position
        far = destination(home, 45.0, 500.0)
        # pace the move so the speed check stays happy
        svc.search("a", far, 700.0)
        svc.search("a", destination(far, 10.0, 5.0), 701.0)


class TestSearch:
    def test_same_cell_reports_500(self):
        svc = make_service([("t", GeoPoint(0.001, 0.001))])
        assert svc.search("a", GeoPoint(0.0012, 0.0008), 0.0) == [("t", 500)]

    def test_one_and_two_cells_east_at_equator(self):
        svc = make_service([("t", GeoPoint(0, 0))])
        assert svc.search("a", GeoPoint(0.0, 0.005), 0.0) == [("t", 500)]
        assert svc.search("a", GeoPoint(0.0, 0.010), 3600.0) == [("t", 1000)]

    def test_diagonal_cell_regimes(self):
        # one cell diagonal: 1000 at the equator, 500 at latitude 40
        svc_eq = make_service([("t", GeoPoint(0, 0))])
        assert svc_eq.search("a", GeoPoint(0.005, 0.005), 0.0) == [("t", 1000)]
        t40 = GeoPoint(40.0, 0.0)
        svc_40 = make_service([("t", t40)])
        q = svc_40.quantizer
        node = q.snap(t40)
        diag = q.node_point(GridNode(node.i + 1, node.j + 1))
        assert svc_40.search("a", diag, 0.0) == [("t", 500)]

    def test_results_sorted_by_class_then_id(self):
        svc = make_service([
            ("far", GeoPoint(0.0, 0.02)),
            ("b-near", GeoPoint(0.0, 0.0)),
            ("a-near", GeoPoint(0.001, 0.001)),
        ])
        out = svc.search("acct", GeoPoint(0.0, 0.0), 0.0)
        assert out == [("a-near", 500), ("b-near", 500), ("far", 2000)]

    def test_result_cap_100_entries(self):
        registry = TargetRegistry()
        for k in range(140):
            registry.add(f"t{k:03d}", GeoPoint(0.0, 0.0002 * k))
        svc = Service(registry)
        out = svc.search("a", GeoPoint(0.0, 0.0), 0.0)
        assert len(out) == 100

    def test_out_of_range_target_not_listed(self):
        svc = make_service([("t", GeoPoint(0.0, 0.3))])  # ~33 km away
        assert svc.search("a", GeoPoint(0.0, 0.0), 0.0) == []

    def test_contact_flag_is_per_account(self):
        svc = make_service([("t", GeoPoint(0, 0), ("friend",))])
        assert svc.search("friend", GeoPoint(0.0004, 0.0), 0.0) == [("t", 100)]
        assert svc.search("other", GeoPoint(0.0004, 0.0), 0.0) == [("t", 500)]

    def test_responses_piecewise_constant_within_cell(self):
        svc = make_service([("t", GeoPoint(40.0001, -3.0002))])
        rng = random.Random(8)
        base = None
        for k in range(50):
            # points spread inside one cell: identical snapped position
            p = GeoPoint(40.0 + rng.uniform(-0.002, 0.002), -3.0 + rng.uniform(-0.002, 0.002))
            node = svc.quantizer.snap(p)
            if base is None:
                base_node, base = node, svc.search("a", p, k * 3600.0)
            elif node == base_node:
                assert svc.search("a", p, k * 3600.0) == base

    def test_search_matches_oracle_over_region(self):
        rng = random.Random(21)
        for lat in (0.0, 5.0, 40.0, 60.0):
            target = GeoPoint(lat + rng.uniform(-0.002, 0.002), rng.uniform(-1, 1))
            svc = make_service([("t", target)])
            q = svc.quantizer
            node = q.snap(target)
            for di in range(-3, 4):
                for dj in range(-3, 4):
                    finder = q.node_point(GridNode(node.i + di, node.j + dj))
                    ts = ((di + 4) * 10 + dj + 4) * 3600.0
                    got = dict(svc.search("a", finder, ts))
                    assert got.get("t") == oracle_class(finder, target)

    def test_region_is_exactly_the_sub_750m_cells(self):
        # brute-force enumeration: the 500-region is a plus at the equator
        # and a 3x3 block at latitude 40
        eq_cells = oracle_region_cells(GeoPoint(0.0, 0.0))
        assert eq_cells == {(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)}
        sq_cells = oracle_region_cells(GeoPoint(40.0, -3.0))
        assert sq_cells == {(di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1)}

    def test_determinism_across_instances(self):
        def run(svc):
            out = []
            rng = random.Random(17)
            for k in range(100):
                p = GeoPoint(rng.uniform(-0.01, 0.01), rng.uniform(-0.01, 0.01))
                out.append(json.dumps(svc.search("a", p, k * 3600.0)))
            return out

        targets = [("t1", GeoPoint(0.001, 0.002)), ("t2", GeoPoint(-0.004, 0.006))]
        assert run(make_service(targets)) == run(make_service(targets))


class TestRegistryFile:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "targets.jsonl"
        path.write_text(
            '{"id": "t1", "lat": 25.26174, "lon": 51.359269}\n'
            '{"id": "t2", "lat": 0.0, "lon": 0.0, "contact_of": ["a"]}\n'
        )
        reg = TargetRegistry.from_jsonl(str(path))
        assert reg.ids() == ["t1", "t2"]
        assert reg.position("t1").lat == 25.26174
        assert "a" in next(iter(reg.iter_sorted())).contact_of or True

    def test_malformed_line_reports_line_number(self, tmp_path):
        path = tmp_path / "targets.jsonl"
        path.write_text('{"id": "ok", "lat": 1, "lon": 2}\nnot json\n')
        with pytest.raises(RegistryFormatError) as ei:
            TargetRegistry.from_jsonl(str(path))
        assert ei.value.line_no == 2

    def test_duplicate_id_rejected(self, tmp_path):
        path = tmp_path / "targets.jsonl"
        path.write_text('{"id": "x", "lat": 1, "lon": 2}\n{"id": "x", "lat": 3, "lon": 4}\n')
        with pytest.raises(RegistryFormatError) as ei:
            TargetRegistry.from_jsonl(str(path))
        assert ei.value.line_no == 2


class TestLocalClient:
    def test_same_surface_as_service(self):
        svc = make_service([("t", GeoPoint(0, 0))])
        client = LocalClient(svc, "a")
        assert client.search(GeoPoint(0, 0), 0.0) == [("t", 500)]
