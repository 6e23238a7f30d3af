"""Report emission: deterministic bytes, schemas, and the arch diagram."""

import csv

import numpy as np
import pytest

from sslnas.analysis import ResultTable, build_correlation_matrix
from sslnas.errors import DomainError
from sslnas.report import emit_report, render_arch_svg
from sslnas.space import MBCONV_CANDIDATES, arch_from_choices, build_default_space

from conftest import rng_for_test


def small_table() -> ResultTable:
    rng = rng_for_test("report-table")
    return ResultTable(
        models=tuple(f"model_{i}" for i in range(6)),
        datasets=("alpha", "beta", "gamma"),
        accuracy=rng.uniform(0.2, 0.9, size=(6, 3)),
        params=tuple(int(x) for x in rng.integers(1e5, 1e7, size=6)),
        ratios=tuple(float(x) for x in rng.uniform(0.5, 4.0, size=6)),
    )


class TestEmitReport:
    def test_writes_expected_files(self, tmp_path):
        table = small_table()
        report = build_correlation_matrix(table)
        written = emit_report(report, table, tmp_path)
        names = {p.name for p in written}
        assert "results.csv" in names
        assert "corr.csv" in names
        assert "heatmap_spearman.svg" in names
        assert "heatmap_pearson.svg" in names
        # three dataset pairs -> three scatter plots
        assert sum(1 for n in names if n.startswith("scatter_")) == 3

    def test_csv_schemas(self, tmp_path):
        table = small_table()
        report = build_correlation_matrix(table)
        emit_report(report, table, tmp_path)
        with open(tmp_path / "results.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert set(rows[0].keys()) == {"model", "dataset", "top1", "params", "ratio"}
        assert len(rows) == 6 * 3
        with open(tmp_path / "corr.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert set(rows[0].keys()) == {"dataset_a", "dataset_b", "spearman", "pearson", "n"}
        assert len(rows) == 3
        assert all(int(r["n"]) == 6 for r in rows)

    def test_deterministic_bytes(self, tmp_path):
        table = small_table()
        report = build_correlation_matrix(table)
        first = emit_report(report, table, tmp_path / "a")
        second = emit_report(report, table, tmp_path / "b")
        for pa, pb in zip(sorted(first), sorted(second)):
            assert pa.name == pb.name
            assert pa.read_bytes() == pb.read_bytes(), pa.name

    def test_empty_table_rejected(self, tmp_path):
        table = small_table()
        report = build_correlation_matrix(table)
        empty = ResultTable(models=(), datasets=table.datasets,
                            accuracy=np.zeros((0, 3)), params=(), ratios=())
        with pytest.raises(DomainError):
            emit_report(report, empty, tmp_path)


class TestArchDiagram:
    def test_all_heavy_ops_diagram_shows_21_cells_in_6_stages(self, tmp_path):
        space = build_default_space(1.75)
        arch = arch_from_choices(space, [MBCONV_CANDIDATES[5]] * space.total_cells)
        path = tmp_path / "arch.svg"
        render_arch_svg(arch, path)
        text = path.read_text()
        assert text.count("MB6 7x7") == 21
        # stage tags 1..6 appear under the boxes
        for stage in range(1, 7):
            assert f">{stage}<" in text or f">{stage}</" in text

    def test_zero_cells_render_as_skip(self, tmp_path):
        from sslnas.space import ZERO_OP, enumerate_cells

        space = build_default_space(1.0)
        ops = [ZERO_OP if info.allows_zero else MBCONV_CANDIDATES[0] for info in enumerate_cells(space)]
        arch = arch_from_choices(space, ops)
        path = tmp_path / "arch.svg"
        render_arch_svg(arch, path)
        assert path.read_text().count("skip") == 15

    def test_family_variants_render(self, tmp_path):
        from sslnas.space import canonical_resnet18, canonical_mobilenet_v2

        render_arch_svg(canonical_resnet18(), tmp_path / "r18.svg")
        render_arch_svg(canonical_mobilenet_v2(), tmp_path / "mnv2.svg")
        assert (tmp_path / "r18.svg").stat().st_size > 0
        assert (tmp_path / "mnv2.svg").read_text().count("MB6 3x3") == 16

    def test_diagram_matches_serialized_op_sequence(self, tmp_path):
        """The JSON cell sequence and the rendered diagram agree op-for-op."""
        from sslnas.space import parse_arch, serialize_arch
        from conftest import random_choices, rng_for_test

        space = build_default_space(1.0)
        arch = arch_from_choices(space, random_choices(space, rng_for_test("diagram-seq")))
        round_tripped = parse_arch(serialize_arch(arch))
        path = tmp_path / "arch.svg"
        render_arch_svg(round_tripped, path)
        svg = path.read_text()
        labels = [c.op.label() if c.op.kind != "Zero" else "skip" for c in round_tripped.cells]
        # stage-ordered cells; every op label shows up as often as it is placed
        assert [c.stage for c in round_tripped.cells] == sorted(c.stage for c in round_tripped.cells)
        for label in set(labels):
            assert svg.count(f">{label}<") == labels.count(label)
