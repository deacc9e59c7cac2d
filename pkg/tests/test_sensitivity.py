import numpy as np
import pandas as pd
import pytest

from tests.helpers import make_feeder
from voltreg.clustering import auto_partition, make_partition, partition_from_clusters
from voltreg.errors import PhaseError, ScopeError, UnknownNode
from voltreg.powerflow import nonlinear_solve
from voltreg.sensitivity import (
    PathImpedanceTable,
    build_multi_phase,
    build_sensitivity,
    build_single_phase,
    common_path_impedance,
    diagonal_only,
    dump_matrix_csv,
    lca_matrix,
    block_structure_check,
)
from voltreg.synthetic import generate_feeder


def _brute_force_z(feeder, i, j):
    """Sum the impedance of every line lying on both slack paths."""
    def path(node):
        lines = set()
        while node:
            lines.add(node)
            node = feeder.parent[node]
        return lines

    total = np.zeros((3, 3), dtype=complex)
    for node in path(i) & path(j):
        total += feeder.line_into[node].full_matrix()
    return total


class TestCommonPath:
    def test_line3(self, line3):
        feeder = line3.feeder
        assert common_path_impedance(feeder, 1, 2)[0, 0] == pytest.approx(0.1 + 0.1j)
        assert common_path_impedance(feeder, 2, 2)[0, 0] == pytest.approx(0.3 + 0.3j)

    def test_disjoint_branches(self):
        feeder = make_feeder([0, 0])
        assert common_path_impedance(feeder, 1, 2)[0, 0] == 0

    def test_slack_is_rejected(self, line3):
        with pytest.raises(UnknownNode):
            common_path_impedance(line3.feeder, 0, 1)

    def test_lca_matrix_matches_pairwise_lca(self, binary63):
        feeder = binary63.feeder
        ancestors = lca_matrix(feeder)
        for i in range(0, feeder.n_nodes, 5):
            for j in range(0, feeder.n_nodes, 3):
                assert ancestors[i, j] == feeder.lca(i, j)


class TestBuilders:
    def test_line3(self, line3):
        pack = build_single_phase(line3.feeder)
        np.testing.assert_allclose(pack.R, [[0.2, 0.2], [0.2, 0.6]])
        np.testing.assert_allclose(pack.X, [[0.2, 0.2], [0.2, 0.6]])
        assert pack.labels == ("1.a", "2.a")

    def test_star(self):
        pack = build_sensitivity(make_feeder([0, 0], z=0.1 + 0.1j))
        np.testing.assert_allclose(pack.R, [[0.2, 0.0], [0.0, 0.2]])

    def test_single_phase_builder_rejects_mixed_phases(self, tri2):
        with pytest.raises(PhaseError):
            build_single_phase(tri2.feeder)

    def test_multi_phase_reduces_on_single_phase_feeders(self, binary63):
        single = build_single_phase(binary63.feeder)
        multi = build_multi_phase(binary63.feeder)
        np.testing.assert_allclose(multi.R, single.R, atol=1e-15)
        np.testing.assert_allclose(multi.X, single.X, atol=1e-15)

    def test_tri2_entries(self, tri2):
        pack = build_sensitivity(tri2.feeder)
        assert pack.R[0, 0] == pytest.approx(0.2)
        assert pack.X[0, 0] == pytest.approx(0.6)
        # (v^a, p^b): 2 Re{(0.05 - 0.15i) exp(2i pi/3)}
        expected = 2 * ((0.05 - 0.15j) * np.exp(2j * np.pi / 3)).real
        assert pack.R[0, 1] == pytest.approx(expected)
        assert pack.R[0, 1] == pytest.approx(0.2098, abs=1e-4)

    def test_zero_mutual_impedance_has_no_cross_phase_terms(self):
        feeder = make_feeder([0, 1], z=[0.1 + 0.2j, 0.05 + 0.1j], phases=(0, 1, 2))
        pack = build_sensitivity(feeder)
        phases = pack.phases
        cross = phases[:, None] != phases[None, :]
        assert np.all(pack.R[cross] == 0)
        assert np.all(pack.X[cross] == 0)

    def test_matches_path_enumeration(self, random3phase):
        feeder = random3phase.feeder
        pack = build_sensitivity(feeder)
        w = np.exp(-2j * np.pi / 3)
        for a in range(0, pack.n, 17):
            for b in range(0, pack.n, 13):
                (i, phi), (j, psi) = pack.index[a], pack.index[b]
                term = np.conj(_brute_force_z(feeder, i, j)[phi, psi]) * w ** (phi - psi)
                assert pack.R[a, b] == pytest.approx(2 * term.real, abs=1e-12)
                assert pack.X[a, b] == pytest.approx(-2 * term.imag, abs=1e-12)

    @pytest.mark.parametrize("name", ["line3", "tri2", "tri2_extended"])
    def test_columns_match_sweep_differences(self, name, request):
        feeder = request.getfixturevalue(name).feeder
        pack = build_sensitivity(feeder)
        n, h = feeder.n_xi, 1e-5
        zeros = np.zeros(n)

        def v(p, q):
            return nonlinear_solve(feeder, p, q, tol=1e-13)[0].v

        for matrix, active in ((pack.R, True), (pack.X, False)):
            for k, e in enumerate(h * np.eye(n)):
                if active:
                    column = (v(e, zeros) - v(-e, zeros)) / (2 * h)
                else:
                    column = (v(zeros, e) - v(zeros, -e)) / (2 * h)
                assert np.abs(column - matrix[:, k]).max() <= 0.05 * np.abs(matrix).max()

    def test_diagonal_only(self, tri2):
        pack = build_sensitivity(tri2.feeder)
        reduced = diagonal_only(pack)
        np.testing.assert_allclose(np.diag(reduced.R), np.diag(pack.R))
        assert reduced.R[0, 1] == 0
        assert reduced.X[2, 0] == 0

    def test_dump_matrix_csv(self, tmp_path, line3):
        path = tmp_path / "R.csv"
        dump_matrix_csv(build_sensitivity(line3.feeder), path)
        frame = pd.read_csv(path, index_col=0)
        assert list(frame.columns) == ["1.a", "2.a"]
        assert frame.loc["2.a", "2.a"] == pytest.approx(0.6)


class TestPathImpedanceTable:
    def test_scope_table_matches_feeder(self, random3phase):
        feeder = random3phase.feeder
        root = feeder.children[0][0]
        nodes = feeder.descendants(root)
        table = PathImpedanceTable.for_scope(feeder, nodes, root, base=feeder.cumulative_z[root])
        for i in nodes[:8]:
            for j in nodes[-8:]:
                np.testing.assert_allclose(table.get(i, j), feeder.cumulative_z[feeder.lca(i, j)])

    def test_outside_scope(self, line3):
        table = PathImpedanceTable.for_scope(line3.feeder, [1, 2], 1)
        with pytest.raises(ScopeError):
            table.get(0, 2)

    def test_disconnected_scope(self):
        feeder = make_feeder([0, 1, 2])
        with pytest.raises(ScopeError):
            PathImpedanceTable.for_scope(feeder, [1, 3], 1)

    def test_audit_records_pairs(self, line3):
        table = PathImpedanceTable.for_scope(line3.feeder, [0, 1, 2], 0, audit=True)
        table.get(2, 1)
        assert table.accessed == {(1, 2)}


class TestBlockStructure:
    def test_holds_for_valid_partitions(self, random3phase):
        feeder = random3phase.feeder
        partition = auto_partition(feeder, 4)
        report = block_structure_check(build_sensitivity(feeder), partition)
        assert report
        assert report.violations == []

    def test_single_subtree_is_vacuous(self, line3):
        partition = make_partition([(1, [1, 2])])
        assert block_structure_check(build_sensitivity(line3.feeder), partition)

    def test_omitted_descendant_is_reported(self):
        # 0 -> 1 -> {2, 3}, 2 -> 4; a "subtree" at 2 that leaves 4 to the other side
        feeder = make_feeder([0, 1, 1, 2], z=[0.1 + 0.1j, 0.2 + 0.1j, 0.3 + 0.2j, 0.4 + 0.3j])
        partition = make_partition([(2, [2]), (3, [3, 4])])
        report = block_structure_check(build_sensitivity(feeder), partition)
        assert not report
        assert report.violations

    def test_synthetic_clusters(self):
        case = generate_feeder(48, topology="clustered", subtrees=6, phases=3, seed=2)
        partition = partition_from_clusters(case.feeder, case.clusters)
        assert block_structure_check(build_sensitivity(case.feeder), partition)
