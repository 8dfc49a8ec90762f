"""Case parsing, DC power flow and the linearized closed-loop model."""

import numpy as np
import pytest

from mtd_grid import gridmodel
from mtd_grid.errors import InfeasibleDispatch, ParseError, UnknownStateLabel, ValidationError
from tests.conftest import TRIANGLE, TWO_BUS


# ============================================================================
# parse_case
# ============================================================================

class TestParseCase:
    def test_bundled_rts24(self, rts24_case):
        assert len(rts24_case.generators) == 10
        assert len(rts24_case.loads) == 14
        assert len(rts24_case.branches) == 38
        assert rts24_case.generator_buses == [1, 2, 7, 13, 15, 16, 18, 21, 22, 23]
        assert rts24_case.name == "rts24"

    def test_two_bus(self, two_bus_case):
        assert len(two_bus_case.generators) == 1
        assert len(two_bus_case.loads) == 1
        assert two_bus_case.generator(1).local_demand == 0.0

    def test_bus_order_follows_file(self):
        text = TRIANGLE.replace("1 generator\n2 generator\n3 load", "3 load\n2 generator\n1 generator")
        case = gridmodel.parse_case_text(text)
        assert [b.id for b in case.buses] == [3, 2, 1]
        assert case.generator_buses == [2, 1]

    def test_zero_susceptance(self):
        with pytest.raises(ValidationError, match="b"):
            gridmodel.parse_case_text(TWO_BUS.replace("1 2 10.0", "1 2 0.0"))

    def test_negative_inertia(self):
        with pytest.raises(ValidationError):
            gridmodel.parse_case_text(TWO_BUS.replace("2 3.0 1.2 1.0", "2 -3.0 1.2 1.0"))

    def test_disconnected(self):
        text = TRIANGLE.replace("1 3 10.0\n2 3 10.0\n", "")
        with pytest.raises(ValidationError, match="connected components"):
            gridmodel.parse_case_text(text)

    def test_missing_load_record(self):
        text = TWO_BUS.split("[load]")[0]
        with pytest.raises(ValidationError, match="without parameters"):
            gridmodel.parse_case_text(text)

    def test_bad_number_points_at_token(self):
        with pytest.raises(ParseError) as exc:
            gridmodel.parse_case_text(TWO_BUS.replace("1 2 10.0", "1 2 ten"), "bad.case")
        assert exc.value.source == "bad.case"
        assert exc.value.line == 9
        assert exc.value.column == 5

    def test_unknown_section(self):
        with pytest.raises(ParseError, match="unknown section"):
            gridmodel.parse_case_text(TWO_BUS + "\n[shunt]\n1 0.5\n")

    def test_bad_bus_kind(self):
        with pytest.raises(ParseError, match="bus kind"):
            gridmodel.parse_case_text(TWO_BUS.replace("2 load", "2 motor"))

    def test_serialize_reparses(self, rts24_case):
        again = gridmodel.parse_case_text(gridmodel.serialize_case(rts24_case))
        assert again == rts24_case


# ============================================================================
# dc_power_flow
# ============================================================================

class TestDcPowerFlow:
    def test_two_bus(self, two_bus_case):
        op = gridmodel.dc_power_flow(two_bus_case)
        np.testing.assert_allclose(op.angles, [0.0, -0.1], atol=1e-14)
        np.testing.assert_allclose(op.injections, [1.0, -1.0])

    def test_zero_demand(self, two_bus_case):
        op = gridmodel.dc_power_flow(two_bus_case, {2: 0.0})
        np.testing.assert_array_equal(op.angles, [0.0, 0.0])

    def test_infeasible(self, two_bus_case):
        with pytest.raises(InfeasibleDispatch):
            gridmodel.dc_power_flow(two_bus_case, {2: 2.5})

    def test_branch_flows_balance(self, rts24_case):
        op = gridmodel.dc_power_flow(rts24_case)
        B = gridmodel.susceptance_matrix(rts24_case)
        np.testing.assert_allclose(B @ op.angles, op.injections, atol=1e-10)
        assert op.injections.sum() == pytest.approx(0.0, abs=1e-10)
        assert op.angles[0] == 0.0

    def test_rts24_angle_spread(self, rts24_case):
        op = gridmodel.dc_power_flow(rts24_case)
        assert np.ptp(op.angles) < 0.6

    def test_laplacian_rows_sum_to_zero(self, rts24_case):
        op = gridmodel.dc_power_flow(rts24_case)
        Y = gridmodel.susceptance_matrix(rts24_case, op.angles)
        np.testing.assert_allclose(Y.sum(axis=1), 0.0, atol=1e-10)


# ============================================================================
# linearize
# ============================================================================

class TestLinearize:
    def test_two_bus_entries(self, two_bus_case):
        model = gridmodel.linearize(two_bus_case, gridmodel.dc_power_flow(two_bus_case))
        w = 10.0 * np.cos(0.1)
        J, D, e_T, T_u, T_g, K_t, r = 6.0, 1.5, 1.0, 0.3, 0.25, 1.0, 0.05
        J_L, D_L = 3.0, 1.2
        expected = np.array(
            [
                [-D / J, 0.0, -1 / J, 0.0, 1 / J, e_T / J],
                [0.0, -D_L / J_L, 0.0, 1 / J_L, 0.0, 0.0],
                [w, -w, 0.0, 0.0, 0.0, 0.0],
                [w, -w, 0.0, 0.0, 0.0, 0.0],
                [0.0, 0.0, 0.0, 0.0, -1 / T_u, K_t / T_u],
                [-1 / T_g, 0.0, 0.0, 0.0, 0.0, -r / T_g],
            ]
        )
        np.testing.assert_allclose(model.A, expected, rtol=1e-14)
        np.testing.assert_allclose(model.G[:, 0], [0.0, -1 / J_L, 0.0, 0.0, 0.0, 0.0])
        assert model.state_labels == ("omega_G[1]", "omega_L[2]", "P_G[1]", "P_L[2]", "P_T[1]", "a[1]")
        assert model.n == 6

    def test_operating_readings(self, two_bus_case):
        model = gridmodel.linearize(two_bus_case, gridmodel.dc_power_flow(two_bus_case))
        x0 = dict(zip(model.state_labels, model.x0))
        assert x0["P_G[1]"] == pytest.approx(1.0)
        assert x0["P_L[2]"] == pytest.approx(1.0)
        assert x0["P_T[1]"] + x0["a[1]"] == pytest.approx(1.0)

    def test_rts24_dimensions(self, rts24_model):
        assert rts24_model.n == 68
        assert rts24_model.semistability.eigenvalues[0] == pytest.approx(0.0, abs=1e-6)
        assert rts24_model.semistability.max_stable_real < 0

    def test_disturbance_enters_load_frequency_only(self, rts24_case, rts24_model):
        ng, nl = rts24_model.n_g, rts24_model.n_l
        J_L = np.array([rts24_case.load(b).J for b in rts24_case.load_buses])
        rows = np.flatnonzero(np.any(rts24_model.G != 0, axis=1))
        np.testing.assert_array_equal(rows, np.arange(ng, ng + nl))
        np.testing.assert_allclose(rts24_model.G[ng:ng + nl], np.diag(-1.0 / J_L))

    def test_generator_rows(self, rts24_case, rts24_model):
        ng, nl = rts24_model.n_g, rts24_model.n_l
        gens = [rts24_case.generator(b) for b in rts24_case.generator_buses]
        J = np.array([g.J for g in gens])
        block = rts24_model.A[:ng]
        np.testing.assert_allclose(block[:, :ng], np.diag(-np.array([g.D for g in gens]) / J))
        np.testing.assert_array_equal(block[:, ng:ng + nl], 0.0)
        np.testing.assert_allclose(block[:, ng + nl:2 * ng + nl], np.diag(-1.0 / J))
        np.testing.assert_array_equal(block[:, 2 * ng + nl:2 * (ng + nl)], 0.0)
        np.testing.assert_allclose(block[:, 2 * (ng + nl):2 * (ng + nl) + ng], np.diag(1.0 / J))
        np.testing.assert_allclose(block[:, 2 * (ng + nl) + ng:], np.diag(np.array([g.e_T for g in gens]) / J))

    def test_left_null_vector_is_power_balance(self, rts24_model):
        ng, nl = rts24_model.n_g, rts24_model.n_l
        v = rts24_model.semistability.v_max
        expected = np.zeros(rts24_model.n)
        expected[ng + nl:2 * ng + nl] = 1.0
        expected[2 * ng + nl:2 * (ng + nl)] = -1.0
        np.testing.assert_allclose(v, expected / np.linalg.norm(expected), atol=1e-8)

    def test_deterministic(self, rts24_case):
        op = gridmodel.dc_power_flow(rts24_case)
        a = gridmodel.linearize(rts24_case, op)
        b = gridmodel.linearize(rts24_case, op)
        np.testing.assert_array_equal(a.A, b.A)
        np.testing.assert_array_equal(a.G, b.G)

    def test_loading_moves_network_blocks_and_load_damping(self, rts24_provider):
        low, high = rts24_provider.model(0.8), rts24_provider.model(1.2)
        ng, nl = low.n_g, low.n_l
        changed = np.argwhere(low.A != high.A)
        network_rows = range(ng + nl, 2 * (ng + nl))
        network_cols = range(0, ng + nl)
        load_frequency = range(ng, ng + nl)
        assert changed.size > 0
        for r, c in changed:
            assert (r in network_rows and c in network_cols) or (r == c and r in load_frequency)
        assert low.loading_label == "x0.8"

    def test_load_damping_scales_with_served_demand(self, rts24_case, rts24_provider):
        model = rts24_provider.model(1.2)
        ng = model.n_g
        for k, bus in enumerate(rts24_case.load_buses):
            load = rts24_case.load(bus)
            factor = 1.2 if load.demand > 0 else 1.0
            assert model.A[ng + k, ng + k] == pytest.approx(-factor * load.D / load.J, rel=1e-12)
        transit = [b for b in rts24_case.load_buses if rts24_case.load(b).demand == 0]
        assert transit == [11, 12, 17, 24]


# ============================================================================
# select_outputs and providers
# ============================================================================

class TestSelectOutputs:
    def test_all(self, two_bus_case):
        model = gridmodel.select_outputs(gridmodel.CaseModelProvider(two_bus_case).model(1.0), "all")
        np.testing.assert_array_equal(model.C, np.eye(6))
        assert model.l == 6

    def test_block(self, rts24_model):
        model = gridmodel.select_outputs(rts24_model, ["P_G"])
        assert model.l == 10
        assert model.output_labels[0] == "P_G[1]"
        assert model.output_labels[-1] == "P_G[23]"

    def test_labels_and_blocks_dedupe(self, rts24_model):
        model = gridmodel.select_outputs(rts24_model, ["P_G[21]", "P_G", "omega_L[3]"])
        assert model.l == 11
        assert model.output_labels[0] == "P_G[21]"

    def test_unknown(self, rts24_model):
        with pytest.raises(UnknownStateLabel):
            gridmodel.select_outputs(rts24_model, ["P_X"])

    def test_provider_caches_per_scale(self, triangle_provider):
        assert triangle_provider.model(1.0) is triangle_provider.model(1.0)
        assert triangle_provider.model(1.0).loading_label == "nominal"
        assert triangle_provider.load_buses == [3]

    def test_provider_applies_outputs(self, triangle_case):
        provider = gridmodel.CaseModelProvider(triangle_case, ["P_G"])
        assert provider.model(1.0).output_labels == ("P_G[1]", "P_G[2]")
