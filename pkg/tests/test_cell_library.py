import pytest
from pydantic import ValidationError

from cell_library import SnmCoeffs, eval_vtc_params, snm_of_pair, worst_output_levels

INV_SNM = (0.33, 0.20, 0.05, 0.15, 0.05, 0.02)


def test_vtc_at_balanced_counts():
    vtc = eval_vtc_params(SnmCoeffs.from_tuple(INV_SNM), 5.0, 5.0)
    assert vtc == pytest.approx((0.33, 0.20, 0.15, 0.02))


def test_vtc_moves_with_count_ratio():
    vtc = eval_vtc_params(SnmCoeffs.from_tuple(INV_SNM), 10.0, 1.0)
    assert vtc.v_ih == pytest.approx(0.25)
    assert vtc.v_il == pytest.approx(0.20)


def test_vtc_rejects_empty_transistor():
    with pytest.raises(ValueError):
        eval_vtc_params(SnmCoeffs.from_tuple(INV_SNM), 0.0, 3.0)


def test_snm_coefficients_must_be_ordered():
    with pytest.raises(ValidationError):
        SnmCoeffs.from_tuple((0.20, 0.33, 0.05, 0.15, 0.05, 0.02))


def test_constraint_factors():
    coeffs = SnmCoeffs.from_tuple(INV_SNM)
    assert coeffs.snmh_factor(0.33, 0.07) == pytest.approx(-15.849, abs=1e-3)
    assert coeffs.snml_factor(0.02, 0.07) == pytest.approx(-15.849, abs=1e-3)


def test_constraint_factor_matches_snm_sign():
    coeffs = SnmCoeffs.from_tuple(INV_SNM)
    h12 = coeffs.snmh_factor(0.33, 0.07)
    for n_p, n_n in [(3.0, 1.0), (20.0, 1.0), (1.0, 4.0)]:
        snmh, _, _ = snm_of_pair(coeffs, coeffs, n_p, n_n)
        assert (snmh < 0.07) == (n_p + h12 * n_n > 0)


def test_worst_output_levels_over_stage_inputs():
    a = SnmCoeffs.from_tuple(INV_SNM)
    b = SnmCoeffs.from_tuple((0.32, 0.20, 0.05, 0.15, 0.05, 0.025))
    assert worst_output_levels([a, b]) == (0.32, 0.025)


def test_nand2_sensitization(library):
    stage = library.cell("NAND2").stages[0]
    (case,) = stage.sensitization_cases("A")
    assert case.p_group == ("P1",)
    assert case.n_group == ("N1",)
    assert case.describe() == "A[B=1]"


def test_aoi21_cases(library):
    stage = library.cell("AOI21").stages[0]
    cases = stage.sensitization_cases("A")
    assert len(cases) == 3
    assert all(c.n_group == ("NA",) and c.p_group == ("PA",) for c in cases)
    (b_case,) = stage.sensitization_cases("B")
    assert dict(b_case.state) == {"A": 0, "C": 1}
    assert b_case.n_group == ("NB",)


def test_stage_logic(library):
    nor = library.cell("NOR2").stages[0]
    assert [nor.evaluate({"A": a, "B": b}) for a in (0, 1) for b in (0, 1)] == [1, 0, 0, 0]


def test_unknown_input_is_rejected(library):
    with pytest.raises(ValueError):
        library.cell("INV").stages[0].sensitization_cases("Z")


def test_scaling_widens_transistors(library):
    stage = library.cell("BUF").stage("s1")
    wide = stage.scaled(2.0)
    assert wide.transistor("P2").width == 4
    assert wide.transistor("P2").offset == 2
    assert wide.arc.c_in == pytest.approx(2 * stage.arc.c_in)
    assert wide.arc.i1_per_cnt == stage.arc.i1_per_cnt
    assert stage.scaled(1.0, w_min=3).transistor("N2").width == 3


def test_scaled_arc_drive_grows_with_width_once(library):
    arc = library.cell("INV").stages[0].arc
    wide = arc.scaled(4.0)
    assert wide.c_par_per_cnt == arc.c_par_per_cnt
    assert wide.i2_fixed == pytest.approx(4 * arc.i2_fixed)
    # four times the width collects four times the CNTs
    for n in (5.0, 10.0):
        assert wide.drive(4 * n) == pytest.approx(4 * arc.drive(n))
        assert wide.drive(4 * n, frozen_factor=0.5) == pytest.approx(4 * arc.drive(n, frozen_factor=0.5))


def test_drive_chain(library):
    inv = library.cell("INV")
    assert inv.drive_factor(4) == pytest.approx(4.0)
    assert inv.drive_chain.next(16) is None
    assert inv.input_capacitance("A", 2) == pytest.approx(2 * inv.input_capacitance("A", 1))
    with pytest.raises(ValueError):
        inv.drive_factor(3)


def test_unknown_cell(library):
    with pytest.raises(ValueError, match="XOR9"):
        library.cell("XOR9")


def test_flop_is_sequential(library):
    dff = library.cell("DFF")
    assert dff.sequential
    assert sum(s.launch for s in dff.stages) == 1
    assert dff.feedback
