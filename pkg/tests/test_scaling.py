import math
import random
from fractions import Fraction

import pytest

from plancentric.scaling import (
    GPT4O_PARAMS_BILLIONS_ESTIMATE,
    REFERENCE_COEFFICIENTS,
    DegenerateDesignError,
    ScalePoint,
    ScalingFit,
    coefficient_table,
    fit_by_component,
    fit_loglinear,
    predict_success,
    r2_of_line,
    read_fits,
    read_points,
    write_fits,
)


def test_perfect_line():
    fit = fit_loglinear([ScalePoint(10, 28.7), ScalePoint(100, 44.7)])
    assert fit.alpha == pytest.approx(16.0, abs=1e-9)
    assert fit.intercept == pytest.approx(12.7, abs=1e-9)
    assert fit.r2 == pytest.approx(1.0, abs=1e-12)


def test_flat_data():
    fit = fit_loglinear([ScalePoint(x, 40.0) for x in (3, 7, 32)])
    assert fit.alpha == pytest.approx(0.0, abs=1e-12) and fit.intercept == pytest.approx(40.0)
    assert fit.r2 == 1.0


def _exact_ols(xs, ys):
    # exact rational least squares on given (already logged) x values
    n = len(xs)
    mx, my = sum(xs) / n, sum(ys) / n
    sxx = sum((x - mx) ** 2 for x in xs)
    sxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    a = sxy / sxx
    b = my - a * mx
    ssr = sum((y - a * x - b) ** 2 for x, y in zip(xs, ys))
    sst = sum((y - my) ** 2 for y in ys)
    return a, b, 1 - ssr / sst


def test_noisy_fixture_against_rational_oracle():
    # sizes are powers of 10 so log10 is exact
    sizes = [1, 10, 100, 1000]
    ys = [Fraction(13), Fraction(27), Fraction(46), Fraction(58)]
    a, b, r2 = _exact_ols([Fraction(0), Fraction(1), Fraction(2), Fraction(3)], ys)
    fit = fit_loglinear([ScalePoint(s, float(y)) for s, y in zip(sizes, ys)])
    assert (a, b) == (Fraction(77, 5), Fraction(129, 10))  # sxy = 77, sxx = 5, 36 - 15.4 * 1.5
    assert fit.alpha == pytest.approx(float(a), abs=1e-12)
    assert fit.intercept == pytest.approx(float(b), abs=1e-12)
    assert fit.r2 == pytest.approx(float(r2), abs=1e-12)


def test_degenerate():
    with pytest.raises(DegenerateDesignError):
        fit_loglinear([ScalePoint(7, 10), ScalePoint(7, 20)])
    with pytest.raises(DegenerateDesignError):
        fit_loglinear([ScalePoint(7, 10)])


def test_point_validation():
    with pytest.raises(ValueError):
        ScalePoint(0, 10)
    with pytest.raises(ValueError):
        ScalePoint(1, 101)


def test_predictions():
    planner = ScalingFit(16.0, 12.7, 0.82, 5)
    assert predict_success(planner, 10)[0] == pytest.approx(28.7)
    assert predict_success(planner, 1) == (12.7, False)
    allm = ScalingFit(*REFERENCE_COEFFICIENTS["All Modules"][:2], 0.58, 5)
    assert predict_success(allm, GPT4O_PARAMS_BILLIONS_ESTIMATE)[0] == pytest.approx(54.0, abs=0.1)
    assert predict_success(ScalingFit(50, 0, 1, 2), 1e6) == (100.0, True)
    assert predict_success(ScalingFit(50, -10, 1, 2), 0.01) == (0.0, True)


def test_scale_equivariance():
    rng = random.Random(11)
    for _ in range(100):
        n = rng.randint(2, 8)
        pts = [ScalePoint(rng.uniform(0.5, 300), rng.uniform(0, 100)) for _ in range(n)]
        if len({p.params_billions for p in pts}) < 2:
            continue
        a = fit_loglinear(pts)
        b = fit_loglinear([ScalePoint(p.params_billions * 10, p.success_pct) for p in pts])
        assert b.alpha == pytest.approx(a.alpha, abs=1e-9)
        assert b.intercept == pytest.approx(a.intercept - a.alpha, abs=1e-9)


def test_ols_beats_perturbed_lines():
    rng = random.Random(4)
    pts = [ScalePoint(s, rng.uniform(10, 60)) for s in (3, 7, 14, 32, 72)]
    fit = fit_loglinear(pts)
    assert fit.r2 == pytest.approx(r2_of_line(pts, fit.alpha, fit.intercept), abs=1e-12)
    for _ in range(50):
        assert r2_of_line(pts, fit.alpha + rng.uniform(-3, 3), fit.intercept + rng.uniform(-3, 3)) <= fit.r2 + 1e-12


def test_natural_log_option():
    fit = fit_loglinear([ScalePoint(1, 5), ScalePoint(math.e, 7)], log_base=math.e)
    assert fit.alpha == pytest.approx(2.0) and fit.log_base == math.e


def test_csv_round_trip(tmp_path):
    p = tmp_path / "points.csv"
    p.write_text("params_billions,success_pct,component_label\n3,20,Planner\n7,26,Planner\n32,37,Planner\n"
                 "3,15,Actor\n72,30,Actor\n")
    fits = fit_by_component(read_points(p))
    assert set(fits) == {"Planner", "Actor"}
    out = tmp_path / "fits.csv"
    write_fits(fits.values(), out)
    assert read_fits(out) == list(fits.values())
    table = coefficient_table(fits.values())
    assert table.splitlines()[0].split() == ["Component", "alpha", "intercept", "R^2"]


def test_bad_csv_names_line(tmp_path):
    p = tmp_path / "points.csv"
    p.write_text("params_billions,success_pct\n3,20\n7,abc\n")
    with pytest.raises(ValueError, match="line 3"):
        read_points(p)
