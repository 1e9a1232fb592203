import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import (
    assert_solves_system,
    dense_solve,
    generic_minimizer,
    null_design,
    objective,
    random_instance,
)
from funcadd.curves import CurveDataset, FunctionalCurve, TimeGrid, ValueTransform
from funcadd.errors import ConditioningError, DegenerateDesignError, InputError
from funcadd.fit import (
    DEFAULT_GRID,
    FitResult,
    LambdaGrid,
    eval_surface,
    fit_from_dict,
    fit_thinspline,
    fit_to_dict,
    gcv,
    gcv_curve,
    hat_matrix,
    load_fit,
    predict,
    predict_dataset,
    predict_many,
    save_fit,
    select_lambda,
    solve_penalized,
    trace_curve,
    write_surface_csv,
)
from funcadd.simgen import ExperimentConfig, generate
from funcadd.tps_kernel import GramMatrices, assemble_sigma, assemble_xi, build_gram

LAMBDAS = [1e-6, 1e-4, 1e-2, 1.0, 100.0]


def gram_of(fit):
    data = CurveDataset(fit.grid, fit.train_values, np.zeros(fit.n))
    return GramMatrices(assemble_sigma(data), assemble_xi(data))


class TestLambdaGrid:
    def test_default(self):
        assert len(DEFAULT_GRID) == 50
        assert DEFAULT_GRID.values[0] == pytest.approx(1e2)
        assert DEFAULT_GRID.values[-1] == pytest.approx(1e-8)

    def test_parse(self):
        g = LambdaGrid.parse("1e-4:1:5")
        np.testing.assert_allclose(g.values, [1, 1e-1, 1e-2, 1e-3, 1e-4])

    @pytest.mark.parametrize("values", [[1.0, 2.0], [1.0, 1.0], [1.0, -1.0], []])
    def test_invalid(self, values):
        with pytest.raises(InputError):
            LambdaGrid(values)

    @pytest.mark.parametrize("text", ["1:2", "a:b:3", "1:0.1:3", "1e-3:1:0"])
    def test_parse_invalid(self, text):
        with pytest.raises(InputError):
            LambdaGrid.parse(text)


class TestSolvePenalized:
    @pytest.mark.parametrize("lam", LAMBDAS)
    def test_solves_linear_system(self, instance8, lam):
        data, gram = instance8
        res = solve_penalized(gram, data.responses, lam)
        assert_solves_system(gram, data.responses, res)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_dense_solve(self, seed):
        n = 6 + 2 * seed
        data, gram = random_instance(200 + seed, n)
        for lam in (1e-5, 1e-2, 1.0):
            res = solve_penalized(gram, data.responses, lam)
            c, d = dense_solve(gram, data.responses, lam)
            scale = 1 + np.abs(c).max()
            np.testing.assert_allclose(res.c_hat, c, rtol=0, atol=1e-8 * scale)
            np.testing.assert_allclose(res.d_hat, d, rtol=0, atol=1e-8 * scale)

    def test_large_instance_matches_dense_solve(self):
        data, gram = random_instance(77, 30)
        res = solve_penalized(gram, data.responses, 1e-3)
        c, d = dense_solve(gram, data.responses, 1e-3)
        np.testing.assert_allclose(res.c_hat, c, atol=1e-8 * np.abs(c).max())
        np.testing.assert_allclose(res.d_hat, d, atol=1e-8 * np.abs(c).max())

    @pytest.mark.parametrize("lam", [1e-4, 1e-2, 1.0])
    def test_agrees_with_generic_minimizer(self, instance8, lam):
        data, gram = instance8
        y = data.responses
        res = solve_penalized(gram, y, lam)
        c, d = generic_minimizer(gram, y, lam)
        assert objective(gram, y, lam, res.c_hat, res.d_hat) == pytest.approx(
            objective(gram, y, lam, c, d), abs=1e-6)
        np.testing.assert_allclose(res.fitted, null_design(gram) @ d + gram.sigma @ c, atol=1e-4)

    def test_objective_below_null_space_fit(self, instance8):
        data, gram = instance8
        y = data.responses
        N = null_design(gram)
        d_ls = np.linalg.lstsq(N, y, rcond=None)[0]
        for lam in LAMBDAS:
            res = solve_penalized(gram, y, lam)
            base = objective(gram, y, lam, np.zeros(gram.n), d_ls)
            assert objective(gram, y, lam, res.c_hat, res.d_hat) <= base + 1e-12

    def test_huge_lambda_collapses_to_null_space(self, instance8):
        data, gram = instance8
        res = solve_penalized(gram, data.responses, 1e12)
        assert np.abs(res.c_hat).max() < 1e-9
        d_ls = np.linalg.lstsq(null_design(gram), data.responses, rcond=None)[0]
        np.testing.assert_allclose(res.d_hat, d_ls, atol=1e-8)

    def test_two_curves_have_no_kernel_part(self):
        grid = TimeGrid.uniform(21)
        x = 0.3 + 0.2 * grid.points
        data = CurveDataset(grid, np.vstack([x, 1 - x]), [1.0, -1.0])
        gram = GramMatrices(assemble_sigma(data), assemble_xi(data))
        res = solve_penalized(gram, data.responses, 1e-2)
        c, d = dense_solve(gram, data.responses, 1e-2)
        np.testing.assert_allclose(res.c_hat, c, atol=1e-12)
        assert res.c_hat[0] == pytest.approx(-res.c_hat[1], abs=1e-12)
        np.testing.assert_allclose(res.fitted, data.responses, atol=1e-12)

    def test_mirror_pairs_give_antisymmetric_c(self):
        # x -> 1 - x preserves every kernel distance and flips int X around 1/2
        grid = TimeGrid.uniform(21)
        t = grid.points
        a, b = 0.3 + 0.2 * t, 0.4 + 0.1 * np.sin(3 * t)
        data = CurveDataset(grid, np.vstack([a, 1 - a, b, 1 - b]), [1.0, -1.0, 0.5, -0.5])
        gram = GramMatrices(assemble_sigma(data), assemble_xi(data))
        res = solve_penalized(gram, data.responses, 1e-3)
        assert res.c_hat[0] == pytest.approx(-res.c_hat[1], abs=1e-10)
        assert res.c_hat[2] == pytest.approx(-res.c_hat[3], abs=1e-10)
        assert np.abs(res.c_hat).max() > 1e-3
        c, _ = dense_solve(gram, data.responses, 1e-3)
        np.testing.assert_allclose(res.c_hat, c, atol=1e-8)

    def test_constraint(self, instance8):
        data, gram = instance8
        res = solve_penalized(gram, data.responses, 1e-3)
        assert abs(gram.xi[:, 0] @ res.c_hat) <= 1e-8 * np.linalg.norm(res.c_hat)
        assert abs(res.c_hat.sum()) <= 1e-8 * np.linalg.norm(res.c_hat)

    def test_degenerate_design(self):
        grid = TimeGrid.uniform(21)
        t = grid.points
        data = CurveDataset(grid, np.vstack([np.full(21, 0.5), t, 1 - t, 0.5 + 0.1 * np.sin(2 * np.pi * t)]),
                            [0.0, 1.0, 2.0, 3.0])
        gram = GramMatrices(assemble_sigma(data), assemble_xi(data))
        with pytest.raises(DegenerateDesignError):
            solve_penalized(gram, data.responses, 1e-2)

    @pytest.mark.parametrize("lam", [0.0, -1.0, np.inf, np.nan])
    def test_bad_lambda(self, instance8, lam):
        data, gram = instance8
        with pytest.raises(InputError):
            solve_penalized(gram, data.responses, lam)

    def test_length_mismatch(self, instance8):
        _, gram = instance8
        with pytest.raises(InputError):
            solve_penalized(gram, np.zeros(3), 1.0)

    def test_indefinite_system_reports_conditioning(self):
        gram = GramMatrices(-np.eye(5) * 10, np.arange(5.0).reshape(-1, 1))
        with pytest.raises(ConditioningError, match="larger lambda"):
            solve_penalized(gram, np.arange(5.0), 1e-6)


class TestEquivariance:
    @settings(max_examples=15, deadline=None)
    @given(st.floats(-100, 100, allow_nan=False), st.sampled_from(LAMBDAS))
    def test_response_shift(self, k, lam):
        data, gram = random_instance(9, 9)
        y = data.responses
        a = solve_penalized(gram, y, lam)
        b = solve_penalized(gram, y + k, lam)
        scale = 1 + abs(k)
        assert b.intercept == pytest.approx(a.intercept + k, abs=1e-9 * scale)
        np.testing.assert_allclose(b.c_hat, a.c_hat, atol=1e-9 * scale)
        assert b.slope == pytest.approx(a.slope, abs=1e-9 * scale)
        np.testing.assert_allclose(b.fitted - (y + k), a.fitted - y, atol=1e-9 * scale)

    def test_response_shift_keeps_gcv_choice(self, small_dataset):
        a = fit_thinspline(small_dataset)
        shifted = CurveDataset(small_dataset.grid, small_dataset.values, small_dataset.responses + 7.5)
        b = fit_thinspline(shifted)
        assert b.lam == a.lam
        assert b.intercept == pytest.approx(a.intercept + 7.5, abs=1e-9)
        np.testing.assert_allclose(b.c_hat, a.c_hat, atol=1e-9)

    @settings(max_examples=10, deadline=None)
    @given(st.permutations(range(10)))
    def test_permutation(self, perm):
        data, _ = random_instance(31, 10)
        new = random_instance(32, 3)[0]
        perm = np.array(perm)
        a = fit_thinspline(data, lam=1e-3)
        b = fit_thinspline(data.subset(perm), lam=1e-3)
        np.testing.assert_allclose(b.c_hat, a.c_hat[perm], atol=1e-9)
        np.testing.assert_allclose(predict_many(b, new.values), predict_many(a, new.values), atol=1e-9)


class TestHatMatrix:
    @pytest.mark.parametrize("lam", LAMBDAS)
    def test_reproduces_fitted_values(self, instance8, lam):
        data, gram = instance8
        H = hat_matrix(gram, lam)
        res = solve_penalized(gram, data.responses, lam)
        np.testing.assert_allclose(H @ data.responses, res.fitted, atol=1e-8)
        assert np.trace(H) == pytest.approx(res.edf, abs=1e-8)

    def test_symmetric(self, instance8):
        H = hat_matrix(instance8[1], 1e-2)
        np.testing.assert_allclose(H, H.T, atol=1e-12)

    def test_limits(self, instance8):
        _, gram = instance8
        assert np.trace(hat_matrix(gram, 1e10)) == pytest.approx(2, abs=1e-6)
        assert np.trace(hat_matrix(gram, 1e-12)) == pytest.approx(gram.n, abs=1e-3)

    def test_trace_nonincreasing(self, instance8):
        tr = trace_curve(instance8[1], DEFAULT_GRID)
        assert np.all(np.diff(tr) >= -1e-9)
        assert np.all((tr > 0) & (tr <= instance8[1].n))

    def test_predict_on_training_curves(self, small_dataset):
        for lam in (1e-5, 1e-3, 1e-1):
            res = fit_thinspline(small_dataset, lam=lam)
            H = hat_matrix(gram_of(res), lam)
            np.testing.assert_allclose(predict_dataset(res, small_dataset), H @ small_dataset.responses, atol=1e-8)


class TestGcv:
    def test_spectral_matches_direct(self, instance8):
        data, gram = instance8
        grid = LambdaGrid.logspace(1e-6, 1, 7)
        direct = [gcv(gram, data.responses, lam) for lam in grid.values]
        np.testing.assert_allclose(gcv_curve(gram, data.responses, grid), direct, rtol=1e-8)

    def test_formula(self, instance8):
        data, gram = instance8
        lam = 1e-3
        res = solve_penalized(gram, data.responses, lam)
        H = hat_matrix(gram, lam)
        n = gram.n
        expected = (np.sum((data.responses - H @ data.responses) ** 2) / n) / (1 - np.trace(H) / n) ** 2
        assert res.gcv_score == pytest.approx(expected, rel=1e-9)

    def test_interpolation_edge_is_infinite(self, instance8):
        data, gram = instance8
        scores = gcv_curve(gram, data.responses, LambdaGrid([1.0, 1e-30]))
        assert np.isfinite(scores[0])
        assert scores[1] == np.inf
        lam, _ = select_lambda(gram, data.responses, LambdaGrid([1.0, 1e-30]))
        assert lam == 1.0

    def test_constant_response_picks_largest(self, instance8):
        _, gram = instance8
        lam, res = select_lambda(gram, np.full(gram.n, 3.0), DEFAULT_GRID)
        assert lam == DEFAULT_GRID.values[0]
        np.testing.assert_allclose(res.fitted, 3.0, atol=1e-10)

    def test_all_infinite(self, instance8):
        _, gram = instance8
        with pytest.raises(ConditioningError):
            select_lambda(gram, np.arange(gram.n, dtype=float), LambdaGrid([1e-40]))

    def test_interior_minimum_on_simulated_data(self):
        cfg = ExperimentConfig("linear_wellspaced", 0.5, 1.1)
        interior = 0
        for rep in range(100):
            train, _ = generate(cfg, rep)
            scaled = CurveDataset(train.grid, ValueTransform.fit(train.values).apply(train.values), train.responses)
            scores = gcv_curve(build_gram(scaled), train.responses, DEFAULT_GRID)
            assert np.all(np.isfinite(scores))
            k = int(np.argmin(scores))
            interior += 0 < k < len(scores) - 1
        assert interior >= 90


class TestFitThinspline:
    def test_selected_fit_solves_system(self, small_dataset):
        res = fit_thinspline(small_dataset)
        assert res.lam in DEFAULT_GRID.values
        assert not res.lambda_fixed
        assert 0 < res.edf <= res.n
        assert_solves_system(gram_of(res), small_dataset.responses, res)

    def test_fixed_lambda(self, small_dataset):
        res = fit_thinspline(small_dataset, lam=0.05)
        assert res.lam == 0.05 and res.lambda_fixed

    def test_too_few_curves(self, small_dataset):
        with pytest.raises(InputError):
            fit_thinspline(small_dataset.subset([0, 1]))

    def test_equal_mean_curves_drop_slope(self):
        cfg = ExperimentConfig("nonlinear_cos", 0.5, None, n_train=20, n_test=2, grid_size=41)
        train, _ = generate(cfg)
        res = fit_thinspline(train, lam=1e-4)
        assert res.slope == 0.0
        gram = GramMatrices(gram_of(res).sigma, np.empty((res.n, 0)))
        assert_solves_system(gram, train.responses, res)

    def test_scale_invariant_inputs(self, small_dataset):
        scaled = CurveDataset(small_dataset.grid, 5 * small_dataset.values - 2, small_dataset.responses)
        a, b = fit_thinspline(small_dataset, lam=1e-3), fit_thinspline(scaled, lam=1e-3)
        np.testing.assert_allclose(a.c_hat, b.c_hat, atol=1e-12)

    def test_deterministic(self, small_dataset):
        a, b = fit_thinspline(small_dataset), fit_thinspline(small_dataset)
        assert fit_to_dict(a) == fit_to_dict(b)


class TestPredict:
    def test_duplicate_training_curve(self, small_dataset):
        res = fit_thinspline(small_dataset)
        curve = small_dataset.curves[0]
        assert predict(res, curve) == pytest.approx(res.fitted[0], abs=1e-10)

    def test_null_space_model_is_affine_in_mean(self, small_dataset):
        res = fit_thinspline(small_dataset)
        zero = FitResult(np.zeros(res.n), np.array([1.5, -2.0]), res.lam, 0.0, 2.0, res.fitted,
                         transform=res.transform, grid=res.grid, train_values=res.train_values)
        new = random_instance(5, 4)[0]
        x = res.transform.apply(new.values)
        np.testing.assert_allclose(predict_many(zero, new.values), 1.5 - 2.0 * (x @ new.grid.weights), atol=1e-14)

    def test_grid_mismatch(self, small_dataset):
        res = fit_thinspline(small_dataset)
        other = FunctionalCurve(TimeGrid.uniform(11), np.full(11, 0.5))
        with pytest.raises(InputError):
            predict(res, other)
        on_grid = FunctionalCurve(res.grid, np.full(small_dataset.p, 0.5))
        assert predict(res, other, interp=True) == pytest.approx(predict(res, on_grid), abs=1e-12)

    def test_empty_batch(self, small_dataset):
        res = fit_thinspline(small_dataset)
        assert predict_many(res, np.empty((0, small_dataset.p))).shape == (0,)

    def test_bare_solve_cannot_predict(self, instance8):
        data, gram = instance8
        res = solve_penalized(gram, data.responses, 1.0)
        with pytest.raises(InputError):
            predict_many(res, data.values)

    def test_threads(self, small_dataset):
        res = fit_thinspline(small_dataset)
        new = random_instance(6, 9)[0]
        np.testing.assert_array_equal(predict_many(res, new.values), predict_many(res, new.values, threads=2))


class TestSurface:
    def test_zero_c_is_affine_in_x(self, small_dataset):
        res = fit_thinspline(small_dataset)
        zero = FitResult(np.zeros(res.n), np.array([0.7, 1.3]), res.lam, 0.0, 2.0, res.fitted,
                         transform=res.transform, grid=res.grid, train_values=res.train_values)
        x = np.linspace(0, 1, 5)
        S = eval_surface(zero, [0.0, 0.5, 1.0], x)
        np.testing.assert_allclose(S, np.tile(0.7 + 1.3 * x, (3, 1)), atol=1e-14)

    def test_integral_along_curve_is_prediction(self, small_dataset):
        res = fit_thinspline(small_dataset, lam=1e-3)
        x = res.train_values[4]
        along = np.array([eval_surface(res, [t], [xv])[0, 0] for t, xv in zip(res.grid.points, x)])
        assert along @ res.grid.weights == pytest.approx(res.fitted[4], abs=1e-10)
        assert np.all(np.isfinite(along))

    def test_out_of_range(self, small_dataset):
        res = fit_thinspline(small_dataset)
        with pytest.raises(InputError):
            eval_surface(res, [1.2], [0.5])

    def test_nonlinear_surface(self):
        cfg = ExperimentConfig("nonlinear_cos", 0.5, None, n_train=40, n_test=2, grid_size=41)
        res = fit_thinspline(generate(cfg)[0])
        t = np.linspace(0, 1, 50)
        x = np.linspace(0, 1, 50)
        S = eval_surface(res, t, x)
        A = np.column_stack([np.ones_like(x), x])
        resid = S.T - A @ np.linalg.lstsq(A, S.T, rcond=None)[0]
        assert np.abs(resid).max() > 1e-2

    def test_csv(self, tmp_path):
        path = tmp_path / "s.csv"
        write_surface_csv(path, [0.0, 1.0], [0.25], np.array([[1.0], [2.0]]))
        assert path.read_text() == "t,x,F\n0,0.25,1\n1,0.25,2\n"


class TestSerialization:
    def test_round_trip(self, tmp_path, small_dataset):
        res = fit_thinspline(small_dataset)
        path = tmp_path / "fit.json"
        save_fit(res, path)
        back = load_fit(path)
        new = random_instance(12, 5)[0]
        np.testing.assert_array_equal(predict_many(back, new.values), predict_many(res, new.values))
        doc = json.loads(path.read_text())
        for key in ("m", "lambda", "intercept", "d3", "c", "transform", "grid", "curves"):
            assert key in doc
        assert set(doc["transform"]) >= {"lo", "hi"}

    def test_missing_field(self, small_dataset):
        doc = fit_to_dict(fit_thinspline(small_dataset))
        del doc["c"]
        with pytest.raises(InputError, match="'c'"):
            fit_from_dict(doc)
