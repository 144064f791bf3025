import numpy as np
import pytest

from lapar.assembly import CoefficientMap, predict_basisconv
from lapar.dictionary import build_dictionary, preset_config, random_dictionary
from lapar.imaging import extract_patches
from lapar.oracle import (RidgeProblem, ablation_report, dense_window_solve, fit_global, fit_windowed,
                          single_filter_residuals, window_objective, write_ablation)
from lapar.synthetic import synthetic_image, synthetic_set
from lapar.train import prepare_task_data


@pytest.fixture
def plane():
    return synthetic_image(4, 32, 1).pixels[0]


def test_global_recovers_shared_coefficients(plane, rng):
    d = random_dictionary(2, 14)
    phi_true = rng.normal(size=14)
    y = predict_basisconv(plane, CoefficientMap(np.broadcast_to(phi_true[:, None, None], (14, 32, 32)).copy()), d)
    fit = fit_global(extract_patches(plane, 5), d, y)
    assert fit.residual <= 1e-8


def test_global_identity_target_in_span(plane):
    d = build_dictionary(preset_config("72"))  # delta lies in the span (DoG = delta + difference)
    fit = fit_global(extract_patches(plane, 5), d, plane)
    assert fit.residual <= 1e-8
    assert fit.rank_deficient


def test_global_dominates_single_filters(plane):
    d = build_dictionary(preset_config("24"))
    target = synthetic_image(5, 32, 1).pixels[0]
    p = extract_patches(plane, 5)
    fit = fit_global(p, d, target)
    assert fit.residual <= single_filter_residuals(p, d, target).min() + 1e-8


def test_global_needs_enough_pixels():
    with pytest.raises(ValueError):
        fit_global(extract_patches(np.zeros((3, 3)), 5), random_dictionary(0, 14), np.zeros((3, 3)))


def test_windowed_matches_dense_solver(rng):
    d = random_dictionary(7, 14)
    img = rng.random((8, 8))
    y = rng.random((8, 8))
    prob = RidgeProblem.from_patches(extract_patches(img, 5), d, y, window=3, ridge_lambda=1e-3)
    fit = fit_windowed(prob)
    for (yy, xx) in [(0, 0), (0, 5), (3, 4), (7, 7), (4, 0)]:
        np.testing.assert_allclose(fit.phi.coeffs[:, yy, xx], dense_window_solve(prob, yy, xx),
                                   rtol=1e-8, atol=1e-10)


def test_window_objective_matches_explicit_sum(rng):
    d = random_dictionary(4, 6)
    prob = RidgeProblem.from_patches(extract_patches(rng.random((7, 9)), 5), d, rng.random((7, 9)), 3, 1e-2)
    phi = rng.normal(size=(6, 7, 9))
    got = window_objective(prob, CoefficientMap(phi))
    for (y0, x0) in [(0, 0), (3, 4), (6, 8), (0, 5)]:
        ys = slice(max(0, y0 - 1), y0 + 2)
        xs = slice(max(0, x0 - 1), x0 + 2)
        a = prob.responses[ys, xs].reshape(-1, 6)
        b = prob.targets[ys, xs].reshape(-1)
        want = np.sum((a @ phi[:, y0, x0] - b) ** 2) + 1e-2 * np.sum(phi[:, y0, x0] ** 2)
        assert got[y0, x0] == pytest.approx(want, rel=1e-12)


def test_windowed_fit_minimises_window_objective(rng):
    d = build_dictionary(preset_config("14"))
    p = extract_patches(rng.random((12, 12)), 5)
    y = rng.random((12, 12))
    prob = RidgeProblem.from_patches(p, d, y)
    fit = fit_windowed(prob)
    best = window_objective(prob, fit.phi)
    for _ in range(3):
        moved = CoefficientMap(fit.phi.coeffs + 1e-3 * rng.normal(size=fit.phi.coeffs.shape))
        assert np.all(best <= window_objective(prob, moved) + 1e-12)
    assert np.all(best <= window_objective(prob, fit_global(p, d, y).phi) + 1e-12)


def test_windowed_shrinkage_limit(plane):
    d = random_dictionary(0, 14)
    fit = fit_windowed(RidgeProblem.from_patches(extract_patches(plane, 5), d, plane, 5, 1e12))
    assert np.abs(fit.phi.coeffs).max() < 1e-8
    assert np.abs(fit.prediction).max() < 1e-8


def test_windowed_constant_target_exact():
    # every unit-sum basis maps a constant to itself, so the target is reachable
    d = build_dictionary(preset_config("72"))
    img = np.full((12, 12), 0.3)
    fit = fit_windowed(RidgeProblem.from_patches(extract_patches(img, 5), d, img, 7, 1e-10))
    assert np.max((fit.prediction - img) ** 2) <= 1e-8


def test_refinement_chain_entailed_order():
    # each window's own solution beats the shared one on that window; the shared one beats any single basis
    hr = synthetic_image(9, 32, 1)
    data = prepare_task_data([hr], "sr", {"scale": 2})
    from lapar.imaging import bicubic_resize

    up = bicubic_resize(data.pairs[0][0], 2).pixels[0]
    y = hr.pixels[0]
    for d in (build_dictionary(preset_config("14")), random_dictionary(0, 14)):
        p = extract_patches(up, 5)
        g = fit_global(p, d, y)
        prob = RidgeProblem.from_patches(p, d, y)
        w = fit_windowed(prob)
        assert np.all(window_objective(prob, w.phi) <= window_objective(prob, g.phi) + 1e-8)
        assert g.residual <= single_filter_residuals(p, d, y).min() + 1e-8


def test_superset_never_worse_without_ridge(plane):
    small = build_dictionary(preset_config("14"))
    big = build_dictionary(preset_config("72"))
    target = synthetic_image(6, 32, 1).pixels[0]
    p = extract_patches(plane, 5)
    assert fit_global(p, big, target).residual <= fit_global(p, small, target).residual + 1e-10


def test_ridge_problem_validation():
    r = np.zeros((4, 4, 14))
    with pytest.raises(ValueError):
        RidgeProblem(r, np.zeros((4, 4)), window=4)
    with pytest.raises(ValueError):
        RidgeProblem(r, np.zeros((4, 4)), window=3, ridge_lambda=0.0)
    with pytest.raises(ValueError):
        RidgeProblem(r, np.zeros((4, 5)))


def test_ablation_report_sorted_deterministic(tmp_path):
    imgs = synthetic_set(2, 3, 32, 3)
    pairs = prepare_task_data(imgs, "sr", {"scale": 2}).pairs
    dicts = [build_dictionary(preset_config("14")), build_dictionary(preset_config("72")), random_dictionary(0, 14)]
    a = ablation_report(dicts, pairs, 2)
    b = ablation_report(dicts, pairs, 2)
    assert a == b
    assert [r["psnr_db"] for r in a] == sorted((r["psnr_db"] for r in a), reverse=True)
    by = {r["dictionary"]: r["psnr_db"] for r in a}
    assert by["gdog72"] >= by["gdog14"]
    write_ablation(a, tmp_path / "t.tsv")
    lines = (tmp_path / "t.tsv").read_text().splitlines()
    assert lines[0] == "dictionary-name\tL\tPSNR-dB\tmean-residual"
    assert len(lines) == 4
    with pytest.raises(ValueError):
        ablation_report([], pairs)
