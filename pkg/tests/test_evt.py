import math

import numpy as np
import pytest

from labelforge import errors
from labelforge.data import EmbeddingSet, LinearHead
from labelforge.evt import (
    DISJOINT,
    OVERLAP,
    REJECTED,
    MixtureSeparation,
    WeibullParams,
    fit_sse,
    fit_two_weibull_mixture,
    gaussian_pdf,
    load_mixture,
    max_logits,
    otsu_threshold,
    save_mixture,
    separate_overlap,
    weibull_eval,
    weibull_fit_mle,
    weibull_sample,
)


def otsu_oracle(scores, n_bins):
    """Exhaustive between-class-variance maximization over all bin edges."""
    x = np.asarray(scores, dtype=np.float64)
    counts, edges = np.histogram(x, bins=n_bins, range=(x.min(), x.max()))
    centers = 0.5 * (edges[:-1] + edges[1:])
    best_t, best_v = None, -1.0
    for cut in range(1, n_bins):
        w0 = counts[:cut].sum()
        w1 = counts[cut:].sum()
        if w0 == 0 or w1 == 0:
            v = 0.0
        else:
            m0 = (counts[:cut] * centers[:cut]).sum() / w0
            m1 = (counts[cut:] * centers[cut:]).sum() / w1
            v = w0 * w1 * (m0 - m1) ** 2
        if v > best_v:
            best_v, best_t = v, edges[cut]
    return float(best_t)


def test_otsu_symmetric_bimodal():
    t = otsu_threshold([0, 0, 0, 1, 1, 1], n_bins=2)
    assert t == pytest.approx(0.5)


def test_otsu_two_groups():
    t = otsu_threshold([1, 2, 3, 10, 11, 12], n_bins=256)
    assert 3 < t < 10
    assert t == pytest.approx(otsu_oracle([1, 2, 3, 10, 11, 12], 256))


def test_otsu_matches_oracle_randomized():
    rng = np.random.default_rng(0)
    for trial in range(30):
        n_bins = int(rng.integers(2, 65))
        x = np.concatenate([
            rng.normal(0, 1, 100),
            rng.normal(rng.uniform(2, 6), 1, 100),
        ])
        assert otsu_threshold(x, n_bins=n_bins) == otsu_oracle(x, n_bins)


def test_otsu_degenerate():
    with pytest.raises(errors.DegenerateScores):
        otsu_threshold([3.0, 3.0, 3.0])


def test_weibull_fit_exponential():
    rng = np.random.default_rng(1)
    x = rng.exponential(scale=2.0, size=10_000)  # Weibull(k=1, lambda=2)
    p = weibull_fit_mle(x)
    assert abs(p.shape_k - 1.0) / 1.0 < 0.05
    assert abs(p.scale_lambda - 2.0) / 2.0 < 0.05


def test_weibull_fit_recovery():
    rng = np.random.default_rng(2)
    gen = WeibullParams(shape_k=2.0, scale_lambda=1.5)
    x = weibull_sample(gen, 10_000, rng)
    p = weibull_fit_mle(x)
    assert abs(p.shape_k - 2.0) / 2.0 < 0.05
    assert abs(p.scale_lambda - 1.5) / 1.5 < 0.05


def test_weibull_fit_constant_samples():
    with pytest.raises(errors.TooFewSamples):
        weibull_fit_mle(np.ones(100))


def test_weibull_fit_too_few():
    with pytest.raises(errors.TooFewSamples):
        weibull_fit_mle([1.0, 2.0, 3.0])


def test_weibull_fit_negative_data_shifted():
    rng = np.random.default_rng(3)
    x = weibull_sample(WeibullParams(2.0, 1.0), 5000, rng) - 5.0
    p = weibull_fit_mle(x)
    assert p.shift < x.min()
    assert p.shape_k > 0


def test_weibull_cdf_at_scale():
    p = WeibullParams(shape_k=2.5, scale_lambda=1.3, shift=0.2)
    assert weibull_eval(p, 0.2 + 1.3, "cdf") == pytest.approx(1 - math.exp(-1), abs=1e-12)


def test_weibull_pdf_below_shift():
    p = WeibullParams(shape_k=2.0, scale_lambda=1.0, shift=1.0)
    assert weibull_eval(p, 0.5, "pdf") == 0.0


def test_weibull_quantile_closed_form():
    p = WeibullParams(shape_k=2.0, scale_lambda=1.0)
    assert weibull_eval(p, 0.95, "quantile") == pytest.approx(
        math.sqrt(-math.log(0.05)), abs=1e-9
    )
    assert weibull_eval(p, 0.95, "quantile") == pytest.approx(1.7308, abs=1e-4)


def test_weibull_quantile_out_of_range():
    p = WeibullParams(1.0, 1.0)
    with pytest.raises(errors.QuantileOutOfRange):
        weibull_eval(p, 1.5, "quantile")


def test_quantile_cdf_identity():
    p = WeibullParams(shape_k=1.7, scale_lambda=2.2, shift=-0.3)
    for x in np.linspace(p.shift + 1e-3, p.shift + 5 * p.scale_lambda, 50):
        q = weibull_eval(p, weibull_eval(p, float(x), "cdf"), "quantile")
        assert q == pytest.approx(float(x), abs=1e-9)


def test_cdf_is_integral_of_pdf():
    p = WeibullParams(shape_k=2.3, scale_lambda=0.9, shift=0.5)
    for x in [0.7, 1.0, 1.8, 3.0]:
        grid = np.linspace(p.shift, x, 20_001)
        pdf_vals = np.array([weibull_eval(p, float(g), "pdf") for g in grid])
        integral = np.trapezoid(pdf_vals, grid)
        assert integral == pytest.approx(weibull_eval(p, x, "cdf"), abs=1e-6)


def test_mle_local_optimality():
    rng = np.random.default_rng(4)
    x = weibull_sample(WeibullParams(1.8, 1.2), 2000, rng)
    p = weibull_fit_mle(x)

    def loglik(k, lam):
        z = x / lam
        return np.sum(np.log(k / lam) + (k - 1) * np.log(z) - z**k)

    center = loglik(p.shape_k, p.scale_lambda)
    for k in np.linspace(p.shape_k * 0.9, p.shape_k * 1.1, 21):
        for lam in np.linspace(p.scale_lambda * 0.9, p.scale_lambda * 1.1, 21):
            assert loglik(k, lam) <= center + 1e-9


def test_max_logits():
    head = LinearHead(np.array([[1.0, 0.0], [0.0, 1.0]]))
    emb = EmbeddingSet(np.array([[1.0, 0.0], [0.6, 0.8]]), normalized=True)
    z = max_logits(head, emb)
    np.testing.assert_allclose(z, [1.0, 0.8])


def test_max_logits_dimension_mismatch():
    head = LinearHead(np.eye(3))
    emb = EmbeddingSet(np.array([[0.6, 0.8]]), normalized=True)
    with pytest.raises(errors.DimensionMismatch):
        max_logits(head, emb)


def _bimodal_scores(seed=0, n=500):
    rng = np.random.default_rng(seed)
    low = weibull_sample(WeibullParams(2.0, 0.5), n, rng)
    high = weibull_sample(WeibullParams(3.0, 0.5), n, rng) + 3.0
    return np.concatenate([low, high])


def test_mixture_well_separated():
    x = _bimodal_scores()
    mix = fit_two_weibull_mixture(x)
    assert mix.lower_cut < mix.upper_cut
    assert x[: len(x) // 2].mean() < mix.otsu_t < x[len(x) // 2 :].mean()


def test_mixture_unimodal_one_sided():
    rng = np.random.default_rng(5)
    x = rng.normal(10, 0.001, 300)
    x[0] += 5.0  # a single far value pulls Otsu past one side
    with pytest.raises(errors.OneSidedData):
        fit_two_weibull_mixture(x)


def test_separation_decisions():
    x = _bimodal_scores(seed=1)
    mix = fit_two_weibull_mixture(x)
    decisions = separate_overlap(np.array([-10.0, 10.0]), mix)
    assert decisions[0] == DISJOINT and decisions[1] == OVERLAP
    mid = 0.5 * (mix.lower_cut + mix.upper_cut)
    assert separate_overlap(np.array([mid]), mix)[0] == REJECTED


def test_separation_monotone():
    x = _bimodal_scores(seed=2)
    mix = fit_two_weibull_mixture(x)
    zs = np.linspace(x.min() - 1, x.max() + 1, 500)
    decisions = separate_overlap(zs, mix)
    changes = np.sum(np.diff(decisions) != 0)
    assert changes <= 2


def test_sse_prefers_true_model():
    rng = np.random.default_rng(6)
    gen = WeibullParams(1.5, 1.0)
    x = weibull_sample(gen, 20_000, rng)
    fitted = weibull_fit_mle(x)
    wrong = WeibullParams(fitted.shape_k, fitted.scale_lambda * 2, fitted.shift)
    sse_good = fit_sse(lambda v: weibull_eval(fitted, v, "pdf"), x)
    sse_bad = fit_sse(lambda v: weibull_eval(wrong, v, "pdf"), x)
    assert sse_good < sse_bad


def test_sse_weibull_beats_gaussian_on_skewed_data():
    rng = np.random.default_rng(7)
    x = weibull_sample(WeibullParams(1.2, 1.0), 20_000, rng)
    wb = weibull_fit_mle(x)
    sse_wb = fit_sse(lambda v: weibull_eval(wb, v, "pdf"), x)
    sse_gauss = fit_sse(gaussian_pdf(float(x.mean()), float(x.std())), x)
    assert sse_wb < sse_gauss


def test_sse_two_bins_by_hand():
    # samples {0.5, 1.5}: bins [0.5,1.0), [1.0,1.5], width 0.5, one sample
    # each -> empirical density 1/(2*0.5) = 1.0 per bin
    samples = np.array([0.5, 1.5])
    model = lambda v: 0.25
    sse = fit_sse(model, samples, n_bins=2)
    assert sse == pytest.approx(2 * (1.0 - 0.25) ** 2, abs=1e-12)


def test_mixture_json_roundtrip(tmp_path):
    x = _bimodal_scores(seed=3)
    mix = fit_two_weibull_mixture(x)
    path = tmp_path / "mix.json"
    save_mixture(mix, path)
    back = load_mixture(path)
    assert back == mix
