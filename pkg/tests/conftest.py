import math

import numpy as np
import pytest

from mixar.model_core import ExpertParams, MixtureModel, SeriesData


def random_expert(rng, kind="mlp", k=2, lags=1, sigma=None):
    sigma = rng.uniform(0.3, 2.0) if sigma is None else sigma
    if kind == "linear":
        return ExpertParams.linear(rng.normal(size=lags), rng.normal(), sigma)
    return ExpertParams.mlp(rng.normal(), rng.normal(size=k), rng.normal(size=k),
                            rng.normal(size=(k, lags)), sigma)


def random_model(rng, p=2, kind="mlp", k=2, lags=1):
    experts = tuple(random_expert(rng, kind, k, lags) for _ in range(p))
    w = rng.dirichlet(np.ones(p)) * 0.9 + 0.1 / p
    return MixtureModel(experts, w / w.sum())


def random_series(rng, n, scale=1.0):
    return SeriesData(rng.normal(scale=scale, size=n))


def naive_mean(expert, window):
    """Straight-line evaluation of an expert's mean function."""
    if expert.kind.value == "linear":
        return sum(a * x for a, x in zip(expert.linear_a, window)) + expert.linear_b
    out = expert.alpha0
    for j in range(expert.hidden_units):
        pre = expert.beta0[j] + sum(b * x for b, x in zip(expert.beta[j], window))
        out += expert.alpha[j] * math.tanh(pre)
    return out


def naive_loglik(model, values):
    """Double loop over transitions and components, no vectorisation."""
    l = model.lags
    total = 0.0
    for t in range(l, len(values)):
        window = values[t - l:t]
        dens = 0.0
        for w, e in zip(model.weights, model.experts):
            r = values[t] - naive_mean(e, window)
            dens += w * math.exp(-r * r / (2 * e.sigma ** 2)) / (e.sigma * math.sqrt(2 * math.pi))
        total += math.log(dens)
    return total


def fd_gradient(expert, window, y, weight, h=1e-6):
    """Central finite differences of weight * log f(y - F(window); sigma)."""
    from mixar.model_core import expert_predict, gaussian_log_density

    theta = expert.to_vector()
    out = np.empty_like(theta)
    for i in range(theta.size):
        up, dn = theta.copy(), theta.copy()
        up[i] += h
        dn[i] -= h
        eu, ed = expert.with_vector(up), expert.with_vector(dn)
        fu = gaussian_log_density(y - expert_predict(eu, window), eu.sigma)
        fd = gaussian_log_density(y - expert_predict(ed, window), ed.sigma)
        out[i] = weight * (fu - fd) / (2 * h)
    return out


def relative_error(a, b):
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


ACCEPTANCE_LINES = []


def record_criterion(number, name, ok, detail=""):
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
