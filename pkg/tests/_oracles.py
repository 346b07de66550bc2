"""Independent scalar reference implementations used by the tests.

Everything here is plain Python / NumPy written from the formulas, with no
calls into the package, so a shared bug cannot make both sides agree.
"""

import itertools
import math

import numpy as np


def dot(a, b):
    return sum(float(x) * float(y) for x, y in zip(a, b))


def cos_ref(a, b):
    return dot(a, b) / math.sqrt(dot(a, a) * dot(b, b))


def triplet_ref(p_pos, q_pos, q_neg, p_neg, margin):
    """Batch mean of min(s++ - s(p+,q-) - m, 0) + min(s++ - s(p-,q+) - m, 0)."""
    vals = []
    for pp, qp, qn, pn in zip(p_pos, q_pos, q_neg, p_neg):
        s = cos_ref(pp, qp)
        vals.append(min(s - cos_ref(pp, qn) - margin, 0.0) + min(s - cos_ref(pn, qp) - margin, 0.0))
    return sum(vals) / len(vals)


def kl_ref(mu, logvar):
    """Mean over rows of 0.5 * sum(mu^2 + exp(lv) - 1 - lv)."""
    rows = []
    for m_row, l_row in zip(mu, logvar):
        rows.append(0.5 * sum(m * m + math.exp(l) - 1.0 - l for m, l in zip(m_row, l_row)))
    return sum(rows) / len(rows)


def kl_monte_carlo(mu, logvar, n, rng):
    """E_q[log q(x) - log p(x)] for one diagonal Gaussian row, by sampling."""
    mu, logvar = np.asarray(mu, float), np.asarray(logvar, float)
    sd = np.exp(0.5 * logvar)
    x = mu + sd * rng.standard_normal((n, len(mu)))
    log_q = -0.5 * (((x - mu) / sd) ** 2 + logvar + math.log(2 * math.pi)).sum(1)
    log_p = -0.5 * (x**2 + math.log(2 * math.pi)).sum(1)
    return float(np.mean(log_q - log_p))


def mean(xs):
    xs = [float(x) for x in xs]
    return sum(xs) / len(xs)


def cond_d_ref(d_real, d_wrong, d_fake):
    return (-mean(math.log(x) for x in d_real) - mean(math.log(1 - x) for x in d_wrong)
            - mean(math.log(1 - x) for x in d_fake))


def uncond_d_ref(d_real, d_wrong, d_fake):
    return (-mean(math.log(x) for x in d_real) - mean(math.log(x) for x in d_wrong)
            - mean(math.log(1 - x) for x in d_fake))


def generator_ref(cond_fake, uncond_fake, cycle, kl, w_uncond, w_ca, w_cycle):
    total = w_ca * kl
    for dc, du, cy in zip(cond_fake, uncond_fake, cycle):
        total += -mean(math.log(x) for x in dc) - w_uncond * mean(math.log(x) for x in du) - w_cycle * cy
    return total


def cycle_ref(q_real, q_fake):
    return mean(cos_ref(a, b) for a, b in zip(q_real, q_fake))


def central_fd(f, x, eps=1e-6):
    """Central finite-difference gradient of scalar ``f`` at float64 array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f(x)
        x[i] = old - eps
        lo = f(x)
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / scale)


def brute_force_fusions(vectors, tokens, threshold):
    out = []
    for i, j in itertools.combinations(range(len(tokens)), 2):
        a, b = np.asarray(vectors[i], np.float64), np.asarray(vectors[j], np.float64)
        na, nb = math.sqrt(a @ a), math.sqrt(b @ b)
        if na == 0 or nb == 0:
            continue
        s = float(a @ b) / (na * nb)
        if s >= threshold:
            out.append((tokens[i], tokens[j], s))
    return out


def sqrtm_ref(m):
    """Matrix square root by eigendecomposition of a symmetric PSD matrix."""
    vals, vecs = np.linalg.eigh(m)
    return vecs @ np.diag(np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def fid_ref(mu_a, cov_a, mu_b, cov_b):
    """Frechet distance via Tr((S_a S_b)^1/2) = sum sqrt(eig(S_a S_b)) (real, non-negative)."""
    eig = np.linalg.eigvals(cov_a @ cov_b)
    tr_root = np.sqrt(np.clip(eig.real, 0, None)).sum()
    d = mu_a - mu_b
    return float(d @ d + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_root)


def lower_median_ref(xs):
    xs = sorted(xs)
    return xs[(len(xs) - 1) // 2]


def ranks_ref(queries, pool):
    """Rank of pool[i] for query i by sorting (similarity desc, index asc)."""
    out = []
    for i, q in enumerate(queries):
        scored = sorted(range(len(pool)), key=lambda j: (-cos_ref(q, pool[j]), j))
        out.append(scored.index(i) + 1)
    return out
