"""Monte Carlo checks of destructive weight sharing, feature similarity and
power-law fitting."""

import logging
import math
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

ENSEMBLES = ("haar", "perm_sign")


@dataclass
class PropStats:
    M: int
    trials: int
    mean_inner: float
    std_inner: float
    mean_cos2: float
    std_cos2: float = 0.0
    ensemble: str = "haar"

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")

    @property
    def stderr_inner(self):
        return self.std_inner / math.sqrt(self.trials)

    @property
    def stderr_cos2(self):
        return self.std_cos2 / math.sqrt(self.trials)

    @property
    def prop1_threshold(self):
        return 3 * self.stderr_inner

    @property
    def prop2_threshold(self):
        return 0.05 / self.M + 3 * self.stderr_cos2

    @property
    def prop1_passed(self):
        return abs(self.mean_inner) <= self.prop1_threshold

    @property
    def prop2_passed(self):
        return abs(self.mean_cos2 - 1.0 / self.M) < self.prop2_threshold


def sample_haar_orthogonal(M, seed=None):
    """Haar-distributed M x M orthogonal matrix.

    Householder QR (LAPACK) of an i.i.d. Gaussian matrix, with column ``j``
    of Q multiplied by ``sign(R[j, j])`` so the result does not depend on the
    QR sign convention.
    """
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((M, M))
    q, r = np.linalg.qr(g)
    d = np.sign(np.diag(r))
    d[d == 0] = 1
    return q * d


def haar_rotate(vectors, rng):
    """Apply an independent Haar rotation to each row of ``vectors``.

    Same distribution as multiplying by :func:`sample_haar_orthogonal`, but
    without forming the matrix: the Q factor of a Gaussian matrix is the
    product ``H_1 H_2 ... H_M`` of Householder reflectors whose vectors are
    independent Gaussians of dimension ``M, M-1, ..., 1`` (each reflector sends
    its vector to ``+|v| e_1``, i.e. R has a positive diagonal).  The product
    is applied right to left at O(M^2) cost per row.
    """
    out = np.array(vectors, dtype=np.float64, copy=True)
    n, M = out.shape
    for k in range(M - 1, -1, -1):
        v = rng.standard_normal((n, M - k))
        norm = np.linalg.norm(v, axis=1)
        u = v.copy()
        u[:, 0] -= norm
        unorm2 = (u * u).sum(axis=1)
        ok = unorm2 > 0
        tail = out[:, k:]
        proj = (u * tail).sum(axis=1)
        scale = np.where(ok, 2 * proj / np.where(ok, unorm2, 1), 0.0)
        tail -= scale[:, None] * u
    return out


def perm_sign_rotate(vectors, rng):
    """Apply an independent random signed permutation to each row."""
    vectors = np.asarray(vectors, dtype=np.float64)
    n, M = vectors.shape
    perms = rng.permuted(np.tile(np.arange(M), (n, 1)), axis=1)
    signs = np.where(rng.random((n, M)) < 0.5, -1.0, 1.0)
    return signs * np.take_along_axis(vectors, perms, axis=1)


_ROTATORS = {"haar": haar_rotate, "perm_sign": perm_sign_rotate}


def prop_stats(M, trials, ensemble="haar", seed=0, tied=False, chunk=20000):
    """Inner products of one unit filter under independent pairs of transforms.

    A fixed unit ``f`` is drawn from the seed; each trial draws ``A_i`` and
    ``A_j`` from ``ensemble`` and records ``<A_i f, A_j f>`` and its square
    after normalization.  With ``tied`` the same transform is used twice.
    """
    if ensemble not in _ROTATORS:
        raise ValueError(f"unknown ensemble {ensemble!r}")
    if M < 1 or trials < 1:
        raise ValueError("M and trials must be >= 1")
    rotate = _ROTATORS[ensemble]
    rng = np.random.default_rng([seed, M, ENSEMBLES.index(ensemble)])
    f = rng.standard_normal(M)
    f /= np.linalg.norm(f)
    inner = np.empty(trials)
    cos2 = np.empty(trials)
    done = 0
    while done < trials:
        n = min(chunk, trials - done)
        base = np.broadcast_to(f, (n, M))
        fi = rotate(base, rng)
        fj = fi if tied else rotate(base, rng)
        dots = (fi * fj).sum(axis=1)
        norms = np.linalg.norm(fi, axis=1) * np.linalg.norm(fj, axis=1)
        inner[done:done + n] = dots
        cos2[done:done + n] = (dots / norms) ** 2
        done += n
    return PropStats(M, trials, float(inner.mean()), float(inner.std(ddof=1))
                     if trials > 1 else 0.0, float(cos2.mean()),
                     float(cos2.std(ddof=1)) if trials > 1 else 0.0, ensemble)


def verify_prop1(M, trials, ensemble="haar", seed=0, tied=False):
    """Expected inner product of two independently transformed copies is zero."""
    if trials < 1000:
        raise ValueError("verify_prop1 needs at least 1000 trials")
    return prop_stats(M, trials, ensemble, seed, tied)


def verify_prop2(M, trials, ensemble="haar", seed=0, tied=False):
    """Expected squared cosine between transformed copies is ``1 / M``."""
    if trials < 1000:
        raise ValueError("verify_prop2 needs at least 1000 trials")
    return prop_stats(M, trials, ensemble, seed, tied)


def feature_similarity(activations, bins=20):
    """Normalized histogram of off-diagonal |Pearson correlation| between channels.

    Returns ``(hist, edges, n_constant)``; constant channels correlate 0 with
    everything and are counted in ``n_constant``.
    """
    a = np.asarray(activations, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None, None]
    if a.ndim != 4 or a.shape[1] < 2:
        raise ValueError("need NCHW activations with at least two channels")
    c = a.shape[1]
    flat = a.transpose(1, 0, 2, 3).reshape(c, -1)
    centered = flat - flat.mean(axis=1, keepdims=True)
    norms = np.sqrt((centered * centered).sum(axis=1))
    const = norms <= 1e-12 * max(1.0, float(np.abs(flat).max(initial=0.0)))
    n_constant = int(const.sum())
    if n_constant:
        log.warning("%d constant channel(s); their correlations are set to 0",
                    n_constant)
    safe = np.where(const, 1.0, norms)
    corr = (centered @ centered.T) / np.outer(safe, safe)
    corr[const, :] = 0
    corr[:, const] = 0
    off = np.abs(corr[~np.eye(c, dtype=bool)])
    off = np.clip(off, 0.0, 1.0)
    hist, edges = np.histogram(off, bins=bins, range=(0.0, 1.0))
    return hist / hist.sum(), edges, n_constant


def fit_power_law(points):
    """Least-squares fit of ``ln y = a + b ln n``; returns ``(a, b, r2)``."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
        raise ValueError("need at least three (n, y) points")
    if (pts <= 0).any():
        raise ValueError("power-law fit needs positive n and y")
    ln_n = np.log(pts[:, 0])
    ln_y = np.log(pts[:, 1])
    design = np.column_stack([np.ones_like(ln_n), ln_n])
    (a, b), *_ = np.linalg.lstsq(design, ln_y, rcond=None)
    resid = ln_y - (a + b * ln_n)
    ss_tot = float(((ln_y - ln_y.mean()) ** 2).sum())
    ss_res = float((resid ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(a), float(b), r2
