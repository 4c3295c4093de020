"""Constructed click streams with known ground truth."""
import numpy as np

from qdqkd.detection import ALICE, BOB, ClickStream


def correlated_streams(n_pairs, offset_ps, drift_ppm=0.0, seed=0, rate_hz=1e5, flip=0.02,
                       background_hz=0.0, jitter_ps=100.0, t0_ps=0):
    """Pairs on a Poisson time axis; Bob's clock is ``t (1 + drift) + offset``.

    Same-basis outcomes agree except for a ``flip`` fraction; ``background_hz``
    of uncorrelated clicks is added to each side.
    """
    rng = np.random.default_rng(seed)
    t = t0_ps + np.cumsum(rng.exponential(1e12 / rate_hz, n_pairs)).astype(np.int64)
    basis_a = rng.integers(0, 2, n_pairs)
    basis_b = rng.integers(0, 2, n_pairs)
    bit_a = rng.integers(0, 2, n_pairs)
    same = basis_a == basis_b
    bit_b = np.where(same, bit_a ^ (rng.random(n_pairs) < flip), rng.integers(0, 2, n_pairs))
    ta, ca = t, (2 * basis_a + bit_a).astype(np.uint8)
    tb = t + np.rint(rng.normal(0, jitter_ps, n_pairs)).astype(np.int64)
    cb = (2 * basis_b + bit_b).astype(np.uint8)
    span = int(t[-1] - t[0]) + 1
    if background_hz > 0:
        k = rng.poisson(background_hz * span * 1e-12, 2)
        ta = np.concatenate([ta, t[0] + rng.integers(0, span, k[0])])
        ca = np.concatenate([ca, rng.integers(0, 4, k[0]).astype(np.uint8)])
        tb = np.concatenate([tb, t[0] + rng.integers(0, span, k[1])])
        cb = np.concatenate([cb, rng.integers(0, 4, k[1]).astype(np.uint8)])
    oa, ob = np.argsort(ta, kind="stable"), np.argsort(tb, kind="stable")
    ta, ca, tb, cb = ta[oa], ca[oa], tb[ob], cb[ob]
    # exact integer arithmetic for the affine clock map
    tb = tb + np.int64(offset_ps) + np.rint(tb.astype(np.float64) * drift_ppm * 1e-6).astype(np.int64)
    return ClickStream(ta, ca, ALICE), ClickStream(tb, cb, BOB)


def poisson_stream(rate_hz, duration_s, seed, node=ALICE):
    rng = np.random.default_rng(seed)
    n = rng.poisson(rate_hz * duration_s)
    t = np.sort(rng.integers(0, int(duration_s * 1e12), n))
    return ClickStream(t.astype(np.int64), rng.integers(0, 4, n).astype(np.uint8), node)
