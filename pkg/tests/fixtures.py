"""Score-set fixtures that reproduce published confusion-matrix cells."""

import numpy as np

from ganomaly.scoring import ScoreSet, from_arrays, scale_global


def _scaled_set(normal_scores, abnormal_scores) -> ScoreSet:
    """Global scaling over raw scores that already span exactly [0, 1] is the identity map."""
    raw = np.concatenate([[0.0], normal_scores, abnormal_scores, [1.0]])
    labels = [0] + [0] * len(normal_scores) + [1] * len(abnormal_scores) + [1]
    s = scale_global(from_arrays(raw, labels))
    assert np.array_equal(s.scaled, raw)
    return s


def cells_fixture(tp, fp, fn, tn, tau=0.5, seed=0) -> ScoreSet:
    """Scores whose partition at ``tau`` gives exactly (tp, fp, fn, tn), Normal positive.

    Two anchor samples (a normal at 0, a novel at 1) are included in the counts.
    """
    rng = np.random.default_rng(seed)
    below = lambda n: rng.uniform(0.0, tau, n)  # noqa: E731
    above = lambda n: rng.uniform(tau, 1.0, n) + 1e-9  # noqa: E731
    normal = np.concatenate([below(tp - 1), np.minimum(above(fn), 1.0)])
    abnormal = np.concatenate([below(fp), np.minimum(above(tn - 1), 1.0)])
    return _scaled_set(normal, abnormal)


def sweep_fixture(seed=0) -> ScoreSet:
    """902 normals, 957 novel; at tau = 0.47 the cells are (878, 44, 24, 913).

    Inside the swept band [0.40, 0.55] each 0.01-wide bin below 0.47 holds
    more normals than novel samples and each bin above holds more novel ones,
    so accuracy climbs strictly up to 0.47 and falls strictly after it.
    """
    rng = np.random.default_rng(seed)
    bins = [(round(0.40 + k * 0.01, 2), round(0.41 + k * 0.01, 2)) for k in range(15)]
    band_normal, band_abnormal = [], []
    for lo, hi in bins:
        # bin (lo, hi] decides between thresholds lo and hi
        n_norm, n_abn = (3, 1) if hi <= 0.47 else (1, 3)
        # strictly inside the bin, clear of both grid points
        band_normal += list(lo + (hi - lo) * rng.uniform(0.1, 0.9, n_norm))
        band_abnormal += list(lo + (hi - lo) * rng.uniform(0.1, 0.9, n_abn))
    band_normal, band_abnormal = np.array(band_normal), np.array(band_abnormal)
    n_band_norm_low = int(np.sum(band_normal <= 0.47))
    n_band_norm_high = len(band_normal) - n_band_norm_low
    n_band_abn_low = int(np.sum(band_abnormal <= 0.47))
    n_band_abn_high = len(band_abnormal) - n_band_abn_low
    normal = np.concatenate(
        [
            rng.uniform(0.0, 0.4, 878 - 1 - n_band_norm_low),
            band_normal,
            rng.uniform(0.56, 1.0, 24 - n_band_norm_high),
        ]
    )
    abnormal = np.concatenate(
        [
            rng.uniform(0.0, 0.4, 44 - n_band_abn_low),
            band_abnormal,
            rng.uniform(0.56, 1.0, 913 - 1 - n_band_abn_high),
        ]
    )
    return _scaled_set(normal, abnormal)


def brute_force_cells(scaled, labels, tau):
    tp = fp = fn = tn = 0
    for v, lab in zip(scaled, labels):
        novel = v > tau
        if not novel and not lab:
            tp += 1
        elif not novel and lab:
            fp += 1
        elif novel and not lab:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn
