import numpy as np
import torch


def central_difference(f, x: torch.Tensor, h: float) -> np.ndarray:
    """Numerical gradient of scalar ``f()`` with respect to ``x``, perturbing ``x`` in place."""
    out = np.zeros(x.shape)
    flat = x.data.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        out.reshape(-1)[i] = (up - down) / (2 * h)
    return out


def rel_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def brute_force_auc(scores, labels) -> float:
    """Fraction of (abnormal, normal) pairs where the abnormal sample scores higher; ties count half."""
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(pos) * len(neg))


TINY_ARCH_KW = dict(input_size=32, channels=3, latent_dim=16, base_width=4)


def tiny_split(count: int = 20, seed: int = 0, abnormal_ratio: float = 0.3):
    """Small 32x32 synthetic scene split used where training speed matters."""
    from ganomaly.datasets import SceneConfig, generate_synthetic_scenes

    return generate_synthetic_scenes(
        SceneConfig(count=count, image_size=32, channels=3, abnormal_ratio=abnormal_ratio, seed=seed)
    )
