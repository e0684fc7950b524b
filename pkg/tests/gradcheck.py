"""Finite-difference gradient oracle shared by unit and acceptance tests.

Central differences approximate the derivative only where the loss is
smooth on the whole [w-eps, w+eps] interval. ReLU makes the loss piecewise
smooth: when a perturbation flips the sign of any pre-activation, the
difference quotient mixes two linear pieces and stops being a derivative
estimate, so such coordinates are excluded from the comparison (the two
evaluations report their ReLU sign patterns; a mismatch marks the
coordinate as non-smooth). Typically ~75% of coordinates remain.
"""

import numpy as np

from fedod.tinydet import (
    _build_targets,
    _image_to_input,
    _loss_and_grad,
    _net_forward,
)


def fd_gradient_check(p, image, boxes, cfg, eps=1e-3):
    """Compare backward()'s gradient to float64 central differences.

    Returns (max_relative_error, checked, skipped) where `checked` counts
    coordinates compared and `skipped` counts kink-crossing coordinates.
    Relative error per coordinate is |a - fd| / max(|a|, |fd|, 1e-6); the
    1e-6 floor only mutes coordinates whose gradient is negligible on the
    loss scale (loss values are O(1..10)).
    """
    from fedod.tinydet import backward

    analytic = backward(p, image, boxes, cfg)
    w64 = {t.name: t.values.astype(np.float64) for t in p}
    x64 = _image_to_input(image, cfg, np.float64)
    resp, coords, classes = _build_targets([boxes], cfg)

    def eval_loss(w):
        out, cache = _net_forward(w, x64, cfg)
        per_sample, _ = _loss_and_grad(out, resp, coords, classes, cfg)
        z1, z2 = cache[2], cache[5]
        signs = (np.signbit(z1).tobytes(), np.signbit(z2).tobytes())
        return float(per_sample[0]), signs

    worst, checked, skipped = 0.0, 0, 0
    for t in p:
        flat = w64[t.name].reshape(-1)
        g_an = analytic.array(t.name).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi, signs_hi = eval_loss(w64)
            flat[i] = orig - eps
            lo, signs_lo = eval_loss(w64)
            flat[i] = orig
            if signs_hi != signs_lo:
                skipped += 1
                continue
            fd = (hi - lo) / (2 * eps)
            a = float(g_an[i])
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
            worst = max(worst, rel)
            checked += 1
    return worst, checked, skipped
