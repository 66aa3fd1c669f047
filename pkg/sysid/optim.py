"""Optimizer drivers over flat parameter vectors: hand-rolled Adam and scipy L-BFGS."""
import logging

import numpy as np
from scipy.optimize import minimize
from tqdm import tqdm

from utils.errors import NumericalError
from utils.log import progress_enabled

logger = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-8


def adam(value_and_grad, x0, iters, lr, accept=None, desc="adam", callback=None, log_every=10):
    """Adam keeping the best iterate.

    `value_and_grad(x)` returns (loss, gradient). A step is rejected when the
    new loss is not finite or `accept(x)` is False; the learning rate is then
    halved and the moments are kept.
    """
    x = np.asarray(x0, dtype=float).copy()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    loss, grad = value_and_grad(x)
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite loss at the initial point of {desc}", iterate=0)
    best_x, best_loss = x.copy(), loss
    step_size = lr
    t = 0
    bar = tqdm(total=iters, desc=desc, disable=not progress_enabled(), leave=False)
    for it in range(iters):
        if not np.all(np.isfinite(grad)):
            raise NumericalError(f"non-finite gradient in {desc} at iterate {it}", iterate=it)
        t += 1
        m = BETA1 * m + (1 - BETA1) * grad
        v = BETA2 * v + (1 - BETA2) * grad ** 2
        m_hat = m / (1 - BETA1 ** t)
        v_hat = v / (1 - BETA2 ** t)
        candidate = x - step_size * m_hat / (np.sqrt(v_hat) + EPSILON)

        if accept is not None and not accept(candidate):
            step_size *= 0.5
            logger.debug("%s step %d rejected, learning rate now %.3e", desc, it, step_size)
            bar.update(1)
            continue
        new_loss, new_grad = value_and_grad(candidate)
        if not np.isfinite(new_loss):
            step_size *= 0.5
            logger.debug("%s step %d gave a non-finite loss, learning rate now %.3e", desc, it, step_size)
            bar.update(1)
            continue

        x, loss, grad = candidate, new_loss, new_grad
        if loss < best_loss:
            best_x, best_loss = x.copy(), loss
        if callback is not None and (it % log_every == 0 or it == iters - 1):
            callback(it, x)
        bar.set_postfix(loss=f"{loss:.6g}", best=f"{best_loss:.6g}")
        bar.update(1)
    bar.close()
    return best_x, best_loss


def lbfgs(value_and_grad, x0, iters, desc="lbfgs", callback=None, log_every=10):
    """Unbounded L-BFGS-B (memory 10) returning the best point seen."""
    x0 = np.asarray(x0, dtype=float)
    if iters <= 0:
        return x0, float(value_and_grad(x0)[0])
    best = {"x": x0.copy(), "loss": np.inf}
    count = {"it": 0}
    bar = tqdm(total=iters, desc=desc, disable=not progress_enabled(), leave=False)

    def fun(x):
        loss, grad = value_and_grad(x)
        if np.isfinite(loss) and loss < best["loss"]:
            best["x"], best["loss"] = x.copy(), float(loss)
        if not np.isfinite(loss):
            return np.inf, np.zeros_like(x)
        return float(loss), np.asarray(grad, dtype=float)

    def on_iter(xk):
        count["it"] += 1
        if callback is not None and count["it"] % log_every == 0:
            callback(count["it"], xk)
        bar.update(1)

    result = minimize(fun, x0, jac=True, method="L-BFGS-B", callback=on_iter,
                      options={"maxiter": iters, "maxcor": 10, "maxfun": 2 * iters + 20})
    bar.close()
    logger.debug("%s finished after %d iterations: %s", desc, result.nit, result.message)
    return best["x"], best["loss"]
