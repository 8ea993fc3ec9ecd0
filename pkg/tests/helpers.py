"""Shared oracles for the test suite: scalar forward re-implementation,
finite-difference gradients, brute-force loss references."""

import math

import numpy as np

from fucrt.federation import PrototypeBank
from fucrt.nn import Gradients, ModelDims, ModelParams, evaluate_loss

TOY_DIMS = ModelDims(input_dim=3, hidden=(4,), rep_dim=4, class_count=3)


def scalar_forward_oracle(params, batch):
    """Straight-line scalar re-implementation of affine + ReLU + softmax."""
    n_layers = len(params.layers)
    out = []
    for row in batch:
        h = [float(v) for v in row]
        for i, (w, b) in enumerate(params.layers):
            pre = []
            for o in range(w.shape[0]):
                s = float(b[o])
                for j in range(w.shape[1]):
                    s += float(w[o, j]) * h[j]
                pre.append(s)
            if i != params.encoder_depth - 1 and i != n_layers - 1:
                h = [max(0.0, v) for v in pre]
            else:
                h = pre
        m = max(h)
        exps = [math.exp(v - m) for v in h]
        z = sum(exps)
        out.append([e / z for e in exps])
    return np.array(out)


def random_params(rng, dims=TOY_DIMS):
    """Generic-position parameters: fan-in-scaled weights, non-zero biases.

    Zero biases (the init default) make fully-dead-ReLU samples produce an
    exactly-zero representation, where normalization is not differentiable;
    gradient checks must evaluate away from that point.
    """
    layers = []
    for fan_in, fan_out in dims.layer_sizes:
        bound = np.sqrt(6.0 / fan_in)
        layers.append(
            (
                rng.uniform(-bound, bound, size=(fan_out, fan_in)),
                rng.uniform(-0.5, 0.5, size=fan_out),
            )
        )
    return ModelParams(layers=layers, encoder_depth=dims.encoder_depth, dims=dims)


def random_bank(rng, class_count, rep_dim):
    vectors = rng.normal(size=(class_count, rep_dim))
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    return PrototypeBank(vectors=vectors, present=np.ones(class_count, dtype=bool))


def finite_difference_grads(params, batch, labels, config, bank, h=1e-5):
    grads = []
    for w, b in params.layers:
        gw = np.zeros_like(w)
        gb = np.zeros_like(b)
        for arr, garr in ((w, gw), (b, gb)):
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                ix = it.multi_index
                orig = arr[ix]
                arr[ix] = orig + h
                up = evaluate_loss(params, batch, labels, config, bank)
                arr[ix] = orig - h
                down = evaluate_loss(params, batch, labels, config, bank)
                arr[ix] = orig
                garr[ix] = (up - down) / (2 * h)
        grads.append((gw, gb))
    return Gradients(layers=grads)


def max_relative_error(analytic, numeric):
    worst = 0.0
    for (aw, ab), (nw, nb) in zip(analytic.layers, numeric.layers):
        for a, n in ((aw, nw), (ab, nb)):
            scale = np.maximum(np.abs(a), np.abs(n))
            rel = np.where(scale < 1e-10, 0.0, np.abs(a - n) / np.maximum(scale, 1e-10))
            worst = max(worst, float(rel.max()))
    return worst


def gradient_check_suite(master_seed: int, trials: int = 100) -> float:
    """Worst relative error between analytic and central-FD gradients of the
    full combined loss over random toy instances."""
    from fucrt.losses import LossConfig
    from fucrt.nn import backward

    rng = np.random.default_rng(master_seed)
    worst = 0.0
    for _ in range(trials):
        config = LossConfig(
            lambda1=float(rng.uniform(0.0, 1.5)),
            lambda2=float(rng.uniform(0.0, 1.5)),
            tau_t=float(rng.uniform(0.3, 2.0)),
        )
        params = random_params(rng)
        batch = rng.normal(size=(6, 3))
        labels = rng.integers(0, 3, size=6)
        bank = random_bank(rng, 3, 4)
        _, analytic = backward(params, batch, labels, config, bank)
        numeric = finite_difference_grads(params, batch, labels, config, bank)
        worst = max(worst, max_relative_error(analytic, numeric))
    return worst
