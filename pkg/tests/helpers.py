"""Shared checks used by the module tests and the acceptance suite."""

import numpy as np

from nncompress.codec import LayerPlan, Method, Order, compress_model, decompress_model
from nncompress.model_store import LayerKind
from nncompress.nn_engine import accuracy, activation_pattern, loss_and_grads
from nncompress.pruner import prune_layer
from nncompress.quantizer import dequantize_layer, quantize_layer

GRAD_FLOOR = 1e-6


def _same_pattern(a, b):
    return all(np.array_equal(p, q) for p, q in zip(a, b))


def gradient_check(params, kinds, x, y, step, skip_kinks=True):
    """Worst relative error between analytic and central-difference gradients.

    Returns {(layer, "W" | "b"): (max_rel_err, checked, skipped)}. With
    ``skip_kinks`` a coordinate is skipped when the two probes see different
    ReLU masks or pool winners than the unperturbed point: the loss has a kink
    between them and the difference quotient is not a derivative there.
    Relative error uses max(|analytic|, |numeric|, 1e-6) as denominator.
    """
    _, grads = loss_and_grads(params, kinds, x, y)
    base = activation_pattern(params, kinds, x)
    out = {}
    for li, (w, b) in enumerate(params):
        for which, arr, g in (("W", w, grads[li][0]), ("b", b, grads[li][1])):
            worst, checked, skipped = 0.0, 0, 0
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + step
                lp = loss_and_grads(params, kinds, x, y)[0]
                pp = activation_pattern(params, kinds, x) if skip_kinks else None
                arr[idx] = old - step
                lm = loss_and_grads(params, kinds, x, y)[0]
                pm = activation_pattern(params, kinds, x) if skip_kinks else None
                arr[idx] = old
                if skip_kinks and not (_same_pattern(pp, base) and _same_pattern(pm, base)):
                    skipped += 1
                    continue
                num = (lp - lm) / (2 * step)
                ana = g[idx]
                rel = abs(ana - num) / max(abs(ana), abs(num), GRAD_FLOOR)
                worst = max(worst, rel)
                checked += 1
            out[(li, which)] = (worst, checked, skipped)
    return out


def random_network(rng):
    """Random small conv/fc stack with matching input batch, float64 params."""
    cin = int(rng.integers(1, 3))
    size = int(rng.integers(6, 10))
    kinds, params = [], []
    c, s = cin, size
    for _ in range(int(rng.integers(1, 3))):
        k = int(rng.integers(2, 4))
        if (s - k + 1) // 2 < 1 or s - k + 1 < 2:
            break
        co = int(rng.integers(1, 4))
        params.append((rng.normal(0, 0.5, (co, c, k, k)), rng.normal(0, 0.1, co)))
        kinds.append(LayerKind.CONV)
        c, s = co, (s - k + 1) // 2
    width = c * s * s
    for out in (int(rng.integers(2, 6)), int(rng.integers(2, 4))):
        params.append((rng.normal(0, 0.5, (out, width)), rng.normal(0, 0.1, out)))
        kinds.append(LayerKind.FC)
        width = out
    n = 6
    x = rng.normal(size=(n, cin, size, size))
    y = rng.integers(0, width, n)
    return params, kinds, x, y


def toy_trend_metrics(data, model, seed):
    """Accuracy effects behind the three toy trends for one trained model."""
    fcs = [layer.name for layer in model if layer.kind is LayerKind.FC]
    convs = [layer.name for layer in model if layer.kind is LayerKind.CONV]

    def acc(plan):
        return accuracy(decompress_model(compress_model(model, plan, seed)), data)

    base = accuracy(model, data)
    out = {"base": base, "fc_q4_drop": base - acc({n: LayerPlan(4) for n in fcs})}
    for cf, bits in ((8, 4), (16, 2), (32, 1)):
        out[f"q{cf}"] = acc({n: LayerPlan(bits) for n in fcs})
        out[f"p{cf}"] = acc({n: LayerPlan(None, cf) for n in fcs})
    out["conv_q8_drop"] = base - acc({n: LayerPlan(8) for n in convs})
    out["conv_p4_drop"] = base - acc({n: LayerPlan(None, 4) for n in convs})
    return out


def reference(weights, plan, seed=0):
    """Compose pruner and quantizer by hand, without the codec."""
    w = np.asarray(weights, dtype=np.float32)
    if plan is None:
        return w.copy()
    if plan.method is Method.QUANT:
        return dequantize_layer(quantize_layer(w, plan.quant_bits, seed))
    if plan.method is Method.PRUNE:
        return prune_layer(w, plan.prune_factor).dense()
    if plan.order is Order.PRUNE_THEN_QUANTIZE:
        pr = prune_layer(w, plan.prune_factor)
        q = quantize_layer(pr.kept_values, plan.quant_bits, seed)
        out = np.zeros(w.size, dtype=np.float32)
        out[pr.mask] = dequantize_layer(q)
        return out.reshape(w.shape)
    return prune_layer(dequantize_layer(quantize_layer(w, plan.quant_bits, seed)), plan.prune_factor).dense()
