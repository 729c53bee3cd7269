"""Check the hand-written BPTT gradients of all three variants against finite differences.

A tiny model (12 words, hidden size 4, two context types with 2 and 3 values)
is enough: every parameter component is perturbed by +-1e-5 and the
centred difference is compared with the analytic gradient.
"""
import numpy as np

from ctxgen import Model, ModelConfig, grad_check, loss_and_grad
from ctxgen.corpus import Example, collate

rng = np.random.default_rng(0)
examples = [Example((1, *map(int, rng.integers(4, 12, 4)), 2), (int(rng.integers(2)), int(rng.integers(3))))
            for _ in range(4)]
batch = collate(examples)

for variant in ("rnn", "c2s", "gc2s"):
    model = Model(ModelConfig(variant, 12, hidden_size=4, context_cardinalities=(2, 3), dropout=0.0))
    for name in model.params.names():
        # large weights keep every gradient component well above finite-difference noise
        model.params[name][...] = rng.uniform(-1, 1, model.params[name].shape)
    per_param = grad_check(lambda ps: loss_and_grad(model, [batch]), model.params, detail=True)
    worst = max(per_param, key=per_param.get)
    print(f"{variant:5s} max relative error {per_param[worst]:.2e}  (worst tensor: {worst})")
