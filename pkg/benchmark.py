import itertools as it
import os
from time import time

import numpy as np

from attn_style import StyleIdConfig, StyleTransfer, UNetConfig, UNetWeights, load_model
from attn_style.evaluation import round_trip_psnr, score


def load_weights():
    checkpoint = os.environ.get("ATTN_STYLE_CHECKPOINT")
    if checkpoint:
        weights, noise, _ = load_model(checkpoint)
        return weights, noise
    config = UNetConfig(resolution=32, base_channels=16, norm_groups=8, time_embedding_dim=32, T_train=200)
    return UNetWeights.initialize(config), None


def benchmark_stylize(weights, noise, steps, workers):
    rng = np.random.default_rng(0)
    shape = weights.config.input_shape
    content = rng.uniform(-1.0, 1.0, size=shape)
    style = rng.uniform(-1.0, 1.0, size=shape)
    transfer = StyleTransfer(weights, StyleIdConfig(steps=steps, workers=workers), noise)

    start = time()
    result = transfer.stylize(content, style)
    elapsed = time() - start
    cfsd_value, hist_loss = score(content, style, result.image)

    print("Testing with:")
    print("   steps=%r" % steps)
    print("   workers=%r" % workers)
    print("   inversion=%.2fs sampling=%.2fs" % (result.timings["inversion"], result.timings["sampling"]))
    print("   cfsd=%.5f hist_loss=%.5f" % (cfsd_value, hist_loss))
    print("   round trip psnr=%.2f dB" % round_trip_psnr(weights, content, steps, noise))
    print("%.2f seconds" % elapsed)


setting_variants = {
    "steps": [10, 25, 50],
    "workers": [1, 2],
}


weights, noise = load_weights()
names = sorted(setting_variants)
combinations = [dict(zip(names, prod)) for prod in it.product(*(setting_variants[name] for name in names))]
for combination in combinations:
    benchmark_stylize(weights, noise, **combination)
