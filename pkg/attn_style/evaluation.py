"""Evaluation module scores stylized images and runs the parameter sweeps and ablations.

The Module contains following Classes and functions
- `Triplet`, `read_manifest`, `evaluate_triplets`, `summarize`, `write_report`: batch scoring of
  (content, style, stylized) PNG triplets into a JSON-lines report.
- `score`: CFSD and histogram loss of one in-memory triplet.
- `gamma_sweep`, `tau_sweep`: metrics while one knob varies, inverting the pair only once.
- `ablation`: mean metrics per preset over a grid of content/style pairs.
- `round_trip_psnr`: quality of the DDIM invert-then-sample reconstruction.
"""
import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from tqdm import tqdm

from attn_style.ddim import StepSchedule, reconstruct
from attn_style.exc import ConfigurationError
from attn_style.imageio import load_image, to_unit_range
from attn_style.injection import StyleIdConfig, StyleTransfer
from attn_style.metrics import cfsd, image_histogram_loss, psnr


logger = logging.getLogger(__name__)

GAMMA_SWEEP = tuple(round(0.3 + 0.1 * i, 1) for i in range(8))
TAU_SWEEP = (1.0, 1.25, 1.5, 1.75, 2.0)
REPORT_KEYS = ("content", "style", "stylized", "cfsd", "hist_loss", "gamma", "tau")


def score(content, style, stylized):
    """CFSD(content, stylized) and histogram loss(stylized, style) for [−1, 1] images.

    :returns: (cfsd, hist_loss)
    """
    content, style, stylized = to_unit_range(content), to_unit_range(style), to_unit_range(stylized)
    return cfsd(content, stylized), image_histogram_loss(stylized, style)


class Triplet(object):
    """One manifest line. γ and τ are optional and only echoed into the report."""

    def __init__(self, content, style, stylized, gamma=None, tau=None):
        self.content = content
        self.style = style
        self.stylized = stylized
        self.gamma = gamma
        self.tau = tau

    def __repr__(self):
        return "<Triplet %s + %s -> %s>" % (self.content, self.style, self.stylized)


def _sidecar_value(path, name):
    sidecar = os.path.splitext(path)[0] + ".json"
    if not os.path.exists(sidecar):
        return None
    with open(sidecar) as handle:
        return json.load(handle).get("config", {}).get(name)


def read_manifest(path):
    """Read a JSON-lines manifest of {"content", "style", "stylized"} objects.

    Relative paths are resolved against the manifest's directory. γ and τ come from the line when given,
    otherwise from the sidecar JSON written next to the stylized image.
    """
    base = os.path.dirname(os.path.abspath(path))
    triplets = []
    with open(path) as handle:
        for number, line in enumerate(handle, 1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
                paths = [os.path.join(base, entry[key]) for key in ("content", "style", "stylized")]
            except (ValueError, KeyError, TypeError) as exc:
                raise ConfigurationError("%s:%d is not a triplet: %s" % (path, number, exc))
            gamma = entry.get("gamma", _sidecar_value(paths[2], "gamma"))
            tau = entry.get("tau", _sidecar_value(paths[2], "tau"))
            triplets.append(Triplet(*paths, gamma=gamma, tau=tau))
    return triplets


def evaluate_triplet(triplet, resolution=None):
    images = [load_image(path, resolution) for path in (triplet.content, triplet.style, triplet.stylized)]
    cfsd_value, hist_loss = score(*images)
    return {
        "content": triplet.content,
        "style": triplet.style,
        "stylized": triplet.stylized,
        "cfsd": cfsd_value,
        "hist_loss": hist_loss,
        "gamma": triplet.gamma,
        "tau": triplet.tau,
    }


def evaluate_triplets(triplets, resolution=None, workers=1, progress=False):
    """Score every triplet; records come back in manifest order whatever the worker count."""
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            jobs = pool.map(lambda triplet: evaluate_triplet(triplet, resolution), triplets)
            return list(tqdm(jobs, total=len(triplets), desc="evaluate", disable=not progress))
    return [
        evaluate_triplet(triplet, resolution)
        for triplet in tqdm(triplets, desc="evaluate", disable=not progress)
    ]


def summarize(records):
    if not records:
        return {"count": 0, "cfsd_mean": None, "hist_loss_mean": None}
    return {
        "count": len(records),
        "cfsd_mean": float(np.mean([record["cfsd"] for record in records])),
        "hist_loss_mean": float(np.mean([record["hist_loss"] for record in records])),
    }


def write_report(records, path):
    """Write one JSON object per record and the summary means to `<path>.summary.json`.

    :returns: the summary
    """
    with open(path, "w") as handle:
        for record in records:
            handle.write(json.dumps({key: record[key] for key in REPORT_KEYS}) + "\n")
    summary = summarize(records)
    with open(path + ".summary.json", "w") as handle:
        json.dump(summary, handle, indent=2)
    return summary


def _sweep(weights, content, style, config, noise, name, values):
    transfer = StyleTransfer(weights, config, noise)
    content = transfer.check_image(content, "content")
    style = transfer.check_image(style, "style")
    inversion = transfer.invert_pair(content, style, transfer.steps)
    rows = []
    for value in values:
        varied = StyleTransfer(weights, config.replace(**{name: value}), noise)
        result = varied.sample(inversion)
        cfsd_value, hist_loss = score(content, style, result.image)
        rows.append({name: value, "cfsd": cfsd_value, "hist_loss": hist_loss})
        logger.debug("%s=%g cfsd=%.5f hist_loss=%.5f", name, value, cfsd_value, hist_loss)
    return rows


def gamma_sweep(weights, content, style, config=None, noise=None, gammas=GAMMA_SWEEP):
    """CFSD and histogram loss for every γ, content and style inverted once.

    :returns: list of {"gamma", "cfsd", "hist_loss"} rows in `gammas` order
    """
    return _sweep(weights, content, style, config or StyleIdConfig(), noise, "gamma", gammas)


def tau_sweep(weights, content, style, config=None, noise=None, taus=TAU_SWEEP):
    return _sweep(weights, content, style, config or StyleIdConfig(), noise, "tau", taus)


def write_rows(rows, path, columns=None):
    columns = list(columns or rows[0].keys())
    with open(path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)


def ablation(weights, pairs, presets=None, noise=None, progress=False, **overrides):
    """Mean CFSD and histogram loss of each preset over content/style pairs.

    :param pairs: sequence of (content, style) images in [−1, 1]
    :param presets: preset names (Default value = None, meaning every preset)
    :param overrides: options applied on top of every preset, e.g. `steps`
    :returns: list of {"preset", "cfsd", "hist_loss"} rows
    """
    rows = []
    for name in presets or list(StyleIdConfig.PRESETS):
        transfer = StyleTransfer(weights, StyleIdConfig.preset(name, **overrides), noise)
        scores = []
        for content, style in tqdm(pairs, desc="ablate %s" % name, disable=not progress):
            scores.append(score(content, style, transfer.stylize(content, style).image))
        rows.append(
            {
                "preset": name,
                "cfsd": float(np.mean([s[0] for s in scores])),
                "hist_loss": float(np.mean([s[1] for s in scores])),
            }
        )
        logger.info("preset %s: cfsd %.5f hist_loss %.5f", name, rows[-1]["cfsd"], rows[-1]["hist_loss"])
    return rows


def round_trip_psnr(weights, image, steps, noise=None):
    """PSNR in dB between an image and its DDIM reconstruction with `steps` steps."""
    transfer = StyleTransfer(weights, StyleIdConfig(steps=steps), noise)
    image = transfer.check_image(image, "input")
    rebuilt = reconstruct(image, transfer.model, StepSchedule.uniform(transfer.noise, steps))
    return psnr(to_unit_range(image), to_unit_range(rebuilt))
