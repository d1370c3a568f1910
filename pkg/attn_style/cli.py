"""Command line entry point: ``attn-style <command>``.

Commands
- `generate`: write the procedural dataset as PNGs.
- `train`: train the toy U-Net; writes a checkpoint and a loss-curve CSV.
- `stylize`: stylize one content image with one style image; writes a PNG and a sidecar JSON.
- `evaluate`: score a manifest of triplets into a JSON-lines report.
- `diagnose`: attention-std table, γ sweep and optional τ sweep as CSV files.
- `ablate`: mean metrics of the ablation presets over a content × style grid.

Every command accepts ``--config FILE``: a JSON object of options (or a sidecar written by an earlier run)
that flags then override. Every output carries the full resolved configuration, so feeding a sidecar back
with ``--config`` replays the run.

Exit codes: 0 success, 2 usage, 3 I/O, 4 numeric failure. Failures print a single line
``error category=<usage|io|numeric> message=<text>`` on stderr.
"""
import argparse
import json
import logging
import os
import sys
import time

from attn_style import __version__
from attn_style.checkpoint import load_model
from attn_style.config import Options
from attn_style.dataset import ProceduralSpec, generate_dataset, write_dataset
from attn_style.evaluation import (
    GAMMA_SWEEP,
    ablation,
    evaluate_triplets,
    gamma_sweep,
    read_manifest,
    score,
    tau_sweep,
    write_report,
    write_rows,
)
from attn_style.exc import (
    CheckpointError,
    ConfigurationError,
    RangeError,
    ShapeError,
    StyleTransferError,
)
from attn_style.imageio import load_image, quantize, save_image, to_unit_range
from attn_style.injection import AttentionStdReport, StyleIdConfig, StyleTransfer
from attn_style.metrics import psnr
from attn_style.trainer import TrainConfig, train


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

COMMANDS = ("generate", "train", "stylize", "evaluate", "diagnose", "ablate")
REQUIRED = {
    "generate": ("out",),
    "train": ("out",),
    "stylize": ("content", "style", "checkpoint", "out"),
    "evaluate": ("triplets", "out"),
    "diagnose": ("content", "style", "checkpoint", "out"),
    "ablate": ("content", "style", "checkpoint", "out"),
}
STYLE_ID_KEYS = (
    "gamma",
    "tau",
    "steps",
    "include_bottleneck",
    "enable_injection",
    "enable_adain",
    "enable_temperature",
    "inject_style_query",
    "workers",
)
# Options an ablation run forwards to every preset; the presets own gamma and the switches.
PRESET_OVERRIDES = ("tau", "steps", "include_bottleneck", "inject_style_query", "workers")


class RunConfig(Options):
    """Resolved options of one command invocation.

    Options mirror StyleIdConfig (`gamma`, `tau`, `steps`, `layers`, switches), TrainConfig (`train`)
    and ProceduralSpec (`dataset`), plus the paths and the `seed`.
    """

    defaults = dict(
        {key: StyleIdConfig.defaults[key] for key in STYLE_ID_KEYS},
        command=None,
        content=None,
        style=None,
        checkpoint=None,
        out=None,
        loss_curve=None,
        triplets=None,
        resolution=None,
        layers=None,
        taus=None,
        presets=None,
        seed=0,
        verbose=False,
        train={},
        dataset={},
    )

    def validate(self):
        command = self.options["command"]
        if command not in COMMANDS:
            raise ConfigurationError("Unknown command %r" % (command,))
        missing = [name for name in REQUIRED[command] if not self.options[name]]
        if missing:
            raise ConfigurationError("%s needs %s" % (command, ", ".join("--" + name for name in missing)))
        self.style_id_config()
        if command == "train":
            self.train_config()
        if command == "generate":
            self.dataset_spec()

    def style_id_config(self):
        options = {key: self.options[key] for key in STYLE_ID_KEYS}
        options["injected_layers"] = self.options["layers"]
        return StyleIdConfig(options)

    def train_config(self):
        options = dict(self.options["train"])
        options.setdefault("seed", self.options["seed"])
        return TrainConfig(options)

    def dataset_spec(self):
        options = dict(self.options["dataset"])
        options.setdefault("seed", self.options["seed"])
        if self.options["resolution"] is not None:
            options.setdefault("resolution", self.options["resolution"])
        return ProceduralSpec(options)


def _split(convert):
    def parse(text):
        try:
            return [convert(item) for item in text.split(",") if item]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc))

    return parse


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigurationError(message)


def build_parser():
    parser = _Parser(
        prog="attn-style", description="Training-free style transfer with a toy diffusion U-Net."
    )
    parser.add_argument("--version", action="version", version="%(prog)s " + __version__)
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON options file or sidecar of an earlier run")
    common.add_argument("--out", help="output path")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    style_id = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    style_id.add_argument("--checkpoint", help="trained model")
    style_id.add_argument("--gamma", type=float, help="query preservation γ in [0, 1] (default 0.75)")
    style_id.add_argument("--tau", type=float, help="attention temperature τ ≥ 1 (default 1.5)")
    style_id.add_argument("--steps", type=int, help="DDIM steps (default 50)")
    style_id.add_argument("--layers", type=_split(str), help="comma separated injected layer-ids")
    style_id.add_argument("--include-bottleneck", dest="include_bottleneck", action="store_true")
    style_id.add_argument("--no-adain", dest="enable_adain", action="store_false")
    style_id.add_argument("--no-injection", dest="enable_injection", action="store_false")
    style_id.add_argument("--no-temperature", dest="enable_temperature", action="store_false")
    style_id.add_argument("--style-query", dest="inject_style_query", action="store_true")
    style_id.add_argument("--workers", type=int)

    commands = parser.add_subparsers(dest="command", required=True)
    generate = commands.add_parser("generate", parents=[common], help="write the procedural dataset")
    generate.add_argument("--resolution", type=int, default=argparse.SUPPRESS)

    training = commands.add_parser("train", parents=[common], help="train the toy U-Net")
    training.add_argument("--loss-curve", dest="loss_curve", default=argparse.SUPPRESS)

    stylize = commands.add_parser("stylize", parents=[common, style_id], help="stylize one image")
    stylize.add_argument("--content", default=argparse.SUPPRESS)
    stylize.add_argument("--style", default=argparse.SUPPRESS)

    evaluate = commands.add_parser("evaluate", parents=[common], help="score a triplet manifest")
    evaluate.add_argument("--triplets", default=argparse.SUPPRESS, help="JSON-lines manifest")
    evaluate.add_argument("--resolution", type=int, default=argparse.SUPPRESS)
    evaluate.add_argument("--workers", type=int, default=argparse.SUPPRESS)

    diagnose = commands.add_parser("diagnose", parents=[common, style_id], help="attention std and sweeps")
    diagnose.add_argument("--content", default=argparse.SUPPRESS)
    diagnose.add_argument("--style", default=argparse.SUPPRESS)
    diagnose.add_argument("--taus", type=_split(float), default=argparse.SUPPRESS, help="τ values to sweep")

    ablate = commands.add_parser("ablate", parents=[common, style_id], help="compare the ablation presets")
    ablate.add_argument("--content", nargs="+", default=argparse.SUPPRESS)
    ablate.add_argument("--style", nargs="+", default=argparse.SUPPRESS)
    ablate.add_argument("--presets", type=_split(str), default=argparse.SUPPRESS)
    return parser


def read_config_file(path):
    """Options from a JSON file; a sidecar's `config` object is unwrapped."""
    with open(path) as handle:
        try:
            data = json.load(handle)
        except ValueError as exc:
            raise ConfigurationError("%s is not valid JSON: %s" % (path, exc))
    if not isinstance(data, dict):
        raise ConfigurationError("%s must hold a JSON object" % path)
    return dict(data.get("config", data))


def resolve_config(argv):
    """Parse the command line and merge it over the config file, flags winning."""
    arguments = vars(build_parser().parse_args(argv))
    options = {}
    path = arguments.pop("config", None)
    if path is not None:
        options.update(read_config_file(path))
    options.update(arguments)
    return RunConfig(options)


def _sidecar_path(out):
    return os.path.splitext(out)[0] + ".json"


def _write_json(data, path):
    with open(path, "w") as handle:
        json.dump(data, handle, indent=2, sort_keys=True)


def _echo(run, **extra):
    data = {"config": run.as_dict(), "version": __version__}
    data.update(extra)
    return data


def cmd_generate(run):
    dataset = generate_dataset(run.dataset_spec())
    write_dataset(dataset, run.out)
    _write_json(_echo(run, images=len(dataset)), os.path.join(run.out, "run.json"))
    print("wrote %d images to %s" % (len(dataset), run.out))


def cmd_train(run):
    config = run.train_config()
    loss_curve = run.loss_curve or os.path.splitext(run.out)[0] + ".loss.csv"
    started = time.perf_counter()
    result = train(config, checkpoint=run.out, loss_curve=loss_curve, progress=run.verbose)
    _write_json(
        _echo(run, history=result.metadata()["history"], timings={"train": time.perf_counter() - started}),
        _sidecar_path(run.out),
    )
    print(
        "initial val loss %.5f, final val loss %.5f, checkpoint %s"
        % (result.initial_val_loss, result.final_val_loss, run.out)
    )


def cmd_stylize(run):
    weights, noise, _ = load_model(run.checkpoint)
    resolution = weights.config.resolution
    content = load_image(run.content, resolution)
    style = load_image(run.style, resolution)
    result = StyleTransfer(weights, run.style_id_config(), noise).stylize(content, style)
    save_image(result.image, run.out)
    stylized = quantize(result.image)
    cfsd_value, hist_loss = score(content, style, stylized)
    metrics = {
        "cfsd": cfsd_value,
        "hist_loss": hist_loss,
        "psnr_to_content": psnr(to_unit_range(content), to_unit_range(stylized)),
    }
    _write_json(_echo(run, timings=result.timings, metrics=metrics), _sidecar_path(run.out))
    print("wrote %s (cfsd %.5f, hist_loss %.5f)" % (run.out, cfsd_value, hist_loss))


def cmd_evaluate(run):
    triplets = read_manifest(run.triplets)
    records = evaluate_triplets(triplets, run.resolution, run.workers, progress=run.verbose)
    summary = write_report(records, run.out)
    _write_json(_echo(run, summary=summary), _sidecar_path(run.out))
    print(
        "%d triplets: mean cfsd %s, mean hist_loss %s"
        % (summary["count"], summary["cfsd_mean"], summary["hist_loss_mean"])
    )


def cmd_diagnose(run):
    weights, noise, _ = load_model(run.checkpoint)
    resolution = weights.config.resolution
    content = load_image(run.content, resolution)
    style = load_image(run.style, resolution)
    config = run.style_id_config()
    os.makedirs(run.out, exist_ok=True)
    report = StyleTransfer(weights, config, noise).attention_std_report(content, style)
    write_rows(report.rows, os.path.join(run.out, "attention_std.csv"), AttentionStdReport.COLUMNS)
    write_rows(gamma_sweep(weights, content, style, config, noise), os.path.join(run.out, "gamma_sweep.csv"))
    outputs = ["attention_std.csv", "gamma_sweep.csv"]
    if run.taus:
        rows = tau_sweep(weights, content, style, config, noise, run.taus)
        write_rows(rows, os.path.join(run.out, "tau_sweep.csv"))
        outputs.append("tau_sweep.csv")
    summary = {
        "mean_ratio_injected": report.mean_ratio("ratio_injected"),
        "mean_ratio_scaled": report.mean_ratio("ratio_scaled"),
        "gammas": list(GAMMA_SWEEP),
        "outputs": outputs,
    }
    _write_json(_echo(run, summary=summary), os.path.join(run.out, "diagnose.json"))
    print("wrote %s to %s" % (", ".join(outputs), run.out))


def cmd_ablate(run):
    weights, noise, _ = load_model(run.checkpoint)
    resolution = weights.config.resolution
    contents = [load_image(path, resolution) for path in run.content]
    styles = [load_image(path, resolution) for path in run.style]
    pairs = [(content, style) for content in contents for style in styles]
    overrides = {key: run.option(key) for key in PRESET_OVERRIDES}
    overrides["injected_layers"] = run.layers
    rows = ablation(weights, pairs, run.presets, noise, progress=run.verbose, **overrides)
    write_rows(rows, run.out, ("preset", "cfsd", "hist_loss"))
    _write_json(_echo(run, rows=rows), _sidecar_path(run.out))
    print("wrote %d presets to %s" % (len(rows), run.out))


HANDLERS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "stylize": cmd_stylize,
    "evaluate": cmd_evaluate,
    "diagnose": cmd_diagnose,
    "ablate": cmd_ablate,
}


def categorize(exc):
    """Map an exception to (category, exit code)."""
    if isinstance(exc, (ConfigurationError, RangeError, ShapeError)):
        return "usage", EXIT_USAGE
    if isinstance(exc, (CheckpointError, OSError)):
        return "io", EXIT_IO
    return "numeric", EXIT_NUMERIC


def _fail(exc):
    category, code = categorize(exc)
    message = " ".join(str(exc).split()) or exc.__class__.__name__
    print("error category=%s message=%s" % (category, message), file=sys.stderr)
    return code


def main(argv=None):
    """Run one command; returns the process exit code."""
    try:
        run = resolve_config(argv)
    except (StyleTransferError, OSError) as exc:
        return _fail(exc)
    logging.basicConfig(
        level=logging.DEBUG if run.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        HANDLERS[run.command](run)
    except (StyleTransferError, OSError) as exc:
        logger.debug("%s failed", run.command, exc_info=True)
        return _fail(exc)
    return EXIT_OK


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
