"""Dataset module generates the procedural content and style images the toy model is trained on.

Content images are 2 to 4 solid geometric shapes on a plain background. Style images are global textures
(stripes, checker, noise-grain, stippling) painted with exactly the three colors of their palette. The two
families share no generator, so they are visually disjoint.

Every image draws from its own child of `numpy.random.SeedSequence(seed)`, spawned in a fixed order, so
the dataset is bit-identical for a seed however many workers render it.

On disk::

    <root>/content/<split>_<index>.png
    <root>/style/<split>_<index>.png
    <root>/splits.json    {"spec": {...}, "train": {"content": [...], "style": [...]}, "val": {...}}
"""
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from PIL import Image, ImageDraw

from attn_style.config import Options
from attn_style.exc import ConfigurationError, RangeError
from attn_style.imageio import from_uint8, load_image


logger = logging.getLogger(__name__)

CONTENT = "content"
STYLE = "style"
FAMILIES = (CONTENT, STYLE)
SPLITS = ("train", "val")
SHAPES = ("rectangle", "ellipse", "triangle", "pentagon", "wedge")
TEXTURES = ("stripes", "checker", "noise-grain", "stippling")


class ProceduralSpec(Options):
    """What to generate.

    Options:

    - `seed`: root seed of the whole dataset
    - `resolution`: side of every image
    - `train_content`, `train_style`, `val_content`, `val_style`: split sizes
    - `workers`: render on a thread pool when greater than 1; output is identical
    """

    defaults = {
        "seed": 0,
        "resolution": 64,
        "train_content": 256,
        "train_style": 256,
        "val_content": 16,
        "val_style": 16,
        "workers": 1,
    }

    def validate(self):
        options = self.options
        if int(options["resolution"]) != options["resolution"] or options["resolution"] < 8:
            raise RangeError("resolution must be an integer of at least 8, got %r" % options["resolution"])
        for name in ("train_content", "train_style", "val_content", "val_style"):
            if int(options[name]) != options[name] or options[name] < 0:
                raise RangeError("%s must be a nonnegative integer, got %r" % (name, options[name]))
        if int(options["workers"]) != options["workers"] or options["workers"] < 1:
            raise RangeError("workers must be a positive integer, got %r" % options["workers"])

    def count(self, split, family):
        return self.options["%s_%s" % (split, family)]


class ProceduralImage(object):
    """One generated image.

    :param pixels: H×W×3 uint8 array
    :param palette: the colors the generator painted with, as RGB tuples
    :param kind: texture name for style images, "shapes" for content images
    """

    def __init__(self, family, split, index, pixels, palette, kind):
        self.family = family
        self.split = split
        self.index = index
        self.pixels = pixels
        self.palette = palette
        self.kind = kind

    @property
    def name(self):
        return "%s_%04d" % (self.split, self.index)

    def as_unit(self):
        """3×H×W float64 in [0, 1]."""
        return self.pixels.astype(np.float64).transpose(2, 0, 1) / 255.0

    def as_tensor(self):
        """3×H×W Tensor in [−1, 1]."""
        return from_uint8(self.pixels)

    def colors(self):
        return set(map(tuple, self.pixels.reshape(-1, 3).tolist()))

    def __repr__(self):
        return "<ProceduralImage %s/%s %s>" % (self.family, self.name, self.kind)


def _distinct_colors(rng, count):
    while True:
        colors = [tuple(int(c) for c in rng.integers(0, 256, size=3)) for _ in range(count)]
        if len(set(colors)) == count:
            return colors


def _draw_shape(draw, kind, rng, resolution, color):
    size = rng.uniform(0.2, 0.45) * resolution
    cx, cy = rng.uniform(size / 2, resolution - size / 2, size=2)
    box = [cx - size / 2, cy - size / 2, cx + size / 2, cy + size / 2]
    if kind == "rectangle":
        draw.rectangle(box, fill=color)
    elif kind == "ellipse":
        draw.ellipse(box, fill=color)
    elif kind == "triangle":
        draw.regular_polygon((cx, cy, size / 2), 3, rotation=float(rng.uniform(0, 120)), fill=color)
    elif kind == "pentagon":
        draw.regular_polygon((cx, cy, size / 2), 5, rotation=float(rng.uniform(0, 72)), fill=color)
    else:
        start = float(rng.uniform(0, 90))
        draw.pieslice(box, start, start + float(rng.uniform(180, 300)), fill=color)


def render_content(rng, resolution):
    """Plain background with 2 to 4 solid shapes in colors distinct from it."""
    count = int(rng.integers(2, 5))
    palette = _distinct_colors(rng, count + 1)
    picture = Image.new("RGB", (resolution, resolution), palette[0])
    draw = ImageDraw.Draw(picture)
    for color in palette[1:]:
        _draw_shape(draw, SHAPES[int(rng.integers(len(SHAPES)))], rng, resolution, color)
    return np.asarray(picture, dtype=np.uint8).copy(), palette


def _texture_indices(kind, rng, resolution):
    rows, cols = np.mgrid[0:resolution, 0:resolution]
    if kind == "stripes":
        width = int(rng.integers(1, max(2, resolution // 6) + 1))
        if rng.random() < 0.5:
            return (rows // width) % 3
        return ((rows + cols) // width) % 3
    if kind == "checker":
        cell = int(rng.integers(1, max(2, resolution // 6) + 1))
        return (rows // cell + cols // cell) % 3
    if kind == "noise-grain":
        weights = rng.dirichlet(np.ones(3) * 4.0)
        return rng.choice(3, size=(resolution, resolution), p=weights)
    return None


def render_style(rng, resolution):
    """A global texture that uses exactly the three palette colors."""
    kind = TEXTURES[int(rng.integers(len(TEXTURES)))]
    palette = _distinct_colors(rng, 3)
    indices = _texture_indices(kind, rng, resolution)
    if indices is not None:
        return np.asarray(palette, dtype=np.uint8)[indices], palette, kind
    picture = Image.new("RGB", (resolution, resolution), palette[0])
    draw = ImageDraw.Draw(picture)
    for _ in range(int(rng.integers(resolution, 3 * resolution))):
        x, y = rng.uniform(0, resolution, size=2)
        radius = float(rng.uniform(0.5, max(1.0, resolution / 24)))
        color = palette[1 + int(rng.integers(2))]
        draw.ellipse([x - radius, y - radius, x + radius, y + radius], fill=color)
    return np.asarray(picture, dtype=np.uint8).copy(), palette, kind


def _render(job):
    family, split, index, seed_sequence, resolution = job
    rng = np.random.default_rng(seed_sequence)
    if family == CONTENT:
        pixels, palette = render_content(rng, resolution)
        return ProceduralImage(family, split, index, pixels, palette, "shapes")
    pixels, palette, kind = render_style(rng, resolution)
    return ProceduralImage(family, split, index, pixels, palette, kind)


class ProceduralDataset(object):
    """Generated images grouped by split and family.

    `images[split][family]` is a list ordered by index.
    """

    def __init__(self, spec, images):
        self.spec = spec
        self.images = images

    def split(self, name, family=None):
        if name not in self.images:
            raise ConfigurationError("Unknown split %r" % name)
        if family is None:
            return self.images[name][CONTENT] + self.images[name][STYLE]
        return self.images[name][family]

    @property
    def train(self):
        return self.split("train")

    @property
    def val(self):
        return self.split("val")

    def __len__(self):
        return sum(len(images) for split in self.images.values() for images in split.values())

    def __iter__(self):
        for split in SPLITS:
            for family in FAMILIES:
                for image in self.images[split][family]:
                    yield image

    def manifest(self):
        manifest = {"spec": self.spec.as_dict()}
        for split in SPLITS:
            manifest[split] = {
                family: ["%s/%s.png" % (family, image.name) for image in self.images[split][family]]
                for family in FAMILIES
            }
        return manifest


def generate_dataset(spec=None):
    """Render the train and val sets of a ProceduralSpec.

    **Examples**

        >>> dataset = generate_dataset(ProceduralSpec(seed=3, resolution=32))
        >>> dataset.split("train", "style")[0].colors() <= set(dataset.split("train", "style")[0].palette)
        True
    """
    spec = spec if spec is not None else ProceduralSpec()
    jobs = []
    for split in SPLITS:
        for family in FAMILIES:
            for index in range(spec.count(split, family)):
                jobs.append((family, split, index))
    children = np.random.SeedSequence(spec.seed).spawn(len(jobs))
    jobs = [job + (child, spec.resolution) for job, child in zip(jobs, children)]
    if spec.workers > 1:
        with ThreadPoolExecutor(max_workers=spec.workers) as pool:
            rendered = list(pool.map(_render, jobs))
    else:
        rendered = [_render(job) for job in jobs]
    images = {split: {family: [] for family in FAMILIES} for split in SPLITS}
    for image in rendered:
        images[image.split][image.family].append(image)
    logger.info("generated %d procedural images at %dpx (seed %d)", len(rendered), spec.resolution, spec.seed)
    return ProceduralDataset(spec, images)


def write_dataset(dataset, root):
    """Write PNGs and `splits.json` under `root`."""
    for family in FAMILIES:
        os.makedirs(os.path.join(root, family), exist_ok=True)
    for image in dataset:
        path = os.path.join(root, image.family, image.name + ".png")
        Image.fromarray(image.pixels).save(path, format="PNG")
    with open(os.path.join(root, "splits.json"), "w") as handle:
        json.dump(dataset.manifest(), handle, indent=2, sort_keys=True)
    return root


def read_split(root, split="train", resolution=None):
    """Load one split of a written dataset as [−1, 1] Tensors, content first then style."""
    with open(os.path.join(root, "splits.json")) as handle:
        manifest = json.load(handle)
    if split not in manifest:
        raise ConfigurationError("Dataset at %s has no split %r" % (root, split))
    paths = manifest[split][CONTENT] + manifest[split][STYLE]
    return [load_image(os.path.join(root, path), resolution) for path in paths]
