"""Trainer module fits the toy U-Net to predict the noise of q_sample on the procedural dataset.

The Module contains following Classes and functions
- `TrainConfig`: optimizer, loop and dataset options.
- `Adam`, `ExponentialMovingAverage`: the update rule and the inference-weight average.
- `training_step`: one ε-prediction step over a batch.
- `Trainer`: the epoch loop with seeded validation and divergence detection; `train` wraps it.
"""
import csv
import logging
import math
from collections import OrderedDict

import numpy as np
from tqdm import tqdm

from attn_style.checkpoint import save_checkpoint
from attn_style.config import Options
from attn_style.dataset import ProceduralSpec, generate_dataset
from attn_style.exc import ConfigurationError, NumericError, RangeError, TrainingDivergedError
from attn_style.model import UNet, UNetConfig, UNetWeights, as_model
from attn_style.noise import build_noise_schedule, q_sample
from attn_style.tensor import GradTape, Tensor, as_tensor, mean_squared_error


logger = logging.getLogger(__name__)


class TrainConfig(Options):
    """Options of a training run.

    Options:

    - `unet`: UNetConfig options
    - `dataset`: ProceduralSpec options; its resolution always follows the U-Net's
    - `learning_rate`, `batch_size`, `epochs`, `steps_per_epoch`: the optimization schedule
    - `ema_decay`: decay of the weight average saved for inference; 0 saves the raw weights
    - `beta_min`, `beta_max`: linear noise schedule over `unet.T_train` steps
    - `seed`: drives initialization, batch order, noise and timestep draws
    - `val_samples`: validation images scored every epoch (the first of the val split)
    - `divergence_factor`, `divergence_patience`: abort once the validation loss stays above
      factor × the initial validation loss for that many consecutive epochs
    """

    defaults = {
        "unet": {},
        "dataset": {},
        "learning_rate": 1e-4,
        "batch_size": 16,
        "epochs": 60,
        "steps_per_epoch": 500,
        "ema_decay": 0.999,
        "beta_min": 1e-4,
        "beta_max": 0.02,
        "seed": 0,
        "val_samples": 32,
        "divergence_factor": 10.0,
        "divergence_patience": 3,
    }

    def validate(self):
        options = self.options
        for name in ("batch_size", "epochs", "steps_per_epoch", "val_samples", "divergence_patience"):
            if int(options[name]) != options[name] or options[name] < 1:
                raise RangeError("%s must be a positive integer, got %r" % (name, options[name]))
        if not options["learning_rate"] > 0:
            raise RangeError("learning_rate must be positive, got %r" % options["learning_rate"])
        if not 0.0 <= options["ema_decay"] < 1.0:
            raise RangeError("ema_decay must lie in [0, 1), got %r" % options["ema_decay"])
        resolution = self.unet_config.resolution
        given = options["dataset"].get("resolution", resolution)
        if given != resolution:
            raise ConfigurationError(
                "dataset resolution %r differs from the U-Net resolution %r" % (given, resolution)
            )
        self.dataset_spec.validate()

    @property
    def unet_config(self):
        return UNetConfig(self.options["unet"])

    @property
    def dataset_spec(self):
        options = dict(self.options["dataset"])
        options["resolution"] = self.unet_config.resolution
        return ProceduralSpec(options)

    @property
    def total_steps(self):
        return self.options["epochs"] * self.options["steps_per_epoch"]

    def noise_schedule(self):
        return build_noise_schedule(
            self.unet_config.T_train, self.options["beta_min"], self.options["beta_max"]
        )


class Adam(object):
    """Adaptive-moment update with bias correction; moments are kept in float64 per parameter name."""

    def __init__(self, learning_rate=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.steps = 0
        self.first = {}
        self.second = {}

    def step(self, parameters, grads):
        """Return new parameter Tensors after one update."""
        self.steps += 1
        correction1 = 1.0 - self.beta1**self.steps
        correction2 = 1.0 - self.beta2**self.steps
        updated = OrderedDict()
        for name, value in parameters.items():
            grad = grads[name].astype(np.float64)
            m = self.first.get(name)
            v = self.second.get(name)
            m = (1.0 - self.beta1) * grad if m is None else self.beta1 * m + (1.0 - self.beta1) * grad
            v = (1.0 - self.beta2) * grad**2 if v is None else self.beta2 * v + (1.0 - self.beta2) * grad**2
            self.first[name], self.second[name] = m, v
            step = self.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            updated[name] = Tensor(value.numpy().astype(np.float64) - step)
        return updated


class ExponentialMovingAverage(object):
    def __init__(self, parameters, decay=0.999):
        self.decay = decay
        self.average = OrderedDict(
            (name, value.numpy().astype(np.float64)) for name, value in parameters.items()
        )

    def update(self, parameters):
        for name, value in parameters.items():
            self.average[name] = self.decay * self.average[name] + (1.0 - self.decay) * value.numpy()

    def parameters(self):
        return OrderedDict((name, Tensor(value)) for name, value in self.average.items())


class StepResult(object):
    """Outcome of a training step: mean loss, per-sample losses, drawn timesteps and the updated model."""

    def __init__(self, loss, sample_losses, timesteps, model):
        self.loss = loss
        self.sample_losses = sample_losses
        self.timesteps = timesteps
        self.model = model


def _with_parameters(model, parameters):
    if isinstance(model, UNet):
        return UNet(model.weights.replace(parameters))
    raise ConfigurationError("Cannot update parameters of %r" % (model,))


def training_step(batch, model, schedule, rng, optimizer=None):
    """One step of ε-prediction training.

    For every image z_0 of the batch draws t uniformly in [1, T_train] and ε ~ N(0, I), noises
    z_t = q_sample(z_0, t, ε) and scores ‖ε − ε̂(z_t, t)‖² as a mean squared error. The batch loss is the
    mean of the per-image losses; when an optimizer is given it is applied to the averaged gradients.

    :param batch: sequence of images at model resolution
    :param model: UNetWeights or a UNet; any callable with a `parameters` mapping when only evaluating
    :param schedule: NoiseSchedule
    :param rng: numpy Generator; the only randomness of the step
    :param optimizer: Adam, or None to only evaluate
    :returns: StepResult
    :raises NumericError: with the drawn timesteps when a loss or gradient is not finite
    """
    model = as_model(model)
    batch = [as_tensor(image) for image in batch]
    if not batch:
        raise RangeError("A training batch needs at least one image")
    timesteps = rng.integers(1, schedule.T_train + 1, size=len(batch))
    noises = [rng.standard_normal(image.shape) for image in batch]
    parameters = model.parameters
    train = optimizer is not None and len(parameters) > 0
    totals = None
    losses = []
    try:
        for image, t, noise in zip(batch, timesteps, noises):
            noise = Tensor(noise)
            z_t = q_sample(image, int(t), noise, schedule)
            with GradTape() as tape:
                loss = mean_squared_error(model(z_t, int(t)), noise)
            losses.append(loss.item())
            if train:
                grads = tape.backward(loss, parameters)
                if totals is None:
                    totals = {name: grad.astype(np.float64) for name, grad in grads.items()}
                else:
                    for name, grad in grads.items():
                        totals[name] += grad
    except NumericError as exc:
        raise NumericError("Training step at timesteps %s: %s" % (timesteps.tolist(), exc))
    mean_loss = float(np.mean(losses))
    if not math.isfinite(mean_loss):
        raise NumericError("Non-finite training loss at timesteps %s" % timesteps.tolist())
    if train:
        grads = {name: total / len(batch) for name, total in totals.items()}
        if not all(np.all(np.isfinite(grad)) for grad in grads.values()):
            raise NumericError("Non-finite gradient at timesteps %s" % timesteps.tolist())
        model = _with_parameters(model, optimizer.step(parameters, grads))
    return StepResult(mean_loss, losses, timesteps, model)


class EpochRecord(object):
    def __init__(self, epoch, train_loss, val_loss):
        self.epoch = epoch
        self.train_loss = train_loss
        self.val_loss = val_loss

    def as_dict(self):
        return {"epoch": self.epoch, "train_loss": self.train_loss, "val_loss": self.val_loss}


class TrainingResult(object):
    """`weights` are the inference (EMA) weights, `raw_weights` the last optimizer iterate."""

    def __init__(self, weights, raw_weights, noise, history, config):
        self.weights = weights
        self.raw_weights = raw_weights
        self.noise = noise
        self.history = history
        self.config = config

    @property
    def initial_val_loss(self):
        return self.history[0].val_loss

    @property
    def final_val_loss(self):
        return self.history[-1].val_loss

    def metadata(self):
        return {
            "noise": self.noise.as_dict(),
            "train": self.config.as_dict(),
            "history": [record.as_dict() for record in self.history],
        }


class Trainer(object):
    """Runs the training loop for one TrainConfig.

    Validation noise and timesteps are drawn once from a generator seeded apart from the training one, so
    every epoch is scored on the same noised samples. Epoch 0 in the history is the untrained model.

    :param config: TrainConfig
    :param dataset: ProceduralDataset; generated from `config.dataset_spec` when omitted
    :param model: starting model; a freshly initialized U-Net when omitted
    """

    def __init__(self, config=None, dataset=None, model=None):
        self.config = config if config is not None else TrainConfig()
        self.noise = self.config.noise_schedule()
        if dataset is None:
            dataset = generate_dataset(self.config.dataset_spec)
        self.train_images = [image.as_tensor() for image in dataset.train]
        self.val_images = [image.as_tensor() for image in dataset.val][: self.config.val_samples]
        if not self.train_images or not self.val_images:
            raise ConfigurationError("Training needs nonempty train and val splits")
        if model is None:
            model = UNetWeights.initialize(self.config.unet_config, self.config.seed)
        self.model = as_model(model)
        self.optimizer = Adam(self.config.learning_rate)
        self.rng = np.random.default_rng(np.random.SeedSequence(self.config.seed).spawn(2)[0])
        val_rng = np.random.default_rng(np.random.SeedSequence(self.config.seed).spawn(2)[1])
        self.val_draws = [
            (int(val_rng.integers(1, self.noise.T_train + 1)), Tensor(val_rng.standard_normal(image.shape)))
            for image in self.val_images
        ]

    def validation_loss(self, model=None):
        model = self.model if model is None else as_model(model)
        losses = []
        for image, (t, noise) in zip(self.val_images, self.val_draws):
            z_t = q_sample(image, t, noise, self.noise)
            losses.append(mean_squared_error(model(z_t, t), noise).item())
        return float(np.mean(losses))

    def sample_batch(self):
        count = len(self.train_images)
        size = self.config.batch_size
        indices = self.rng.choice(count, size=size, replace=count < size)
        return [self.train_images[i] for i in indices]

    def train(self, progress=False):
        """Run every epoch.

        :returns: TrainingResult
        :raises TrainingDivergedError: when validation stays above the divergence bound long enough
        """
        config = self.config
        initial = self.validation_loss()
        history = [EpochRecord(0, None, initial)]
        logger.info("initial validation loss %.5f", initial)
        average = None
        if config.ema_decay:
            average = ExponentialMovingAverage(self.model.parameters, config.ema_decay)
        bound = config.divergence_factor * initial
        streak = 0
        for epoch in tqdm(range(1, config.epochs + 1), desc="train", disable=not progress):
            losses = []
            for _ in range(config.steps_per_epoch):
                result = training_step(self.sample_batch(), self.model, self.noise, self.rng, self.optimizer)
                self.model = result.model
                losses.append(result.loss)
                if average is not None:
                    average.update(self.model.parameters)
            val_loss = self.validation_loss()
            if not math.isfinite(val_loss):
                raise NumericError("Non-finite validation loss at epoch %d" % epoch)
            record = EpochRecord(epoch, float(np.mean(losses)), val_loss)
            history.append(record)
            logger.info("epoch %d train loss %.5f val loss %.5f", epoch, record.train_loss, val_loss)
            streak = streak + 1 if val_loss > bound else 0
            if streak >= config.divergence_patience:
                raise TrainingDivergedError(
                    "Validation loss %.4g stayed above %.4g for %d epochs (epoch %d)"
                    % (val_loss, bound, streak, epoch)
                )
        raw = self.model.weights
        weights = raw.replace(average.parameters()) if average is not None else raw
        return TrainingResult(weights, raw, self.noise, history, config)


def write_loss_curve(history, path):
    with open(path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=["epoch", "train_loss", "val_loss"])
        writer.writeheader()
        for record in history:
            writer.writerow(record.as_dict())


def train(config=None, dataset=None, checkpoint=None, loss_curve=None, progress=False):
    """Train a model and optionally save its checkpoint and loss curve.

    The checkpoint metadata carries the noise schedule, the training options and the loss history.

    :returns: TrainingResult
    """
    result = Trainer(config, dataset).train(progress=progress)
    if checkpoint is not None:
        save_checkpoint(result.weights, checkpoint, result.metadata())
        logger.info("saved checkpoint to %s", checkpoint)
    if loss_curve is not None:
        write_loss_curve(result.history, loss_curve)
    return result
