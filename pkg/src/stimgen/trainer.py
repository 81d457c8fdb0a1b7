"""Alternating encoder / decoder / discriminator training with metric calibration."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .metrics import DEFAULT_SSIM, SsimParams, dtw_batch, ssim_batch
from .vaegan import ArchitectureSpec, LayerSpec, LossBundle, VaeGanModel, forward_objectives

log = logging.getLogger(__name__)

SWEEP_BETAS = (1.0, 10.0, 50.0, 250.0)
SWEEP_LATENT_DIMS = (5, 10)


class TrainingError(RuntimeError):
    pass


class NonFiniteLossError(TrainingError, FloatingPointError):
    def __init__(self, term: str, value: float, iteration: int | None = None):
        where = f" at iteration {iteration}" if iteration is not None else ""
        super().__init__(f"non-finite {term} loss ({value}){where}")
        self.term = term


@dataclass
class TrainConfig:
    beta: float = 1.0
    gamma: float = 100.0
    latent_dims: int = 8
    batch_size: int = 128
    kernel_size: int = 8
    learning_rate: float = 2e-4
    beta1: float = 0.5
    max_iterations: int = 1000
    calibration_interval: int = 100
    averaging_window: int = 5
    rng_seed: int = 0
    optimizer: str = "adam"
    gradient_averaging: bool = False
    gan_loss: str = "minimax"

    def __post_init__(self):
        if self.beta < 0 or self.gamma < 0:
            raise ValueError("beta and gamma must be non-negative")
        if self.batch_size < 1 or self.latent_dims < 1 or self.kernel_size < 1:
            raise ValueError("batch_size, latent_dims and kernel_size must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0 <= self.beta1 < 1:
            raise ValueError("beta1 must lie in [0, 1)")
        if self.max_iterations < 0 or self.calibration_interval < 1 or self.averaging_window < 1:
            raise ValueError("max_iterations >= 0, calibration_interval >= 1 and "
                             "averaging_window >= 1 are required")
        if self.optimizer not in ("adam", "rmsprop", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.gan_loss not in ("minimax", "nonsaturating"):
            raise ValueError(f"unknown gan_loss {self.gan_loss!r}")


def build_model(config: TrainConfig, sequence_length: int = 64, channels: int = 2,
                widths: Sequence[int] = (32, 64, 128, 256), feature_layer: int = 3,
                seed: int | None = None, init_scheme: str = "normal",
                init_std: float = 0.02) -> VaeGanModel:
    arch = ArchitectureSpec(
        sequence_length=sequence_length, channels=channels, latent_dims=config.latent_dims,
        layers=tuple(LayerSpec(w, config.kernel_size, 2) for w in widths),
        feature_layer=feature_layer, init_std=init_std, init_scheme=init_scheme)
    return VaeGanModel(arch, seed=config.rng_seed if seed is None else seed)


@dataclass
class TrainState:
    """One optimizer per network; ``step_fns`` may be wrapped to observe updates."""

    states: dict[str, object]
    step_fns: dict[str, Callable]
    iteration: int = 0

    @classmethod
    def fresh(cls, config: TrainConfig) -> "TrainState":
        states, fns = {}, {}
        for net in ("enc", "dec", "disc"):
            states[net], fns[net] = ad.make_optimizer(config.optimizer, config.learning_rate,
                                                      config.beta1)
        return cls(states, fns)


NETWORK_ORDER = ("enc", "dec", "disc")


def step_gradients(model: VaeGanModel, batch: np.ndarray, config: TrainConfig,
                   rng: np.random.Generator) -> tuple[dict[str, list[np.ndarray]], LossBundle]:
    """Gradients of the three network objectives on one mini-batch.

    encoder: L_disl + beta * L_prior; decoder: gamma * L_disl plus the
    adversarial term; discriminator: -L_GAN (it ascends the log-likelihood).
    """
    b, d = batch.shape[0], model.arch.latent_dims
    eps = rng.standard_normal((b, d))
    z_prior = rng.standard_normal((b, d))
    try:
        obj = forward_objectives(model, batch, eps, z_prior, config.beta, config.gamma,
                                 config.gan_loss)
    except FloatingPointError as exc:
        raise NonFiniteLossError("posterior", float("nan")) from exc
    losses = obj.bundle(config.beta, config.gamma)
    for term in ("l_prior", "l_disl", "l_gan"):
        value = getattr(losses, term)
        if not np.isfinite(value):
            raise NonFiniteLossError(term, value)
    enc, dec, disc = model.encoder_params, model.decoder_params, model.discriminator_params
    g_disl = ad.backward(obj.l_disl, enc + dec).grads
    g_prior = ad.backward(obj.l_prior, enc).grads
    if config.gan_loss == "minimax":
        g_gan = ad.backward(obj.l_gan, dec + disc).grads
        g_adv, g_disc = g_gan[:len(dec)], [-g for g in g_gan[len(dec):]]
    else:
        g_adv = ad.backward(obj.adversarial, dec).grads
        g_disc = ad.backward(obj.discriminator, disc).grads
    n_enc = len(enc)
    grads = {
        "enc": [a + config.beta * p for a, p in zip(g_disl[:n_enc], g_prior)],
        "dec": [config.gamma * a + g for a, g in zip(g_disl[n_enc:], g_adv)],
        "disc": g_disc,
    }
    return grads, losses


def apply_updates(model: VaeGanModel, grads: dict[str, list[np.ndarray]], state: TrainState) -> None:
    for net in NETWORK_ORDER:
        state.step_fns[net](model.network_params(net), grads[net], state.states[net])


def train_step(model: VaeGanModel, batch: np.ndarray, config: TrainConfig,
               rng: np.random.Generator, state: TrainState | None = None) -> LossBundle:
    """One encoder -> decoder -> discriminator update on ``batch``."""
    state = state or TrainState.fresh(config)
    grads, losses = step_gradients(model, batch, config, rng)
    apply_updates(model, grads, state)
    state.iteration += 1
    return losses


# --- calibration ----------------------------------------------------------------

@dataclass(frozen=True)
class Calibration:
    ssim_mean: float
    dtw_mean: float
    disl_mean: float


def calibrate(model: VaeGanModel, test_batch: np.ndarray, ssim_params: SsimParams = DEFAULT_SSIM,
              x_bar: np.ndarray | None = None, chunk: int = 256) -> Calibration:
    """Reconstruction fitness on held-out sequences.

    ``x_bar`` overrides the model reconstruction ``Dec(Enc-mean(x))``.
    """
    x = np.asarray(test_batch, dtype=np.float64)
    if x.ndim != 3 or len(x) == 0:
        raise ValueError("calibrate: need a non-empty (batch, channels, samples) array")
    ssims, dtws, disl = [], [], []
    for lo in range(0, len(x), chunk):
        xs = x[lo:lo + chunk]
        xb = model.reconstruct(xs) if x_bar is None else np.asarray(x_bar[lo:lo + chunk])
        ssims.append(ssim_batch(xs, xb, ssim_params))
        dtws.append(dtw_batch(xs, xb))
        f_x = model.discriminate(xs)[1].data
        f_b = model.discriminate(xb)[1].data
        disl.append(((f_x - f_b) ** 2).reshape(len(xs), -1).mean(axis=1))
    return Calibration(float(np.concatenate(ssims).mean()), float(np.concatenate(dtws).mean()),
                       float(np.concatenate(disl).mean()))


# --- training loop ---------------------------------------------------------------

@dataclass
class HistoryPoint:
    iteration: int
    enc_obj: float
    dec_obj: float
    disc_obj: float
    cal_ssim: float
    cal_dtw: float
    cal_disl: float


@dataclass
class TrainingHistory:
    points: list[HistoryPoint] = field(default_factory=list)

    COLUMNS = ("iteration", "enc_obj", "dec_obj", "disc_obj", "cal_ssim", "cal_dtw")

    def __len__(self):
        return len(self.points)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(p, name) for p in self.points])

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for p in self.points:
                w.writerow([p.iteration] + [repr(float(getattr(p, c))) for c in self.COLUMNS[1:]])
        return path

    @classmethod
    def from_csv(cls, path) -> "TrainingHistory":
        with Path(path).open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([HistoryPoint(int(r["iteration"]), float(r["enc_obj"]), float(r["dec_obj"]),
                                 float(r["disc_obj"]), float(r["cal_ssim"]), float(r["cal_dtw"]),
                                 float("nan")) for r in rows])


def _split_corpus(corpus) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(corpus, tuple):
        train, cal = corpus
    else:
        train, cal = corpus.train, corpus.test
    return np.asarray(train, dtype=np.float64), np.asarray(cal, dtype=np.float64)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for lo in range(0, n - batch_size + 1, batch_size):
            yield order[lo:lo + batch_size]


def train(model: VaeGanModel, corpus, config: TrainConfig,
          ssim_params: SsimParams = DEFAULT_SSIM,
          on_point: Callable[[HistoryPoint], None] | None = None,
          state: TrainState | None = None) -> TrainingHistory:
    """Train for ``config.max_iterations`` mini-batches.

    ``corpus`` is a :class:`~stimgen.signal_io.Corpus` (train split trains,
    test split calibrates) or a ``(train, calibration)`` pair of arrays.
    History points are written at iteration 0 and every
    ``calibration_interval`` iterations; their objective values are the mean
    over the last ``averaging_window`` mini-batches.
    """
    train_x, cal_x = _split_corpus(corpus)
    if len(train_x) == 0:
        raise TrainingError("empty training set")
    if len(cal_x) == 0:
        raise TrainingError("empty calibration set")
    if config.batch_size > len(train_x):
        raise TrainingError(
            f"batch_size {config.batch_size} exceeds training set size {len(train_x)}")
    rng = np.random.default_rng(config.rng_seed)
    state = state or TrainState.fresh(config)
    history = TrainingHistory()
    recent: list[LossBundle] = []

    def record(iteration: int):
        if recent:
            window = recent[-config.averaging_window:]
            objs = [float(np.mean([getattr(l, a) for l in window]))
                    for a in ("encoder_objective", "decoder_objective", "discriminator_objective")]
        else:
            probe = np.random.default_rng([config.rng_seed, 1])
            _, l0 = step_gradients(model, cal_x[:config.batch_size], config, probe)
            objs = [l0.encoder_objective, l0.decoder_objective, l0.discriminator_objective]
        cal = calibrate(model, cal_x, ssim_params)
        point = HistoryPoint(iteration, *objs, cal.ssim_mean, cal.dtw_mean, cal.disl_mean)
        history.points.append(point)
        log.info("iter %d  enc %.4g dec %.4g disc %.4g  ssim %.4f dtw %.3f", iteration,
                 *objs, cal.ssim_mean, cal.dtw_mean)
        if on_point:
            on_point(point)

    record(0)
    batches = _batches(len(train_x), config.batch_size, rng)
    pending: dict[str, list[np.ndarray]] | None = None
    pending_n = 0
    for it in range(1, config.max_iterations + 1):
        batch = train_x[next(batches)]
        try:
            grads, losses = step_gradients(model, batch, config, rng)
        except NonFiniteLossError as exc:
            raise NonFiniteLossError(exc.term, float("nan"), it) from exc
        recent.append(losses)
        del recent[:-config.averaging_window]
        if config.gradient_averaging:
            if pending is None:
                pending = grads
            else:
                pending = {k: [a + b for a, b in zip(pending[k], grads[k])] for k in grads}
            pending_n += 1
            if pending_n == config.averaging_window or it == config.max_iterations:
                apply_updates(model, {k: [g / pending_n for g in v] for k, v in pending.items()},
                              state)
                pending, pending_n = None, 0
        else:
            apply_updates(model, grads, state)
        state.iteration += 1
        if it % config.calibration_interval == 0 or it == config.max_iterations:
            record(it)
    return history


# --- model comparison ------------------------------------------------------------

@dataclass(frozen=True)
class ReportRow:
    name: str
    ssim: float
    dtw: float
    disl: float


def evaluate_models(checkpoints: Sequence, test_set: np.ndarray,
                    ssim_params: SsimParams = DEFAULT_SSIM) -> list[ReportRow]:
    """Rank models by mean reconstruction SSIM (desc), then DTW (asc), then name.

    ``checkpoints`` holds ``(name, model)`` pairs or checkpoint paths.
    """
    from .vaegan import load_checkpoint

    if not checkpoints:
        raise ValueError("evaluate_models: at least one checkpoint is required")
    test_set = np.asarray(test_set, dtype=np.float64)
    rows = []
    for item in checkpoints:
        if isinstance(item, (str, Path)):
            name, model = Path(item).name, load_checkpoint(item)
        else:
            name, model = item
        expected = (model.arch.channels, model.arch.sequence_length)
        if test_set.shape[1:] != expected:
            raise ad.ShapeError(f"model {name} expects sequences of shape {expected}, "
                                f"test set has {test_set.shape[1:]}")
        cal = calibrate(model, test_set, ssim_params)
        rows.append(ReportRow(name, cal.ssim_mean, cal.dtw_mean, cal.disl_mean))
    return sorted(rows, key=lambda r: (-r.ssim, r.dtw, r.name))


def write_report(rows: Sequence[ReportRow], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "name", "ssim", "dtw", "disl"])
        for i, r in enumerate(rows, 1):
            w.writerow([i, r.name, repr(r.ssim), repr(r.dtw), repr(r.disl)])
    return path


def config_fields() -> list[str]:
    return [f.name for f in fields(TrainConfig)]
