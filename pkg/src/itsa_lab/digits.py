"""Single-source digit recognition: MNIST-style source, MNIST-M-style target.

Training only ever sees source digits. The target domain pastes each test
digit onto a procedural color-noise patch (``|patch - digit|``), which keeps
the shape and destroys the color statistics a shortcut learner relies on.
"""

import gzip
import logging
import math
import struct
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Protocol

import numpy as np
import numpy.typing as npt
from matplotlib.font_manager import FontProperties
from matplotlib.path import Path as MplPath
from matplotlib.textpath import TextPath
from matplotlib.transforms import Affine2D
from scipy import ndimage, special

from . import fisher, itsa
from .data.constants import (
    IDX_IMAGE_MAGIC,
    IDX_LABEL_MAGIC,
    NUM_CLASSES,
    DigitSource,
    Method,
    Split,
)
from .data.domains import (
    DigitRunConfig,
    FloatArray,
    IntArray,
    LabeledImageSet,
    MetricsRecord,
)
from .diffnet import (
    Conv2d,
    Flatten,
    Grads,
    LeakyReLU,
    Linear,
    Sequential,
    cross_entropy,
)
from .errors import DivergenceError, IdxFormatError
from .normalize import Standardizer
from .optim import AdamState, adam_step
from .parallel import parallel_map
from .textures import color_noise

logger = logging.getLogger(__name__)

IMAGE_SIZE = 28
IB_RHO_SHIFT = 5.0
EVAL_BATCH = 512
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


# ---------------------------------------------------------------------------
# IDX files


def parse_idx(data: bytes) -> npt.NDArray[np.uint8]:
    """Decode an unsigned-byte IDX blob (image or label file).

    Raises:
        IdxFormatError: On a wrong magic number, a truncated header or payload,
            or a payload longer than the declared dimensions.
    """
    if len(data) < 4:
        raise IdxFormatError(f"truncated header: {len(data)} bytes")
    (magic,) = struct.unpack(">I", data[:4])
    if magic not in (IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC):
        raise IdxFormatError(
            f"wrong magic number 0x{magic:08x}; expected 0x{IDX_IMAGE_MAGIC:08x} "
            f"(images) or 0x{IDX_LABEL_MAGIC:08x} (labels)"
        )
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxFormatError(f"truncated header: need {header} bytes, got {len(data)}")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    expected = math.prod(dims)
    payload = len(data) - header
    if payload < expected:
        raise IdxFormatError(
            f"truncated payload: dimensions {dims} need {expected} bytes, got {payload}"
        )
    if payload > expected:
        raise IdxFormatError(
            f"dimension mismatch: dimensions {dims} declare {expected} bytes, "
            f"payload has {payload}"
        )
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims).copy()


def serialize_idx(array: npt.NDArray[np.uint8]) -> bytes:
    """Encode a rank-3 image or rank-1 label array as IDX bytes."""
    magics = {3: IDX_IMAGE_MAGIC, 1: IDX_LABEL_MAGIC}
    if array.ndim not in magics:
        raise ValueError(f"IDX arrays must be rank 3 or 1, got rank {array.ndim}")
    if array.dtype != np.uint8:
        raise ValueError(f"IDX arrays must be uint8, got {array.dtype}")
    header = struct.pack(f">I{array.ndim}I", magics[array.ndim], *array.shape)
    return header + np.ascontiguousarray(array).tobytes()


def read_idx_bytes(path: Path) -> bytes:
    """File contents, transparently gunzipped."""
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def load_idx(path: Path) -> FloatArray | IntArray:
    """Images scaled to [0, 1] as float32 [n, h, w], or labels as int64 [n]."""
    array = parse_idx(read_idx_bytes(path))
    if array.ndim == 3:
        return array.astype(np.float32) / np.float32(255.0)
    return array.astype(np.int64)


def save_idx(path: Path, array: npt.NDArray[np.uint8]) -> None:
    """Write IDX bytes, gzipped when the name ends in ``.gz``."""
    data = serialize_idx(array)
    if str(path).endswith(".gz"):
        data = gzip.compress(data, mtime=0)
    Path(path).write_bytes(data)


def _find(data_dir: Path, stem: str) -> Path:
    for name in (stem, f"{stem}.gz"):
        candidate = data_dir / name
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{stem}[.gz] not found in {data_dir}")


def load_mnist(data_dir: Path, part: str = "train") -> LabeledImageSet:
    """Pair an MNIST image file with its label file as [n, 1, 28, 28] images."""
    if part not in MNIST_FILES:
        raise ValueError(f"Unknown MNIST part: {part}. Available parts: train, test")
    image_stem, label_stem = MNIST_FILES[part]
    images = load_idx(_find(Path(data_dir), image_stem))
    labels = load_idx(_find(Path(data_dir), label_stem))
    if images.ndim != 3 or labels.ndim != 1:
        raise IdxFormatError("dimension mismatch: expected an image and a label file")
    if len(images) != len(labels):
        raise IdxFormatError(
            f"dimension mismatch: {len(images)} images but {len(labels)} labels"
        )
    split = Split.TRAIN.value if part == "train" else Split.SOURCE_TEST.value
    return LabeledImageSet(images[:, None], labels.astype(np.int64), split)


# ---------------------------------------------------------------------------
# Offline glyph digits


@lru_cache(maxsize=64)
def _glyph(digit: int, weight: str, style: str) -> MplPath:
    prop = FontProperties(family="DejaVu Sans", weight=weight, style=style)
    return TextPath((0.0, 0.0), str(digit), size=1.0, prop=prop)


def render_glyph(
    digit: int, rng: np.random.Generator, size: int = IMAGE_SIZE
) -> FloatArray:
    """Rasterize a randomly styled font digit as a [size, size] image in [0, 1]."""
    path = _glyph(
        digit,
        "bold" if rng.random() < 0.5 else "normal",
        "oblique" if rng.random() < 0.3 else "normal",
    )
    box = path.get_extents()
    height = size * rng.uniform(0.55, 0.75)
    transform = (
        Affine2D()
        .translate(-(box.x0 + box.x1) / 2, -(box.y0 + box.y1) / 2)
        .scale(height / max(box.height, 1e-6))
        .skew_deg(rng.uniform(-12.0, 12.0), 0.0)
        .rotate_deg(rng.uniform(-15.0, 15.0))
        .translate(size / 2 + rng.uniform(-2.0, 2.0), size / 2 + rng.uniform(-2.0, 2.0))
    )
    placed = transform.transform_path(path)
    sub = 3
    coords = (np.arange(size * sub) + 0.5) / sub
    xx, yy = np.meshgrid(coords, size - coords)
    inside = placed.contains_points(np.column_stack([xx.ravel(), yy.ravel()]))
    mask = inside.reshape(size * sub, size * sub)
    if rng.random() < 0.5:
        mask = ndimage.binary_dilation(mask, iterations=int(rng.integers(1, 3)))
    coverage = mask.reshape(size, sub, size, sub).mean(axis=(1, 3))
    return np.clip(ndimage.gaussian_filter(coverage, 0.5), 0.0, 1.0).astype(np.float32)


def glyph_digits(
    n: int, seed: int | tuple[int, ...], split: str, workers: int = 1
) -> LabeledImageSet:
    """``n`` glyph digits with balanced labels, deterministic per (seed, index)."""
    labels = np.arange(n, dtype=np.int64) % NUM_CLASSES
    seeds = np.atleast_1d(np.asarray(seed)).tolist()
    for digit in range(NUM_CLASSES):  # font loading is not thread-safe
        for weight in ("bold", "normal"):
            for style in ("oblique", "normal"):
                _glyph(digit, weight, style)

    def render(i: int) -> FloatArray:
        return render_glyph(int(labels[i]), np.random.default_rng((*seeds, i)))

    images = np.stack(parallel_map(render, range(n), workers))[:, None]
    return LabeledImageSet(images, labels, split)


# ---------------------------------------------------------------------------
# Target-domain synthesis


def texture_patch(seed: int, index: int, size: int = IMAGE_SIZE) -> FloatArray:
    """Color-noise background patch number ``index`` of the bank ``seed``."""
    rng = np.random.default_rng((seed, index))
    return color_noise(rng, size, size, cells=int(rng.integers(2, 7)))


def synth_mnistm(digit: FloatArray, patch: FloatArray) -> FloatArray:
    """Per-channel ``|patch - digit|`` of a [1, h, w] digit and a [3, h, w] patch."""
    if digit.shape[0] != 1 or patch.shape[0] != 3 or digit.shape[1:] != patch.shape[1:]:
        raise ValueError(
            f"expected [1, h, w] digit and [3, h, w] patch, got {digit.shape} and "
            f"{patch.shape}"
        )
    return np.abs(patch - digit).astype(np.float32)


def make_target_set(
    source: LabeledImageSet, texture_seed: int, workers: int = 1
) -> LabeledImageSet:
    """Blend every source digit with its own background patch."""

    def blend(i: int) -> FloatArray:
        return synth_mnistm(source.images[i], texture_patch(texture_seed, i))

    images = np.stack(parallel_map(blend, range(len(source)), workers))
    return LabeledImageSet(images, source.labels.copy(), Split.TARGET_TEST.value)


def to_three_channels(images: FloatArray) -> FloatArray:
    """Replicate single-channel images over three channels."""
    if images.shape[1] == 3:
        return images
    return np.repeat(images, 3, axis=1)


@dataclass
class DigitData:
    train: LabeledImageSet
    source_test: LabeledImageSet
    target_test: LabeledImageSet


def prepare_digit_data(
    source: DigitSource,
    train_size: int,
    test_size: int,
    texture_seed: int,
    data_dir: Path | None = None,
    seed: int = 0,
    workers: int = 1,
) -> DigitData:
    """Source training/test digits and the synthesized target test set."""
    source = DigitSource(source)
    if source == DigitSource.MNIST:
        if data_dir is None:
            raise ValueError("the mnist source needs digit.data_dir")
        train = load_mnist(data_dir, "train")
        test = load_mnist(data_dir, "test")
        train = train.subset(slice(0, min(train_size, len(train))))
        test = test.subset(slice(0, min(test_size, len(test))))
    else:
        train = glyph_digits(train_size, (seed, 0), Split.TRAIN.value, workers)
        test = glyph_digits(test_size, (seed, 1), Split.SOURCE_TEST.value, workers)
    target = make_target_set(test, texture_seed, workers)
    logger.info(
        f"digits: {len(train)} train, {len(test)} source test, "
        f"{len(target)} target test"
    )
    return DigitData(train=train, source_test=test, target_test=target)


# ---------------------------------------------------------------------------
# Model


class Classifier(Protocol):
    def logits(self, images: FloatArray) -> FloatArray: ...


class DigitNet:
    """Two stride-2 convolutions (features z) followed by a method-specific head.

    ERM and ITSA use a deterministic two-layer head. IB adds a Gaussian
    bottleneck with learned scale, RIB one with fixed scale; both predict from
    the bottleneck mean at evaluation.
    """

    def __init__(
        self,
        method: Method,
        rng: np.random.Generator,
        standardizer: Standardizer,
        latent_dim: int = 64,
        sigma: float = 1.0,
    ) -> None:
        self.method = Method(method)
        self.standardizer = standardizer
        self.latent_dim = latent_dim
        self.sigma = sigma
        self.features = Sequential(
            [
                Conv2d(3, 16, 3, rng, stride=2, padding=1, name="conv1"),
                LeakyReLU(),
                Conv2d(16, 32, 3, rng, stride=2, padding=1, name="conv2"),
                LeakyReLU(),
            ],
            (3, IMAGE_SIZE, IMAGE_SIZE),
        )
        z_shape = self.features.output_shape
        z_size = math.prod(z_shape)
        self.encoder: Sequential | None = None
        if self.method in (Method.ERM, Method.ITSA):
            self.head = Sequential(
                [
                    Flatten(),
                    Linear(z_size, 64, rng, name="fc1"),
                    LeakyReLU(),
                    Linear(64, NUM_CLASSES, rng, name="fc2"),
                ],
                z_shape,
            )
            return
        width = 2 * latent_dim if self.method == Method.IB else latent_dim
        self.encoder = Sequential(
            [Flatten(), Linear(z_size, width, rng, name="enc")], z_shape
        )
        self.head = Sequential(
            [LeakyReLU(), Linear(latent_dim, NUM_CLASSES, rng, name="fc2")],
            (latent_dim,),
        )

    def parameters(self) -> dict[str, FloatArray]:
        params = {**self.features.parameters(), **self.head.parameters()}
        if self.encoder is not None:
            params.update(self.encoder.parameters())
        return params

    def normalize(self, images: FloatArray) -> FloatArray:
        return self.standardizer.apply(to_three_channels(images))

    def mean_latent(self, x: FloatArray) -> FloatArray:
        """Bottleneck mean for standardized inputs (IB and RIB only)."""
        if self.encoder is None:
            raise ValueError(f"method {self.method.value} has no bottleneck")
        a = self.encoder(self.features(x))
        return a[:, : self.latent_dim]

    def logits(self, images: FloatArray) -> FloatArray:
        """Deterministic evaluation logits for raw images in [0, 1]."""
        x = self.normalize(images)
        if self.encoder is None:
            return self.head(self.features(x))
        return self.head(self.mean_latent(x))


def eval_top1(model: Classifier, data: LabeledImageSet) -> float:
    """Top-1 accuracy in percent (0 for an empty set)."""
    if len(data) == 0:
        return 0.0
    correct = 0
    for start in range(0, len(data), EVAL_BATCH):
        batch = data.images[start : start + EVAL_BATCH]
        predictions = np.argmax(model.logits(batch), axis=1)
        correct += int(np.sum(predictions == data.labels[start : start + EVAL_BATCH]))
    return 100.0 * correct / len(data)


# ---------------------------------------------------------------------------
# Training


@dataclass
class DigitStep:
    loss: float
    regularizer: float | None
    grads: Grads


def _erm_itsa_step(
    net: DigitNet,
    x: FloatArray,
    labels: IntArray,
    config: DigitRunConfig,
    u: FloatArray | None = None,
) -> DigitStep:
    scp = config.scp
    branch = None
    x_task = x
    if net.method == Method.ITSA:
        branch = itsa.fisher_branch(net.features, x, scp, scp.lam, u)
        if scp.perturbed_task_branch:
            x_task = branch.pair.x_star
    z, tape_z = net.features.forward_tape(x_task)
    logits, tape_h = net.head.forward_tape(z)
    loss, g_logits = cross_entropy(logits, labels)
    g_z, grads = net.head.backward(tape_h, g_logits)
    if branch is not None and not scp.perturbed_task_branch:
        g_z = g_z + branch.grad_z
    itsa.add_grads(grads, net.features.backward(tape_z, g_z)[1])
    if branch is None:
        return DigitStep(loss, None, grads)
    itsa.add_grads(grads, branch.grads)
    if scp.perturbed_task_branch:
        _, tape_clean = net.features.forward_tape(x)
        itsa.add_grads(grads, net.features.backward(tape_clean, branch.grad_z)[1])
    total = itsa.itsa_total_loss(loss, branch.value, lam=scp.lam)
    return DigitStep(total, branch.value, grads)


def _ib_step(
    net: DigitNet,
    x: FloatArray,
    labels: IntArray,
    beta: float,
    rng: np.random.Generator,
) -> DigitStep:
    assert net.encoder is not None
    k = net.latent_dim
    h, tape_f = net.features.forward_tape(x)
    a, tape_e = net.encoder.forward_tape(h)
    mu, rho = a[:, :k], a[:, k:]
    sigma = np.logaddexp(0.0, rho - IB_RHO_SHIFT).astype(a.dtype)
    eta = rng.standard_normal(mu.shape).astype(a.dtype)
    z = mu + sigma * eta
    logits, tape_h = net.head.forward_tape(z)
    task, g_logits = cross_entropy(logits, labels)
    kl = fisher.vib_kl(mu, sigma)
    g_z, grads = net.head.backward(tape_h, g_logits)
    kl_mu, kl_sigma = fisher.vib_kl_backward(mu, sigma)
    b = a.dtype.type(beta)
    g_mu = g_z + b * kl_mu
    g_sigma = g_z * eta + b * kl_sigma
    g_rho = g_sigma * special.expit(rho - IB_RHO_SHIFT).astype(a.dtype)
    g_h, enc_grads = net.encoder.backward(tape_e, np.concatenate([g_mu, g_rho], axis=1))
    itsa.add_grads(grads, enc_grads)
    itsa.add_grads(grads, net.features.backward(tape_f, g_h)[1])
    return DigitStep(task + beta * kl, kl, grads)


def _rib_step(
    net: DigitNet,
    x: FloatArray,
    labels: IntArray,
    beta_fisher: float,
    n_probes: int,
    rng: np.random.Generator,
) -> DigitStep:
    assert net.encoder is not None
    h, tape_f = net.features.forward_tape(x)
    mu, tape_e = net.encoder.forward_tape(h)
    eta = rng.standard_normal(mu.shape).astype(mu.dtype)
    z = mu + mu.dtype.type(net.sigma) * eta
    logits, tape_h = net.head.forward_tape(z)
    task, g_logits = cross_entropy(logits, labels)
    g_z, grads = net.head.backward(tape_h, g_logits)
    g_h, enc_grads = net.encoder.backward(tape_e, g_z)
    itsa.add_grads(grads, enc_grads)
    itsa.add_grads(grads, net.features.backward(tape_f, g_h)[1])
    encoder = fisher.GaussianEncoder(net.features.then(net.encoder), net.sigma)
    penalty, penalty_grads = fisher.rib_penalty_and_grads(encoder, x, n_probes, rng)
    weight = x.dtype.type(beta_fisher)
    itsa.add_grads(grads, {name: weight * g for name, g in penalty_grads.items()})
    return DigitStep(task + beta_fisher * penalty, penalty, grads)


REGULARIZER_METRIC = {
    Method.ITSA: "l_fi",
    Method.IB: "kl",
    Method.RIB: "fisher_penalty",
}


@dataclass
class DigitTrainResult:
    """Trained model, metric records and training-phase bookkeeping."""

    model: DigitNet
    records: list[MetricsRecord]
    step_regularizer: list[list[float]] = field(default_factory=list)  # per epoch
    access_log: list[str] = field(default_factory=list)
    parameter_trace: list[dict[str, FloatArray]] = field(default_factory=list)


def split_train_val(
    train: LabeledImageSet, val_fraction: float, seed: int
) -> tuple[LabeledImageSet, LabeledImageSet]:
    """Deterministic shuffled split of the source training set."""
    order = np.random.default_rng((seed, 3)).permutation(len(train))
    n_val = int(round(val_fraction * len(train)))
    return (
        train.subset(np.sort(order[n_val:]), Split.TRAIN.value),
        train.subset(np.sort(order[:n_val]), Split.VAL.value),
    )


def train_digit(
    config: DigitRunConfig,
    train: LabeledImageSet,
    trace_parameters: bool = False,
    step_hook: Callable[[int, DigitStep], None] | None = None,
) -> DigitTrainResult:
    """Train a digit classifier on source data only.

    Args:
        config: Method, optimization and regularizer settings.
        train: Source training digits; a validation share is held out.
        trace_parameters: Record a copy of every parameter after each step.
        step_hook: Called with (step, result) after every update.

    Returns:
        The trained model, per-epoch records (train loss, validation top-1 and
        the method's regularizer) and the fingerprints of all data touched.

    Raises:
        DivergenceError: If the loss becomes non-finite.
    """
    method = Method(config.method)
    fit_set, val_set = split_train_val(train, config.val_fraction, config.seed)
    access_log = [fit_set.fingerprint, val_set.fingerprint]
    standardizer = Standardizer.fit(to_three_channels(fit_set.images))
    net = DigitNet(
        method,
        np.random.default_rng(config.seed),
        standardizer,
        config.latent_dim,
        config.ib.sigma,
    )
    x_all = net.normalize(fit_set.images)
    params = net.parameters()
    state = AdamState(learning_rate=config.lr)
    order_rng = np.random.default_rng((config.seed, 1))
    noise_rng = np.random.default_rng((config.seed, 2))
    result = DigitTrainResult(model=net, records=[], access_log=access_log)
    metric = REGULARIZER_METRIC.get(method)
    step = 0
    logger.info(
        f"training digits ({method.value}) seed {config.seed}: {len(fit_set)} samples"
    )
    for epoch in range(1, config.epochs + 1):
        order = order_rng.permutation(len(fit_set))
        losses: list[float] = []
        regularizer: list[float] = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            x, labels = x_all[idx], fit_set.labels[idx]
            if method == Method.IB:
                out = _ib_step(net, x, labels, config.ib.beta, noise_rng)
            elif method == Method.RIB:
                out = _rib_step(
                    net, x, labels, config.ib.beta_fisher, config.ib.n_probes, noise_rng
                )
            else:
                out = _erm_itsa_step(net, x, labels, config)
            step += 1
            if not math.isfinite(out.loss):
                raise DivergenceError(step, out.loss)
            adam_step(params, out.grads, state)
            losses.append(out.loss)
            if out.regularizer is not None:
                regularizer.append(out.regularizer)
            logger.debug(f"step {step}: loss {out.loss:.4f} reg {out.regularizer}")
            if trace_parameters:
                result.parameter_trace.append({k: v.copy() for k, v in params.items()})
            if step_hook is not None:
                step_hook(step, out)
        val_top1 = eval_top1(net, val_set) if len(val_set) else 0.0
        records = [
            ("train", "loss", float(np.mean(losses))),
            (Split.VAL.value, "top1", val_top1),
        ]
        if metric is not None and regularizer:
            records.append(("train", metric, float(np.mean(regularizer))))
            result.step_regularizer.append(regularizer)
        result.records += [
            MetricsRecord(
                config.run_id, method.value, config.seed, epoch, split, name, value
            )
            for split, name, value in records
        ]
        logger.info(
            f"epoch {epoch}/{config.epochs}: loss {records[0][2]:.4f} "
            f"val top1 {val_top1:.2f}"
        )
    return result


def evaluate_digit(
    result: DigitTrainResult, data: DigitData, config: DigitRunConfig
) -> list[MetricsRecord]:
    """Top-1 on the source and target test sets after training."""
    method = Method(config.method).value
    return [
        MetricsRecord(
            config.run_id, method, config.seed, config.epochs, split.split, "top1",
            eval_top1(result.model, split),
        )
        for split in (data.source_test, data.target_test)
    ]


def sweep_values(values: Sequence[float], scores: Sequence[float]) -> float:
    """Value with the best score (first one on ties)."""
    if len(values) != len(scores) or not values:
        raise ValueError("need one score per value")
    return values[int(np.argmax(scores))]
