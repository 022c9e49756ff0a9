"""Miniature stereo-matching pipeline on procedural scenes.

Disparity is regressed as ``m(C(f(x_l), f(x_r)))``: a shared feature extractor
``f``, a concatenation cost volume ``C`` and an aggregator ``m`` made of 3-D
convolutions followed by a soft argmin and nearest upsampling.
"""

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, replace

import numpy as np
import numpy.typing as npt

from . import itsa
from .data.constants import ShiftKind, StereoMethod
from .data.domains import (
    BoolArray,
    FloatArray,
    MetricsRecord,
    SceneConfig,
    SceneLayer,
    ScpConfig,
    StereoRunConfig,
    StereoSample,
)
from .diffnet import (
    Cache,
    Conv2d,
    Conv3d,
    Grads,
    Layer,
    LeakyReLU,
    Reshape,
    Sequential,
    smooth_l1,
    smooth_l1_grad,
    softmax,
)
from .errors import DivergenceError, ShapeError
from .normalize import Standardizer
from .optim import AdamState, adam_step
from .parallel import parallel_map
from .textures import make_texture

logger = logging.getLogger(__name__)

LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)
TEST_INDEX_OFFSET = 1_000_000
STANDARDIZER_SCENES = 64


class CostVolume(Layer):
    """Concatenation cost volume over ``levels`` disparity hypotheses.

    Input is the channel concatenation ``[z_l, z_r]`` ([N, 2c, h, w]); output
    ``[N, 2c, levels, h, w]`` holds ``z_l`` in the first c channels and ``z_r``
    shifted right by d columns (zero-filled) in the last c.
    """

    def __init__(self, levels: int, name: str | None = None) -> None:
        super().__init__(name)
        if levels < 1:
            raise ValueError(f"levels must be >= 1, got {levels}")
        self.levels = levels

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        if len(input_shape) != 3 or input_shape[0] % 2:
            raise ShapeError(
                f"{self.name}: expected (2c, h, w) features, got {input_shape}"
            )
        channels, h, w = input_shape
        if self.levels > w:
            raise ShapeError(f"{self.name}: {self.levels} levels exceed width {w}")
        return (channels, self.levels, h, w)

    def forward(self, x: FloatArray) -> tuple[FloatArray, Cache]:
        n, channels, h, w = x.shape
        c = channels // 2
        volume = np.zeros((n, channels, self.levels, h, w), dtype=x.dtype)
        volume[:, :c] = x[:, :c, None]
        for d in range(self.levels):
            volume[:, c:, d, :, d:] = x[:, c:, :, : w - d]
        return volume, ()

    def backward(
        self, cache: Cache, gy: FloatArray, need_params: bool = True
    ) -> tuple[FloatArray, Grads]:
        n, channels, _, h, w = gy.shape
        c = channels // 2
        gx = np.zeros((n, channels, h, w), dtype=gy.dtype)
        gx[:, :c] = gy[:, :c].sum(axis=2)
        for d in range(self.levels):
            gx[:, c:, :, : w - d] += gy[:, c:, d, :, d:]
        return gx, {}

    def backward_adjoint(
        self, cache: Cache, gy: FloatArray, gx_bar: FloatArray
    ) -> tuple[FloatArray, FloatArray | None, Grads]:
        return self.forward(gx_bar)[0], None, {}


class SoftArgmin(Layer):
    """Expected disparity index under ``softmax(-cost)`` along the first axis."""

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        if len(input_shape) != 3:
            raise ShapeError(f"{self.name}: expected (levels, h, w), got {input_shape}")
        return input_shape[1:]

    def _levels(self, n: int, dtype: npt.DTypeLike) -> FloatArray:
        return np.arange(n, dtype=dtype).reshape(1, n, 1, 1)

    def forward(self, x: FloatArray) -> tuple[FloatArray, Cache]:
        p = softmax(-x, axis=1)
        d = self._levels(x.shape[1], x.dtype)
        y = (p * d).sum(axis=1)
        return y, (p, y)

    def backward(
        self, cache: Cache, gy: FloatArray, need_params: bool = True
    ) -> tuple[FloatArray, Grads]:
        p, y = cache
        d = self._levels(p.shape[1], p.dtype)
        return -gy[:, None] * p * (d - y[:, None]), {}

    def backward_adjoint(
        self, cache: Cache, gy: FloatArray, gx_bar: FloatArray
    ) -> tuple[FloatArray, FloatArray | None, Grads]:
        p, y = cache
        d = self._levels(p.shape[1], p.dtype)
        q = p * (d - y[:, None])  # derivative of y w.r.t. the negated cost
        gy_bar = -(gx_bar * q).sum(axis=1)
        w = -gy[:, None] * gx_bar
        wq = (w * q).sum(axis=1, keepdims=True)
        wp = (w * p).sum(axis=1, keepdims=True)
        x_bar = -(w * q - p * wq - q * wp)
        return gy_bar, x_bar, {}


class Upsample(Layer):
    """Nearest-neighbour upsampling of [N, h, w] disparities, scaled by the factor."""

    def __init__(self, factor: int, name: str | None = None) -> None:
        super().__init__(name)
        self.factor = factor

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        h, w = input_shape
        return (h * self.factor, w * self.factor)

    def forward(self, x: FloatArray) -> tuple[FloatArray, Cache]:
        return upsample_disparity(x, self.factor), ()

    def backward(
        self, cache: Cache, gy: FloatArray, need_params: bool = True
    ) -> tuple[FloatArray, Grads]:
        s = self.factor
        n, h, w = gy.shape
        gx = gy.reshape(n, h // s, s, w // s, s).sum(axis=(2, 4)) * gy.dtype.type(s)
        return gx, {}

    def backward_adjoint(
        self, cache: Cache, gy: FloatArray, gx_bar: FloatArray
    ) -> tuple[FloatArray, FloatArray | None, Grads]:
        return upsample_disparity(gx_bar, self.factor), None, {}


def upsample_disparity(disparity: FloatArray, stride: int) -> FloatArray:
    """Nearest upsampling by ``stride``; values scale to full-resolution pixels."""
    up = np.repeat(np.repeat(disparity, stride, axis=-2), stride, axis=-1)
    return up * up.dtype.type(stride)


def build_cost_volume(z_l: FloatArray, z_r: FloatArray, levels: int) -> FloatArray:
    """Cost volume of [c, h, w] (or batched [N, c, h, w]) feature maps."""
    if z_l.shape != z_r.shape:
        raise ShapeError(f"feature shapes differ: {z_l.shape} vs {z_r.shape}")
    batched = z_l.ndim == 4
    x = np.concatenate([z_l, z_r], axis=-3)
    if not batched:
        x = x[None]
    layer = CostVolume(levels, name="cost_volume")
    layer.output_shape(x.shape[1:])
    volume = layer.forward(x)[0]
    return volume if batched else volume[0]


def soft_argmin(cost: FloatArray) -> FloatArray:
    """Per-pixel expected level under ``softmax(-cost)``; [D, h, w] or [N, D, h, w]."""
    batched = cost.ndim == 4
    y = SoftArgmin().forward(cost if batched else cost[None])[0]
    return y if batched else y[0]


def epe(pred: FloatArray, gt: FloatArray, mask: BoolArray) -> float:
    """Mean absolute disparity error over masked pixels (0 if none)."""
    if pred.shape != gt.shape or pred.shape != mask.shape:
        raise ShapeError(f"shapes differ: {pred.shape}, {gt.shape}, {mask.shape}")
    m = mask.astype(bool)
    if not m.any():
        return 0.0
    return float(np.abs(pred - gt)[m].astype(np.float64).mean())


def d1_rate(
    pred: FloatArray, gt: FloatArray, mask: BoolArray, threshold: float = 3.0
) -> float:
    """Percentage of masked pixels with error strictly above ``threshold``."""
    if threshold <= 0:
        raise ValueError(f"threshold must be > 0, got {threshold}")
    if pred.shape != gt.shape or pred.shape != mask.shape:
        raise ShapeError(f"shapes differ: {pred.shape}, {gt.shape}, {mask.shape}")
    m = mask.astype(bool)
    if not m.any():
        return 0.0
    return float(100.0 * np.mean(np.abs(pred - gt)[m] > threshold))


def render_scene(layers: Sequence[SceneLayer], cfg: SceneConfig) -> StereoSample:
    """Render layers back to front (painter's algorithm) into a stereo pair.

    A layer covers columns ``[left, left + width)`` of the left view and the same
    columns shifted left by its disparity in the right view; texture column j
    is always object column j, so matched pixels carry identical values.
    """
    h, w = cfg.height, cfg.width
    left = np.zeros((3, h, w), dtype=np.float32)
    right = np.zeros((3, h, w), dtype=np.float32)
    left_id = np.full((h, w), -1)
    right_id = np.full((h, w), -1)
    disparity_of = np.zeros(len(layers), dtype=np.float32)
    for k, layer in enumerate(layers):
        disparity_of[k] = layer.disparity
        rows = slice(max(layer.top, 0), min(layer.top + layer.height, h))
        tex_rows = slice(rows.start - layer.top, rows.stop - layer.top)
        views = ((left, left_id, 0), (right, right_id, layer.disparity))
        for image, ids, shift in views:
            a = max(layer.left - shift, 0)
            b = min(layer.left + layer.width - shift, w)
            if a >= b or rows.start >= rows.stop:
                continue
            src = slice(a + shift - layer.left, b + shift - layer.left)
            image[:, rows, a:b] = layer.texture[:, tex_rows, src]
            ids[rows, a:b] = k
    if (left_id < 0).any():
        raise ValueError("layers leave part of the left view uncovered")
    disparity = disparity_of[left_id]
    cols = np.arange(w)[None, :] - disparity.astype(int)
    in_view = cols >= 0
    matched = np.take_along_axis(right_id, np.clip(cols, 0, w - 1), axis=1)
    occluded = ~in_view | (matched != left_id)
    valid = disparity < cfg.max_disparity
    return StereoSample(
        left=left, right=right, disparity=disparity, valid_mask=valid, occluded=occluded
    )


def gen_scene(cfg: SceneConfig, index: int = 0) -> StereoSample:
    """Generate scene ``index`` of the procedural source domain.

    A full-frame background plane sits at a small disparity; foreground
    rectangles are drawn in order of increasing disparity, so nearer layers are
    painted last.
    """
    rng = np.random.default_rng((cfg.seed, index))
    maxd = cfg.max_disparity
    n_layers = int(rng.integers(cfg.min_layers, cfg.max_layers + 1))
    bg_disparity = int(rng.integers(0, max(maxd // 4, 1)))
    kinds = list(cfg.textures)

    def texture(height: int, width: int) -> FloatArray:
        kind = kinds[int(rng.integers(len(kinds)))]
        return make_texture(kind, rng, height, width)

    layers = [
        SceneLayer(
            top=0,
            left=0,
            height=cfg.height,
            width=cfg.width + maxd,
            disparity=bg_disparity,
            texture=texture(cfg.height, cfg.width + maxd),
        )
    ]
    n_front = max(n_layers - 1, 0) if bg_disparity + 1 < maxd else 0
    disparities = np.sort(rng.integers(bg_disparity + 1, maxd, size=n_front))
    for d in disparities:
        height = int(rng.integers(max(cfg.height // 8, 1), cfg.height // 2 + 1))
        width = int(rng.integers(max(cfg.width // 8, 1), cfg.width // 3 + 1))
        top = int(rng.integers(0, cfg.height - height + 1))
        left = int(rng.integers(0, cfg.width - width + 1))
        layers.append(
            SceneLayer(top, left, height, width, int(d), texture(height, width))
        )
    return render_scene(layers, cfg)


def gen_scenes(
    cfg: SceneConfig, indices: Sequence[int], workers: int = 1
) -> list[StereoSample]:
    """Generate several scenes in parallel; order follows ``indices``."""
    return parallel_map(lambda i: gen_scene(cfg, i), list(indices), workers)


def photoconsistency_error(sample: StereoSample) -> float:
    """Largest color difference between matched pixels of the two views.

    Every non-occluded left pixel ``(y, x)`` must equal right pixel
    ``(y, x - d)``; rendered scenes give exactly 0.
    """
    w = sample.disparity.shape[1]
    ys, xs = np.nonzero(~sample.occluded)
    if len(ys) == 0:
        return 0.0
    xr = xs - sample.disparity[ys, xs].astype(int)
    if (xr < 0).any() or (xr >= w).any():
        raise ValueError("non-occluded pixel maps outside the right view")
    diff = sample.left[:, ys, xs] - sample.right[:, ys, xr]
    return float(np.abs(diff).max())


def stack_samples(
    samples: Sequence[StereoSample],
) -> tuple[FloatArray, FloatArray, FloatArray, BoolArray]:
    """Batch arrays (left, right, disparity, valid mask)."""
    return (
        np.stack([s.left for s in samples]),
        np.stack([s.right for s in samples]),
        np.stack([s.disparity for s in samples]),
        np.stack([s.valid_mask for s in samples]),
    )


class StereoNet:
    """Shared extractor, cost volume, 3-D aggregator and soft-argmin head."""

    def __init__(
        self,
        extractor: Sequential,
        head: Sequential,
        stride: int,
        max_disparity: int,
        standardizer: Standardizer,
    ) -> None:
        self.extractor = extractor
        self.head = head
        self.stride = stride
        self.max_disparity = max_disparity
        self.standardizer = standardizer

    @classmethod
    def build(
        cls,
        scene: SceneConfig,
        feature_channels: int,
        stride: int,
        rng: np.random.Generator,
        standardizer: Standardizer,
    ) -> "StereoNet":
        """Extractor with log2(stride) stride-2 convolutions; levels = D / stride."""
        halvings = int(round(math.log2(stride)))
        if 2**halvings != stride:
            raise ValueError(f"feature stride must be a power of two, got {stride}")
        c = feature_channels
        feat: list[Layer] = []
        channels = 3
        for i in range(halvings):
            feat += [
                Conv2d(channels, 8, 3, rng, stride=2, padding=1, name=f"feat{i}"),
                LeakyReLU(),
            ]
            channels = 8
        feat.append(Conv2d(channels, c, 3, rng, padding=1, name=f"feat{halvings}"))
        extractor = Sequential(feat, (3, scene.height, scene.width))
        _, h, w = extractor.output_shape
        levels = scene.max_disparity // stride
        head = Sequential(
            [
                CostVolume(levels),
                Conv3d(2 * c, 8, 3, rng, padding=1, name="agg0"),
                LeakyReLU(),
                Conv3d(8, 1, 3, rng, padding=1, name="agg1"),
                Reshape((levels, h, w)),
                SoftArgmin(),
                Upsample(stride),
            ],
            (2 * c, h, w),
        )
        return cls(extractor, head, stride, scene.max_disparity, standardizer)

    @property
    def feature_channels(self) -> int:
        return int(self.extractor.output_shape[0])

    def parameters(self) -> dict[str, FloatArray]:
        return {**self.extractor.parameters(), **self.head.parameters()}

    def predict_normalized(self, xl: FloatArray, xr: FloatArray) -> FloatArray:
        volume_in = np.concatenate([self.extractor(xl), self.extractor(xr)], axis=1)
        return self.head(volume_in)

    def predict(self, left: FloatArray, right: FloatArray) -> FloatArray:
        """Full-resolution disparity for [N, 3, H, W] image batches in [0, 1]."""
        return self.predict_normalized(
            self.standardizer.apply(left), self.standardizer.apply(right)
        )


def _scp_view(
    net: StereoNet, image: FloatArray, epsilon: float, scp: ScpConfig
) -> FloatArray:
    x = net.standardizer.apply(image[None])
    u, _ = itsa.scp_direction(net.extractor, x, scp)
    step = net.standardizer.scale(u[0]) * np.float32(epsilon)
    return (image + step).astype(np.float32)


def apply_color_jitter(
    image: FloatArray, matrix: FloatArray, contrast: float, offset: FloatArray
) -> FloatArray:
    """``contrast * (matrix @ rgb) + offset`` per pixel, clipped to [0, 1]."""
    mixed = np.einsum("ij,jhw->ihw", matrix.astype(np.float32), image)
    out = np.float32(contrast) * mixed + offset.astype(np.float32).reshape(3, 1, 1)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def random_color_jitter(
    rng: np.random.Generator, strength: float = 1.0
) -> tuple[FloatArray, float, FloatArray]:
    """Channel-remix matrix, contrast and offset; ``strength=0`` is the identity."""
    matrix = np.eye(3) + strength * rng.uniform(-0.3, 0.3, (3, 3))
    contrast = 1.0 + strength * rng.uniform(-0.4, 0.4)
    offset = strength * rng.uniform(-0.2, 0.2, 3)
    return matrix, contrast, offset


def grayscale(image: FloatArray) -> FloatArray:
    """Luminance replicated over the three channels."""
    luma = np.einsum("c,chw->hw", LUMA, image)
    return np.repeat(luma[None], 3, axis=0).astype(np.float32)


def _fog(
    rng: np.random.Generator, left: FloatArray, right: FloatArray
) -> tuple[FloatArray, FloatArray]:
    density = np.float32(rng.uniform(0.4, 0.6))
    airlight = np.float32(0.8)
    hazy_left = (1 - density) * left + density * airlight
    hazy_right = (1 - density) * right + density * airlight
    return hazy_left.astype(np.float32), hazy_right.astype(np.float32)


def _night(
    rng: np.random.Generator, left: FloatArray, right: FloatArray
) -> tuple[FloatArray, FloatArray]:
    gamma = rng.uniform(1.5, 2.5)
    gain = rng.uniform(0.3, 0.5)
    views = []
    for view in (left, right):
        noise = rng.normal(0.0, 0.02, view.shape)
        views.append(np.clip(gain * view**gamma + noise, 0.0, 1.0).astype(np.float32))
    return views[0], views[1]


def shift_domain(
    sample: StereoSample,
    kind: ShiftKind,
    seed: int | tuple[int, ...] = 0,
    model: StereoNet | None = None,
    epsilon: float = 0.5,
    scp: ScpConfig | None = None,
) -> StereoSample:
    """Apply an evaluation-time domain shift; ground truth is unchanged.

    Raises:
        ValueError: If ``kind`` is scp and no model is given.
    """
    kind = ShiftKind(kind)
    rng = np.random.default_rng(seed)
    left, right = sample.left, sample.right
    if kind == ShiftKind.CLEAN:
        return sample
    if kind == ShiftKind.ACJ:
        left = apply_color_jitter(left, *random_color_jitter(rng))
        right = apply_color_jitter(right, *random_color_jitter(rng))
    elif kind == ShiftKind.GRAY_LEFT:
        left = grayscale(left)
    elif kind == ShiftKind.GRAY_RIGHT:
        right = grayscale(right)
    elif kind == ShiftKind.SCP:
        if model is None:
            raise ValueError("the scp shift needs a model to compute its direction")
        cfg = scp or ScpConfig(epsilon=epsilon)
        left = _scp_view(model, left, epsilon, cfg)
        right = _scp_view(model, right, epsilon, cfg)
    elif kind == ShiftKind.FOG:
        left, right = _fog(rng, left, right)
    elif kind == ShiftKind.NIGHT:
        left, right = _night(rng, left, right)
    return sample.replace_views(left, right)


@dataclass
class StepResult:
    loss: float  # task loss plus the weighted surrogate
    task_loss: float
    fisher: float | None
    grads: Grads


def _split_features(g: FloatArray, c: int) -> tuple[FloatArray, FloatArray]:
    return g[:, :c], g[:, c:]


def stereo_step(
    net: StereoNet,
    method: StereoMethod,
    xl: FloatArray,
    xr: FloatArray,
    disparity: FloatArray,
    mask: BoolArray,
    scp: ScpConfig,
    directions: tuple[FloatArray, FloatArray] | None = None,
) -> StepResult:
    """Loss and parameter gradients of one training step on standardized views.

    ``directions`` freezes the per-view perturbation directions.
    """
    ext, head = net.extractor, net.head
    c = net.feature_channels
    u_l: FloatArray | None = None
    u_r: FloatArray | None = None
    if directions is not None:
        u_l, u_r = directions
    if method == StereoMethod.SCP_ONLY:
        if u_l is None or u_r is None:
            u_l, _ = itsa.scp_direction(ext, xl, scp)
            u_r, _ = itsa.scp_direction(ext, xr, scp)
        xl = np.concatenate([xl, itsa.scp_perturb(xl, u_l, scp.epsilon)])
        xr = np.concatenate([xr, itsa.scp_perturb(xr, u_r, scp.epsilon)])
        disparity = np.concatenate([disparity, disparity])
        mask = np.concatenate([mask, mask])

    branches: list[itsa.FisherBranch] = []
    task_l, task_r = xl, xr
    if method == StereoMethod.ITSA:
        weight = scp.lam / 2.0
        branches = [
            itsa.fisher_branch(ext, xl, scp, weight, u_l),
            itsa.fisher_branch(ext, xr, scp, weight, u_r),
        ]
        if scp.perturbed_task_branch:
            task_l, task_r = branches[0].pair.x_star, branches[1].pair.x_star

    zl, tape_l = ext.forward_tape(task_l)
    zr, tape_r = ext.forward_tape(task_r)
    pred, tape_h = head.forward_tape(np.concatenate([zl, zr], axis=1))
    loss = smooth_l1(pred, disparity, mask)
    g_volume, grads = head.backward(tape_h, smooth_l1_grad(pred, disparity, mask))
    g_zl, g_zr = _split_features(g_volume, c)

    fisher: float | None = None
    total = loss
    if branches:
        fisher = (branches[0].value + branches[1].value) / 2.0
        total = itsa.itsa_total_loss(
            loss, branches[0].value, branches[1].value, scp.lam
        )
        logger.debug(f"task {loss:.4f} fisher {fisher:.4f} total {total:.4f}")
        if not scp.perturbed_task_branch:
            g_zl = g_zl + branches[0].grad_z
            g_zr = g_zr + branches[1].grad_z
    itsa.add_grads(grads, ext.backward(tape_l, g_zl)[1])
    itsa.add_grads(grads, ext.backward(tape_r, g_zr)[1])
    for branch in branches:
        itsa.add_grads(grads, branch.grads)
        if scp.perturbed_task_branch:
            _, tape_clean = ext.forward_tape(branch.pair.x)
            itsa.add_grads(grads, ext.backward(tape_clean, branch.grad_z)[1])
    return StepResult(loss=total, task_loss=loss, fisher=fisher, grads=grads)


def fit_standardizer(
    scene: SceneConfig, n_scenes: int, workers: int = 1
) -> Standardizer:
    """Channel statistics of the first training scenes (both views)."""
    samples = gen_scenes(scene, range(n_scenes), workers)
    left, right, _, _ = stack_samples(samples)
    return Standardizer.fit(np.concatenate([left, right]))


def train_stereo(
    config: StereoRunConfig,
    workers: int = 1,
    step_hook: Callable[[int, StepResult], None] | None = None,
) -> tuple[StereoNet, list[MetricsRecord]]:
    """Train on procedural clean-domain scenes with the configured method.

    Returns:
        The trained network and per-epoch training records.

    Raises:
        DivergenceError: If the task loss becomes non-finite.
    """
    method = StereoMethod(config.method)
    scp = config.scp
    standardizer = fit_standardizer(
        config.scene, min(config.train_size, STANDARDIZER_SCENES), workers
    )
    net = StereoNet.build(
        config.scene,
        config.feature_channels,
        config.stride,
        np.random.default_rng(config.seed),
        standardizer,
    )
    params = net.parameters()
    state = AdamState(learning_rate=config.lr)
    order_rng = np.random.default_rng((config.seed, 1))
    decay_epoch = config.lr_decay_epoch or config.epochs // 2
    records: list[MetricsRecord] = []
    step = 0
    logger.info(
        f"training stereo ({method.value}) seed {config.seed}: "
        f"{config.train_size} scenes x {config.epochs} epochs"
    )
    for epoch in range(1, config.epochs + 1):
        if decay_epoch > 0 and epoch == decay_epoch + 1:
            state.learning_rate /= 2.0
            logger.info(f"learning rate halved to {state.learning_rate:g}")
        order = order_rng.permutation(config.train_size)
        losses: list[float] = []
        fishers: list[float] = []
        for start in range(0, config.train_size, config.batch_size):
            indices = order[start : start + config.batch_size].tolist()
            batch = gen_scenes(config.scene, indices, workers)
            left, right, disparity, mask = stack_samples(batch)
            result = stereo_step(
                net,
                method,
                standardizer.apply(left),
                standardizer.apply(right),
                disparity,
                mask,
                scp,
            )
            step += 1
            if not math.isfinite(result.loss):
                raise DivergenceError(step, result.loss)
            adam_step(params, result.grads, state)
            losses.append(result.loss)
            if result.fisher is not None:
                fishers.append(result.fisher)
            if step_hook is not None:
                step_hook(step, result)
        mean_loss = float(np.mean(losses))
        records.append(
            MetricsRecord(
                config.run_id,
                method.value,
                config.seed,
                epoch,
                "train",
                "loss",
                mean_loss,
            )
        )
        if fishers:
            records.append(
                MetricsRecord(
                    config.run_id, method.value, config.seed, epoch, "train", "l_fi",
                    float(np.mean(fishers)),
                )
            )
        logger.info(f"epoch {epoch}/{config.epochs}: loss {mean_loss:.4f}")
    return net, records


def held_out_scene_config(scene: SceneConfig) -> SceneConfig:
    """Held-out scene stream of the same procedural domain."""
    return replace(scene, seed=scene.seed + TEST_INDEX_OFFSET)


def evaluate_stereo(
    net: StereoNet,
    scene: SceneConfig,
    n_samples: int,
    shifts: Sequence[ShiftKind],
    seed: int = 0,
    eval_epsilon: float = 0.5,
    d1_threshold: float = 3.0,
    workers: int = 1,
    scp: ScpConfig | None = None,
) -> dict[ShiftKind, dict[str, float]]:
    """EPE and D1 on held-out scenes, clean and under each shift.

    ``scp`` sets the scalarization and gradient floor of the scp shift; its
    magnitude is always ``eval_epsilon``.
    """
    kinds = [ShiftKind.CLEAN, *[ShiftKind(k) for k in shifts if k != ShiftKind.CLEAN]]
    held_out = held_out_scene_config(scene)

    def job(index: int) -> tuple[StereoSample, list[FloatArray]]:
        sample = gen_scene(held_out, index)
        preds = []
        for k, kind in enumerate(kinds):
            shifted = shift_domain(
                sample, kind, (seed, index, k), net, eval_epsilon, scp
            )
            preds.append(net.predict(shifted.left[None], shifted.right[None])[0])
        return sample, preds

    per_sample = parallel_map(job, range(n_samples), workers)
    gt = np.stack([sample.disparity for sample, _ in per_sample])
    mask = np.stack([sample.valid_mask for sample, _ in per_sample])
    results: dict[ShiftKind, dict[str, float]] = {}
    for k, kind in enumerate(kinds):
        pred = np.stack([preds[k] for _, preds in per_sample])
        results[kind] = {
            "epe": epe(pred, gt, mask),
            "d1": d1_rate(pred, gt, mask, d1_threshold),
        }
        logger.info(
            f"{kind.value}: EPE {results[kind]['epe']:.3f} "
            f"D1 {results[kind]['d1']:.2f}%"
        )
    return results
