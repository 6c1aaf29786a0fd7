"""Training loop and denoising for the multiplicative-noise diffusion model.

Training repeats, per sample: pick a clean image, augment it, crop a patch,
draw a step ``t`` uniformly from ``1..T``, corrupt the patch in the log domain
with ``alpha_t`` and take an SGD step on ``||f(I_t, tau) - I_0||^2``.

Denoising is one forward pass of the trained network. The network never sees
``t``; it is conditioned on the whole schedule ``tau`` only.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointMismatch, EmptyDataset, ImageTooSmall, IndexOutOfRange, PatchTooLarge
from .imagecore import DEFAULT_FLOOR, AugmentParams, augment, as_image, crop_patch
from .nn import DenoiserNet, NetConfig, SgdConfig, forward, lr_at, sgd_step
from .speckle import NoiseSchedule, corrupt_log, linear_schedule, standard_noise, variance_consistent_schedule

CHECKPOINT_VERSION = 1
MIN_IMAGE_SIZE = 4
_SEED_BOUND = 2 ** 63


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    T: int = 200
    alpha_min: float = 0.005
    alpha_max: float = 0.5
    patch_size: int = 64
    batch_size: int = 16
    patches_per_epoch: int | None = None  # None: one patch per training image
    sgd: SgdConfig = field(default_factory=SgdConfig)
    seed: int = 0
    augment: AugmentParams = field(default_factory=AugmentParams)
    val_fraction: float = 0.1
    workers: int = 1
    arch: str = "unet"
    channels: tuple = (16, 32, 32)
    schedule_kind: str = "linear"
    floor: float = DEFAULT_FLOOR

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.patches_per_epoch is not None and self.patches_per_epoch < 1:
            raise ValueError("patches_per_epoch must be >= 1")
        multiple = self.net_config().size_multiple
        if self.patch_size < MIN_IMAGE_SIZE or self.patch_size % multiple:
            raise ValueError(f"patch_size must be >= {MIN_IMAGE_SIZE} and a multiple of {multiple}")

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.alpha_min, self.alpha_max, self.T, self.schedule_kind)

    def net_config(self) -> NetConfig:
        return NetConfig(T=self.T, arch=self.arch, channels=tuple(self.channels))


def make_schedule(alpha_min, alpha_max, T, kind="linear") -> NoiseSchedule:
    if kind == "linear":
        return linear_schedule(alpha_min, alpha_max, T)
    if kind == "variance":
        return variance_consistent_schedule(alpha_min, alpha_max, T)
    raise ValueError(f"unknown schedule kind {kind!r}")


@dataclass
class DenoiserModel:
    net: DenoiserNet
    schedule: NoiseSchedule
    train_meta: dict = field(default_factory=dict)
    floor: float = DEFAULT_FLOOR


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _training_sample(image, config: TrainConfig, schedule: NoiseSchedule, rng):
    """One (clean patch, noisy patch, t, noise seed) draw.

    The random stream consumption order is fixed: augmentation seed, crop
    seed, noise seed, then ``t``.
    """
    aug_seed, crop_seed, noise_seed = (int(s) for s in rng.integers(_SEED_BOUND, size=3))
    t = int(rng.integers(1, schedule.T + 1))
    clean = crop_patch(augment(image, config.augment, aug_seed), config.patch_size, crop_seed)
    noisy = corrupt_log(clean, schedule.alpha(t), seed=noise_seed, floor=config.floor)
    return clean, noisy, t, noise_seed


def batch_loss_and_grad(net: DenoiserNet, noisy, clean, tau, workers=1, pool=None):
    """Loss and gradients of a batch, optionally split across worker threads.

    Chunks are reduced in index order, so the result is bitwise reproducible
    for a fixed worker count.
    """
    n = noisy.shape[0]
    if workers <= 1 or n < 2 or pool is None:
        return net.loss_and_grad(noisy, clean, tau)
    chunks = [c for c in np.array_split(np.arange(n), min(workers, n)) if c.size]
    results = list(pool.map(lambda idx: net.loss_and_grad(noisy[idx], clean[idx], tau), chunks))
    loss = 0.0
    grads = {k: np.zeros_like(v) for k, v in net.params.items()}
    for idx, (chunk_loss, chunk_grads) in zip(chunks, results):
        w = idx.size / n
        loss += w * chunk_loss
        for k in grads:
            grads[k] += w * chunk_grads[k]
    return loss, grads


def _split(n, fraction, rng):
    order = rng.permutation(n)
    n_val = int(n * fraction)
    if n - n_val < 1:
        n_val = n - 1
    return sorted(order[n_val:].tolist()), sorted(order[:n_val].tolist())


def train(dataset, config: TrainConfig, on_sample=None):
    """Fit a denoiser on clean images; returns ``(model, loss_trace)``.

    ``loss_trace`` holds one :class:`EpochRecord` per epoch with the mean
    training loss, the loss on a fixed held-out set (NaN when the split
    leaves no validation images) and the learning rate used.
    ``on_sample(epoch, step, t, noise_seed, clean, noisy)`` is called for
    every training sample drawn.
    """
    images = [as_image(im) for im in dataset]
    if not images:
        raise EmptyDataset("training needs at least one image")
    for im in images:
        if min(im.shape) < config.patch_size:
            raise PatchTooLarge(f"image {im.shape} smaller than patch size {config.patch_size}")

    schedule = config.schedule()
    tau = schedule.alphas
    split_ss, init_ss, sample_ss, val_ss = np.random.SeedSequence(config.seed).spawn(4)
    train_idx, val_idx = _split(len(images), config.val_fraction, np.random.default_rng(split_ss))
    net = DenoiserNet(config.net_config(), seed=np.random.default_rng(init_ss))
    rng = np.random.default_rng(sample_ss)

    val_rng = np.random.default_rng(val_ss)
    val_set = [_training_sample(images[i], config, schedule, val_rng)[:2] for i in val_idx for _ in range(4)]
    if val_set:
        val_clean = np.stack([c for c, _ in val_set])[:, None]
        val_noisy = np.stack([n for _, n in val_set])[:, None]

    per_epoch = config.patches_per_epoch or len(train_idx)
    steps = math.ceil(per_epoch / config.batch_size)
    trace = []
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        for epoch in range(config.epochs):
            lr = lr_at(config.sgd, epoch)
            total, seen = 0.0, 0
            for step in range(steps):
                size = min(config.batch_size, per_epoch - step * config.batch_size)
                clean_b, noisy_b = [], []
                for _ in range(size):
                    image = images[train_idx[int(rng.integers(len(train_idx)))]]
                    clean, noisy, t, noise_seed = _training_sample(image, config, schedule, rng)
                    if on_sample is not None:
                        on_sample(epoch, step, t, noise_seed, clean, noisy)
                    clean_b.append(clean)
                    noisy_b.append(noisy)
                clean_arr = np.stack(clean_b)[:, None]
                noisy_arr = np.stack(noisy_b)[:, None]
                loss, grads = batch_loss_and_grad(net, noisy_arr, clean_arr, tau, config.workers, pool)
                sgd_step(net, grads, lr)
                total += loss * size
                seen += size
            val_loss = net.loss(val_noisy, val_clean, tau) if val_set else float("nan")
            trace.append(EpochRecord(epoch, total / seen, val_loss, lr))
    finally:
        if pool is not None:
            pool.shutdown()

    meta = {"epochs": config.epochs, "final_loss": trace[-1].train_loss,
            "final_val_loss": trace[-1].val_loss, "seed": config.seed}
    return DenoiserModel(net=net, schedule=schedule, train_meta=meta, floor=config.floor), trace


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def _check_size(image):
    img = as_image(image)
    if min(img.shape) < MIN_IMAGE_SIZE:
        raise ImageTooSmall(f"image {img.shape} is smaller than {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}")
    return img


def denoise(model: DenoiserModel, noisy) -> np.ndarray:
    """Single-step estimate of the clean image, clamped to ``[floor, 1]``."""
    img = _check_size(noisy)
    return np.clip(forward(model.net, img, model.schedule), model.floor, 1.0)


def ancestral_denoise(model: DenoiserModel, noisy, t_start: int, seed=0) -> np.ndarray:
    """Walk the learned reverse chain from step ``t_start`` down to 1.

    Experimental. Each step forms the posterior-shaped mean
    ``(a**2 log I_t + d**2 log f(I_t)) / (a**2 + d**2)`` with
    ``a = alpha_{t-1}``, then samples with the posterior variance. The last
    step (``t = 2``) returns the mean without noise. Network outputs are
    floored before taking logs.
    """
    img = _check_size(noisy)
    schedule = model.schedule
    if not 2 <= t_start <= schedule.T:
        raise IndexOutOfRange(f"t_start must lie in 2..{schedule.T}, got {t_start}")
    rng = np.random.default_rng(seed)
    x = np.log(np.clip(img, model.floor, 1.0))
    for t in range(t_start, 1, -1):
        pred = forward(model.net, np.exp(x), schedule)
        log_pred = np.log(np.maximum(pred, model.floor))
        a2 = schedule.alphas[t - 2] ** 2
        d2 = schedule.step_std(t) ** 2
        mean = (a2 * x + d2 * log_pred) / (a2 + d2)
        if t > 2:
            x = mean + math.sqrt(a2 * d2 / (a2 + d2)) * standard_noise(x.shape, rng)
        else:
            x = mean
    return np.clip(np.exp(x), model.floor, 1.0)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: DenoiserModel, path) -> Path:
    """Write ``model`` as an ``.npz`` archive (layout documented in the README)."""
    s = model.schedule
    header = {
        "format_version": CHECKPOINT_VERSION,
        "net": model.net.config.to_dict(),
        "schedule": {"alpha_min": s.alpha_min, "alpha_max": s.alpha_max, "T": s.T, "kind": s.kind},
        "floor": model.floor,
        "train_meta": model.train_meta,
        "param_shapes": [[name, list(shape)] for name, shape in model.net.shapes().items()],
    }
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), params=model.net.flat_params())
    return path


def load_checkpoint(path, expect_T=None, expect_alpha_min=None, expect_alpha_max=None) -> DenoiserModel:
    """Read a checkpoint; optional ``expect_*`` values must match its schedule."""
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        params = data["params"]
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointMismatch(f"unsupported checkpoint version {header.get('format_version')!r}")
    sched = header["schedule"]
    for name, want in (("T", expect_T), ("alpha_min", expect_alpha_min), ("alpha_max", expect_alpha_max)):
        if want is not None and not np.isclose(sched[name], want, rtol=0, atol=1e-12):
            raise CheckpointMismatch(f"checkpoint {name}={sched[name]} but configuration asks for {want}")
    net_cfg = header["net"]
    net = DenoiserNet(NetConfig(T=net_cfg["T"], arch=net_cfg["arch"], channels=tuple(net_cfg["channels"]),
                                kernel=net_cfg["kernel"], slope=net_cfg["slope"]))
    expected = [[n, list(s)] for n, s in net.shapes().items()]
    if expected != header["param_shapes"]:
        raise CheckpointMismatch("parameter layout does not match the architecture")
    net.set_flat_params(params)
    schedule = make_schedule(sched["alpha_min"], sched["alpha_max"], sched["T"], sched["kind"])
    return DenoiserModel(net=net, schedule=schedule, train_meta=header.get("train_meta", {}),
                         floor=header.get("floor", DEFAULT_FLOOR))


def config_to_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["channels"] = list(config.channels)
    return d
