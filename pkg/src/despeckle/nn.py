"""A small convolutional denoiser written directly in numpy.

The network maps a noisy intensity image to a clean estimate. It is
conditioned on the whole noise schedule ``tau`` (the vector of noise levels
it was trained with) through one fully connected layer whose output is a
per-channel bias after the first convolution. The embedding weight matrix
has one column per schedule step, so the parameter count grows linearly
with ``T`` while the per-image compute does not.

Batches are passed in as ``(batch, 1, height, width)``; layers work channels-last. Gradients are
computed by hand (reverse mode) and can be verified with :func:`grad_check`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NetTooLarge, ShapeMismatch, TauLengthMismatch

ARCHITECTURES = ("unet", "two_layer")


@dataclass(frozen=True)
class NetConfig:
    """Architecture description.

    ``unet``: three 3x3 convolutions down (the last two with stride 2), three
    up with nearest-neighbour upsampling, additive skips at matching
    resolutions and a global input-to-output residual. ``two_layer``: one
    hidden convolution plus the output convolution, same residual.
    """

    T: int
    arch: str = "unet"
    channels: tuple = (16, 32, 32)
    kernel: int = 3
    slope: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}")
        need = 3 if self.arch == "unet" else 1
        if len(self.channels) != need:
            raise ValueError(f"{self.arch} needs {need} channel counts, got {self.channels}")
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        if self.T < 1:
            raise ValueError("T must be >= 1")

    @property
    def size_multiple(self) -> int:
        """Spatial dims of a batch must be a multiple of this."""
        return 4 if self.arch == "unet" else 1

    @property
    def embedding_width(self) -> int:
        return self.channels[0]

    def to_dict(self) -> dict:
        return {"T": self.T, "arch": self.arch, "channels": list(self.channels),
                "kernel": self.kernel, "slope": self.slope}


def _conv_specs(cfg: NetConfig):
    """(name, c_in, c_out, stride) for every conv layer in forward order."""
    if cfg.arch == "two_layer":
        (c1,) = cfg.channels
        return [("conv1", 1, c1, 1), ("conv_out", c1, 1, 1)]
    c1, c2, c3 = cfg.channels
    return [
        ("conv1", 1, c1, 1),
        ("conv2", c1, c2, 2),
        ("conv3", c2, c3, 2),
        ("conv4", c3, c2, 1),
        ("conv5", c2, c1, 1),
        ("conv_out", c1, 1, 1),
    ]


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def _im2col(x, k, stride):
    n, h, w, c = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    # (k, k, c) column order keeps the channel axis contiguous while copying
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)
    return cols, (n, h, w, c, ho, wo)


def _wmat(weight):
    return weight.transpose(0, 2, 3, 1).reshape(weight.shape[0], -1)


def conv_forward(x, weight, bias, stride=1):
    """Zero-padded 'same' convolution of a channels-last batch ``(N, H, W, C)``."""
    k = weight.shape[-1]
    cols, geom = _im2col(x, k, stride)
    n, _, _, _, ho, wo = geom
    out = cols @ _wmat(weight).T + bias
    return out.reshape(n, ho, wo, -1), (cols, geom)


def conv_backward(dout, weight, cache, stride=1):
    """Gradients w.r.t. input, weight and bias.

    The input gradient is a 'same' convolution of the (zero-dilated, for
    stride 2) output gradient with the spatially flipped, transposed kernel.
    """
    cols, (n, h, w, c, ho, wo) = cache
    cout = weight.shape[0]
    d2 = dout.reshape(-1, cout)
    dw = (d2.T @ cols).reshape(cout, *weight.shape[2:], c).transpose(0, 3, 1, 2)
    db = d2.sum(axis=0)
    if stride > 1:
        dilated = np.zeros((n, h, w, cout), dtype=dout.dtype)
        dilated[:, ::stride, ::stride] = dout
        dout = dilated
    flipped = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    dx, _ = conv_forward(dout, flipped, np.zeros(c, dtype=dout.dtype))
    return dx, dw, db


def leaky_relu(x, slope):
    return np.where(x > 0, x, slope * x)


def leaky_relu_backward(dout, x, slope):
    return np.where(x > 0, dout, slope * dout)


def upsample2(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample2_backward(dout):
    n, h, w, c = dout.shape
    return dout.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

class DenoiserNet:
    """Parameters and forward/backward passes of the denoiser.

    ``params`` maps layer parameter names to arrays; the insertion order is
    the canonical flattening order used by checkpoints.
    """

    def __init__(self, config: NetConfig, seed=0, zero_final=True, dtype=np.float64):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        k = config.kernel
        params = {}
        for name, cin, cout, _ in _conv_specs(config):
            fan_in = cin * k * k
            bound = math.sqrt(6.0 / fan_in)
            if name == "conv_out" and zero_final:
                params[f"{name}.weight"] = np.zeros((cout, cin, k, k), dtype=self.dtype)
            else:
                params[f"{name}.weight"] = rng.uniform(-bound, bound, (cout, cin, k, k)).astype(self.dtype)
            params[f"{name}.bias"] = np.zeros(cout, dtype=self.dtype)
            if name == "conv1":
                emb_bound = 1.0 / math.sqrt(config.T)
                params["embed.weight"] = rng.uniform(-emb_bound, emb_bound,
                                                     (config.embedding_width, config.T)).astype(self.dtype)
                params["embed.bias"] = np.zeros(config.embedding_width, dtype=self.dtype)
        self.params = params

    # -- bookkeeping -------------------------------------------------------

    @property
    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def shapes(self) -> dict:
        return {k: v.shape for k, v in self.params.items()}

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params.values()]).astype(np.float64)

    def set_flat_params(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.num_params:
            raise ShapeMismatch(f"expected {self.num_params} parameters, got {flat.size}")
        offset = 0
        for name, p in self.params.items():
            self.params[name] = flat[offset:offset + p.size].reshape(p.shape).astype(self.dtype)
            offset += p.size

    def copy(self) -> "DenoiserNet":
        other = DenoiserNet.__new__(DenoiserNet)
        other.config = self.config
        other.dtype = self.dtype
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def _check(self, x, tau):
        tau = np.asarray(getattr(tau, "alphas", tau), dtype=self.dtype)
        if tau.shape != (self.config.T,):
            raise TauLengthMismatch(f"net expects a schedule of length {self.config.T}, got {tau.shape}")
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeMismatch(f"expected a (N, 1, H, W) batch, got {x.shape}")
        m = self.config.size_multiple
        if x.shape[2] % m or x.shape[3] % m or x.shape[2] < m or x.shape[3] < m:
            raise ShapeMismatch(f"spatial dims {x.shape[2:]} must be positive multiples of {m}")
        return tau

    # -- passes ------------------------------------------------------------

    def forward_batch(self, x, tau, keep=False):
        """Run the network on an ``(N, 1, H, W)`` batch.

        With ``keep=True`` also returns the activation cache for
        :meth:`backward_batch`.
        """
        x = np.asarray(x, dtype=self.dtype)
        tau = self._check(x, tau)
        P = self.params
        s = self.config.slope
        cache = {"tau": tau}
        x = x.transpose(0, 2, 3, 1)

        embed = P["embed.weight"] @ tau + P["embed.bias"]
        z1, cache["conv1"] = conv_forward(x, P["conv1.weight"], P["conv1.bias"])
        z1 = z1 + embed
        h1 = leaky_relu(z1, s)
        cache["z1"] = z1

        if self.config.arch == "two_layer":
            y, cache["conv_out"] = conv_forward(h1, P["conv_out.weight"], P["conv_out.bias"])
        else:
            z2, cache["conv2"] = conv_forward(h1, P["conv2.weight"], P["conv2.bias"], stride=2)
            h2 = leaky_relu(z2, s)
            z3, cache["conv3"] = conv_forward(h2, P["conv3.weight"], P["conv3.bias"], stride=2)
            h3 = leaky_relu(z3, s)
            z4, cache["conv4"] = conv_forward(upsample2(h3), P["conv4.weight"], P["conv4.bias"])
            u4 = leaky_relu(z4, s) + h2
            z5, cache["conv5"] = conv_forward(upsample2(u4), P["conv5.weight"], P["conv5.bias"])
            u5 = leaky_relu(z5, s) + h1
            y, cache["conv_out"] = conv_forward(u5, P["conv_out.weight"], P["conv_out.bias"])
            cache.update(z2=z2, z3=z3, z4=z4, z5=z5)
        out = (y + x).transpose(0, 3, 1, 2)
        return (out, cache) if keep else out

    def backward_batch(self, dout, cache) -> dict:
        """Parameter gradients given ``d loss / d output`` and a forward cache."""
        P = self.params
        s = self.config.slope
        g = {}
        dout = dout.transpose(0, 2, 3, 1)
        if self.config.arch == "two_layer":
            dh1, g["conv_out.weight"], g["conv_out.bias"] = conv_backward(dout, P["conv_out.weight"],
                                                                         cache["conv_out"])
        else:
            du5, g["conv_out.weight"], g["conv_out.bias"] = conv_backward(dout, P["conv_out.weight"],
                                                                         cache["conv_out"])
            dz5 = leaky_relu_backward(du5, cache["z5"], s)
            dup5, g["conv5.weight"], g["conv5.bias"] = conv_backward(dz5, P["conv5.weight"], cache["conv5"])
            du4 = upsample2_backward(dup5)
            dz4 = leaky_relu_backward(du4, cache["z4"], s)
            dup4, g["conv4.weight"], g["conv4.bias"] = conv_backward(dz4, P["conv4.weight"], cache["conv4"])
            dh3 = upsample2_backward(dup4)
            dz3 = leaky_relu_backward(dh3, cache["z3"], s)
            dh2, g["conv3.weight"], g["conv3.bias"] = conv_backward(dz3, P["conv3.weight"], cache["conv3"],
                                                                    stride=2)
            dh2 = dh2 + du4
            dz2 = leaky_relu_backward(dh2, cache["z2"], s)
            dh1, g["conv2.weight"], g["conv2.bias"] = conv_backward(dz2, P["conv2.weight"], cache["conv2"],
                                                                    stride=2)
            dh1 = dh1 + du5
        dz1 = leaky_relu_backward(dh1, cache["z1"], s)
        _, g["conv1.weight"], g["conv1.bias"] = conv_backward(dz1, P["conv1.weight"], cache["conv1"])
        dembed = dz1.sum(axis=(0, 1, 2))
        g["embed.weight"] = np.outer(dembed, cache["tau"])
        g["embed.bias"] = dembed
        return {name: g[name] for name in P}

    def loss_and_grad(self, noisy, clean, tau):
        """Mean squared error of the prediction against ``clean`` and its gradients.

        Accepts single images ``(H, W)`` or batches ``(N, 1, H, W)``.
        """
        x, target = _as_batch(noisy), _as_batch(clean)
        if x.shape != target.shape:
            raise ShapeMismatch(f"noisy {x.shape} and clean {target.shape} differ")
        out, cache = self.forward_batch(x, tau, keep=True)
        resid = out - target.astype(self.dtype)
        loss = float(np.mean(resid * resid))
        grads = self.backward_batch(2.0 * resid / resid.size, cache)
        return loss, grads

    def loss(self, noisy, clean, tau) -> float:
        out = self.forward_batch(_as_batch(noisy), tau)
        resid = out - _as_batch(clean)
        return float(np.mean(resid * resid))


def _as_batch(a):
    a = np.asarray(a)
    if a.ndim == 2:
        return a[None, None]
    if a.ndim == 3:
        return a[:, None]
    return a


def pad_to_multiple(image, multiple):
    """Mirror-pad an image so both dims are multiples of ``multiple``."""
    h, w = image.shape
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph == 0 and pw == 0:
        return image
    return np.pad(image, ((0, ph), (0, pw)), mode="symmetric")


def forward(net: DenoiserNet, noisy, tau) -> np.ndarray:
    """Network prediction for one image of any size (unclamped).

    Inputs whose size is not a multiple of the downsampling factor are
    mirror-padded and the prediction is cropped back.
    """
    img = np.asarray(noisy, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D image, got shape {img.shape}")
    h, w = img.shape
    m = net.config.size_multiple
    if h < m or w < m:
        raise ShapeMismatch(f"image {h}x{w} smaller than the minimum {m}x{m}")
    padded = pad_to_multiple(img, m)
    out = net.forward_batch(padded[None, None], tau)
    return np.asarray(out[0, 0, :h, :w], dtype=np.float64)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SgdConfig:
    initial_lr: float = 0.05
    decay_factor: float = 10.0
    decay_every: int = 20

    def __post_init__(self):
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be > 0")
        if self.decay_factor <= 1:
            raise ValueError("decay_factor must be > 1")
        if self.decay_every < 1:
            raise ValueError("decay_every must be >= 1")


def lr_at(config: SgdConfig, epoch: int) -> float:
    """Step-decayed learning rate: divide by ``decay_factor`` every ``decay_every`` epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.initial_lr / config.decay_factor ** (epoch // config.decay_every)


def sgd_step(net, grads: dict, lr: float) -> None:
    """In-place update ``theta <- theta - lr * g`` for every parameter."""
    if lr <= 0:
        raise ValueError("lr must be > 0")
    if set(grads) != set(net.params):
        raise ShapeMismatch("gradient keys do not match parameters")
    for name, p in net.params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        p -= (lr * g).astype(p.dtype)


def grad_check(net, noisy, clean, tau, h: float = 1e-4, max_params: int = 10_000) -> float:
    """Largest relative error between analytic and central-difference gradients.

    Every parameter entry is perturbed by ``+-h``; the error for each entry is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)``. Works on any
    object exposing ``params``, ``loss`` and ``loss_and_grad``.
    """
    if h <= 0:
        raise ValueError("h must be > 0")
    total = sum(p.size for p in net.params.values())
    if total > max_params:
        raise NetTooLarge(f"{total} parameters exceeds the limit of {max_params}")
    _, grads = net.loss_and_grad(noisy, clean, tau)
    worst = 0.0
    for name, p in net.params.items():
        flat = p.reshape(-1)
        g = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = net.loss(noisy, clean, tau)
            flat[i] = orig - h
            down = net.loss(noisy, clean, tau)
            flat[i] = orig
            num = (up - down) / (2 * h)
            denom = max(abs(g[i]), abs(num), 1e-12)
            worst = max(worst, abs(g[i] - num) / denom)
    return worst
