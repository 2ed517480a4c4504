"""Barlow Twins objective, its analytic gradient, and a desk-scale encoder.

Each view is batch-normalized per feature before the cross-correlation::

    a = (Z_a - mean) / max(std, eps)        (std over the batch, ddof=0)
    C = a.T @ b / N

For any feature whose batch std exceeds ``eps`` this equals the cosine form
``sum_n a_ni b_nj / (||a_i|| ||b_j||)`` of the centred columns, so C lies in
[-1, 1] and the loss is exactly invariant to per-feature rescaling.  The
``eps`` floor only engages for (near) constant features, whose normalized
column is then ~0.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, PreconditionError, ValidationError
from .tiles import RasterImage


@dataclass(frozen=True)
class BtLossConfig:
    lambda_: float = 0.005
    eps: float = 1e-5

    def __post_init__(self):
        if not self.lambda_ > 0:
            raise ValidationError("lambda must be positive")
        if not self.eps > 0:
            raise ValidationError("eps must be positive")


def _check_pair(Z_a, Z_b):
    Z_a = np.asarray(Z_a, dtype=float)
    Z_b = np.asarray(Z_b, dtype=float)
    if Z_a.ndim != 2 or Z_a.shape != Z_b.shape:
        raise PreconditionError(f"views must be matching N x D matrices, got {Z_a.shape} and {Z_b.shape}")
    if Z_a.shape[0] < 2:
        raise PreconditionError("batch size N >= 2 is required (variance undefined)")
    if not (np.all(np.isfinite(Z_a)) and np.all(np.isfinite(Z_b))):
        raise PreconditionError("views contain non-finite entries")
    return Z_a, Z_b


def batch_normalize(Z, eps=1e-5):
    """Return (normalized, scale) with ``normalized = (Z - mean) / scale``."""
    centred = Z - Z.mean(axis=0)
    scale = np.maximum(np.sqrt((centred**2).mean(axis=0)), eps)
    return centred / scale, scale


def cross_correlation(Z_a, Z_b, eps=1e-5):
    Z_a, Z_b = _check_pair(Z_a, Z_b)
    a, _ = batch_normalize(Z_a, eps)
    b, _ = batch_normalize(Z_b, eps)
    return a.T @ b / Z_a.shape[0]


def barlow_twins_loss(C, cfg=BtLossConfig()):
    """Return ``(loss, invariance, redundancy)``.

    ``loss == invariance + lambda * redundancy`` where invariance is
    ``sum_i (1 - C_ii)^2`` and redundancy ``sum_{i != j} C_ij^2``.
    """
    C = np.asarray(C, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise PreconditionError(f"C must be square, got shape {C.shape}")
    diag = np.diag(C)
    invariance = float(np.sum((1.0 - diag) ** 2))
    redundancy = float(np.sum(C**2) - np.sum(diag**2))
    return invariance + cfg.lambda_ * redundancy, invariance, redundancy


def _normalize_backward(dn, normalized, scale, floored):
    # d/dZ of (Z - mean)/scale, scale = std unless floored at eps
    g = dn - dn.mean(axis=0)
    proj = (dn * normalized).mean(axis=0)
    g = g - np.where(floored, 0.0, proj) * normalized
    return g / scale


def bt_loss_and_gradient(Z_a, Z_b, cfg=BtLossConfig()):
    """Loss and its gradient with respect to the raw (pre-normalization) views."""
    Z_a, Z_b = _check_pair(Z_a, Z_b)
    n = Z_a.shape[0]
    a, sa = batch_normalize(Z_a, cfg.eps)
    b, sb = batch_normalize(Z_b, cfg.eps)
    C = a.T @ b / n
    loss, _, _ = barlow_twins_loss(C, cfg)
    G = 2.0 * cfg.lambda_ * C
    np.fill_diagonal(G, -2.0 * (1.0 - np.diag(C)))
    da = b @ G.T / n
    db = a @ G / n
    fa = sa <= cfg.eps
    fb = sb <= cfg.eps
    return loss, _normalize_backward(da, a, sa, fa), _normalize_backward(db, b, sb, fb)


def bt_loss_gradient(Z_a, Z_b, cfg=BtLossConfig()):
    _, dA, dB = bt_loss_and_gradient(Z_a, Z_b, cfg)
    return dA, dB


# -- distortions -------------------------------------------------------------


@dataclass(frozen=True)
class DistortionSpec:
    zoom_range: tuple = (0.9, 1.1)
    crop_jitter: float = 0.05  # max shift as a fraction of the side
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    hue: float = 0.05  # fraction of a full hue turn
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    noise_std: float = 0.0  # additive noise, used for vector inputs
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.zoom_range
        if not (0 < lo <= 1.0 <= hi):
            raise ValidationError("zoom_range must contain 1.0")
        for p in (self.hflip_p, self.vflip_p):
            if not 0.0 <= p <= 1.0:
                raise ValidationError("flip probabilities must lie in [0, 1]")
        for v in (self.crop_jitter, self.brightness, self.contrast, self.saturation, self.hue, self.noise_std):
            if v < 0:
                raise ValidationError("distortion magnitudes must be non-negative")

    @classmethod
    def identity(cls, seed=0):
        return cls((1.0, 1.0), 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, seed)


def _rgb_to_hsv(rgb):
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    delta = mx - mn
    s = np.where(mx > 0, delta / np.where(mx > 0, mx, 1), 0.0)
    safe = np.where(delta > 0, delta, 1)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    h = np.where(mx == r, ((g - b) / safe) % 6, np.where(mx == g, (b - r) / safe + 2, (r - g) / safe + 4))
    h = np.where(delta > 0, h / 6.0, 0.0)
    return np.stack([h, s, mx], axis=-1)


def _hsv_to_rgb(hsv):
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6) % 6
    f = h * 6 - np.floor(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    choices = [
        np.stack([v, t, p], -1),
        np.stack([q, v, p], -1),
        np.stack([p, v, t], -1),
        np.stack([p, q, v], -1),
        np.stack([t, p, v], -1),
        np.stack([v, p, q], -1),
    ]
    out = np.zeros(hsv.shape)
    for k in range(6):
        out = np.where((i == k)[..., None], choices[k], out)
    return out


def _zoom_crop(px, zoom, dx, dy):
    """Sample a ``zoom``-scaled window (bilinear) back onto the original grid."""
    h, w, _ = px.shape
    ys = (np.arange(h) - (h - 1) / 2) / zoom + (h - 1) / 2 + dy
    xs = (np.arange(w) - (w - 1) / 2) / zoom + (w - 1) / 2 + dx
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    f = px.astype(float)
    top = f[y0][:, x0] * (1 - wx) + f[y0][:, x1] * wx
    bot = f[y1][:, x0] * (1 - wx) + f[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def _distort_one(px, spec, rng):
    h, w, _ = px.shape
    zoom = rng.uniform(*spec.zoom_range)
    dx = rng.uniform(-spec.crop_jitter, spec.crop_jitter) * w
    dy = rng.uniform(-spec.crop_jitter, spec.crop_jitter) * h
    hflip = rng.random() < spec.hflip_p
    vflip = rng.random() < spec.vflip_p
    bright = 1.0 + rng.uniform(-spec.brightness, spec.brightness)
    contrast = 1.0 + rng.uniform(-spec.contrast, spec.contrast)
    sat = 1.0 + rng.uniform(-spec.saturation, spec.saturation)
    hue = rng.uniform(-spec.hue, spec.hue)

    if zoom == 1.0 and dx == 0.0 and dy == 0.0:
        out = px.astype(float)
    else:
        out = _zoom_crop(px, zoom, dx, dy)
    if hflip:
        out = out[:, ::-1]
    if vflip:
        out = out[::-1]
    rgb = out / 255.0
    if bright != 1.0:
        rgb = rgb * bright
    if contrast != 1.0:
        rgb = (rgb - rgb.mean()) * contrast + rgb.mean()
    rgb = np.clip(rgb, 0, 1)
    if sat != 1.0 or hue != 0.0:
        hsv = _rgb_to_hsv(rgb)
        hsv[..., 0] = (hsv[..., 0] + hue) % 1.0
        hsv[..., 1] = np.clip(hsv[..., 1] * sat, 0, 1)
        rgb = _hsv_to_rgb(hsv)
    return np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)


def apply_distortions(tile, spec, draw):
    """Two independently distorted views of one tile (same size as input)."""
    if isinstance(draw, (int, np.integer)):
        draw = np.random.default_rng(draw)
    va = _distort_one(tile.pixels, spec, draw)
    vb = _distort_one(tile.pixels, spec, draw)
    return RasterImage(va, tile.microns_per_pixel), RasterImage(vb, tile.microns_per_pixel)


def distort_vectors(X, spec, rng):
    """Vector analogue of the image distortions: gain jitter plus noise."""
    X = np.asarray(X, dtype=float)
    gain = 1.0 + rng.uniform(-spec.brightness, spec.brightness, size=(X.shape[0], 1))
    out = X * gain
    if spec.noise_std > 0:
        out = out + rng.normal(0.0, spec.noise_std, size=X.shape)
    return out


# -- desk-scale encoder ------------------------------------------------------


@dataclass
class Encoder:
    """Two-layer perceptron ``tanh(x W1 + b1) W2 + b2``; frozen after training."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    pool: int = 0  # image inputs are average-pooled to pool x pool before flattening

    @classmethod
    def init(cls, d_in, d_hidden, d_out, rng, pool=0):
        return cls(
            rng.normal(0, 1 / np.sqrt(d_in), (d_in, d_hidden)),
            np.zeros(d_hidden),
            rng.normal(0, 1 / np.sqrt(d_hidden), (d_hidden, d_out)),
            np.zeros(d_out),
            pool,
        )

    def copy(self):
        return Encoder(self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy(), self.pool)

    def forward(self, X):
        H = np.tanh(X @ self.W1 + self.b1)
        return H @ self.W2 + self.b2, H

    def backward(self, X, H, dZ):
        dW2 = H.T @ dZ
        db2 = dZ.sum(axis=0)
        dH = (dZ @ self.W2.T) * (1 - H**2)
        return X.T @ dH, dH.sum(axis=0), dW2, db2

    def project(self, X):
        X = as_features(X, self.pool)
        return self.forward(X)[0]


def as_features(data, pool=0):
    """Vectors pass through; image stacks (N x H x W x 3) are pooled and flattened."""
    arr = np.asarray(data)
    if arr.ndim == 2:
        return arr.astype(float)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValidationError(f"expected N x D vectors or N x H x W x 3 tiles, got {arr.shape}")
    n, h, w, _ = arr.shape
    p = pool or 8
    bh, bw = h // p, w // p
    crop = arr[:, : bh * p, : bw * p].astype(float) / 255.0
    return crop.reshape(n, p, bh, p, bw, 3).mean(axis=(2, 4)).reshape(n, -1)


@dataclass
class ToyTrainResult:
    encoder: Encoder
    initial: Encoder
    loss_trace: list = field(default_factory=list)


def _views(batch, spec, rng, is_image):
    if not is_image:
        return distort_vectors(batch, spec, rng), distort_vectors(batch, spec, rng)
    va, vb = [], []
    for px in batch:
        a, b = apply_distortions(RasterImage(px), spec, rng)
        va.append(a.pixels)
        vb.append(b.pixels)
    return np.stack(va), np.stack(vb)


def train_toy_encoder(
    data,
    spec=DistortionSpec(),
    cfg=BtLossConfig(),
    epochs=60,
    batch_size=64,
    hidden=32,
    out_dim=8,
    lr=0.2,
    seed=0,
    pool=8,
):
    """Plain fixed-step gradient descent on the Barlow Twins loss.

    ``data`` is either an N x D array of vectors or an N x H x W x 3 stack of
    tiles.  Returns the trained encoder, the untouched initialization and the
    per-step loss trace.  ``epochs=0`` returns the initialization.
    """
    arr = np.asarray(data)
    if batch_size < 2:
        raise PreconditionError("batch_size must be >= 2")
    n = arr.shape[0]
    if n < 2 * batch_size:
        raise PreconditionError(f"need at least 2*batch_size={2 * batch_size} samples, got {n}")
    is_image = arr.ndim == 4
    rng = np.random.default_rng(seed)
    d_in = as_features(arr[:1], pool).shape[1]
    enc = Encoder.init(d_in, hidden, out_dim, rng, pool=pool if is_image else 0)
    initial = enc.copy()
    trace = []
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            batch = arr[order[start:start + batch_size]]
            xa, xb = _views(batch, spec, rng, is_image)
            xa, xb = as_features(xa, pool), as_features(xb, pool)
            za, ha = enc.forward(xa)
            zb, hb = enc.forward(xb)
            loss, dza, dzb = bt_loss_and_gradient(za, zb, cfg)
            if not np.isfinite(loss):
                raise ConvergenceError(f"loss became non-finite at step {step}", step=step)
            ga = enc.backward(xa, ha, dza)
            gb = enc.backward(xb, hb, dzb)
            for name, g1, g2 in zip(("W1", "b1", "W2", "b2"), ga, gb):
                setattr(enc, name, getattr(enc, name) - lr * (g1 + g2))
            trace.append(float(loss))
            step += 1
    return ToyTrainResult(enc, initial, trace)


def planted_factor_data(n=512, d=16, factors=4, noise=0.1, seed=0):
    """Vectors driven by a few latent factors, for checking the toy loop."""
    rng = np.random.default_rng(seed)
    F = rng.normal(size=(n, factors))
    A = rng.normal(size=(factors, d))
    return F @ A + noise * rng.normal(size=(n, d))
