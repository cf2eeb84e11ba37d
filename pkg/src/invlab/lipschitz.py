"""Certified Lipschitz upper bounds for the reconstructor and their empirical validation.

The bound is the product of per-layer bounds.  Convolution spectra are taken
from the 2-D DFT of the filter: on an N x M circular grid the layer's singular
values are those of the (c_out, c_in) matrices at each spatial frequency.  A
zero-padded (linear) convolution of an n x m input is a restriction of the
circular one on an (n + k - 1) x (m + k - 1) grid, so evaluating the spectrum
on that enlarged grid bounds the zero-padded layer as well.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .errors import NumericError, ShapeError, UnsupportedLayer

POWER_TOL = 1e-6
POWER_MAX_ITER = 1000


@dataclass(frozen=True)
class LayerBound:
    layer_id: str
    kind: str  # dense | conv | transpose_conv | activation | normalization | pooling | reshape
    bound: float
    method: str  # svd | dft_conv | unit | contractive | exact
    included: bool = True


@dataclass
class NetworkBound:
    layers: list = field(default_factory=list)

    @property
    def L(self) -> float:
        out = 1.0
        for b in self.layers:
            if b.included:
                out *= b.bound
        return out

    def to_dict(self) -> dict:
        return {"per_layer": [vars(b) for b in self.layers], "L": self.L}


def dense_spectral_norm(weight, tol: float = POWER_TOL, max_iter: int = POWER_MAX_ITER, seed: int = 0) -> float:
    """Largest singular value by power iteration on A^T A (seeded start vector)."""
    a = np.asarray(weight.detach().cpu().numpy() if isinstance(weight, torch.Tensor) else weight, dtype=np.float64)
    if a.ndim != 2:
        a = a.reshape(a.shape[0], -1)
    if not np.all(np.isfinite(a)):
        raise NumericError("weight matrix has non-finite entries")
    if a.shape[0] < a.shape[1]:
        a = a.T  # iterate in the smaller dimension
    gram = a.T @ a
    v = np.random.default_rng(seed).standard_normal(gram.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = gram @ v
        lam = float(v @ w)
        if lam <= 0.0:
            return 0.0
        if np.linalg.norm(w - lam * v) <= tol * lam:
            break
        v = w / np.linalg.norm(w)
    return math.sqrt(lam)


def conv_singular_values(weight, input_shape) -> np.ndarray:
    """Singular values of the circular convolution on an ``input_shape`` grid, sorted descending.

    ``weight`` is (c_out, c_in, kh, kw); cross-correlation vs convolution and the
    channel order do not change the singular values.
    """
    w = np.asarray(weight.detach().cpu().numpy() if isinstance(weight, torch.Tensor) else weight, dtype=np.float64)
    if w.ndim != 4:
        raise ShapeError(f"filter must be 4-D (c_out, c_in, kh, kw), got {w.shape}")
    n, m = int(input_shape[0]), int(input_shape[1])
    if w.shape[2] > n or w.shape[3] > m:
        raise ShapeError(f"filter {w.shape[2:]} larger than input {(n, m)}")
    spectrum = np.fft.fft2(w, s=(n, m), axes=(2, 3))  # (c_out, c_in, n, m)
    mats = spectrum.transpose(2, 3, 0, 1)  # (n, m, c_out, c_in)
    sv = np.linalg.svd(mats, compute_uv=False)
    return np.sort(sv.ravel())[::-1]


def conv_lipschitz(weight, input_shape) -> float:
    """Bound for a zero-padded stride-s Conv2d (striding only drops outputs)."""
    k = np.asarray(weight.shape[2:])
    grid = (input_shape[0] + k[0] - 1, input_shape[1] + k[1] - 1)
    return float(conv_singular_values(weight, grid)[0])


def transpose_conv_lipschitz(weight, stride, input_shape) -> float:
    """Bound for ConvTranspose2d via its equivalent convolution.

    A transpose convolution equals a stride-1 convolution, with the flipped and
    channel-transposed filter, of the zero-interleaved input, followed by
    cropping (padding) that can only shrink norms.  Zero interleaving is an
    isometry onto its image, so the bound of the equivalent conv on the
    interleaved grid bounds the layer.  Flipping and channel transposition keep
    the singular values, so the filter is used as stored.
    """
    w = weight.detach().cpu().numpy() if isinstance(weight, torch.Tensor) else np.asarray(weight)
    if w.ndim != 4:
        raise ShapeError(f"filter must be 4-D, got {w.shape}")
    sh, sw = (stride, stride) if np.isscalar(stride) else stride
    kh, kw = w.shape[2:]
    n, m = int(input_shape[0]), int(input_shape[1])
    if n < 1 or m < 1:
        raise ShapeError(f"invalid input shape {input_shape}")
    grid = ((n - 1) * sh + 1 + 2 * (kh - 1), (m - 1) * sw + 1 + 2 * (kw - 1))
    return float(conv_singular_values(w, grid)[0])


def _pool_bound(kernel, stride) -> float:
    """l2 bound for max/avg pooling: sqrt of the max number of windows sharing a pixel."""
    k = kernel if isinstance(kernel, tuple) else (kernel, kernel)
    s = stride if isinstance(stride, tuple) else (stride, stride)
    s = tuple(k_ if s_ is None else s_ for k_, s_ in zip(k, s))
    return math.sqrt(math.ceil(k[0] / s[0]) * math.ceil(k[1] / s[1]))


def network_lipschitz_bound(g, input_length: int = None, conservative: bool = False) -> NetworkBound:
    """Product bound over the leaf modules of a sequential network.

    ``g`` is a ReconstructorHandle or an nn.Module whose leaves run in order.
    Batch normalization (eval mode) contributes its exact bound
    max |gamma / sqrt(var + eps)| unless ``conservative`` is set, in which case
    it is recorded and counted as 1.
    """
    net = getattr(g, "net", g)
    if input_length is None:
        spec = getattr(g, "spec", None)
        input_length = getattr(spec, "length", None)
    shape = (input_length,) if input_length is not None else None
    out = NetworkBound()
    leaves = [(name, m) for name, m in net.named_modules() if not list(m.children())]
    for name, m in leaves:
        if isinstance(m, nn.Linear):
            out.layers.append(LayerBound(name, "dense", dense_spectral_norm(m.weight), "svd"))
            shape = (m.out_features,)
        elif isinstance(m, nn.ConvTranspose2d):
            if shape is None or len(shape) != 3:
                raise ShapeError(f"cannot infer the input shape of {name}")
            if m.groups != 1 or m.dilation != (1, 1):
                raise UnsupportedLayer(f"{name}: grouped or dilated transpose conv")
            c, h, w = shape
            out.layers.append(LayerBound(name, "transpose_conv",
                                         transpose_conv_lipschitz(m.weight, m.stride, (h, w)), "dft_conv"))
            h = (h - 1) * m.stride[0] - 2 * m.padding[0] + m.kernel_size[0] + m.output_padding[0]
            w = (w - 1) * m.stride[1] - 2 * m.padding[1] + m.kernel_size[1] + m.output_padding[1]
            shape = (m.out_channels, h, w)
        elif isinstance(m, nn.Conv2d):
            if shape is None or len(shape) != 3:
                raise ShapeError(f"cannot infer the input shape of {name}")
            if m.groups != 1 or m.dilation != (1, 1):
                raise UnsupportedLayer(f"{name}: grouped or dilated conv")
            c, h, w = shape
            out.layers.append(LayerBound(name, "conv", conv_lipschitz(m.weight, (h, w)), "dft_conv"))
            h = (h + 2 * m.padding[0] - m.kernel_size[0]) // m.stride[0] + 1
            w = (w + 2 * m.padding[1] - m.kernel_size[1]) // m.stride[1] + 1
            shape = (m.out_channels, h, w)
        elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d)):
            if m.running_var is None:
                raise UnsupportedLayer(f"{name}: batch norm without running statistics")
            gamma = m.weight.detach().double() if m.weight is not None else torch.ones_like(m.running_var).double()
            exact = float((gamma.abs() / torch.sqrt(m.running_var.double() + m.eps)).max())
            if conservative:
                out.layers.append(LayerBound(name, "normalization", exact, "contractive", included=False))
            else:
                out.layers.append(LayerBound(name, "normalization", exact, "exact"))
        elif isinstance(m, (nn.ReLU, nn.Tanh, nn.Identity)):
            out.layers.append(LayerBound(name, "activation", 1.0, "unit"))
        elif isinstance(m, nn.LeakyReLU):
            out.layers.append(LayerBound(name, "activation", max(1.0, abs(m.negative_slope)), "unit"))
        elif isinstance(m, nn.ELU):
            out.layers.append(LayerBound(name, "activation", max(1.0, m.alpha), "unit"))
        elif isinstance(m, nn.Sigmoid):
            out.layers.append(LayerBound(name, "activation", 0.25, "unit"))
        elif isinstance(m, (nn.MaxPool2d, nn.AvgPool2d)):
            b = _pool_bound(m.kernel_size, m.stride)
            out.layers.append(LayerBound(name, "pooling", b, "contractive" if b <= 1 else "unit", included=b > 1))
            if shape is not None and len(shape) == 3:
                k = m.kernel_size if isinstance(m.kernel_size, tuple) else (m.kernel_size,) * 2
                s = m.stride if isinstance(m.stride, tuple) else (m.stride,) * 2
                shape = (shape[0], (shape[1] - k[0]) // s[0] + 1, (shape[2] - k[1]) // s[1] + 1)
        elif isinstance(m, nn.Unflatten):
            out.layers.append(LayerBound(name, "reshape", 1.0, "unit"))
            shape = tuple(m.unflattened_size)
        elif isinstance(m, nn.Flatten):
            out.layers.append(LayerBound(name, "reshape", 1.0, "unit"))
            shape = (int(np.prod(shape)),) if shape is not None else None
        elif isinstance(m, nn.Dropout):
            out.layers.append(LayerBound(name, "reshape", 1.0, "unit"))
        else:
            raise UnsupportedLayer(f"{name}: {type(m).__name__} has no Lipschitz rule")
    return out


def verify_bound(g, L: float, probes: int = 1000, scales=(1e-3, 1.0), seed: int = 0,
                 inputs: np.ndarray = None) -> dict:
    """Falsification test of ||G(x) - G(x + d)|| <= L ||d|| in float64.

    Probe inputs default to uniform [0, 1] vectors (the normalized embedding
    range); perturbation norms are log-uniform between ``scales`` times ||x||.
    """
    net = copy.deepcopy(getattr(g, "net", g)).double().eval()
    length = inputs.shape[1] if inputs is not None else _input_length(g, net)
    rng = np.random.default_rng(seed)
    if inputs is None:
        x = rng.uniform(0.0, 1.0, size=(probes, length))
    else:
        x = np.asarray(inputs, dtype=np.float64)[rng.integers(len(inputs), size=probes)]
    direction = rng.standard_normal((probes, length))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    rel = np.exp(rng.uniform(np.log(scales[0]), np.log(scales[1]), size=probes))
    delta = direction * (rel * np.linalg.norm(x, axis=1))[:, None]
    dn = np.linalg.norm(delta, axis=1)
    keep = dn > 0
    with torch.no_grad():
        gx = net(torch.from_numpy(x[keep])).flatten(1).numpy()
        gy = net(torch.from_numpy(x[keep] + delta[keep])).flatten(1).numpy()
    ratios = np.linalg.norm(gx - gy, axis=1) / dn[keep]
    max_ratio = float(ratios.max()) if ratios.size else 0.0
    return {"L": float(L), "probes": int(keep.sum()), "max_ratio": max_ratio,
            "violations": int(np.sum(ratios > L * (1 + 1e-9))),
            "tightness": max_ratio / L if L > 0 else float("inf")}


def _input_length(g, net) -> int:
    spec = getattr(g, "spec", None)
    if spec is not None and hasattr(spec, "length"):
        return spec.length
    for m in net.modules():
        if isinstance(m, nn.Linear):
            return m.in_features
    raise ShapeError("cannot infer the network input length")
