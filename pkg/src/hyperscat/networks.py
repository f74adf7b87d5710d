"""Matching, inverse and spectral-refinement networks, plus checkpoint I/O."""

from __future__ import annotations

import json
import logging
import struct
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from . import functional as F
from .scattering import ScatteringCoeffs
from .tensor import Tensor, as_tensor, no_grad, relu, tanh

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"HSNN"


class Module:
    """Minimal parameter container; submodules are discovered in attribute order."""

    training = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = [(prefix + name, t) for name, t in self._own_parameters()]
        for name, child in self.children():
            out += child.named_parameters(f"{prefix}{name}.")
        return out

    def named_buffers(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        out = [(prefix + name, b) for name, b in self._own_buffers()]
        for name, child in self.children():
            out += child.named_buffers(f"{prefix}{name}.")
        return out

    def _own_parameters(self) -> list[tuple[str, Tensor]]:
        return []

    def _own_buffers(self) -> list[tuple[str, np.ndarray]]:
        return []

    def _set_buffer(self, name: str, value: np.ndarray) -> None:
        raise KeyError(name)

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def load_buffer(self, qualified: str, value: np.ndarray) -> None:
        head, _, rest = qualified.partition(".")
        if rest:
            getattr(self, head).load_buffer(rest, value)
        else:
            self._set_buffer(head, value)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int):
        self.weight = Tensor(np.zeros((d_in, d_out)), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)

    def _own_parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def __call__(self, x) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int = 3):
        self.weight = Tensor(np.zeros((c_out, c_in, kernel, kernel)), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)

    def _own_parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def __call__(self, x) -> Tensor:
        return F.conv2d_same(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.state = F.BatchNormState(channels, momentum, eps)

    def _own_parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def _own_buffers(self):
        return [("running_mean", self.state.running_mean), ("running_var", self.state.running_var)]

    def _set_buffer(self, name, value):
        if name not in ("running_mean", "running_var"):
            raise KeyError(name)
        setattr(self.state, name, np.array(value, dtype=np.float64))

    def __call__(self, x) -> Tensor:
        return F.batchnorm2d(x, self.gamma, self.beta, self.state, self.training)


def init_params(net: Module, seed: int) -> Module:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases 0, batch-norm scale 1.

    Parameters are drawn in declaration order from one seeded generator.
    """
    rng = np.random.default_rng(seed)
    for name, p in net.named_parameters():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "weight":
            fan_in = p.shape[0] if p.ndim == 2 else int(np.prod(p.shape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            p.data = rng.uniform(-bound, bound, size=p.shape)
        elif leaf == "gamma":
            p.data = np.ones(p.shape)
        else:
            p.data = np.zeros(p.shape)
        p.grad = None
    return net


def _rows_to_maps(rows: Tensor, n: int, h: int, w: int) -> Tensor:
    return rows.reshape(n, h, w, rows.shape[1]).transpose(0, 3, 1, 2)


def _maps_to_rows(x) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    return x.transpose(0, 2, 3, 1).reshape(n * h * w, c)


class MatchingNet(Module):
    """Two linear layers, ReLU then tanh, applied independently at every pixel."""

    arch = "matching"

    def __init__(self, d_in: int, d_out: int, d_hidden: int = 512, seed: int = 0):
        self.config = {"d_in": d_in, "d_out": d_out, "d_hidden": d_hidden}
        self.linear1 = Linear(d_in, d_hidden)
        self.linear2 = Linear(d_hidden, d_out)
        init_params(self, seed)

    @property
    def d_in(self) -> int:
        return self.config["d_in"]

    @property
    def d_out(self) -> int:
        return self.config["d_out"]

    def __call__(self, x) -> Tensor:
        """(N, d_in) rows -> (N, d_out); (N, d_in, h, w) maps -> (N, d_out, h, w)."""
        x = as_tensor(x)
        if x.ndim == 4:
            n, _, h, w = x.shape
            return _rows_to_maps(self(_maps_to_rows(x)), n, h, w)
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ValueError(f"{type(self).__name__} expects {self.d_in} input features, got shape {x.shape}")
        return tanh(self.linear2(relu(self.linear1(x))))


class MisrNet(MatchingNet):
    """Per-pixel spectral refinement; same layout as the matching network."""

    arch = "misr"

    def __init__(self, n_bands: int = 61, d_hidden: int = 256, seed: int = 0):
        super().__init__(n_bands, n_bands, d_hidden, seed)


class InverseNet(Module):
    """Two (upsample x2, conv, batchnorm, ReLU) blocks and a (conv, batchnorm, tanh) head."""

    arch = "inverse"

    def __init__(self, c_in: int, c_out: int, widths=(256, 128), kernel: int = 3,
                 seed: int = 0, input_size: Optional[tuple[int, int]] = None):
        c1, c2 = widths
        self.config = {"c_in": c_in, "c_out": c_out, "widths": [c1, c2], "kernel": kernel,
                       "input_size": list(input_size) if input_size else None}
        self.conv1 = Conv2d(c_in, c1, kernel)
        self.bn1 = BatchNorm2d(c1)
        self.conv2 = Conv2d(c1, c2, kernel)
        self.bn2 = BatchNorm2d(c2)
        self.conv3 = Conv2d(c2, c_out, kernel)
        self.bn3 = BatchNorm2d(c_out)
        init_params(self, seed)

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[1] != self.config["c_in"]:
            raise ValueError(f"InverseNet expects (N, {self.config['c_in']}, h, w), got {x.shape}")
        h = relu(self.bn1(F.upsample2_conv2d(x, self.conv1.weight, self.conv1.bias)))
        h = relu(self.bn2(F.upsample2_conv2d(h, self.conv2.weight, self.conv2.bias)))
        return tanh(self.bn3(self.conv3(h)))


def matching_forward(net: MatchingNet, coeffs: ScatteringCoeffs) -> ScatteringCoeffs:
    """Map (standardized) MSI coefficients to predicted coefficients of one band set."""
    if coeffs.maps.shape[0] != net.d_in:
        raise ValueError(f"matching net expects {net.d_in} coefficient maps, got {coeffs.maps.shape[0]}")
    with no_grad():
        out = net(coeffs.maps[None]).data[0]
    n_paths = coeffs.n_paths
    if net.d_out % n_paths:
        raise ValueError(f"output width {net.d_out} is not a multiple of {n_paths} paths")
    return ScatteringCoeffs(out, list(coeffs.paths), net.d_out // n_paths)


def inverse_forward(net: InverseNet, coeffs: ScatteringCoeffs) -> np.ndarray:
    """Coefficient stack (C, h, w) -> band stack (c_out, 4h, 4w) in (-1, 1)."""
    maps = coeffs.maps
    if maps.shape[0] != net.config["c_in"]:
        raise ValueError(f"inverse net expects {net.config['c_in']} coefficient maps, got {maps.shape[0]}")
    trained = net.config.get("input_size")
    if trained and list(maps.shape[1:]) != list(trained):
        logger.warning("inverse net trained on %s inputs, applied to %s", trained, maps.shape[1:])
    with no_grad():
        return net(maps[None]).data[0]


def misr_forward(net: MisrNet, spectra: np.ndarray) -> np.ndarray:
    spectra = np.asarray(spectra, dtype=np.float64)
    if spectra.ndim != 2 or spectra.shape[1] != net.d_in:
        raise ValueError(f"MISR net expects (N, {net.d_in}) spectra, got {spectra.shape}")
    if spectra.shape[0] == 0:
        return np.empty((0, net.d_out))
    with no_grad():
        return net(spectra).data


def save_checkpoint(net: Module, path, seed: int, epoch: int) -> None:
    """Magic, uint64 header length, JSON header, then little-endian float64 payload.

    Parameters come first in declaration order, then batch-norm running stats.
    """
    tensors = [(n, t.data, "param") for n, t in net.named_parameters()]
    tensors += [(n, b, "buffer") for n, b in net.named_buffers()]
    header = {
        "arch": net.arch,
        "config": net.config,
        "seed": int(seed),
        "epoch": int(epoch),
        "tensors": [{"name": n, "shape": list(a.shape), "kind": k} for n, a, k in tensors],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr, _ in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[Module, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12:12 + n])
    payload = np.frombuffer(raw[12 + n:], dtype="<f8")
    expected = sum(int(np.prod(t["shape"])) for t in header["tensors"])
    if payload.size != expected or (len(raw) - 12 - n) % 8:
        raise ValueError(f"{path}: payload holds {payload.size} values, header declares {expected}")

    cfg = dict(header["config"])
    if header["arch"] == "matching":
        net = MatchingNet(cfg["d_in"], cfg["d_out"], cfg["d_hidden"])
    elif header["arch"] == "misr":
        net = MisrNet(cfg["d_in"], cfg["d_hidden"])
    elif header["arch"] == "inverse":
        net = InverseNet(cfg["c_in"], cfg["c_out"], tuple(cfg["widths"]), cfg["kernel"],
                         input_size=cfg.get("input_size"))
    else:
        raise ValueError(f"{path}: unknown architecture {header['arch']!r}")

    params = dict(net.named_parameters())
    offset = 0
    for entry in header["tensors"]:
        size = int(np.prod(entry["shape"]))
        values = payload[offset:offset + size].astype(np.float64).reshape(entry["shape"])
        offset += size
        if entry["kind"] == "param":
            params[entry["name"]].data = values
        else:
            net.load_buffer(entry["name"], values)
    net.eval()
    return net, header
