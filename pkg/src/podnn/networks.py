"""Expert and discriminator networks, and the orthogonalized expert ensemble."""

from __future__ import annotations

import json
import struct
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormStats, Tensor

DEGENERATE_NORM = 1e-12


def _uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Minimal parameter container: named Tensors plus named buffers."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.bn_stats: dict[str, BatchNormStats] = {}

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def _param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data.copy() for name, p in self.params.items()}
        for name, st in self.bn_stats.items():
            out[f"{name}.running_mean"] = st.mean.copy()
            out[f"{name}.running_var"] = st.var.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.state_dict())
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ValueError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, p in self.params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: checkpoint {state[name].shape} vs model {p.shape}")
            p.data = state[name].astype(p.dtype)
        for name, st in self.bn_stats.items():
            st.mean = state[f"{name}.running_mean"].astype(st.mean.dtype)
            st.var = state[f"{name}.running_var"].astype(st.var.dtype)


class ExpertNet(Module):
    """Four conv(16)/ELU/BN blocks followed by conv(1)/sigmoid.

    The feature map after the fourth block is the orthogonalization point.
    """

    n_blocks = 4
    width = 16

    def __init__(self, rng: np.random.Generator, in_channels: int = 1, dtype=np.float64,
                 bn_momentum: float = 0.9, bn_eps: float = 1e-5):
        super().__init__()
        c = in_channels
        for k in range(1, self.n_blocks + 1):
            self._param(f"conv{k}.weight", _uniform_init(rng, (self.width, c, 3, 3), c * 9, dtype))
            self._param(f"conv{k}.bias", np.zeros(self.width, dtype=dtype))
            self._param(f"bn{k}.gamma", np.ones(self.width, dtype=dtype))
            self._param(f"bn{k}.beta", np.zeros(self.width, dtype=dtype))
            self.bn_stats[f"bn{k}"] = BatchNormStats(self.width, bn_momentum, bn_eps, dtype)
            c = self.width
        self._param("out.weight", _uniform_init(rng, (in_channels, c, 3, 3), c * 9, dtype))
        self._param("out.bias", np.zeros(in_channels, dtype=dtype))
        self.in_channels = in_channels

    def forward_to_p(self, x: Tensor, training: bool = True) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"expert expects input (N, {self.in_channels}, H, W), got {x.shape}")
        p = self.params
        h = x
        for k in range(1, self.n_blocks + 1):
            h = ad.conv2d(h, p[f"conv{k}.weight"], p[f"conv{k}.bias"])
            h = ad.elu(h)
            h = ad.batchnorm(h, p[f"bn{k}.gamma"], p[f"bn{k}.beta"], self.bn_stats[f"bn{k}"], training)
        return h

    def forward_from_p(self, v: Tensor) -> Tensor:
        if v.ndim != 4 or v.shape[1] != self.width:
            raise ValueError(f"expert resume expects features (N, {self.width}, H, W), got {v.shape}")
        p = self.params
        return ad.sigmoid(ad.conv2d(v, p["out.weight"], p["out.bias"]))

    def forward(self, x: Tensor, training: bool = True, injected_v: Optional[Tensor] = None) -> Tensor:
        """Full pass; ``injected_v`` replaces the layer-P features when given."""
        if injected_v is None:
            injected_v = self.forward_to_p(x, training)
        elif injected_v.shape[0] != x.shape[0] or injected_v.shape[2:] != x.shape[2:]:
            raise ValueError(f"injected features {injected_v.shape} do not match input {x.shape}")
        return self.forward_from_p(injected_v)


class DiscriminatorNet(Module):
    """conv16/pool, conv32/pool, conv64/pool, dense128 (ELU), dense1 (sigmoid)."""

    hidden_size = 128
    channels = (16, 32, 64)

    def __init__(self, rng: np.random.Generator, image_hw: tuple[int, int], in_channels: int = 1,
                 dtype=np.float64):
        super().__init__()
        c = in_channels
        h, w = image_hw
        for k, f in enumerate(self.channels, start=1):
            self._param(f"conv{k}.weight", _uniform_init(rng, (f, c, 3, 3), c * 9, dtype))
            self._param(f"conv{k}.bias", np.zeros(f, dtype=dtype))
            c = f
            h, w = (h + 1) // 2, (w + 1) // 2
        flat = c * h * w
        self._param("fc.weight", _uniform_init(rng, (flat, self.hidden_size), flat, dtype))
        self._param("fc.bias", np.zeros(self.hidden_size, dtype=dtype))
        self._param("head.weight", _uniform_init(rng, (self.hidden_size, 1), self.hidden_size, dtype))
        self._param("head.bias", np.zeros(1, dtype=dtype))
        self.image_hw = tuple(image_hw)
        self.in_channels = in_channels

    def hidden(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels or tuple(x.shape[2:]) != self.image_hw:
            raise ValueError(
                f"discriminator expects (N, {self.in_channels}, {self.image_hw[0]}, {self.image_hw[1]}), got {x.shape}"
            )
        p = self.params
        h = x
        for k in range(1, len(self.channels) + 1):
            h = ad.avgpool2d(ad.elu(ad.conv2d(h, p[f"conv{k}.weight"], p[f"conv{k}.bias"])))
        h = ad.reshape(h, (h.shape[0], -1))
        return ad.elu(ad.dense(h, p["fc.weight"], p["fc.bias"]))

    def head(self, hidden: Tensor) -> Tensor:
        p = self.params
        return ad.reshape(ad.sigmoid(ad.dense(hidden, p["head.weight"], p["head.bias"])), (hidden.shape[0],))

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Return (score of shape (N,), last hidden activation of shape (N, 128))."""
        h = self.hidden(x)
        return self.head(h), h


# ------------------------------------------------------------ orthogonalization


@dataclass
class OrthoDiagnostics:
    fallbacks: int
    degenerate: np.ndarray  # per-sample flag: some projection was skipped


def orthogonalize(u_list: Sequence[Tensor], detach_previous: bool = False,
                  threshold: float = DEGENERATE_NORM) -> tuple[list[Tensor], OrthoDiagnostics]:
    """Classical Gram-Schmidt across experts, per sample over flattened features.

    ``v_k = u_k - sum_{i<k} <v_i, u_k> / <v_i, v_i> * v_i``. A projection term
    whose ``<v_i, v_i>`` is below ``threshold`` is skipped for that sample.
    With ``detach_previous`` the earlier ``v_i`` enter as constants, so the
    gradient of anything computed from ``v_k`` reaches only ``u_k``.
    """
    if not u_list:
        return [], OrthoDiagnostics(0, np.zeros(0, dtype=bool))
    shape = u_list[0].shape
    for k, u in enumerate(u_list):
        if u.shape != shape:
            raise ValueError(f"expert {k} features have shape {u.shape}, expected {shape}")
    n = shape[0]
    flat = [ad.reshape(u, (n, -1)) for u in u_list]
    vs: list[Tensor] = []
    fallbacks = 0
    degenerate = np.zeros(n, dtype=bool)
    for uk in flat:
        vk = uk
        for vi in vs:
            if detach_previous:
                vi = ad.detach(vi)
            sq = ad.tsum(vi * vi, axis=1, keepdims=True)
            ok = sq.data >= threshold
            if ok.all():
                coef = ad.tsum(vi * uk, axis=1, keepdims=True) / sq
            else:
                bad = ~ok[:, 0]
                fallbacks += int(bad.sum())
                degenerate |= bad
                safe = sq + (~ok).astype(sq.dtype)
                coef = ad.tsum(vi * uk, axis=1, keepdims=True) / safe * ok.astype(sq.dtype)
            vk = vk - coef * vi
        vs.append(vk)
    return [ad.reshape(v, shape) for v in vs], OrthoDiagnostics(fallbacks, degenerate)


def orthogonality_residual(v_list: Sequence[Tensor], exclude: Optional[np.ndarray] = None) -> float:
    """Max |cos| between distinct experts' flattened features over kept samples."""
    if len(v_list) < 2:
        return 0.0
    n = v_list[0].shape[0]
    mats = np.stack([np.asarray(v.data, dtype=np.float64).reshape(n, -1) for v in v_list], axis=1)
    keep = np.ones(n, dtype=bool) if exclude is None else ~exclude
    mats = mats[keep]
    if mats.shape[0] == 0:
        return 0.0
    norms = np.linalg.norm(mats, axis=2)
    gram = np.einsum("bif,bjf->bij", mats, mats)
    denom = norms[:, :, None] * norms[:, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = np.where(denom > 0, np.abs(gram) / denom, 0.0)
    k = len(v_list)
    cos[:, np.arange(k), np.arange(k)] = 0.0
    return float(cos.max())


class PODNNEnsemble:
    """Parallel experts sharing one input, optionally orthogonalized at layer P."""

    def __init__(self, experts: Sequence[ExpertNet], orthogonalize: bool = True):
        self.experts = list(experts)
        self.orthogonalize = orthogonalize

    def __len__(self) -> int:
        return len(self.experts)

    @classmethod
    def build(cls, n_experts: int, rng: np.random.Generator, orthogonalize: bool = True, dtype=np.float64,
              **kwargs) -> "PODNNEnsemble":
        return cls([ExpertNet(rng, dtype=dtype, **kwargs) for _ in range(n_experts)], orthogonalize)

    def features(self, x: Tensor, training: bool = True, detach_previous: bool = False):
        """Layer-P features before and after orthogonalization."""
        u_list = [e.forward_to_p(x, training) for e in self.experts]
        if self.orthogonalize:
            v_list, diag = orthogonalize(u_list, detach_previous=detach_previous)
        else:
            v_list, diag = list(u_list), OrthoDiagnostics(0, np.zeros(x.shape[0], dtype=bool))
        return u_list, v_list, diag

    def forward(self, x: Tensor, training: bool = True, detach_previous: bool = False):
        """Return (per-expert outputs, layer-P features v, diagnostics)."""
        _, v_list, diag = self.features(x, training, detach_previous)
        outs = [e.forward_from_p(v) for e, v in zip(self.experts, v_list)]
        return outs, v_list, diag


# ------------------------------------------------------------------ checkpoints

CHECKPOINT_FORMAT = "podnn-checkpoint/1"


def _encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def _decode_tensor(raw: bytes, where: str) -> np.ndarray:
    if len(raw) < 4:
        raise ValueError(f"{where}: truncated shape header")
    (ndim,) = struct.unpack_from("<I", raw, 0)
    off = 4 + 4 * ndim
    if len(raw) < off:
        raise ValueError(f"{where}: truncated shape header")
    shape = struct.unpack_from(f"<{ndim}I", raw, 4)
    count = int(np.prod(shape)) if ndim else 1
    if len(raw) != off + 4 * count:
        raise ValueError(f"{where}: expected {4 * count} data bytes, found {len(raw) - off}")
    return np.frombuffer(raw, dtype="<f4", offset=off).reshape(shape).copy()


def save_checkpoint(path, networks: dict[str, Module], meta: Optional[dict] = None) -> None:
    """Write a zip archive: manifest.json plus one .bin per tensor.

    Each .bin holds ``uint32 ndim``, ``ndim`` x ``uint32`` dims and the values
    as little-endian float32, all little-endian.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {"format": CHECKPOINT_FORMAT, "meta": meta or {}, "networks": {}}
    # fixed timestamp keeps archives byte-identical across runs
    stamp = (1980, 1, 1, 0, 0, 0)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for net_name, net in networks.items():
            entries = []
            for tname, arr in net.state_dict().items():
                member = f"{net_name}/{tname}.bin"
                zf.writestr(zipfile.ZipInfo(member, stamp), _encode_tensor(arr))
                entries.append({"name": tname, "shape": list(arr.shape), "dtype": "<f4", "file": member})
            manifest["networks"][net_name] = entries
        zf.writestr(zipfile.ZipInfo("manifest.json", stamp), json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(path) -> tuple[dict[str, dict[str, np.ndarray]], dict]:
    """Read an archive written by :func:`save_checkpoint`."""
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
        nets = {}
        for net_name, entries in manifest["networks"].items():
            tensors = {}
            for e in entries:
                arr = _decode_tensor(zf.read(e["file"]), e["file"])
                if list(arr.shape) != list(e["shape"]):
                    raise ValueError(f"{e['file']}: header shape {arr.shape} disagrees with manifest {e['shape']}")
                tensors[e["name"]] = arr
            nets[net_name] = tensors
    return nets, manifest["meta"]
