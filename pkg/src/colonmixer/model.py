"""Spatio-temporal mixer network for colon shape estimation.

The network embeds the 2S stacked window patches into a hidden dimension,
runs b mixing blocks (patch mixing across the 2S axis, then channel mixing
across the hidden axis, both with residuals), fuses a feature derived from
the insertion-length history, and maps through fully connected layers to
the 3M coordinates of the estimated shape. Gradients are hand-derived;
training happens in normalized coordinate space.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .data import MARKER_COUNT, SENSOR_COUNT, NormalizationStats, WindowSample, denormalize
from .nn import DenseLayer, Dropout, LayerNorm, gelu, gelu_grad, mse_loss

__all__ = [
    "CHECKPOINT_VERSION",
    "PATCH_ORDER",
    "CheckpointError",
    "CheckpointFormatError",
    "CheckpointShapeError",
    "CheckpointTruncatedError",
    "CheckpointVersionError",
    "ColonShapeMixer",
    "EstimatedColonShape",
    "MixerConfig",
    "load_checkpoint",
    "save_checkpoint",
]

# Row ordering of the stacked patch matrix, recorded in every checkpoint.
PATCH_ORDER = "positions-then-directions"

CHECKPOINT_VERSION = 1
_MAGIC = b"CSMX"


@dataclass(frozen=True)
class MixerConfig:
    """Model hyperparameters.

    The hidden dimension is an assumption of this implementation (64 by
    default, sitting between the two MLP widths); the remaining defaults
    follow the published training setup.
    """

    sensors: int = SENSOR_COUNT
    markers: int = MARKER_COUNT
    window_len: int = 18
    patch_rows: int = 6
    patch_cols: int = 3
    hidden_dim: int = 64
    num_blocks: int = 7
    patch_mlp_dim: int = 64
    channel_mlp_dim: int = 128
    mix_dropout: float = 0.1
    head_dropout: float = 0.3
    length_feat_dim: int = 16
    head_dims: tuple = (256, 128)

    def __post_init__(self):
        dims = {
            "sensors": self.sensors,
            "markers": self.markers,
            "window_len": self.window_len,
            "patch_rows": self.patch_rows,
            "patch_cols": self.patch_cols,
            "hidden_dim": self.hidden_dim,
            "num_blocks": self.num_blocks,
            "patch_mlp_dim": self.patch_mlp_dim,
            "channel_mlp_dim": self.channel_mlp_dim,
            "length_feat_dim": self.length_feat_dim,
        }
        for name, value in dims.items():
            if not isinstance(value, int) or value < 1:
                raise ValueError(f"config field {name} must be a positive integer, got {value!r}")
        if (3 * self.sensors) % self.patch_rows != 0:
            raise ValueError(
                f"patch_rows {self.patch_rows} must divide the {3 * self.sensors} matrix rows"
            )
        if self.window_len % self.patch_cols != 0:
            raise ValueError(
                f"patch_cols {self.patch_cols} must divide the window length {self.window_len}"
            )
        for name, p in (("mix_dropout", self.mix_dropout), ("head_dropout", self.head_dropout)):
            if not 0.0 <= p < 1.0:
                raise ValueError(f"config field {name} must be in [0, 1), got {p}")
        head = tuple(int(h) for h in self.head_dims)
        if not head or any(h < 1 for h in head):
            raise ValueError(f"head_dims must be positive integers, got {self.head_dims!r}")
        object.__setattr__(self, "head_dims", head)

    @property
    def input_rows(self) -> int:
        return 3 * self.sensors

    @property
    def patch_len(self) -> int:
        return self.patch_rows * self.patch_cols

    @property
    def num_patches(self) -> int:
        return self.input_rows * self.window_len // self.patch_len

    @property
    def seq_len(self) -> int:
        """Rows of the stacked patch matrix: positional + directional."""
        return 2 * self.num_patches

    @property
    def out_dim(self) -> int:
        return 3 * self.markers

    @property
    def flat_dim(self) -> int:
        return self.seq_len * self.hidden_dim

    def to_dict(self) -> dict:
        return {
            "sensors": self.sensors,
            "markers": self.markers,
            "window_len": self.window_len,
            "patch_rows": self.patch_rows,
            "patch_cols": self.patch_cols,
            "hidden_dim": self.hidden_dim,
            "num_blocks": self.num_blocks,
            "patch_mlp_dim": self.patch_mlp_dim,
            "channel_mlp_dim": self.channel_mlp_dim,
            "mix_dropout": self.mix_dropout,
            "head_dropout": self.head_dropout,
            "length_feat_dim": self.length_feat_dim,
            "head_dims": list(self.head_dims),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MixerConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        kwargs = dict(d)
        if "head_dims" in kwargs:
            kwargs["head_dims"] = tuple(kwargs["head_dims"])
        return cls(**kwargs)


@dataclass(frozen=True)
class EstimatedColonShape:
    """Model output: twelve marker positions in mm and the source time."""

    markers: np.ndarray
    t_c: int

    def __post_init__(self):
        m = np.asarray(self.markers, dtype=np.float64)
        if m.shape != (MARKER_COUNT, 3):
            raise ValueError(f"estimated shape must be {MARKER_COUNT} points, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("estimated shape contains non-finite coordinates")
        object.__setattr__(self, "markers", m)


class _MixerBlock:
    """One mixing block: patch MLP over columns, channel MLP over rows,
    both normalized first and added back through residuals."""

    def __init__(self, cfg: MixerConfig, rng: np.random.Generator):
        seq, hidden = cfg.seq_len, cfg.hidden_dim
        self.ln1 = LayerNorm(hidden)
        self.patch_fc1 = DenseLayer(seq, cfg.patch_mlp_dim, rng)
        self.patch_fc2 = DenseLayer(cfg.patch_mlp_dim, seq, rng)
        self.patch_drop = Dropout(cfg.mix_dropout)
        self.ln2 = LayerNorm(hidden)
        self.chan_fc1 = DenseLayer(hidden, cfg.channel_mlp_dim, rng)
        self.chan_fc2 = DenseLayer(cfg.channel_mlp_dim, hidden, rng)
        self.chan_drop = Dropout(cfg.mix_dropout)
        self._cache = None

    def forward(self, x: np.ndarray, train: bool = False, rng=None) -> np.ndarray:
        batch, seq, hidden = x.shape
        n1 = self.ln1.forward(x.reshape(batch * seq, hidden)).reshape(batch, seq, hidden)
        cols = n1.transpose(1, 0, 2).reshape(seq, batch * hidden)
        p_pre = self.patch_fc1.forward(cols)
        p_act = self.patch_drop.forward(gelu(p_pre), train, rng)
        mixed = self.patch_fc2.forward(p_act)
        u = x + mixed.reshape(seq, batch, hidden).transpose(1, 0, 2)
        n2 = self.ln2.forward(u.reshape(batch * seq, hidden))
        c_pre = self.chan_fc1.forward(n2.T)
        c_act = self.chan_drop.forward(gelu(c_pre), train, rng)
        rows = self.chan_fc2.forward(c_act)
        out = u + rows.T.reshape(batch, seq, hidden)
        self._cache = (p_pre, c_pre, batch, seq, hidden)
        return out

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("block backward called before forward")
        p_pre, c_pre, batch, seq, hidden = self._cache
        d_rows = self.chan_fc2.backward(d_out.reshape(batch * seq, hidden).T)
        d_rows = self.chan_drop.backward(d_rows) * gelu_grad(c_pre)
        d_n2 = self.chan_fc1.backward(d_rows).T
        d_u = d_out + self.ln2.backward(d_n2).reshape(batch, seq, hidden)
        d_mixed = d_u.transpose(1, 0, 2).reshape(seq, batch * hidden)
        d_cols = self.patch_fc2.backward(d_mixed)
        d_cols = self.patch_drop.backward(d_cols) * gelu_grad(p_pre)
        d_n1 = self.patch_fc1.backward(d_cols).reshape(seq, batch, hidden).transpose(1, 0, 2)
        return d_u + self.ln1.backward(d_n1.reshape(batch * seq, hidden)).reshape(batch, seq, hidden)

    def layers(self) -> dict:
        return {
            "ln1.gain": (self.ln1, "gain"),
            "ln1.bias": (self.ln1, "bias"),
            "patch.w1": (self.patch_fc1, "w"),
            "patch.b1": (self.patch_fc1, "b"),
            "patch.w2": (self.patch_fc2, "w"),
            "patch.b2": (self.patch_fc2, "b"),
            "ln2.gain": (self.ln2, "gain"),
            "ln2.bias": (self.ln2, "bias"),
            "channel.w3": (self.chan_fc1, "w"),
            "channel.b3": (self.chan_fc1, "b"),
            "channel.w4": (self.chan_fc2, "w"),
            "channel.b4": (self.chan_fc2, "b"),
        }


class ColonShapeMixer:
    """The full estimator: patch embedding, mixing blocks, length fusion,
    and the fully connected head. Owns its parameters and their gradients;
    normalization stats captured at construction drive denormalization."""

    def __init__(self, config: MixerConfig, stats: NormalizationStats, seed: int = 0):
        self.config = config
        self.stats = stats
        rng = np.random.default_rng(seed)
        cfg = config
        self.embed = DenseLayer(cfg.patch_len, cfg.hidden_dim, rng)
        self.blocks = [_MixerBlock(cfg, rng) for _ in range(cfg.num_blocks)]
        self.length_fc = DenseLayer(cfg.window_len, cfg.length_feat_dim, rng)
        h1, h2 = cfg.head_dims
        self.head_fc1 = DenseLayer(cfg.flat_dim + cfg.length_feat_dim, h1, rng)
        self.head_fc2 = DenseLayer(h1, h2, rng)
        self.head_out = DenseLayer(h2, cfg.out_dim, rng)
        self.head_drop1 = Dropout(cfg.head_dropout)
        self.head_drop2 = Dropout(cfg.head_dropout)
        self._tail_cache = None

    # -- parameter access ------------------------------------------------

    def _named_layers(self) -> dict:
        named = {"embed.w": (self.embed, "w"), "embed.b": (self.embed, "b")}
        for k, blk in enumerate(self.blocks):
            for sub, ref in blk.layers().items():
                named[f"block{k}.{sub}"] = ref
        named.update(
            {
                "length.w": (self.length_fc, "w"),
                "length.b": (self.length_fc, "b"),
                "head.fc1.w": (self.head_fc1, "w"),
                "head.fc1.b": (self.head_fc1, "b"),
                "head.fc2.w": (self.head_fc2, "w"),
                "head.fc2.b": (self.head_fc2, "b"),
                "head.out.w": (self.head_out, "w"),
                "head.out.b": (self.head_out, "b"),
            }
        )
        return named

    def params(self) -> dict:
        """Live references to every parameter array, by unique name."""
        return {name: getattr(layer, attr) for name, (layer, attr) in self._named_layers().items()}

    def grads(self) -> dict:
        """Live references to the matching gradient accumulators."""
        return {
            name: getattr(layer, f"{attr}_grad")
            for name, (layer, attr) in self._named_layers().items()
        }

    def param_count(self) -> int:
        return sum(p.size for p in self.params().values())

    def zero_grad(self) -> None:
        for layer, _attr in set(self._named_layers().values()):
            layer.zero_grad()

    # -- forward / backward ----------------------------------------------

    def _check_batch(self, xi: np.ndarray, lengths: np.ndarray) -> None:
        cfg = self.config
        if xi.ndim != 3 or xi.shape[1:] != (cfg.seq_len, cfg.patch_len):
            raise ValueError(
                f"input batch must be (batch, {cfg.seq_len}, {cfg.patch_len}) for this config, got {xi.shape}"
            )
        if lengths.shape != (xi.shape[0], cfg.window_len):
            raise ValueError(
                f"length batch must be ({xi.shape[0]}, {cfg.window_len}), got {lengths.shape}"
            )

    def _embed_forward(self, xi: np.ndarray) -> np.ndarray:
        batch, seq, patch_len = xi.shape
        out = self.embed.forward(xi.reshape(batch * seq, patch_len).T)
        return out.T.reshape(batch, seq, self.config.hidden_dim)

    def _embed_backward(self, d_x: np.ndarray) -> None:
        batch, seq, hidden = d_x.shape
        self.embed.backward(d_x.reshape(batch * seq, hidden).T)

    def _tail_forward(self, x: np.ndarray, lengths: np.ndarray, train: bool, rng) -> np.ndarray:
        batch = x.shape[0]
        flat = x.reshape(batch, self.config.flat_dim)
        len_pre = self.length_fc.forward(lengths.T)
        fused = np.concatenate([flat.T, gelu(len_pre)], axis=0)
        h1 = self.head_fc1.forward(fused)
        a1 = self.head_drop1.forward(gelu(h1), train, rng)
        h2 = self.head_fc2.forward(a1)
        a2 = self.head_drop2.forward(gelu(h2), train, rng)
        self._tail_cache = (len_pre, h1, h2)
        return self.head_out.forward(a2).T

    def _tail_backward(self, d_y: np.ndarray) -> np.ndarray:
        if self._tail_cache is None:
            raise RuntimeError("tail backward called before forward")
        len_pre, h1, h2 = self._tail_cache
        d = self.head_out.backward(d_y.T)
        d = self.head_drop2.backward(d) * gelu_grad(h2)
        d = self.head_fc2.backward(d)
        d = self.head_drop1.backward(d) * gelu_grad(h1)
        d_fused = self.head_fc1.backward(d)
        flat_dim = self.config.flat_dim
        self.length_fc.backward(d_fused[flat_dim:] * gelu_grad(len_pre))
        batch = d_y.shape[0]
        return d_fused[:flat_dim].T.reshape(batch, self.config.seq_len, self.config.hidden_dim)

    def forward_batch(
        self,
        xi: np.ndarray,
        lengths: np.ndarray,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> np.ndarray:
        """Run a batch through the network; returns (batch, 3M) normalized
        coordinates. Train mode applies dropout and needs an rng when any
        dropout rate is positive."""
        xi = np.asarray(xi, dtype=np.float64)
        lengths = np.asarray(lengths, dtype=np.float64)
        self._check_batch(xi, lengths)
        x = self._embed_forward(xi)
        for blk in self.blocks:
            x = blk.forward(x, train, rng)
        return self._tail_forward(x, lengths, train, rng)

    def backward_batch(self, d_out: np.ndarray) -> None:
        """Accumulate parameter gradients from d(loss)/d(output)."""
        d = self._tail_backward(np.asarray(d_out, dtype=np.float64))
        for blk in reversed(self.blocks):
            d = blk.backward(d)
        self._embed_backward(d)

    def forward(
        self, sample: WindowSample, train: bool = False, rng: np.random.Generator | None = None
    ) -> tuple[EstimatedColonShape, np.ndarray]:
        """Estimate the colon shape for one window sample.

        Returns the denormalized shape (mm) and the raw normalized output
        vector used by the training loss.
        """
        y = self.forward_batch(sample.xi[None, :, :], sample.lengths[None, :], train, rng)[0]
        markers = denormalize(y, self.stats, "position").reshape(self.config.markers, 3)
        return EstimatedColonShape(markers=markers, t_c=sample.t_c), y

    def estimate(self, sample: WindowSample) -> EstimatedColonShape:
        return self.forward(sample)[0]

    # -- staged finite-difference support ----------------------------------

    def _stage_of(self, tensor_name: str | None) -> int:
        """Map a parameter name to the first pipeline stage it influences:
        0 = embedding, 1..b = mixing blocks, b+1 = length encoder and head."""
        if tensor_name is None or tensor_name.startswith("embed."):
            return 0
        if tensor_name.startswith("block"):
            return int(tensor_name[5 : tensor_name.index(".")]) + 1
        return self.config.num_blocks + 1

    def fd_loss_closure(
        self, xi: np.ndarray, lengths: np.ndarray, target_norm: np.ndarray
    ) -> Callable[[str | None], float]:
        """Build an eval-mode loss function for finite-difference checks.

        The closure caches each stage's input from one clean pass, then on
        every call recomputes only from the stage owning the changed tensor
        onward. Because upstream stages cannot be affected by that tensor,
        the result is bitwise identical to a full re-evaluation.
        """
        xi = np.asarray(xi, dtype=np.float64)
        lengths = np.asarray(lengths, dtype=np.float64)
        target_norm = np.asarray(target_norm, dtype=np.float64)
        self._check_batch(xi, lengths)
        n_blocks = self.config.num_blocks
        stage_inputs: list[np.ndarray | None] = [None] * (n_blocks + 2)
        stage_inputs[0] = xi
        x = self._embed_forward(xi)
        for k, blk in enumerate(self.blocks):
            stage_inputs[k + 1] = x
            x = blk.forward(x)
        stage_inputs[n_blocks + 1] = x

        def loss_fn(changed: str | None) -> float:
            start = self._stage_of(changed)
            x = stage_inputs[start]
            if start == 0:
                x = self._embed_forward(x)
                start = 1
            for k in range(start - 1, n_blocks):
                x = self.blocks[k].forward(x)
            y = self._tail_forward(x, lengths, train=False, rng=None)
            return mse_loss(y, target_norm)[0]

        return loss_fn


# -- checkpoint I/O --------------------------------------------------------


class CheckpointError(Exception):
    """Base class for checkpoint file problems."""


class CheckpointFormatError(CheckpointError):
    """File is not a recognizable checkpoint or its header is inconsistent."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an unsupported format version."""


class CheckpointShapeError(CheckpointError):
    """A stored tensor's shape disagrees with the stored config."""


class CheckpointTruncatedError(CheckpointError):
    """File ends before all declared bytes."""


def save_checkpoint(model: ColonShapeMixer, path: str | Path) -> None:
    """Write config, normalization stats, and all named tensors to a
    self-describing binary file (little-endian float64 payload). The write
    is atomic: a temp file is renamed over the target."""
    path = Path(path)
    params = model.params()
    header = {
        "config": model.config.to_dict(),
        "format_version": CHECKPOINT_VERSION,
        "patch_order": PATCH_ORDER,
        "stats": model.stats.to_dict(),
        "tensors": [{"name": n, "shape": list(p.shape)} for n, p in params.items()],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for p in params.values():
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    os.replace(tmp, path)


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointTruncatedError(f"checkpoint truncated while reading {what}")
    return data


def load_checkpoint(path: str | Path) -> ColonShapeMixer:
    """Rebuild a model from a checkpoint file. The stored config and stats
    are restored; every tensor is validated against the config before the
    payload is accepted."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != _MAGIC:
            raise CheckpointFormatError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(
                f"{path}: unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )
        (header_len,) = struct.unpack("<Q", _read_exact(fh, 8, "header length"))
        try:
            header = json.loads(_read_exact(fh, header_len, "header"))
        except json.JSONDecodeError as exc:
            raise CheckpointFormatError(f"{path}: invalid header JSON: {exc.msg}") from exc
        try:
            config = MixerConfig.from_dict(header["config"])
            stats = NormalizationStats.from_dict(header["stats"])
            tensor_dir = header["tensors"]
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointFormatError(f"{path}: bad header: {exc}") from exc
        if header.get("patch_order") != PATCH_ORDER:
            raise CheckpointFormatError(
                f"{path}: unknown patch order {header.get('patch_order')!r}"
            )
        model = ColonShapeMixer(config, stats, seed=0)
        params = model.params()
        stored_names = [entry["name"] for entry in tensor_dir]
        if stored_names != list(params):
            raise CheckpointFormatError(
                f"{path}: tensor directory does not match the config's parameter set"
            )
        for entry in tensor_dir:
            name = entry["name"]
            expected = params[name].shape
            stored = tuple(entry["shape"])
            if stored != expected:
                raise CheckpointShapeError(
                    f"{path}: shape mismatch: {name} (expected {expected}, stored {stored})"
                )
        for name, p in params.items():
            raw = _read_exact(fh, p.size * 8, f"tensor {name}")
            p[...] = np.frombuffer(raw, dtype="<f8").reshape(p.shape)
        if fh.read(1):
            raise CheckpointFormatError(f"{path}: trailing data after last tensor")
    return model
