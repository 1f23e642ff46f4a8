"""CSRN network: learned sampling, progressive initial reconstruction and
recurrent residual reconstruction.

The network has three parts. Sampling applies bias-free BxB stride-B
convolutions, one per measurement group, so it is exactly a learned block
sensing matrix. Initial reconstruction maps each measurement group back to
full resolution through a basic recovery block and fuses groups pairwise.
Residual reconstruction compresses the features, runs N recurrent residual
fusion modules and upsamples back to a one-channel residual image that is
added to the initial reconstruction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .tensor import (
    ConvSpec,
    DimensionError,
    GeometryError,
    Tape,
    Tensor,
    add,
    concat_channels,
    conv2d,
    pixel_shuffle,
    relu,
)


class ConfigError(ValueError):
    """Model configuration violates a structural constraint."""


@dataclass(frozen=True)
class CsrnConfig:
    """Hyperparameters plus the variant switches for the ablation models."""

    ratio: float
    block_size: int = 32
    filters: int = 32
    rrfm_count: int = 5
    recurrences: int = 3
    progressive_init: bool = True
    use_rrfm: bool = True
    use_fcm: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        r, b, m = self.ratio, self.block_size, self.filters
        if not 0.0 < r <= 1.0:
            raise ConfigError(f"sample ratio must be in (0, 1], got {r}")
        if b < 2:
            raise ConfigError(f"block size must be >= 2, got {b}")
        if m % 2:
            raise ConfigError(f"filter count must be even, got {m}")
        if self.use_fcm and m % 4:
            raise ConfigError(f"filter count must be divisible by 4 with the FCM, got {m}")
        if self.rrfm_count < 0 or self.recurrences < 1:
            raise ConfigError("rrfm_count must be >= 0 and recurrences >= 1")
        if r >= 0.1:
            tenths = round(10 * r)
            if abs(10 * r - tenths) > 1e-9:
                raise ConfigError(
                    f"ratios >= 0.1 must be multiples of 0.1 (the measurement "
                    f"grouping rule splits the sensing matrix into 0.1-ratio "
                    f"slices), got {r}"
                )
            if int(0.1 * b * b) < 1:
                raise ConfigError(f"block size {b} gives an empty 0.1-ratio group")
        elif int(r * b * b) < 1:
            raise ConfigError(f"ratio {r} with block size {b} yields zero measurements")

    def group_channels(self) -> list[int]:
        """Measurement plan: channel count of every sampling group."""
        b2 = self.block_size * self.block_size
        if self.ratio < 0.1:
            return [int(self.ratio * b2)]
        return [int(0.1 * b2)] * round(10 * self.ratio)

    # The two pixel-shuffle stages of a basic recovery block multiply to the
    # block size. At the default B=32 that is 4 then 8; for smaller test-scale
    # blocks the second stage absorbs as much as it can.
    @property
    def shuffle_factors(self) -> tuple[int, int]:
        b = self.block_size
        if b % 8 == 0:
            return b // 8, 8
        return 1, b

    @property
    def init_feature_channels(self) -> int:
        """Channels of one group's full-resolution feature map."""
        u2 = self.shuffle_factors[1]
        c = 16 * self.filters
        if c % (u2 * u2):
            raise ConfigError(
                f"16*filters = {c} not divisible by {u2}^2; pick filters/block size "
                "so the second recovery shuffle divides evenly"
            )
        return c // (u2 * u2)

    @property
    def fused_feature_channels(self) -> int:
        """Channels of the feature map handed to the residual sub-network."""
        if not self.progressive_init or len(self.group_channels()) == 1:
            return self.init_feature_channels
        return self.filters // 2


@dataclass(frozen=True)
class LayerDef:
    name: str
    spec: ConvSpec
    in_channels: int

    @property
    def part(self) -> str:
        return self.name.split(".", 1)[0]

    @property
    def weight_count(self) -> int:
        return self.spec.out_channels * self.in_channels * self.spec.kernel ** 2

    @property
    def bias_count(self) -> int:
        return self.spec.out_channels if self.spec.bias_enabled else 0


def layer_table(config: CsrnConfig) -> list[LayerDef]:
    """Every convolutional layer of the model, in forward order."""
    m, b = config.filters, config.block_size
    u1, u2 = config.shuffle_factors
    feat = config.init_feature_channels
    groups = config.group_channels()
    layers: list[LayerDef] = []

    def conv(name, out_c, in_c, k, s=1, p=0, bias=True):
        layers.append(LayerDef(name, ConvSpec(out_c, k, s, p, bias), in_c))

    for k, ck in enumerate(groups, start=1):
        conv(f"sampling.g{k}.conv", ck, 1, b, s=b, bias=False)

    if config.progressive_init:
        for k, ck in enumerate(groups, start=1):
            conv(f"initial.g{k}.pre", 8 * m, ck, 1)
            conv(f"initial.g{k}.mid", m // 2, 8 * m // (u1 * u1), 3, p=1)
            conv(f"initial.g{k}.post", 16 * m, m // 2, 1)
        for k in range(2, len(groups) + 1):
            prev = feat if k == 2 else m // 2
            conv(f"initial.fuse{k}", m // 2, prev + feat, 1)
        conv("initial.head", 1, config.fused_feature_channels, 3, p=1)
    else:
        conv("initial.map", b * b, sum(groups), 1)
        conv("initial.iface", feat, 1, 3, p=1)

    fi = config.fused_feature_channels
    if config.use_fcm:
        conv("residual.fcm", m, fi, 2, s=2)
    else:
        conv("residual.fcm", m, fi, 3, p=1)
    for i in range(1, config.rrfm_count + 1):
        conv(f"residual.rrfm{i}.conv1", m, m, 3, p=1)
        conv(f"residual.rrfm{i}.conv2", m, m, 3, p=1)
        if config.use_rrfm:
            conv(f"residual.rrfm{i}.fuse", m, config.recurrences * m, 1)
    conv("residual.ffm.conv1", m, m, 3, p=1)
    conv("residual.ffm.out", 1, m // 4 if config.use_fcm else m, 3, p=1)
    return layers


ParamStore = dict[str, Tensor]


@dataclass
class MeasurementSet:
    """K groups of measurement maps, the codec payload."""

    groups: list[Tensor]
    ratio: float
    block_size: int

    def __post_init__(self):
        if not self.groups:
            raise DimensionError("a measurement set needs at least one group")

    @property
    def channel_counts(self) -> list[int]:
        return [g.shape[1] for g in self.groups]


def count_params(config: CsrnConfig) -> dict[str, int]:
    """Exact weight+bias scalar counts per network part.

    ``reconstruction_total`` excludes the sampling layers, matching how
    reconstruction-side parameter budgets are usually compared.
    """
    totals = {"sampling": 0, "initial": 0, "residual": 0}
    for layer in layer_table(config):
        totals[layer.part] += layer.weight_count + layer.bias_count
    totals["reconstruction_total"] = totals["initial"] + totals["residual"]
    return totals


class Csrn:
    """A built CSRN model: a config plus named parameter tensors.

    Parameters are immutable during inference; training swaps in updated
    tensors through the optimizer. Forward methods accept an optional ``params``
    mapping so a training step can run on tape-watched copies of the weights.
    """

    def __init__(self, config: CsrnConfig, params: ParamStore):
        self.config = config
        self.layers = {l.name: l for l in layer_table(config)}
        missing = set(self.layers) - {n.rsplit(".", 1)[0] for n in params}
        if missing:
            raise ConfigError(f"parameter store is missing layers: {sorted(missing)}")
        self.params = params

    @classmethod
    def build(cls, config: CsrnConfig, seed: int = 42, dtype=np.float32) -> "Csrn":
        from .optim import init_params

        return cls(config, init_params(config, seed, dtype=dtype))

    # -- parameter access -------------------------------------------------

    def lift(self, tape: Tape) -> ParamStore:
        """Watched copies of every parameter, for one training step."""
        return {name: tape.watch(t) for name, t in self.params.items()}

    def _conv(self, name: str, x: Tensor, params: ParamStore | None) -> Tensor:
        store = params if params is not None else self.params
        layer = self.layers[name]
        weight = store[name + ".weight"]
        bias = store.get(name + ".bias") if layer.spec.bias_enabled else None
        return conv2d(x, weight, bias, layer.spec)

    def count_params(self) -> dict[str, int]:
        return count_params(self.config)

    # -- sampling ---------------------------------------------------------

    def sample(self, x: Tensor, params: ParamStore | None = None) -> MeasurementSet:
        n, c, h, w = x.shape
        if c != 1:
            raise DimensionError(f"sampling expects 1-channel input, got {c}")
        b = self.config.block_size
        if h % b or w % b:
            raise GeometryError(f"spatial dims {h}x{w} not divisible by block size {b}")
        groups = [
            self._conv(f"sampling.g{k}.conv", x, params)
            for k in range(1, len(self.config.group_channels()) + 1)
        ]
        return MeasurementSet(groups, self.config.ratio, b)

    # -- initial reconstruction -------------------------------------------

    def _recover_group(self, k: int, fm_k: Tensor, params) -> Tensor:
        u1, u2 = self.config.shuffle_factors
        y = self._conv(f"initial.g{k}.pre", fm_k, params)
        y = pixel_shuffle(y, u1)
        y = self._conv(f"initial.g{k}.mid", y, params)
        y = self._conv(f"initial.g{k}.post", y, params)
        return pixel_shuffle(y, u2)

    def initial_reconstruct(
        self, fm: MeasurementSet, params: ParamStore | None = None
    ) -> tuple[Tensor, Tensor]:
        cfg = self.config
        expected = cfg.group_channels()
        if fm.channel_counts != expected:
            raise DimensionError(
                f"measurement groups {fm.channel_counts} do not match the "
                f"config plan {expected}"
            )
        if not cfg.progressive_init:
            return self.simple_initial_reconstruct(fm, params)
        fi = self._recover_group(1, fm.groups[0], params)
        for k in range(2, len(fm.groups) + 1):
            gk = self._recover_group(k, fm.groups[k - 1], params)
            fi = self._conv(f"initial.fuse{k}", concat_channels([fi, gk]), params)
        x_i = self._conv("initial.head", fi, params)
        return x_i, fi

    def simple_initial_reconstruct(
        self, fm: MeasurementSet, params: ParamStore | None = None
    ) -> tuple[Tensor, Tensor]:
        """Ablation: one dimensional-mapping conv instead of the hierarchy.

        A small interface conv regenerates a feature map from the image so the
        residual sub-network keeps the same input contract.
        """
        if self.config.progressive_init:
            raise ConfigError("model was built with progressive initial reconstruction")
        stacked = concat_channels(fm.groups) if len(fm.groups) > 1 else fm.groups[0]
        y = self._conv("initial.map", stacked, params)
        x_i = pixel_shuffle(y, self.config.block_size)
        fi = self._conv("initial.iface", x_i, params)
        return x_i, fi

    # -- residual reconstruction ------------------------------------------

    def compress_features(self, fi: Tensor, params: ParamStore | None = None) -> Tensor:
        if self.config.use_fcm and (fi.shape[2] % 2 or fi.shape[3] % 2):
            raise GeometryError(f"feature dims {fi.shape[2:]} must be even to compress")
        return relu(self._conv("residual.fcm", fi, params))

    def rrfm_forward(
        self, index: int, f: Tensor, params: ParamStore | None = None,
        recurrences: int | None = None,
    ) -> Tensor:
        """One RRFM: a shared-weight residual block applied T times, the T
        intermediate outputs concatenated and fused by a 1x1 conv."""
        if f.shape[1] != self.config.filters:
            raise DimensionError(
                f"RRFM expects {self.config.filters} channels, got {f.shape[1]}"
            )
        t_steps = recurrences if recurrences is not None else self.config.recurrences

        def block(z: Tensor) -> Tensor:
            y = relu(self._conv(f"residual.rrfm{index}.conv1", z, params))
            y = self._conv(f"residual.rrfm{index}.conv2", y, params)
            return add(z, y)

        if not self.config.use_rrfm:
            return block(f)
        states = []
        cur = f
        for _ in range(t_steps):
            cur = block(cur)
            states.append(cur)
        return self._conv(f"residual.rrfm{index}.fuse", concat_channels(states), params)

    def extract_features(self, fc: Tensor, params: ParamStore | None = None) -> Tensor:
        fh = fc
        for i in range(1, self.config.rrfm_count + 1):
            fh = self.rrfm_forward(i, fh, params)
        return fh

    def fuse_residual(
        self, fc: Tensor, fh: Tensor, params: ParamStore | None = None
    ) -> Tensor:
        if fc.shape != fh.shape:
            raise DimensionError(f"FFM inputs differ: {fc.shape} vs {fh.shape}")
        y = relu(self._conv("residual.ffm.conv1", add(fc, fh), params))
        if self.config.use_fcm:
            y = pixel_shuffle(y, 2)
        return self._conv("residual.ffm.out", y, params)

    # -- full pipeline -----------------------------------------------------

    def reconstruct(
        self, fm: MeasurementSet, params: ParamStore | None = None
    ) -> tuple[Tensor, Tensor]:
        """Initial + residual reconstruction from measurements."""
        x_i, fi = self.initial_reconstruct(fm, params)
        fc = self.compress_features(fi, params)
        fh = self.extract_features(fc, params)
        x_r = self.fuse_residual(fc, fh, params)
        return x_i, add(x_i, x_r)

    def forward(self, x: Tensor, params: ParamStore | None = None) -> tuple[Tensor, Tensor]:
        fm = self.sample(x, params)
        return self.reconstruct(fm, params)

    def astype(self, dtype) -> "Csrn":
        return Csrn(self.config, {n: t.astype(dtype) for n, t in self.params.items()})
