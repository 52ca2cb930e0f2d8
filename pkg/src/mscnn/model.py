"""Three-column multi-scale network with level-wise feature fusion.

Each column is three conv levels; every level output ``X[level][col]`` is
tapped by a local FC block giving ``Y[level][col]``. The proposed wiring
concatenates the taps of one level across columns (``W[level]``), passes each
through a fusion FC, joins them with an FC view of the raw image into ``G``
and maps ``G`` to the 2048-wide descriptor. Four ablation wirings share the
same building blocks (see ``VARIANTS``).
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .layers import BN_EPS, BN_MOMENTUM, KERNEL_SIZES, BatchNorm, Conv2d, Linear, Module
from .layers import dropout, maxpool2d, relu
from .tensor import ShapeError, Tensor, concat, flatten

VARIANTS = ("proposed", "local_only", "baseline1", "baseline2", "baseline3")

PAPER_COLUMN_STRINGS = (
    "32C2-2P2-BN-RELU-64C1-BN-RELU-256C1-2P2-BN-RELU",
    "32C1-2P2-BN-RELU-64C1-BN-RELU-256C2-2P2-BN-RELU",
    "32C1-2P2-BN-RELU-64C1-BN-RELU-256C1-2P2-BN-RELU",
)
# local FC widths, indexed [column][level]
PAPER_LOCAL_WIDTHS = ((1024, 2048, 1024), (3584, 5120, 2048), (2560, 8192, 8192))
# Latin square: every column and every level sees all of 3/5/7.
DEFAULT_KERNELS = ((3, 5, 7), (5, 7, 3), (7, 3, 5))
PAPER_LEVEL_FUSION = (3584, 8192, 5120)
PAPER_COLUMN_FUSION = (2048, 5120, 8192)
PAPER_RAW_WIDTH = 512
PAPER_FINAL_WIDTH = 2048
INPUT_SIZE = 32

_TOKEN = re.compile(r"^(?:(\d+)C(\d+)|(\d+)P(\d+)|BN|RELU)$")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LevelSpec:
    channels: int
    stride: int
    kernel: int
    pool: bool


@dataclass(frozen=True)
class ColumnSpec:
    levels: tuple[LevelSpec, ...]
    local_widths: tuple[int, ...]

    @classmethod
    def parse(cls, layers: str, kernels, local_widths) -> "ColumnSpec":
        """Build from a layer string such as ``"32C2-2P2-BN-RELU-64C1-BN-RELU-..."``.

        Each ``XCY`` token opens a new level; a following ``2P2`` pools inside it.
        """
        levels: list[dict] = []
        for token in layers.upper().split("-"):
            m = _TOKEN.match(token)
            if m is None:
                raise ConfigError(f"unrecognised layer token {token!r} in {layers!r}")
            if m.group(1):
                levels.append({"channels": int(m.group(1)), "stride": int(m.group(2)), "pool": False})
            elif m.group(3):
                if not levels:
                    raise ConfigError(f"pooling before any convolution in {layers!r}")
                if (int(m.group(3)), int(m.group(4))) != (2, 2):
                    raise ConfigError("only 2x2 pooling with stride 2 is supported")
                levels[-1]["pool"] = True
        kernels = tuple(kernels)
        if len(kernels) != len(levels):
            raise ConfigError(f"{len(levels)} levels but {len(kernels)} kernel sizes")
        return cls(
            tuple(LevelSpec(kernel=k, **lv) for lv, k in zip(levels, kernels)),
            tuple(int(w) for w in local_widths),
        )

    def to_string(self) -> str:
        parts = []
        for lv in self.levels:
            parts.append(f"{lv.channels}C{lv.stride}")
            if lv.pool:
                parts.append("2P2")
            parts += ["BN", "RELU"]
        return "-".join(parts)


@dataclass(frozen=True)
class NetworkConfig:
    variant: str = "proposed"
    columns: tuple[ColumnSpec, ...] = ()
    level_fusion: tuple[int, ...] | None = None
    column_fusion: tuple[int, ...] | None = None
    raw_width: int | None = None
    final_width: int = PAPER_FINAL_WIDTH
    num_classes: int = 10
    dropout: float = 0.5
    input_size: int = INPUT_SIZE
    dtype: str = "float64"
    bn_momentum: float = BN_MOMENTUM
    bn_eps: float = BN_EPS

    @classmethod
    def paper(
        cls,
        variant: str = "proposed",
        num_classes: int = 10,
        *,
        width_divisor: int = 1,
        channel_divisor: int = 1,
        kernels=DEFAULT_KERNELS,
        dropout: float = 0.5,
        dtype: str = "float64",
    ) -> "NetworkConfig":
        """Published layer inventory, optionally thinned for desk-scale runs.

        ``width_divisor`` divides every FC width and ``channel_divisor`` every
        conv channel count; wiring and kernel sizes are unchanged.
        """
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        fd, cd = width_divisor, channel_divisor

        def fc(w: int) -> int:
            return max(1, w // fd)

        columns = []
        for text, ks, widths in zip(PAPER_COLUMN_STRINGS, kernels, PAPER_LOCAL_WIDTHS):
            spec = ColumnSpec.parse(text, ks, [fc(w) for w in widths])
            levels = tuple(replace(lv, channels=max(1, lv.channels // cd)) for lv in spec.levels)
            columns.append(ColumnSpec(levels, spec.local_widths))
        kw: dict = {}
        if variant in ("proposed", "local_only", "baseline3"):
            kw["level_fusion"] = tuple(fc(w) for w in PAPER_LEVEL_FUSION)
        if variant == "baseline2":
            kw["column_fusion"] = tuple(fc(w) for w in PAPER_COLUMN_FUSION)
        if variant in ("proposed", "baseline2", "baseline3"):
            kw["raw_width"] = fc(PAPER_RAW_WIDTH)
        return cls(
            variant=variant,
            columns=tuple(columns),
            final_width=fc(PAPER_FINAL_WIDTH),
            num_classes=num_classes,
            dropout=dropout,
            dtype=dtype,
            **kw,
        )

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if len(self.columns) != 3:
            raise ConfigError(f"exactly 3 columns required, got {len(self.columns)}")
        for j, col in enumerate(self.columns):
            if len(col.levels) != 3 or len(col.local_widths) != 3:
                raise ConfigError(f"column {j} must have exactly 3 levels and 3 local widths")
            for lv in col.levels:
                if lv.kernel not in KERNEL_SIZES:
                    raise ConfigError(f"kernel {lv.kernel} not in {KERNEL_SIZES}")
                if lv.stride < 1 or lv.channels < 1:
                    raise ConfigError(f"bad level {lv}")
            if min(col.local_widths) < 1:
                raise ConfigError("local FC widths must be positive")
        if self.num_classes < 2:
            raise ConfigError("at least two classes are required")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.input_size != INPUT_SIZE:
            raise ConfigError(f"input size must be {INPUT_SIZE}")
        if self.final_width < 1:
            raise ConfigError("final width must be positive")
        needs_level = self.variant in ("proposed", "local_only", "baseline3")
        needs_column = self.variant == "baseline2"
        needs_raw = self.variant in ("proposed", "baseline2", "baseline3")
        for name, needed, value in (
            ("level_fusion", needs_level, self.level_fusion),
            ("column_fusion", needs_column, self.column_fusion),
        ):
            if needed and (value is None or len(value) != 3 or min(value) < 1):
                raise ConfigError(f"variant {self.variant} needs three positive {name} widths")
            if not needed and value is not None:
                raise ConfigError(f"variant {self.variant} does not use {name}")
        if needs_raw and (self.raw_width is None or self.raw_width < 1):
            raise ConfigError(f"variant {self.variant} needs a raw-image FC width")
        if not needs_raw and self.raw_width is not None:
            raise ConfigError(f"variant {self.variant} has no raw-image tap")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["columns"] = tuple(
            ColumnSpec(tuple(LevelSpec(**lv) for lv in c["levels"]), tuple(c["local_widths"]))
            for c in d["columns"]
        )
        for key in ("level_fusion", "column_fusion"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class FeatureBundle:
    """Intermediate taps of one forward pass; ``X``/``Y`` are indexed [level][column].

    Entries absent from a wiring are ``None``. ``fused`` lists the blocks
    concatenated into ``G`` in order (raw tap first where present).
    """

    X: list[list[Tensor | None]]
    Y: list[list[Tensor | None]]
    W: list[Tensor | None]
    F: dict[str, Tensor] = field(default_factory=dict)
    G: Tensor | None = None
    descriptor: Tensor | None = None
    logits: Tensor | None = None

    def widths(self) -> dict:
        def w(t):
            return None if t is None else int(np.prod(t.shape[1:]))

        return {
            "X": [[w(t) for t in row] for row in self.X],
            "Y": [[w(t) for t in row] for row in self.Y],
            "W": [w(t) for t in self.W],
            "F": {k: w(v) for k, v in self.F.items()},
            "G": w(self.G),
            "descriptor": w(self.descriptor),
        }


class ConvLevel(Module):
    """conv -> [2x2 max-pool] -> BN -> ReLU."""

    def __init__(self, in_channels: int, spec: LevelSpec, rng, dtype, momentum, eps):
        self.conv = Conv2d(in_channels, spec.channels, spec.kernel, spec.stride, rng, dtype)
        self.pool = spec.pool
        self.bn = BatchNorm(spec.channels, momentum, eps, dtype)
        self.frozen = False

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        h = self.conv(x)
        if self.pool:
            h = maxpool2d(h)
        return relu(self.bn(h, train and not self.frozen))


class FCBlock(Module):
    """linear -> BN -> ReLU -> dropout."""

    def __init__(self, in_features: int, out_features: int, p: float, rng, dtype, momentum, eps):
        self.fc = Linear(in_features, out_features, rng, dtype)
        self.bn = BatchNorm(out_features, momentum, eps, dtype)
        self.p = p

    def __call__(self, x: Tensor, train: bool, rng) -> Tensor:
        return dropout(relu(self.bn(self.fc(x), train)), self.p, train, rng)


class Column(Module):
    def __init__(self, spec: ColumnSpec, in_channels: int, in_size: int, cfg: NetworkConfig,
                 rng, local_levels, skip: bool):
        dt, mo, ep = np.dtype(cfg.dtype), cfg.bn_momentum, cfg.bn_eps
        self.skip = skip
        self.levels: list[ConvLevel] = []
        self.local: list[FCBlock | None] = []
        self.shapes: list[tuple[int, int, int]] = []
        channels, size = in_channels, in_size
        for i, lv in enumerate(spec.levels):
            if skip and i == 2:
                channels = spec.levels[0].channels + spec.levels[1].channels
            self.levels.append(ConvLevel(channels, lv, rng, dt, mo, ep))
            size = -(-size // lv.stride)
            if lv.pool:
                size = -(-size // 2)
            channels = lv.channels
            self.shapes.append((channels, size, size))
        for i, width in enumerate(spec.local_widths):
            if i in local_levels:
                c, h, w = self.shapes[i]
                self.local.append(FCBlock(c * h * w, width, cfg.dropout, rng, dt, mo, ep))
            else:
                self.local.append(None)

    def conv_path(self, x: Tensor, train: bool) -> list[Tensor]:
        x1 = self.levels[0](x, train)
        x2 = self.levels[1](x1, train)
        if self.skip:
            a = x1
            while a.shape[2] > x2.shape[2] or a.shape[3] > x2.shape[3]:
                a = maxpool2d(a)
            b = x2
            while b.shape[2] > a.shape[2] or b.shape[3] > a.shape[3]:
                b = maxpool2d(b)
            x3 = self.levels[2](concat([a, b], axis=1), train)
        else:
            x3 = self.levels[2](x2, train)
        return [x1, x2, x3]

    def conv_modules(self) -> list[ConvLevel]:
        return self.levels


class Network(Module):
    def __init__(self, cfg: NetworkConfig, seed: int):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        dt, mo, ep = np.dtype(cfg.dtype), cfg.bn_momentum, cfg.bn_eps
        v = cfg.variant
        local_levels = (2,) if v == "local_only" else (0, 1, 2)
        self.columns = [
            Column(spec, 1, cfg.input_size, cfg, rng, local_levels, skip=(v == "baseline3"))
            for spec in cfg.columns
        ]
        p = cfg.dropout
        # widths[level][column]
        lw = [[c.local_widths[i] for c in cfg.columns] for i in range(3)]
        self.level_fusion: list[FCBlock | None] = [None, None, None]
        self.column_fusion: list[FCBlock] = []
        self.raw: FCBlock | None = None
        if cfg.raw_width is not None:
            self.raw = FCBlock(cfg.input_size**2, cfg.raw_width, p, rng, dt, mo, ep)
        if v in ("proposed", "baseline3"):
            self.level_fusion = [
                FCBlock(sum(lw[i]), cfg.level_fusion[i], p, rng, dt, mo, ep) for i in range(3)
            ]
            g_width = cfg.raw_width + sum(cfg.level_fusion)
        elif v == "local_only":
            self.level_fusion[2] = FCBlock(sum(lw[2]), cfg.level_fusion[2], p, rng, dt, mo, ep)
            g_width = cfg.level_fusion[2]
        elif v == "baseline1":
            g_width = sum(sum(row) for row in lw)
        else:
            self.column_fusion = [
                FCBlock(sum(cfg.columns[j].local_widths), cfg.column_fusion[j], p, rng, dt, mo, ep)
                for j in range(3)
            ]
            g_width = cfg.raw_width + sum(cfg.column_fusion)
        self.g_width = g_width
        # the last FC carries no dropout
        self.final = FCBlock(g_width, cfg.final_width, 0.0, rng, dt, mo, ep)
        self.classifier = Linear(cfg.final_width, cfg.num_classes, rng, dt)

    @property
    def variant(self) -> str:
        return self.cfg.variant

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def conv_parameters(self) -> list[Tensor]:
        return [p for col in self.columns for lv in col.levels for p in lv.parameters()]

    def freeze_convs(self, frozen: bool = True) -> None:
        """Fix conv levels: no gradients, BN uses running statistics."""
        for col in self.columns:
            for lv in col.levels:
                lv.frozen = frozen
                lv.set_requires_grad(not frozen)

    def forward(self, x: Tensor, train: bool = False, rng: np.random.Generator | None = None) -> FeatureBundle:
        if x.ndim != 4 or x.shape[1:] != (1, self.cfg.input_size, self.cfg.input_size):
            raise ShapeError(
                f"expected input (b, 1, {self.cfg.input_size}, {self.cfg.input_size}), got {x.shape}"
            )
        if train and rng is None:
            rng = np.random.default_rng(0)
        v = self.variant
        X = [[None] * 3 for _ in range(3)]
        Y = [[None] * 3 for _ in range(3)]
        for j, col in enumerate(self.columns):
            if v == "local_only":
                # deepest path only
                h = x
                for lv in col.levels:
                    h = lv(h, train)
                X[2][j] = h
            else:
                for i, h in enumerate(col.conv_path(x, train)):
                    X[i][j] = h
            for i in range(3):
                if col.local[i] is not None:
                    Y[i][j] = col.local[i](flatten(X[i][j]), train, rng)
        W: list[Tensor | None] = [None, None, None]
        F: dict[str, Tensor] = {}
        if self.raw is not None:
            F["F0"] = self.raw(flatten(x), train, rng)
        if v in ("proposed", "baseline3", "local_only"):
            for i in range(3):
                if self.level_fusion[i] is None:
                    continue
                W[i] = concat(Y[i], axis=1)
                F[f"F{i + 1}"] = self.level_fusion[i](W[i], train, rng)
            G = concat(list(F.values()), axis=1)
        elif v == "baseline1":
            G = concat([Y[i][j] for j in range(3) for i in range(3)], axis=1)
        else:
            for j in range(3):
                F[f"C{j + 1}"] = self.column_fusion[j](
                    concat([Y[i][j] for i in range(3)], axis=1), train, rng
                )
            G = concat(list(F.values()), axis=1)
        descriptor = self.final(G, train, rng)
        logits = self.classifier(descriptor)
        return FeatureBundle(X=X, Y=Y, W=W, F=F, G=G, descriptor=descriptor, logits=logits)

    def forward_column(self, x: Tensor, column: int, train: bool = False, rng=None) -> Tensor:
        """Isolated path of one column up to its level-3 local FC output."""
        col = self.columns[column]
        h = col.conv_path(x, train)[2]
        if col.local[2] is None:
            raise ConfigError("column has no level-3 local FC")
        return col.local[2](flatten(h), train, rng)

    def __call__(self, x: Tensor, train: bool = False, rng=None) -> Tensor:
        return self.forward(x, train, rng).logits


def build_network(cfg: NetworkConfig, seed: int = 0) -> Network:
    return Network(cfg, seed)


def forward(net: Network, batch: Tensor, train: bool = False, rng=None) -> FeatureBundle:
    return net.forward(_as_tensor(batch, net), train, rng)


def forward_local_only(net: Network, batch: Tensor, train: bool = False, rng=None) -> Tensor:
    if net.variant != "local_only":
        raise ConfigError(f"network was built as {net.variant!r}, not 'local_only'")
    return net.forward(_as_tensor(batch, net), train, rng).logits


def forward_baseline(net: Network, batch: Tensor, variant: str, train: bool = False, rng=None) -> Tensor:
    if variant not in ("baseline1", "baseline2", "baseline3"):
        raise ConfigError(f"{variant!r} is not a baseline variant")
    if net.variant != variant:
        raise ConfigError(f"network was built as {net.variant!r}, not {variant!r}")
    return net.forward(_as_tensor(batch, net), train, rng).logits


def extract_descriptor(net: Network, images) -> np.ndarray:
    """Eval-mode descriptor(s) for one image (h, w) or a batch (b, 1, h, w)."""
    arr = images.data if isinstance(images, Tensor) else np.asarray(images)
    single = arr.ndim == 2
    if single:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[:, None]
    out = net.forward(_as_tensor(arr, net), train=False).descriptor.data
    return out[0] if single else out


def _as_tensor(batch, net: Network) -> Tensor:
    if isinstance(batch, Tensor):
        return batch
    return Tensor(np.asarray(batch), dtype=np.dtype(net.cfg.dtype))
