"""Generator and discriminator MLPs, initialisation, and checkpoint files.

Weights are stored as ``fan_in x fan_out`` so a layer is ``x @ W + b`` on
row-batched inputs.
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from riskgen import autodiff as ad
from riskgen.errors import CheckpointError, CheckpointVersionError, DomainError
from riskgen.neuralsort import DEFAULT_TAU, SortConfig
from riskgen.rng import stream
from riskgen.scorefn import TailEstimate

GEN_HIDDEN = (128, 256, 512, 1024)
DISC_HIDDEN = (256, 128)
NOISE_DIM = 1000
PNL_SAMPLES = 1000


@dataclass(frozen=True)
class NoiseSpec:
    """Generator input noise; student-t draws are raw (not rescaled to unit variance)."""

    dim: int = NOISE_DIM
    dist: str = "student_t"
    nu: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1:
            raise DomainError(f"noise dimension must be >= 1, got {self.dim}")
        if self.dist not in ("student_t", "uniform"):
            raise DomainError(f"unknown noise distribution {self.dist!r}")
        if self.dist == "student_t" and not self.nu > 2:
            raise DomainError(f"student_t noise needs nu > 2, got {self.nu}")


@dataclass
class GeneratorParams:
    weights: list
    biases: list
    bn_gamma: list
    bn_beta: list
    bn_state: list  # dicts with running_mean / running_var per hidden layer
    n_assets: int
    n_steps: int
    leaky_slope: float = ad.DEFAULT_LEAKY_SLOPE

    @property
    def widths(self):
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def noise_dim(self) -> int:
        return self.weights[0].shape[0]

    def arrays(self) -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"g.W{i}"] = w
            out[f"g.b{i}"] = b
        for i, (ga, be, st) in enumerate(zip(self.bn_gamma, self.bn_beta, self.bn_state)):
            out[f"g.bn{i}.gamma"] = ga
            out[f"g.bn{i}.beta"] = be
            out[f"g.bn{i}.mean"] = st["running_mean"]
            out[f"g.bn{i}.var"] = st["running_var"]
        return out

    def trainable(self) -> list:
        """Trainable arrays in a fixed order (updated in place by optimisers)."""
        return [*self.weights, *self.biases, *self.bn_gamma, *self.bn_beta]

    def copy(self) -> "GeneratorParams":
        return GeneratorParams(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            bn_gamma=[g.copy() for g in self.bn_gamma],
            bn_beta=[b.copy() for b in self.bn_beta],
            bn_state=[{k: v.copy() for k, v in s.items()} for s in self.bn_state],
            n_assets=self.n_assets,
            n_steps=self.n_steps,
            leaky_slope=self.leaky_slope,
        )


@dataclass
class DiscriminatorParams:
    weights: list
    biases: list
    n_levels: int = 1
    temperature: float = DEFAULT_TAU
    leaky_slope: float = ad.DEFAULT_LEAKY_SLOPE

    @property
    def widths(self):
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def n_samples(self) -> int:
        return self.weights[0].shape[0]

    def arrays(self) -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"d.W{i}"] = w
            out[f"d.b{i}"] = b
        return out

    def trainable(self) -> list:
        return [*self.weights, *self.biases]

    def copy(self) -> "DiscriminatorParams":
        return DiscriminatorParams(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            n_levels=self.n_levels,
            temperature=self.temperature,
            leaky_slope=self.leaky_slope,
        )


@dataclass(frozen=True)
class Architecture:
    n_assets: int = 5
    n_steps: int = 100
    noise_dim: int = NOISE_DIM
    gen_hidden: tuple = GEN_HIDDEN
    n_samples: int = PNL_SAMPLES
    disc_hidden: tuple = DISC_HIDDEN
    n_levels: int = 1
    temperature: float = DEFAULT_TAU
    leaky_slope: float = ad.DEFAULT_LEAKY_SLOPE

    def __post_init__(self):
        if min(self.n_assets, self.n_steps, self.noise_dim, self.n_samples, self.n_levels) < 1:
            raise DomainError("architecture sizes must be positive")
        SortConfig(self.temperature)

    @property
    def gen_widths(self):
        return (self.noise_dim, *self.gen_hidden, self.n_assets * self.n_steps)

    @property
    def disc_widths(self):
        return (self.n_samples, *self.disc_hidden, 2 * self.n_levels)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["gen_hidden"] = list(self.gen_hidden)
        d["disc_hidden"] = list(self.disc_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        d = dict(d)
        for key in ("gen_hidden", "disc_hidden"):
            if key in d:
                d[key] = tuple(d[key])
        try:
            return cls(**d)
        except TypeError as exc:
            raise DomainError(f"bad architecture: {exc}") from exc


def _xavier(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_generator(arch: Architecture, seed: int) -> GeneratorParams:
    rng = stream(seed, "init.generator")
    widths = arch.gen_widths
    weights = [_xavier(rng, a, b) for a, b in zip(widths[:-1], widths[1:])]
    biases = [np.zeros((1, b)) for b in widths[1:]]
    hidden = widths[1:-1]
    return GeneratorParams(
        weights=weights,
        biases=biases,
        bn_gamma=[np.ones((1, h)) for h in hidden],
        bn_beta=[np.zeros((1, h)) for h in hidden],
        bn_state=[{"running_mean": np.zeros((1, h)), "running_var": np.ones((1, h))}
                  for h in hidden],
        n_assets=arch.n_assets,
        n_steps=arch.n_steps,
        leaky_slope=arch.leaky_slope,
    )


def init_discriminator(arch: Architecture, seed: int) -> DiscriminatorParams:
    rng = stream(seed, "init.discriminator")
    widths = arch.disc_widths
    return DiscriminatorParams(
        weights=[_xavier(rng, a, b) for a, b in zip(widths[:-1], widths[1:])],
        biases=[np.zeros((1, b)) for b in widths[1:]],
        n_levels=arch.n_levels,
        temperature=arch.temperature,
        leaky_slope=arch.leaky_slope,
    )


def init_params(arch: Architecture, seed: int):
    """Xavier-uniform weights and zero biases for both networks."""
    return init_generator(arch, seed), init_discriminator(arch, seed)


# ---------------------------------------------------------------------------
# forward graphs


def _leaves(tape, arrays, trainable, leaves):
    if leaves is not None:
        if len(leaves) != len(arrays):
            raise DomainError(f"expected {len(arrays)} leaf nodes, got {len(leaves)}")
        return list(leaves)
    leaf = tape.param if trainable else tape.constant
    return [leaf(a) for a in arrays]


def generator_graph(tape: ad.Tape, params: GeneratorParams, z: ad.Node, train: bool,
                    trainable: bool = True, leaves=None):
    """Build the generator on ``tape``; returns (output n x (M*T), leaf nodes).

    Hidden layers are linear -> batch norm -> leaky ReLU; the output layer is
    linear. Training mode normalises with batch statistics and updates the
    running statistics in ``params``. ``leaves`` substitutes existing nodes
    for the trainable arrays, in :meth:`GeneratorParams.trainable` order.
    """
    if z.shape[1] != params.noise_dim:
        raise DomainError(f"noise width {z.shape[1]} != {params.noise_dim}")
    nodes = _leaves(tape, params.trainable(), trainable, leaves)
    k = len(params.weights)
    W, b = nodes[:k], nodes[k:2 * k]
    gam, bet = nodes[2 * k:3 * k - 1], nodes[3 * k - 1:]
    h = z
    last = len(W) - 1
    for i in range(len(W)):
        h = ad.add_bias(ad.matmul(h, W[i]), b[i])
        if i < last:
            h = ad.batchnorm(h, gam[i], bet[i], params.bn_state[i], train=train)
            h = ad.leaky_relu(h, params.leaky_slope)
    return h, nodes


def generator_forward(params: GeneratorParams, z, mode: str = "eval") -> np.ndarray:
    """Generated increments with shape (batch, M, T)."""
    if mode not in ("train", "eval"):
        raise DomainError(f"mode must be 'train' or 'eval', got {mode!r}")
    z = np.atleast_2d(np.asarray(z, float))
    tape = ad.Tape()
    out, _ = generator_graph(tape, params, tape.constant(z), train=mode == "train",
                             trainable=False)
    return out.value.reshape(z.shape[0], params.n_assets, params.n_steps)


def discriminator_graph(tape: ad.Tape, params: DiscriminatorParams, pnl: ad.Node,
                        trainable: bool = True, temperature: float = None, leaves=None):
    """Soft-sort each row of ``pnl`` (K x n) then apply the MLP; K x (2 * levels)."""
    if pnl.shape[1] != params.n_samples:
        raise DomainError(f"expected {params.n_samples} PnL samples, got {pnl.shape[1]}")
    tau = params.temperature if temperature is None else temperature
    nodes = _leaves(tape, params.trainable(), trainable, leaves)
    k = len(params.weights)
    W, b = nodes[:k], nodes[k:]
    h = ad.soft_sort(pnl, tau)
    last = len(W) - 1
    for i in range(len(W)):
        h = ad.add_bias(ad.matmul(h, W[i]), b[i])
        if i < last:
            h = ad.leaky_relu(h, params.leaky_slope)
    return h, nodes


def discriminator_forward(params: DiscriminatorParams, pnl_samples,
                          cfg: SortConfig = None) -> list:
    """(VaR, ES) per risk level for one strategy's PnL sample vector.

    A K x n matrix returns one list of estimates per row.
    """
    x = np.asarray(pnl_samples, float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    tape = ad.Tape()
    tau = None if cfg is None else cfg.temperature
    out, _ = discriminator_graph(tape, params, tape.constant(x), trainable=False,
                                 temperature=tau)
    rows = [
        [TailEstimate(var=float(r[2 * m]), es=float(r[2 * m + 1])) for m in range(params.n_levels)]
        for r in out.value
    ]
    return rows[0] if single else rows


# ---------------------------------------------------------------------------
# checkpoint files

MAGIC = b"TLGN"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    generator: GeneratorParams
    discriminator: DiscriminatorParams = None
    epoch: int = 0
    extra: dict = field(default_factory=dict)  # optimiser state etc., name -> 2-D array


def _pack_array(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(np.atleast_2d(arr), dtype="<f8")
    key = name.encode("utf-8")
    return (struct.pack("<H", len(key)) + key + struct.pack("<II", *arr.shape)
            + arr.tobytes(order="C"))


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    g = ckpt.generator
    d = ckpt.discriminator
    arrays = dict(g.arrays())
    meta = {
        "meta.epoch": float(ckpt.epoch),
        "meta.g.leaky_slope": g.leaky_slope,
    }
    if d is not None:
        arrays.update(d.arrays())
        meta["meta.d.temperature"] = d.temperature
        meta["meta.d.leaky_slope"] = d.leaky_slope
    for k, v in meta.items():
        arrays[k] = np.array([[v]])
    for k in sorted(ckpt.extra):
        arrays[f"x.{k}"] = ckpt.extra[k]
    n_levels = d.n_levels if d is not None else 0
    head = MAGIC + struct.pack("<IIIII", FORMAT_VERSION, g.n_assets, g.n_steps, g.noise_dim,
                               n_levels)
    body = [struct.pack("<I", len(arrays))]
    body += [_pack_array(k, v) for k, v in arrays.items()]
    return head + b"".join(body)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated file while reading {what}", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _indexed(arrays, prefix):
    out = []
    i = 0
    while f"{prefix}{i}" in arrays:
        out.append(arrays[f"{prefix}{i}"])
        i += 1
    return out


def parse_checkpoint(data: bytes) -> Checkpoint:
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}", 0)
    (version,) = r.unpack("<I", "format version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})", 4)
    n_assets, n_steps, noise_dim, n_levels = r.unpack("<IIII", "header")
    (count,) = r.unpack("<I", "array count")
    arrays = {}
    for _ in range(count):
        start = r.pos
        (klen,) = r.unpack("<H", "name length")
        try:
            name = r.take(klen, "array name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError("array name is not UTF-8", start) from exc
        rows, cols = r.unpack("<II", f"shape of {name}")
        raw = r.take(8 * rows * cols, f"data of {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(rows, cols).astype(np.float64)
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after last array", r.pos)

    try:
        weights = _indexed(arrays, "g.W")
        gen = GeneratorParams(
            weights=weights,
            biases=_indexed(arrays, "g.b"),
            bn_gamma=[arrays[f"g.bn{i}.gamma"] for i in range(len(weights) - 1)],
            bn_beta=[arrays[f"g.bn{i}.beta"] for i in range(len(weights) - 1)],
            bn_state=[{"running_mean": arrays[f"g.bn{i}.mean"],
                       "running_var": arrays[f"g.bn{i}.var"]}
                      for i in range(len(weights) - 1)],
            n_assets=n_assets,
            n_steps=n_steps,
            leaky_slope=float(arrays["meta.g.leaky_slope"][0, 0]),
        )
        disc = None
        if n_levels:
            disc = DiscriminatorParams(
                weights=_indexed(arrays, "d.W"),
                biases=_indexed(arrays, "d.b"),
                n_levels=n_levels,
                temperature=float(arrays["meta.d.temperature"][0, 0]),
                leaky_slope=float(arrays["meta.d.leaky_slope"][0, 0]),
            )
        epoch = int(arrays["meta.epoch"][0, 0])
    except KeyError as exc:
        raise CheckpointError(f"missing array {exc.args[0]}", len(data)) from exc
    if not weights or gen.noise_dim != noise_dim or gen.widths[-1] != n_assets * n_steps:
        raise CheckpointError("generator shapes disagree with header", 8)
    extra = {k[2:]: v for k, v in arrays.items() if k.startswith("x.")}
    return Checkpoint(generator=gen, discriminator=disc, epoch=epoch, extra=extra)


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
