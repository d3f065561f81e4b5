"""Adversarial training of the scenario generator, plus the two baselines.

The discriminator maps the soft-sorted PnL samples of each strategy to
(VaR, ES) estimates. Its loss is the score of its estimates on generated PnLs
minus ``lam`` times the score of its estimates on real PnLs, both scored
against the real PnL samples; it ascends that loss. The generator descends
the first term.

The generator-only baseline replaces the discriminator with the order
statistics of the soft-sorted generated PnLs. The historical baseline simply
reports empirical tail estimates of past PnLs.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from riskgen import autodiff as ad
from riskgen.datasim import ScenarioBatch, sample_noise
from riskgen.errors import DomainError, NumericalError
from riskgen.networks import (Architecture, Checkpoint, DiscriminatorParams, GeneratorParams,
                              NoiseSpec, discriminator_graph, generator_graph, init_params)
from riskgen.rng import stream
from riskgen.scorefn import (RiskSpec, _tail_counts, empirical_var_es,
                             empirical_var_es_rows, min_samples)
from riskgen.strategies import StrategySet, compile_strategies, pnl_batch, pnl_graph

CLIP_NORM = 10.0


@dataclass
class TrainConfig:
    arch: Architecture = field(default_factory=Architecture)
    risk: RiskSpec = field(default_factory=RiskSpec.single)
    strategies: StrategySet = None
    noise: NoiseSpec = None
    epochs: int = 2000
    batch_size: int = 1000
    lr_d: float = 1e-7
    lr_g: float = 1e-6
    lam: float = 1.0
    optimizer: str = "sgd"  # sgd | adam
    betas: tuple = (0.5, 0.999)
    clip_norm: float = CLIP_NORM
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 0  # 0 disables periodic checkpoints

    def __post_init__(self):
        if self.noise is None:
            self.noise = NoiseSpec(dim=self.arch.noise_dim, seed=self.seed)
        if self.noise.dim != self.arch.noise_dim:
            raise DomainError("noise dimension must match the generator input width")
        if not (self.lr_d > 0 and self.lr_g > 0 and self.lam > 0):
            raise DomainError("learning rates and lam must be positive")
        if self.batch_size != self.arch.n_samples:
            raise DomainError(
                f"batch_size {self.batch_size} must equal the discriminator input width "
                f"{self.arch.n_samples}")
        if self.batch_size < min_samples(self.risk.alpha_min):
            raise DomainError(
                f"batch_size must be at least {min_samples(self.risk.alpha_min)} "
                f"for alpha={self.risk.alpha_min}")
        if self.risk.n_levels != self.arch.n_levels:
            raise DomainError("risk levels must match the discriminator output levels")
        if self.optimizer not in ("sgd", "adam"):
            raise DomainError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 0 or self.log_every < 1:
            raise DomainError("epochs must be >= 0 and log_every >= 1")

    def to_dict(self) -> dict:
        return {
            "arch": self.arch.to_dict(),
            "risk": self.risk.to_dict(),
            "strategies": self.strategies.to_dict() if self.strategies else None,
            "noise": dict(self.noise.__dict__),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr_d": self.lr_d,
            "lr_g": self.lr_g,
            "lam": self.lam,
            "optimizer": self.optimizer,
            "betas": list(self.betas),
            "clip_norm": self.clip_norm,
            "seed": self.seed,
            "log_every": self.log_every,
            "checkpoint_every": self.checkpoint_every,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "arch" in d:
            d["arch"] = Architecture.from_dict(d["arch"])
        if "risk" in d:
            d["risk"] = RiskSpec.from_dict(d["risk"])
        if d.get("strategies") is not None:
            d["strategies"] = StrategySet.from_dict(d["strategies"])
        if d.get("noise") is not None:
            d["noise"] = NoiseSpec(**d["noise"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise DomainError(f"bad training config: {exc}") from exc


@dataclass
class TrainTrace:
    epoch: list = field(default_factory=list)
    loss_d: list = field(default_factory=list)
    loss_g: list = field(default_factory=list)
    re_insample: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)

    def append(self, epoch, loss_d, loss_g, re):
        self.epoch.append(epoch)
        self.loss_d.append(loss_d)
        self.loss_g.append(loss_g)
        self.re_insample.append(re)

    def __len__(self):
        return len(self.epoch)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss_d", "loss_g", "re_insample"])
            for row in zip(self.epoch, self.loss_d, self.loss_g, self.re_insample):
                w.writerow([row[0], *(repr(float(x)) for x in row[1:])])


@dataclass
class TrainResult:
    generator: GeneratorParams
    discriminator: DiscriminatorParams
    trace: TrainTrace
    best_generator: GeneratorParams
    best_epoch: int
    epoch: int  # epochs completed in total, including any resumed ones
    optimizer_state: dict = field(default_factory=dict)

    def checkpoint(self, best: bool = False) -> Checkpoint:
        if best:
            return Checkpoint(self.best_generator, self.discriminator, self.best_epoch)
        return Checkpoint(self.generator, self.discriminator, self.epoch,
                          dict(self.optimizer_state))


# ---------------------------------------------------------------------------
# score terms on the tape


def mean_score_node(v: ad.Node, e: ad.Node, x: np.ndarray, alpha: float, w: float) -> ad.Node:
    """Per-row sample mean of the score of (v_k, e_k) against the PnLs x[k, :].

    ``v`` and ``e`` are K x 1 nodes and ``x`` is a constant K x n array. The
    tail indicator is piecewise constant in ``v`` and is treated as such.
    """
    hit = (x <= v.value).astype(float)
    frac = hit.mean(axis=1, keepdims=True)
    tail_sq = (hit * x * x).mean(axis=1, keepdims=True)
    tail = (hit * x).mean(axis=1, keepdims=True)
    sq = (x * x).mean(axis=1, keepdims=True)
    tape = v.tape
    const = tape.constant(0.5 * w * (tail_sq - alpha * sq))
    quad_v = ad.mul(ad.square(v), tape.constant(-0.5 * w * (frac - alpha)))
    cross = ad.mul(e, ad.sub(ad.mul(v, tape.constant(frac)), tape.constant(tail)))
    pen = ad.scale(ad.mul(e, ad.sub(ad.scale(e, 0.5), v)), alpha)
    return ad.add(ad.add(const, quad_v), ad.add(cross, pen))


def weighted_score_node(out: ad.Node, x: np.ndarray, spec: RiskSpec,
                        strategy_weights) -> ad.Node:
    """Strategy- and level-weighted mean score of K x 2L estimates against x (K x n)."""
    tape = out.tape
    total = None
    for m in range(spec.n_levels):
        v = ad.take_columns(out, [2 * m])
        e = ad.take_columns(out, [2 * m + 1])
        s = mean_score_node(v, e, x, spec.levels[m], spec.w_alpha[m])
        s = ad.scale(s, spec.spectral_weights[m])
        total = s if total is None else ad.add(total, s)
    wk = tape.constant(np.asarray(strategy_weights, float).reshape(-1, 1))
    return ad.matmul(ad.transpose(total), wk)


def _pnl_of_generator(tape, gen, noise, compiled, train, trainable, leaves=None):
    out, g_leaves = generator_graph(tape, gen, tape.constant(noise), train=train,
                                    trainable=trainable, leaves=leaves)
    return pnl_graph(compiled, out), g_leaves


def d_loss_graph(tape, disc, gen, real_pnl, noise, lam, compiled, sset, spec,
                 train_d=True, train_g=False, d_leaves=None, g_leaves=None):
    """Build the discriminator loss on ``tape``; returns (loss, d_leaves, g_leaves).

    ``real_pnl`` is the K x N_B matrix of strategy PnLs on the real batch.
    """
    fake_pnl, gl = _pnl_of_generator(tape, gen, noise, compiled, train=True,
                                     trainable=train_g, leaves=g_leaves)
    out_fake, dl = discriminator_graph(tape, disc, fake_pnl, trainable=train_d, leaves=d_leaves)
    out_real, _ = discriminator_graph(tape, disc, tape.constant(real_pnl), trainable=train_d,
                                      leaves=dl)
    fake_term = weighted_score_node(out_fake, real_pnl, spec, sset.weights)
    real_term = weighted_score_node(out_real, real_pnl, spec, sset.weights)
    return ad.sub(fake_term, ad.scale(real_term, lam)), dl, gl


def g_loss_graph(tape, disc, gen, noise, real_pnl, compiled, sset, spec,
                 train_d=False, train_g=True, d_leaves=None, g_leaves=None):
    fake_pnl, gl = _pnl_of_generator(tape, gen, noise, compiled, train=True,
                                     trainable=train_g, leaves=g_leaves)
    out_fake, dl = discriminator_graph(tape, disc, fake_pnl, trainable=train_d, leaves=d_leaves)
    return weighted_score_node(out_fake, real_pnl, spec, sset.weights), dl, gl


def _flat_real(real):
    x = getattr(real, "increments", real)
    x = np.asarray(x, float)
    return x.reshape(x.shape[0], -1), x.shape[1], x.shape[2]


def discriminator_loss(disc, gen, real, noise, lam, sset: StrategySet, spec: RiskSpec) -> float:
    """Value of the discriminator loss on one real batch and one noise batch."""
    flat, m, t = _flat_real(real)
    _check_batches(disc, flat, noise)
    tape = ad.Tape()
    compiled = compile_strategies(sset, m, t)
    real_pnl = pnl_batch(sset, flat.reshape(-1, m, t), compiled)
    loss, _, _ = d_loss_graph(tape, disc, gen.copy(), real_pnl, noise, lam, compiled, sset,
                              spec, train_d=False)
    return loss.item()


def generator_loss(disc, gen, noise, real, sset: StrategySet, spec: RiskSpec) -> float:
    flat, m, t = _flat_real(real)
    _check_batches(disc, flat, noise)
    tape = ad.Tape()
    compiled = compile_strategies(sset, m, t)
    real_pnl = pnl_batch(sset, flat.reshape(-1, m, t), compiled)
    loss, _, _ = g_loss_graph(tape, disc, gen.copy(), noise, real_pnl, compiled, sset, spec,
                              train_g=False)
    return loss.item()


def _check_batches(disc, flat, noise):
    n = disc.n_samples
    if flat.shape[0] != n or np.shape(noise)[0] != n:
        raise DomainError(f"real and noise batches must both have {n} rows")


# ---------------------------------------------------------------------------
# optimisers


class Optimizer:
    """Plain gradient steps or Adam over a fixed list of arrays, updated in place."""

    def __init__(self, params, lr, kind="sgd", betas=(0.5, 0.999), eps=1e-8, prefix="opt"):
        self.params = params
        self.lr = lr
        self.kind = kind
        self.betas = betas
        self.eps = eps
        self.prefix = prefix
        self.t = 0
        if kind == "adam":
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]

    def step(self, grads, direction: float) -> None:
        """``direction`` is +1 for ascent and -1 for descent."""
        self.t += 1
        if self.kind == "sgd":
            for p, g in zip(self.params, grads):
                p += direction * self.lr * g
            return
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p += direction * self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        out = {f"{self.prefix}.t": np.array([[float(self.t)]])}
        if self.kind == "adam":
            for i, (m, v) in enumerate(zip(self.m, self.v)):
                out[f"{self.prefix}.m{i}"] = m
                out[f"{self.prefix}.v{i}"] = v
        return out

    def load_state(self, state: dict) -> None:
        key = f"{self.prefix}.t"
        if key not in state:
            return
        self.t = int(state[key][0, 0])
        if self.kind == "adam":
            self.m = [state[f"{self.prefix}.m{i}"].copy() for i in range(len(self.params))]
            self.v = [state[f"{self.prefix}.v{i}"].copy() for i in range(len(self.params))]


def clip_global_norm(grads, max_norm):
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if not math.isfinite(norm):
        return grads, norm
    if max_norm and norm > max_norm:
        grads = [g * (max_norm / norm) for g in grads]
    return grads, norm


# ---------------------------------------------------------------------------
# helpers shared by the training loops


def reference_estimates(pnl: np.ndarray, spec: RiskSpec, level: int = 0):
    """Empirical (VaR, ES) arrays per strategy at one level."""
    return empirical_var_es_rows(pnl, spec.levels[level])


def relative_error_arrays(var, es, ref_var, ref_es) -> float:
    ref_var, ref_es = np.asarray(ref_var, float), np.asarray(ref_es, float)
    if np.any(ref_var == 0) or np.any(ref_es == 0):
        raise DomainError("reference VaR/ES must be nonzero for relative errors")
    k = ref_var.size
    return float((np.abs(var - ref_var) / np.abs(ref_var)).sum()
                 + (np.abs(es - ref_es) / np.abs(ref_es)).sum()) / (2 * k)


def generated_pnl(gen: GeneratorParams, sset: StrategySet, noise: np.ndarray,
                  compiled=None) -> np.ndarray:
    """K x n PnLs of eval-mode generator output."""
    tape = ad.Tape()
    out, _ = generator_graph(tape, gen, tape.constant(noise), train=False, trainable=False)
    c = compiled or compile_strategies(sset, gen.n_assets, gen.n_steps)
    return pnl_batch(sset, out.value.reshape(-1, gen.n_assets, gen.n_steps), c)


def _in_sample_re(gen, sset, compiled, ref, spec, noise):
    pnl = generated_pnl(gen, sset, noise, compiled)
    total = 0.0
    for m in range(spec.n_levels):
        var, es = empirical_var_es_rows(pnl, spec.levels[m])
        total += relative_error_arrays(var, es, *ref[m])
    return total / spec.n_levels


def _params_finite(arrays):
    return all(np.all(np.isfinite(a)) for a in arrays)


def _abort(message, epoch, step, gen, disc, extra=None):
    snap = {
        "message": message,
        "epoch": epoch,
        "step": step,
        "checkpoint": Checkpoint(gen, disc, epoch),
    }
    if extra:
        snap.update(extra)
    raise NumericalError(f"{message} at epoch {epoch}, step {step}", snapshot=snap)


def _prepare(config: TrainConfig, data: ScenarioBatch):
    if data.n < config.batch_size:
        raise DomainError(f"need at least {config.batch_size} scenarios, got {data.n}")
    arch = config.arch
    if (data.n_assets, data.n_steps) != (arch.n_assets, arch.n_steps):
        raise DomainError(
            f"data shape (M={data.n_assets}, T={data.n_steps}) does not match the "
            f"architecture (M={arch.n_assets}, T={arch.n_steps})")
    sset = config.strategies
    if sset is None:
        raise DomainError("training config needs a strategy set")
    compiled = compile_strategies(sset, arch.n_assets, arch.n_steps)
    real_pnl = pnl_batch(sset, data.increments, compiled)
    ref = [reference_estimates(real_pnl, config.risk, m) for m in range(config.risk.n_levels)]
    return sset, compiled, ref, real_pnl


def _resume(config, init: Checkpoint):
    if init is None:
        gen, disc = init_params(config.arch, config.seed)
        return gen, disc, 0, {}
    gen = init.generator.copy()
    disc = init.discriminator.copy() if init.discriminator is not None else None
    if disc is None:
        _, disc = init_params(config.arch, config.seed)
    return gen, disc, init.epoch, init.extra


def train(config: TrainConfig, data: ScenarioBatch, init: Checkpoint = None,
          on_checkpoint=None) -> TrainResult:
    """Alternate one discriminator ascent step and one generator descent step per batch.

    Each epoch shuffles the data with the run seed and makes
    ``floor(N / batch_size)`` steps; a trailing partial batch is dropped.
    ``init`` resumes from a checkpoint, continuing its epoch count.
    ``on_checkpoint(epoch, Checkpoint)`` is called every ``checkpoint_every``
    epochs when that is positive.
    """
    sset, compiled, ref, all_pnl = _prepare(config, data)
    gen, disc, start, opt_state = _resume(config, init)
    spec, nb = config.risk, config.batch_size
    opt_d = Optimizer(disc.trainable(), config.lr_d, config.optimizer, config.betas, prefix="opt.d")
    opt_g = Optimizer(gen.trainable(), config.lr_g, config.optimizer, config.betas, prefix="opt.g")
    opt_d.load_state(opt_state)
    opt_g.load_state(opt_state)
    trace = TrainTrace()
    best_gen, best_epoch, best_re = gen.copy(), start, math.inf
    steps = data.n // nb

    for epoch in range(start, start + config.epochs):
        order = stream(config.seed, "shuffle", epoch).permutation(data.n)
        noise_rng = stream(config.seed, "noise", epoch)
        sum_d = sum_g = 0.0
        for step in range(steps):
            real = all_pnl[:, order[step * nb:(step + 1) * nb]]

            tape = ad.Tape()
            z = sample_noise(config.noise, nb, noise_rng)
            loss_d, dl, _ = d_loss_graph(tape, disc, gen, real, z, config.lam, compiled, sset,
                                         spec, train_d=True)
            tape.backward(loss_d)
            grads, _ = clip_global_norm([n.grad for n in dl], config.clip_norm)
            if not (math.isfinite(loss_d.item()) and _params_finite(grads)):
                _abort("non-finite discriminator loss", epoch, step, gen, disc,
                       {"loss_d": loss_d.item()})
            opt_d.step(grads, +1.0)

            tape = ad.Tape()
            z = sample_noise(config.noise, nb, noise_rng)
            loss_g, _, gl = g_loss_graph(tape, disc, gen, z, real, compiled, sset, spec)
            tape.backward(loss_g)
            grads, _ = clip_global_norm([n.grad for n in gl], config.clip_norm)
            if not (math.isfinite(loss_g.item()) and _params_finite(grads)):
                _abort("non-finite generator loss", epoch, step, gen, disc,
                       {"loss_g": loss_g.item()})
            opt_g.step(grads, -1.0)
            sum_d += loss_d.item()
            sum_g += loss_g.item()

        if not _params_finite(gen.trainable() + disc.trainable()):
            _abort("non-finite parameters", epoch, steps, gen, disc)
        done = epoch + 1
        if (done - start) % config.log_every == 0 or done == start + config.epochs:
            z = sample_noise(config.noise, nb, stream(config.seed, "noise.eval", epoch))
            re = _in_sample_re(gen, sset, compiled, ref, spec, z)
            trace.append(done, sum_d / max(steps, 1), sum_g / max(steps, 1), re)
            if re < best_re:
                best_re, best_epoch, best_gen = re, done, gen.copy()
        if config.checkpoint_every and done % config.checkpoint_every == 0 and on_checkpoint:
            state = {**opt_d.state(), **opt_g.state()}
            on_checkpoint(done, Checkpoint(gen.copy(), disc.copy(), done, state))
            trace.checkpoints.append(done)

    return TrainResult(gen, disc, trace, best_gen, best_epoch, start + config.epochs,
                       {**opt_d.state(), **opt_g.state()})


# ---------------------------------------------------------------------------
# generator-only baseline


def order_stat_selector(n: int, spec: RiskSpec) -> np.ndarray:
    """n x 2L matrix reading (VaR, ES) per level off a descending sorted vector."""
    sel = np.zeros((n, 2 * spec.n_levels))
    for m, alpha in enumerate(spec.levels):
        k_var, k_es = _tail_counts(n, alpha)
        if k_es < 1:
            raise DomainError(f"need at least {min_samples(alpha)} samples for alpha={alpha}")
        sel[n - k_var, 2 * m] = 1.0
        sel[n - k_es:, 2 * m + 1] = 1.0 / k_es
    return sel


def gom_loss_graph(tape, gen, noise, real_pnl, compiled, sset, spec, tau, train_g=True,
                   g_leaves=None):
    fake_pnl, gl = _pnl_of_generator(tape, gen, noise, compiled, train=True, trainable=train_g,
                                     leaves=g_leaves)
    y = ad.soft_sort(fake_pnl, tau)
    est = ad.matmul(y, tape.constant(order_stat_selector(fake_pnl.shape[1], spec)))
    return weighted_score_node(est, real_pnl, spec, sset.weights), gl


def train_gom(config: TrainConfig, data: ScenarioBatch, init: Checkpoint = None) -> TrainResult:
    """Generator-only training: score the soft-sorted generated tail against real PnLs."""
    sset, compiled, ref, all_pnl = _prepare(config, data)
    gen, disc, start, opt_state = _resume(config, init)
    spec, nb = config.risk, config.batch_size
    opt_g = Optimizer(gen.trainable(), config.lr_g, config.optimizer, config.betas, prefix="opt.g")
    opt_g.load_state(opt_state)
    trace = TrainTrace()
    best_gen, best_epoch, best_re = gen.copy(), start, math.inf
    steps = data.n // nb
    tau = config.arch.temperature

    for epoch in range(start, start + config.epochs):
        order = stream(config.seed, "shuffle", epoch).permutation(data.n)
        noise_rng = stream(config.seed, "noise", epoch)
        sum_g = 0.0
        for step in range(steps):
            real = all_pnl[:, order[step * nb:(step + 1) * nb]]
            tape = ad.Tape()
            z = sample_noise(config.noise, nb, noise_rng)
            loss, gl = gom_loss_graph(tape, gen, z, real, compiled, sset, spec, tau)
            tape.backward(loss)
            grads, _ = clip_global_norm([n.grad for n in gl], config.clip_norm)
            if not (math.isfinite(loss.item()) and _params_finite(grads)):
                _abort("non-finite generator loss", epoch, step, gen, None, {"loss_g": loss.item()})
            opt_g.step(grads, -1.0)
            sum_g += loss.item()
        done = epoch + 1
        if (done - start) % config.log_every == 0 or done == start + config.epochs:
            z = sample_noise(config.noise, nb, stream(config.seed, "noise.eval", epoch))
            re = _in_sample_re(gen, sset, compiled, ref, spec, z)
            trace.append(done, math.nan, sum_g / max(steps, 1), re)
            if re < best_re:
                best_re, best_epoch, best_gen = re, done, gen.copy()

    return TrainResult(gen, None, trace, best_gen, best_epoch, start + config.epochs,
                       opt_g.state())


# ---------------------------------------------------------------------------
# historical simulation baseline


def hsm_estimates(history, spec: RiskSpec, level: int = 0) -> list:
    """Empirical (VaR, ES) per strategy from a K x n matrix of past PnLs."""
    history = np.atleast_2d(np.asarray(history, float))
    alpha = spec.levels[level]
    return [empirical_var_es(row, alpha) for row in history]
