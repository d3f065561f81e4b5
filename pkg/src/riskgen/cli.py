"""Command-line front end: simulate data, train, generate, evaluate, eigenportfolios.

Every command takes ``--config <json> --seed <u64> --workers <n> --out <dir>``.
Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from riskgen import datasim, evaluation, pca
from riskgen.errors import CheckpointError, DomainError, NumericalError
from riskgen.networks import (Checkpoint, NoiseSpec, generator_forward, load_checkpoint,
                              save_checkpoint)
from riskgen.rng import stream
from riskgen.scorefn import RiskSpec, min_samples
from riskgen.strategies import StrategySet, default_strategy_set, eigen_strategy_set
from riskgen.training import TrainConfig, train, train_gom

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
COMMANDS = ("simulate-data", "train", "train-gom", "generate", "evaluate", "eigen")
GENERATE_CHUNK = 4096


class InputError(Exception):
    pass


def load_schema(name: str) -> dict:
    text = resources.files("riskgen").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def _dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"config {path} is not valid JSON: {exc}") from exc
    try:
        jsonschema.validate(cfg, load_schema("config"))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise InputError(f"config field {where}: {exc.message}") from exc
    return cfg


def _require(cfg: dict, key: str, command: str):
    if key not in cfg:
        raise InputError(f"config field {key!r} is required for {command}")
    return cfg[key]


def _strategies(cfg: dict, n_assets: int, seed: int) -> StrategySet:
    spec = cfg.get("strategies")
    if spec is None:
        return default_strategy_set(n_assets, seed)
    if isinstance(spec, str):
        try:
            spec = json.loads(Path(spec).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot load strategies from {cfg['strategies']}: {exc}") from exc
    try:
        jsonschema.validate(spec, load_schema("strategies"))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise InputError(f"strategies field {where}: {exc.message}") from exc
    return StrategySet.from_dict(spec)


def _scalers(cfg: dict, fallback_dir=None) -> dict:
    path = cfg.get("scalers")
    if path is None and fallback_dir is not None:
        path = Path(fallback_dir) / "scalers.json"
    if path is None:
        raise InputError("config field 'scalers' is required")
    try:
        return datasim.read_scalers(path)
    except OSError as exc:
        raise InputError(f"cannot read scalers {path}: {exc.strerror}") from exc


def _read_batch(path, scalers) -> datasim.ScenarioBatch:
    try:
        return datasim.read_scenarios_csv(path, scalers)
    except OSError as exc:
        raise InputError(f"cannot read scenarios {path}: {exc.strerror}") from exc


# ---------------------------------------------------------------------------
# commands


def cmd_simulate_data(cfg: dict, seed: int, workers: int, out: Path) -> None:
    if "ingest" in cfg:
        ing = cfg["ingest"]
        batch = datasim.ingest_csv(ing["path"], ing["window"],
                                   ing.get("stride", datasim.DEFAULT_STRIDE))
    else:
        synth = dict(cfg.get("synth", {"preset": "default"}))
        synth["seed"] = seed
        batch = datasim.simulate(datasim.SynthConfig.from_dict(synth),
                                 _require(cfg, "n", "simulate-data"), workers=workers)
    datasim.write_scenarios_csv(batch, out / "scenarios.csv")
    datasim.write_scalers(batch, out / "scalers.json")


def _train_config(cfg: dict, n_assets: int, seed: int) -> TrainConfig:
    tc = dict(cfg.get("train", {}))
    tc["seed"] = seed
    if tc.get("noise") is not None:
        tc["noise"] = {**tc["noise"], "seed": seed}
    if tc.get("strategies") is None:
        tc["strategies"] = _strategies(cfg, n_assets, seed).to_dict()
    return TrainConfig.from_dict(tc)


def _write_snapshot(exc: NumericalError, out: Path) -> Path:
    snap = dict(exc.snapshot or {})
    ckpt = snap.pop("checkpoint", None)
    if ckpt is not None:
        save_checkpoint(ckpt, out / "snapshot.ckpt")
    info = {k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in snap.items()}
    info["error"] = str(exc)
    path = out / "snapshot.json"
    Path(path).write_text(json.dumps(info, indent=2, sort_keys=True, default=str) + "\n")
    return path


def cmd_train(cfg: dict, seed: int, workers: int, out: Path, gom: bool = False) -> None:
    command = "train-gom" if gom else "train"
    scalers = _scalers(cfg)
    data = _read_batch(_require(cfg, "data", command), scalers)
    config = _train_config(cfg, data.n_assets, seed)
    init = None
    if "resume" in cfg:
        init = load_checkpoint(cfg["resume"])
        if (init.generator.n_assets, init.generator.n_steps) != (data.n_assets, data.n_steps):
            raise InputError("resume checkpoint shape does not match the data")

    def on_checkpoint(epoch, ckpt):
        save_checkpoint(ckpt, out / f"epoch{epoch:06d}.ckpt")

    if gom:
        result = train_gom(config, data, init)
    else:
        result = train(config, data, init, on_checkpoint)
    save_checkpoint(result.checkpoint(), out / "final.ckpt")
    save_checkpoint(result.checkpoint(best=True), out / "best.ckpt")
    result.trace.write_csv(out / "trace.csv")
    datasim.write_scalers(data, out / "scalers.json")
    _dump_json(config.to_dict(), out / "train_config.json")


def cmd_generate(cfg: dict, seed: int, workers: int, out: Path) -> None:
    ckpt_path = _require(cfg, "checkpoint", "generate")
    ckpt = load_checkpoint(ckpt_path)
    scalers = _scalers(cfg, Path(ckpt_path).parent)
    gen = ckpt.generator
    m, t = len(scalers["mean"]), int(scalers["n_steps"])
    if (m, t) != (gen.n_assets, gen.n_steps):
        raise InputError(f"scalers (M={m}, T={t}) do not match the checkpoint "
                         f"(M={gen.n_assets}, T={gen.n_steps})")
    n = int(_require(cfg, "n", "generate"))
    noise = NoiseSpec(**{"dim": gen.noise_dim, **cfg.get("noise", {}), "seed": seed})
    if noise.dim != gen.noise_dim:
        raise InputError(f"noise dim {noise.dim} does not match the generator ({gen.noise_dim})")
    rng = stream(seed, "noise.generate")
    parts = []
    for start in range(0, n, GENERATE_CHUNK):
        size = min(GENERATE_CHUNK, n - start)
        parts.append(generator_forward(gen, datasim.sample_noise(noise, size, rng), "eval"))
    z = np.concatenate(parts) if parts else np.zeros((0, m, t))
    batch = datasim.ScenarioBatch(z, scalers["mean"], scalers["std"], "generated",
                                  tuple(scalers.get("assets") or ()) or None)
    datasim.write_scenarios_csv(batch, out / "generated.csv")


def cmd_evaluate(cfg: dict, seed: int, workers: int, out: Path) -> None:
    scalers = _scalers(cfg)
    model = _read_batch(_require(cfg, "model", "evaluate"), scalers)
    reference = _read_batch(_require(cfg, "reference", "evaluate"), scalers)
    if model.n == 0 or reference.n == 0:
        raise InputError("model and reference need at least one scenario each")
    sset = _strategies(cfg, model.n_assets, seed)
    spec = RiskSpec.from_dict(cfg["risk"]) if "risk" in cfg else RiskSpec.single()
    for name, b in (("model", model), ("reference", reference)):
        if b.n < min_samples(spec.alpha_min):
            raise InputError(f"{name} has {b.n} scenarios; alpha={spec.alpha_min} needs "
                             f"at least {min_samples(spec.alpha_min)}")
    report = evaluation.evaluate(model.increments, reference.increments, sset, spec,
                                 se_trials=cfg.get("se_trials", 100), seed=seed,
                                 level=cfg.get("level", 0))
    jsonschema.validate(report.to_dict(), load_schema("report"))
    report.to_json(out / "report.json")
    report.to_csv(out / "report.csv")
    report.write_rank_frequency(out / "rank_frequency.csv")


def cmd_eigen(cfg: dict, seed: int, workers: int, out: Path) -> None:
    scalers = _scalers(cfg)
    batch = _read_batch(_require(cfg, "data", "eigen"), scalers)
    returns = batch.raw().transpose(0, 2, 1).reshape(-1, batch.n_assets)
    basis = pca.eigenportfolios(returns)
    basis.to_json(out / "eigen.json")
    sset = eigen_strategy_set(basis, cfg.get("n_portfolios"))
    _dump_json(sset.to_dict(), out / "strategies.json")


HANDLERS = {
    "simulate-data": cmd_simulate_data,
    "train": cmd_train,
    "train-gom": lambda cfg, seed, workers, out: cmd_train(cfg, seed, workers, out, gom=True),
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "eigen": cmd_eigen,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="riskgen", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int, default=None, help="top-level seed (overrides config)")
        p.add_argument("--workers", type=int, default=None, help="worker processes")
        p.add_argument("--out", help="output directory")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    try:
        cfg = _load_config(args.config)
        if args.out is None:
            raise InputError("--out is required")
        seed = args.seed if args.seed is not None else cfg.get("seed", 0)
        workers = args.workers if args.workers is not None else cfg.get("workers", 1)
        if not 0 <= seed < 2 ** 64:
            raise InputError("--seed must be an unsigned 64-bit integer")
        if workers < 1:
            raise InputError("--workers must be >= 1")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](cfg, seed, workers, out)
    except NumericalError as exc:
        path = _write_snapshot(exc, out)
        print(f"riskgen {args.command}: numerical failure: {exc} (snapshot: {path})",
              file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, DomainError, CheckpointError, jsonschema.ValidationError) as exc:
        msg = exc.message if isinstance(exc, jsonschema.ValidationError) else str(exc)
        print(f"riskgen {args.command}: {msg}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"riskgen {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
