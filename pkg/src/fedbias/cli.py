"""Command line entry point: ``fedbias generate|run|audit|sweep``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .errors import ConfigError, FedBiasError, NotFound

log = logging.getLogger("fedbias")


def _parse_seeds(text: str | None):
    if text is None:
        return None
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds: expected comma-separated integers, got {text!r}") from None
    if not seeds or any(s < 0 for s in seeds):
        raise ConfigError("--seeds: need at least one non-negative seed")
    return seeds


def _experiment(args) -> dict:
    cfg = harness.load_config(args.config)
    if args.out is not None:
        cfg["output_dir"] = args.out
    if args.stride is not None:
        if args.stride < 1:
            raise ConfigError("--stride must be >= 1")
        cfg["audit"]["stride"] = args.stride
    return cfg


def _generate(args) -> None:
    path = Path(args.config)
    if not path.exists():
        raise NotFound(f"config file {path} not found")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    # accept a bare generator config or a full experiment config
    if isinstance(raw, dict) and "data" in raw:
        cfg = harness.validate_config(raw)
        if "synthetic" not in cfg["data"]:
            raise ConfigError("config error at data: generate needs a synthetic data source")
        gen = dict(cfg["data"]["synthetic"])
        seeds = _parse_seeds(args.seeds)
        if seeds:
            gen["seed"] = gen.get("seed", 0) + seeds[0]
        out = args.out or str(Path(cfg["output_dir"]) / f"{cfg['name']}-data")
    else:
        gen = raw
        out = args.out or "data"
    dest = harness.cmd_generate(gen, Path(out))
    log.info("wrote %s", dest)
    print(dest)


def _run(args) -> None:
    cfg = _experiment(args)
    exp = harness.cmd_run(cfg, _parse_seeds(args.seeds), parallel=args.parallel_seeds)
    print(exp)


def _audit(args) -> None:
    cfg = _experiment(args)
    print(harness.cmd_audit(cfg, seeds=_parse_seeds(args.seeds)))


def _sweep(args) -> None:
    cfg = _experiment(args)
    toggles = {t: t == "sweeps" for t in harness.AUDIT_TOGGLES}
    print(harness.cmd_audit(cfg, seeds=_parse_seeds(args.seeds), toggles=toggles))


COMMANDS = {"generate": _generate, "run": _run, "audit": _audit, "sweep": _sweep}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedbias", description="Fairness audits of federated training.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--out", default=None, help="output directory (overrides the config)")
    p.add_argument("--seeds", default=None, help="comma-separated seeds, e.g. 0,1,2")
    p.add_argument("--stride", type=int, default=None, help="audit every n-th round")
    p.add_argument("--parallel-seeds", action="store_true", help="train seeds in separate processes")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except FedBiasError as e:
        log.error("%s", e)
        return e.exit_code
    except OSError as e:
        log.error("io error: %s", e)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
