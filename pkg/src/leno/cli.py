"""Command-line entry point: ``leno {gen-data,train,attack,eval,report}``.

Exit codes: 0 success, 2 usage/config error, 1 runtime failure. Every
command accepts ``--config run.json``; explicit flags override its values
and the resolved settings are written next to the outputs.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, DatasetError, LenoError

log = logging.getLogger("leno")

# flag dest -> default; None means "required unless the config file supplies it"
_DEFAULTS = {
    "gen-data": {"out": None, "count": 200, "size": 64, "seed": 0},
    "train": {
        "data": None, "out": None, "defense": "leno", "epochs1": 20, "epochs2": 10, "lr": 0.05,
        "seed": 0, "batch_size": 8, "init": "gaussian", "placement": "cross", "noise_layers": 1,
        "channels": 16, "lam": 0.1, "alternation": "per_batch",
    },
    "attack": {
        "model": None, "data": None, "attack": "pgd", "epsilon": 20 / 255, "step": None, "iters": None,
        "out": None, "batch_size": 8,
    },
    "eval": {"model": None, "data": None, "report": None, "name": None, "condition": None},
    "report": {"reports": None, "table": None},
}


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="leno", description="Learnable-noise SOD defense lab")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    g = sub.add_parser("gen-data", help="generate a synthetic dataset", argument_default=S)
    g.add_argument("--out")
    g.add_argument("--count", type=int)
    g.add_argument("--size", type=int)
    g.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="train a defended or undefended model", argument_default=S)
    t.add_argument("--data")
    t.add_argument("--out", help="output directory (model.ckpt, train_log.jsonl, config.json)")
    t.add_argument("--defense", choices=["none", "leno"])
    t.add_argument("--epochs1", type=int)
    t.add_argument("--epochs2", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--init", choices=["gaussian", "uniform", "constant"])
    t.add_argument("--placement", choices=["cross", "full", "center"])
    t.add_argument("--noise-layers", type=int, choices=[1, 2, 3], dest="noise_layers")
    t.add_argument("--channels", type=int)
    t.add_argument("--lambda", type=float, dest="lam")
    t.add_argument("--alternation", choices=["per_batch", "per_epoch", "none"])

    a = sub.add_parser("attack", help="write an adversarial copy of a dataset", argument_default=S)
    a.add_argument("--model")
    a.add_argument("--data")
    a.add_argument("--attack")
    a.add_argument("--epsilon", type=float)
    a.add_argument("--step", type=float)
    a.add_argument("--iters", type=int)
    a.add_argument("--out")
    a.add_argument("--batch-size", type=int, dest="batch_size")

    e = sub.add_parser("eval", help="score a model on a dataset", argument_default=S)
    e.add_argument("--model")
    e.add_argument("--data")
    e.add_argument("--report")
    e.add_argument("--name", help="row label used by `leno report` (default: checkpoint parent dir)")
    e.add_argument("--condition", help="column label (default: clean or the attack kind)")

    r = sub.add_parser("report", help="merge eval reports into a markdown table", argument_default=S)
    r.add_argument("--reports", nargs="*")
    r.add_argument("--table")

    for sp in (g, t, a, e, r):
        sp.add_argument("--config", help="JSON file with default values for this command")
    return p


def resolve(command: str, ns: argparse.Namespace) -> dict:
    cfg = dict(_DEFAULTS[command])
    path = getattr(ns, "config", None)
    if path:
        try:
            file_cfg = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise UsageError(f"unknown keys in {path}: {sorted(unknown)}")
        cfg.update(file_cfg)
    cfg.update({k: v for k, v in vars(ns).items() if k in cfg})
    required = {"gen-data": ["out"], "train": ["data", "out"], "attack": ["model", "data", "out"],
                "eval": ["model", "data", "report"], "report": ["table"]}[command]
    missing = [k for k in required if cfg.get(k) is None]
    if missing:
        raise UsageError(f"{command}: missing required option(s): {', '.join('--' + m for m in missing)}")
    return cfg


def _echo_config(directory, command: str, cfg: dict) -> None:
    Path(directory).mkdir(parents=True, exist_ok=True)
    Path(directory, "config.json").write_text(
        json.dumps({"command": command, **cfg}, indent=2, sort_keys=True) + "\n")


def _load_data(path):
    from .data import load_dataset

    if not Path(path).is_dir():
        raise UsageError(f"data directory {path} does not exist")
    return load_dataset(path)


def _load_model(path):
    from .checkpoint import load_checkpoint

    if not Path(path).is_file():
        raise UsageError(f"model checkpoint {path} does not exist")
    return load_checkpoint(path)


def cmd_gen_data(cfg: dict) -> int:
    from .data import synth_generate

    ds = synth_generate(cfg["count"], cfg["size"], cfg["seed"], out_dir=cfg["out"])
    log.info("wrote %d samples to %s", len(ds), cfg["out"])
    return 0


def cmd_train(cfg: dict) -> int:
    from .checkpoint import save_checkpoint
    from .sodnet import ModelConfig, build_model
    from .training import LossConfig, TrainConfig, train_baseline, train_phase1, train_phase2

    data = _load_data(cfg["data"])
    h, w = data[0].image.shape[1:]
    mcfg = ModelConfig(channels=cfg["channels"], height=h, width=w, defense=cfg["defense"] == "leno",
                       init_kind=cfg["init"], placement=cfg["placement"], noise_layers=cfg["noise_layers"])
    tcfg = TrainConfig(lr=cfg["lr"], epochs_phase1=cfg["epochs1"], epochs_phase2=cfg["epochs2"],
                       batch_size=cfg["batch_size"], seed=cfg["seed"], alternation=cfg["alternation"]).validate()
    loss_cfg = LossConfig(lam=cfg["lam"])
    model = build_model(mcfg, seed=cfg["seed"])
    out = Path(cfg["out"])
    _echo_config(out, "train", {**cfg, "resolved_model": mcfg.to_dict()})
    with open(out / "train_log.jsonl", "w") as logf:
        def emit(rec):
            logf.write(json.dumps(rec, sort_keys=True) + "\n")

        if mcfg.defense:
            train_phase1(model, data, tcfg, loss_cfg, emit)
            train_phase2(model, data, tcfg, loss_cfg, emit)
        else:
            train_baseline(model, data, tcfg, loss_cfg, emit)
    save_checkpoint(model, out / "model.ckpt")
    log.info("saved %s", out / "model.ckpt")
    return 0


def cmd_attack(cfg: dict) -> int:
    from .attacks import KINDS, AttackSpec, attack_dataset
    from .checkpoint import model_checksum

    if cfg["attack"] not in KINDS:
        raise UsageError(f"unknown attack {cfg['attack']!r}; choose from {', '.join(KINDS)}")
    spec = AttackSpec(cfg["attack"], cfg["epsilon"], cfg["step"], cfg["iters"])
    model = _load_model(cfg["model"])
    data = _load_data(cfg["data"])
    out = Path(cfg["out"])
    _echo_config(out, "attack", {**cfg, "resolved_attack": spec.to_dict()})
    _, errors = attack_dataset(model, data, spec, out, cfg["batch_size"], model_checksum(model))
    for err in errors:
        log.error("sample %s: %s", err["id"], err["error"])
    return 1 if errors else 0


def _condition(data) -> str:
    kinds = {s.provenance.get("kind") for s in data}
    if kinds == {"clean"}:
        return "clean"
    attacks = {s.provenance.get("attack", {}).get("kind", "adversarial") for s in data if not s.is_clean}
    return "+".join(sorted(attacks))


def cmd_eval(cfg: dict) -> int:
    from .checkpoint import model_checksum
    from .metrics import evaluate

    model = _load_model(cfg["model"])
    data = _load_data(cfg["data"])
    report = evaluate(model, data)
    report.meta = {
        "model": cfg["name"] or Path(cfg["model"]).resolve().parent.name,
        "model_checksum": model_checksum(model),
        "condition": cfg["condition"] or _condition(data),
        "data": str(cfg["data"]),
    }
    Path(cfg["report"]).parent.mkdir(parents=True, exist_ok=True)
    Path(cfg["report"]).write_text(report.to_json() + "\n")
    agg = report.aggregate
    print(f"{report.meta['model']} [{report.meta['condition']}] F_beta={agg['f_beta']:.4f} MAE={agg['mae']:.4f}")
    return 0


def cmd_report(cfg: dict) -> int:
    from .report import load_report, write_report

    paths = cfg["reports"] or []
    if not paths:
        raise UsageError("report: need at least one --reports file")
    reports = []
    for p in paths:
        try:
            reports.append(load_report(p))
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"cannot read report {p}: {exc}") from exc
    for written in write_report(reports, cfg["table"]):
        log.info("wrote %s", written)
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "attack": cmd_attack, "eval": cmd_eval,
            "report": cmd_report}


def main(argv=None) -> int:
    ns = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if ns.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = resolve(ns.command, ns)
        return COMMANDS[ns.command](cfg)
    except (UsageError, ConfigError, DatasetError) as exc:
        print(f"leno {ns.command}: error: {exc}", file=sys.stderr)
        return 2
    except LenoError as exc:
        print(f"leno {ns.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
