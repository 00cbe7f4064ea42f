"""smoothcert command line: one experiment per invocation, JSON/CSV/PNG reports."""
from __future__ import annotations

import argparse
import copy
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__, plotting
from .attacks import AttackConfig, ThreatModel, adaptive_robust_accuracy, eot_pgd, robust_accuracy
from .config import ConfigError, config_hash, get_path, parse_value, resolve, set_path, validate
from .corruptions import ReferenceErrorTable, corruption_errors, mce, rmce
from .data import Dataset, gen_synthetic
from .network import BNMode, Network, loss_gradient_map, reference_cnn
from .smoothing import (SmoothingConfig, adapt_then_certify, certified_accuracy_curve, certify_batch,
                        write_certification_jsonl, write_curve_csv)
from .trainer import TrainConfig, TrainingDiverged, evaluate, train

EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_DIVERGED = 4
EXIT_OTHER = 1


class MissingInput(FileNotFoundError):
    pass


# ---------------------------------------------------------------- helpers


def _out(cfg) -> Path:
    p = Path(cfg["output_dir"])
    p.mkdir(parents=True, exist_ok=True)
    return p


def _dataset(cfg) -> Dataset:
    d = cfg["data"]
    path = d["path"] or Path(cfg["output_dir"]) / "dataset.rten"
    if Path(path).exists():
        return Dataset.load(path)
    if d["path"]:
        raise MissingInput(f"dataset not found: {path}")
    return gen_synthetic(d["classes"], d["per_class"], d["size"], cfg["seed"])


def _eval_split(cfg, ds: Dataset) -> Dataset:
    name = cfg["data"]["split"]
    if name not in set(ds.splits.astype(str)):
        raise ConfigError(f"dataset has no split {name!r}")
    sub = ds.split(name)
    m = cfg["data"]["max_examples"]
    return sub if m is None else sub.subset(np.arange(min(m, len(sub))))


def _checkpoint(cfg) -> Path:
    return Path(cfg["model"]["checkpoint"] or Path(cfg["output_dir"]) / "model.rten")


def _network(cfg) -> Network:
    path = _checkpoint(cfg)
    if not path.exists():
        raise MissingInput(f"checkpoint not found: {path}")
    return Network.load(path)


def _threat(cfg) -> ThreatModel:
    a = cfg["attack"]
    return ThreatModel(a["norm"], a["epsilon"])


def _attack_cfg(cfg) -> AttackConfig:
    a = cfg["attack"]
    return AttackConfig(a["steps"], a["step_size"], a["random_start"], a["eot_m"] or 1, cfg["seed"])


def _smoothing_cfg(cfg) -> SmoothingConfig:
    s = cfg["smoothing"]
    return SmoothingConfig(s["sigma"], s["n0"], s["n"], s["alpha"], s["mc_batch"], cfg["seed"])


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else ("" if v is None else v) for v in row])


def _report(cfg, command: str, results: dict) -> dict:
    return {"command": command, "version": __version__, "config_hash": config_hash(cfg), "results": results}


def _emit(cfg, command: str, results: dict, header, rows, write: bool = True) -> dict:
    rep = _report(cfg, command, results)
    if write:
        out = _out(cfg)
        (out / f"{command}.json").write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
        _write_csv(out / f"{command}.csv", header, rows)
        (out / f"{command}.config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return rep


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(cfg, args, write=True):
    d = cfg["data"]
    ds = gen_synthetic(d["classes"], d["per_class"], d["size"], cfg["seed"])
    out = _out(cfg)
    if write:
        ds.save(out / "dataset.rten")
    rows = []
    for tag in sorted(ds.split_sizes()):
        counts = np.bincount(ds.split(tag).labels, minlength=ds.num_classes)
        rows += [(tag, c, int(n)) for c, n in enumerate(counts)]
    return _emit(cfg, "gen-data", {"manifest": ds.manifest()}, ("split", "class", "count"), rows, write)


def cmd_train(cfg, args, write=True):
    ds = _dataset(cfg)
    t = cfg["train"]
    tc = TrainConfig(seed=cfg["seed"], **t)
    m = cfg["model"]
    net = reference_cnn(ds.num_classes, ds.images.shape[1], ds.images.shape[2], tuple(m["widths"]),
                        m["hidden"], seed=cfg["seed"], bn_momentum=m["bn_momentum"])
    best, last, report = train(net, ds, tc)
    rep_d = report.to_dict()
    test = ds.split("test") if "test" in set(ds.splits.astype(str)) else None
    if test is not None and len(test):
        rep_d["test_acc_selected"] = float((best.predict(test.images) == test.labels).mean())
        rep_d["test_acc_last"] = float((last.predict(test.images) == test.labels).mean())
    if write:
        path = _checkpoint(cfg)
        path.parent.mkdir(parents=True, exist_ok=True)
        best.save(path)
        last.save(path.with_name(path.stem + "_last" + path.suffix))
    rows = [(r["epoch"], r["lr"], r["loss"], r["train_acc"], r["clean_val_acc"], r["robust_val_acc"])
            for r in rep_d["epochs"]]
    rep = _emit(cfg, "train", rep_d, ("epoch", "lr", "loss", "train_acc", "clean_val_acc", "robust_val_acc"),
                rows, write)
    if write:
        plotting.training_curves(_out(cfg) / "train.png", rep_d["epochs"])
    return rep


def cmd_eval_noise(cfg, args, write=True):
    net = _network(cfg)
    test = _eval_split(cfg, _dataset(cfg))
    ad = cfg["adapt"]
    rows, res = [], []
    for sigma in cfg["smoothing"]["noise_levels"]:
        plain = evaluate(net, test, sigma, None, ad["batch_size"], cfg["seed"])
        adapted = None
        if ad["rho"] is not None:
            adapted = evaluate(net, test, sigma, ad["rho"], ad["batch_size"], cfg["seed"], ad["blend"])
        res.append({"sigma": float(sigma), "acc": plain, "acc_adapted": adapted})
        rows.append((float(sigma), plain, adapted))
    rep = _emit(cfg, "eval-noise", {"rho": ad["rho"], "levels": res}, ("sigma", "acc", "acc_adapted"), rows, write)
    if write:
        series = {"frozen BN": [r["acc"] for r in res]}
        if ad["rho"] is not None:
            series[f"adaptive BN (rho={ad['rho']})"] = [r["acc_adapted"] for r in res]
        plotting.accuracy_lines(_out(cfg) / "eval-noise.png", [r["sigma"] for r in res], series, "noise sigma")
    return rep


def cmd_attack(cfg, args, write=True):
    net = _network(cfg)
    net.set_mode(BNMode.FROZEN)
    test = _eval_split(cfg, _dataset(cfg))
    tm, ac = _threat(cfg), _attack_cfg(cfg)
    a, ad = cfg["attack"], cfg["adapt"]
    bs = ad["batch_size"]
    clean = float((net.predict(test.images) == test.labels).mean())
    if a["kind"] == "fgsm":
        robust = robust_accuracy(net, test.images, test.labels, tm, ac, "fgsm", bs)
    elif a["eot_m"] is None:
        robust = robust_accuracy(net, test.images, test.labels, tm, ac, "pgd", bs)
    else:
        # EoT over m copies of the fixed-statistics model
        correct = 0
        for i in range(0, len(test), bs):
            xb, yb = test.images[i:i + bs], test.labels[i:i + bs]
            sub = AttackConfig(ac.steps, ac.step_size, ac.random_start, ac.eot_models, ac.seed + i)
            xa = eot_pgd(net, [net] * ac.eot_models, xb, yb, tm, sub)
            correct += int((net.predict(xa) == yb).sum())
        robust = correct / max(len(test), 1)
    adaptive = None
    if ad["rho"] is not None:
        adaptive = adaptive_robust_accuracy(net, test.images, test.labels, tm, ac, ad["rho"], bs, ad["blend"])
    res = {"clean_acc": clean, "robust_acc": robust, "adaptive_robust_acc": adaptive,
           "norm": a["norm"], "epsilon": a["epsilon"], "steps": a["steps"], "kind": a["kind"],
           "eot_m": a["eot_m"], "rho": ad["rho"], "examples": len(test)}
    rows = [("clean", clean), ("robust", robust), ("adaptive_robust", adaptive)]
    return _emit(cfg, "attack", res, ("metric", "accuracy"), rows, write)


def _certify_results(cfg, net, test):
    sc = _smoothing_cfg(cfg)
    ad = cfg["adapt"]
    if ad["rho"] is None:
        frozen = net.copy()
        frozen.set_mode(BNMode.FROZEN)
        return certify_batch(frozen, test.images, sc), np.arange(len(test))
    order = np.random.default_rng([cfg["seed"], 3]).permutation(len(test))
    results = [None] * len(test)
    for idx in np.array_split(order, max(1, math.ceil(len(test) / ad["batch_size"]))):
        sub = SmoothingConfig(sc.sigma, sc.n0, sc.n, sc.alpha, sc.mc_batch, sc.seed)
        batch_res = adapt_then_certify(net, test.images[idx], ad["rho"], sub, ad["exclude_self"], ad["blend"])
        for j, r in zip(idx, batch_res):
            results[j] = r
    return results, np.arange(len(test))


def cmd_certify(cfg, args, write=True):
    net = _network(cfg)
    test = _eval_split(cfg, _dataset(cfg))
    results, idx = _certify_results(cfg, net, test)
    radii = [float(r) for r in cfg["smoothing"]["radii"]]
    curve = certified_accuracy_curve(results, test.labels, radii)
    abstain = float(np.mean([r.abstained for r in results])) if results else 0.0
    res = {"sigma": cfg["smoothing"]["sigma"], "rho": cfg["adapt"]["rho"], "examples": len(test),
           "abstain_rate": abstain, "radii": radii, "certified_accuracy": [float(a) for a in curve]}
    rep = _report(cfg, "certify", res)
    if write:
        out = _out(cfg)
        write_certification_jsonl(out / "certify.jsonl", results, test.labels, idx)
        write_curve_csv(out / "certify.csv", radii, curve)
        (out / "certify.json").write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
        (out / "certify.config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
        label = "adapt-then-certify" if cfg["adapt"]["rho"] is not None else "frozen BN"
        plotting.certified_curves(out / "certify.png", radii, {label: curve},
                                  f"sigma = {cfg['smoothing']['sigma']}")
    return rep


def cmd_corrupt_eval(cfg, args, write=True):
    net = _network(cfg)
    test = _eval_split(cfg, _dataset(cfg))
    c, ad = cfg["corruption"], cfg["adapt"]
    runs = {"no_adapt": None}
    if ad["rho"] is not None:
        runs["adapt"] = ad["rho"]
    ref = ReferenceErrorTable.from_json(c["reference"]) if c["reference"] else None
    if ref is None and not c["write_reference"]:
        raise ConfigError("corruption.reference is required unless corruption.write_reference is true")
    res, rows = {}, []
    for name, rho in runs.items():
        errors, clean = corruption_errors(net, test, c["kinds"], rho, ad["batch_size"], cfg["seed"], ad["blend"])
        if ref is None:
            ref = ReferenceErrorTable(errors, clean, str(_checkpoint(cfg)))
            if write:
                ref.to_json(_out(cfg) / "reference_table.json")
        sub = {k: ref.errors[k] for k in errors}
        entry = {"errors": errors, "clean_error": clean, "mce": mce(errors, sub)}
        try:
            entry["rmce"] = rmce(errors, clean, sub, ref.clean_error)
        except ZeroDivisionError:
            entry["rmce"] = None
        entry["adaptation"] = {"rho": rho, "batch_size": ad["batch_size"], "blend": ad["blend"]}
        res[name] = entry
        for k in sorted(errors):
            rows += [(name, k, s + 1, e) for s, e in enumerate(errors[k])]
        rows.append((name, "clean", 0, clean))
        if write:
            plotting.corruption_heatmap(_out(cfg) / f"corrupt-eval_{name}.png", errors, name.replace("_", " "))
    return _emit(cfg, "corrupt-eval", res, ("run", "kind", "severity", "error"), rows, write)


def _write_pgm(path, img: np.ndarray) -> None:
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def cmd_grad_map(cfg, args, write=True):
    net = _network(cfg)
    test = _eval_split(cfg, _dataset(cfg))
    count = min(args.count if args is not None else 8, len(test))
    out = _out(cfg)
    rows, maps = [], []
    for i in range(count):
        gm = loss_gradient_map(net, test.images[i], int(test.labels[i]))
        maps.append(gm.display)
        gray = gm.display.mean(axis=0)
        name = f"grad_{i:03d}.pgm"
        if write:
            _write_pgm(out / name, gray)
        rows.append((i, int(test.labels[i]), float(np.abs(gm.raw).mean()), name))
    res = {"count": count, "files": [r[3] for r in rows], "mean_abs_grad": [r[2] for r in rows]}
    rep = _emit(cfg, "grad-map", res, ("index", "label", "mean_abs_grad", "file"), rows, write)
    if write and count:
        plotting.image_grid(out / "grad-map.png", test.images[:count], maps, test.labels[:count])
    return rep


_SUMMARY = {
    "eval-noise": lambda r: {f"acc@{lv['sigma']}": lv["acc_adapted"] if lv["acc_adapted"] is not None else lv["acc"]
                             for lv in r["levels"]},
    "attack": lambda r: {"robust_acc": r["robust_acc"], "adaptive_robust_acc": r["adaptive_robust_acc"]},
    "certify": lambda r: {f"cert@{x}": a for x, a in zip(r["radii"], r["certified_accuracy"])},
    "train": lambda r: {"test_acc_selected": r.get("test_acc_selected")},
    "corrupt-eval": lambda r: {f"{k}_mce": v["mce"] for k, v in r.items()},
}


def cmd_sweep(cfg, args, write=True):
    target = args.command_to_sweep
    if target not in _SUMMARY:
        raise ConfigError(f"sweep supports {sorted(_SUMMARY)}")
    get_path(cfg, args.param)
    values = [parse_value(v) for v in args.values.split(",")]
    rows, res = [], []
    keys = None
    for v in values:
        run = copy.deepcopy(cfg)
        set_path(run, args.param, v)
        validate(run)
        rep = COMMANDS[target](run, args, write=False)
        summary = _SUMMARY[target](rep["results"])
        keys = keys or sorted(summary)
        res.append({"value": v, **summary})
        rows.append([v] + [summary[k] for k in keys])
    header = [args.param] + (keys or [])
    rep = _emit(cfg, "sweep", {"param": args.param, "command": target, "runs": res}, header, rows, write)
    if write and keys and all(isinstance(v, (int, float)) for v in values):
        series = {k: [r[k] for r in res] for k in keys if all(r[k] is not None for r in res)}
        if series:
            plotting.accuracy_lines(_out(cfg) / "sweep.png", values, series, args.param, "value")
    return rep


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval-noise": cmd_eval_noise,
    "attack": cmd_attack,
    "certify": cmd_certify,
    "corrupt-eval": cmd_corrupt_eval,
    "grad-map": cmd_grad_map,
    "sweep": cmd_sweep,
}


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config leaf by dotted path (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")

    p = argparse.ArgumentParser(prog="smoothcert", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "train", "eval-noise", "corrupt-eval"):
        sp = sub.add_parser(name, parents=[common])
        if name != "gen-data":
            sp.add_argument("--rho", type=float, help="shortcut for adapt.rho")
    sp = sub.add_parser("attack", parents=[common])
    sp.add_argument("--eot-m", type=int, help="shortcut for attack.eot_m")
    sp.add_argument("--rho", type=float)
    sp = sub.add_parser("certify", parents=[common])
    sp.add_argument("--sigma", type=float, help="shortcut for smoothing.sigma")
    sp.add_argument("--rho", type=float, help="shortcut for adapt.rho")
    sp.add_argument("--n", type=int, help="shortcut for smoothing.n")
    sp = sub.add_parser("grad-map", parents=[common])
    sp.add_argument("--count", type=int, default=8)
    sp = sub.add_parser("sweep", parents=[common])
    sp.add_argument("--param", required=True, help="dotted config path")
    sp.add_argument("--values", required=True, help="comma-separated values")
    sp.add_argument("--command", dest="command_to_sweep", default="eval-noise")
    return p


_SHORTCUTS = {"rho": "adapt.rho", "eot_m": "attack.eot_m", "sigma": "smoothing.sigma", "n": "smoothing.n"}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out_hint = args.out
    try:
        overrides = list(args.set)
        for attr, path in _SHORTCUTS.items():
            val = getattr(args, attr, None)
            if val is not None:
                overrides.append(f"{path}={json.dumps(val)}")
        cfg = resolve(args.config, overrides, args.seed, args.out)
        out_hint = cfg["output_dir"]
        rep = COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        return _fail(out_hint, args.command, "config", exc, EXIT_CONFIG)
    except (MissingInput, FileNotFoundError) as exc:
        return _fail(out_hint, args.command, "missing_input", exc, EXIT_INPUT)
    except TrainingDiverged as exc:
        return _fail(out_hint, args.command, "diverged", exc, EXIT_DIVERGED)
    except (ValueError, RuntimeError, FloatingPointError) as exc:
        return _fail(out_hint, args.command, type(exc).__name__, exc, EXIT_OTHER)
    print(json.dumps({"status": "ok", "command": args.command, "output_dir": cfg["output_dir"],
                      "config_hash": rep["config_hash"]}, sort_keys=True))
    return 0


def _fail(out_dir, command, kind, exc, code) -> int:
    doc = {"status": "error", "command": command, "error": kind, "message": str(exc), "exit_code": code}
    text = json.dumps(doc, sort_keys=True)
    print(text, file=sys.stderr)
    if out_dir:
        try:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            (Path(out_dir) / "error.json").write_text(text + "\n")
        except OSError:
            pass
    return code


if __name__ == "__main__":
    sys.exit(main())
