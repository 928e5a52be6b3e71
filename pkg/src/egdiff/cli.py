"""Single command-line entry point wiring all modules together.

Subcommands: phantom gen, train, translate, eval, profile, diffmap,
schedule dump, ablate. Exit codes: 0 success, 1 runtime failure, 2
usage/configuration error. All tables are written as CSV first and
pretty-printed second.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import energy as energy_mod
from . import metrics as metrics_mod
from . import phantom as phantom_mod
from . import sampling as sampling_mod
from . import training as training_mod
from . import unet
from .config import ConfigError, RunConfig, key_reference_markdown
from .phantom import (DEGRADE_PRESETS, Raster, load_raster, save_raster,
                      raster_to_csv, raster_to_pgm, make_dataset, normalize_hu)
from .sampling import SamplerConfig
from .schedule import schedule_csv_rows
from .seeds import derive_seed

SUBCOMMANDS = ("phantom", "train", "translate", "eval", "profile",
               "diffmap", "schedule", "ablate")


def _add_config_args(p: argparse.ArgumentParser):
    p.add_argument("--config", help="path to a section.key = value config file")
    p.add_argument("--seed", type=int, help="master seed override")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any configuration key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="egdiff",
        description="Energy-guided diffusion engine for degraded-to-clean CT translation",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p_phantom = sub.add_parser("phantom", help="synthetic dataset tools")
    phantom_sub = p_phantom.add_subparsers(dest="action", required=True)
    p_gen = phantom_sub.add_parser("gen", help="generate aligned (clean, degraded) pairs")
    p_gen.add_argument("--n", type=int, help="number of pairs")
    p_gen.add_argument("--size", type=int, help="image extent")
    p_gen.add_argument("--out-dir", required=True)
    p_gen.add_argument("--degrade-preset", choices=sorted(DEGRADE_PRESETS))
    _add_config_args(p_gen)

    p_train = sub.add_parser("train", help="train the conditional denoiser")
    p_train.add_argument("--data", required=True, help="dataset manifest (or its directory)")
    p_train.add_argument("--out-dir", required=True)
    _add_config_args(p_train)

    p_tr = sub.add_parser("translate", help="translate one raster through the model")
    p_tr.add_argument("--input", required=True, help="source .egim raster")
    p_tr.add_argument("--checkpoint", required=True)
    p_tr.add_argument("--out", required=True, help="output .egim path")
    _add_config_args(p_tr)

    p_eval = sub.add_parser("eval", help="score predictions against references")
    p_eval.add_argument("--pred", required=True, help="directory of predicted rasters")
    p_eval.add_argument("--ref", required=True, help="directory of reference rasters")
    p_eval.add_argument("--out-csv", required=True, help="per-image metrics CSV")
    p_eval.add_argument("--row", type=int, help="profile row (default: middle)")
    _add_config_args(p_eval)

    p_prof = sub.add_parser("profile", help="horizontal HU line profiles")
    p_prof.add_argument("--input", nargs="+", required=True)
    p_prof.add_argument("--row", type=int, required=True)
    p_prof.add_argument("--out-dir", required=True)
    _add_config_args(p_prof)

    p_diff = sub.add_parser("diffmap", help="signed HU difference map")
    p_diff.add_argument("--a", required=True)
    p_diff.add_argument("--b", required=True)
    p_diff.add_argument("--out-prefix", required=True, help="writes PREFIX.csv and PREFIX.pgm")
    _add_config_args(p_diff)

    p_sched = sub.add_parser("schedule", help="noise schedule tools")
    sched_sub = p_sched.add_subparsers(dest="action", required=True)
    p_dump = sched_sub.add_parser("dump", help="emit the schedule as CSV")
    p_dump.add_argument("--out", default="-", help="CSV path or - for stdout")
    _add_config_args(p_dump)

    p_abl = sub.add_parser("ablate", help="energy-on vs energy-off comparison")
    p_abl.add_argument("--data", required=True)
    p_abl.add_argument("--out-dir", required=True)
    _add_config_args(p_abl)

    p_keys = sub.add_parser("config-keys", help="print the configuration key reference")
    p_keys.add_argument("--out", default="-")

    return parser


def parse_args(argv) -> tuple[str, RunConfig, argparse.Namespace]:
    """Parse argv into (subcommand, merged RunConfig, raw namespace)."""
    parser = build_parser()
    ns = parser.parse_args(argv)
    overrides: dict[str, str] = {}
    for item in getattr(ns, "set", []):
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if getattr(ns, "seed", None) is not None:
        overrides["seed"] = str(ns.seed)
    if getattr(ns, "n", None) is not None:
        overrides["data.n"] = str(ns.n)
    if getattr(ns, "size", None) is not None:
        overrides["data.size"] = str(ns.size)
    if getattr(ns, "degrade_preset", None) is not None:
        overrides["data.degrade_preset"] = ns.degrade_preset
    cfg = RunConfig.build(getattr(ns, "config", None), overrides)
    return ns.subcommand, cfg, ns


def _manifest_path(data_arg: str) -> str:
    if os.path.isdir(data_arg):
        return os.path.join(data_arg, "manifest.txt")
    return data_arg


def _print_table(headers: list[str], rows: list[list[str]]):
    widths = [max(len(str(headers[i])), *(len(str(r[i])) for r in rows))
              for i in range(len(headers))]
    line = "  ".join(str(h).ljust(w) for h, w in zip(headers, widths))
    print(line)
    print("-" * len(line))
    for r in rows:
        print("  ".join(str(c).ljust(w) for c, w in zip(r, widths)))


# -- subcommand implementations ----------------------------------------------


def _cmd_phantom(cfg: RunConfig, ns) -> int:
    manifest = make_dataset(
        n=int(cfg["data.n"]),
        seed=cfg.seed,
        size=int(cfg["data.size"]),
        degrade_spec=cfg.degrade_spec(),
        out_dir=ns.out_dir,
        split=tuple(cfg["data.split"]),
    )
    print(f"wrote {cfg['data.n']} pairs; manifest at {manifest}")
    return 0


def _cmd_schedule(cfg: RunConfig, ns) -> int:
    rows = schedule_csv_rows(cfg.schedule())
    header = ["t", "beta", "alpha", "alpha_bar", "posterior_var", "sigma"]
    if ns.out == "-":
        w = csv.writer(sys.stdout)
        w.writerow(header)
        w.writerows(rows)
    else:
        with open(ns.out, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(header)
            w.writerows(rows)
        print(f"wrote schedule CSV to {ns.out}")
    return 0


def _cmd_train(cfg: RunConfig, ns) -> int:
    data = training_mod.PairDataset.from_manifest(_manifest_path(ns.data), split="train")
    params, history = training_mod.train(
        config=cfg.train_config(),
        data_source=data,
        s=cfg.schedule(),
        w=cfg.loss_weights(),
        ecfg=cfg.energy_config(),
        arch=cfg.arch(),
        out_dir=ns.out_dir,
    )
    with open(os.path.join(ns.out_dir, "run.json"), "w") as f:
        json.dump(cfg.provenance(), f, indent=1)
    last = history[-1] if history else {"recon": float("nan"), "total": float("nan")}
    print(f"trained {len(history)} steps; final recon {last['recon']:.5f} "
          f"total {last['total']:.5f}; artifacts in {ns.out_dir}")
    return 0


def _cmd_translate(cfg: RunConfig, ns) -> int:
    params = unet.load_checkpoint(ns.checkpoint)
    src = load_raster(ns.input)
    out = sampling_mod.sample(
        src, params, cfg.schedule(), cfg.sampler_config(), cfg.energy_config()
    )
    save_raster(out, ns.out)
    sidecar = {
        "input": ns.input,
        "checkpoint": ns.checkpoint,
        "seed": cfg.seed,
        "provenance": cfg.provenance(),
    }
    with open(ns.out + ".json", "w") as f:
        json.dump(sidecar, f, indent=1)
    print(f"wrote {ns.out} (+.json sidecar)")
    return 0


def _pair_dirs(pred_dir: str, ref_dir: str) -> list[tuple[str, str]]:
    preds = sorted(f for f in os.listdir(pred_dir) if f.endswith(".egim"))
    refs = sorted(f for f in os.listdir(ref_dir) if f.endswith(".egim"))
    if not preds or len(preds) != len(refs):
        raise ConfigError(
            f"eval needs matching raster counts, got {len(preds)} predictions "
            f"and {len(refs)} references"
        )
    return [(os.path.join(pred_dir, p), os.path.join(ref_dir, r))
            for p, r in zip(preds, refs)]


def _cmd_eval(cfg: RunConfig, ns) -> int:
    pairs = _pair_dirs(ns.pred, ns.ref)
    preds = [load_raster(p) for p, _ in pairs]
    refs = [load_raster(r) for _, r in pairs]
    report = metrics_mod.evaluate_pairs(preds, refs, profile_row=ns.row)
    with open(ns.out_csv, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["image", "ssim", "mae_hu", "psnr_db", "ncc", "pearson_profile"])
        for (p, _), sl in zip(pairs, report.per_slice):
            w.writerow([os.path.basename(p), f"{sl.ssim:.6f}", f"{sl.mae_hu:.4f}",
                        f"{sl.psnr_db:.4f}", f"{sl.ncc:.6f}", f"{sl.pearson_profile:.6f}"])
    row = metrics_mod.mean_std_row(report)
    _print_table(list(row.keys()), [list(row.values())])
    print(f"per-image metrics in {ns.out_csv}")
    return 0


def _cmd_profile(cfg: RunConfig, ns) -> int:
    os.makedirs(ns.out_dir, exist_ok=True)
    for path in ns.input:
        r = load_raster(path)
        profile = metrics_mod.line_profile(r, ns.row)
        stem = os.path.splitext(os.path.basename(path))[0]
        out = os.path.join(ns.out_dir, f"{stem}_row{ns.row}.csv")
        with open(out, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["position", "hu"])
            for i, v in enumerate(profile):
                w.writerow([i, f"{v:.4f}"])
        print(f"wrote {out}")
    return 0


def _cmd_diffmap(cfg: RunConfig, ns) -> int:
    a = load_raster(ns.a)
    b = load_raster(ns.b)
    d = metrics_mod.diff_map(a, b)
    r = Raster.from_array(d)
    raster_to_csv(r, ns.out_prefix + ".csv")
    span = float(np.max(np.abs(d))) or 1.0
    raster_to_pgm(r, ns.out_prefix + ".pgm", lo=-span, hi=span)
    print(f"wrote {ns.out_prefix}.csv and {ns.out_prefix}.pgm "
          f"(gray window ±{span:.1f} HU)")
    return 0


def run_ablation(cfg: RunConfig, manifest: str, out_dir: str) -> list[dict]:
    """Train and evaluate with and without the energy machinery.

    Both arms share the seed, data, and architecture; the energy arm adds
    the training energy term and sampling-time guidance. Returns the two
    result rows.
    """
    os.makedirs(out_dir, exist_ok=True)
    train_data = training_mod.PairDataset.from_manifest(manifest, split="train")
    test_records = [r for r in phantom_mod.load_manifest(manifest) if r["split"] == "test"]
    if not test_records:
        raise ConfigError("ablation needs a non-empty test split")
    sched = cfg.schedule()
    rows = []
    for label, with_energy in (("with_energy", True), ("without_energy", False)):
        w = cfg.loss_weights()
        ecfg = cfg.energy_config()
        if not with_energy:
            w = training_mod.LossWeights(lambda_t1=w.lambda_t1, lambda_t2=0.0,
                                         loss_variant=w.loss_variant)
        arm_dir = os.path.join(out_dir, label)
        params, _ = training_mod.train(
            config=cfg.train_config(),
            data_source=train_data,
            s=sched,
            w=w,
            ecfg=ecfg if with_energy else None,
            arch=cfg.arch(),
            out_dir=arm_dir,
        )
        scfg = SamplerConfig(
            T_used=None if not int(cfg["sampler.T_used"]) else int(cfg["sampler.T_used"]),
            guidance=with_energy and bool(cfg["sampler.guidance"]),
            seed=cfg.seed,
        )
        preds, refs = [], []
        x_stack = []
        seeds = []
        for rec in test_records:
            x_stack.append(normalize_hu(load_raster(rec["cbct_path"]))[None])
            refs.append(load_raster(rec["ct_path"]))
            seeds.append(derive_seed(cfg.seed, "sampling", rec["index"]))
        y = sampling_mod.sample_batch(np.stack(x_stack), params, sched, scfg,
                                      ecfg, chain_seeds=seeds)
        for i, rec in enumerate(test_records):
            out = phantom_mod.denormalize_hu(y[i, 0])
            save_raster(out, os.path.join(arm_dir, f"sct_{rec['index']:04d}.egim"))
            preds.append(out)
        report = metrics_mod.evaluate_pairs(preds, refs)
        rows.append({
            "method": label,
            "ssim": report.ssim,
            "mae_hu": report.mae_hu,
            "psnr_db": report.psnr_db,
            "ncc": report.ncc,
            "cells": metrics_mod.mean_std_row(report),
        })

    with open(os.path.join(out_dir, "ablation.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method", "SSIM", "MAE(HU)", "PSNR(dB)", "NCC"])
        for r in rows:
            w.writerow([r["method"]] + list(r["cells"].values()))
    return rows


def _cmd_ablate(cfg: RunConfig, ns) -> int:
    rows = run_ablation(cfg, _manifest_path(ns.data), ns.out_dir)
    headers = ["method", "SSIM", "MAE(HU)", "PSNR(dB)", "NCC"]
    _print_table(headers, [[r["method"]] + list(r["cells"].values()) for r in rows])
    print(f"table in {os.path.join(ns.out_dir, 'ablation.csv')}")
    return 0


def _cmd_config_keys(ns) -> int:
    text = key_reference_markdown()
    if ns.out == "-":
        sys.stdout.write(text)
    else:
        with open(ns.out, "w") as f:
            f.write(text)
        print(f"wrote {ns.out}")
    return 0


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        parser = build_parser()
        ns = parser.parse_args(argv)
        if ns.subcommand == "config-keys":
            return _cmd_config_keys(ns)
        subcommand, cfg, ns = parse_args(argv)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    try:
        handler = {
            "phantom": _cmd_phantom,
            "schedule": _cmd_schedule,
            "train": _cmd_train,
            "translate": _cmd_translate,
            "eval": _cmd_eval,
            "profile": _cmd_profile,
            "diffmap": _cmd_diffmap,
            "ablate": _cmd_ablate,
        }[subcommand]
        return handler(cfg, ns)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
