"""Command line: ``edpa <subcommand> --config cfg.txt --seed S --out PATH``.

Configs are ``key=value`` files; ``--seed`` overrides any ``seed`` key.
Each run writes its primary artefact to ``--out`` plus JSON-lines logs,
CSV metrics and PNG figures next to it. Errors exit with the category
code carried by the exception (see ``edpa.errors``).
"""

from __future__ import annotations

import os

# BLAS pools are sized when numpy loads, so the cap has to be exported first
_THREADS = os.environ.get("EDPA_THREADS")
if _THREADS and _THREADS.isdigit() and int(_THREADS) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = _THREADS

import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from dataclasses import asdict, fields, replace  # noqa: E402
from pathlib import Path  # noqa: E402

import click  # noqa: E402
import numpy as np  # noqa: E402

from edpa import plotting  # noqa: E402
from edpa.attack import AttackAborted, AttackConfig, edpa_attack  # noqa: E402
from edpa.config import build, read_kv  # noqa: E402
from edpa.data import VOCAB, DatasetSpec, generate_dataset, load_dataset, save_dataset  # noqa: E402
from edpa.defense import DefenseConfig, FinetuneAborted, adversarial_finetune, clean_fidelity  # noqa: E402
from edpa.encoders import Encoders, Geometry, PretrainConfig, action_mse, pretrain  # noqa: E402
from edpa.errors import ConfigError, EdpaError  # noqa: E402
from edpa.evaluation import (  # noqa: E402
    EvalConfig,
    ablate_alpha1,
    ablate_patch_size,
    alignment_heatmap,
    calibrate_failure_threshold,
    covered_blocks,
    evaluate,
    heatmap_difference,
    heatmap_pgm,
    mean_record,
    side_for_fraction,
    std_failure_rate,
    transfer_eval,
    write_csv,
)
from edpa.patching import export_ppm, load_patch, save_patch  # noqa: E402

log = logging.getLogger("edpa")

SIZE_GRID = (0.02, 0.04, 0.08, 0.10)
ALPHA_GRID = (0.0, 0.2, 0.5, 0.8, 1.0)


def thread_cap() -> int | None:
    raw = os.environ.get("EDPA_THREADS")
    if raw is None or raw == "":
        return None
    if not raw.isdigit() or int(raw) < 1:
        raise ConfigError(f"EDPA_THREADS must be a positive integer, got {raw!r}")
    return int(raw)


def load_kv(path) -> dict[str, str]:
    return read_kv(path) if path else {}


def make_config(cls, kv: dict[str, str], seed: int | None, extra_ok: set[str] = frozenset()):
    names = {f.name for f in fields(cls)}
    unknown = set(kv) - names - set(extra_ok)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(sorted(unknown))}")
    cfg = build(cls, {k: v for k, v in kv.items() if k in names})
    if seed is not None and "seed" in names:
        cfg = replace(cfg, seed=seed)
    return cfg


class JsonLines:
    """Append-only JSON-lines writer used as an ``on_log`` callback."""

    def __init__(self, path):
        self.path = Path(path)
        self.rows: list[dict] = []
        self._fh = self.path.open("w", encoding="utf-8")

    def __call__(self, row: dict) -> None:
        self.rows.append(row)
        self._fh.write(json.dumps(row, sort_keys=True) + "\n")

    def close(self) -> None:
        self._fh.close()


def sibling(out: Path, suffix: str) -> Path:
    return out.with_name(out.name + suffix)


def common(fn):
    fn = click.option("--out", "out", required=True, type=click.Path(path_type=Path), help="Output path.")(fn)
    fn = click.option("--config", "config", type=click.Path(exists=True, dir_okay=False, path_type=Path), help="key=value config file.")(fn)
    fn = click.option("--seed", type=int, default=None, help="Overrides the config seed.")(fn)
    return fn


def load_encoders(ckpt) -> Encoders:
    return Encoders.load(ckpt)


def theta_of(enc: Encoders) -> float:
    if "theta_fail" not in enc.meta:
        raise ConfigError("checkpoint carries no calibrated failure threshold; run pretrain with --calib")
    return float(enc.meta["theta_fail"])


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose: bool):
    """Embedding-disruption patch attacks on toy vision-language-action encoders."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")
    thread_cap()


@cli.command("gen-data")
@click.option("--spec", type=click.Path(exists=True, dir_okay=False, path_type=Path), help="Dataset spec file (key=value).")
@common
def gen_data(spec, config, seed, out):
    """Render a synthetic scene dataset into a directory."""
    kv = {**load_kv(config), **load_kv(spec)}
    if seed is not None:
        kv["seed"] = str(seed)
    ds = DatasetSpec.from_mapping(kv)
    samples = generate_dataset(ds)
    save_dataset(samples, out, ds)
    click.echo(f"wrote {len(samples)} samples (suite {ds.suite}) to {out}")


@cli.command("pretrain")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False, path_type=Path), multiple=True, help="Training dataset(s).")
@click.option("--calib", type=click.Path(exists=True, file_okay=False, path_type=Path), help="Held-out clean data for the failure threshold.")
@common
def pretrain_cmd(data, calib, config, seed, out):
    """Fit the toy encoders and action head; calibrate the failure threshold."""
    kv = load_kv(config)
    geom_keys = {f.name for f in fields(Geometry)}
    cfg = make_config(PretrainConfig, kv, seed, extra_ok=geom_keys | {"target_fr"})
    geometry = build(Geometry, {k: v for k, v in kv.items() if k in geom_keys})
    target = float(kv.get("target_fr", 0.10))
    samples = [s for d in data for s in load_dataset(d)]
    enc, curve = pretrain(samples, cfg, geometry)
    held = load_dataset(calib) if calib else samples
    enc.meta["theta_fail"] = calibrate_failure_threshold(enc, held, target)
    enc.meta["target_fr"] = target
    enc.meta["heldout_mse"] = action_mse(enc, held)
    out.parent.mkdir(parents=True, exist_ok=True)
    enc.save(out)
    writer = JsonLines(sibling(out, ".log.jsonl"))
    for row in curve:
        writer(row)
    writer.close()
    plotting.plot_curve(curve, ["loss", "action_mse", "pooled_cosine"], sibling(out, ".curve.png"))
    click.echo(f"theta_fail={enc.meta['theta_fail']:.6g} held-out mse={enc.meta['heldout_mse']:.6g} -> {out}")


@cli.command("attack")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--trajectory", type=click.Path(path_type=Path), help="Directory for intermediate patches.")
@click.option("--fixed-position", "fixed", metavar="ROW,COL", help="Keep the patch at one origin instead of random placement.")
@common
def attack_cmd(data, ckpt, trajectory, fixed, config, seed, out):
    """Optimise a universal EDPA patch against a frozen checkpoint."""
    cfg = make_config(AttackConfig, load_kv(config), seed)
    if fixed:
        try:
            row, col = (int(v) for v in fixed.split(","))
        except ValueError:
            raise ConfigError(f"--fixed-position expects ROW,COL, got {fixed!r}") from None
        cfg = replace(cfg, position="fixed", fixed_row=row, fixed_col=col)
    enc = load_encoders(ckpt)
    samples = load_dataset(data)
    out.parent.mkdir(parents=True, exist_ok=True)
    traj_dir = trajectory or sibling(out, ".trajectory")
    writer = JsonLines(sibling(out, ".log.jsonl"))
    try:
        traj = edpa_attack(samples, enc, cfg, on_log=writer)
    except AttackAborted as exc:
        exc.trajectory.save(traj_dir)
        raise
    finally:
        writer.close()
    traj.save(traj_dir)
    final = traj.final
    save_patch(out, final, {"config": asdict(cfg), "checkpoint": str(ckpt)})
    export_ppm(sibling(out, ".ppm"), final.pixels)
    plotting.plot_curve(writer.rows, ["J", "L_patch", "L_align"], sibling(out, ".curve.png"))
    plotting.plot_patch(final.pixels, sibling(out, ".png"))
    click.echo(f"final J={traj.snapshots[-1][2]:.6g}; {len(traj.snapshots)} snapshots in {traj_dir} -> {out}")


@cli.command("finetune")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@common
def finetune_cmd(data, ckpt, config, seed, out):
    """Adversarially fine-tune the visual encoder of a checkpoint."""
    cfg = make_config(DefenseConfig, load_kv(config), seed)
    enc = load_encoders(ckpt)
    samples = load_dataset(data)
    out.parent.mkdir(parents=True, exist_ok=True)
    writer = JsonLines(sibling(out, ".log.jsonl"))
    try:
        result = adversarial_finetune(samples, enc, cfg, on_log=writer)
    except FinetuneAborted as exc:
        enc.with_visual(exc.last_good).save(sibling(out, ".last_good"))
        raise
    finally:
        writer.close()
    robust = enc.with_visual(result.visual)
    robust.meta["finetune"] = asdict(cfg)
    robust.meta["resets"] = result.resets
    robust.save(out)
    images = np.stack([s.image for s in samples[: min(len(samples), 512)]])
    fid = clean_fidelity(result.visual, enc.visual, images)
    if fid > cfg.clean_budget:
        log.warning("clean fidelity %.4g exceeds budget %.4g", fid, cfg.clean_budget)
    plotting.plot_curve(writer.rows, ["loss", "clean_term", "adv_term", "J"], sibling(out, ".curve.png"))
    click.echo(f"resets={len(result.resets)} clean fidelity={fid:.4g} -> {out}")


def _eval_config(config, seed) -> tuple[EvalConfig, int]:
    kv = load_kv(config)
    cfg = make_config(EvalConfig, kv, None, extra_ok={"seed"})
    base = seed if seed is not None else int(kv.get("seed", 0))
    return cfg, base


def _seed_runs(enc, samples, condition, patch, theta, cfg: EvalConfig, base: int):
    return [
        evaluate(enc, samples, condition, patch, theta=theta, seed=base + k, patch_dims=(cfg.patch_h, cfg.patch_w), **cfg.kwargs())
        for k in range(cfg.seeds)
    ]


@cli.command("eval")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--patch", type=click.Path(exists=True, dir_okay=False, path_type=Path), help="EDPA patch; omit to score clean and random only.")
@common
def eval_cmd(data, ckpt, patch, config, seed, out):
    """Failure rates for clean, random-patch and EDPA conditions (CSV + figure)."""
    cfg, base = _eval_config(config, seed)
    enc = load_encoders(ckpt)
    theta = theta_of(enc)
    samples = load_dataset(data)
    adv = load_patch(patch) if patch else None
    if adv is not None:
        cfg = replace(cfg, patch_h=adv.dims[0], patch_w=adv.dims[1])
    conditions = ["clean", "random"] + (["edpa"] if adv is not None else [])
    per_seed, means, extra = [], [], []
    for cond in conditions:
        runs = _seed_runs(enc, samples, cond, adv, theta, cfg, base)
        per_seed += runs
        extra += [{"aggregate": "seed"}] * len(runs)
        means.append(mean_record(runs, label=f"std_fr={std_failure_rate(runs):.6g}"))
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(out, per_seed + means, extra + [{"aggregate": "mean"}] * len(means))
    plotting.plot_conditions(means, sibling(out, ".png"))
    for m in means:
        click.echo(f"{m.condition:>6}: FR={m.failure_rate:.4f} diag_cos={m.diag_cosine:.4f}")


@cli.command("transfer")
@click.option("--patch", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--source-ckpt", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--source-data", required=True, type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--target-ckpt", type=click.Path(exists=True, dir_okay=False, path_type=Path), help="Defaults to the source checkpoint.")
@click.option("--target-data", type=click.Path(exists=True, file_okay=False, path_type=Path), help="Defaults to the source data.")
@common
def transfer_cmd(patch, source_ckpt, source_data, target_ckpt, target_data, config, seed, out):
    """Score a patch on its source setup and on a different dataset or encoder."""
    cfg, base = _eval_config(config, seed)
    adv = load_patch(patch)
    src = (load_encoders(source_ckpt), load_dataset(source_data))
    tgt = (load_encoders(target_ckpt or source_ckpt), load_dataset(target_data or source_data))
    theta_of(src[0]), theta_of(tgt[0])
    kw = cfg.kwargs()
    rows, extra = [], []
    for k in range(cfg.seeds):
        # each side is scored against its own checkpoint's threshold
        s, t = transfer_eval(adv, src, tgt, seed=base + k, **kw)
        rand = evaluate(tgt[0], tgt[1], "random", theta=theta_of(tgt[0]), seed=base + k, patch_dims=adv.dims, **kw)
        rows += [s, t, replace(rand, label="target")]
        extra += [{"setup": "source"}, {"setup": "target"}, {"setup": "target"}]
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(out, rows, extra)
    summary = [mean_record(rows[i::3]) for i in range(3)]
    for m, name in zip(summary, ("source", "target", "target-random")):
        m.condition = name
    plotting.plot_conditions(summary, sibling(out, ".png"))
    for m in summary:
        click.echo(f"{m.condition:>13}: FR={m.failure_rate:.4f}")


@cli.command("ablate")
@click.option("--kind", required=True, type=click.Choice(["size", "alpha1"]))
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False, path_type=Path), help="Attack training data.")
@click.option("--test", "test_data", required=True, type=click.Path(exists=True, file_okay=False, path_type=Path), help="Held-out evaluation data.")
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--seeds", type=int, default=3, show_default=True)
@common
def ablate_cmd(kind, data, test_data, ckpt, seeds, config, seed, out):
    """Patch-size or alpha1 sweep with seed-averaged failure rates (CSV + figure)."""
    kv = load_kv(config)
    grid_key = "grid"
    cfg = make_config(AttackConfig, kv, None, extra_ok={grid_key})
    base_seed = seed if seed is not None else cfg.seed
    grid = tuple(float(v) for v in kv[grid_key].split(",")) if grid_key in kv else (SIZE_GRID if kind == "size" else ALPHA_GRID)
    enc = load_encoders(ckpt)
    theta = theta_of(enc)
    train, test = load_dataset(data), load_dataset(test_data)
    seed_list = [base_seed + k for k in range(seeds)]
    if kind == "size":
        recs = ablate_patch_size(enc, train, test, grid, cfg, seed_list)
        sides = [side_for_fraction(f, enc.geometry.height, enc.geometry.width) for f in grid]
        baselines = [
            mean_record([evaluate(enc, test, "random", theta=theta, seed=s, patch_dims=(n, n)) for s in seed_list]).failure_rate
            for n in sides
        ]
        extra = [{"fraction": f, "side": n, "random_fr": b} for f, n, b in zip(grid, sides, baselines)]
        xlabel, baseline = "patch area (fraction of image)", None
    else:
        recs = ablate_alpha1(enc, train, test, grid, cfg, seed_list)
        rand = mean_record([evaluate(enc, test, "random", theta=theta, seed=s, patch_dims=(cfg.patch_h, cfg.patch_w)) for s in seed_list])
        extra = [{"alpha1": a, "random_fr": rand.failure_rate} for a in grid]
        xlabel, baseline = "alpha1", rand.failure_rate
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(out, recs, extra)
    plotting.plot_ablation(grid, recs, sibling(out, ".png"), xlabel, baseline)
    for e, r in zip(extra, recs):
        click.echo(f"{r.label:>28}: FR={r.failure_rate:.4f}")


@cli.command("heatmap")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--index", type=int, default=0, show_default=True, help="Record to visualise.")
@click.option("--patch", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--at", metavar="ROW,COL", help="Patch origin; random from --seed when omitted.")
@common
def heatmap_cmd(data, ckpt, index, patch, at, config, seed, out):
    """Block-by-token cosine matrix as CSV, PGM and PNG."""
    from edpa.patching import PlacementMask

    enc = load_encoders(ckpt)
    samples = load_dataset(data)
    if not 0 <= index < len(samples):
        raise ConfigError(f"--index {index} outside dataset of {len(samples)} records")
    sample = samples[index]
    clean = alignment_heatmap(enc, sample)
    labels = [VOCAB[t] for t in sample.tokens]
    out.parent.mkdir(parents=True, exist_ok=True)
    maps = {"clean": clean}
    if patch:
        adv_patch = load_patch(patch)
        mask = None
        if at:
            r, c = (int(v) for v in at.split(","))
            mask = PlacementMask((r, c), adv_patch.dims, (enc.geometry.height, enc.geometry.width))
        maps["edpa"] = alignment_heatmap(enc, sample, adv_patch, mask, seed=seed or 0)
    for name, hm in maps.items():
        stem = sibling(out, f".{name}")
        np.savetxt(sibling(stem, ".csv"), hm.matrix, delimiter=",", fmt="%.10g")
        sibling(stem, ".pgm").write_bytes(heatmap_pgm(hm.matrix))
        covered = covered_blocks(hm.mask, enc.geometry.patch_size, enc.geometry.width) if hm.mask else None
        plotting.plot_heatmap(hm.matrix, sibling(stem, ".png"), labels, covered)
    summary = {"index": index, "tokens": labels}
    if "edpa" in maps:
        summary["mean_abs_difference"] = heatmap_difference(clean, maps["edpa"])
        summary["covered_mass"] = maps["edpa"].covered_mass.tolist()
        summary["origin"] = list(maps["edpa"].mask.origin)
    sibling(out, ".json").write_text(json.dumps(summary, indent=1) + "\n", encoding="utf-8")
    click.echo(json.dumps(summary))


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="edpa", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 130
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except EdpaError as exc:
        click.echo(f"error [{type(exc).__name__}]: {exc}", err=True)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
