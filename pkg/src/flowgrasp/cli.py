"""Command-line interface: dataset generation, training, sampling, scoring,
OOD analysis and the fusion benchmark.

All commands are non-interactive and deterministic per seed. Every output
directory receives the exact resolved configuration (`resolved_config.json`);
wall-clock metadata is confined to `run_meta.json` so repeated runs with the
same config produce bit-identical artifacts otherwise.

Exit codes: 0 success, 1 usage error, 2 data/serialization error,
3 numeric failure.
"""

import csv
import json
import pathlib
import sys
import time

import click
import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .checkpoint import load_model, save_model
from .datasetgen import (DatasetConfig, GraspDataset, SPLITS, build_dataset,
                         label_grasp, mine_evaluator_pairs)
from .errors import ContractError, DataError, NumericError, SerializationError
from .evaluator import DEFAULT_EPSILON, EPSILON_GRID, GraspEvaluator, fuse
from .grasps import GraspConfig, grasp_from_vector
from .models import PRESETS


# --------------------------------------------------------------------------
# plumbing


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as e:
        raise click.UsageError(f"invalid config file {path}: {e}")


def _resolve(flag_value, config, key, default):
    """Explicit flags win over the config file, which wins over defaults."""
    if flag_value is not None:
        return flag_value
    if key in config:
        return config[key]
    return default


def _prepare_out(out):
    out = pathlib.Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved_config(out, resolved):
    with open(out / "resolved_config.json", "w") as f:
        json.dump(resolved, f, sort_keys=True, indent=1)
        f.write("\n")


def _write_meta(out, command, started, **extra):
    meta = {"command": command, "started_unix": started,
            "elapsed_seconds": time.time() - started, **extra}
    with open(out / "run_meta.json", "w") as f:
        json.dump(meta, f, sort_keys=True, indent=1)
        f.write("\n")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _parse_families(values):
    """Each --families flag is a comma-separated list; returns a list of
    family groups."""
    groups = []
    for v in values:
        fams = tuple(s.strip() for s in v.split(",") if s.strip())
        if not fams:
            raise click.UsageError("--families must name at least one family")
        groups.append(fams)
    return groups


def _load_sampler(path):
    est = load_model(path)
    if isinstance(est, GraspEvaluator):
        raise DataError(f"{path} is an evaluator checkpoint, not a sampler")
    return est


def _view_items(dataset, split, families):
    views = dataset.views(split, families)
    if not views:
        raise DataError(
            f"no views in split {split!r}"
            + (f" for families {families}" if families else ""))
    return list(views.items())


@click.group()
def cli():
    """Flow-based grasp synthesis toolkit."""


# --------------------------------------------------------------------------
# dataset


@cli.command("dataset")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", required=True, type=click.Path())
def cmd_dataset(config_path, seed, out):
    """Generate the synthetic grasp dataset."""
    started = time.time()
    config = _load_config(config_path)
    dcfg = dict(config.get("dataset", {}))
    dcfg["seed"] = _resolve(seed, dcfg, "seed", 0)
    try:
        ds_config = DatasetConfig(**dcfg)
    except TypeError as e:
        raise click.UsageError(f"bad dataset config: {e}")
    out = _prepare_out(out)
    manifest = build_dataset(ds_config, out)
    _write_resolved_config(out, {"dataset": ds_config.to_dict()})
    _write_meta(out, "dataset", started, records=manifest["records"])
    click.echo(json.dumps(manifest["positive_rate"], sort_keys=True))


# --------------------------------------------------------------------------
# train


@cli.command("train")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", required=True, type=click.Path())
@click.option("--dataset", "dataset_dir", required=True, type=click.Path())
@click.option("--preset", type=click.Choice(sorted(PRESETS)), default=None,
              help="Sampler preset (ignored with --evaluator).")
@click.option("--evaluator", "train_evaluator", is_flag=True,
              help="Train the discriminative grasp evaluator instead.")
def cmd_train(config_path, seed, out, dataset_dir, preset, train_evaluator):
    """Train a grasp sampler (or the evaluator) on a generated dataset."""
    started = time.time()
    config = _load_config(config_path)
    seed = _resolve(seed, config, "seed", 0)
    dataset = GraspDataset.load(dataset_dir)
    out = _prepare_out(out)

    if train_evaluator:
        params = dict(config.get("evaluator", {}))
        params["seed"] = seed
        try:
            est = GraspEvaluator(**params)
        except TypeError as e:
            raise click.UsageError(f"bad evaluator config: {e}")
        mining = dict(config.get("mining", {}))
        clouds, grasps, labels = mine_evaluator_pairs(
            dataset, "train", seed=seed, **mining)
        est.fit(clouds, grasps, labels)
        kind = "evaluator"
        extra = {"val_accuracy": est.val_accuracy_}
    else:
        preset = _resolve(preset, config, "preset", "lvm")
        if preset not in PRESETS:
            raise click.UsageError(f"unknown preset {preset!r}")
        cls, overrides = PRESETS[preset]
        params = {**overrides, **config.get("model", {}), "seed": seed}
        try:
            est = cls(**params)
        except TypeError as e:
            raise click.UsageError(f"bad model config: {e}")
        clouds, grasps = dataset.training_pairs("train")
        est.fit(clouds, grasps)
        kind = preset
        extra = {}

    save_model(est, out / "model.fgckpt")
    terms = getattr(est, "term_curves_", {})
    header = ["iteration", "loss"] + sorted(terms)
    rows = [[i, loss] + [terms[k][i] for k in sorted(terms)]
            for i, loss in enumerate(est.loss_curve_)]
    _write_csv(out / "loss.csv", header, rows)
    _write_resolved_config(out, {"kind": kind, "seed": seed,
                                 "params": est.get_params(),
                                 "dataset": str(dataset_dir)})
    _write_meta(out, "train", started, diverged=bool(est.diverged_), **extra)
    click.echo(f"trained {kind}; final loss "
               f"{est.loss_curve_[-1] if est.loss_curve_ else float('nan')}")


# --------------------------------------------------------------------------
# sample


@cli.command("sample")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", required=True, type=click.Path())
@click.option("--model", "model_path", required=True, type=click.Path())
@click.option("--dataset", "dataset_dir", required=True, type=click.Path())
@click.option("--n-grasps", type=int, default=None)
@click.option("--split", type=click.Choice(SPLITS), default=None)
@click.option("--families", multiple=True)
def cmd_sample(config_path, seed, out, model_path, dataset_dir, n_grasps,
               split, families):
    """Sample grasps for every view in a dataset split."""
    started = time.time()
    config = _load_config(config_path)
    seed = _resolve(seed, config, "seed", 0)
    n_grasps = _resolve(n_grasps, config, "n_grasps", 32)
    split = _resolve(split, config, "split", "similar")
    fams = sum(_parse_families(families), ()) or None
    sampler = _load_sampler(model_path)
    dataset = GraspDataset.load(dataset_dir)
    out = _prepare_out(out)

    rows = []
    for view_idx, (cloud_file, _) in enumerate(_view_items(dataset, split, fams)):
        cloud = dataset.cloud(cloud_file)
        for i, s in enumerate(sampler.sample(cloud, n_grasps, seed=seed + view_idx)):
            rows.append([cloud_file, i] + [float(v) for v in s.vector]
                        + [s.grasp_logp,
                           float("nan") if s.prior_logp is None else s.prior_logp,
                           s.clamped_joints])
    header = (["cloud_file", "sample"] + [f"g{j}" for j in range(24)]
              + ["grasp_logp", "prior_logp", "clamped_joints"])
    _write_csv(out / "grasps.csv", header, rows)
    _write_resolved_config(out, {"seed": seed, "n_grasps": n_grasps,
                                 "split": split, "families": fams,
                                 "model": str(model_path),
                                 "dataset": str(dataset_dir)})
    _write_meta(out, "sample", started, rows=len(rows))
    click.echo(f"wrote {len(rows)} grasps to {out / 'grasps.csv'}")


# --------------------------------------------------------------------------
# score


@cli.command("score")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", required=True, type=click.Path())
@click.option("--model", "model_path", required=True, type=click.Path())
@click.option("--evaluator", "evaluator_path", type=click.Path(), default=None)
@click.option("--dataset", "dataset_dir", required=True, type=click.Path())
@click.option("--epsilon", type=float, default=None)
@click.option("--n-grasps", type=int, default=None)
@click.option("--split", type=click.Choice(SPLITS), default=None)
@click.option("--families", multiple=True)
def cmd_score(config_path, seed, out, model_path, evaluator_path, dataset_dir,
              epsilon, n_grasps, split, families):
    """Sample grasps and write fused rankings for a given epsilon."""
    started = time.time()
    config = _load_config(config_path)
    seed = _resolve(seed, config, "seed", 0)
    epsilon = _resolve(epsilon, config, "epsilon", DEFAULT_EPSILON)
    n_grasps = _resolve(n_grasps, config, "n_grasps", 32)
    split = _resolve(split, config, "split", "similar")
    evaluator_path = _resolve(evaluator_path, config, "evaluator", None)
    if evaluator_path is None and epsilon != 0.0:
        raise click.UsageError("--epsilon > 0 requires --evaluator")
    fams = sum(_parse_families(families), ()) or None

    sampler = _load_sampler(model_path)
    evaluator = None
    if evaluator_path is not None:
        evaluator = load_model(evaluator_path)
        if not isinstance(evaluator, GraspEvaluator):
            raise DataError(f"{evaluator_path} is not an evaluator checkpoint")
    dataset = GraspDataset.load(dataset_dir)
    out = _prepare_out(out)

    rows = []
    for view_idx, (cloud_file, _) in enumerate(_view_items(dataset, split, fams)):
        cloud = dataset.cloud(cloud_file)
        samples = sampler.sample(cloud, n_grasps, seed=seed + view_idx)
        logps = np.array([s.grasp_logp for s in samples])
        scores = (evaluator.evaluate(cloud, [s.vector for s in samples])
                  if evaluator is not None else np.zeros(len(samples)))
        fused = fuse(scores, logps, epsilon)
        order = np.argsort(-fused, kind="stable")
        for rank, i in enumerate(order):
            rows.append([cloud_file, rank, int(i), float(fused[i]),
                         float(scores[i]), float(logps[i])])
    _write_csv(out / "rankings.csv",
               ["cloud_file", "rank", "sample", "fused", "score", "grasp_logp"],
               rows)
    _write_resolved_config(out, {"seed": seed, "epsilon": epsilon,
                                 "n_grasps": n_grasps, "split": split,
                                 "families": fams, "model": str(model_path),
                                 "evaluator": (None if evaluator_path is None
                                               else str(evaluator_path)),
                                 "dataset": str(dataset_dir)})
    _write_meta(out, "score", started, rows=len(rows))
    click.echo(f"wrote rankings to {out / 'rankings.csv'}")


# --------------------------------------------------------------------------
# ood


@cli.command("ood")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", required=True, type=click.Path())
@click.option("--model", "model_path", required=True, type=click.Path())
@click.option("--dataset", "dataset_dir", required=True, type=click.Path())
@click.option("--families", multiple=True,
              help="Comma-separated family list; give twice (in-distribution "
                   "then out-of-distribution) to compute AUROC.")
def cmd_ood(config_path, seed, out, model_path, dataset_dir, families):
    """Score per-cloud distribution familiarity; AUROC across two groups."""
    started = time.time()
    config = _load_config(config_path)
    seed = _resolve(seed, config, "seed", 0)
    groups = _parse_families(families)
    if not groups:
        groups = [("box", "cylinder"), ("lshape", "capsule")]
    if len(groups) > 2:
        raise click.UsageError("at most two --families groups are supported")

    sampler = _load_sampler(model_path)
    if not hasattr(sampler, "ood_score"):
        raise DataError("this model does not expose an OOD score "
                        "(use an lvm preset)")
    dataset = GraspDataset.load(dataset_dir)
    out = _prepare_out(out)

    rows, labels, scores = [], [], []
    for gi, fams in enumerate(groups):
        seen = set()
        for rec in dataset.records:
            if rec.family not in fams or rec.cloud_file in seen:
                continue
            seen.add(rec.cloud_file)
            s = sampler.ood_score(dataset.cloud(rec.cloud_file), seed=seed)
            rows.append([rec.cloud_file, rec.family, gi, s])
            labels.append(gi)
            scores.append(s)
        if not seen:
            raise DataError(f"no clouds for families {fams}")
    _write_csv(out / "ood_scores.csv",
               ["cloud_file", "family", "group", "ood_score"], rows)

    summary = {"groups": [list(g) for g in groups], "n_clouds": len(rows)}
    if len(groups) == 2:
        from sklearn.metrics import roc_auc_score
        # group 0 is in-distribution and should score higher
        summary["auroc"] = float(
            roc_auc_score(np.array(labels) == 0, np.array(scores)))
    with open(out / "summary.json", "w") as f:
        json.dump(summary, f, sort_keys=True, indent=1)
        f.write("\n")
    _write_resolved_config(out, {"seed": seed,
                                 "families": [list(g) for g in groups],
                                 "model": str(model_path),
                                 "dataset": str(dataset_dir)})
    _write_meta(out, "ood", started)
    click.echo(json.dumps(summary, sort_keys=True))


# --------------------------------------------------------------------------
# bench


def _top1_feasible(records, sample, spec):
    """Oracle-label one canonical-frame sample against the view's shape."""
    rec = records[0]
    g, _ = grasp_from_vector(sample.vector)
    world = GraspConfig(
        rotation=g.rotation,
        translation=np.asarray(g.translation) / rec.scale + np.asarray(rec.center),
        joints=g.joints)
    return label_grasp(spec, world).feasible


@cli.command("bench")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", required=True, type=click.Path())
@click.option("--model", "model_path", required=True, type=click.Path())
@click.option("--evaluator", "evaluator_path", required=True, type=click.Path())
@click.option("--dataset", "dataset_dir", required=True, type=click.Path())
@click.option("--n-grasps", type=int, default=None)
@click.option("--split", type=click.Choice(SPLITS), default=None)
def cmd_bench(config_path, seed, out, model_path, evaluator_path, dataset_dir,
              n_grasps, split):
    """Top-1 oracle-feasible rate per selection strategy across the epsilon
    grid: no ranking, evaluator only, and evaluator fused with the grasp- or
    prior-flow likelihood."""
    started = time.time()
    config = _load_config(config_path)
    seed = _resolve(seed, config, "seed", 0)
    n_grasps = _resolve(n_grasps, config, "n_grasps", 32)
    split = _resolve(split, config, "split", "similar")

    sampler = _load_sampler(model_path)
    evaluator = load_model(evaluator_path)
    if not isinstance(evaluator, GraspEvaluator):
        raise DataError(f"{evaluator_path} is not an evaluator checkpoint")
    dataset = GraspDataset.load(dataset_dir)
    out = _prepare_out(out)

    hits = {}          # (strategy, epsilon or None) -> feasible count
    rng = np.random.default_rng(seed)
    items = _view_items(dataset, split, None)
    for view_idx, (cloud_file, recs) in enumerate(items):
        cloud = dataset.cloud(cloud_file)
        spec = recs[0].shape_spec()
        samples = sampler.sample(cloud, n_grasps, seed=seed + view_idx)
        grasp_lp = np.array([s.grasp_logp for s in samples])
        prior_lp = (np.array([s.prior_logp for s in samples])
                    if samples[0].prior_logp is not None else None)
        scores = evaluator.evaluate(cloud, [s.vector for s in samples])
        feasible_cache = {}

        def feasible(i):
            if i not in feasible_cache:
                feasible_cache[i] = _top1_feasible(recs, samples[i], spec)
            return feasible_cache[i]

        def tally(strategy, eps, i):
            key = (strategy, eps)
            hits[key] = hits.get(key, 0) + int(feasible(i))

        tally("no-ranking", None, int(rng.integers(n_grasps)))
        tally("evaluator-only", None, int(np.argmax(scores)))
        for eps in EPSILON_GRID:
            tally("evaluator+grasp-flow", eps,
                  int(np.argmax(fuse(scores, grasp_lp, eps))))
            if prior_lp is not None:
                tally("evaluator+prior-flow", eps,
                      int(np.argmax(fuse(scores, prior_lp, eps))))

    n_views = len(items)
    rows = [[strategy, "" if eps is None else eps, count / n_views, n_views]
            for (strategy, eps), count in sorted(
                hits.items(), key=lambda kv: (kv[0][0], kv[0][1] or 0.0))]
    _write_csv(out / "bench.csv",
               ["strategy", "epsilon", "top1_feasible_rate", "n_views"], rows)
    _write_resolved_config(out, {"seed": seed, "n_grasps": n_grasps,
                                 "split": split, "model": str(model_path),
                                 "evaluator": str(evaluator_path),
                                 "dataset": str(dataset_dir)})
    _write_meta(out, "bench", started, n_views=n_views)
    for row in rows:
        click.echo(f"{row[0]:24s} eps={row[1]!s:5s} rate={row[2]:.3f}")


# --------------------------------------------------------------------------
# entry point


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.UsageError as e:
        e.show(file=sys.stderr)
        return 1
    except click.ClickException as e:
        e.show(file=sys.stderr)
        return 1
    except click.Abort:
        print("aborted", file=sys.stderr)
        return 1
    except ContractError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (DataError, SerializationError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
