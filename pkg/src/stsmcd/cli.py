"""Command-line entry point: dataset synthesis, training, evaluation, gradient
checking, and the scan-scaling benchmark.

Commands exit 0 on success and print a single `error: ...` line to stderr with
a nonzero exit code otherwise. `STSMCD_SEED` provides the seed when no flag or
config value does.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import bench, data, gradcheck, losses, metrics, models
from .optim import AdamW


@dataclass
class RunConfig:
    task: str = "bcd"
    variant: str = "micro"
    lr: float = 1e-4
    weight_decay: float = 5e-3
    batch: int = 16
    iters: int = 500
    seed: int = 0
    data_dir: str = "dataset"
    out_dir: str = "run"
    ckpt_every: int = 100
    augment: bool = True
    workers: int = 1
    num_classes: int = 6
    gate_mode: str = "sum"
    scan_mode: str = "euler"


def _coerce(value: str, target_type):
    if target_type is bool:
        return value.strip().lower() in ("1", "true", "yes", "on")
    return target_type(value)


def load_config_file(path) -> dict:
    """UTF-8 `key = value` lines; blank lines and # comments allowed."""
    out = {}
    types = {f.name: f.type for f in fields(RunConfig)}
    typemap = {"str": str, "float": float, "int": int, "bool": bool}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ValueError(f"{path}:{lineno}: unknown config key '{key}'")
        out[key] = _coerce(value, typemap[str(types[key])] if isinstance(types[key], str) else types[key])
    return out


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        for key, value in load_config_file(args.config).items():
            setattr(cfg, key, value)
    for f in fields(RunConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            setattr(cfg, f.name, flag)
    if cfg.seed is None:
        cfg.seed = int(os.environ.get("STSMCD_SEED", "0"))
    return cfg


def _env_seed(value) -> int | None:
    if value is not None:
        return value
    env = os.environ.get("STSMCD_SEED")
    return int(env) if env is not None else None


# --- commands ---------------------------------------------------------------------------------


def cmd_synth(args) -> int:
    seed = _env_seed(args.seed) or 0
    manifest = data.synth_generate(
        args.task, args.count, args.size, args.size, seed, args.out, num_classes=args.classes
    )
    print(f"wrote {args.count} samples to {manifest.parent}")
    return 0


def _model_config(cfg: RunConfig) -> models.ModelConfig:
    return models.make_config(
        cfg.variant,
        gate_mode=cfg.gate_mode,
        scan_mode=cfg.scan_mode,
        num_semantic_classes=cfg.num_classes,
    )


def _sample_loss(model, sample: data.Sample):
    """Record one sample's loss graph; returns (graph, loss tensor).

    Per-node finite checks are off in the hot loop; the caller verifies the
    loss value each iteration instead."""
    x1 = ad.Tensor(sample.x1, name="x1")
    x2 = ad.Tensor(sample.x2, name="x2")
    with ad.Graph(check_finite=False) as graph:
        if model.task == "bcd":
            p = model.forward(x1, x2)
            loss = losses.bcd_loss(p, sample.labels["bcd"])
        elif model.task == "scd":
            p1, p2, pb = model.forward(x1, x2)
            loss = losses.scd_loss(
                p1, p2, pb, sample.labels["t1"], sample.labels["t2"], sample.labels["bcd"]
            )
        else:
            pl, pc = model.forward(x1, x2)
            loss = losses.bda_loss(pl, pc, sample.labels["loc"], sample.labels["clf"])
        loss.name = "loss"
    return graph, loss


def train(cfg: RunConfig, log=print) -> Path:
    """Deterministic training loop; the work list for every iteration is drawn
    in the main thread so `workers > 1` cannot change the result."""
    samples = data.load_dataset(cfg.data_dir)
    task = data.dataset_task(samples)
    if task != cfg.task:
        raise ValueError(f"dataset at {cfg.data_dir} is a {task} dataset, not {cfg.task}")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    model = models.build_model(cfg.task, _model_config(cfg), seed=cfg.seed)
    opt = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 0x7124])
    id_order = {id(t): name for name, t in model.parameters().items()}

    def one_sample(sample, aug_seed):
        inst = data.augment(sample, np.random.default_rng([cfg.seed, aug_seed])) if cfg.augment else sample
        graph, loss = _sample_loss(model, inst)
        grads: dict[int, np.ndarray] = {}
        graph.backward(loss, np.full_like(loss.data, 1.0 / cfg.batch), into=grads)
        return float(loss.data), grads

    log_lines = []
    t_start = time.perf_counter()
    for it in range(cfg.iters):
        picks = rng.integers(0, len(samples), size=cfg.batch)
        aug_seeds = rng.integers(0, 1 << 31, size=cfg.batch)
        jobs = [(samples[int(i)], int(s)) for i, s in zip(picks, aug_seeds)]
        opt.zero_grad()
        if cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                results = list(pool.map(lambda j: one_sample(*j), jobs))
        else:
            results = [one_sample(*j) for j in jobs]
        # reduce per-sample gradients in ascending sample-index order
        total = 0.0
        for loss_value, grads in results:
            total += loss_value
            for tid, g in grads.items():
                model.flat[id_order[tid]].grad += g
        mean_loss = total / cfg.batch
        if not np.isfinite(mean_loss):
            raise ArithmeticError(f"non-finite loss at iteration {it}")
        opt.step()
        log_lines.append(f"{it}\t{mean_loss:.12g}")
        if cfg.ckpt_every and (it + 1) % cfg.ckpt_every == 0 and (it + 1) < cfg.iters:
            ad.save_checkpoint(out_dir / f"model_{it + 1:06d}.cmck", model.parameters())
        if log and (it % max(1, cfg.iters // 10) == 0 or it == cfg.iters - 1):
            log(f"iter {it:5d}  loss {mean_loss:.6f}  ({time.perf_counter() - t_start:.1f}s)")
    (out_dir / "train.log").write_text("\n".join(log_lines) + "\n", encoding="utf-8")
    final = out_dir / "model_final.cmck"
    ad.save_checkpoint(final, model.parameters())
    return final


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    final = train(cfg)
    print(f"checkpoint written to {final}")
    return 0


def _parse_perturb(spec: str):
    if spec is None:
        return None
    if ":" not in spec:
        raise ValueError(f"perturbation '{spec}' must look like kind:value, e.g. blur:2.0")
    kind, value = spec.split(":", 1)
    if kind not in ("blur", "noise", "scale"):
        raise ValueError(f"unknown perturbation '{kind}', pick blur, noise or scale")
    return kind, float(value)


def predict_sample(model, sample: data.Sample) -> dict[str, np.ndarray]:
    """Run one forward pass without recording and argmax along the class axis.
    All-zero logits tie-break to class 0 (numpy argmax takes the first max)."""
    x1, x2 = ad.Tensor(sample.x1), ad.Tensor(sample.x2)
    if model.task == "bcd":
        p = model.forward(x1, x2)
        return {"bcd": np.argmax(p.data, axis=-1)}
    if model.task == "scd":
        p1, p2, pb = model.forward(x1, x2)
        return {
            "t1": np.argmax(p1.data, axis=-1),
            "t2": np.argmax(p2.data, axis=-1),
            "bcd": np.argmax(pb.data, axis=-1),
        }
    pl, pc = model.forward(x1, x2)
    return {"loc": np.argmax(pl.data, axis=-1), "clf": np.argmax(pc.data, axis=-1)}


def evaluate(
    checkpoint,
    data_dir,
    task: str,
    variant: str = "micro",
    out_dir=None,
    perturbation: tuple[str, float] | None = None,
    num_classes: int = 6,
    seed: int = 0,
    gate_mode: str = "sum",
    scan_mode: str = "euler",
) -> dict:
    samples = data.load_dataset(data_dir)
    if data.dataset_task(samples) != task:
        raise ValueError(f"dataset at {data_dir} does not match task '{task}'")
    cfg = models.make_config(
        variant, gate_mode=gate_mode, scan_mode=scan_mode, num_semantic_classes=num_classes
    )
    model = models.build_model(task, cfg, seed=0)
    model.load_flat(ad.load_checkpoint(checkpoint))

    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)

    bcd_conf = metrics.BinaryConfusion()
    q = np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64)
    loc_conf = metrics.BinaryConfusion()
    level_confs = [metrics.BinaryConfusion() for _ in range(4)]

    for idx, sample in enumerate(samples):
        if perturbation is not None:
            kind, value = perturbation
            prng = np.random.default_rng([seed, 0x9E57, idx])
            sample = data.Sample(
                sample.sample_id,
                *data.perturb([sample.x1, sample.x2], kind, value, prng),
                sample.labels,
            )
        preds = predict_sample(model, sample)
        if out:
            for key, arr in preds.items():
                sub = out / f"PRED_{key.upper()}"
                sub.mkdir(exist_ok=True)
                data.save_raster(sub / f"{sample.sample_id}.cmrd", arr.astype(np.uint8))
        if task == "bcd":
            bcd_conf.add(metrics.binary_confusion(preds["bcd"], sample.labels["bcd"]))
        elif task == "scd":
            gt1 = metrics.masked_label_map(sample.labels["t1"], sample.labels["bcd"])
            gt2 = metrics.masked_label_map(sample.labels["t2"], sample.labels["bcd"])
            pr1 = metrics.masked_label_map(preds["t1"], preds["bcd"])
            pr2 = metrics.masked_label_map(preds["t2"], preds["bcd"])
            q += metrics.semantic_confusion(gt1, pr1, num_classes)
            q += metrics.semantic_confusion(gt2, pr2, num_classes)
        else:
            loc_conf.add(metrics.binary_confusion(preds["loc"], sample.labels["loc"]))
            for lvl in range(1, 5):
                level_confs[lvl - 1].add(
                    metrics.binary_confusion(preds["clf"] == lvl, sample.labels["clf"] == lvl)
                )

    if task == "bcd":
        report = {"bcd": metrics.bcd_metrics(bcd_conf)}
    elif task == "scd":
        report = {"scd": metrics.scd_metrics(q)}
    else:
        report = {"bda": metrics.bda_metrics(loc_conf, level_confs)}
    text = metrics.format_report(report)
    if out:
        (out / "metrics.txt").write_text(text, encoding="utf-8")
    return report


def cmd_eval(args) -> int:
    if not Path(args.checkpoint).exists():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    report = evaluate(
        args.checkpoint,
        args.data,
        args.task,
        variant=args.variant,
        out_dir=args.out,
        perturbation=_parse_perturb(args.perturb),
        num_classes=args.classes,
        seed=_env_seed(args.seed) or 0,
        gate_mode=args.gate_mode,
        scan_mode=args.scan_mode,
    )
    sys.stdout.write(metrics.format_report(report))
    return 0


def cmd_gradcheck(args) -> int:
    ok, _ = gradcheck.run_checks(scope=args.scope, seed=_env_seed(args.seed) or 0)
    if not ok:
        raise ArithmeticError("gradient check failed, see table above")
    return 0


def cmd_bench(args) -> int:
    lengths = [int(v) for v in args.lengths.split(",")]
    rows = bench.run_benchmark(
        lengths, d=args.d, n=args.n, repeats=args.repeats, seed=_env_seed(args.seed) or 0
    )
    csv = bench.format_csv(rows)
    if args.out:
        Path(args.out).write_text(csv, encoding="utf-8")
    sys.stdout.write(csv)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stsmcd",
        description="Spatio-temporal state-space change detection at desk scale",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("synth", help="generate a synthetic dataset")
    ps.add_argument("--task", choices=("bcd", "scd", "bda"), required=True)
    ps.add_argument("--count", type=int, default=8)
    ps.add_argument("--size", type=int, default=64, help="square edge, divisible by 32")
    ps.add_argument("--seed", type=int, default=None)
    ps.add_argument("--classes", type=int, default=6)
    ps.add_argument("--out", default="dataset")
    ps.set_defaults(fn=cmd_synth)

    pt = sub.add_parser("train", help="train a model on a synthetic dataset")
    pt.add_argument("--config", default=None, help="key = value file; flags override")
    for name, typ in (
        ("task", str), ("variant", str), ("lr", float), ("weight-decay", float),
        ("batch", int), ("iters", int), ("seed", int), ("data-dir", str),
        ("out-dir", str), ("ckpt-every", int), ("workers", int), ("num-classes", int),
        ("gate-mode", str), ("scan-mode", str),
    ):
        pt.add_argument(f"--{name}", dest=name.replace("-", "_"), type=typ, default=None)
    pt.add_argument("--augment", dest="augment", action="store_true", default=None)
    pt.add_argument("--no-augment", dest="augment", action="store_false")
    pt.set_defaults(fn=cmd_train)

    pe = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    pe.add_argument("--checkpoint", required=True)
    pe.add_argument("--data", required=True)
    pe.add_argument("--task", choices=("bcd", "scd", "bda"), required=True)
    pe.add_argument("--variant", default="micro")
    pe.add_argument("--classes", type=int, default=6)
    pe.add_argument("--out", default=None)
    pe.add_argument("--perturb", default=None, help="blur:SIGMA | noise:SIGMA | scale:RATIO")
    pe.add_argument("--seed", type=int, default=None)
    pe.add_argument("--gate-mode", dest="gate_mode", default="sum")
    pe.add_argument("--scan-mode", dest="scan_mode", default="euler")
    pe.set_defaults(fn=cmd_eval)

    pg = sub.add_parser("gradcheck", help="finite-difference checks for ops, blocks, models")
    pg.add_argument("--scope", default="all", help="all | primitives | blocks | models | <name>")
    pg.add_argument("--seed", type=int, default=None)
    pg.set_defaults(fn=cmd_gradcheck)

    pb = sub.add_parser("bench", help="scan vs attention wall-clock scaling")
    pb.add_argument("--lengths", default="512,1024,2048,4096")
    pb.add_argument("--d", type=int, default=16)
    pb.add_argument("--n", type=int, default=4)
    pb.add_argument("--repeats", type=int, default=3)
    pb.add_argument("--seed", type=int, default=None)
    pb.add_argument("--out", default=None)
    pb.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # single-line machine-parseable failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
