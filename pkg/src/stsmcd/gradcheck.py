"""Finite-difference verification registry: every primitive kind, the composite
blocks, and each full micro model through its composite loss.

Primitives are probed at step 1e-5 / tol 1e-4 on small random tensors; blocks
and models at step 1e-4 / tol 1e-3.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import blocks, data, losses, models, scan2d
from .autodiff import Tensor


@dataclass
class CheckSpec:
    name: str
    scope: str  # primitive | block | model
    build: Callable  # (rng) -> (graph, output, leaves)
    step: float
    tol: float
    samples: int = 64


def _scalarize(t: Tensor) -> Tensor:
    out = ad.reduce_sum(ad.mul(t, t)) if t.data.size > 1 else ad.reduce_sum(t)
    out.name = "check_out"
    return out


def _finish(builder):
    def build(rng):
        with ad.Graph() as g:
            out, leaves = builder(rng)
            out = _scalarize(out)
        return g, out, leaves

    return build


def _p(rng, *shape, scale=1.0):
    return ad.param(rng.normal(size=shape) * scale)


def _primitive_checks() -> list[CheckSpec]:
    def simple(name, builder, samples=64):
        return CheckSpec(name, "primitive", _finish(builder), step=1e-5, tol=1e-4, samples=samples)

    def b_add(rng):
        a, b = _p(rng, 3, 4), _p(rng, 4)  # broadcast on purpose
        return ad.add(a, b), [a, b]

    def b_sub(rng):
        a, b = _p(rng, 3, 4), _p(rng, 3, 4)
        return ad.sub(a, b), [a, b]

    def b_mul(rng):
        a, b = _p(rng, 2, 3, 4), _p(rng, 3, 4)
        return ad.mul(a, b), [a, b]

    def b_scale(rng):
        a = _p(rng, 3, 3)
        return ad.scale(a, -1.7), [a]

    def b_exp(rng):
        a = _p(rng, 3, 4, scale=0.5)
        return ad.exp(a), [a]

    def b_log(rng):
        a = ad.param(rng.uniform(0.2, 2.0, size=(3, 4)))
        return ad.log(a), [a]

    def b_log_floor(rng):
        a = ad.param(rng.uniform(0.5, 2.0, size=(3, 4)))
        return ad.log(a, floor=1e-12), [a]

    def b_softplus(rng):
        a = _p(rng, 3, 4)
        return ad.softplus(a), [a]

    def b_silu(rng):
        a = _p(rng, 3, 4)
        return ad.silu(a), [a]

    def b_softmax(rng):
        a = _p(rng, 3, 5)
        return ad.softmax(a), [a]

    def b_layer_norm(rng):
        x, s, sh = _p(rng, 4, 6), ad.param(rng.uniform(0.5, 1.5, size=6)), _p(rng, 6)
        return ad.layer_norm(x, s, sh), [x, s, sh]

    def b_linear(rng):
        x, w, b = _p(rng, 4, 3), _p(rng, 3, 5), _p(rng, 5)
        return ad.linear(x, w, b), [x, w, b]

    def b_dir_linear(rng):
        x, w, b = _p(rng, 5, 4, 3), _p(rng, 4, 3, 2), _p(rng, 4, 2)
        return ad.dir_linear(x, w, b), [x, w, b]

    def b_concat(rng):
        a, b = _p(rng, 2, 3), _p(rng, 4, 3)
        return ad.concat([a, b], axis=0), [a, b]

    def b_slice(rng):
        a = _p(rng, 4, 4, 2)
        return ad.slice_(a, (slice(1, 3), slice(0, 2))), [a]

    def b_reshape(rng):
        a = _p(rng, 4, 6)
        return ad.reshape(a, (2, 2, 6)), [a]

    def b_transpose(rng):
        a = _p(rng, 2, 3, 4)
        return ad.transpose(a, (2, 0, 1)), [a]

    def b_upsample(rng):
        a = _p(rng, 3, 3, 2)
        return ad.upsample_nearest(a, 2), [a]

    def b_reduce_sum(rng):
        a = _p(rng, 3, 4, 2)
        return ad.reduce_sum(a, axis=(0, 2)), [a]

    def b_reduce_mean(rng):
        a = _p(rng, 3, 4, 2)
        return ad.reduce_mean(a, axis=1), [a]

    def b_gather_rows(rng):
        a = _p(rng, 6, 3)
        idx = rng.integers(0, 6, size=5)
        return ad.gather_rows(a, idx), [a]

    def b_select_class(rng):
        a = _p(rng, 6, 4)
        idx = rng.integers(0, 4, size=6)
        return ad.select_class(a, idx), [a]

    def b_scan_gather(rng):
        a = _p(rng, 12, 3)
        layout = scan2d.directional_layout(3, 4)
        return ad.scan_gather(a, layout.perms, layout.inv_perms), [a]

    def b_scan_scatter(rng):
        a = _p(rng, 12, 4, 3)
        layout = scan2d.directional_layout(4, 3)
        return ad.scan_scatter(a, layout.perms, layout.inv_perms), [a]

    def b_dwconv(rng):
        x, w, b = _p(rng, 4, 4, 3), _p(rng, 3, 3, 3, scale=0.4), _p(rng, 3)
        return ad.apply_op("depthwise_conv3x3", (x, w, b)), [x, w, b]

    def b_conv3(rng):
        x, w, b = _p(rng, 4, 4, 2), _p(rng, 3, 3, 2, 3, scale=0.4), _p(rng, 3)
        return ad.apply_op("conv3x3", (x, w, b)), [x, w, b]

    def b_strided(rng):
        x, w, b = _p(rng, 4, 4, 2), _p(rng, 8, 3, scale=0.4), _p(rng, 3)
        return ad.apply_op("strided_conv", (x, w, b), k=2), [x, w, b]

    def scan_builder(mode):
        def b_scan(rng):
            L, K, D, N = 5, 2, 3, 2
            u = _p(rng, L, K, D)
            delta = ad.param(rng.uniform(0.05, 0.5, size=(L, K, D)))
            bb = _p(rng, L, K, N)
            cc = _p(rng, L, K, N)
            aa = ad.param(-np.abs(rng.normal(size=(K, D, N))) - 0.05)
            skip = _p(rng, K, D)
            return ad.selective_scan(u, delta, bb, cc, aa, skip, mode=mode), [u, delta, bb, cc, aa, skip]

        return b_scan

    named = {
        "add": b_add, "sub": b_sub, "mul": b_mul, "scale": b_scale, "exp": b_exp,
        "log": b_log, "log_clamped": b_log_floor, "softplus": b_softplus,
        "silu": b_silu, "softmax": b_softmax, "layer_norm": b_layer_norm,
        "linear": b_linear, "dir_linear": b_dir_linear, "concat": b_concat,
        "slice": b_slice, "reshape": b_reshape, "transpose": b_transpose,
        "upsample_nearest": b_upsample, "reduce_sum": b_reduce_sum,
        "reduce_mean": b_reduce_mean, "gather_rows": b_gather_rows,
        "select_class": b_select_class, "scan_gather": b_scan_gather,
        "scan_scatter": b_scan_scatter, "depthwise_conv3x3": b_dwconv,
        "conv3x3": b_conv3, "strided_conv": b_strided,
        "selective_scan_euler": scan_builder("euler"),
        "selective_scan_zoh": scan_builder("zoh"),
    }
    return [simple(name, fn) for name, fn in named.items()]


def _block_checks() -> list[CheckSpec]:
    def spec(name, builder, samples=64):
        return CheckSpec(name, "block", _finish(builder), step=1e-4, tol=1e-3, samples=samples)

    def b_ss2d(rng):
        p = scan2d.init_ss2d(rng, d=4, n=2)
        x = _p(rng, 3, 4, 4)
        return scan2d.ss2d_forward(x, p), [x] + list(p.values())

    def b_vss(rng):
        p = blocks.init_vss_block(rng, c=4, n_state=2)
        # zero-init out projection hides the scan path; randomize to exercise it
        p["out_proj"]["w"].data = rng.normal(size=p["out_proj"]["w"].data.shape) * 0.3
        x = _p(rng, 4, 4, 4)
        return blocks.vss_block(x, p), [x] + list(blocks.flatten_params(p).values())

    def b_vss_mul(rng):
        p = blocks.init_vss_block(rng, c=4, n_state=2)
        p["out_proj"]["w"].data = rng.normal(size=p["out_proj"]["w"].data.shape) * 0.3
        x = _p(rng, 4, 4, 4)
        return blocks.vss_block(x, p, gate_mode="multiply"), [x] + list(
            blocks.flatten_params(p).values()
        )

    def b_stss(rng):
        p = blocks.init_stss_block(rng, c=4, n_state=2)
        for sub in ("vss_seq", "vss_crs", "vss_pra"):
            p[sub]["out_proj"]["w"].data = rng.normal(size=p[sub]["out_proj"]["w"].data.shape) * 0.3
        f1, f2 = _p(rng, 4, 4, 4), _p(rng, 4, 4, 4)
        return blocks.stss_block(f1, f2, p), [f1, f2] + list(blocks.flatten_params(p).values())

    def b_fuse(rng):
        p = blocks.init_fuse(rng, c_hi=3, c_lo=5)
        p["conv2"]["w"].data = rng.normal(size=p["conv2"]["w"].data.shape) * 0.3
        hi, lo = _p(rng, 4, 4, 3), _p(rng, 4, 4, 5)
        return blocks.fuse_levels(hi, lo, p), [hi, lo] + list(blocks.flatten_params(p).values())

    return [
        spec("ss2d_forward", b_ss2d),
        spec("vss_block", b_vss),
        spec("vss_block_multiply", b_vss_mul),
        spec("stss_block", b_stss),
        spec("fuse_levels", b_fuse),
    ]


def _model_checks() -> list[CheckSpec]:
    """Each micro model through its composite loss at the smallest legal size."""

    def build_for(task):
        def build(rng):
            cfg = models.make_config("micro", num_semantic_classes=3)
            model = models.build_model(task, cfg, seed=int(rng.integers(1 << 30)))
            # zero-init projections block gradient flow to most parameters at
            # init; nudge them so the check exercises the whole graph
            for name, t in model.parameters().items():
                if name.endswith("out_proj.w") or name.endswith("head.w"):
                    t.data = rng.normal(size=t.data.shape) * 0.2
            sample = data.make_sample(task, 0, 32, 32, seed=9, num_classes=3)
            x1 = ad.param(sample.x1, "x1")
            x2 = ad.param(sample.x2, "x2")
            with ad.Graph() as g:
                if task == "bcd":
                    p = model.forward(x1, x2)
                    loss = losses.bcd_loss(p, sample.labels["bcd"])
                elif task == "scd":
                    p1, p2, pb = model.forward(x1, x2)
                    loss = losses.scd_loss(
                        p1, p2, pb,
                        sample.labels["t1"], sample.labels["t2"], sample.labels["bcd"],
                    )
                else:
                    pl, pc = model.forward(x1, x2)
                    loss = losses.bda_loss(pl, pc, sample.labels["loc"], sample.labels["clf"])
                loss.name = "check_out"
            leaves = [x1, x2] + list(model.parameters().values())
            return g, loss, leaves

        return build

    return [
        CheckSpec(f"model_{task}_micro", "model", build_for(task), step=1e-4, tol=1e-3, samples=64)
        for task in ("bcd", "scd", "bda")
    ]


def all_checks(scope: str = "all") -> list[CheckSpec]:
    table = _primitive_checks() + _block_checks() + _model_checks()
    if scope in ("all",):
        return table
    if scope in ("primitives", "primitive"):
        return [c for c in table if c.scope == "primitive"]
    if scope in ("blocks", "block"):
        return [c for c in table if c.scope == "block"]
    if scope in ("models", "model"):
        return [c for c in table if c.scope == "model"]
    named = [c for c in table if c.name == scope]
    if not named:
        raise ValueError(f"unknown gradcheck scope '{scope}'")
    return named


def run_checks(scope: str = "all", seed: int = 0, verbose=print):
    """Run the selected checks; returns (all_passed, results)."""
    results = []
    ok = True
    for check in all_checks(scope):
        rng = np.random.default_rng([seed, zlib.crc32(check.name.encode())])
        graph, out, leaves = check.build(rng)
        report = ad.grad_check(
            graph, out, leaves, step=check.step, tol=check.tol, samples=check.samples, rng=rng
        )
        ok = ok and (report.passed or report.skipped)
        results.append((check, report))
        if verbose:
            verbose(f"{check.scope:10s} {check.name:28s} {report}")
    return ok, results
