"""Composite network blocks: the VSS block, spatio-temporal token generators,
the STSS block, the decoder fusion unit, and patch embedding/merging.

Parameter groups are nested dicts of Tensors; ``flatten_params`` turns a tree
into the flat dotted-name mapping the checkpoint format stores.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import scan2d
from .autodiff import Tensor


def flatten_params(tree: dict, prefix: str = "") -> dict[str, Tensor]:
    flat: dict[str, Tensor] = {}
    for key, value in tree.items():
        name = f"{prefix}.{key}" if prefix else key
        if isinstance(value, dict):
            flat.update(flatten_params(value, name))
        elif isinstance(value, Tensor):
            flat[name] = value
    return flat


def init_linear(rng, d_in: int, d_out: int, zero: bool = False, bias: bool = True) -> dict:
    w = np.zeros((d_in, d_out)) if zero else rng.normal(size=(d_in, d_out)) / np.sqrt(d_in)
    p = {"w": ad.param(w)}
    if bias:
        p["b"] = ad.param(np.zeros(d_out))
    return p


def apply_linear(x: Tensor, p: dict) -> Tensor:
    return ad.linear(x, p["w"], p.get("b"))


def init_norm(d: int) -> dict:
    return {"scale": ad.param(np.ones(d)), "shift": ad.param(np.zeros(d))}


def apply_norm(x: Tensor, p: dict, eps: float = 1e-5) -> Tensor:
    return ad.layer_norm(x, p["scale"], p["shift"], eps=eps)


def init_conv3x3(rng, c_in: int, c_out: int, zero: bool = False) -> dict:
    w = (
        np.zeros((3, 3, c_in, c_out))
        if zero
        else rng.normal(size=(3, 3, c_in, c_out)) / np.sqrt(9 * c_in)
    )
    return {"w": ad.param(w), "b": ad.param(np.zeros(c_out))}


def init_vss_block(rng, c: int, n_state: int, expand: int = 2) -> dict:
    """VSS block params; the output projection starts at zero so the block is
    the identity map at init (residual stream only)."""
    e = expand * c
    return {
        "norm_in": init_norm(c),
        "embed": init_linear(rng, c, e),
        "dwconv": {
            "w": ad.param(rng.normal(size=(3, 3, e)) / 3.0),
            "b": ad.param(np.zeros(e)),
        },
        "ss2d": scan2d.init_ss2d(rng, e, n_state),
        "norm_post": init_norm(e),
        "gate": init_linear(rng, c, e),
        "out_proj": init_linear(rng, e, c, zero=True),
    }


def vss_block(x: Tensor, p: dict, gate_mode: str = "sum", scan_mode: str = "euler") -> Tensor:
    """x + project(LN(SS2D(silu(DWConv(embed(LN(x)))))) <combine> silu(gate(LN(x)))).

    ``gate_mode`` selects how the scan stream meets the gate stream: "sum"
    adds them, "multiply" gates multiplicatively.
    """
    if gate_mode not in ("sum", "multiply"):
        raise ValueError(f"vss_block: unknown gate_mode '{gate_mode}'")
    h = apply_norm(x, p["norm_in"])
    e = apply_linear(h, p["embed"])
    stream = ad.silu(ad.apply_op("depthwise_conv3x3", (e, p["dwconv"]["w"], p["dwconv"]["b"])))
    stream = scan2d.ss2d_forward(stream, p["ss2d"], mode=scan_mode)
    stream = apply_norm(stream, p["norm_post"])
    gate = ad.silu(apply_linear(h, p["gate"]))
    combined = stream + gate if gate_mode == "sum" else ad.mul(stream, gate)
    return x + apply_linear(combined, p["out_proj"])


# --- spatio-temporal token arrangements ------------------------------------------------------


def st_tokens_sequential(f1: Tensor, f2: Tensor) -> Tensor:
    """(L, C), (L, C) -> (2L, C): all T1 tokens then all T2 tokens."""
    if f1.shape != f2.shape:
        raise ad.ShapeMismatch(f"st_tokens_sequential: {f1.shape} vs {f2.shape}")
    return ad.concat([f1, f2], axis=0)


def st_detokens_sequential(seq: Tensor) -> tuple[Tensor, Tensor]:
    half = seq.shape[0] // 2
    return ad.slice_(seq, (slice(0, half),)), ad.slice_(seq, (slice(half, 2 * half),))


def st_tokens_cross(f1: Tensor, f2: Tensor) -> Tensor:
    """(L, C), (L, C) -> (2L, C): tokens interleaved T1(1), T2(1), T1(2), ..."""
    if f1.shape != f2.shape:
        raise ad.ShapeMismatch(f"st_tokens_cross: {f1.shape} vs {f2.shape}")
    l, c = f1.shape
    stacked = ad.concat(
        [ad.reshape(f1, (l, 1, c)), ad.reshape(f2, (l, 1, c))], axis=1
    )
    return ad.reshape(stacked, (2 * l, c))


def st_detokens_cross(seq: Tensor) -> tuple[Tensor, Tensor]:
    l2, c = seq.shape
    pairs = ad.reshape(seq, (l2 // 2, 2, c))
    return (
        ad.reshape(ad.slice_(pairs, (slice(None), slice(0, 1))), (l2 // 2, c)),
        ad.reshape(ad.slice_(pairs, (slice(None), slice(1, 2))), (l2 // 2, c)),
    )


def st_tokens_parallel(f1: Tensor, f2: Tensor) -> Tensor:
    """(L, C), (L, C) -> (L, 2C): channel concatenation."""
    if f1.shape != f2.shape:
        raise ad.ShapeMismatch(f"st_tokens_parallel: {f1.shape} vs {f2.shape}")
    return ad.concat([f1, f2], axis=1)


def st_detokens_parallel(seq: Tensor) -> tuple[Tensor, Tensor]:
    c = seq.shape[1] // 2
    return (
        ad.slice_(seq, (slice(None), slice(0, c))),
        ad.slice_(seq, (slice(None), slice(c, 2 * c))),
    )


# --- STSS block -------------------------------------------------------------------------------


def init_stss_block(rng, c: int, n_state: int, expand: int = 2) -> dict:
    """Three VSS-style sub-blocks (one per arrangement), the 2C -> C projection
    for the parallel branch, and the biasless 3C -> C output projection."""
    return {
        "vss_seq": init_vss_block(rng, c, n_state, expand),
        "vss_crs": init_vss_block(rng, c, n_state, expand),
        "vss_pra": init_vss_block(rng, 2 * c, n_state, expand),
        "pra_proj": init_linear(rng, 2 * c, c),
        "out_proj": init_linear(rng, 3 * c, c, bias=False),
    }


def stss_block(
    f1: Tensor, f2: Tensor, p: dict, gate_mode: str = "sum", scan_mode: str = "euler"
) -> Tensor:
    """Scan the three spatio-temporal arrangements and project back to C.

    The sequential arrangement forms a (2H, W, C) map (row-major read order is
    exactly T1 tokens then T2 tokens) and the cross arrangement an (H, 2W, C)
    map (row-major read order interleaves the token streams), so each VSS
    sub-block scans its arrangement directly. Sequential and cross outputs are
    de-arranged and the two temporal halves summed; the parallel branch maps
    its 2C channels back to C; the three maps are concatenated and projected.
    """
    if f1.shape != f2.shape:
        raise ad.ShapeMismatch(f"stss_block: {f1.shape} vs {f2.shape}")
    h, w, c = f1.shape
    t1 = ad.reshape(f1, (h * w, c))
    t2 = ad.reshape(f2, (h * w, c))

    seq = ad.reshape(st_tokens_sequential(t1, t2), (2 * h, w, c))
    seq = vss_block(seq, p["vss_seq"], gate_mode, scan_mode)
    s1, s2 = st_detokens_sequential(ad.reshape(seq, (2 * h * w, c)))
    seq_map = ad.reshape(s1 + s2, (h, w, c))

    crs = ad.reshape(st_tokens_cross(t1, t2), (h, 2 * w, c))
    crs = vss_block(crs, p["vss_crs"], gate_mode, scan_mode)
    c1, c2 = st_detokens_cross(ad.reshape(crs, (2 * h * w, c)))
    crs_map = ad.reshape(c1 + c2, (h, w, c))

    pra = ad.reshape(st_tokens_parallel(t1, t2), (h, w, 2 * c))
    pra = vss_block(pra, p["vss_pra"], gate_mode, scan_mode)
    pra_map = apply_linear(pra, p["pra_proj"])

    fused = ad.concat([seq_map, crs_map, pra_map], axis=2)
    return apply_linear(fused, p["out_proj"])


# --- decoder fusion and downsampling ----------------------------------------------------------


def init_fuse(rng, c_hi: int, c_lo: int) -> dict:
    """1x1 channel mapping for the incoming feature plus a two-conv residual
    smoother; the second conv starts at zero so smoothing is identity at init."""
    return {
        "lateral": init_linear(rng, c_lo, c_hi),
        "conv1": init_conv3x3(rng, c_hi, c_hi),
        "conv2": init_conv3x3(rng, c_hi, c_hi, zero=True),
    }


def fuse_levels(high: Tensor, low: Tensor, p: dict) -> Tensor:
    """residual(high + conv1x1(low)); residual = two 3x3 convs with identity skip."""
    if high.shape[:2] != low.shape[:2]:
        raise ad.ShapeMismatch(
            f"fuse_levels: spatial extents differ, {high.shape[:2]} vs {low.shape[:2]}"
        )
    merged = high + apply_linear(low, p["lateral"])
    smoothed = ad.silu(
        ad.apply_op("conv3x3", (merged, p["conv1"]["w"], p["conv1"]["b"]))
    )
    smoothed = ad.apply_op("conv3x3", (smoothed, p["conv2"]["w"], p["conv2"]["b"]))
    return merged + smoothed


def init_patch_embed(rng, c_in: int, c_out: int, k: int) -> dict:
    return {
        "w": ad.param(rng.normal(size=(k * k * c_in, c_out)) / np.sqrt(k * k * c_in)),
        "b": ad.param(np.zeros(c_out)),
        "k": k,
    }


def patch_embed(x: Tensor, p: dict) -> Tensor:
    """k x k stride-k projection; used with k=4 for images, k=2 for merging."""
    return ad.apply_op("strided_conv", (x, p["w"], p["b"]), k=p["k"])
