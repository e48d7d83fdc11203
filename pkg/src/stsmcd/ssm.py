"""State-space math: ZOH discretization, the LTI recurrence and its convolution
dual, and the input-dependent (selective) scan in sequential and parallel forms.

Everything here is plain float64 numpy. Diagonal state matrices keep the
recurrence elementwise, which is what makes the associative prefix scan exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def zoh_input_factor(r: np.ndarray) -> np.ndarray:
    """phi(r) = (exp(r) - 1) / r with the r -> 0 limit handled by series.

    The exact zero-order-hold input coefficient is delta * phi(delta * a).
    """
    r = np.asarray(r, dtype=np.float64)
    small = np.abs(r) < 1e-8
    safe = np.where(small, 1.0, r)
    return np.where(small, 1.0 + r / 2.0 + r * r / 6.0, np.expm1(safe) / safe)


def zoh_input_factor_grads(r: np.ndarray, delta: np.ndarray):
    """Partials of w = delta * phi(r) at r = delta * a: (dw/ddelta, dw/da).

    dw/ddelta = exp(r); dw/da = delta^2 * phi'(r), with
    phi'(r) = (exp(r) * (r - 1) + 1) / r^2 and phi'(0) = 1/2.
    """
    r = np.asarray(r, dtype=np.float64)
    small = np.abs(r) < 1e-6
    safe = np.where(small, 1.0, r)
    dphi = np.where(
        small,
        0.5 + r / 3.0 + r * r / 8.0,
        (np.exp(safe) * (safe - 1.0) + 1.0) / (safe * safe),
    )
    return np.exp(r), delta * delta * dphi


def zoh_discretize(a: float, b: float, delta: float) -> tuple[float, float]:
    """Exact zero-order-hold conversion of a scalar (a, b) pair.

    a_bar = exp(delta a); b_bar = (delta a)^-1 (exp(delta a) - 1) delta b,
    which reduces to delta * b as a -> 0.
    """
    if delta <= 0:
        raise ValueError(f"zoh_discretize: delta must be > 0, got {delta}")
    r = delta * a
    a_bar = float(np.exp(r))
    b_bar = float(delta * zoh_input_factor(np.asarray(r)) * b)
    return a_bar, b_bar


@dataclass
class DiscreteSsm:
    """Per-channel diagonal discrete system: h_t = a_bar * h_{t-1} + b_bar * x_t."""

    a_bar: np.ndarray  # (N,)
    b_bar: np.ndarray  # (N,)


def discretize_diag(a: np.ndarray, b: np.ndarray, delta: float) -> DiscreteSsm:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if delta <= 0:
        raise ValueError(f"discretize_diag: delta must be > 0, got {delta}")
    r = delta * a
    return DiscreteSsm(a_bar=np.exp(r), b_bar=delta * zoh_input_factor(r) * b)


def lti_recurrent_scan(dssm: DiscreteSsm, c: np.ndarray, x: np.ndarray) -> np.ndarray:
    """y_t = <c, h_t> with h_t = a_bar h_{t-1} + b_bar x_t and h_0 = 0."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("lti_recurrent_scan: empty input sequence")
    c = np.asarray(c, dtype=np.float64)
    h = np.zeros_like(dssm.a_bar)
    y = np.empty(len(x))
    for t, xt in enumerate(x):
        h = dssm.a_bar * h + dssm.b_bar * xt
        y[t] = c @ h
    return y


def lti_conv_kernel(dssm: DiscreteSsm, c: np.ndarray, length: int) -> np.ndarray:
    """kernel[k] = c . a_bar^k . b_bar, the structured convolution form."""
    if length < 1:
        raise ValueError(f"lti_conv_kernel: length must be >= 1, got {length}")
    c = np.asarray(c, dtype=np.float64)
    powers = dssm.a_bar[None, :] ** np.arange(length)[:, None]
    return powers @ (c * dssm.b_bar)


def lti_conv_apply(kernel: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Causal convolution y_t = sum_{k<=t} kernel[k] x[t-k]."""
    kernel = np.asarray(kernel, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if kernel.shape != x.shape:
        raise ValueError(
            f"lti_conv_apply: kernel length {kernel.shape} != input length {x.shape}"
        )
    return np.convolve(x, kernel)[: len(x)]


@dataclass
class SelectiveInputs:
    """Per-step scan inputs: x (L, D), delta (L, D) > 0, b/c (L, N), skip (D,)."""

    x: np.ndarray
    delta: np.ndarray
    b: np.ndarray
    c: np.ndarray
    skip: np.ndarray | None = None


def _selective_coeffs(si: SelectiveInputs, a: np.ndarray, mode: str):
    if mode not in ("euler", "zoh"):
        raise ValueError(f"selective scan: unknown discretization mode '{mode}'")
    if np.any(si.delta <= 0):
        raise ValueError("selective scan: delta must be strictly positive everywhere")
    r = si.delta[:, :, None] * a[None]  # (L, D, N)
    da = np.exp(r)
    w = si.delta[:, :, None] if mode == "euler" else si.delta[:, :, None] * zoh_input_factor(r)
    dbu = w * si.b[:, None, :] * si.x[:, :, None]
    return da, dbu


def selective_scan_sequential(si: SelectiveInputs, a: np.ndarray, mode: str = "euler") -> np.ndarray:
    """Reference recurrence, one step at a time. The oracle for the parallel form."""
    da, dbu = _selective_coeffs(si, np.asarray(a, dtype=np.float64), mode)
    L, D, N = da.shape
    h = np.zeros((D, N))
    y = np.empty((L, D))
    for t in range(L):
        h = da[t] * h + dbu[t]
        y[t] = h @ si.c[t]
    if si.skip is not None:
        y = y + si.skip[None, :] * si.x
    return y


def pscan(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Inclusive scan of h_t = a_t h_{t-1} + x_t (h_0 = 0) along axis 0.

    Work-efficient up/down sweep over the associative combine
    (a1, b1) o (a2, b2) = (a2 a1, a2 b1 + b2). The input is padded to a power
    of two with identity pairs (a=1, x=0), which leaves every prefix over the
    original range untouched. The sweep schedule is fixed, so summation order
    cannot vary between runs.
    """
    length = a.shape[0]
    if length == 1:
        return np.array(x, dtype=np.float64)
    padded = 1 << (length - 1).bit_length()
    acc_a = np.empty((padded,) + a.shape[1:], dtype=np.float64)
    acc_x = np.empty((padded,) + x.shape[1:], dtype=np.float64)
    acc_a[:length] = a
    acc_x[:length] = x
    acc_a[length:] = 1.0
    acc_x[length:] = 0.0

    step = 1
    while step < padded:  # up sweep: block roots absorb their left halves
        left_a = acc_a[step - 1 :: 2 * step]
        left_x = acc_x[step - 1 :: 2 * step]
        root_a = acc_a[2 * step - 1 :: 2 * step]
        root_x = acc_x[2 * step - 1 :: 2 * step]
        root_x += root_a * left_x
        root_a *= left_a
        step *= 2

    step = padded // 4
    while step >= 1:  # down sweep: left nodes pick up the previous block's prefix
        view_a = acc_a[step - 1 :: step]
        view_x = acc_x[step - 1 :: step]
        view_x[2::2] += view_a[2::2] * view_x[1:-1:2]
        view_a[2::2] *= view_a[1:-1:2]
        step //= 2

    return acc_x[:length]


def pscan_shifted_reverse(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Adjoint-direction scan: lam_t = x_t + a_{t+1} lam_{t+1} with lam_L = x_L.

    This is the backward recurrence of h_t = a_t h_{t-1} + x_t; reversing time
    and shifting the decay coefficients one step turns it into a plain scan.
    """
    length = a.shape[0]
    if length == 1:
        return np.array(x, dtype=np.float64)
    padded = 1 << (length - 1).bit_length()
    acc_a = np.empty((padded,) + a.shape[1:], dtype=np.float64)
    acc_x = np.empty((padded,) + x.shape[1:], dtype=np.float64)
    acc_a[0] = 1.0
    acc_a[1:length] = a[length - 1 : 0 : -1]
    acc_x[:length] = x[::-1]
    acc_a[length:] = 1.0
    acc_x[length:] = 0.0

    step = 1
    while step < padded:
        left_a = acc_a[step - 1 :: 2 * step]
        left_x = acc_x[step - 1 :: 2 * step]
        root_a = acc_a[2 * step - 1 :: 2 * step]
        root_x = acc_x[2 * step - 1 :: 2 * step]
        root_x += root_a * left_x
        root_a *= left_a
        step *= 2

    step = padded // 4
    while step >= 1:
        view_a = acc_a[step - 1 :: step]
        view_x = acc_x[step - 1 :: step]
        view_x[2::2] += view_a[2::2] * view_x[1:-1:2]
        view_a[2::2] *= view_a[1:-1:2]
        step //= 2

    out = np.empty_like(x, dtype=np.float64)
    out[...] = acc_x[length - 1 :: -1]
    return out


def selective_scan_parallel(si: SelectiveInputs, a: np.ndarray, mode: str = "euler") -> np.ndarray:
    """Prefix-scan evaluation of the selective recurrence; matches sequential to ~1e-9."""
    da, dbu = _selective_coeffs(si, np.asarray(a, dtype=np.float64), mode)
    h = pscan(da, dbu)
    y = np.einsum("ldn,ln->ld", h, si.c, optimize=True)
    if si.skip is not None:
        y = y + si.skip[None, :] * si.x
    return y


def rk4_reference(a: float, b: float, c: float, x: np.ndarray, delta: float, substeps: int = 100) -> np.ndarray:
    """Integrate h' = a h + b x(t), y = c h with piecewise-constant x via RK4.

    Independent oracle for the ZOH fidelity check: samples y at the end of
    each hold interval.
    """
    h = 0.0
    dt = delta / substeps
    y = np.empty(len(x))
    for t, xt in enumerate(np.asarray(x, dtype=np.float64)):
        f = lambda hh: a * hh + b * xt
        for _ in range(substeps):
            k1 = f(h)
            k2 = f(h + 0.5 * dt * k1)
            k3 = f(h + 0.5 * dt * k2)
            k4 = f(h + dt * k3)
            h = h + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        y[t] = c * h
    return y
