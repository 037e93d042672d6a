"""Voxel-wise monoexponential T2 fitting for multi-echo spin-echo stacks.

The signal model is I(TE) = I0 * exp(-TE / T2).  Each voxel is fit with a
log-linear weighted least squares initializer followed by damped Gauss-Newton
(Levenberg-Marquardt) refinement of (I0, T2) on the raw signal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation


@dataclass
class MultiEchoVolume:
    """Echo stack [row, col, slice, echo] with echo times in milliseconds."""

    data: np.ndarray
    echo_times: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.echo_times = np.asarray(self.echo_times, dtype=np.float64)
        if self.data.ndim != 4:
            raise ContractViolation("multi-echo data must be [row, col, slice, echo]")
        if self.echo_times.ndim != 1 or self.echo_times.size < 2:
            raise ContractViolation("need at least two echo times")
        if self.data.shape[3] != self.echo_times.size:
            raise ContractViolation("echo axis must match the echo time list")
        if np.any(np.diff(self.echo_times) <= 0) or np.any(self.echo_times <= 0):
            raise ContractViolation("echo times must be positive and strictly increasing")
        if not np.all(np.isfinite(self.data)):
            raise ContractViolation("echo data must be finite")


@dataclass
class ParameterMap:
    """Fit outputs per voxel; invalid voxels carry zeros and a False mask."""

    i0: np.ndarray
    t2: np.ndarray
    residual_rms: np.ndarray
    valid_mask: np.ndarray


@dataclass
class FitConfig:
    tolerance: float = 1e-8
    max_iter: int = 50
    clip_range: tuple | None = (0.0, 100.0)

    def __post_init__(self):
        if self.tolerance <= 0 or self.max_iter < 1:
            raise ContractViolation("tolerance must be > 0 and max_iter >= 1")
        if self.clip_range is not None and self.clip_range[0] >= self.clip_range[1]:
            raise ContractViolation("clip range must be (lo, hi) with lo < hi")


_T2_MAX = 1e4
_INVALID = (0.0, 0.0, 0.0, False)


def _loglinear_init(te, s):
    """Weighted log-linear seed; weights s^2 undo the log-transform skew."""
    w = s * s
    y = np.log(s)
    sw = w.sum()
    mt = (w * te).sum() / sw
    my = (w * y).sum() / sw
    denom = (w * (te - mt) ** 2).sum()
    if denom == 0.0:
        return None
    b = (w * (te - mt) * (y - my)).sum() / denom
    a = my - b * mt
    t2 = -1.0 / b if b < 0 else _T2_MAX
    return float(np.exp(a)), float(min(t2, _T2_MAX))


def fit_t2_voxel(signal, echo_times, config: FitConfig | None = None):
    """Fit (I0, T2) for one voxel.

    Returns (i0, t2, residual_rms, valid).  Voxels with fewer than two
    strictly positive echoes are invalid, as are fits that leave the bounds
    I0 in [0, 10*max(signal)], T2 in (0, 1e4].  The residual RMS is computed
    over all echoes, including non-positive ones.
    """
    config = config or FitConfig()
    s = np.asarray(signal, dtype=np.float64)
    te = np.asarray(echo_times, dtype=np.float64)
    if s.shape != te.shape:
        raise ContractViolation("signal and echo times must align")
    if not np.all(np.isfinite(s)):
        raise ContractViolation("voxel signal must be finite")
    pos = s > 0
    if pos.sum() < 2:
        return _INVALID
    init = _loglinear_init(te[pos], s[pos])
    if init is None:
        return _INVALID
    i0, t2 = init
    i0_max = 10.0 * float(s.max())

    def residuals(i0_, t2_):
        return s - i0_ * np.exp(-te / t2_)

    lam = 1e-3
    r = residuals(i0, t2)
    cost = float(r @ r)
    for _ in range(config.max_iter):
        e = np.exp(-te / t2)
        # Jacobian of the model wrt (i0, t2)
        j0 = e
        j1 = i0 * te / (t2 * t2) * e
        g = np.array([j0 @ r, j1 @ r])
        h = np.array([[j0 @ j0, j0 @ j1], [j0 @ j1, j1 @ j1]])
        step_taken = False
        for _ in range(20):
            damped = h + lam * np.diag(np.diag(h))
            try:
                delta = np.linalg.solve(damped, g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            i0_new, t2_new = i0 + delta[0], t2 + delta[1]
            if t2_new <= 0:
                lam *= 10.0
                continue
            r_new = residuals(i0_new, t2_new)
            cost_new = float(r_new @ r_new)
            if cost_new <= cost:
                rel = max(
                    abs(delta[0]) / max(1.0, abs(i0_new)),
                    abs(delta[1]) / max(1.0, abs(t2_new)),
                )
                i0, t2, r, cost = i0_new, t2_new, r_new, cost_new
                lam = max(lam * 0.1, 1e-12)
                step_taken = True
                break
            lam *= 10.0
        if not step_taken:
            break
        if rel < config.tolerance:
            break
    if not (0.0 <= i0 <= i0_max) or not (0.0 < t2 <= _T2_MAX):
        return _INVALID
    rms = float(np.sqrt(np.mean(residuals(i0, t2) ** 2)))
    return float(i0), float(t2), rms, True


def fit_t2_volume(volume: MultiEchoVolume, config: FitConfig | None = None) -> ParameterMap:
    """Fit every voxel of a multi-echo stack.

    Valid T2 values are clipped to ``config.clip_range`` (default [0, 100] ms)
    after fitting; invalid voxels carry zeros.
    """
    config = config or FitConfig()
    shape = volume.data.shape[:3]
    i0 = np.zeros(shape)
    t2 = np.zeros(shape)
    rms = np.zeros(shape)
    valid = np.zeros(shape, dtype=bool)
    flat = volume.data.reshape(-1, volume.data.shape[3])
    fi0, ft2 = i0.reshape(-1), t2.reshape(-1)
    frms, fvalid = rms.reshape(-1), valid.reshape(-1)
    for idx in range(flat.shape[0]):
        a, b, c, ok = fit_t2_voxel(flat[idx], volume.echo_times, config)
        fi0[idx], ft2[idx], frms[idx], fvalid[idx] = a, b, c, ok
    if config.clip_range is not None:
        lo, hi = config.clip_range
        t2[valid] = np.clip(t2[valid], lo, hi)
    return ParameterMap(i0, t2, rms, valid)


def two_echo_exact(s1, s2, te1, te2):
    """Closed-form two-echo solution: T2 = (te2 - te1) / ln(s1 / s2)."""
    if te2 <= te1:
        raise ContractViolation("echo times must be strictly increasing")
    if s1 <= 0 or s2 <= 0:
        raise ContractViolation("closed form requires positive signals")
    if s1 == s2:
        raise ContractViolation("equal signals leave T2 undefined")
    t2 = (te2 - te1) / np.log(s1 / s2)
    i0 = s1 * np.exp(te1 / t2)
    return float(i0), float(t2)
