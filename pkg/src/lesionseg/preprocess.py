"""Symmetric modality augmentation.

Each modality is mirrored across the mid-sagittal plane and brought back into
the subject's space with a rigid (6-DOF) transform, so a single small patch
sees the contralateral hemisphere as extra channels.

Transforms map *moving* physical points onto *fixed* physical points::

    x_fixed = R (x_moving - c) + c + t

with ``R = Rz @ Ry @ Rx`` built from Euler angles about axes 0, 1, 2.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import MultiModalCase, Volume

logger = logging.getLogger(__name__)

REGISTRATION_MODES = ("register", "none", "precomputed")


@dataclass(frozen=True)
class RegistrationConfig:
    """Settings of the multi-resolution rigid registration.

    ``mode`` selects between in-repo registration, pure flipping (``none``)
    and a precomputed transform read from ``transform_path``.
    """

    pyramid_levels: int = 3
    max_iterations: int = 200
    step_size: float = 1.0
    min_step: float = 1e-3
    tolerance: float = 1e-7
    fill_value: float = 0.0
    mode: str = "register"
    transform_path: str | None = None

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.step_size <= 0 or self.min_step <= 0 or self.tolerance <= 0:
            raise ValueError("step_size, min_step and tolerance must be > 0")
        if self.mode not in REGISTRATION_MODES:
            raise ValueError(f"mode must be one of {REGISTRATION_MODES}, got {self.mode!r}")
        if self.mode == "precomputed" and not self.transform_path:
            raise ValueError("mode 'precomputed' needs transform_path")


@dataclass(frozen=True)
class RigidTransform:
    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in ("rotation", "translation", "center"):
            value = tuple(float(v) for v in getattr(self, name))
            if len(value) != 3 or not all(np.isfinite(value)):
                raise ValueError(f"{name} must be 3 finite values, got {value}")
            object.__setattr__(self, name, value)

    @property
    def matrix(self) -> np.ndarray:
        return rotation_matrix(self.rotation)

    def inverse_map(self, points: np.ndarray) -> np.ndarray:
        """Fixed-space points (N, 3) in mm -> moving-space points."""
        c = np.asarray(self.center)
        t = np.asarray(self.translation)
        # R^T v for row vectors is v @ R
        return (points - c - t) @ self.matrix + c

    def forward_map(self, points: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center)
        t = np.asarray(self.translation)
        return (points - c) @ self.matrix.T + c + t

    def to_dict(self) -> dict:
        return {
            "rotation": list(self.rotation),
            "translation": list(self.translation),
            "center": list(self.center),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RigidTransform":
        return cls(doc["rotation"], doc["translation"], doc["center"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({**self.to_dict(), "metadata": _jsonable(self.metadata)}, indent=2))

    @classmethod
    def load(cls, path) -> "RigidTransform":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _jsonable(meta: dict) -> dict:
    return json.loads(json.dumps(meta, default=float))


def _axis_rotations(angles):
    ax, ay, az = angles
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    drx = np.array([[0, 0, 0], [0, -sx, -cx], [0, cx, -sx]])
    dry = np.array([[-sy, 0, cy], [0, 0, 0], [-cy, 0, -sy]])
    drz = np.array([[-sz, -cz, 0], [cz, -sz, 0], [0, 0, 0]])
    return (rx, ry, rz), (drx, dry, drz)


def rotation_matrix(angles) -> np.ndarray:
    (rx, ry, rz), _ = _axis_rotations(angles)
    return rz @ ry @ rx


def _rotation_jacobian(angles) -> list[np.ndarray]:
    (rx, ry, rz), (drx, dry, drz) = _axis_rotations(angles)
    return [rz @ ry @ drx, rz @ dry @ rx, drz @ ry @ rx]


def volume_center(volume: Volume) -> tuple[float, float, float]:
    return tuple((np.asarray(volume.shape) - 1) * np.asarray(volume.spacing) / 2.0)


def _grid_points(shape, spacing, stride: int = 1) -> np.ndarray:
    axes = [np.arange(0, n, stride) * s for n, s in zip(shape, spacing)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def _sample(data: np.ndarray, points_mm: np.ndarray, spacing, fill: float) -> np.ndarray:
    coords = (points_mm / np.asarray(spacing)).T
    return ndimage.map_coordinates(data, coords, order=1, mode="constant", cval=fill)


# --------------------------------------------------------------------------

def flip_sagittal(volume: Volume) -> Volume:
    """Mirror across the mid-sagittal plane (reverse axis 0)."""
    return Volume(volume.data[::-1, :, :], volume.spacing)


def apply_transform(
    volume: Volume, transform: RigidTransform, reference: Volume, fill_value: float = 0.0
) -> Volume:
    """Resample ``volume`` onto the grid of ``reference`` (trilinear)."""
    points = _grid_points(reference.shape, reference.spacing)
    src = transform.inverse_map(points)
    values = _sample(volume.data, src, volume.spacing, fill_value)
    return Volume(values.reshape(reference.shape), reference.spacing)


class _LevelCost:
    """MSE residuals and their Jacobian at one pyramid level."""

    def __init__(self, moving: np.ndarray, fixed: np.ndarray, spacing, level: int, fill: float):
        sigma = 0.5 * 2.0**level
        if sigma > 0:
            moving = ndimage.gaussian_filter(moving, sigma, mode="constant", cval=fill)
            fixed = ndimage.gaussian_filter(fixed, sigma, mode="constant", cval=fill)
        stride = 2**level
        self.spacing = np.asarray(spacing)
        self.fill = fill
        self.moving = moving
        self.grads = np.gradient(moving, *spacing)
        self.points = _grid_points(fixed.shape, spacing, stride)
        self.fixed_values = fixed[::stride, ::stride, ::stride].ravel()

    def residual(self, params: np.ndarray, center) -> np.ndarray:
        tf = RigidTransform(params[:3], params[3:], center)
        q = tf.inverse_map(self.points)
        return _sample(self.moving, q, self.spacing, self.fill) - self.fixed_values

    def cost(self, params: np.ndarray, center) -> float:
        return float(np.mean(self.residual(params, center) ** 2))

    def jacobian(self, params: np.ndarray, center) -> np.ndarray:
        """d residual / d (rotation, translation), shape (N, 6)."""
        rot, trans = params[:3], params[3:]
        tf = RigidTransform(rot, trans, center)
        q = tf.inverse_map(self.points)
        g = np.stack([_sample(gr, q, self.spacing, 0.0) for gr in self.grads], axis=1)
        v = self.points - np.asarray(center) - trans
        jac = np.empty((len(q), 6))
        for k, dr in enumerate(_rotation_jacobian(rot)):
            # q = v @ R + c, so dq/dtheta_k = v @ dR_k
            jac[:, k] = np.einsum("ni,ni->n", v @ dr, g)
        # dq/dt = -R^T, so dr/dt = -(g @ R^T)
        jac[:, 3:] = -g @ tf.matrix.T
        return jac

    def gradient(self, params: np.ndarray, center) -> np.ndarray:
        r = self.residual(params, center)
        return (2.0 / r.size) * self.jacobian(params, center).T @ r


def rigid_register(moving: Volume, fixed: Volume, config: RegistrationConfig | None = None) -> RigidTransform:
    """Estimate the rigid transform taking ``moving`` onto ``fixed``.

    Coarse-to-fine minimisation of the mean squared intensity error.  Each
    level runs damped Gauss-Newton steps (gradient scaled by the local
    curvature of the residuals); a step is accepted only when it lowers the
    cost, otherwise the damping grows and the step shrinks toward plain
    gradient descent.  ``metadata`` holds ``converged``, per-level cost
    traces and a ``warning`` when the iteration budget ran out.
    """
    config = config or RegistrationConfig()
    if not np.allclose(moving.spacing, fixed.spacing):
        raise ValueError(f"spacing mismatch: moving {moving.spacing} vs fixed {fixed.spacing}")
    spacing = fixed.spacing
    center = np.asarray(volume_center(fixed))

    params = np.zeros(6)
    traces: list[list[float]] = []
    converged_all = True
    cost = float("nan")
    for level in reversed(range(config.pyramid_levels)):
        level_cost = _LevelCost(moving.data.astype(np.float64), fixed.data.astype(np.float64),
                                spacing, level, config.fill_value)
        r = level_cost.residual(params, center)
        cost = float(np.mean(r**2))
        trace = [cost]
        damping = 1e-3
        converged = False
        for _ in range(config.max_iterations):
            if cost == 0.0:
                converged = True
                break
            jac = level_cost.jacobian(params, center)
            jtj = jac.T @ jac
            jtr = jac.T @ r
            accepted = False
            while damping < 1e12:
                lhs = jtj + damping * np.diag(np.diag(jtj) + 1e-12)
                delta = -np.linalg.solve(lhs, jtr)
                # step length (mm / rad) capped by the level's step size
                scale = config.step_size * 2.0**level / max(np.abs(delta).max(), 1e-300)
                if scale < 1.0:
                    delta *= scale
                cand = params + delta
                cand_r = level_cost.residual(cand, center)
                cand_cost = float(np.mean(cand_r**2))
                if cand_cost < cost:
                    accepted = True
                    break
                damping *= 4.0
            if not accepted:
                converged = True
                break
            improvement = (cost - cand_cost) / cost
            params, r, cost = cand, cand_r, cand_cost
            trace.append(cost)
            damping = max(damping / 3.0, 1e-9)
            if improvement < config.tolerance or np.abs(delta).max() < config.min_step:
                converged = True
                break
        traces.append(trace)
        converged_all &= converged
        logger.debug("level %d: %d accepted steps, cost %.6g", level, len(trace) - 1, cost)

    meta = {"converged": bool(converged_all), "cost_traces": traces, "final_cost": cost}
    if not converged_all:
        meta["warning"] = "registration did not converge within max_iterations"
        logger.warning("rigid registration did not converge within %d iterations", config.max_iterations)
    return RigidTransform(tuple(params[:3]), tuple(params[3:]), tuple(center), metadata=meta)


def symmetric_augment(case: MultiModalCase, config: RegistrationConfig | None = None) -> MultiModalCase:
    """Append a mirrored, re-registered copy of every modality.

    The transform is estimated once, from the flipped first modality onto the
    original, and reused for the remaining modalities.  Output channel order
    is ``[m1..mI, sym(m1)..sym(mI)]``; the gold mask is passed through.
    """
    config = config or RegistrationConfig()
    flipped = [flip_sagittal(v) for v in case.modalities]
    reference = case.modalities[0]
    if config.mode == "none":
        symmetric = flipped
        reg_meta = {"mode": "none"}
    else:
        if config.mode == "precomputed":
            transform = RigidTransform.load(config.transform_path)
        else:
            transform = rigid_register(flipped[0], reference, config)
        symmetric = [apply_transform(v, transform, reference, config.fill_value) for v in flipped]
        reg_meta = {"mode": config.mode, "transform": transform.to_dict(),
                    **{k: v for k, v in transform.metadata.items() if k != "cost_traces"}}
    names = tuple(case.modality_names) + tuple(f"sym_{n}" for n in case.modality_names)
    metadata = {**case.metadata, "registration": reg_meta}
    return replace(case, modalities=tuple(case.modalities) + tuple(symmetric),
                   modality_names=names, metadata=metadata)
