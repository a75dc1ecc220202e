"""Planar N-link arm kinematics and per-joint importance factors.

Joint ``j``'s importance factor is the end-effector displacement produced by
a unit torque applied to that joint alone for one integration step,
normalised over all joints.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Tuple

import numpy as np


@dataclass(frozen=True, eq=False)
class ArmModel:
    link_lengths: np.ndarray
    joint_inertias: np.ndarray
    dt: float = 0.01
    base_pose: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        lengths = np.asarray(self.link_lengths, dtype=np.float64).ravel()
        inertias = np.asarray(self.joint_inertias, dtype=np.float64).ravel()
        if lengths.size < 1:
            raise ValueError("arm needs at least one link")
        if inertias.shape != lengths.shape:
            raise ValueError("link_lengths and joint_inertias must have the same length")
        if np.any(lengths <= 0) or np.any(inertias <= 0):
            raise ValueError("link lengths and joint inertias must be positive")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "link_lengths", lengths)
        object.__setattr__(self, "joint_inertias", inertias)
        object.__setattr__(self, "dt", float(self.dt))
        object.__setattr__(self, "base_pose", (float(self.base_pose[0]), float(self.base_pose[1])))

    @property
    def n_joints(self) -> int:
        return self.link_lengths.size

    @property
    def reach(self) -> float:
        return float(self.link_lengths.sum())

    @classmethod
    def from_json(cls, path) -> "ArmModel":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        try:
            return cls(obj["link_lengths"], obj["joint_inertias"], obj.get("dt", 0.01),
                       tuple(obj.get("base_pose", (0.0, 0.0))))
        except KeyError as exc:
            raise ValueError(f"arm file missing field {exc.args[0]!r}") from exc

    def to_dict(self) -> dict:
        return {"link_lengths": self.link_lengths.tolist(),
                "joint_inertias": self.joint_inertias.tolist(),
                "dt": self.dt, "base_pose": list(self.base_pose)}


@dataclass(frozen=True, eq=False)
class ArmState:
    theta: np.ndarray
    omega: np.ndarray = field(default=None)

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64).ravel()
        omega = np.zeros_like(theta) if self.omega is None else np.asarray(self.omega, dtype=np.float64).ravel()
        if omega.shape != theta.shape:
            raise ValueError("theta and omega must have the same length")
        if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(omega))):
            raise ValueError("arm state must be finite")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "omega", omega)


def forward_kinematics(model: ArmModel, theta) -> np.ndarray:
    """Joint positions of the chain; row ``k`` is joint ``k``, the last row is the end effector.

    >>> m = ArmModel([1.0, 1.0], [1.0, 1.0])
    >>> forward_kinematics(m, [0.0, 0.0])[-1].tolist()
    [2.0, 0.0]
    """
    theta = np.asarray(theta, dtype=np.float64)
    angles = np.cumsum(theta)
    steps = model.link_lengths[:, None] * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    pts = np.vstack([np.zeros(2), np.cumsum(steps, axis=0)])
    return pts + np.asarray(model.base_pose)


def end_effector(model: ArmModel, theta) -> np.ndarray:
    return forward_kinematics(model, theta)[-1]


def jacobian(model: ArmModel, theta) -> np.ndarray:
    """2 x J Jacobian of the end-effector position with respect to joint angles."""
    pts = forward_kinematics(model, theta)
    r = pts[-1] - pts[:-1]
    return np.stack([-r[:, 1], r[:, 0]])


def probe_step(model: ArmModel, state: ArmState, j: int, tau: float) -> ArmState:
    """One semi-implicit Euler step with only joint ``j`` actuated; other joints frozen."""
    if not 0 <= j < model.n_joints:
        raise IndexError(f"joint index {j} out of range for {model.n_joints} joints")
    theta = state.theta.copy()
    omega = state.omega.copy()
    omega[j] += tau / model.joint_inertias[j] * model.dt
    theta[j] += omega[j] * model.dt
    return ArmState(theta, omega)


@dataclass(frozen=True, eq=False)
class ImportanceFactors:
    alpha: np.ndarray
    mode: str = "kinematic"

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=np.float64).ravel()
        if np.any(a < 0) or not np.all(np.isfinite(a)):
            raise ValueError("importance factors must be finite and non-negative")
        object.__setattr__(self, "alpha", a)

    def __len__(self):
        return self.alpha.size

    def scaled(self, c: float) -> "ImportanceFactors":
        return ImportanceFactors(self.alpha * c, self.mode)


def uniform_factors(n_joints: int) -> ImportanceFactors:
    return ImportanceFactors(np.full(n_joints, 1.0 / n_joints), "uniform")


def probe_displacements(model: ArmModel, state: ArmState) -> np.ndarray:
    """End-effector displacement per joint under a unit one-step probe torque.

    Measured against the unforced probe step so a joint's existing velocity
    does not count as torque-induced motion; from rest the reference is the
    current pose.
    """
    out = np.empty(model.n_joints)
    for j in range(model.n_joints):
        before = end_effector(model, probe_step(model, state, j, 0.0).theta)
        after = end_effector(model, probe_step(model, state, j, 1.0).theta)
        out[j] = np.linalg.norm(after - before)
    return out


def importance_factors(model: ArmModel, state: ArmState, mode: str = "kinematic") -> ImportanceFactors:
    if mode == "uniform":
        return uniform_factors(model.n_joints)
    if mode != "kinematic":
        raise ValueError(f"unknown importance mode {mode!r}; expected 'kinematic' or 'uniform'")
    disp = probe_displacements(model, state)
    total = disp.sum()
    if not total > 0:
        return uniform_factors(model.n_joints)
    return ImportanceFactors(disp / total, "kinematic")
