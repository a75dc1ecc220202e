"""Rendered planar reaching task with a scripted Jacobian-transpose expert.

The repo constants below are choices for this toy task, not measured values:
``TAU_MAX`` clamps every torque, ``REACH_TOL`` is the end-effector distance
that counts as reaching the target.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .kinematics import ArmModel, ArmState, end_effector, forward_kinematics, jacobian

TAU_MAX = 5.0
REACH_TOL = 0.05
IMAGE_SIZE = (32, 32)
LINK_INTENSITY = 0.8
TARGET_INTENSITY = 1.0
TARGET_RADIUS_PX = 2.0
DEFAULT_GAINS = (20.0, 6.0)


def default_arm() -> ArmModel:
    return ArmModel([1.0, 1.0], [1.0, 1.0], dt=0.05)


def input_groups(n_joints: int) -> dict:
    j = n_joints
    return {"joint_pos": (0, j), "joint_vel": (j, 2 * j), "ee_pos": (2 * j, 2 * j + 2),
            "ee_vel": (2 * j + 2, 2 * j + 4)}


@dataclass(frozen=True, eq=False)
class Scene:
    model: ArmModel
    state: ArmState
    target: Tuple[float, float]
    image_size: Tuple[int, int] = IMAGE_SIZE
    check_reachable: bool = True

    def __post_init__(self):
        object.__setattr__(self, "target", (float(self.target[0]), float(self.target[1])))
        if self.check_reachable:
            lengths = self.model.link_lengths
            inner = max(0.0, 2 * lengths.max() - lengths.sum())
            d = np.hypot(self.target[0] - self.model.base_pose[0], self.target[1] - self.model.base_pose[1])
            if not inner - 1e-12 <= d <= lengths.sum() + 1e-12:
                raise ValueError(f"target {self.target} outside reachable annulus [{inner}, {lengths.sum()}]")

    @property
    def ee(self) -> np.ndarray:
        return end_effector(self.model, self.state.theta)

    @property
    def ee_vel(self) -> np.ndarray:
        return jacobian(self.model, self.state.theta) @ self.state.omega

    def with_target(self, target) -> "Scene":
        return replace(self, target=tuple(target))


@dataclass(frozen=True, eq=False)
class Observation:
    image: np.ndarray  # (H, W, 1) in [0, 1]
    config: np.ndarray  # joint_pos, joint_vel, ee_pos, ee_vel

    def to_dict(self) -> dict:
        return {"image_shape": list(self.image.shape), "image": self.image.ravel().tolist(),
                "config": self.config.tolist()}

    @classmethod
    def from_dict(cls, obj) -> "Observation":
        shape = tuple(obj["image_shape"])
        return cls(np.asarray(obj["image"], dtype=np.float64).reshape(shape),
                   np.asarray(obj["config"], dtype=np.float64))


def world_to_pixel(model: ArmModel, image_size, xy) -> Tuple[float, float]:
    """Continuous (row, col) of a world point; pixel centres sit at integers.

    The canvas spans ``1.1 * reach`` around the base in both axes, y pointing up.
    """
    h, w = image_size
    half = 1.1 * model.reach
    bx, by = model.base_pose
    col = (xy[0] - (bx - half)) / (2 * half) * w - 0.5
    row = ((by + half) - xy[1]) / (2 * half) * h - 0.5
    return row, col


def render_scene(scene: Scene) -> np.ndarray:
    h, w = scene.image_size
    img = np.zeros((h, w))
    pts = forward_kinematics(scene.model, scene.state.theta)
    for a, b in zip(pts[:-1], pts[1:]):
        ra, ca = world_to_pixel(scene.model, scene.image_size, a)
        rb, cb = world_to_pixel(scene.model, scene.image_size, b)
        n = int(np.ceil(2 * max(abs(rb - ra), abs(cb - ca)))) + 1
        t = np.linspace(0.0, 1.0, n)
        rows = np.rint(ra + t * (rb - ra)).astype(int)
        cols = np.rint(ca + t * (cb - ca)).astype(int)
        ok = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
        img[rows[ok], cols[ok]] = LINK_INTENSITY
    tr, tc = world_to_pixel(scene.model, scene.image_size, scene.target)
    rr, cc = np.mgrid[0:h, 0:w]
    img[(rr - tr) ** 2 + (cc - tc) ** 2 <= TARGET_RADIUS_PX ** 2] = TARGET_INTENSITY
    return img[:, :, None]


def observe(scene: Scene) -> Observation:
    config = np.concatenate([scene.state.theta, scene.state.omega, scene.ee, scene.ee_vel])
    return Observation(render_scene(scene), config)


def env_step(scene: Scene, torques, tau_max: float = TAU_MAX):
    """Advance all joints one semi-implicit Euler step; returns ``(scene, obs, reached)``."""
    tau = np.clip(np.asarray(torques, dtype=np.float64), -tau_max, tau_max)
    m = scene.model
    omega = scene.state.omega + tau / m.joint_inertias * m.dt
    theta = scene.state.theta + omega * m.dt
    nxt = replace(scene, state=ArmState(theta, omega))
    return nxt, observe(nxt), reached(nxt)


def reached(scene: Scene, tol: float = REACH_TOL) -> bool:
    return bool(np.linalg.norm(scene.ee - np.asarray(scene.target)) < tol)


def pd_expert(scene: Scene, gains=DEFAULT_GAINS) -> np.ndarray:
    """Jacobian-transpose PD toward the target in end-effector space."""
    kp, kd = gains
    force = kp * (np.asarray(scene.target) - scene.ee) - kd * scene.ee_vel
    return jacobian(scene.model, scene.state.theta).T @ force


# -- episode configuration --------------------------------------------------

DEFAULT_TARGETS = [(1.2, 0.9), (-0.9, 1.2), (-1.2, -0.9), (0.9, -1.2)]
DEFAULT_STARTS = [(0.0, 0.6), (np.pi / 2, 0.6), (np.pi, 0.6), (-np.pi / 2, 0.6)]


@dataclass
class EpisodeConfig:
    targets: List[Tuple[float, float]]
    start_states: List[Tuple[float, ...]]
    steps: int = 120
    seed: int = 0
    episodes: int = 6
    noise: float = 1.0

    @classmethod
    def default(cls) -> "EpisodeConfig":
        return cls([tuple(t) for t in DEFAULT_TARGETS], [tuple(s) for s in DEFAULT_STARTS])

    @classmethod
    def from_json(cls, path) -> "EpisodeConfig":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        if "targets" not in obj or not obj["targets"]:
            raise ValueError("episode config needs a non-empty 'targets' list")
        base = cls.default()
        return cls(
            targets=[tuple(map(float, t)) for t in obj["targets"]],
            start_states=[tuple(map(float, s)) for s in obj.get("start_states", base.start_states)],
            steps=int(obj.get("steps", base.steps)),
            seed=int(obj.get("seed", base.seed)),
            episodes=int(obj.get("episodes", base.episodes)),
            noise=float(obj.get("noise", base.noise)),
        )

    def to_dict(self) -> dict:
        return {"targets": [list(t) for t in self.targets],
                "start_states": [list(s) for s in self.start_states],
                "steps": self.steps, "seed": self.seed, "episodes": self.episodes, "noise": self.noise}


def make_scene(target, start, model: Optional[ArmModel] = None) -> Scene:
    model = model or default_arm()
    return Scene(model, ArmState(np.asarray(start, dtype=np.float64)), tuple(target))


def rollout(scene: Scene, policy, steps: int, stop_on_reach: bool = False):
    """Run ``policy(scene, obs) -> torques``; returns (scenes, observations, torques, reached_any)."""
    obs = observe(scene)
    scenes, observations, actions = [scene], [obs], []
    hit = reached(scene)
    for _ in range(steps):
        tau = np.asarray(policy(scene, obs), dtype=np.float64)
        actions.append(tau)
        scene, obs, r = env_step(scene, tau)
        scenes.append(scene)
        observations.append(obs)
        hit = hit or r
        if r and stop_on_reach:
            break
    return scenes, observations, actions, hit


def expert_dataset(cfg: EpisodeConfig, model: Optional[ArmModel] = None, gains=DEFAULT_GAINS):
    """Expert rollouts with perturbation noise; labels are the clean expert torques.

    For each target, ``cfg.episodes`` episodes are run from the configured
    start states (cycled); episode 0 of each pair is noise-free.
    """
    rng = np.random.default_rng(cfg.seed)
    records = []
    for ti, target in enumerate(cfg.targets):
        for e in range(cfg.episodes):
            start = np.asarray(cfg.start_states[(ti + e) % len(cfg.start_states)], dtype=np.float64)
            if e > 0:
                start = start + rng.normal(0.0, 0.2, size=start.shape)
            scene = make_scene(target, start, model)
            sigma = 0.0 if e == 0 else cfg.noise
            for _ in range(cfg.steps):
                obs = observe(scene)
                label = pd_expert(scene, gains)
                records.append((obs, np.clip(label, -TAU_MAX, TAU_MAX)))
                scene, _, _ = env_step(scene, label + rng.normal(0.0, sigma, size=label.shape))
    return records


def save_dataset(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for obs, tau in records:
            fh.write(json.dumps({"obs": obs.to_dict(), "torque": list(map(float, tau))}) + "\n")


def load_dataset(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out.append((Observation.from_dict(rec["obs"]), np.asarray(rec["torque"], dtype=np.float64)))
    return out
