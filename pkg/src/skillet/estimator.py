"""Per-object state estimation: a constant-velocity Kalman filter over
(centroid, yaw, velocities) with explicit yaw-observability reasoning.

The filter state is x = (c, psi, c_dot, psi_dot) in R^8 with a Gaussian
belief.  Centroid measurements are always applied.  Yaw is measured by PCA
on the cloud's horizontal projection, which only defines it modulo pi, so
the innovation is wrapped into (-pi/2, pi/2] against the current belief.

Yaw updates are gated by an observability score built from geometric cues
(anisotropy and planar extent) and the filter's own yaw variance, smoothed
by an EMA and thresholded with hysteresis.  While the flag is off the
task-level yaw is held constant, preventing spurious rotations on round or
degenerate objects; while on, it smoothly tracks the filter yaw under a
slew limit.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, InvalidArgument
from .geometry import PointCloud, centroid, pca_yaw, wrap_half_pi, wrap_pi

_POS = slice(0, 3)
_YAW = 3
_NX = 8


@dataclass(frozen=True)
class NoiseConfig:
    accel_sigma: float = 0.5        # m/s^2 white acceleration
    yaw_accel_sigma: float = 1.0    # rad/s^2
    meas_pos_sigma: float = 0.005   # m, centroid measurement
    meas_yaw_sigma: float = 0.05    # rad, PCA yaw measurement

    def __post_init__(self):
        for name in ("accel_sigma", "yaw_accel_sigma", "meas_pos_sigma", "meas_yaw_sigma"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")


@dataclass(frozen=True)
class EstimatorConfig:
    noise: NoiseConfig = NoiseConfig()
    e_ref: float = 0.03             # reference planar extent sqrt(lambda1), m
    sigma_ref: float = 0.2          # reference yaw std for the uncertainty gate
    ema_alpha: float = 0.2
    on_threshold: float = 0.6
    off_threshold: float = 0.4
    task_blend: float = 0.3         # psi_task first-order tracking coefficient
    task_slew: float = 0.3          # max psi_task change per update, rad
    init_pos_std: float = 0.02
    init_yaw_std: float = 0.1
    init_vel_std: float = 0.1

    def __post_init__(self):
        if not self.off_threshold < self.on_threshold:
            raise ConfigError("hysteresis needs off_threshold < on_threshold")
        if not 0.0 < self.ema_alpha <= 1.0:
            raise ConfigError("ema_alpha must be in (0, 1]")


@dataclass(frozen=True)
class Belief:
    """Gaussian filter state; mean (8,), covariance (8, 8) SPD."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(_NX).copy()
        cov = np.asarray(self.cov, dtype=float).reshape(_NX, _NX).copy()
        if np.max(np.abs(cov - cov.T)) > 1e-9:
            raise InvalidArgument("covariance is not symmetric")
        cov = 0.5 * (cov + cov.T)
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise InvalidArgument("covariance is not positive definite") from None
        mean[_YAW] = wrap_pi(mean[_YAW])
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def c(self):
        return self.mean[_POS]

    @property
    def psi(self):
        return float(self.mean[_YAW])


@dataclass(frozen=True)
class ObsState:
    """Observability bookkeeping and the task-level yaw."""

    score: float
    flag: bool
    psi_task: float
    on_threshold: float = 0.6
    off_threshold: float = 0.4
    ema_alpha: float = 0.2


def hysteresis_step(flag: bool, score: float, on: float, off: float) -> bool:
    if score >= on:
        return True
    if score <= off:
        return False
    return flag


def observability_raw(pca, yaw_var, cfg: EstimatorConfig) -> float:
    """Geometric-cue observability in [0, 1].

    anisotropy * extent saturation * an uncertainty gate that decays as the
    filter's yaw variance grows beyond sigma_ref^2.
    """
    extent = min(1.0, np.sqrt(max(pca.lambda1, 0.0)) / cfg.e_ref)
    gate = cfg.sigma_ref ** 2 / (cfg.sigma_ref ** 2 + max(yaw_var, 0.0))
    return float(pca.anisotropy * extent * gate)


def _transition(dt):
    F = np.eye(_NX)
    F[0:4, 4:8] = dt * np.eye(4)
    return F


def _process_noise(noise: NoiseConfig, dt):
    Q = np.zeros((_NX, _NX))
    for i, sigma in enumerate([noise.accel_sigma] * 3 + [noise.yaw_accel_sigma]):
        s2 = sigma * sigma
        Q[i, i] = s2 * dt ** 4 / 4.0
        Q[i, i + 4] = Q[i + 4, i] = s2 * dt ** 3 / 2.0
        Q[i + 4, i + 4] = s2 * dt ** 2
    return Q


def predict(belief: Belief, dt: float, noise: NoiseConfig = NoiseConfig()) -> Belief:
    """Constant-velocity prediction with white-acceleration process noise."""
    if dt <= 0:
        raise InvalidArgument("predict needs dt > 0")
    F = _transition(dt)
    mean = F @ belief.mean
    cov = F @ belief.cov @ F.T + _process_noise(noise, dt)
    return Belief(mean, 0.5 * (cov + cov.T))


def _joseph_update(belief: Belief, H, R, innovation) -> Belief:
    P = belief.cov
    S = H @ P @ H.T + R
    K = P @ H.T @ np.linalg.inv(S)
    mean = belief.mean + K @ innovation
    A = np.eye(_NX) - K @ H
    cov = A @ P @ A.T + K @ R @ K.T
    return Belief(mean, 0.5 * (cov + cov.T))


def update(belief: Belief, obs: ObsState, cloud: PointCloud, dt: float,
           cfg: EstimatorConfig = EstimatorConfig()):
    """One predict + measurement cycle; returns (Belief, ObsState).

    The centroid update always runs.  The yaw update runs only while the
    hysteresis flag is on, using the PCA yaw unwrapped modulo pi to the
    representative nearest the predicted yaw.
    """
    belief = predict(belief, dt, cfg.noise)

    z = centroid(cloud)
    H = np.zeros((3, _NX))
    H[0:3, 0:3] = np.eye(3)
    R = cfg.noise.meas_pos_sigma ** 2 * np.eye(3)
    belief = _joseph_update(belief, H, R, z - belief.c)

    pca = pca_yaw(cloud)
    s_raw = observability_raw(pca, belief.cov[_YAW, _YAW], cfg)
    score = (1.0 - obs.ema_alpha) * obs.score + obs.ema_alpha * s_raw
    flag = hysteresis_step(obs.flag, score, obs.on_threshold, obs.off_threshold)

    psi_task = obs.psi_task
    if flag:
        innovation = wrap_half_pi(pca.yaw - belief.psi)
        Hy = np.zeros((1, _NX))
        Hy[0, _YAW] = 1.0
        Ry = np.array([[cfg.noise.meas_yaw_sigma ** 2]])
        belief = _joseph_update(belief, Hy, Ry, np.array([innovation]))
        delta = wrap_pi(belief.psi - psi_task)
        step = np.clip(cfg.task_blend * delta, -cfg.task_slew, cfg.task_slew)
        psi_task = float(wrap_pi(psi_task + step))

    return belief, ObsState(score, flag, psi_task, obs.on_threshold,
                            obs.off_threshold, obs.ema_alpha)


def task_yaw(obs: ObsState) -> float:
    return obs.psi_task


def init_belief(cloud: PointCloud, cfg: EstimatorConfig = EstimatorConfig()):
    """Weakly informative initialization from the first denoised cloud."""
    pca = pca_yaw(cloud)
    mean = np.zeros(_NX)
    mean[_POS] = centroid(cloud)
    mean[_YAW] = pca.yaw
    diag = np.array([cfg.init_pos_std ** 2] * 3 + [cfg.init_yaw_std ** 2]
                    + [cfg.init_vel_std ** 2] * 4)
    belief = Belief(mean, np.diag(diag))
    s_raw = observability_raw(pca, cfg.init_yaw_std ** 2, cfg)
    flag = hysteresis_step(False, s_raw, cfg.on_threshold, cfg.off_threshold)
    obs = ObsState(s_raw, flag, pca.yaw, cfg.on_threshold, cfg.off_threshold,
                   cfg.ema_alpha)
    return belief, obs


class Track:
    """Stateful wrapper around one object's filter (single-writer).

    Readers get immutable Belief/ObsState snapshots; log rows accumulate
    for offline analysis.
    """

    def __init__(self, cloud: PointCloud, cfg: EstimatorConfig = EstimatorConfig(),
                 t0: float = 0.0):
        self.cfg = cfg
        self.t = float(t0)
        self.belief, self.obs = init_belief(cloud, cfg)
        self.rows = [self._row()]

    def _row(self):
        return [self.t, *self.belief.mean, *np.diag(self.belief.cov),
                self.obs.score, float(self.obs.flag), self.obs.psi_task]

    def update(self, cloud: PointCloud, dt: float):
        self.belief, self.obs = update(self.belief, self.obs, cloud, dt, self.cfg)
        self.t += dt
        self.rows.append(self._row())
        return self.belief, self.obs


TRACK_LOG_HEADER = (
    "# t cx cy cz psi vx vy vz dpsi "
    "P00 P11 P22 P33 P44 P55 P66 P77 score flag psi_task"
)


def format_track_log(rows) -> str:
    lines = [TRACK_LOG_HEADER]
    for row in rows:
        lines.append(" ".join(f"{float(v):.17g}" for v in row))
    return "\n".join(lines) + "\n"
