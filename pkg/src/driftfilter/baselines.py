"""Classical comparison methods and an exact inference oracle.

* analytic beam mixture model + conventional particle filter: the
  standard LIDAR localization recipe; each beam is scored independently,
  which is precisely why unmapped clutter hurts it
* dead-reckoning baseline that integrates odometry from the initial
  belief mean and never looks at the sensors
* an exact discrete Bayes filter over a (row, col, orientation) lattice,
  paired with a toy world whose motion and sensor laws are shared with
  the particle filter, so the particle posterior can be checked against
  the exact posterior in total variation
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from driftfilter import autodiff as ad
from driftfilter import models as md
from driftfilter import pfcore
from driftfilter import worldsim as ws

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class BeamModelParams:
    """Three-component range mixture: Gaussian hit, max-range mass,
    uniform random."""

    z_hit: float = 0.75
    z_max: float = 0.05
    z_rand: float = 0.20
    sigma_hit: float = 0.1
    max_range: float = 5.0

    def __post_init__(self):
        w = (self.z_hit, self.z_max, self.z_rand)
        if min(w) < 0 or abs(sum(w) - 1.0) > 1e-9:
            raise ValueError(f"mixture weights must be >= 0 and sum to 1, got {w}")
        if self.sigma_hit <= 0:
            raise ValueError("sigma_hit must be positive")


def beam_log_likelihood(scan, expected, params: BeamModelParams):
    """Log-likelihood of a scan given per-beam expected ranges.

    ``expected`` may be (B,) for one pose or (K, B) for many; beams are
    treated as independent and multiplied (summed in log space).
    """
    scan = np.asarray(scan, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    if expected.shape[-1] != scan.shape[-1]:
        raise ValueError(f"beam count mismatch: scan {scan.shape} vs expected {expected.shape}")
    gauss = np.exp(-0.5 * ((scan - expected) / params.sigma_hit) ** 2) / (
        params.sigma_hit * math.sqrt(2.0 * math.pi)
    )
    p = params.z_hit * gauss + params.z_rand / params.max_range
    p = p + params.z_max * (scan >= params.max_range - 1e-9)
    out = np.sum(np.log(np.maximum(p, 1e-300)), axis=-1)
    return float(out) if out.ndim == 0 else out


def classical_pf_rollout(
    episode: ws.Episode,
    fmap: ws.FloorMap,
    beam_params: BeamModelParams,
    K,
    resample: pfcore.ResampleConfig | None,
    seed,
    sensor: ws.SensorSpec | None = None,
    sigma_t=0.04,
    sigma_r=math.radians(2.0),
    max_steps=None,
) -> pfcore.Rollout:
    """Same rollout skeleton as the learned filter, with the analytic
    beam model instead of the network and hard (alpha = 1) resampling."""
    sensor = sensor or ws.SensorSpec(max_range=beam_params.max_range)
    if resample is not None and resample.enabled:
        resample = replace(resample, alpha=1.0)
    ss = np.random.SeedSequence([int(seed), 0x636C70])
    init_seed, noise_seed = [int(s.generate_state(1)[0]) for s in ss.spawn(2)]
    rng = np.random.default_rng(noise_seed)
    belief = pfcore.initial_belief(episode, fmap, K, init_seed)
    st = ad.constant(sigma_t)
    sr = ad.constant(sigma_r)
    occ = fmap.occupancy(include_clutter=False)  # the filter only knows the walls

    def transition_fn(b, odom, r):
        noise = r.standard_normal((b.K, 3))
        states = md.transition_apply(b.states, odom, st, sr, noise)
        return pfcore.ParticleBelief(states, b.log_weights, b.degenerate)

    def loglik_fn(b, obs):
        s = b.states.data
        offs = ws.beam_angles(0.0, sensor.beams, sensor.fov)
        angs = (s[:, 2][:, None] + offs[None, :]).reshape(-1)
        ranges, _ = ws.raycast_batch(
            occ,
            fmap.resolution,
            np.repeat(s[:, 0], sensor.beams),
            np.repeat(s[:, 1], sensor.beams),
            angs,
            sensor.max_range,
        )
        ll = beam_log_likelihood(obs, ranges.reshape(b.K, sensor.beams), beam_params)
        return ad.constant(ll)

    steps = [(episode.odometry[t - 1], episode.scans[t]) for t in range(1, (max_steps or episode.steps) + 1)]
    return pfcore.run_filter(belief, steps, transition_fn, loglik_fn, resample, rng)


def tune_beam_params(episodes_and_maps, base: BeamModelParams, K=200, seed=0, grid=None):
    """Small grid search over (sigma_hit, z_hit) on validation episodes;
    returns the parameter set with the lowest mean final-quarter error."""
    grid = grid or [(s, z) for s in (0.05, 0.1, 0.2) for z in (0.6, 0.75, 0.9)]
    best, best_err = base, math.inf
    for sigma_hit, z_hit in grid:
        z_rest = 1.0 - z_hit
        cand = BeamModelParams(
            z_hit=z_hit,
            z_max=z_rest * 0.2,
            z_rand=z_rest * 0.8,
            sigma_hit=sigma_hit,
            max_range=base.max_range,
        )
        errs = []
        for i, (ep, fmap, sensor) in enumerate(episodes_and_maps):
            out = classical_pf_rollout(ep, fmap, cand, K, None, seed + i, sensor)
            est = out.estimate_array()
            tail = max(1, len(est) // 4)
            d = np.linalg.norm(est[-tail:, :2] - ep.poses[-tail:, :2], axis=1)
            errs.append(float(np.sqrt(np.mean(d**2))))
        err = float(np.mean(errs))
        if err < best_err:
            best, best_err = cand, err
    return best


def odometry_only_rollout(episode: ws.Episode, fmap: ws.FloorMap, seed=0):
    """Integrate odometry from the initial belief mean; (T+1, 3) poses."""
    init = episode.init
    if init.mode == "tracking" and init.center is not None:
        pose = np.asarray(init.center, dtype=np.float64).copy()
    else:
        states, logw = ws.sample_initial_belief(init, fmap, episode.poses[0], 2048, seed)
        w = np.exp(logw)
        pose = np.array(
            [
                np.sum(w * states[:, 0]),
                np.sum(w * states[:, 1]),
                math.atan2(np.sum(w * np.sin(states[:, 2])), np.sum(w * np.cos(states[:, 2]))),
            ]
        )
    out = [pose.copy()]
    for u in episode.odometry:
        c, s = math.cos(pose[2]), math.sin(pose[2])
        pose = np.array(
            [
                pose[0] + c * u[0] - s * u[1],
                pose[1] + s * u[0] + c * u[1],
                ws.wrap_angle(pose[2] + u[2]),
            ]
        )
        out.append(pose.copy())
    return np.array(out)


# ---------------------------------------------------------------------------
# exact discrete Bayes filter and its toy world


def tv_distance(p, q):
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def histogram_predict(probs, tables, table_probs):
    """Exact prediction step: push mass through deterministic transition
    tables, one per noise offset, weighted by the offset probabilities."""
    out = np.zeros_like(probs)
    for table, p in zip(tables, table_probs):
        np.add.at(out, table, p * probs)
    return out


def histogram_update(probs, log_lik):
    """Exact correction step; raises on total inconsistency."""
    mask = probs > 0
    m = np.max(log_lik[mask]) if mask.any() else -np.inf
    if not np.isfinite(m):
        raise ValueError("zero posterior probability: observation impossible under the model")
    post = probs * np.exp(log_lik - m)
    total = post.sum()
    if total <= 0.0:
        raise ValueError("zero posterior probability: observation impossible under the model")
    return post / total


@dataclass
class ToyEpisode:
    states: np.ndarray  # (T+1,) int state indices
    commands: list  # T command names
    observations: np.ndarray  # (T, beams)


class DiscreteToyWorld:
    """Grid world with discrete states (cell x 16 headings), a small
    discrete motion kernel, and a Gaussian range sensor.  Motion and
    sensing laws are exact and shared verbatim between the histogram
    filter and the particle filter, so the two must agree.
    """

    FORWARD_KERNEL = ((0, 0.1), (1, 0.8), (2, 0.1))
    ROT_KERNEL = ((-1, 0.1), (0, 0.8), (1, 0.1))

    def __init__(self, fmap: ws.FloorMap, n_orient=16, beams=5, fov=math.pi, max_range=3.0, sigma_z=0.15, rot_step=2):
        self.fmap = fmap
        self.n_orient = n_orient
        self.beams = beams
        self.fov = fov
        self.max_range = max_range
        self.sigma_z = sigma_z
        self.rot_step = rot_step
        h, w = fmap.walls.shape
        self.h, self.w = h, w
        self.n_states = h * w * n_orient
        occ = fmap.occupancy()
        self.occ = occ

        rr, cc, oo = np.meshgrid(np.arange(h), np.arange(w), np.arange(n_orient), indexing="ij")
        self.cell_r = rr.reshape(-1)
        self.cell_c = cc.reshape(-1)
        self.orient = oo.reshape(-1)
        self.free_mask = ~occ[self.cell_r, self.cell_c]
        self.angles = ws.wrap_angle(self.orient * (2.0 * math.pi / n_orient))

        # expected scans for every state (free states only are meaningful)
        res = fmap.resolution
        xs = (self.cell_c + 0.5) * res
        ys = (self.cell_r + 0.5) * res
        offs = ws.beam_angles(0.0, beams, fov)
        rays, _ = ws.raycast_batch(
            occ,
            res,
            np.repeat(xs, beams),
            np.repeat(ys, beams),
            (self.angles[:, None] + offs[None, :]).reshape(-1),
            max_range,
        )
        self.zhat = rays.reshape(self.n_states, beams)
        self.zhat[~self.free_mask] = 0.0

        self._tables = {
            "fwd": self._forward_tables(),
            "rot+": self._rot_tables(+1),
            "rot-": self._rot_tables(-1),
        }

    def state_index(self, r, c, o):
        return (np.asarray(r) * self.w + np.asarray(c)) * self.n_orient + np.asarray(o)

    def decode(self, s):
        s = np.asarray(s)
        o = s % self.n_orient
        rc = s // self.n_orient
        return rc // self.w, rc % self.w, o

    def _unit_step(self):
        """8-connected forward step per orientation sector."""
        dx = np.round(np.cos(self.angles[: self.n_orient])).astype(np.int64)
        dy = np.round(np.sin(self.angles[: self.n_orient])).astype(np.int64)
        return dy, dx  # (drow, dcol) indexed by orientation

    def _forward_tables(self):
        dy, dx = self._unit_step()
        tables, probs = [], []
        for k, p in self.FORWARD_KERNEL:
            r = self.cell_r.copy()
            c = self.cell_c.copy()
            for _ in range(k):
                nr = r + dy[self.orient]
                nc = c + dx[self.orient]
                ok = (nr >= 0) & (nr < self.h) & (nc >= 0) & (nc < self.w)
                ok &= ~self.occ[np.clip(nr, 0, self.h - 1), np.clip(nc, 0, self.w - 1)]
                r = np.where(ok, nr, r)  # blocked: stay
                c = np.where(ok, nc, c)
            tables.append(self.state_index(r, c, self.orient))
            probs.append(p)
        return tables, probs

    def _rot_tables(self, sign):
        tables, probs = [], []
        for k, p in self.ROT_KERNEL:
            o = (self.orient + sign * self.rot_step + k) % self.n_orient
            tables.append(self.state_index(self.cell_r, self.cell_c, o))
            probs.append(p)
        return tables, probs

    def kernel(self, command):
        return self._tables[command]

    def uniform_prior(self):
        p = self.free_mask.astype(np.float64)
        return p / p.sum()

    def log_likelihood_field(self, z):
        """log N(z; zhat(s), sigma_z^2 I) for every state (constants kept)."""
        d = (z[None, :] - self.zhat) / self.sigma_z
        return -0.5 * np.sum(d * d, axis=1) - self.beams * (math.log(self.sigma_z) + LOG_SQRT_2PI)

    def sample_episode(self, seed, steps, p_forward=0.8) -> ToyEpisode:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x746F79]))
        free_states = np.nonzero(self.free_mask)[0]
        s = int(free_states[rng.integers(len(free_states))])
        states, commands, obs = [s], [], []
        for _ in range(steps):
            if rng.random() < p_forward:
                cmd = "fwd"
            else:
                cmd = "rot+" if rng.random() < 0.5 else "rot-"
            tables, probs = self.kernel(cmd)
            k = rng.choice(len(probs), p=np.asarray(probs))
            s = int(tables[k][s])
            z = self.zhat[s] + rng.normal(0.0, self.sigma_z, self.beams)
            states.append(s)
            commands.append(cmd)
            obs.append(z)
        return ToyEpisode(np.asarray(states), commands, np.asarray(obs))


def histogram_filter_exact(world: DiscreteToyWorld, episode: ToyEpisode, prior=None):
    """Exact Bayes posterior after every step; list of (S,) arrays."""
    if world.n_states > 1_000_000:
        raise ValueError("state space too large for the exact filter")
    p = world.uniform_prior() if prior is None else np.asarray(prior, dtype=np.float64)
    out = [p.copy()]
    for cmd, z in zip(episode.commands, episode.observations):
        tables, probs = world.kernel(cmd)
        p = histogram_predict(p, tables, probs)
        p = histogram_update(p, world.log_likelihood_field(z))
        out.append(p.copy())
    return out


def toy_pf_posterior(world: DiscreteToyWorld, episode: ToyEpisode, K, seed, scheme="systematic"):
    """Particle filter on the same discrete laws; final per-state weights.

    Runs the real filter machinery (reweight + resampling); particle
    states encode (col, row, heading angle) so the shared belief
    container applies unchanged.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x746F7970]))
    free_states = np.nonzero(world.free_mask)[0]
    s0 = free_states[rng.integers(len(free_states), size=K)]

    def to_states(s_idx):
        r, c, o = world.decode(s_idx)
        return np.column_stack([c.astype(np.float64), r.astype(np.float64), ws.wrap_angle(o * (2 * math.pi / world.n_orient))])

    def to_index(states):
        c = states.data[:, 0].astype(np.int64)
        r = states.data[:, 1].astype(np.int64)
        o = np.round(np.mod(states.data[:, 2], 2 * math.pi) / (2 * math.pi / world.n_orient)).astype(np.int64) % world.n_orient
        return world.state_index(r, c, o)

    belief = pfcore.ParticleBelief.from_arrays(to_states(s0), np.full(K, -math.log(K)))

    def transition_fn(b, cmd, r):
        tables, probs = world.kernel(cmd)
        s_idx = to_index(b.states)
        pick = r.choice(len(probs), p=np.asarray(probs), size=b.K)
        nxt = np.empty(b.K, dtype=np.int64)
        for k in range(len(probs)):
            sel = pick == k
            nxt[sel] = tables[k][s_idx[sel]]
        return pfcore.ParticleBelief(ad.constant(to_states(nxt)), b.log_weights, b.degenerate)

    def loglik_fn(b, z):
        return ad.constant(world.log_likelihood_field(z)[to_index(b.states)])

    resample = pfcore.ResampleConfig(alpha=1.0, scheme=scheme, period=1, enabled=True)
    out = pfcore.run_filter(belief, list(zip(episode.commands, episode.observations)), transition_fn, loglik_fn, resample, rng)
    final = out.beliefs[-1]
    return np.bincount(to_index(final.states), weights=final.weights(), minlength=world.n_states)
