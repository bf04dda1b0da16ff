"""Differentiable particle filter: belief container and Bayesian updates.

Weights live in log space throughout; after every update the belief
satisfies logsumexp(log_weights) == 0, i.e. the weights sum to one.

Soft resampling draws particle indices from the mixture
``q(k) = alpha * w_k + (1 - alpha) / K`` and corrects each survivor by
the importance ratio ``w_k / q(k)`` before renormalizing.  At alpha = 1
this reduces to plain resampling with uniform post-weights (and exactly
zero gradient through the weight path); for alpha < 1 the ratio keeps
the dependence on the pre-resampling weights, which is what lets the
training loss reach the observation model through a resampling step.
Indices are drawn outside the tape: gradients flow through weights and
states, never through the selection itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from driftfilter import autodiff as ad
from driftfilter import models as md
from driftfilter import worldsim as ws


class DegenerateBelief(Warning):
    pass


@dataclass
class ParticleBelief:
    states: ad.Tensor  # (K, 3): x, y, phi
    log_weights: ad.Tensor  # (K,), logsumexp == 0
    degenerate: bool = False

    @property
    def K(self):
        return self.states.shape[0]

    @staticmethod
    def from_arrays(states, log_weights, tape=None):
        to_tensor = (lambda a: ad.constant(a)) if tape is None else (lambda a: tape.leaf(a))
        return ParticleBelief(to_tensor(np.asarray(states, dtype=np.float64)),
                              to_tensor(np.asarray(log_weights, dtype=np.float64)))

    def weights(self):
        return np.exp(self.log_weights.data)

    def detached_arrays(self):
        return self.states.data.copy(), self.log_weights.data.copy()

    def check(self, tol=1e-9):
        lse = float(_np_logsumexp(self.log_weights.data))
        if abs(lse) > tol:
            raise ValueError(f"belief weights not normalized: logsumexp={lse!r}")
        phi = self.states.data[:, 2]
        if ((phi < -math.pi) | (phi >= math.pi)).any():
            raise ValueError("belief headings not wrapped to [-pi, pi)")
        return self


@dataclass
class ResampleConfig:
    alpha: float = 0.5
    scheme: str = "multinomial"  # or "systematic"
    period: int = 1
    enabled: bool = False

    def __post_init__(self):
        if self.alpha is None or not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.period < 1:
            raise ValueError("resample period must be >= 1")
        if self.scheme not in ("multinomial", "systematic"):
            raise ValueError(f"unknown resample scheme {self.scheme!r}")


def _np_logsumexp(a):
    m = np.max(a)
    if not np.isfinite(m):
        return m
    return m + np.log(np.sum(np.exp(a - m)))


# ---------------------------------------------------------------------------
# update steps


def transition_update(belief: ParticleBelief, odom, params: md.ModelParams, rng, tensors=None):
    """Move every particle by odometry plus reparameterized Gaussian noise.

    ``rng`` supplies the standard-normal noise vector (recorded as data,
    so gradients flow to the sigma scales and through the states).
    Weights are untouched; particles may leave the map on purpose.
    """
    t = tensors if tensors is not None else params.tensors()
    noise = rng.standard_normal((belief.K, 3))
    states = md.transition_apply(belief.states, odom, t["sigma_t"], t["sigma_r"], noise)
    return ParticleBelief(states, belief.log_weights, belief.degenerate)


def reweight(belief: ParticleBelief, log_lik: ad.Tensor):
    """Bayes correction in log space: w'_k proportional to w_k * f_k.

    A fully underflowed update (all likelihoods zero) resets the weights
    to uniform and flags the belief as degenerate instead of aborting.
    """
    s = belief.log_weights + log_lik
    lse = ad.logsumexp(s)
    if not np.isfinite(lse.data):
        uniform = ad.constant(np.full(belief.K, -math.log(belief.K)))
        return ParticleBelief(belief.states, uniform, degenerate=True)
    return ParticleBelief(belief.states, s - lse, belief.degenerate)


def measurement_update(belief: ParticleBelief, observation, fmap: ws.FloorMap, params: md.ModelParams, tensors=None):
    """Reweight with the learned observation model (weights shared across
    particles)."""
    cfg = params.cfg
    t = tensors if tensors is not None else params.tensors()
    crops = md.local_map_crops(fmap, belief.states, cfg.crop_size)
    scan = patch = None
    if cfg.modality == "scan":
        scan = np.asarray(observation, dtype=np.float64).reshape(1, -1)
    elif cfg.modality == "patch":
        patch = np.asarray(observation, dtype=np.float64)[None, :, :]
    else:
        scan = np.asarray(observation[0], dtype=np.float64).reshape(1, -1)
        patch = np.asarray(observation[1], dtype=np.float64)[None, :, :]
    ll = md.observation_scores(t, cfg, crops, scan=scan, patch=patch)
    return reweight(belief, ll)


def resample_proposal_log(log_weights: ad.Tensor, alpha: float):
    """log q with q = alpha * w + (1 - alpha)/K, stable in log space.

    alpha == 1 returns the weights tensor itself, so the downstream
    ratio w/q cancels exactly node-for-node and its gradient is
    identically zero."""
    k = log_weights.shape[0]
    if alpha == 1.0:
        return log_weights
    if alpha == 0.0:
        return ad.constant(np.full(k, -math.log(k)))
    a = log_weights + math.log(alpha)
    b = ad.constant(np.full(k, math.log((1.0 - alpha) / k)))
    stacked = ad.concat([ad.reshape(a, (k, 1)), ad.reshape(b, (k, 1))], axis=1)
    return ad.logsumexp(stacked, axis=1)


def draw_indices(q, scheme, rng):
    """Sample K ancestor indices from the categorical q (plain data)."""
    k = len(q)
    cum = np.cumsum(q)
    cum[-1] = 1.0  # guard rounding
    if scheme == "multinomial":
        u = rng.random(k)
    else:  # systematic
        u = (rng.random() + np.arange(k)) / k
    return np.minimum(np.searchsorted(cum, u, side="right"), k - 1)


def soft_resample(belief: ParticleBelief, config: ResampleConfig, rng):
    """Differentiable resampling; see module docstring for the math."""
    lw = belief.log_weights
    lq = resample_proposal_log(lw, config.alpha)
    q = np.exp(lq.data)
    idx = draw_indices(q / q.sum(), config.scheme, rng)
    new_states = ad.gather_rows(belief.states, idx)
    ratio = ad.gather_rows(lw, idx) - ad.gather_rows(lq, idx)  # log (w/q), unnormalized
    log_w = ratio - ad.logsumexp(ratio)
    return ParticleBelief(new_states, log_w, belief.degenerate)


def estimate(belief: ParticleBelief):
    """Weighted-mean pose; the heading uses the circular mean so the
    estimate stays put under +-pi wraparound.  Returns (x, y, phi)
    scalar tensors, differentiable."""
    w = ad.exp(belief.log_weights)
    x, y, phi = md.state_columns(belief.states)
    xm = ad.tsum(w * x)
    ym = ad.tsum(w * y)
    pm = ad.atan2(ad.tsum(w * ad.sin(phi)), ad.tsum(w * ad.cos(phi)))
    return xm, ym, pm


def estimate_pose(belief: ParticleBelief) -> ws.Pose:
    xm, ym, pm = estimate(belief)
    return ws.Pose(xm.item(), ym.item(), pm.item())


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class Rollout:
    beliefs: list = field(default_factory=list)  # T+1 entries
    estimates: list = field(default_factory=list)  # T+1 (x, y, phi) tensor triples

    def estimate_array(self):
        return np.array([[e[0].item(), e[1].item(), e[2].item()] for e in self.estimates])


def run_filter(belief: ParticleBelief, steps, transition_fn, loglik_fn, resample: ResampleConfig | None, rng):
    """Generic filtering skeleton shared by the learned filter, the
    classical baseline and the oracle cross-checks.

    steps: iterable of (odom, observation); transition_fn(belief, odom,
    rng) -> belief; loglik_fn(belief, observation) -> (K,) tensor.
    Resampling runs after the measurement on steps where ``t %% period
    == 0`` (t starts at 1).
    """
    out = Rollout()
    out.beliefs.append(belief)
    out.estimates.append(estimate(belief))
    for t, (odom, obs) in enumerate(steps, start=1):
        belief = transition_fn(belief, odom, rng)
        belief = reweight(belief, loglik_fn(belief, obs))
        if resample is not None and resample.enabled and t % resample.period == 0:
            belief = soft_resample(belief, resample, rng)
        out.beliefs.append(belief)
        out.estimates.append(estimate(belief))
    return out


def initial_belief(episode: ws.Episode, fmap: ws.FloorMap, K, seed, tape=None):
    states, logw = ws.sample_initial_belief(episode.init, fmap, episode.poses[0], K, seed)
    return ParticleBelief.from_arrays(states, logw, tape)


def filter_rollout(
    episode: ws.Episode,
    fmap: ws.FloorMap,
    params: md.ModelParams,
    K,
    resample: ResampleConfig | None,
    seed,
    tape=None,
    max_steps=None,
) -> Rollout:
    """Full learned-filter pass over one episode.

    Given a tape, every step is recorded and the estimates are
    differentiable w.r.t. the model parameters; without one this is a
    plain evaluation run.
    """
    if K < 1:
        raise ValueError("need at least one particle")
    ss = np.random.SeedSequence([int(seed), 0x726F6C6C])
    init_seed, noise_seed = [int(s.generate_state(1)[0]) for s in ss.spawn(2)]
    rng = np.random.default_rng(noise_seed)
    belief = initial_belief(episode, fmap, K, init_seed, tape)
    tensors = params.tensors(tape)

    def transition_fn(b, odom, r):
        return transition_update(b, odom, params, r, tensors=tensors)

    def loglik_fn(b, obs):
        cfg = params.cfg
        crops = md.local_map_crops(fmap, b.states, cfg.crop_size)
        scan = patch = None
        if cfg.uses_scan:
            scan = np.asarray(obs[0] if cfg.uses_patch else obs, dtype=np.float64).reshape(1, -1)
        if cfg.uses_patch:
            patch = np.asarray(obs[1] if cfg.uses_scan else obs, dtype=np.float64)[None, :, :]
        return md.observation_scores(tensors, cfg, crops, scan=scan, patch=patch)

    steps = episode_steps(episode, params.cfg, max_steps)
    return run_filter(belief, steps, transition_fn, loglik_fn, resample, rng)


def episode_steps(episode: ws.Episode, cfg: md.NetConfig, max_steps=None):
    """(odom, observation) pairs for t = 1..T in the filter's modality."""
    T = episode.steps if max_steps is None else min(max_steps, episode.steps)
    out = []
    for t in range(1, T + 1):
        if cfg.modality == "scan":
            obs = episode.scans[t]
        elif cfg.modality == "patch":
            obs = episode.patches[t]
        else:
            obs = (episode.scans[t], episode.patches[t])
        out.append((episode.odometry[t - 1], obs))
    return out


def batched_filter_rollout(episodes, fmap: ws.FloorMap, params: md.ModelParams, K, resample: ResampleConfig | None, seeds, max_steps=None):
    """Evaluate many same-map episodes lock-step with one network call per
    time step; no gradients.

    Every episode keeps its own noise stream (derived from its seed), so
    the results are identical however episodes are grouped or whether
    the single-episode path is used instead.  Returns a list of (T+1, 3)
    estimate arrays.
    """
    E = len(episodes)
    if E == 0:
        return []
    cfg = params.cfg
    tensors = params.tensors(None)
    T = min(ep.steps for ep in episodes) if max_steps is None else max_steps
    rngs, states, logw = [], [], []
    for ep, seed in zip(episodes, seeds):
        ss = np.random.SeedSequence([int(seed), 0x726F6C6C])
        init_seed, noise_seed = [int(s.generate_state(1)[0]) for s in ss.spawn(2)]
        rngs.append(np.random.default_rng(noise_seed))
        s0, lw0 = ws.sample_initial_belief(ep.init, fmap, ep.poses[0], K, init_seed)
        states.append(s0)
        logw.append(lw0)

    def wmean(s, lw):
        w = np.exp(lw)
        return np.array(
            [
                np.sum(w * s[:, 0]),
                np.sum(w * s[:, 1]),
                math.atan2(np.sum(w * np.sin(s[:, 2])), np.sum(w * np.cos(s[:, 2]))),
            ]
        )

    estimates = [[wmean(states[e], logw[e])] for e in range(E)]
    rep_idx = np.repeat(np.arange(E), K)
    for t in range(1, T + 1):
        odom = np.concatenate([np.broadcast_to(ep.odometry[t - 1], (K, 3)) for ep in episodes])
        noise = np.concatenate([rng.standard_normal((K, 3)) for rng in rngs])
        stacked = md.transition_apply(
            ad.constant(np.concatenate(states)), odom, tensors["sigma_t"], tensors["sigma_r"], noise
        )
        crops = md.local_map_crops(fmap, stacked, cfg.crop_size)
        scan = patch = None
        if cfg.uses_scan:
            scan = np.stack([ep.scans[t] for ep in episodes])
        if cfg.uses_patch:
            patch = np.stack([ep.patches[t] for ep in episodes])
        ll = md.observation_scores(tensors, cfg, crops, scan=scan, patch=patch, episode_index=rep_idx).data
        new_states = stacked.data
        for e in range(E):
            s_e = new_states[e * K : (e + 1) * K]
            lw_e = logw[e] + ll[e * K : (e + 1) * K]
            lse = _np_logsumexp(lw_e)
            lw_e = np.full(K, -math.log(K)) if not np.isfinite(lse) else lw_e - lse
            if resample is not None and resample.enabled and t % resample.period == 0:
                lq = resample_proposal_log(ad.constant(lw_e), resample.alpha).data
                q = np.exp(lq)
                idx = draw_indices(q / q.sum(), resample.scheme, rngs[e])
                s_e = s_e[idx]
                lw_e = lw_e[idx] - lq[idx]
                lw_e = lw_e - _np_logsumexp(lw_e)
            states[e] = s_e
            logw[e] = lw_e
            estimates[e].append(wmean(s_e, lw_e))
    return [np.array(est) for est in estimates]


def save_belief_log(path, rollout: Rollout):
    """JSON lines: {t, states, log_weights} per recorded step."""
    import json

    with open(path, "w") as f:
        for t, b in enumerate(rollout.beliefs):
            rec = {
                "t": t,
                "states": [[float(v) for v in row] for row in b.states.data],
                "log_weights": [float(v) for v in b.log_weights.data],
            }
            f.write(json.dumps(rec))
            f.write("\n")
