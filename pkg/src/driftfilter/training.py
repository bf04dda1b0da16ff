"""End-to-end training: loss, optimizer, truncated backprop through time.

One training step unrolls the filter over a short window of steps for a
batch of episodes that share a map, sums the pose loss over the window,
backpropagates through the whole unrolled graph (transition noise and
resampling indices enter as data), clips the global gradient norm and
applies an Adam update.  The belief is carried to the next window as
plain numbers, cutting the gradient at window boundaries.

Episode weight math runs per episode on small vectors; the expensive
network evaluation is batched over every particle of every episode in
the batch.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from driftfilter import autodiff as ad
from driftfilter import models as md
from driftfilter import pfcore
from driftfilter import worldsim as ws

CSV_HEADER = "# driftfilter-csv v1"


class ConfigError(ValueError):
    pass


class TrainError(RuntimeError):
    """Training hit a non-finite value; message names the first bad node."""


_CONFIG_KEYS = {
    # filter / loss
    "k_train": (int, 30),
    "bptt_steps": (int, 4),
    "beta": (float, 0.25),
    "loss": (str, "mse"),  # mse | mixture
    "mix_h_x": (float, 0.3),
    "mix_h_y": (float, 0.3),
    "mix_h_phi": (float, math.radians(30.0)),
    "loss_floor": (float, -100.0),
    # resampling during training
    "resample": (str, "off"),
    "alpha": (float, 0.5),
    "resample_scheme": (str, "multinomial"),
    "resample_period": (int, 1),
    # optimization
    "lr": (float, 3e-3),
    "clip": (float, 5.0),
    "epochs": (int, 10),
    "batch": (int, 8),
    "episodes_per_epoch": (int, 0),  # 0 = all
    "val_episodes": (int, 200),
    "val_maps": (int, 1),
    "seed": (int, 0),
    # model
    "sigma_t": (float, 0.04),
    "sigma_r": (float, math.radians(2.0)),
    "sigma_learnable": (str, "off"),
    "modality": (str, "scan"),
    "crop_size": (int, 28),
    "map_enc_channels": (str, "16,32"),
    "scan_hidden": (int, 64),
    "scan_channels": (int, 4),
    "patch_enc_channels": (str, "8,16"),
    "lfc_channels": (int, 8),
}


def _parse_bool(key, raw):
    if raw in ("on", "true", "1", "yes"):
        return True
    if raw in ("off", "false", "0", "no"):
        return False
    raise ConfigError(f"{key}: expected on/off, got {raw!r}")


@dataclass
class TrainConfig:
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        merged = {k: d for k, (_, d) in _CONFIG_KEYS.items()}
        merged.update(self.values)
        self.values = merged
        if self.bptt_steps < 1 or self.k_train < 1 or self.beta < 0:
            raise ConfigError("bptt_steps and k_train must be >= 1, beta >= 0")

    def __getattr__(self, key):
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key)

    @property
    def resample_config(self):
        return pfcore.ResampleConfig(
            alpha=self.alpha,
            scheme=self.resample_scheme,
            period=self.resample_period,
            enabled=_parse_bool("resample", self.resample),
        )

    def net_config(self, sensor: ws.SensorSpec, map_channels=1):
        conv = tuple(int(x) for x in str(self.map_enc_channels).split(","))
        patch = tuple(int(x) for x in str(self.patch_enc_channels).split(","))
        return md.NetConfig(
            modality=self.modality,
            beams=sensor.beams,
            crop_size=self.crop_size,
            map_channels=map_channels,
            conv_channels=conv,
            scan_hidden=self.scan_hidden,
            scan_channels=self.scan_channels,
            patch_size=sensor.patch_size or self.crop_size,
            patch_channels=patch,
            lfc_channels=self.lfc_channels,
            sigma_t=self.sigma_t,
            sigma_r=self.sigma_r,
            sigma_learnable=_parse_bool("sigma_learnable", self.sigma_learnable),
        )


def parse_config_text(text) -> TrainConfig:
    """Flat ``key = value`` lines; '#' starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            valid = ", ".join(sorted(_CONFIG_KEYS))
            raise ConfigError(f"unknown config key {key!r}; valid keys: {valid}")
        typ, _ = _CONFIG_KEYS[key]
        try:
            values[key] = typ(raw)
        except ValueError as e:
            raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from e
    return TrainConfig(values)


def load_config(path) -> TrainConfig:
    with open(path) as f:
        return parse_config_text(f.read())


# ---------------------------------------------------------------------------
# losses


def pose_loss(estimates, truths, beta):
    """Sum over steps of squared position error plus beta times squared
    wrapped heading error.  ``estimates`` are (x, y, phi) tensor triples."""
    truths = np.asarray(truths, dtype=np.float64)
    if len(estimates) != len(truths):
        raise ValueError(f"{len(estimates)} estimates vs {len(truths)} truths")
    loss = None
    for (xm, ym, pm), truth in zip(estimates, truths):
        dx = xm - float(truth[0])
        dy = ym - float(truth[1])
        dp = ad.wrap_angle(pm - float(truth[2]))
        term = dx * dx + dy * dy + beta * (dp * dp)
        loss = term if loss is None else loss + term
    return loss if loss is not None else ad.constant(0.0)


def mixture_loss(beliefs, truths, bandwidths=(0.3, 0.3, math.radians(30.0)), floor=-100.0):
    """Negative log of the belief density at the true pose, each particle
    smoothed with an axis-aligned Gaussian kernel (angles wrapped).

    Steps whose log-density falls below ``floor`` are clamped to the
    floor as data (their gradient is dropped); returns (loss, clamped)."""
    hx, hy, hp = bandwidths
    if min(bandwidths) <= 0:
        raise ValueError("kernel bandwidths must be positive")
    log_norm = -(1.5 * math.log(2.0 * math.pi) + math.log(hx * hy * hp))
    truths = np.asarray(truths, dtype=np.float64)
    if len(beliefs) != len(truths):
        raise ValueError(f"{len(beliefs)} beliefs vs {len(truths)} truths")
    loss = None
    clamped = 0
    for belief, truth in zip(beliefs, truths):
        x, y, phi = md.state_columns(belief.states)
        dx = (x - float(truth[0])) * (1.0 / hx)
        dy = (y - float(truth[1])) * (1.0 / hy)
        dp = ad.wrap_angle(phi - float(truth[2])) * (1.0 / hp)
        log_kernel = (dx * dx + dy * dy + dp * dp) * -0.5 + log_norm
        step = ad.logsumexp(belief.log_weights + log_kernel)
        if step.data < floor:
            step = ad.constant(float(floor))
            clamped += 1
        loss = step if loss is None else loss + step
    return ad.neg(loss), clamped


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, values, lr=3e-3, beta1=0.9, beta2=0.999, eps=1e-8, clip=0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip = clip
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in values.items()}
        self.v = {k: np.zeros_like(v) for k, v in values.items()}

    def step(self, values, grads):
        if self.clip > 0:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > self.clip:
                scale = self.clip / (norm + 1e-12)
                grads = {k: g * scale for k, g in grads.items()}
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            m = self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            v = self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            values[k] -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainReport:
    epochs: list  # (train_loss, val_loss) per epoch, per-step averages
    seconds: float
    checkpoint: str
    best_epoch: int
    clamped_steps: int = 0

    def to_json(self):
        return json.dumps(
            {
                "epochs": [{"train_loss": a, "val_loss": b} for a, b in self.epochs],
                "seconds": self.seconds,
                "checkpoint": self.checkpoint,
                "best_epoch": self.best_epoch,
                "clamped_steps": self.clamped_steps,
            }
        )


def _window_pass(fmap, episodes, window, states_list, logw_list, params, tensors, cfg, rng):
    """Forward one BPTT window for a same-map batch; returns loss tensor,
    new carried arrays, and per-episode beliefs for the mixture loss."""
    net = params.cfg
    B = len(episodes)
    K = states_list[0].shape[0]
    t0, t1 = window
    beliefs = [
        pfcore.ParticleBelief(ad.constant(states_list[b]), ad.constant(logw_list[b]))
        for b in range(B)
    ]
    rep_idx = np.repeat(np.arange(B), K)
    resample = cfg.resample_config
    loss = None
    clamped = 0
    for t in range(t0, t1):
        for b in range(B):
            beliefs[b] = pfcore.transition_update(beliefs[b], episodes[b].odometry[t], params, rng, tensors=tensors)
        stacked = ad.concat([bel.states for bel in beliefs], axis=0)
        crops = md.local_map_crops(fmap, stacked, net.crop_size)
        scan = patch = None
        if net.uses_scan:
            scan = np.stack([ep.scans[t + 1] for ep in episodes])
        if net.uses_patch:
            patch = np.stack([ep.patches[t + 1] for ep in episodes])
        ll_all = md.observation_scores(tensors, net, crops, scan=scan, patch=patch, episode_index=rep_idx)
        ll_rows = ad.reshape(ll_all, (B, K))
        for b in range(B):
            llb = ad.reshape(ad.gather_rows(ll_rows, [b]), (K,))
            beliefs[b] = pfcore.reweight(beliefs[b], llb)
            if resample.enabled and (t + 1) % resample.period == 0:
                beliefs[b] = pfcore.soft_resample(beliefs[b], resample, rng)
            truth = episodes[b].poses[t + 1]
            if cfg.loss == "mse":
                term = pose_loss([pfcore.estimate(beliefs[b])], truth[None, :], cfg.beta)
            else:
                term, c = mixture_loss(
                    [beliefs[b]], truth[None, :],
                    bandwidths=(cfg.mix_h_x, cfg.mix_h_y, cfg.mix_h_phi),
                    floor=cfg.loss_floor,
                )
                clamped += c
            loss = term if loss is None else loss + term
    loss = loss * (1.0 / B)
    carried = [bel.detached_arrays() for bel in beliefs]
    return loss, carried, clamped


def evaluate_loss(dataset, episodes, params, cfg, seed):
    """Mean per-step pose loss over full episodes, no gradients."""
    total, steps = 0.0, 0
    for i, ep in enumerate(episodes):
        fmap = dataset.maps[ep.map_id]
        out = pfcore.filter_rollout(ep, fmap, params, cfg.k_train, cfg.resample_config, seed + i)
        loss = pose_loss(out.estimates[1:], ep.poses[1:], cfg.beta)
        total += loss.item()
        steps += ep.steps
    return total / max(steps, 1)


def train(dataset, cfg: TrainConfig, checkpoint_path, metrics_path=None):
    """Train on a dataset (see worldsim.load_dataset); returns TrainReport.

    Deterministic for a fixed config seed: data order, particle draws and
    transition noise all derive from it.
    """
    t_start = time.perf_counter()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7472494E]))

    map_ids = sorted(dataset.maps)
    if len(map_ids) > cfg.val_maps:
        val_ids = set(map_ids[-cfg.val_maps :]) if cfg.val_maps > 0 else set()
    else:
        val_ids = set()
    train_eps = [ep for ep in dataset.episodes if ep.map_id not in val_ids]
    val_eps = [ep for ep in dataset.episodes if ep.map_id in val_ids]
    if not val_eps:  # fall back to an episode split
        n_val = max(1, len(train_eps) // 10)
        val_eps = train_eps[-n_val:]
        train_eps = train_eps[:-n_val]
    if not train_eps:
        raise ConfigError("dataset has no training episodes")
    if cfg.val_episodes and len(val_eps) > cfg.val_episodes:
        val_eps = val_eps[: cfg.val_episodes]
    short = [ep for ep in train_eps if ep.steps < cfg.bptt_steps]
    if short:
        raise ConfigError(f"{len(short)} episodes are shorter than bptt_steps={cfg.bptt_steps}")

    net = cfg.net_config(dataset.sensor, map_channels=dataset.map_channels)
    params = md.init_params(net, seed=cfg.seed)
    opt = Adam(params.values, lr=cfg.lr, clip=cfg.clip)

    rows = []
    best = (math.inf, -1, None)
    clamped_total = 0
    lines = [CSV_HEADER, "epoch,train_loss,val_loss,seconds"]
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_eps))
        if cfg.episodes_per_epoch:
            order = order[: cfg.episodes_per_epoch]
        by_map = {}
        for i in order:
            by_map.setdefault(train_eps[i].map_id, []).append(train_eps[i])

        epoch_loss, epoch_steps = 0.0, 0
        for map_id in sorted(by_map):
            fmap = dataset.maps[map_id]
            eps = by_map[map_id]
            for start in range(0, len(eps), cfg.batch):
                batch = eps[start : start + cfg.batch]
                states_list, logw_list = [], []
                for ep in batch:
                    s, lw = ws.sample_initial_belief(
                        ep.init, fmap, ep.poses[0], cfg.k_train, int(rng.integers(2**63))
                    )
                    states_list.append(s)
                    logw_list.append(lw)
                T = min(ep.steps for ep in batch)
                for t0 in range(0, T - (T % cfg.bptt_steps), cfg.bptt_steps):
                    tape = ad.Tape()
                    tensors = params.tensors(tape)
                    loss, carried, clamped = _window_pass(
                        fmap, batch, (t0, t0 + cfg.bptt_steps), states_list, logw_list,
                        params, tensors, cfg, rng,
                    )
                    clamped_total += clamped
                    if not np.isfinite(loss.data):
                        hit = tape.first_nonfinite()
                        where = f"node {hit[0]} op={hit[1]}" if hit else "loss"
                        raise TrainError(f"non-finite training loss at epoch {epoch}: first bad value in {where}")
                    grads = tape.backward(loss).named()
                    opt.step(params.values, grads)
                    states_list = [c[0] for c in carried]
                    logw_list = [c[1] for c in carried]
                    epoch_loss += loss.item() * len(batch)
                    epoch_steps += cfg.bptt_steps * len(batch)

        train_loss = epoch_loss / max(epoch_steps, 1)
        val_loss = evaluate_loss(dataset, val_eps, params, cfg, seed=cfg.seed * 1000 + epoch)
        rows.append((train_loss, val_loss))
        lines.append(f"{epoch},{train_loss:.9g},{val_loss:.9g},{time.perf_counter() - t_start:.3f}")
        if val_loss < best[0]:
            best = (val_loss, epoch, params.copy())

    final = best[2] if best[2] is not None else params
    md.save_checkpoint(checkpoint_path, final)
    if metrics_path:
        with open(metrics_path, "w") as f:
            f.write("\n".join(lines) + "\n")
    return TrainReport(
        epochs=rows,
        seconds=time.perf_counter() - t_start,
        checkpoint=str(checkpoint_path),
        best_epoch=best[1],
        clamped_steps=clamped_total,
    )
