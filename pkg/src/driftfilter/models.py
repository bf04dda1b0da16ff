"""Trainable transition and observation models.

The observation model scores how well an observation agrees with the map
as seen from a candidate pose.  For each particle an egocentric local
map is cut out of the floor map with a differentiable affine transform
(bilinear sampling), encoded by a small conv stack, and combined with an
encoding of the observation (range scan and/or visual patch).  The
merged feature map passes through a locally-connected layer and a final
dense layer to a single unnormalized log-likelihood.  Weights are shared
across particles.

The transition model moves a particle by the odometry rotated into the
world frame plus Gaussian noise supplied externally, so the update is a
deterministic differentiable function of state, control and noise.

Crop geometry: the robot sits at row ``crop_size - 4`` of the crop and
faces the top row, so most of the crop lies ahead of it; columns left of
center are to the robot's left.  Out-of-map samples read as zero.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from driftfilter import autodiff as ad
from driftfilter import worldsim as ws


class FormatError(ValueError):
    """Checkpoint file is malformed or has an unsupported version."""


MODALITIES = ("scan", "patch", "scan_patch")


@dataclass
class NetConfig:
    modality: str = "scan"
    beams: int = 54
    crop_size: int = 28
    map_channels: int = 1
    conv_channels: tuple = (16, 32)
    scan_hidden: int = 64
    scan_channels: int = 4
    patch_size: int = 28
    patch_channels: tuple = (8, 16)
    lfc_channels: int = 8
    lfc_kernel: int = 3
    pool: int = 2
    sigma_t: float = 0.04
    sigma_r: float = math.radians(2.0)
    sigma_learnable: bool = False

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}")
        if self.crop_size < 2:
            raise ValueError("crop size must be >= 2")
        if self.crop_size % self.pool:
            raise ValueError("crop size must divide by the pool size")
        if self.uses_patch and self.patch_size % self.pool:
            raise ValueError("patch size must divide by the pool size")

    @property
    def uses_scan(self):
        return self.modality in ("scan", "scan_patch")

    @property
    def uses_patch(self):
        return self.modality in ("patch", "scan_patch")

    @property
    def grid(self):
        return self.crop_size // self.pool

    @property
    def merged_channels(self):
        c = self.conv_channels[1]
        if self.uses_scan:
            c += self.scan_channels
        if self.uses_patch:
            c += self.patch_channels[1]
        return c


@dataclass
class ModelParams:
    """Named weight arrays plus the architecture they belong to."""

    cfg: NetConfig
    values: dict = field(default_factory=dict)

    def copy(self):
        return ModelParams(self.cfg, {k: v.copy() for k, v in self.values.items()})

    def tensors(self, tape=None):
        """Tensor view of the weights: tape params when training, constants
        otherwise.  Adds derived sigma_t / sigma_r entries."""
        if tape is None:
            t = {k: ad.constant(v) for k, v in self.values.items()}
        else:
            t = {k: tape.param(v, name=k) for k, v in self.values.items()}
        if self.cfg.sigma_learnable:
            t["sigma_t"] = ad.exp(ad.reshape(ad.gather_rows(t["sigma_log"], [0]), ()))
            t["sigma_r"] = ad.exp(ad.reshape(ad.gather_rows(t["sigma_log"], [1]), ()))
        else:
            t["sigma_t"] = ad.constant(self.cfg.sigma_t)
            t["sigma_r"] = ad.constant(self.cfg.sigma_r)
        return t


def _truncated_normal(rng, shape, std):
    out = rng.standard_normal(shape)
    while True:
        bad = np.abs(out) > 2.0
        if not bad.any():
            break
        out[bad] = rng.standard_normal(int(bad.sum()))
    return out * std


def init_params(cfg: NetConfig, seed=0) -> ModelParams:
    """Fan-in-scaled truncated-normal weights, zero biases."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x696E69]))
    g = cfg.grid
    c1, c2 = cfg.conv_channels
    v = {}

    def conv(name, cout, cin, k=3):
        v[f"{name}.w"] = _truncated_normal(rng, (cout, cin, k, k), 1.0 / math.sqrt(cin * k * k))
        v[f"{name}.b"] = np.zeros(cout)

    def dense(name, nin, nout):
        v[f"{name}.w"] = _truncated_normal(rng, (nin, nout), 1.0 / math.sqrt(nin))
        v[f"{name}.b"] = np.zeros(nout)

    conv("map_conv1", c1, cfg.map_channels)
    conv("map_conv2", c2, c1)
    if cfg.uses_scan:
        dense("scan_fc1", cfg.beams, cfg.scan_hidden)
        dense("scan_fc2", cfg.scan_hidden, cfg.scan_channels * g * g)
    if cfg.uses_patch:
        p1, p2 = cfg.patch_channels
        conv("patch_conv1", p1, 1)
        conv("patch_conv2", p2, p1)
    k = cfg.lfc_kernel
    cin = cfg.merged_channels
    v["lfc.w"] = _truncated_normal(rng, (g * g, cin * k * k, cfg.lfc_channels), 1.0 / math.sqrt(cin * k * k))
    v["lfc.b"] = np.zeros(cfg.lfc_channels)
    dense("head", cfg.lfc_channels * g * g, 1)
    if cfg.sigma_learnable:
        v["sigma_log"] = np.log([cfg.sigma_t, cfg.sigma_r])
    return ModelParams(cfg, v)


def extend_map_channels(params: ModelParams, extra: int) -> ModelParams:
    """Grow the map encoder input by ``extra`` zero-initialized channels.

    With zero weights the new channels cannot change any output, so a
    model trained on plain walls keeps its behavior when semantic layers
    are added to the map."""
    cfg = replace(params.cfg, map_channels=params.cfg.map_channels + extra)
    values = {k: v.copy() for k, v in params.values.items()}
    w = values["map_conv1.w"]
    pad = np.zeros((w.shape[0], extra, w.shape[2], w.shape[3]))
    values["map_conv1.w"] = np.concatenate([w, pad], axis=1)
    return ModelParams(cfg, values)


# ---------------------------------------------------------------------------
# differentiable pieces


def state_columns(states):
    """Split an (N, 3) state tensor into x, y, phi vectors."""
    n = states.shape[0]
    st = ad.transpose(states, (1, 0))
    x = ad.reshape(ad.gather_rows(st, [0]), (n,))
    y = ad.reshape(ad.gather_rows(st, [1]), (n,))
    phi = ad.reshape(ad.gather_rows(st, [2]), (n,))
    return x, y, phi


def stack_columns(cols):
    n = cols[0].shape[0]
    return ad.concat([ad.reshape(c, (n, 1)) for c in cols], axis=1)


def transition_apply(states, odom, sigma_t, sigma_r, noise):
    """One kinematic step for every particle.

    new = state + R(phi) @ odom + diag(sigma_t, sigma_t, sigma_r) * noise,
    where R rotates the robot-frame odometry into the world frame.  The
    caller supplies ``noise`` (N, 3) as data, so the sample is a
    deterministic function and gradients reach the sigma scales.
    ``odom`` is one control (3,) shared by all rows or an (N, 3) array.
    """
    n = states.shape[0]
    odom = np.asarray(odom, dtype=np.float64)
    if odom.ndim == 1:
        odom = np.broadcast_to(odom, (n, 3))
    noise = np.asarray(noise, dtype=np.float64)
    x, y, phi = state_columns(states)
    cph = ad.cos(phi)
    sph = ad.sin(phi)
    uf = ad.constant(np.ascontiguousarray(odom[:, 0]))
    ul = ad.constant(np.ascontiguousarray(odom[:, 1]))
    ur = ad.constant(np.ascontiguousarray(odom[:, 2]))
    ex = ad.constant(np.ascontiguousarray(noise[:, 0]))
    ey = ad.constant(np.ascontiguousarray(noise[:, 1]))
    er = ad.constant(np.ascontiguousarray(noise[:, 2]))
    nx = x + cph * uf - sph * ul + sigma_t * ex
    ny = y + sph * uf + cph * ul + sigma_t * ey
    nphi = ad.wrap_angle(phi + ur + sigma_r * er)
    return stack_columns([nx, ny, nphi])


def local_map_crops(fmap: ws.FloorMap, states, crop_size):
    """Egocentric map crops for every particle, (N, C, L, L).

    Builds the affine sample grid from (x, y, phi) on the tape and reads
    the map channels bilinearly; zero outside the map.  Differentiable in
    the particle states (and the map, were it ever a tensor).
    """
    if crop_size < 2:
        raise ValueError("crop size must be >= 2")
    n = states.shape[0]
    c = fmap.channels.shape[0]
    res = fmap.resolution
    x, y, phi = state_columns(states)
    cph = ad.cos(phi)
    sph = ad.sin(phi)
    fwd, lat = ws.crop_grid_offsets(crop_size, res)
    m = crop_size * crop_size
    idx = np.repeat(np.arange(n), m)
    ft = ad.constant(np.tile(fwd, n))
    lt = ad.constant(np.tile(lat, n))
    xx = ad.gather_rows(x, idx)
    yy = ad.gather_rows(y, idx)
    cc = ad.gather_rows(cph, idx)
    ss = ad.gather_rows(sph, idx)
    wx = xx + cc * ft - ss * lt
    wy = yy + ss * ft + cc * lt
    rows = wy * (1.0 / res) - 0.5
    cols = wx * (1.0 / res) - 0.5
    flat = ad.bilinear_sample(ad.constant(fmap.channels), rows, cols)  # (C, N*m)
    return ad.transpose(ad.reshape(flat, (c, n, crop_size, crop_size)), (1, 0, 2, 3))


def affine_local_map(fmap: ws.FloorMap, state, crop_size):
    """Single-pose local map, (C, L, L); see local_map_crops."""
    states = state if isinstance(state, ad.Tensor) else ad.constant(np.asarray(state).reshape(1, 3))
    if states.ndim == 1:
        states = ad.reshape(states, (1, 3))
    crops = local_map_crops(fmap, states, crop_size)
    c = fmap.channels.shape[0]
    return ad.reshape(crops, (c, crop_size, crop_size))


def _encode_map(t, cfg, crops):
    h = ad.relu(ad.conv2d(crops, t["map_conv1.w"], t["map_conv1.b"], padding=1))
    h = ad.maxpool2d(h, cfg.pool)
    return ad.relu(ad.conv2d(h, t["map_conv2.w"], t["map_conv2.b"], padding=1))


def _encode_scan(t, cfg, scans):
    b = scans.shape[0]
    h = ad.relu(ad.linear(scans, t["scan_fc1.w"], t["scan_fc1.b"]))
    h = ad.linear(h, t["scan_fc2.w"], t["scan_fc2.b"])
    return ad.reshape(h, (b, cfg.scan_channels, cfg.grid, cfg.grid))


def _encode_patch(t, cfg, patches):
    h = ad.relu(ad.conv2d(patches, t["patch_conv1.w"], t["patch_conv1.b"], padding=1))
    h = ad.maxpool2d(h, cfg.pool)
    return ad.relu(ad.conv2d(h, t["patch_conv2.w"], t["patch_conv2.b"], padding=1))


def observation_scores(t, cfg: NetConfig, crops, scan=None, patch=None, episode_index=None):
    """Per-particle log-likelihood scores, (N,).

    crops: (N, C, L, L) tensor from local_map_crops.
    scan: (B, beams) data for B episodes; patch: (B, P, P) data.
    episode_index: (N,) row of scan/patch each particle belongs to
    (defaults to a single shared observation).
    """
    n = crops.shape[0]
    if episode_index is None:
        episode_index = np.zeros(n, dtype=np.int64)
    feats = [_encode_map(t, cfg, crops)]
    if cfg.uses_scan:
        if scan is None:
            raise ValueError("modality expects a range scan")
        scan = ad.constant(scan) if not isinstance(scan, ad.Tensor) else scan
        if scan.ndim != 2 or scan.shape[1] != cfg.beams:
            raise ad.ShapeMismatch("observation_scores scan", scan.shape, (None, cfg.beams))
        feats.append(ad.gather_rows(_encode_scan(t, cfg, scan), episode_index))
    if cfg.uses_patch:
        if patch is None:
            raise ValueError("modality expects a visual patch")
        patch = ad.constant(patch) if not isinstance(patch, ad.Tensor) else patch
        if patch.ndim != 3 or patch.shape[1] != cfg.patch_size:
            raise ad.ShapeMismatch("observation_scores patch", patch.shape, (None, cfg.patch_size, cfg.patch_size))
        p = ad.reshape(patch, (patch.shape[0], 1, cfg.patch_size, cfg.patch_size))
        feats.append(ad.gather_rows(_encode_patch(t, cfg, p), episode_index))
    merged = feats[0] if len(feats) == 1 else ad.concat(feats, axis=1)
    h = ad.relu(ad.local2d(merged, t["lfc.w"], t["lfc.b"], kernel=cfg.lfc_kernel, padding=(cfg.lfc_kernel - 1) // 2))
    h = ad.reshape(h, (n, cfg.lfc_channels * cfg.grid * cfg.grid))
    out = ad.linear(h, t["head.w"], t["head.b"])
    return ad.reshape(out, (n,))


def observation_log_likelihood(obs, crop, params: ModelParams, tape=None):
    """Score one observation against one local map crop; scalar tensor.

    ``obs`` is a scan vector, a patch image, or a (scan, patch) pair for
    the fused modality."""
    cfg = params.cfg
    t = params.tensors(tape)
    crop = ad.constant(crop) if not isinstance(crop, ad.Tensor) else crop
    crops = ad.reshape(crop, (1,) + tuple(crop.shape))
    scan = patch = None
    if cfg.modality == "scan":
        scan = np.asarray(obs, dtype=np.float64).reshape(1, -1)
    elif cfg.modality == "patch":
        patch = np.asarray(obs, dtype=np.float64)[None, :, :]
    else:
        scan = np.asarray(obs[0], dtype=np.float64).reshape(1, -1)
        patch = np.asarray(obs[1], dtype=np.float64)[None, :, :]
    scores = observation_scores(t, cfg, crops, scan=scan, patch=patch)
    return ad.reshape(scores, ())


# ---------------------------------------------------------------------------
# checkpoint file


CHECKPOINT_MAGIC = b"PFNT"
CHECKPOINT_VERSION = 1
_MODALITY_CODE = {m: i for i, m in enumerate(MODALITIES)}


def _meta_records(cfg: NetConfig):
    return [
        ("meta.modality", np.float64(_MODALITY_CODE[cfg.modality])),
        ("meta.beams", np.float64(cfg.beams)),
        ("meta.crop_size", np.float64(cfg.crop_size)),
        ("meta.map_channels", np.float64(cfg.map_channels)),
        ("meta.conv_channels", np.asarray(cfg.conv_channels, dtype=np.float64)),
        ("meta.scan_hidden", np.float64(cfg.scan_hidden)),
        ("meta.scan_channels", np.float64(cfg.scan_channels)),
        ("meta.patch_size", np.float64(cfg.patch_size)),
        ("meta.patch_channels", np.asarray(cfg.patch_channels, dtype=np.float64)),
        ("meta.lfc_channels", np.float64(cfg.lfc_channels)),
        ("meta.lfc_kernel", np.float64(cfg.lfc_kernel)),
        ("meta.pool", np.float64(cfg.pool)),
        ("meta.sigma_t", np.float64(cfg.sigma_t)),
        ("meta.sigma_r", np.float64(cfg.sigma_r)),
        ("meta.sigma_learnable", np.float64(1.0 if cfg.sigma_learnable else 0.0)),
    ]


def save_checkpoint(path, params: ModelParams):
    """Binary format: magic, version, then length-prefixed named float64
    records; network shape travels inside reserved ``meta.*`` records."""
    records = _meta_records(params.cfg) + sorted(params.values.items())
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(records)))
        for name, arr in records:
            arr = np.asarray(arr, dtype=np.float64)
            raw = name.encode()
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    (count,) = struct.unpack_from("<I", blob, 8)
    off = 12
    meta, values = {}, {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + nlen].decode()
        off += nlen
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(dims).astype(np.float64)
        off += 8 * n
        if name.startswith("meta."):
            meta[name[5:]] = arr
        else:
            values[name] = arr
    try:
        cfg = NetConfig(
            modality=MODALITIES[int(meta["modality"])],
            beams=int(meta["beams"]),
            crop_size=int(meta["crop_size"]),
            map_channels=int(meta["map_channels"]),
            conv_channels=tuple(int(x) for x in np.atleast_1d(meta["conv_channels"])),
            scan_hidden=int(meta["scan_hidden"]),
            scan_channels=int(meta["scan_channels"]),
            patch_size=int(meta["patch_size"]),
            patch_channels=tuple(int(x) for x in np.atleast_1d(meta["patch_channels"])),
            lfc_channels=int(meta["lfc_channels"]),
            lfc_kernel=int(meta["lfc_kernel"]),
            pool=int(meta["pool"]),
            sigma_t=float(meta["sigma_t"]),
            sigma_r=float(meta["sigma_r"]),
            sigma_learnable=bool(meta["sigma_learnable"]),
        )
    except KeyError as e:
        raise FormatError(f"{path}: missing meta record {e}") from e
    return ModelParams(cfg, values)
