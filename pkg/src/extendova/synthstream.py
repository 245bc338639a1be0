"""Synthetic multi-camera identity streams with controllable overlap.

Each identity is a latent vector; each camera is a noisy linear view of
latent space (near-identity mixing plus a per-camera offset).  Step 1
contains several cameras at once; every later step adds fresh cameras
whose identity sets partially overlap what earlier cameras observed.
Training samples carry only within-camera labels.  The ground-truth
global identity rides along for evaluation and auditing, but nothing in
the training path is allowed to look at it.

Per step the dataset also carries a packed class index: with one new
camera per step it coincides with the camera's local labels, with several
new cameras the per-camera label spaces are laid out side by side (the
same person seen by two new cameras occupies two packed classes, which is
exactly what within-camera annotation produces).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .config import StreamConfig, _simple_from_dict
from .errors import ConfigError
from .numerics import Rng

__all__ = [
    "IdentityLatent",
    "CameraModel",
    "Sample",
    "StepDataset",
    "Stream",
    "generate_stream",
    "observe",
    "pk_sample",
    "save_stream",
    "load_stream",
]


@dataclass
class IdentityLatent:
    global_id: int
    z: np.ndarray  # (d_latent,)


@dataclass
class CameraModel:
    """Linear view of latent space: x = A z + b + noise."""

    camera_id: int
    A: np.ndarray  # (d_in, d_latent)
    b: np.ndarray  # (d_in,)


@dataclass
class Sample:
    x: np.ndarray
    camera_id: int
    local_label: int
    global_id: int | None  # hidden ground truth; evaluation only


def make_camera(camera_id: int, d_in: int, d_latent: int,
                shift: float, rng: Rng,
                offset: float | None = None) -> CameraModel:
    """Camera transform I + shift * G with a constant offset.

    The rectangular identity embeds latent coordinates into the first
    ``d_latent`` input dimensions; ``shift`` controls how much the camera
    remixes them, ``offset`` how far it displaces every observation
    (defaults to ``shift``).  Both zero gives identical cameras.
    """
    A = np.zeros((d_in, d_latent))
    for i in range(min(d_in, d_latent)):
        A[i, i] = 1.0
    A = A + shift * rng.split("mix").normal(size=(d_in, d_latent))
    scale = shift if offset is None else offset
    b = scale * rng.split("offset").normal(size=d_in)
    return CameraModel(camera_id, A, b)


def observe(camera: CameraModel, identity: IdentityLatent,
            noise_std: float, rng: Rng, local_label: int = -1) -> Sample:
    """One observation of an identity through a camera."""
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    if camera.A.shape[1] != identity.z.shape[0]:
        raise ValueError("camera and identity latent dims disagree")
    x = camera.A @ identity.z + camera.b
    if noise_std > 0:
        x = x + noise_std * rng.normal(size=x.shape)
    return Sample(x=x, camera_id=camera.camera_id,
                  local_label=local_label, global_id=identity.global_id)


@dataclass
class StepDataset:
    """Everything one stream step exposes.

    ``train_class`` is the packed per-step class index used by training;
    ``train_global`` is ground truth and must only be read by evaluation
    or audit code.  ``overlap_truth`` maps each packed class to
    ``(seen_before, global_id)`` where seen_before means the identity
    appeared in an earlier step's training data.
    """

    index: int
    new_cameras: list
    all_cameras: list
    n_local_classes: int
    train_x: np.ndarray
    train_camera: np.ndarray
    train_label: np.ndarray
    train_class: np.ndarray
    train_global: np.ndarray | None
    test_x: np.ndarray
    test_camera: np.ndarray
    test_global: np.ndarray
    overlap_truth: dict = field(default_factory=dict)
    class_camera: np.ndarray | None = None  # packed class -> camera id

    def n_train(self) -> int:
        return self.train_x.shape[0]

    def class_indices(self) -> list:
        """Per packed class, the train sample indices belonging to it."""
        out = [[] for _ in range(self.n_local_classes)]
        for i, c in enumerate(self.train_class):
            out[int(c)].append(i)
        return [np.asarray(ix, dtype=np.intp) for ix in out]


@dataclass
class Stream:
    config: StreamConfig
    steps: list

    def step(self, t: int) -> StepDataset:
        """1-based step lookup."""
        if not (1 <= t <= len(self.steps)):
            raise ValueError(f"step {t} out of range 1..{len(self.steps)}")
        return self.steps[t - 1]


def _dense_check(labels: np.ndarray, n: int, what: str) -> None:
    seen = set(int(v) for v in labels)
    if seen != set(range(n)):
        raise ConfigError(f"{what}: label space is not dense 0..{n - 1}")


def generate_stream(cfg: StreamConfig) -> Stream:
    cfg.validate()
    root = Rng(cfg.seed).split("stream")

    next_global = 0

    def new_identity(rng: Rng) -> IdentityLatent:
        nonlocal next_global
        ident = IdentityLatent(next_global, rng.normal(size=cfg.d_latent))
        next_global += 1
        return ident

    cameras: list[CameraModel] = []

    def add_camera() -> CameraModel:
        cid = len(cameras)
        grow = 1.0
        if cid >= cfg.initial_cameras:
            past = cid - cfg.initial_cameras
            grow = 1.0 + cfg.camera_shift_ramp * (past + 1)
            if cfg.camera_shift_cycle:
                cyc = cfg.camera_shift_cycle
                grow *= float(cyc[(past % cfg.cameras_per_step) % len(cyc)])
        off = cfg.camera_offset_strength
        cam = make_camera(cid, cfg.d_in, cfg.d_latent,
                          cfg.domain_shift_strength * grow,
                          root.split("camera", cid),
                          offset=None if off is None else off * grow)
        cameras.append(cam)
        return cam

    steps: list[StepDataset] = []
    train_pool: dict[int, IdentityLatent] = {}   # everything trained on so far

    for t in range(1, cfg.num_steps + 1):
        srng = root.split("step", t)
        prior_ids = sorted(train_pool.keys())
        if t == 1:
            new_cams = [add_camera() for _ in range(cfg.initial_cameras)]
        else:
            new_cams = [add_camera() for _ in range(cfg.cameras_per_step)]

        rows_x, rows_cam, rows_label, rows_class, rows_global = [], [], [], [], []
        truth: dict[int, tuple] = {}
        class_cam: list[int] = []
        step_identities: dict[int, IdentityLatent] = {}

        if t == 1 and cfg.step1_global_labels:
            # one pool shared by all initial cameras, labels consistent
            # across them (the fully annotated warm start)
            pool = [new_identity(srng.split("ident", i))
                    for i in range(cfg.ids_per_camera)]
            n_classes = len(pool)
            for li, ident in enumerate(pool):
                truth[li] = (False, ident.global_id)
                class_cam.append(-1)  # shared across cameras
                step_identities[ident.global_id] = ident
            for cam in new_cams:
                for li, ident in enumerate(pool):
                    for s in range(cfg.samples_per_id):
                        smp = observe(cam, ident, cfg.noise_std,
                                      srng.split("obs", cam.camera_id,
                                                 ident.global_id, s),
                                      local_label=li)
                        rows_x.append(smp.x)
                        rows_cam.append(cam.camera_id)
                        rows_label.append(li)
                        rows_class.append(li)
                        rows_global.append(ident.global_id)
        else:
            # each new camera has its own label space; packed classes lay
            # the cameras side by side
            n_classes = 0
            for cam in new_cams:
                crng = srng.split("cam", cam.camera_id)
                n_seen = round(cfg.overlap_at(t) * cfg.ids_per_camera) if t > 1 else 0
                if n_seen > len(prior_ids):
                    raise ConfigError(
                        f"step {t}: overlap asks for {n_seen} previously seen "
                        f"identities but only {len(prior_ids)} exist")
                seen_ids = (sorted(int(g) for g in
                                   crng.split("seen").choice(prior_ids, size=n_seen,
                                                             replace=False))
                            if n_seen else [])
                idents = [train_pool[g] for g in seen_ids]
                n_fresh = cfg.ids_per_camera - n_seen
                idents += [new_identity(crng.split("fresh", i))
                           for i in range(n_fresh)]
                # camera-specific label order hides any correspondence
                order = crng.split("order").permutation(len(idents))
                for li, pos in enumerate(order):
                    ident = idents[int(pos)]
                    packed = n_classes + li
                    truth[packed] = (ident.global_id in train_pool,
                                     ident.global_id)
                    class_cam.append(cam.camera_id)
                    step_identities[ident.global_id] = ident
                    for s in range(cfg.samples_per_id):
                        smp = observe(cam, ident, cfg.noise_std,
                                      crng.split("obs", ident.global_id, s),
                                      local_label=li)
                        rows_x.append(smp.x)
                        rows_cam.append(cam.camera_id)
                        rows_label.append(li)
                        rows_class.append(packed)
                        rows_global.append(ident.global_id)
                n_classes += len(idents)

        # disjoint held-out identities, observed through every camera
        # encountered so far
        trng = srng.split("test")
        test_x, test_cam, test_global = [], [], []
        for i in range(cfg.test_ids_per_step):
            ident = new_identity(trng.split("ident", i))
            for cam in cameras:
                for s in range(cfg.test_samples_per_id):
                    smp = observe(cam, ident, cfg.noise_std,
                                  trng.split("obs", cam.camera_id,
                                             ident.global_id, s))
                    test_x.append(smp.x)
                    test_cam.append(cam.camera_id)
                    test_global.append(ident.global_id)

        ds = StepDataset(
            index=t,
            new_cameras=[c.camera_id for c in new_cams],
            all_cameras=[c.camera_id for c in cameras],
            n_local_classes=n_classes,
            train_x=np.asarray(rows_x),
            train_camera=np.asarray(rows_cam, dtype=np.intp),
            train_label=np.asarray(rows_label, dtype=np.intp),
            train_class=np.asarray(rows_class, dtype=np.intp),
            train_global=np.asarray(rows_global, dtype=np.intp),
            test_x=np.asarray(test_x),
            test_camera=np.asarray(test_cam, dtype=np.intp),
            test_global=np.asarray(test_global, dtype=np.intp),
            overlap_truth=truth,
            class_camera=np.asarray(class_cam, dtype=np.intp),
        )
        _dense_check(ds.train_class, n_classes, f"step {t}")
        steps.append(ds)
        # only after the step is assembled do its identities count as seen
        train_pool.update(step_identities)

    return Stream(config=cfg, steps=steps)


def pk_sample_indices(per_class: list, p: int, k: int, rng: Rng,
                      class_pool: np.ndarray | None = None) -> np.ndarray:
    """Core of :func:`pk_sample` over an explicit class-to-indices list,
    so callers can batch over merged datasets with remapped labels."""
    if p < 1 or k < 1:
        raise ValueError("p and k must be positive")
    pool = (np.arange(len(per_class), dtype=np.intp)
            if class_pool is None else np.asarray(class_pool, dtype=np.intp))
    if pool.size == 0:
        raise ValueError("pk_sample: no classes to draw from")
    take = min(p, pool.size)
    chosen = rng.choice(pool, size=take, replace=False)
    out = []
    for c in np.sort(chosen):
        members = per_class[int(c)]
        if members.size >= k:
            pick = rng.choice(members, size=k, replace=False)
        else:
            extra = rng.choice(members, size=k - members.size, replace=True)
            pick = np.concatenate([members, extra])
        out.append(pick)
    return np.concatenate(out)


def pk_sample(ds: StepDataset, p: int, k: int, rng: Rng,
              class_pool: np.ndarray | None = None) -> np.ndarray:
    """Indices of a P x K batch: ``p`` distinct classes, ``k`` samples each.

    A class with fewer than ``k`` samples contributes all of them once and
    fills the remainder with replacement, so every original sample is
    guaranteed to appear.  ``p`` is clamped to the number of available
    classes.
    """
    return pk_sample_indices(ds.class_indices(), p, k, rng,
                             class_pool=class_pool)


# --- stream files -------------------------------------------------------
#
# Layout: {"format": "stream", "version": 1, "config": {...},
#          "steps": [{index, new_cameras, all_cameras, n_local_classes,
#                     class_camera, overlap_truth: {class: [seen, gid]},
#                     train: {x, camera_id, local_label},
#                     test:  {x, camera_id, global_id}}]}
#
# Train rows deliberately omit the global identity; class-level truth in
# overlap_truth is all that evaluation (and the oracle upper bound) needs.

STREAM_FORMAT_VERSION = 1


def stream_to_dict(stream: Stream) -> dict:
    steps = []
    for ds in stream.steps:
        steps.append({
            "index": ds.index,
            "new_cameras": list(ds.new_cameras),
            "all_cameras": list(ds.all_cameras),
            "n_local_classes": ds.n_local_classes,
            "class_camera": ds.class_camera.tolist(),
            "overlap_truth": {str(c): [bool(s), int(g)]
                              for c, (s, g) in sorted(ds.overlap_truth.items())},
            "train": {
                "x": ds.train_x.tolist(),
                "camera_id": ds.train_camera.tolist(),
                "local_label": ds.train_label.tolist(),
                "step_class": ds.train_class.tolist(),
            },
            "test": {
                "x": ds.test_x.tolist(),
                "camera_id": ds.test_camera.tolist(),
                "global_id": ds.test_global.tolist(),
            },
        })
    return {"format": "stream", "version": STREAM_FORMAT_VERSION,
            "config": dataclasses.asdict(stream.config), "steps": steps}


def stream_from_dict(d: dict) -> Stream:
    if d.get("format") != "stream":
        raise ConfigError("not a stream file (missing format marker)")
    if d.get("version") != STREAM_FORMAT_VERSION:
        raise ConfigError(f"unsupported stream file version {d.get('version')!r}")
    cfg = _simple_from_dict(StreamConfig, d["config"], "stream config")
    steps = []
    for sd in d["steps"]:
        train, test = sd["train"], sd["test"]
        steps.append(StepDataset(
            index=int(sd["index"]),
            new_cameras=list(sd["new_cameras"]),
            all_cameras=list(sd["all_cameras"]),
            n_local_classes=int(sd["n_local_classes"]),
            train_x=np.asarray(train["x"], dtype=np.float64),
            train_camera=np.asarray(train["camera_id"], dtype=np.intp),
            train_label=np.asarray(train["local_label"], dtype=np.intp),
            train_class=np.asarray(train["step_class"], dtype=np.intp),
            train_global=None,
            test_x=np.asarray(test["x"], dtype=np.float64),
            test_camera=np.asarray(test["camera_id"], dtype=np.intp),
            test_global=np.asarray(test["global_id"], dtype=np.intp),
            overlap_truth={int(c): (bool(v[0]), int(v[1]))
                           for c, v in sd["overlap_truth"].items()},
            class_camera=np.asarray(sd["class_camera"], dtype=np.intp),
        ))
    return Stream(config=cfg, steps=steps)


def save_stream(stream: Stream, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(stream_to_dict(stream), fh)
        fh.write("\n")


def load_stream(path: str) -> Stream:
    try:
        with open(path) as fh:
            return stream_from_dict(json.load(fh))
    except FileNotFoundError:
        raise ConfigError(f"stream file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"stream file {path} is not valid JSON: {exc}")
