"""Tone-mapped L1 objective, optimization loop, checkpointing, gradient audit.

Training minimizes the mean absolute difference between mu-law
tone-mapped output and ground truth, with adaptive-moment updates
(betas 0.9/0.999, eps 1e-8).  Checkpoints are named-tensor archives
holding parameters, optimizer moments, the step counter, configs and
the data-sampling RNG state, so an interrupted run resumes bitwise
identically.
"""

import dataclasses
import math
import time
from pathlib import Path

import numpy as np
import torch

from . import tensorio
from .dataset import PatchSample, load_scene, read_manifest, scene_radiance
from .features import FeatureSource
from .imaging import DomainParams, RadianceMap
from .matching import WindowSpec
from .network import FusionNet, ModelInputs, NetConfig, init_params

__all__ = [
    "TrainConfig",
    "loss",
    "train_step",
    "train_loop",
    "gradient_audit",
    "save_checkpoint",
    "load_checkpoint",
]

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 1
    crop: int = 256
    max_steps: int = 1000
    seed: int = 0
    checkpoint_every: int = 100
    mu: float = 5000.0
    augment: bool = False  # reserved; no augmentation is applied by default

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.crop % 4:
            raise ValueError(f"crop must be divisible by 4, got {self.crop}")
        if self.batch_size < 1 or self.max_steps < 0:
            raise ValueError("batch_size must be >= 1 and max_steps >= 0")


def tonemap(h, mu):
    """Differentiable mu-law compressor for torch tensors."""
    return torch.log1p(mu * h) / math.log1p(mu)


def loss(h_out, h_gt, mu=5000.0):
    """Mean absolute difference of the tone-mapped images."""
    if h_out.shape != h_gt.shape:
        raise ValueError(f"shape mismatch: {tuple(h_out.shape)} vs {tuple(h_gt.shape)}")
    return (tonemap(h_out, mu) - tonemap(h_gt, mu)).abs().mean()


def make_optimizer(model, learning_rate):
    return torch.optim.Adam(model.parameters(), lr=learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS)


def train_step(model, optimizer, batch, mu=5000.0, dump_dir=None):
    """One gradient step over a batch of ModelInputs with ground truth."""
    optimizer.zero_grad()
    total = None
    last_trace = None
    for inputs in batch:
        if inputs.gt is None:
            raise ValueError("training inputs must carry ground truth")
        h_out, last_trace = model(inputs)
        sample_loss = loss(h_out, inputs.gt, mu)
        total = sample_loss if total is None else total + sample_loss
    total = total / len(batch)
    value = float(total.detach())
    if not math.isfinite(value):
        dump = None
        if dump_dir is not None and last_trace is not None:
            dump = Path(dump_dir) / "diverged_trace.npz"
            tensorio.save_tensors(dump, last_trace.detach_arrays())
        raise RuntimeError(f"non-finite loss {value}" + (f"; trace dumped to {dump}" if dump else ""))
    total.backward()
    optimizer.step()
    return value


def _optimizer_arrays(model, optimizer):
    arrays = {}
    for name, param in model.named_parameters():
        state = optimizer.state.get(param)
        if not state:
            continue
        arrays[f"adam/{name}/step"] = state["step"].detach().cpu().numpy().reshape(1)
        arrays[f"adam/{name}/exp_avg"] = state["exp_avg"].detach().cpu().numpy()
        arrays[f"adam/{name}/exp_avg_sq"] = state["exp_avg_sq"].detach().cpu().numpy()
    return arrays


def _restore_optimizer(model, optimizer, arrays):
    for name, param in model.named_parameters():
        key = f"adam/{name}/step"
        if key not in arrays:
            continue
        optimizer.state[param] = {
            "step": torch.from_numpy(arrays[key].copy()).reshape(()),
            "exp_avg": torch.from_numpy(arrays[f"adam/{name}/exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(arrays[f"adam/{name}/exp_avg_sq"].copy()),
        }


def _config_dict(cfg):
    d = dataclasses.asdict(cfg)
    return d


def save_checkpoint(path, model, optimizer, step, train_config, rng=None):
    """Write the full training state as one named-tensor archive."""
    arrays = {f"param/{name}": p.detach().cpu().numpy() for name, p in model.named_parameters()}
    arrays.update(_optimizer_arrays(model, optimizer))
    arrays["meta/step"] = np.array([step], dtype=np.int64)
    arrays["meta/net_config"] = tensorio.pack_json(_config_dict(model.config))
    arrays["meta/train_config"] = tensorio.pack_json(_config_dict(train_config))
    if rng is not None:
        arrays["meta/rng_state"] = tensorio.pack_json(rng.bit_generator.state)
    tensorio.save_tensors(path, arrays)


def _net_config_from_dict(d):
    d = dict(d)
    window = d.pop("window", None)
    if window is not None:
        window = WindowSpec(
            radii=tuple(window["radii"]),
            patch_sizes=tuple(window["patch_sizes"]),
            stride=window["stride"],
        )
        d["window"] = window
    return NetConfig(**d)


def load_checkpoint(path, feature_source=None):
    """Rebuild model, optimizer and loop state from a checkpoint archive.

    Returns (model, optimizer, step, train_config, rng) where rng is a
    numpy Generator restored to its saved state (or None).
    """
    arrays = tensorio.load_tensors(path)
    net_config = _net_config_from_dict(tensorio.unpack_json(arrays["meta/net_config"]))
    train_config = TrainConfig(**tensorio.unpack_json(arrays["meta/train_config"]))
    model = FusionNet(net_config, feature_source)
    state = {
        name[len("param/") :]: torch.from_numpy(arr.copy())
        for name, arr in arrays.items()
        if name.startswith("param/")
    }
    model.load_state_dict(state)
    optimizer = make_optimizer(model, train_config.learning_rate)
    _restore_optimizer(model, optimizer, arrays)
    step = int(arrays["meta/step"][0])
    rng = None
    if "meta/rng_state" in arrays:
        rng = np.random.default_rng()
        rng.bit_generator.state = tensorio.unpack_json(arrays["meta/rng_state"])
    return model, optimizer, step, train_config, rng


def _crop_patch(pre, r0, c0, size):
    h_s, h_m, h_l, h_s_masked, mask_s, mask_m, gt = pre
    win = np.s_[r0 : r0 + size, c0 : c0 + size]

    def crop(rmap):
        return RadianceMap(rmap.pixels[win], exposure_scale=rmap.exposure_scale)

    return PatchSample(
        h_s=crop(h_s),
        h_m=crop(h_m),
        h_l=crop(h_l),
        h_s_masked=crop(h_s_masked),
        mask_s=mask_s[win],
        mask_m=mask_m[win],
        gt=gt[win] if gt is not None else None,
        origin=(r0, c0),
        size=size,
    )


class _SceneCache:
    """Radiance-domain views of the training scenes, computed once."""

    def __init__(self, scene_dirs, params):
        if not scene_dirs:
            raise ValueError("training manifest lists no scenes")
        self.entries = []
        for directory in scene_dirs:
            record = load_scene(directory)
            if record.gt_hdr is None:
                raise ValueError(f"training scene {directory} has no ground truth")
            pre = scene_radiance(record, params) + (record.gt_hdr.pixels,)
            self.entries.append((record, pre))

    def draw_batch(self, rng, crop, batch_size, dtype):
        batch = []
        for _ in range(batch_size):
            record, pre = self.entries[int(rng.integers(len(self.entries)))]
            r0 = int(rng.integers(0, record.height - crop + 1))
            c0 = int(rng.integers(0, record.width - crop + 1))
            batch.append(ModelInputs.from_patch(_crop_patch(pre, r0, c0, crop), dtype))
        return batch


def train_loop(
    manifest,
    net_config=NetConfig(),
    train_config=None,
    out_dir="runs/train",
    feature_source=None,
    params=DomainParams(),
    resume_from=None,
):
    """Iterate sampled crops, log the loss, write step-stamped checkpoints.

    Returns the path of the final checkpoint.  Passing `resume_from`
    continues a run exactly where it stopped (bitwise identical
    parameter trajectory to the uninterrupted run); on resume the
    caller's train_config may only extend the loop bounds (max_steps,
    checkpoint_every), every dynamics field must match the checkpoint.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        model, optimizer, step, saved_config, rng = load_checkpoint(resume_from, feature_source)
        if rng is None:
            raise ValueError(f"checkpoint {resume_from} carries no RNG state; cannot resume")
        if train_config is None:
            train_config = saved_config
        else:
            for name in ("learning_rate", "batch_size", "crop", "seed", "mu", "augment"):
                if getattr(train_config, name) != getattr(saved_config, name):
                    raise ValueError(
                        f"resume config changes {name}: checkpoint has {getattr(saved_config, name)}, "
                        f"caller passed {getattr(train_config, name)}"
                    )
    else:
        train_config = train_config or TrainConfig()
        feature_source = feature_source or FeatureSource("handcrafted", mu=train_config.mu)
        model = init_params(net_config, train_config.seed, feature_source)
        optimizer = make_optimizer(model, train_config.learning_rate)
        step = 0
        rng = np.random.default_rng(train_config.seed)

    train_dirs, _ = read_manifest(manifest)
    cache = _SceneCache(train_dirs, params)
    log_path = out_dir / "loss_log.csv"
    if not log_path.exists():
        log_path.write_text("step,loss,wall_time\n")

    def checkpoint_path(n):
        return out_dir / f"checkpoint_step{n:06d}.npz"

    if step == 0:
        save_checkpoint(checkpoint_path(0), model, optimizer, 0, train_config, rng)
    last_path = checkpoint_path(step)

    with log_path.open("a") as log:
        while step < train_config.max_steps:
            batch = cache.draw_batch(rng, train_config.crop, train_config.batch_size, torch.float32)
            value = train_step(model, optimizer, batch, train_config.mu, dump_dir=out_dir)
            step += 1
            log.write(f"{step},{value:.10f},{time.time():.3f}\n")
            if step % train_config.checkpoint_every == 0 or step == train_config.max_steps:
                last_path = checkpoint_path(step)
                save_checkpoint(last_path, model, optimizer, step, train_config, rng)
    return last_path


def gradient_audit(net_config=None, seed=0, n_coords=200, step_size=1e-4, image_size=16, mu=5000.0):
    """Central finite differences against analytic gradients, float64.

    Perturbs `n_coords` randomly sampled parameter coordinates by
    +/- step_size and compares the loss slope with autograd.  Matching
    indices inside the forward pass are constants of each evaluation.
    A coordinate agrees when the relative error is below 1e-3, or when
    both the analytic gradient is zero and |FD| < 1e-8.
    """
    from .network import tiny_config
    from .synthetic import make_scene

    net_config = net_config or tiny_config()
    model = init_params(net_config, seed).double()
    scene = make_scene(image_size, image_size, seed=seed)
    inputs = ModelInputs.from_record(scene, dtype=torch.float64)

    h_out, _ = model(inputs)
    objective = loss(h_out, inputs.gt, mu)
    model.zero_grad()
    objective.backward()
    grads = {name: p.grad.detach().clone() for name, p in model.named_parameters()}

    names = sorted(grads)
    sizes = np.array([grads[n].numel() for n in names])
    offsets = np.cumsum(sizes)
    rng = np.random.default_rng(seed)
    coords = rng.choice(int(offsets[-1]), size=min(n_coords, int(offsets[-1])), replace=False)

    def eval_loss():
        with torch.no_grad():
            out, _ = model(inputs)
            return float(loss(out, inputs.gt, mu))

    report = []
    params = dict(model.named_parameters())
    for flat in sorted(int(c) for c in coords):
        idx = int(np.searchsorted(offsets, flat, side="right"))
        name = names[idx]
        local = flat - (offsets[idx - 1] if idx else 0)
        tensor = params[name].data
        view = tensor.view(-1)
        original = float(view[local])
        view[local] = original + step_size
        up = eval_loss()
        view[local] = original - step_size
        down = eval_loss()
        view[local] = original
        fd = (up - down) / (2 * step_size)
        analytic = float(grads[name].view(-1)[local])
        if analytic == 0.0 and abs(fd) < 1e-8:
            rel = 0.0
        else:
            rel = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-300)
        report.append({"name": name, "coord": int(local), "analytic": analytic, "fd": fd, "rel_error": rel})

    rels = np.array([r["rel_error"] for r in report])
    return {
        "n_coords": len(report),
        "max_rel_error": float(rels.max()),
        "median_rel_error": float(np.median(rels)),
        "frac_below_1e3": float(np.mean(rels < 1e-3)),
        "coords": report,
    }
