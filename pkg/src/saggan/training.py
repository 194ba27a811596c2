"""Attention-guided cycle GAN optimization loop, checkpoint format, and synthetic tumor export."""

from __future__ import annotations

import base64
import csv
import dataclasses
import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .data import NORMAL, TUMOR, SampleRecord
from .losses import (
    LossBundle,
    LossWeights,
    NonFiniteLossError,
    adv_loss_discriminator,
    adv_loss_generator,
    attention_supervision_loss,
    compose,
    cycle_loss,
    total_loss,
)
from .networks import NETWORK_NAMES, ModelState, build_models, validate_model_config

HISTORY_COLUMNS = ["epoch", "step", "adv_N", "adv_T", "cycle", "attn_sup", "total"]
CHECKPOINT_FORMAT = "saggan-checkpoint/1"

# Fields that do not change the model or its optimization trajectory.
_RUN_ONLY_FIELDS = ("epochs", "checkpoint_every", "output_dir", "train_on_scarce", "verbose")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lambda_gan: float = 1.0
    lambda_cyc: float = 10.0
    image_size: int = 64
    n_blocks: int = 4
    ngf: int = 32
    ndf: int = 32
    reduction: int = 4
    attention_widths: Tuple[int, int, int] = (16, 32, 64)
    sn_power_iterations: int = 100
    attention_supervision: bool = True
    seed: int = 17
    checkpoint_every: int = 5
    output_dir: str = "gan"
    train_on_scarce: bool = False
    verbose: bool = True

    def __post_init__(self):
        self.attention_widths = tuple(self.attention_widths)
        for key in ("epochs", "batch_size", "image_size", "n_blocks", "ngf", "ndf",
                    "reduction", "sn_power_iterations", "checkpoint_every"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be positive, got {getattr(self, key)}")
        for key in ("learning_rate", "beta1", "beta2"):
            if not getattr(self, key) > 0:
                raise ValueError(f"{key} must be positive, got {getattr(self, key)}")
        if not (self.beta1 < 1 and self.beta2 < 1):
            raise ValueError("beta1/beta2 moment decays must be < 1")
        if len(self.attention_widths) != 3 or min(self.attention_widths) < 1:
            raise ValueError("attention_widths must be three positive ints")
        validate_model_config(self)
        LossWeights(self.lambda_gan, self.lambda_cyc)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_gan, self.lambda_cyc)

    def model_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for key in _RUN_ONLY_FIELDS:
            d.pop(key)
        d["attention_widths"] = list(d["attention_widths"])
        return d

    def model_hash(self) -> str:
        """Digest of the fields that define the networks and their training trajectory."""
        blob = json.dumps(self.model_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


# ----------------------------------------------------------------------------
# One step
# ----------------------------------------------------------------------------


def _finite(name: str, value: torch.Tensor) -> float:
    v = float(value.detach())
    if not math.isfinite(v):
        raise NonFiniteLossError(name, v)
    return v


def translate(x: torch.Tensor, gen: torch.nn.Module, attn: torch.nn.Module):
    """Returns (composed, raw generator output, attention map)."""
    raw = gen(x)
    m = attn(x)
    return compose(x, raw, m), raw, m


def train_step(
    batch_n: torch.Tensor,
    batch_t: torch.Tensor,
    masks_t: torch.Tensor,
    state: ModelState,
    w: Optional[LossWeights] = None,
    supervise_attention: Optional[bool] = None,
) -> LossBundle:
    """One discriminator update followed by one generator/attention update."""
    if batch_n.shape[0] == 0 or batch_t.shape[0] == 0:
        raise ValueError("empty batch")
    if batch_n.shape[0] != batch_t.shape[0]:
        raise ValueError("normal and tumor batches must have equal size")
    cfg = state.config
    w = w if w is not None else cfg.weights
    supervise = cfg.attention_supervision if supervise_attention is None else supervise_attention
    state.train()

    raw_nt, m_n = state.g_nt(batch_n), state.a_n(batch_n)
    raw_tn, m_t = state.g_tn(batch_t), state.a_t(batch_t)
    # second hop re-applies attention composition with the other domain's networks.
    # The cycle term trains the generators only: attention maps on this path are
    # detached, so localisation is learned from the adversarial and pixel terms.
    # Otherwise the cycle pushes A_T off the lesion, since a removed lesion cannot
    # be put back in the same place.
    t_g = compose(batch_n, raw_nt, m_n.detach())
    n_g = compose(batch_t, raw_tn, m_t.detach())
    n_rec = compose(t_g, state.g_tn(t_g), state.a_t(t_g).detach())
    t_rec = compose(n_g, state.g_nt(n_g), state.a_n(n_g).detach())

    # batch-index pairing: the mask of n[i] also masks the real t[i]
    fake_t = m_n * raw_nt
    real_t = m_n * batch_t
    fake_n = m_t * raw_tn
    real_n = m_t * batch_n

    state.opt_d.zero_grad(set_to_none=True)
    loss_d_t = adv_loss_discriminator(real_t.detach(), fake_t.detach(), state.d_t)
    loss_d_n = adv_loss_discriminator(real_n.detach(), fake_n.detach(), state.d_n)
    d_t, d_n = _finite("d_t", loss_d_t), _finite("d_n", loss_d_n)
    (loss_d_t + loss_d_n).backward()
    state.opt_d.step()

    for d in state.discriminators():
        d.requires_grad_(False)
    try:
        adv_n = adv_loss_generator(fake_t, state.d_t)
        adv_t = adv_loss_generator(fake_n, state.d_n)
        cyc = cycle_loss(batch_n, n_rec, batch_t, t_rec)
        if supervise:
            attn = attention_supervision_loss(masks_t, m_t)
        else:
            attn = torch.zeros((), dtype=batch_t.dtype)
        total = total_loss(adv_n, adv_t, cyc, attn, w)
        _finite("total", total)
        state.opt_g.zero_grad(set_to_none=True)
        total.backward()
        state.opt_g.step()
    finally:
        for d in state.discriminators():
            d.requires_grad_(True)

    return LossBundle(
        adv_N=float(adv_n.detach()),
        adv_T=float(adv_t.detach()),
        cycle=float(cyc.detach()),
        attn_sup=float(attn.detach()),
        total=float(total.detach()),
        d_t=d_t,
        d_n=d_n,
    )


# ----------------------------------------------------------------------------
# Checkpoints
# ----------------------------------------------------------------------------


def _named_arrays(state: ModelState) -> Dict[str, torch.Tensor]:
    arrays = {}
    for net_name, net in state.networks().items():
        for key, tensor in net.state_dict().items():
            arrays[f"{net_name}.{key}"] = tensor
    for opt_name in ("opt_g", "opt_d"):
        opt = getattr(state, opt_name)
        names = _param_names(state, opt_name)
        for p in (p for group in opt.param_groups for p in group["params"]):
            st = opt.state.get(p)
            if not st:
                continue
            for moment in ("exp_avg", "exp_avg_sq"):
                arrays[f"{opt_name}.{moment}.{names[id(p)]}"] = st[moment]
    return arrays


def _param_names(state: ModelState, opt_name: str) -> Dict[int, str]:
    nets = ("g_nt", "g_tn", "a_n", "a_t") if opt_name == "opt_g" else ("d_t", "d_n")
    return {
        id(p): f"{n}.{key}"
        for n in nets
        for key, p in getattr(state, n).named_parameters()
    }


def _opt_steps(state: ModelState, opt_name: str) -> Dict[str, int]:
    opt = getattr(state, opt_name)
    names = _param_names(state, opt_name)
    return {
        names[id(p)]: int(opt.state[p]["step"])
        for group in opt.param_groups
        for p in group["params"]
        if opt.state.get(p)
    }


def save_checkpoint(state: ModelState, path) -> Path:
    """Directory with ``manifest.json`` plus one little-endian float32 file per array."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (name, tensor) in enumerate(_named_arrays(state).items()):
        arr = tensor.detach().cpu().numpy().astype("<f4", copy=False)
        fname = f"{i:04d}.bin"
        arr.tofile(path / fname)
        entries.append({"name": name, "file": fname, "shape": list(arr.shape), "dtype": "float32"})
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config_hash": state.config.model_hash(),
        "config": state.config.model_dict(),
        "epoch": state.epoch,
        "rng": {
            "numpy": state.rng.bit_generator.state,
            "torch": base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode(),
        },
        "optimizer_steps": {k: _opt_steps(state, k) for k in ("opt_g", "opt_d")},
        "arrays": entries,
    }
    with open(path / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return path


def read_checkpoint_manifest(path) -> dict:
    mpath = Path(path) / "manifest.json"
    if not mpath.is_file():
        raise CheckpointError(f"checkpoint manifest not found: {mpath}")
    with open(mpath, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{mpath}: unknown checkpoint format {manifest.get('format')!r}")
    return manifest


def load_checkpoint(
    path, config: Optional[TrainConfig] = None, allow_config_mismatch: bool = False
) -> ModelState:
    """Rebuild a :class:`ModelState` from :func:`save_checkpoint` output.

    With ``config`` given, its model hash must equal the stored one; a
    mismatch warns and raises unless ``allow_config_mismatch`` is set, in
    which case the runtime ``config`` is kept for run-only fields and the
    stored config defines the architecture.
    """
    path = Path(path)
    manifest = read_checkpoint_manifest(path)
    stored = TrainConfig(**manifest["config"])
    if config is not None:
        if config.model_hash() != manifest["config_hash"]:
            msg = (
                f"checkpoint {path} was written with config hash {manifest['config_hash']}, "
                f"runtime config hash is {config.model_hash()}"
            )
            warnings.warn(msg, RuntimeWarning)
            if not allow_config_mismatch:
                raise CheckpointError(msg + " (pass allow_config_mismatch=True to override)")
            config = dataclasses.replace(config, **stored.model_dict())
    else:
        config = stored
    if stored.model_hash() != manifest["config_hash"]:
        raise CheckpointError(f"{path}: stored config does not match its hash (corrupt manifest)")

    state = build_models(config)
    targets = _named_arrays_for_load(state)
    listed = {e["name"]: e for e in manifest["arrays"]}
    missing = [name for name in targets if name not in listed]
    if missing:
        raise CheckpointError(f"{path}: missing arrays: {', '.join(missing)}")
    for name, entry in listed.items():
        if name.startswith(("opt_g.", "opt_d.")):
            continue
        if name not in targets:
            raise CheckpointError(f"{path}: unexpected array {name}")
        target = targets[name]
        data = _read_array(path, entry, list(target.shape))
        with torch.no_grad():
            target.copy_(torch.from_numpy(data))
    _restore_optimizers(state, manifest, path)

    state.epoch = int(manifest["epoch"])
    state.rng.bit_generator.state = manifest["rng"]["numpy"]
    torch_state = np.frombuffer(base64.b64decode(manifest["rng"]["torch"]), dtype=np.uint8)
    torch.set_rng_state(torch.from_numpy(torch_state.copy()))
    return state


def _named_arrays_for_load(state: ModelState) -> Dict[str, torch.Tensor]:
    """Network parameters and buffers by checkpoint name, as writable tensors."""
    arrays = {}
    for net_name, net in state.networks().items():
        params = dict(net.named_parameters())
        params.update(dict(net.named_buffers()))
        for key in net.state_dict():
            arrays[f"{net_name}.{key}"] = params[key].data
    return arrays


def _read_array(path: Path, entry: dict, shape: List[int]) -> np.ndarray:
    name = entry["name"]
    if entry["shape"] != shape:
        raise CheckpointError(f"{path}: array {name} has shape {entry['shape']}, expected {shape}")
    fpath = path / entry["file"]
    if not fpath.is_file():
        raise CheckpointError(f"{path}: file for array {name} missing ({entry['file']})")
    data = np.fromfile(fpath, dtype="<f4")
    if data.size != int(np.prod(shape, dtype=np.int64)):
        raise CheckpointError(
            f"{path}: array {name} holds {data.size} values, expected {int(np.prod(shape))}"
        )
    return data.reshape(shape)


def _restore_optimizers(state: ModelState, manifest: dict, path: Path) -> None:
    listed = {e["name"]: e for e in manifest["arrays"]}
    for opt_name, steps in manifest["optimizer_steps"].items():
        opt = getattr(state, opt_name)
        by_name = {v: k for k, v in _param_names(state, opt_name).items()}
        params = {id(p): p for g in opt.param_groups for p in g["params"]}
        for pname, step in steps.items():
            p = params[by_name[pname]]
            moments = {}
            for moment in ("exp_avg", "exp_avg_sq"):
                key = f"{opt_name}.{moment}.{pname}"
                if key not in listed:
                    raise CheckpointError(f"{path}: missing arrays: {key}")
                data = _read_array(path, listed[key], list(p.shape))
                moments[moment] = torch.from_numpy(data).clone()
            opt.state[p] = {
                "step": torch.tensor(float(step)),
                "exp_avg": moments["exp_avg"],
                "exp_avg_sq": moments["exp_avg_sq"],
            }


# ----------------------------------------------------------------------------
# Training loop
# ----------------------------------------------------------------------------


def _stack(images: Sequence[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(images).astype(np.float32))[:, None]


def read_history(path) -> List[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [
        {k: (int(v) if k in ("epoch", "step") else float(v)) for k, v in row.items()}
        for row in rows
    ]


def write_history(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for row in rows:
            writer.writerow([row["epoch"], row["step"]] + [repr(float(row[k])) for k in HISTORY_COLUMNS[2:]])


StepHook = Callable[[ModelState, int, int, LossBundle], None]


def train(
    records: Sequence[SampleRecord],
    config: TrainConfig,
    output_dir=None,
    resume_from=None,
    allow_config_mismatch: bool = False,
    on_step: Optional[StepHook] = None,
) -> Tuple[ModelState, List[dict]]:
    """Train on the ``train`` split of ``records`` (all records if none carry a split).

    Each epoch shuffles the normal and tumor pools independently and pairs
    them batch by batch, truncated to the shorter pool. Checkpoints go to
    ``<output_dir>/checkpoints/epoch_XXXX`` every ``checkpoint_every`` epochs
    and to ``<output_dir>/checkpoint`` at the end; the loss history goes to
    ``<output_dir>/history.csv``. When resuming, history rows up to the
    checkpoint epoch already present in ``history.csv`` are kept.
    """
    pool = [r for r in records if r.split == "train"] or [r for r in records if r.split is None]
    normals = [r for r in pool if r.domain == NORMAL]
    tumors = [r for r in pool if r.domain == TUMOR]
    if not normals or not tumors:
        raise ValueError("training needs at least one normal and one tumor training sample")
    n_pairs = min(len(normals), len(tumors)) // config.batch_size
    if n_pairs == 0:
        raise ValueError(
            f"pools of {len(normals)} normal / {len(tumors)} tumor samples are smaller "
            f"than batch_size {config.batch_size}"
        )
    x_n = _stack([r.image for r in normals])
    x_t = _stack([r.image for r in tumors])
    m_t = _stack([r.mask for r in tumors])

    if resume_from is not None:
        state = load_checkpoint(resume_from, config, allow_config_mismatch)
    else:
        state = build_models(config)

    history: List[dict] = []
    out = Path(output_dir) if output_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume_from is not None and (out / "history.csv").is_file():
            history = [r for r in read_history(out / "history.csv") if r["epoch"] <= state.epoch]

    weights = config.weights
    for epoch in range(state.epoch + 1, config.epochs + 1):
        perm_n = state.rng.permutation(len(normals))
        perm_t = state.rng.permutation(len(tumors))
        for step in range(n_pairs):
            sl = slice(step * config.batch_size, (step + 1) * config.batch_size)
            idx_n = torch.from_numpy(perm_n[sl])
            idx_t = torch.from_numpy(perm_t[sl])
            try:
                bundle = train_step(x_n[idx_n], x_t[idx_t], m_t[idx_t], state, weights)
            except (NonFiniteLossError, ValueError) as err:
                raise TrainingError(f"epoch {epoch} step {step}: {err}") from err
            row = {"epoch": epoch, "step": step, **bundle.as_row()}
            history.append(row)
            if config.verbose:
                print(
                    f"epoch={epoch} step={step} total={bundle.total:.5f} adv_N={bundle.adv_N:.5f} "
                    f"adv_T={bundle.adv_T:.5f} cycle={bundle.cycle:.5f} "
                    f"attn_sup={bundle.attn_sup:.5f} d_T={bundle.d_t:.5f} d_N={bundle.d_n:.5f}",
                    flush=True,
                )
            if on_step is not None:
                on_step(state, epoch, step, bundle)
        state.epoch = epoch
        if out is not None:
            write_history(history, out / "history.csv")
            if epoch % config.checkpoint_every == 0:
                save_checkpoint(state, out / "checkpoints" / f"epoch_{epoch:04d}")
    if out is not None:
        write_history(history, out / "history.csv")
        save_checkpoint(state, out / "checkpoint")
    return state, history


# ----------------------------------------------------------------------------
# Inference helpers
# ----------------------------------------------------------------------------


@torch.no_grad()
def _batched(fn, images: Sequence[np.ndarray], batch: int = 32) -> List[np.ndarray]:
    outs = []
    for i in range(0, len(images), batch):
        x = _stack(images[i : i + batch])
        outs.extend(t.numpy() for t in fn(x))
    return outs


def synthesize_augmented(
    normal_images: Sequence[np.ndarray],
    state,
    threshold: float = 0.5,
    config: Optional[TrainConfig] = None,
    allow_untrained: bool = False,
) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Translate normal images into (tumor image, pseudo mask) pairs.

    ``state`` is a :class:`ModelState` or a checkpoint directory. The pseudo
    mask is the normal-side attention map binarized at ``threshold``.
    """
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    if not isinstance(state, ModelState):
        state = load_checkpoint(state, config)
    elif config is not None and state.config.model_hash() != config.model_hash():
        raise CheckpointError("model state was built from a different config")
    if state.epoch == 0 and not allow_untrained:
        raise CheckpointError("checkpoint is untrained (epoch 0)")
    state.eval()
    images = list(normal_images)

    def fn(x):
        t_g, _, m = translate(x, state.g_nt, state.a_n)
        return torch.cat([t_g.clamp(-1, 1), m], dim=1)

    outs = _batched(fn, images)
    results = []
    for o in outs:
        img, m = o[0], o[1]
        results.append((img.astype(np.float32), (m >= threshold).astype(np.float32)))
    return results


def predict_attention(state: ModelState, images: Sequence[np.ndarray], domain: str = TUMOR):
    state.eval()
    net = state.a_t if domain == TUMOR else state.a_n
    return _batched(lambda x: net(x), list(images))


def dice(pred: np.ndarray, truth: np.ndarray) -> float:
    pred, truth = pred.astype(bool), truth.astype(bool)
    denom = pred.sum() + truth.sum()
    if denom == 0:
        return 1.0
    return float(2 * (pred & truth).sum() / denom)


def attention_dice(state: ModelState, records: Sequence[SampleRecord], threshold: float = 0.5) -> float:
    """Mean Dice between thresholded tumor-side attention maps and ground-truth masks."""
    tumors = [r for r in records if r.domain == TUMOR]
    maps = predict_attention(state, [r.image for r in tumors], TUMOR)
    return float(np.mean([dice(m[0] >= threshold, r.mask) for m, r in zip(maps, tumors)]))
