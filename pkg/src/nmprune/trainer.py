"""End-to-end learning of N:M masks on a frozen model.

Per step: draw Gumbel noise for every block, build soft masks, evaluate
``task_loss(W * M~) - lambda * sum ||W * M~||^2`` and take an AdamW step on
the mask logits only. Final masks are the per-block argmax of the logits.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .container import read_container, write_container
from .data import as_batch_source
from .gumbel import GumbelSchedule, MaskDistribution, NoiseSource
from .masks import LayerMask, apply_prior, enumerate_candidates
from .models import Model
from .optim import AdamW, DivergenceError, check_divergence

CHECKPOINT_MAGIC = b"NMCK"


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    learning_rate: float = 1e-3
    weight_decay: float = 0.1
    lambda_reg: float = 1e-5
    prior_strength: float = 3.0
    logits_init_std: float = 0.01
    tau_start: float = 4.0
    tau_end: float = 0.05
    kappa_start: float = 1e2
    kappa_end: float = 5e2
    tau_decay: str = "geometric"
    seed: int = 0
    layers_to_skip: tuple = ()
    n: int = 2
    m: int = 4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    divergence_factor: float = 1e4

    def __post_init__(self):
        self.layers_to_skip = tuple(self.layers_to_skip)
        self.validate()

    def validate(self) -> None:
        if self.steps < 0:
            raise ConfigError("steps: must be >= 0")
        if self.batch_size <= 0:
            raise ConfigError("batch_size: must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate: must be positive")
        if self.lambda_reg < 0:
            raise ConfigError("lambda_reg: must be >= 0")
        if self.prior_strength < 0:
            raise ConfigError("prior_strength: must be >= 0")
        if self.logits_init_std < 0:
            raise ConfigError("logits_init_std: must be >= 0")
        try:
            self.schedule
        except ValueError as e:
            raise ConfigError(f"schedule: {e}") from None
        try:
            enumerate_candidates(self.n, self.m)
        except ValueError as e:
            raise ConfigError(f"n/m: {e}") from None

    @property
    def schedule(self) -> GumbelSchedule:
        return GumbelSchedule(self.tau_start, self.tau_end, self.kappa_start, self.kappa_end,
                              self.steps, self.tau_decay)

    def replace(self, **kw) -> "TrainConfig":
        d = asdict(self)
        d.update(kw)
        return TrainConfig(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True, default=list).encode()).hexdigest()[:16]

    @classmethod
    def from_mapping(cls, values: dict, strict: bool = True) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        kw = {}
        for key, raw in values.items():
            if key not in known:
                if strict:
                    raise ConfigError(f"{key}: unknown configuration key")
                continue
            kw[key] = _coerce(key, raw, known[key].default)
        return cls(**kw)


def _coerce(key: str, raw, default):
    if not isinstance(raw, str):
        return raw
    try:
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes")
        if isinstance(default, int):
            try:
                return int(raw)
            except ValueError:
                f = float(raw)
                if not f.is_integer():
                    raise
                return int(f)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(p.strip() for p in raw.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None
    return raw


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def format_config(values: dict) -> str:
    lines = []
    for k, v in values.items():
        if isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

METRIC_KEYS = ("step", "loss", "task_loss", "reg", "grad_norm", "mask_diff", "max_prob_mean",
               "max_prob_p10", "weight_norm", "tau", "kappa")


@dataclass
class TrainMetrics:
    records: list[dict] = field(default_factory=list)

    def append(self, rec: dict) -> None:
        self.records.append(rec)

    def column(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.records], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.records)

    def to_text(self) -> str:
        return "".join(format_record(r) + "\n" for r in self.records)

    @classmethod
    def from_text(cls, text: str) -> "TrainMetrics":
        return cls([parse_record(line) for line in text.splitlines() if line.strip()])

    def decile_means(self, key: str = "mask_diff") -> tuple[float, float]:
        """Mean of ``key`` over the first and the last 10% of steps."""
        col = self.column(key)
        k = max(1, len(col) // 10)
        return float(col[:k].mean()), float(col[-k:].mean())


def format_record(rec: dict) -> str:
    return " ".join(f"{k}={int(v) if k == 'step' else repr(float(v))}" for k, v in rec.items())


def parse_record(line: str) -> dict:
    rec = {}
    for tok in line.split():
        k, v = tok.split("=", 1)
        rec[k] = int(v) if k == "step" else float(v)
    return rec


def converged(metrics: TrainMetrics, ratio: float = 0.5) -> bool:
    """Mask sampling has settled: last-decile mean mask diff <= ``ratio`` * first-decile mean."""
    first, last = metrics.decile_means("mask_diff")
    return last <= ratio * first


# ---------------------------------------------------------------------------
# initialisation and objective
# ---------------------------------------------------------------------------


def resolve_skip(model: Model, names: Iterable[str]) -> set[str]:
    """Expand layer-group names to tensor names; unknown names are an error."""
    out: set[str] = set()
    for name in names:
        if name == "all":
            out.update(model.prunable)
        elif name in model.layer_groups:
            out.update(model.layer_groups[name])
        elif name in model.prunable:
            out.add(name)
        else:
            raise ConfigError(f"layers_to_skip: unknown layer {name!r}")
    return out


def _prior_dict(prior_masks) -> dict[str, LayerMask]:
    if prior_masks is None:
        return {}
    if isinstance(prior_masks, dict):
        return dict(prior_masks)
    return {lm.tensor_name: lm for lm in prior_masks}


def init_logits(model: Model, config: TrainConfig, prior_masks=None) -> list[MaskDistribution]:
    """Seeded ``N(0, logits_init_std)`` logits per block, shifted toward ``prior_masks`` if given."""
    cands = enumerate_candidates(config.n, config.m)
    priors = _prior_dict(prior_masks)
    skip = resolve_skip(model, config.layers_to_skip)
    rng = np.random.default_rng([config.seed, 1])
    dists = []
    for name in model.prunable:
        if name in skip:
            continue
        rows, cols = model.shape_of(name)
        if cols % config.m:
            raise ConfigError(f"{name}: width {cols} not divisible by m={config.m}")
        nb = rows * cols // config.m
        logits = rng.normal(0.0, config.logits_init_std, size=(nb, cands.size)) if config.logits_init_std else \
            np.zeros((nb, cands.size))
        if name in priors:
            pm = priors[name]
            if (pm.rows, pm.cols) != (rows, cols):
                raise ConfigError(f"{name}: prior shape {(pm.rows, pm.cols)} != weight shape {(rows, cols)}")
            if (pm.n, pm.m) != (config.n, config.m):
                raise ConfigError(f"{name}: prior pattern {pm.n}:{pm.m} != {config.n}:{config.m}")
            logits = apply_prior(logits, pm.block_indices.reshape(-1), config.prior_strength, cands)
        dists.append(MaskDistribution(name, rows, cols, logits, cands))
    return dists


def training_objective(model: Model, distributions: Sequence[MaskDistribution], batch, tau: float, kappa: float,
                       lam: float, noise: dict[str, np.ndarray]):
    """Return ``(objective, task_loss, reg)``; ``objective`` is the tensor to differentiate."""
    masked = {}
    for d in distributions:
        soft = d.soft_mask(noise[d.tensor_name], tau, kappa, dtype=model.dtype)
        masked[d.tensor_name] = ad.mul(ad.Tensor(model.params[d.tensor_name]), soft)
    task = model.loss(batch, masked)
    reg = None
    for w in masked.values():
        sq = ad.sum_of_squares(w)
        reg = sq if reg is None else ad.add(reg, sq)
    objective = task if (not lam or reg is None) else ad.sub(task, ad.scale(reg, lam))
    return objective, task, reg


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    logits: dict[str, np.ndarray]
    shapes: dict[str, tuple[int, int]]
    step: int
    config: dict
    rng_state: dict | None = None
    adam_t: int = 0
    adam: dict[str, np.ndarray] = field(default_factory=dict)
    prev_indices: dict[str, np.ndarray] = field(default_factory=dict)
    initial_loss: float | None = None

    @property
    def config_hash(self) -> str:
        return TrainConfig(**_config_kwargs(self.config)).digest()

    def layer_masks(self) -> list[LayerMask]:
        n, m = self.config["n"], self.config["m"]
        out = []
        for name, lg in self.logits.items():
            rows, cols = self.shapes[name]
            out.append(LayerMask(name, rows, cols, np.argmax(lg, axis=-1).reshape(rows, cols // m), n, m))
        return out

    def to_bytes(self) -> bytes:
        meta = {
            "step": self.step,
            "config": self.config,
            "config_hash": self.config_hash,
            "rng_state": self.rng_state,
            "adam_t": self.adam_t,
            "initial_loss": self.initial_loss,
            "shapes": {k: list(v) for k, v in self.shapes.items()},
            "names": list(self.logits),
        }
        arrays = {f"logits.{k}": v for k, v in self.logits.items()}
        arrays.update(self.adam)
        arrays.update({f"prev.{k}": v for k, v in self.prev_indices.items()})
        return write_container(CHECKPOINT_MAGIC, meta, arrays)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        meta, arrays = read_container(data, CHECKPOINT_MAGIC)
        names = meta["names"]
        ck = cls(
            logits={k: arrays[f"logits.{k}"] for k in names},
            shapes={k: tuple(v) for k, v in meta["shapes"].items()},
            step=meta["step"],
            config=meta["config"],
            rng_state=meta["rng_state"],
            adam_t=meta["adam_t"],
            adam={k: v for k, v in arrays.items() if k.startswith("adam.")},
            prev_indices={k[5:]: v for k, v in arrays.items() if k.startswith("prev.")},
            initial_loss=meta["initial_loss"],
        )
        if ck.config_hash != meta["config_hash"]:
            raise ValueError("checkpoint config hash mismatch")
        return ck

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def _config_kwargs(d: dict) -> dict:
    d = dict(d)
    d["layers_to_skip"] = tuple(d.get("layers_to_skip", ()))
    return d


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


class MaskTrainer:
    """Stateful mask-learning loop; :func:`train_masks` is the one-call wrapper."""

    def __init__(self, model: Model, data, config: TrainConfig, prior_masks=None,
                 distributions: list[MaskDistribution] | None = None):
        self.model = model
        self.data = as_batch_source(data)
        self.config = config
        self.schedule = config.schedule
        self.dists = distributions if distributions is not None else init_logits(model, config, prior_masks)
        self.cands = enumerate_candidates(config.n, config.m)
        self.noise = NoiseSource(int(np.random.SeedSequence([config.seed, 2]).generate_state(1)[0]))
        self.opt = AdamW({d.tensor_name: d.logits.data for d in self.dists}, lr=config.learning_rate,
                         betas=(config.adam_beta1, config.adam_beta2), eps=config.adam_eps,
                         weight_decay=config.weight_decay)
        self.step_idx = 0
        self.metrics = TrainMetrics()
        self.initial_loss: float | None = None
        self.prev = {d.tensor_name: np.argmax(d.logits.data, axis=-1) for d in self.dists}
        s = self.cands.masks.astype(np.int64)
        self._l1 = np.abs(s[:, None, :] - s[None, :, :]).sum(-1)
        self._param_count = sum(d.rows * d.cols for d in self.dists)

    @property
    def done(self) -> bool:
        return self.step_idx >= self.config.steps

    def step(self) -> dict:
        cfg = self.config
        step = self.step_idx
        tau, kappa = self.schedule.at(step)
        noise = {d.tensor_name: self.noise.gumbel(d.logits.shape) for d in self.dists}
        for d in self.dists:
            d.logits.grad = None
        batch = self.data.batch(step)
        objective, task, reg = training_objective(self.model, self.dists, batch, tau, kappa, cfg.lambda_reg, noise)
        task_value = task.item()
        try:
            check_divergence(task_value, self.initial_loss, step, cfg.divergence_factor)
        except DivergenceError as e:
            e.checkpoint = self.checkpoint()
            raise
        if self.initial_loss is None:
            self.initial_loss = task_value
        if self.dists:
            ad.backward(objective)
        grads = {d.tensor_name: (d.logits.grad if d.logits.grad is not None else np.zeros_like(d.logits.data))
                 for d in self.dists}
        grad_norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))

        # mask statistics are taken before the update, on this step's sample
        diff = 0
        maxp = []
        for d in self.dists:
            cur = d.sampled_indices(noise[d.tensor_name], kappa)
            diff += int(self._l1[self.prev[d.tensor_name], cur].sum())
            self.prev[d.tensor_name] = cur
            maxp.append(d.probabilities(kappa).max(axis=-1))
        maxp = np.concatenate(maxp) if maxp else np.ones(1)
        rec = {
            "step": step,
            "loss": objective.item(),
            "task_loss": task_value,
            "reg": reg.item() if reg is not None else 0.0,
            "grad_norm": grad_norm,
            "mask_diff": diff / max(self._param_count, 1),
            "max_prob_mean": float(maxp.mean()),
            "max_prob_p10": float(np.percentile(maxp, 10)),
            "weight_norm": remaining_weight_norm(self.model, self.hard_masks()),
            "tau": tau,
            "kappa": kappa,
        }
        if not all(math.isfinite(v) for v in rec.values()):
            raise DivergenceError(f"non-finite metric at step {step}: {rec}", step, self.checkpoint())
        self.opt.step(grads)
        self.metrics.append(rec)
        self.step_idx += 1
        return rec

    def run(self, until: int | None = None) -> None:
        stop = self.config.steps if until is None else min(until, self.config.steps)
        while self.step_idx < stop:
            self.step()

    def hard_masks(self) -> list[LayerMask]:
        return [d.hard_mask() for d in self.dists]

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            logits={d.tensor_name: d.logits.data.copy() for d in self.dists},
            shapes={d.tensor_name: (d.rows, d.cols) for d in self.dists},
            step=self.step_idx,
            config=json.loads(json.dumps(asdict(self.config), default=list)),
            rng_state=self.noise.get_state(),
            adam_t=self.opt.t,
            adam={k: v.copy() for k, v in self.opt.state_arrays().items()},
            prev_indices={k: v.copy() for k, v in self.prev.items()},
            initial_loss=self.initial_loss,
        )

    @classmethod
    def from_checkpoint(cls, model: Model, data, ck: Checkpoint, config: TrainConfig | None = None) -> "MaskTrainer":
        config = config or TrainConfig(**_config_kwargs(ck.config))
        if config.digest() != ck.config_hash:
            raise ConfigError("config differs from the checkpoint's config")
        cands = enumerate_candidates(config.n, config.m)
        dists = []
        for name, lg in ck.logits.items():
            if name not in model.params or model.shape_of(name) != tuple(ck.shapes[name]):
                raise ConfigError(f"{name}: checkpoint does not match the model")
            rows, cols = ck.shapes[name]
            dists.append(MaskDistribution(name, rows, cols, lg.copy(), cands))
        tr = cls(model, data, config, distributions=dists)
        tr.step_idx = ck.step
        if ck.rng_state is not None:
            tr.noise.set_state(ck.rng_state)
        tr.opt.load_state_arrays(ck.adam, ck.adam_t)
        tr.prev = {k: v.copy() for k, v in ck.prev_indices.items()}
        tr.initial_loss = ck.initial_loss
        return tr


def train_masks(model: Model, data, config: TrainConfig, prior=None, resume: Checkpoint | None = None):
    """Learn masks; returns ``(layer_masks, metrics, checkpoint)``.

    Metrics of a resumed run cover only the steps executed in this call.
    """
    if resume is not None:
        tr = MaskTrainer.from_checkpoint(model, data, resume, config)
    else:
        tr = MaskTrainer(model, data, config, prior)
    tr.run()
    return tr.hard_masks(), tr.metrics, tr.checkpoint()


def transfer_masks(model: Model, base, new_data, config: TrainConfig):
    """Start from ``base`` masks (prior) or ``base`` checkpoint logits, then train on ``new_data``.

    Returns ``(layer_masks, metrics, checkpoint)``.
    """
    if isinstance(base, Checkpoint):
        cands = enumerate_candidates(config.n, config.m)
        skip = resolve_skip(model, config.layers_to_skip)
        dists = []
        for name, lg in base.logits.items():
            if name in skip:
                continue
            rows, cols = base.shapes[name]
            if model.shape_of(name) != (rows, cols):
                raise ConfigError(f"{name}: base checkpoint does not match the model")
            dists.append(MaskDistribution(name, rows, cols, lg.copy(), cands))
        tr = MaskTrainer(model, new_data, config, distributions=dists)
    else:
        if isinstance(base, (bytes, bytearray)):
            from .coding import decode_masks
            base = decode_masks(bytes(base))
        shapes = {lm.tensor_name: (lm.rows, lm.cols) for lm in base}
        for name, shp in shapes.items():
            if name not in model.params or model.shape_of(name) != shp:
                raise ConfigError(f"{name}: base mask does not match the model")
        tr = MaskTrainer(model, new_data, config, prior_masks=base)
    tr.run()
    return tr.hard_masks(), tr.metrics, tr.checkpoint()


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _mask_dict(masks, model: Model) -> dict[str, np.ndarray]:
    if masks is None:
        return {}
    if isinstance(masks, dict):
        return {k: np.asarray(v) for k, v in masks.items()}
    return {lm.tensor_name: lm.to_dense(model.dtype) for lm in masks}


def remaining_weight_norm(model: Model, masks) -> float:
    """``sqrt(sum ||W * M||^2)`` over the masked tensors."""
    total = 0.0
    for name, mk in _mask_dict(masks, model).items():
        w = model.params[name].astype(np.float64) * mk
        total += float((w * w).sum())
    return math.sqrt(total)


def evaluate_loss(model: Model, masks, data) -> float:
    """Mean task loss (per token for the LM) with hard masks applied as ``W * M``."""
    batches = list(data) if not hasattr(data, "batch") else data
    if not batches:
        raise ValueError("evaluation data is empty")
    weights = {k: ad.Tensor(model.params[k] * m.astype(model.dtype)) for k, m in _mask_dict(masks, model).items()}
    total, count = 0.0, 0
    for batch in batches:
        n = np.asarray(batch[1]).size if model.spec.kind == "transformer_lm" else 1
        total += float(model.loss(batch, weights).data) * n
        count += n
    return total / count


def evaluate_perplexity(model: Model, masks, data) -> float:
    return math.exp(evaluate_loss(model, masks, data))


def _skip_sets(model: Model, strategy: str) -> list[tuple[str, list[str]]]:
    groups = list(model.layer_groups)
    if strategy == "none":
        return [("none", [])]
    if strategy == "all":
        return [("all", groups)]
    if strategy == "sweep":
        return [(f"dense:{g}", [g]) for g in groups]
    for prefix in ("first:", "last:"):
        if strategy.startswith(prefix):
            k = int(strategy[len(prefix):])
            if not 0 <= k <= len(groups):
                raise ConfigError(f"skip-layers: k={k} outside [0, {len(groups)}]")
            sel = groups[:k] if prefix == "first:" else groups[len(groups) - k:]
            return [(strategy, sel)]
    names = [s.strip() for s in strategy.split(",") if s.strip()]
    resolve_skip(model, names)
    return [(strategy, names)]


def layer_sensitivity(model: Model, masks, data, strategy: str = "sweep") -> list[dict]:
    """Perplexity (or exp of task loss) with chosen layers kept dense.

    ``strategy``: ``none``, ``all``, ``first:k``, ``last:k``, ``sweep`` (each
    layer dense on its own) or a comma list of layer/tensor names.
    """
    data = list(data)
    mdict = {lm.tensor_name: lm for lm in masks}
    rows = []
    for label, dense in _skip_sets(model, strategy):
        skip = resolve_skip(model, dense)
        active = [lm for name, lm in mdict.items() if name not in skip]
        loss = evaluate_loss(model, active, data)
        rows.append({"strategy": label, "dense_layers": ",".join(dense) or "-", "loss": loss, "ppl": math.exp(loss)})
    return rows


def format_sensitivity(rows: list[dict]) -> str:
    return "".join(
        f"strategy={r['strategy']} dense_layers={r['dense_layers']} loss={r['loss']!r} ppl={r['ppl']!r}\n" for r in rows
    )
