"""Desk-scale frozen models whose projection weights are the pruning targets.

Weights are stored as ``(out_features, in_features)`` so N:M blocks run along
the input axis, contiguous in row-major memory.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .container import read_container, write_container

MODEL_MAGIC = b"NMMD"
KINDS = ("linear", "mlp", "transformer_lm")


@dataclass
class ToyModelSpec:
    kind: str = "transformer_lm"
    vocab_size: int = 256
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    context_length: int = 128
    mlp_ratio: int = 4
    in_dim: int = 8
    hidden_dim: int = 16
    out_dim: int = 4
    m: int = 4
    dense_head: bool = True

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind == "transformer_lm":
            dims = {"embed_dim": self.embed_dim, "mlp hidden": self.embed_dim * self.mlp_ratio}
            if self.embed_dim % self.num_heads:
                raise ValueError("embed_dim must be divisible by num_heads")
        elif self.kind == "mlp":
            dims = {"in_dim": self.in_dim, "hidden_dim": self.hidden_dim}
        else:
            dims = {"in_dim": self.in_dim}
        for name, d in dims.items():
            if d <= 0 or d % self.m:
                raise ValueError(f"{name}={d} is not divisible by m={self.m}")


@dataclass
class Model:
    spec: ToyModelSpec
    params: dict[str, np.ndarray]
    prunable: list[str]
    layer_groups: dict[str, list[str]] = field(default_factory=dict)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "Model":
        return Model(self.spec, {k: v.astype(dtype) for k, v in self.params.items()},
                     list(self.prunable), {k: list(v) for k, v in self.layer_groups.items()})

    def copy(self) -> "Model":
        return self.astype(self.dtype)

    def shape_of(self, name: str) -> tuple[int, int]:
        return self.params[name].shape

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    # forward ---------------------------------------------------------------

    def forward(self, inputs, weights: dict[str, Tensor] | None = None, capture: dict | None = None) -> Tensor:
        """Run the model. ``weights`` overrides any named parameter (e.g. a masked copy).

        If ``capture`` is a dict, the input activations of every prunable
        projection are stored in it under the tensor name.
        """
        w = self.tensors()
        if weights:
            w.update(weights)
        kind = self.spec.kind
        if kind == "linear":
            return _proj(ad.as_tensor(np.asarray(inputs, dtype=self.dtype)), w, "linear.weight", capture)
        if kind == "mlp":
            x = ad.as_tensor(np.asarray(inputs, dtype=self.dtype))
            h = ad.gelu(_proj(x, w, "fc1.weight", capture))
            return _proj(h, w, "fc2.weight", capture)
        return self._transformer(np.asarray(inputs), w, capture)

    def loss(self, batch, weights: dict[str, Tensor] | None = None) -> Tensor:
        """Task loss: token cross entropy for the LM, mean squared error otherwise."""
        inputs, targets = batch
        out = self.forward(inputs, weights)
        if self.spec.kind == "transformer_lm":
            return ad.cross_entropy(out, np.asarray(targets))
        diff = ad.sub(out, np.asarray(targets, dtype=self.dtype))
        return ad.scale(ad.sum_of_squares(diff), 1.0 / diff.data.size)

    def _transformer(self, tokens: np.ndarray, w: dict[str, Tensor], capture) -> Tensor:
        s = self.spec
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        b, t = tokens.shape
        if t > s.context_length:
            raise ValueError(f"sequence length {t} exceeds context {s.context_length}")
        d, nh = s.embed_dim, s.num_heads
        hd = d // nh
        h = ad.add(ad.embedding_lookup(w["tok_emb"], tokens),
                   ad.reshape(ad.embedding_lookup(w["pos_emb"], np.arange(t)), (1, t, d)))
        causal = np.triu(np.full((t, t), -1e9, dtype=self.dtype), k=1)
        for i in range(s.num_layers):
            p = f"layers.{i}."
            a = ad.layer_norm(h, w[p + "ln1.gamma"], w[p + "ln1.beta"])
            q, k, v = (
                ad.transpose(ad.reshape(_proj(a, w, p + f"attn.{n}", capture), (b, t, nh, hd)), (0, 2, 1, 3))
                for n in "qkv"
            )
            att = ad.add(ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd)), causal)
            y = ad.matmul(ad.softmax(att, axis=-1), v)
            y = ad.reshape(ad.transpose(y, (0, 2, 1, 3)), (b, t, d))
            h = ad.add(h, _proj(y, w, p + "attn.o", capture))
            a = ad.layer_norm(h, w[p + "ln2.gamma"], w[p + "ln2.beta"])
            f = ad.gelu(_proj(a, w, p + "mlp.fc1", capture))
            h = ad.add(h, _proj(f, w, p + "mlp.fc2", capture))
        h = ad.layer_norm(h, w["ln_f.gamma"], w["ln_f.beta"])
        return _proj(h, w, "head", capture)


def _proj(x: Tensor, w: dict[str, Tensor], name: str, capture) -> Tensor:
    if capture is not None:
        capture.setdefault(name, []).append(x.data.reshape(-1, x.shape[-1]))
    return ad.matmul(x, ad.transpose(w[name]))


def build_model(spec: ToyModelSpec, seed: int = 0, dtype=np.float32) -> Model:
    """Deterministically initialise a model; returns it with its prunable tensor names."""
    spec.validate()
    rng = np.random.default_rng(seed)

    def lin(out, inp):
        return rng.normal(0.0, 1.0 / np.sqrt(inp), size=(out, inp))

    params: dict[str, np.ndarray] = {}
    prunable: list[str] = []
    groups: dict[str, list[str]] = {}
    if spec.kind == "linear":
        params["linear.weight"] = lin(spec.out_dim, spec.in_dim)
        prunable = ["linear.weight"]
        groups = {"linear": ["linear.weight"]}
    elif spec.kind == "mlp":
        params["fc1.weight"] = lin(spec.hidden_dim, spec.in_dim)
        params["fc2.weight"] = lin(spec.out_dim, spec.hidden_dim)
        prunable = ["fc1.weight", "fc2.weight"]
        groups = {"fc1": ["fc1.weight"], "fc2": ["fc2.weight"]}
    else:
        d, v, f = spec.embed_dim, spec.vocab_size, spec.embed_dim * spec.mlp_ratio
        params["tok_emb"] = rng.normal(0.0, 0.1, size=(v, d))
        params["pos_emb"] = rng.normal(0.0, 0.1, size=(spec.context_length, d))
        for i in range(spec.num_layers):
            p = f"layers.{i}."
            names = []
            for n in "qkvo":
                params[p + f"attn.{n}"] = lin(d, d)
                names.append(p + f"attn.{n}")
            # residual branches start small
            params[p + "attn.o"] *= 0.5
            params[p + "mlp.fc1"] = lin(f, d)
            params[p + "mlp.fc2"] = lin(d, f) * 0.5
            names += [p + "mlp.fc1", p + "mlp.fc2"]
            for ln in ("ln1", "ln2"):
                params[p + ln + ".gamma"] = np.ones(d)
                params[p + ln + ".beta"] = np.zeros(d)
            prunable += names
            groups[f"layers.{i}"] = names
        params["ln_f.gamma"] = np.ones(d)
        params["ln_f.beta"] = np.zeros(d)
        params["head"] = lin(v, d)
        if not spec.dense_head:
            if d % spec.m:
                raise ValueError(f"head input {d} is not divisible by m={spec.m}")
            prunable.append("head")
            groups["head"] = ["head"]
    params = {k: np.asarray(a, dtype=dtype) for k, a in params.items()}
    return Model(spec, params, prunable, groups)


def masked_weights(model: Model, masks: dict[str, np.ndarray]) -> dict[str, Tensor]:
    """Hard-masked copies ``W * M`` for the given tensors."""
    return {k: Tensor(model.params[k] * np.asarray(m, dtype=model.dtype)) for k, m in masks.items()}


def save_model(model: Model) -> bytes:
    meta = {"spec": asdict(model.spec), "prunable": model.prunable, "layer_groups": model.layer_groups}
    return write_container(MODEL_MAGIC, meta, model.params)


def load_model(data: bytes) -> Model:
    meta, arrays = read_container(data, MODEL_MAGIC)
    return Model(ToyModelSpec(**meta["spec"]), arrays, list(meta["prunable"]),
                 {k: list(v) for k, v in meta["layer_groups"].items()})


def pretrain_dense(model: Model, data, steps: int, lr: float = 3e-3, history: list | None = None) -> Model:
    """Train every parameter of a copy of ``model`` with Adam; the copy is returned.

    ``data`` is anything with ``batch(i)`` or a list of batches.
    """
    from .data import as_batch_source
    from .optim import AdamW, check_divergence

    out = model.copy()
    if steps <= 0:
        return out
    source = as_batch_source(data)
    opt = AdamW(out.params, lr=lr)
    initial = None
    for step in range(steps):
        ts = out.tensors(requires_grad=True)
        loss = out.loss(source.batch(step), ts)
        value = loss.item()
        check_divergence(value, initial, step)
        if initial is None:
            initial = value
        if history is not None:
            history.append(value)
        ad.backward(loss)
        opt.step({k: t.grad for k, t in ts.items()})
    return out


def fit_least_squares(model: Model, x, y) -> Model:
    """Closed-form dense fit of a ``linear`` model to regression data."""
    if model.spec.kind != "linear":
        raise ValueError("least-squares fit only applies to the linear model")
    sol, *_ = np.linalg.lstsq(np.asarray(x, np.float64), np.asarray(y, np.float64), rcond=None)
    out = model.copy()
    out.params["linear.weight"] = sol.T.astype(model.dtype)
    return out
